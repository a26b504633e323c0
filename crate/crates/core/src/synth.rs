//! Synthetic RGB-D scenes: textured objects at distinct depths in front of a
//! floor and a wall, the geocentric depth encoding, proposal jittering,
//! flipping, and the on-disk dataset layout.
//!
//! Everything here is plain IEEE arithmetic plus `libm` (`sqrt`, `acos`,
//! `floor`, `exp`, `log`), and randomness comes from `ChaCha8Rng`, so a
//! `(spec, seed)` pair gives the same bytes on every platform.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::params::{read_records, write_records};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Checker,
    Stripes,
    Dots,
}

/// Depth structure of an object's visible surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relief {
    Flat,
    /// Top edge nearer than the bottom edge.
    Slanted,
    /// Rounded towards the camera.
    Bulged,
}

/// An object kind and the class it carries. `labels[0]` applies in plain
/// scenes and `labels[1]` in scenes showing the wall marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Archetype {
    pub shape: Shape,
    pub texture: Texture,
    pub relief: Relief,
    pub labels: [usize; 2],
}

/// Pinhole camera looking along +z, `y` down, mounted `height` metres above
/// the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: f64,
    /// Unit vector pointing down, in camera coordinates.
    pub gravity: [f64; 3],
}

impl Camera {
    /// Viewing ray through the centre of pixel `(u, v)`, with unit z.
    pub fn ray(&self, u: usize, v: usize) -> [f64; 3] {
        [
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]
    }

    /// Height above the floor of a camera-frame point.
    pub fn height_of(&self, p: [f64; 3]) -> f64 {
        self.height - dot(self.gravity, p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: usize,
    pub archetypes: Vec<Archetype>,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Object box side range in pixels.
    pub object_size: (f64, f64),
    pub occlusion_prob: f64,
    /// Object depth planes are drawn from this range, metres.
    pub depth_range: (f64, f64),
    pub wall_depth: f64,
    pub camera: Camera,
    /// Probability that a scene shows the wall marker.
    pub marker_prob: f64,
    /// Probability of one unlabelled textured decal flat on the wall.
    pub decal_prob: f64,
    pub noise_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        use Relief::*;
        use Shape::*;
        use Texture::*;
        let a = |shape, texture, relief, plain, marked| Archetype {
            shape,
            texture,
            relief,
            labels: [plain, marked],
        };
        SceneSpec {
            image_size: 64,
            classes: 3,
            archetypes: vec![
                a(Rectangle, Checker, Flat, 1, 1),
                a(Rectangle, Stripes, Slanted, 1, 1),
                a(Rectangle, Checker, Slanted, 2, 2),
                a(Rectangle, Stripes, Flat, 2, 2),
                a(Ellipse, Dots, Bulged, 2, 3),
                a(Triangle, Dots, Bulged, 3, 3),
            ],
            objects: (2, 4),
            object_size: (14.0, 26.0),
            occlusion_prob: 0.3,
            depth_range: (1.5, 4.0),
            wall_depth: 5.0,
            camera: Camera {
                fx: 60.0,
                fy: 60.0,
                cx: 32.0,
                cy: 32.0,
                height: 1.2,
                gravity: [0.0, 1.0, 0.0],
            },
            marker_prob: 0.5,
            decal_prob: 0.3,
            noise_std: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("class count {} < 2", self.classes));
        }
        if self.image_size < 16 {
            return bad(format!("image size {} < 16", self.image_size));
        }
        let (lo, hi) = self.objects;
        if lo < 1 || hi < lo {
            return bad(format!("object count range {}..={}", lo, hi));
        }
        let (smin, smax) = self.object_size;
        if !(smin >= 2.0 && smax >= smin && smax < self.image_size as f64) {
            return bad(format!("object size range {}..{}", smin, smax));
        }
        let (dmin, dmax) = self.depth_range;
        if !(dmin > 0.0 && dmax > dmin && self.wall_depth > dmax) {
            return bad(format!(
                "depth range {}..{} with wall at {}",
                dmin, dmax, self.wall_depth
            ));
        }
        for p in [self.occlusion_prob, self.marker_prob, self.decal_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {} outside [0, 1]", p));
            }
        }
        let g = self.camera.gravity;
        if (libm::sqrt(dot(g, g)) - 1.0).abs() > 1e-9 || self.camera.height <= 0.0 {
            return bad("gravity must be a unit vector and camera height positive".to_string());
        }
        if self.archetypes.is_empty() {
            return bad("no archetypes".to_string());
        }
        for c in 1..=self.classes {
            if !self.archetypes.iter().any(|a| a.labels.contains(&c)) {
                return bad(format!("class {} has no archetype", c));
            }
        }
        if let Some(a) = self.archetypes.iter().find(|a| a.labels.iter().any(|&l| l == 0 || l > self.classes)) {
            return bad(format!("archetype {:?} has a label outside 1..={}", a, self.classes));
        }
        Ok(())
    }

    /// Pairs of classes that share a texture but differ in depth structure.
    pub fn texture_ambiguous_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in &self.archetypes {
            for b in &self.archetypes {
                for (&ca, &cb) in a.labels.iter().zip(&b.labels) {
                    if ca < cb && a.texture == b.texture && a.relief != b.relief && !out.contains(&(ca, cb)) {
                        out.push((ca, cb));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub id: String,
    /// `3×H×W` in `[0, 1]`.
    pub rgb: Tensor,
    /// `3×H×W`: disparity, height, gravity angle, each in `[0, 1]`.
    pub geo: Tensor,
    pub gts: Vec<(BBox, usize)>,
}

impl DetectionSample {
    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gts.iter().map(|(b, _)| *b).collect()
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn back_project(camera: &Camera, depth: &[f64], w: usize, u: usize, v: usize) -> [f64; 3] {
    let r = camera.ray(u, v);
    let z = depth[v * w + u];
    [r[0] * z, r[1] * z, z]
}

/// Disparity, height above the floor, and normal-to-up angle (radians),
/// before normalisation.
pub fn geocentric_raw(depth: &Tensor, camera: &Camera) -> Result<Tensor> {
    let s = depth.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim(format!("depth map must be 1×H×W, got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let d = depth.data();
    if let Some(i) = d.iter().position(|&z| !(z > 0.0 && z.is_finite())) {
        return Err(Error::Contract(format!(
            "depth {} at pixel ({}, {}) is not positive",
            d[i],
            i % w,
            i / w
        )));
    }
    let up = camera.gravity.map(|g| -g);
    let mut out = vec![0.0; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let p = back_project(camera, d, w, u, v);
            out[i] = 1.0 / d[i];
            out[h * w + i] = camera.height_of(p);
            let (ul, ur) = (u.saturating_sub(1), (u + 1).min(w - 1));
            let (vt, vb) = (v.saturating_sub(1), (v + 1).min(h - 1));
            let du = sub3(back_project(camera, d, w, ur, v), back_project(camera, d, w, ul, v));
            let dv = sub3(back_project(camera, d, w, u, vb), back_project(camera, d, w, u, vt));
            let mut n = cross(du, dv);
            let len = libm::sqrt(dot(n, n));
            let angle = if len > 0.0 {
                if dot(n, p) > 0.0 {
                    n = n.map(|c| -c);
                }
                libm::acos((dot(n, up) / len).clamp(-1.0, 1.0))
            } else {
                0.0
            };
            out[2 * h * w + i] = angle;
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// [`geocentric_raw`] with every channel min-max scaled to `[0, 1]`; a
/// constant channel maps to zeros.
pub fn geocentric_encode(depth: &Tensor, camera: &Camera) -> Result<Tensor> {
    let mut raw = geocentric_raw(depth, camera)?;
    let plane = raw.len() / 3;
    for c in 0..3 {
        let ch = &mut raw.data_mut()[c * plane..(c + 1) * plane];
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for x in ch.iter_mut() {
            *x = if span > 1e-12 { (*x - lo) / span } else { 0.0 };
        }
    }
    Ok(raw)
}

/// Background depth along each pixel ray: the floor where it is hit in
/// front of the wall, otherwise the wall.
pub fn background_depth(spec: &SceneSpec) -> Tensor {
    let n = spec.image_size;
    let cam = &spec.camera;
    let mut d = vec![spec.wall_depth; n * n];
    for v in 0..n {
        for u in 0..n {
            let down = dot(cam.gravity, cam.ray(u, v));
            if down > 0.0 {
                let z = cam.height / down;
                if z < spec.wall_depth {
                    d[v * n + u] = z;
                }
            }
        }
    }
    Tensor::from_parts(vec![1, n, n], d)
}

struct Placed {
    bbox: BBox,
    archetype: Archetype,
    depth: f64,
    colors: [[f64; 3]; 2],
}

fn inside(shape: Shape, a: f64, b: f64) -> bool {
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => (2.0 * a - 1.0) * (2.0 * a - 1.0) + (2.0 * b - 1.0) * (2.0 * b - 1.0) <= 1.0,
        Shape::Triangle => (2.0 * a - 1.0).abs() <= b,
    }
}

fn texture_bit(texture: Texture, a: f64, b: f64) -> bool {
    match texture {
        Texture::Checker => (libm::floor(4.0 * a) + libm::floor(4.0 * b)) as i64 % 2 == 0,
        Texture::Stripes => libm::floor(6.0 * a) as i64 % 2 == 0,
        Texture::Dots => {
            let fa = 3.0 * a - libm::floor(3.0 * a) - 0.5;
            let fb = 3.0 * b - libm::floor(3.0 * b) - 0.5;
            fa * fa + fb * fb < 0.09
        }
    }
}

const SLANT: f64 = 0.6;
const BULGE: f64 = 0.4;

fn surface_depth(relief: Relief, z0: f64, a: f64, b: f64) -> f64 {
    match relief {
        Relief::Flat => z0,
        Relief::Slanted => z0 + SLANT * (b - 0.5),
        Relief::Bulged => {
            let r2 = (2.0 * a - 1.0) * (2.0 * a - 1.0) + (2.0 * b - 1.0) * (2.0 * b - 1.0);
            z0 - BULGE * libm::sqrt((1.0 - r2).max(0.0))
        }
    }
}

fn random_box<R: Rng>(spec: &SceneSpec, rng: &mut R) -> BBox {
    let n = spec.image_size as f64;
    let (smin, smax) = spec.object_size;
    let w = libm::floor(rng.gen_range(smin..=smax));
    let h = libm::floor(rng.gen_range(smin..=smax));
    let x = libm::floor(rng.gen_range(0.0..=n - w));
    let y = libm::floor(rng.gen_range(0.0..=n - h));
    BBox::new(x, y, x + w, y + h)
}

fn overlapping_box<R: Rng>(spec: &SceneSpec, anchor: &BBox, rng: &mut R) -> Option<BBox> {
    let n = spec.image_size as f64;
    for _ in 0..100 {
        let (smin, smax) = spec.object_size;
        let w = libm::floor(rng.gen_range(smin..=smax));
        let h = libm::floor(rng.gen_range(smin..=smax));
        let (ax, ay) = anchor.center();
        let cx = ax + rng.gen_range(-0.4..=0.4) * anchor.width();
        let cy = ay + rng.gen_range(-0.4..=0.4) * anchor.height();
        let x = libm::floor((cx - w / 2.0).clamp(0.0, n - w));
        let y = libm::floor((cy - h / 2.0).clamp(0.0, n - h));
        let b = BBox::new(x, y, x + w, y + h);
        if iou(&b, anchor) >= 0.2 {
            return Some(b);
        }
    }
    None
}

fn random_colors<R: Rng>(rng: &mut R) -> [[f64; 3]; 2] {
    let bright: [f64; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
    [bright, bright.map(|c| 0.25 * c)]
}

/// Renders one scene. Boxes are amodal: an occluded object keeps its full
/// extent.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<DetectionSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let marked = rng.gen_bool(spec.marker_prob);
    let count = rng.gen_range(spec.objects.0..=spec.objects.1);

    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for k in 0..count {
        let occlude = k > 0 && rng.gen_bool(spec.occlusion_prob);
        let placed = if occlude {
            let anchor = boxes[rng.gen_range(0..boxes.len())];
            overlapping_box(spec, &anchor, &mut rng)
        } else {
            (0..200)
                .map(|_| random_box(spec, &mut rng))
                .find(|b| boxes.iter().all(|o| iou(b, o) < 0.3))
        };
        match placed {
            Some(b) => boxes.push(b),
            None => log::debug!("scene {}: object {} could not be placed", seed, k),
        }
    }

    // Distinct planes: one jittered stratum of the depth range per object.
    let (dmin, dmax) = spec.depth_range;
    let stride = (dmax - dmin) / boxes.len() as f64;
    let mut strata: Vec<usize> = (0..boxes.len()).collect();
    for i in (1..strata.len()).rev() {
        strata.swap(i, rng.gen_range(0..=i));
    }
    let mut objects: Vec<Placed> = boxes
        .iter()
        .zip(&strata)
        .map(|(&bbox, &s)| Placed {
            bbox,
            archetype: spec.archetypes[rng.gen_range(0..spec.archetypes.len())],
            depth: dmin + stride * (s as f64 + rng.gen_range(0.2..0.8)),
            colors: random_colors(&mut rng),
        })
        .collect();

    let mut depth = background_depth(spec).into_data();
    let wall_tint: [f64; 3] = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    let floor_tint = rng.gen_range(-0.05..0.05);
    let mut rgb = vec![0.0; 3 * n * n];
    for v in 0..n {
        for u in 0..n {
            let i = v * n + u;
            let base = if depth[i] < spec.wall_depth {
                let shade = 1.0 - 0.06 * depth[i];
                [0.42 + floor_tint, 0.34 + floor_tint, 0.26 + floor_tint].map(|c| c * shade)
            } else {
                [0.56 + wall_tint[0], 0.56 + wall_tint[1], 0.52 + wall_tint[2]]
            };
            for c in 0..3 {
                rgb[c * n * n + i] = base[c];
            }
        }
    }
    let paint_wall = |rgb: &mut Vec<f64>, depth: &[f64], b: &BBox, color: &dyn Fn(f64, f64) -> [f64; 3]| {
        for v in b.y1 as usize..b.y2 as usize {
            for u in b.x1 as usize..b.x2 as usize {
                let i = v * n + u;
                if depth[i] >= spec.wall_depth {
                    let a = (u as f64 + 0.5 - b.x1) / b.width();
                    let bb = (v as f64 + 0.5 - b.y1) / b.height();
                    let col = color(a, bb);
                    for c in 0..3 {
                        rgb[c * n * n + i] = col[c];
                    }
                }
            }
        }
    };
    if marked {
        let x = libm::floor(rng.gen_range(2.0..(n as f64 - 16.0)));
        let y = libm::floor(rng.gen_range(2.0..(n as f64 / 4.0)));
        let window = BBox::new(x, y, x + 14.0, y + 9.0);
        paint_wall(&mut rgb, &depth, &window, &|_, _| [0.86, 0.95, 1.0]);
    }
    if rng.gen_bool(spec.decal_prob) {
        let decal = random_box(spec, &mut rng);
        let colors = random_colors(&mut rng);
        let texture = if rng.gen_bool(0.5) { Texture::Checker } else { Texture::Stripes };
        paint_wall(&mut rgb, &depth, &decal, &|a, b| colors[usize::from(!texture_bit(texture, a, b))]);
    }

    // Far to near, with a depth test so relief can still interleave.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for o in &objects {
        let b = o.bbox;
        for v in b.y1 as usize..b.y2 as usize {
            for u in b.x1 as usize..b.x2 as usize {
                let a = (u as f64 + 0.5 - b.x1) / b.width();
                let bb = (v as f64 + 0.5 - b.y1) / b.height();
                if !inside(o.archetype.shape, a, bb) {
                    continue;
                }
                let z = surface_depth(o.archetype.relief, o.depth, a, bb);
                let i = v * n + u;
                if z < depth[i] {
                    depth[i] = z;
                    let col = o.colors[usize::from(!texture_bit(o.archetype.texture, a, bb))];
                    for c in 0..3 {
                        rgb[c * n * n + i] = col[c];
                    }
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        for x in rgb.iter_mut() {
            *x = (*x + spec.noise_std * crate::tensor::rand_distr_free::standard_normal(&mut rng)).clamp(0.0, 1.0);
        }
    }

    // Restore placement order so box lists do not depend on depth sorting.
    objects.sort_by(|a, b| (a.bbox.y1, a.bbox.x1).partial_cmp(&(b.bbox.y1, b.bbox.x1)).unwrap());
    let gts = objects
        .iter()
        .map(|o| (o.bbox, o.archetype.labels[usize::from(marked)]))
        .collect();
    let depth = Tensor::new(vec![1, n, n], depth)?;
    Ok(DetectionSample {
        id: format!("s{:06}", seed),
        rgb: Tensor::new(vec![3, n, n], rgb)?,
        geo: geocentric_encode(&depth, &spec.camera)?,
        gts,
    })
}

/// Maximum centre shift as a fraction of the box size, and maximum scale
/// factor (`≥ 1`) applied to each side independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { shift: 0.25, scale: 1.4 }
    }
}

fn jitter_box<R: Rng>(gt: &BBox, jitter: Jitter, size: f64, rng: &mut R) -> BBox {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let spread = libm::log(jitter.scale);
    let draw_scale = |rng: &mut R| if spread > 0.0 { libm::exp(rng.gen_range(-spread..=spread)) } else { 1.0 };
    let sw = draw_scale(rng);
    let sh = draw_scale(rng);
    let (dx, dy) = if jitter.shift > 0.0 {
        (
            rng.gen_range(-jitter.shift..=jitter.shift) * w,
            rng.gen_range(-jitter.shift..=jitter.shift) * h,
        )
    } else {
        (0.0, 0.0)
    };
    // Whole pixels, so flipping is exact.
    let b = BBox::from_center(cx + dx, cy + dy, w * sw, h * sh);
    let b = BBox::new(libm::round(b.x1), libm::round(b.y1), libm::round(b.x2), libm::round(b.y2)).clip(size, size);
    if b.width() < 2.0 || b.height() < 2.0 {
        *gt
    } else {
        b
    }
}

/// Class-agnostic stand-in for an external proposal generator: jittered
/// copies of every ground truth plus random boxes. The first copy of each
/// ground truth uses half the jitter.
pub fn make_proposals(
    gts: &[BBox],
    n_per_gt: usize,
    jitter: Jitter,
    n_background: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<BBox>> {
    if n_per_gt == 0 {
        return Err(Error::Contract("n_per_gt must be at least 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = image_size as f64;
    let mut out = Vec::with_capacity(gts.len() * n_per_gt + n_background);
    let half = Jitter {
        shift: jitter.shift / 2.0,
        scale: libm::sqrt(jitter.scale),
    };
    for gt in gts {
        for k in 0..n_per_gt {
            out.push(jitter_box(gt, if k == 0 { half } else { jitter }, size, &mut rng));
        }
    }
    for _ in 0..n_background {
        let w = libm::floor(rng.gen_range(8.0..=size / 2.0));
        let h = libm::floor(rng.gen_range(8.0..=size / 2.0));
        let x = libm::floor(rng.gen_range(0.0..=size - w));
        let y = libm::floor(rng.gen_range(0.0..=size - h));
        out.push(BBox::new(x, y, x + w, y + h));
    }
    Ok(out)
}

fn mirror(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::from_parts(s.to_vec(), data)
}

/// Mirrors the sample and proposals unconditionally.
pub fn flip(sample: &DetectionSample, proposals: &[BBox]) -> (DetectionSample, Vec<BBox>) {
    let w = sample.width() as f64;
    let flipped = DetectionSample {
        id: sample.id.clone(),
        rgb: mirror(&sample.rgb),
        geo: mirror(&sample.geo),
        gts: sample.gts.iter().map(|(b, c)| (b.flip_horizontal(w), *c)).collect(),
    };
    (flipped, proposals.iter().map(|b| b.flip_horizontal(w)).collect())
}

/// Flips with probability `prob`; the flag reports whether it did.
pub fn flip_augment<R: Rng>(
    sample: &DetectionSample,
    proposals: &[BBox],
    prob: f64,
    rng: &mut R,
) -> Result<(DetectionSample, Vec<BBox>, bool)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Contract(format!("flip probability {} outside [0, 1]", prob)));
    }
    if rng.gen_bool(prob) {
        let (s, p) = flip(sample, proposals);
        Ok((s, p, true))
    } else {
        Ok((sample.clone(), proposals.to_vec(), false))
    }
}

const MANIFEST: &str = "manifest";

/// Writes `manifest`, `<id>.rgb`, `<id>.geo`, and `<id>.boxes` into `dir`.
pub fn save_dataset(samples: &[DetectionSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        manifest.push_str(&format!("{} {}\n", s.id, s.gts.len()));
        write_records(&dir.join(format!("{}.rgb", s.id)), &[("rgb", &s.rgb)])?;
        write_records(&dir.join(format!("{}.geo", s.id)), &[("geo", &s.geo)])?;
        let mut boxes = String::new();
        for (b, c) in &s.gts {
            boxes.push_str(&format!("{} {:?} {:?} {:?} {:?}\n", c, b.x1, b.y1, b.x2, b.y2));
        }
        let path = dir.join(format!("{}.boxes", s.id));
        fs::write(&path, boxes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn single_record(path: &Path, name: &str) -> Result<Tensor> {
    let mut records = read_records(path)?;
    if records.len() != 1 || records[0].0 != name {
        return Err(Error::format(path, 0, format!("expected one record named {}", name)));
    }
    Ok(records.pop().unwrap().1)
}

fn parse_boxes(path: &Path) -> Result<Vec<(BBox, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = (|| {
            if fields.len() != 5 {
                return None;
            }
            let c: usize = fields[0].parse().ok()?;
            let v: Vec<f64> = fields[1..].iter().map(|f| f.parse().ok()).collect::<Option<_>>()?;
            Some((BBox::new(v[0], v[1], v[2], v[3]), c))
        })();
        match parsed {
            Some(b) => out.push(b),
            None => return Err(Error::format(path, offset, format!("bad box line {:?}", line))),
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DetectionSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (id, count) = match fields.as_slice() {
            [id, count] => match count.parse::<usize>() {
                Ok(c) => (id.to_string(), c),
                Err(_) => return Err(Error::format(&path, offset, format!("bad gt count in {:?}", line))),
            },
            _ => return Err(Error::format(&path, offset, format!("bad manifest line {:?}", line))),
        };
        let rgb = single_record(&dir.join(format!("{}.rgb", id)), "rgb")?;
        let geo = single_record(&dir.join(format!("{}.geo", id)), "geo")?;
        let boxes_path = dir.join(format!("{}.boxes", id));
        let gts = parse_boxes(&boxes_path)?;
        if gts.len() != count {
            return Err(Error::format(
                &path,
                offset,
                format!("{} lists {} boxes but {} has {}", id, count, boxes_path.display(), gts.len()),
            ));
        }
        if rgb.shape().len() != 3 || rgb.shape()[0] != 3 || rgb.shape() != geo.shape() {
            return Err(Error::format(
                &path,
                offset,
                format!("{}: rgb {:?} and geo {:?} must both be 3×H×W", id, rgb.shape(), geo.shape()),
            ));
        }
        samples.push(DetectionSample { id, rgb, geo, gts });
        offset += line.len() as u64 + 1;
    }
    Ok(samples)
}
