//! Classification and box-regression outputs, target coding, the multi-task
//! loss, and minibatch ROI sampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Init, Linear};
use crate::params::ParamStore;

/// Offsets per class, in `(dx, dy, dw, dh)` order.
pub const BOX_CODE: usize = 4;

/// Foreground needs at least this IoU with some ground truth.
pub const FG_IOU: f64 = 0.5;

/// Background proposals have maximum IoU in `[BG_IOU_LOW, FG_IOU)`.
pub const BG_IOU_LOW: f64 = 0.1;

/// Linear classifier over `[F_L; F_G]` and class-specific regressor over `F_L`.
#[derive(Clone, Copy, Debug)]
pub struct DetectionHead {
    pub cls: Linear,
    pub loc: Linear,
    pub classes: usize,
}

impl DetectionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        cls_inputs: usize,
        loc_inputs: usize,
        classes: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        DetectionHead {
            cls: Linear::new(store, group, "cls", cls_inputs, classes + 1, init, rng),
            loc: Linear::new(store, group, "loc", loc_inputs, BOX_CODE * classes, init, rng),
            classes,
        }
    }

    /// `softmax(f_cls([F_L; F_G]))`, `R×(C+1)` with column 0 = background.
    /// `F_G` is omitted when the global context module is disabled.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, local: Var, global: Option<Var>) -> Result<Var> {
        let input = match global {
            Some(gv) => g.concat(&[local, gv], 1)?,
            None => local,
        };
        let logits = self.cls.forward(g, store, input)?;
        g.softmax(logits)
    }

    /// `f_loc(F_L)`, `R×4C`.
    pub fn regress(&self, g: &mut Graph, store: &ParamStore, local: Var) -> Result<Var> {
        self.loc.forward(g, store, local)
    }
}

/// `((gx − px)/pw, (gy − py)/ph, ln(gw/pw), ln(gh/ph))` in centre/size form.
pub fn encode_targets(proposal: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (gw, gh) = (gt.width(), gt.height());
    if pw <= 0.0 || ph <= 0.0 || gw <= 0.0 || gh <= 0.0 {
        return Err(Error::Contract(format!(
            "box coding needs positive sizes: proposal {}, gt {}",
            proposal, gt
        )));
    }
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    Ok([(gx - px) / pw, (gy - py) / ph, (gw / pw).ln(), (gh / ph).ln()])
}

/// Inverse of [`encode_targets`]; no clipping.
pub fn decode_box(proposal: &BBox, offsets: &[f64]) -> BBox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + offsets[0] * pw;
    let cy = py + offsets[1] * ph;
    let w = pw * offsets[2].exp();
    let h = ph * offsets[3].exp();
    BBox::from_center(cx, cy, w, h)
}

pub fn smooth_l1(x: f64) -> f64 {
    kernels::smooth_l1(x)
}

/// `−ln p_u`, with `p_u` clamped to [`crate::autodiff::PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], u: usize) -> f64 {
    let pu = p[u];
    if pu < crate::autodiff::PROB_FLOOR {
        log::warn!("probability {:e} clamped before log", pu);
    }
    -pu.max(crate::autodiff::PROB_FLOOR).ln()
}

/// `L_cls(p, u) + [u ≥ 1]·Σ_k smooth_l1(t_u[k] − v[k])`.
pub fn multitask_loss(p: &[f64], u: usize, t_u: &[f64], v: &[f64]) -> f64 {
    let cls = cross_entropy(p, u);
    if u == 0 {
        return cls;
    }
    cls + t_u.iter().zip(v).map(|(t, v)| smooth_l1(t - v)).sum::<f64>()
}

/// Summed classification and localization losses over a batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub cls: Var,
    pub loc: Var,
}

/// Loss terms for `R` rows of class probabilities and `R×4C` offsets given
/// labels and `(dx, dy, dw, dh)` targets (ignored for background rows).
pub fn batch_loss(g: &mut Graph, probs: Var, offsets: Var, labels: &[usize], targets: &[[f64; 4]]) -> Result<BatchLoss> {
    if labels.len() != targets.len() {
        return Err(Error::dim(format!("{} labels, {} targets", labels.len(), targets.len())));
    }
    let nll = g.neg_log_pick(probs, labels)?;
    let cls = g.sum(nll);
    let picked = g.select_blocks(offsets, labels, BOX_CODE)?;
    let mut tv = Vec::with_capacity(labels.len() * BOX_CODE);
    for (&u, t) in labels.iter().zip(targets) {
        if u == 0 {
            tv.extend_from_slice(&[0.0; BOX_CODE]);
        } else {
            tv.extend_from_slice(t);
        }
    }
    let tv = g.input(crate::tensor::Tensor::new(vec![labels.len(), BOX_CODE], tv)?);
    let diff = g.sub(picked, tv)?;
    let sl = g.smooth_l1(diff);
    let loc = g.sum(sl);
    Ok(BatchLoss { cls, loc })
}

/// One sampled proposal with its training targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub proposal: BBox,
    /// 0 for background, otherwise the matched ground truth's class.
    pub label: usize,
    /// Regression target; zeros for background.
    pub target: [f64; 4],
}

impl RoiSample {
    pub fn is_foreground(&self) -> bool {
        self.label >= 1
    }
}

/// Largest IoU against the ground truths and the first index reaching it.
pub fn best_match(proposal: &BBox, gts: &[(BBox, usize)]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (b, _)) in gts.iter().enumerate() {
        let o = iou(proposal, b);
        if best.map_or(true, |(_, m)| o > m) {
            best = Some((i, o));
        }
    }
    best
}

/// Draws `quota` indices from a pool: without replacement while it lasts,
/// then uniformly with replacement for the remainder.
fn draw<R: Rng>(pool: &[usize], quota: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() || quota == 0 {
        return Vec::new();
    }
    let first = quota.min(pool.len());
    let mut out: Vec<usize> = sample(rng, pool.len(), first).into_iter().map(|i| pool[i]).collect();
    while out.len() < quota {
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    out
}

/// Samples `batch_size` ROIs with a `fg_fraction` foreground quota from one
/// image's proposals. Foreground: max IoU ≥ 0.5. Background: max IoU in
/// `[0.1, 0.5)`. A nonempty pool smaller than its quota is repeat-sampled;
/// an empty background pool leaves the batch short.
pub fn sample_rois<R: Rng>(
    image: &str,
    proposals: &[BBox],
    gts: &[(BBox, usize)],
    batch_size: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Result<Vec<RoiSample>> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut matched = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let m = best_match(p, gts);
        match m {
            Some((_, o)) if o >= FG_IOU => fg.push(i),
            Some((_, o)) if o >= BG_IOU_LOW => bg.push(i),
            _ => {}
        }
        matched.push(m);
    }
    if fg.is_empty() && bg.is_empty() {
        return Err(Error::Sampling(format!(
            "image {}: no foreground or background proposals among {}",
            image,
            proposals.len()
        )));
    }
    let fg_quota = (batch_size as f64 * fg_fraction).round() as usize;
    let bg_quota = batch_size - fg_quota;
    let fg_pick = draw(&fg, fg_quota, rng);
    let bg_pick = draw(&bg, bg_quota, rng);
    if bg.is_empty() {
        log::info!("image {}: empty background pool, batch shrinks to {}", image, fg_pick.len());
    }
    let mut out = Vec::with_capacity(fg_pick.len() + bg_pick.len());
    for &i in &fg_pick {
        let (gi, _) = matched[i].expect("foreground has a match");
        let (gt, class) = gts[gi];
        out.push(RoiSample {
            proposal: proposals[i],
            label: class,
            target: encode_targets(&proposals[i], &gt)?,
        });
    }
    for &i in &bg_pick {
        out.push(RoiSample {
            proposal: proposals[i],
            label: 0,
            target: [0.0; 4],
        });
    }
    Ok(out)
}
