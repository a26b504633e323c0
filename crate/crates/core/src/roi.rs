//! Fixed-size local and global feature cubes, channel fusion across
//! modalities, and the 1×1 embeddings feeding the attention modules.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::kernels::{self, adaptive_bin, Window};
use crate::nn::{Conv, Init};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Feature-map cell range `[lo, hi)` covered by `[a, b]` in image pixels:
/// floor on the low edge, ceil on the high edge, clipped to the map. Ranges
/// narrower than one cell collapse to the cell holding the centre.
fn feature_span(a: f64, b: f64, scale: f64, extent: usize) -> (usize, usize) {
    let lo = (a * scale).floor().clamp(0.0, extent as f64) as usize;
    let hi = (b * scale).ceil().clamp(0.0, extent as f64) as usize;
    if hi > lo {
        return (lo, hi);
    }
    let c = (0.5 * (a + b) * scale).floor().clamp(0.0, (extent - 1) as f64) as usize;
    (c, c + 1)
}

/// The `S×S` pooling windows of one proposal on an `h×w` feature map.
pub fn roi_windows(roi: &BBox, spatial_scale: f64, h: usize, w: usize, s: usize) -> Vec<Window> {
    let (c0, c1) = feature_span(roi.x1, roi.x2, spatial_scale, w);
    let (r0, r1) = feature_span(roi.y1, roi.y2, spatial_scale, h);
    let (rh, rw) = (r1 - r0, c1 - c0);
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        let (a, b) = adaptive_bin(i, s, rh);
        for j in 0..s {
            let (c, d) = adaptive_bin(j, s, rw);
            out.push(Window {
                row0: r0 + a,
                row1: r0 + b,
                col0: c0 + c,
                col1: c0 + d,
            });
        }
    }
    out
}

fn check_feature(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::dim(format!("feature map must be D×H×W, got {:?}", shape)));
    }
    Ok((shape[1], shape[2]))
}

/// Max-pools every proposal onto an `S×S` grid: `D'×H×W → R×D'×S×S`.
pub fn roi_pool(g: &mut Graph, feature: Var, rois: &[BBox], spatial_scale: f64, s: usize) -> Result<Var> {
    let (h, w) = check_feature(g.shape(feature))?;
    if rois.is_empty() || s == 0 {
        return Err(Error::dim("roi_pool needs at least one roi and S ≥ 1".to_string()));
    }
    let windows: Vec<Window> = rois
        .iter()
        .flat_map(|r| roi_windows(r, spatial_scale, h, w, s))
        .collect();
    g.window_max(feature, &windows, rois.len(), s, s)
}

/// Single-proposal pooling on plain tensors: `D'×H×W → D'×S×S`.
pub fn roi_pool_tensor(feature: &Tensor, roi: &BBox, spatial_scale: f64, s: usize) -> Result<Tensor> {
    let (h, w) = check_feature(feature.shape())?;
    let windows = roi_windows(roi, spatial_scale, h, w, s);
    let (out, _) = kernels::window_max(feature, &windows, 1, s, s)?;
    out.reshape(&[feature.shape()[0], s, s])
}

/// Adaptive max pool of the whole map onto `K×K`.
pub fn pool_global(g: &mut Graph, feature: Var, k: usize) -> Result<Var> {
    let (h, w) = check_feature(g.shape(feature))?;
    if k == 0 || k > h.min(w) {
        return Err(Error::dim(format!("global grid {} exceeds feature map {}x{}", k, h, w)));
    }
    g.adaptive_max_pool(feature, k, k)
}

/// Channel concatenation, first stream first (RGB before depth). Works on
/// `C×h×w` cubes and batched `R×C×h×w` cubes. A single stream passes through.
pub fn fuse(g: &mut Graph, streams: &[Var]) -> Result<Var> {
    match streams {
        [] => Err(Error::dim("fuse needs at least one stream".to_string())),
        [only] => Ok(*only),
        _ => {
            let rank = g.shape(streams[0]).len();
            if rank < 3 {
                return Err(Error::dim(format!("fuse expects feature cubes, got rank {}", rank)));
            }
            g.concat(streams, rank - 3)
        }
    }
}

/// Row-major channel fibres of a `D×K×K` cube: slice `i` is cell `(i / K, i % K)`.
pub fn slice_features(cube: &Tensor) -> Result<Vec<Vec<f64>>> {
    if cube.rank() != 3 {
        return Err(Error::dim(format!("slice_features of {:?}", cube.shape())));
    }
    let d = cube.shape()[0];
    let cells = cube.shape()[1] * cube.shape()[2];
    Ok((0..cells)
        .map(|i| (0..d).map(|c| cube.data()[c * cells + i]).collect())
        .collect())
}

/// Inverse of [`slice_features`].
pub fn assemble_slices(slices: &[Vec<f64>], k: usize) -> Result<Tensor> {
    if slices.len() != k * k || slices.is_empty() {
        return Err(Error::dim(format!("{} slices for a {}x{} grid", slices.len(), k, k)));
    }
    let d = slices[0].len();
    let mut data = vec![0.0; d * k * k];
    for (i, s) in slices.iter().enumerate() {
        for (c, &v) in s.iter().enumerate() {
            data[c * k * k + i] = v;
        }
    }
    Tensor::new(vec![d, k, k], data)
}

/// `D×K×K → K²×D`, one slice per row.
pub fn slice_matrix(g: &mut Graph, cube: Var) -> Result<Var> {
    let s = g.shape(cube).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("slice_matrix of {:?}", s)));
    }
    let flat = g.reshape(cube, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Fused cubes and their embeddings for a batch of proposals from one image.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    /// `R×2D'×S×S`, pre-embedding.
    pub local: Var,
    /// `2D'×K×K`, pre-embedding.
    pub global: Var,
    /// `R×D×S×S`.
    pub local_embedded: Var,
    /// `D×K×K`.
    pub global_embedded: Var,
    /// `K²×D`.
    pub global_slices: Var,
    /// `R×D`, spatial mean of `local_embedded`.
    pub z: Var,
}

/// Separate 1×1 embeddings for the global and local fused cubes.
#[derive(Clone, Copy, Debug)]
pub struct ContextEmbedding {
    pub global: Conv,
    pub local: Conv,
}

impl ContextEmbedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        fused_channels: usize,
        embed_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        ContextEmbedding {
            global: Conv::new(store, group, "global", fused_channels, embed_dim, 1, 1, 0, init, rng),
            local: Conv::new(store, group, "local", fused_channels, embed_dim, 1, 1, 0, init, rng),
        }
    }

    /// Embeds the global cube once. Can be shared by every proposal batch of
    /// the same image.
    pub fn embed_global(&self, g: &mut Graph, store: &ParamStore, global_fused: Var) -> Result<(Var, Var)> {
        let global_embedded = self.global.forward(g, store, global_fused)?;
        let slices = slice_matrix(g, global_embedded)?;
        Ok((global_embedded, slices))
    }

    pub fn embed_context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        global_fused: Var,
        local_fused: Var,
    ) -> Result<FusedFeatures> {
        let (global_embedded, global_slices) = self.embed_global(g, store, global_fused)?;
        self.embed_local(g, store, global_fused, global_embedded, global_slices, local_fused)
    }

    pub fn embed_local(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        global_fused: Var,
        global_embedded: Var,
        global_slices: Var,
        local_fused: Var,
    ) -> Result<FusedFeatures> {
        let local_embedded = self.local.forward(g, store, local_fused)?;
        let z = g.global_avg_pool(local_embedded)?;
        Ok(FusedFeatures {
            local: local_fused,
            global: global_fused,
            local_embedded,
            global_embedded,
            global_slices,
            z,
        })
    }
}
