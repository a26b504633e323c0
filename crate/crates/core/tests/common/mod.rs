#![allow(dead_code)]

use cmac::bbox::BBox;
use cmac::config::RunConfig;
use cmac::Tensor;
use rand_chacha::ChaCha8Rng;

pub const TINY: &[&str] = &["K=4", "S=2", "D=6", "d=6", "d_fc=8", "T_steps=2", "N_stn=1", "backbone_channels=4"];

pub fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in TINY {
        cfg.apply_override(kv).unwrap();
    }
    cfg
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Sum over every pixel of the tent-weighted value.
pub fn interpolation_oracle(plane: &[f64], s: usize, xs: f64, ys: f64) -> f64 {
    let xp = (xs + 1.0) / 2.0 * (s - 1) as f64;
    let yp = (ys + 1.0) / 2.0 * (s - 1) as f64;
    let mut v = 0.0;
    for n in 0..s {
        for m in 0..s {
            let wx = (1.0 - (xp - m as f64).abs()).max(0.0);
            let wy = (1.0 - (yp - n as f64).abs()).max(0.0);
            v += plane[n * s + m] * wx * wy;
        }
    }
    v
}

/// Reference max over the cells whose index falls in each adaptive bin.
pub fn adaptive_oracle(x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inside = |cell: usize, bin: usize, bins: usize, extent: usize| {
        let lo = (bin * extent) as f64 / bins as f64;
        let hi = ((bin + 1) * extent) as f64 / bins as f64;
        (cell as f64) >= lo.floor() && (cell as f64) < hi.ceil()
    };
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for r in 0..h {
                    for col in 0..w {
                        if inside(r, i, oh, h) && inside(col, j, ow, w) {
                            best = best.max(x.data()[(ch * h + r) * w + col]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// ROI pooling from the definition: project the box onto the map (floor
/// low, ceil high, at least one cell), crop, and adaptive-max the crop.
pub fn roi_oracle(x: &Tensor, roi: &BBox, scale: f64, s: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let span = |a: f64, b: f64, extent: usize| {
        let lo = ((a * scale).floor().max(0.0) as usize).min(extent);
        let hi = ((b * scale).ceil().max(0.0) as usize).min(extent);
        if hi > lo {
            (lo, hi)
        } else {
            let mid = ((0.5 * (a + b) * scale).floor().max(0.0) as usize).min(extent - 1);
            (mid, mid + 1)
        }
    };
    let (c0, c1) = span(roi.x1, roi.x2, w);
    let (r0, r1) = span(roi.y1, roi.y2, h);
    let mut crop = Vec::new();
    for ch in 0..c {
        for r in r0..r1 {
            for col in c0..c1 {
                crop.push(x.data()[(ch * h + r) * w + col]);
            }
        }
    }
    let crop = Tensor::new(vec![c, r1 - r0, c1 - c0], crop).unwrap();
    adaptive_oracle(&crop, s, s)
}

/// All-point AP as the mean, over ground truths, of the best precision
/// reached at or after the rank where that ground truth is recalled.
pub fn ap_oracle(hits: &[bool], total: usize) -> f64 {
    let mut precision = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut sum = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            sum += precision[k..].iter().copied().fold(0.0, f64::max);
        }
    }
    sum / total as f64
}
