//! Forward and backward loops for the tape operations.
//!
//! Everything here works on plain slices and [`Tensor`] values; the tape in
//! [`crate::autodiff`] decides what to save and when to call which rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Four interleaved partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `da += dy · bᵀ` with `dy: m×n`, `b: k×n`, `da: m×k`.
pub(crate) fn matmul_nt_acc(dy: &[f64], b: &[f64], da: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(dyr, br);
        }
    }
}

/// `db += aᵀ · dy` with `a: m×k`, `dy: m×n`, `db: k×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], dy: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let dbr = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbr.iter_mut().zip(dyr) {
                *d += aip * g;
            }
        }
    }
}

pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = b.len();
    let last = *x.shape().last().unwrap();
    if b.rank() != 1 || x.rank() > 2 || last != n {
        return Err(Error::dim(format!(
            "row bias {:?} for input {:?}",
            b.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(out)
}

pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if !(x.rank() == 3 || x.rank() == 4) || b.rank() != 1 || s[s.len() - 3] != b.len() {
        return Err(Error::dim(format!(
            "channel bias {:?} for input {:?}",
            b.shape(),
            s
        )));
    }
    let c = b.len();
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut out = x.clone();
    for (i, block) in out.data_mut().chunks_mut(plane).enumerate() {
        let bv = b.data()[i % c];
        for v in block {
            *v += bv;
        }
    }
    Ok(out)
}

/// Max-subtracted softmax over the last axis (vector or matrix rows).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() > 2 {
        return Err(Error::dim(format!("softmax of {:?}", x.shape())));
    }
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    let (batch, spatial) = match input.len() {
        3 => (1, input),
        4 => (input[0], &input[1..]),
        _ => return Err(Error::dim(format!("conv2d input {:?}", input))),
    };
    if kernels.len() != 4 || kernels[1] != spatial[0] {
        return Err(Error::dim(format!(
            "conv2d kernels {:?} for input {:?}",
            kernels, input
        )));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d stride must be positive".to_string()));
    }
    let (h, w) = (spatial[1], spatial[2]);
    let (kh, kw) = (kernels[2], kernels[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::dim(format!(
            "conv2d kernel {}x{} larger than padded input {}x{} (pad {})",
            kh, kw, h, w, pad
        )));
    }
    Ok(ConvDims {
        batch,
        c_in: spatial[0],
        h,
        w,
        c_out: kernels[0],
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Output coordinate range `[lo, hi)` whose receptive tap `o·stride + k − pad`
/// falls inside `[0, extent)`.
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unrolls image `b` into a `(c_in·kh·kw)×(oh·ow)` matrix; padding taps stay zero.
fn im2col(x: &[f64], d: &ConvDims, b: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let plane = d.oh * d.ow;
    cols.fill(0.0);
    for ci in 0..d.c_in {
        let ibase = (b * d.c_in + ci) * d.h * d.w;
        for ky in 0..d.kh {
            let (y0, y1) = valid_range(ky, pad, stride, d.h, d.oh);
            for kx in 0..d.kw {
                let (x0, x1) = valid_range(kx, pad, stride, d.w, d.ow);
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let irow = &x[ibase + (oy * stride + ky - pad) * d.w..][..d.w];
                    let orow = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    for ox in x0..x1 {
                        orow[ox] = irow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], d: &ConvDims, b: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let plane = d.oh * d.ow;
    for ci in 0..d.c_in {
        let ibase = (b * d.c_in + ci) * d.h * d.w;
        for ky in 0..d.kh {
            let (y0, y1) = valid_range(ky, pad, stride, d.h, d.oh);
            for kx in 0..d.kw {
                let (x0, x1) = valid_range(kx, pad, stride, d.w, d.ow);
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let drow = &mut dx[ibase + (oy * stride + ky - pad) * d.w..][..d.w];
                    let crow = &row[oy * d.ow..(oy + 1) * d.ow];
                    for ox in x0..x1 {
                        drow[ox * stride + kx - pad] += crow[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(input.shape(), kernels.shape(), stride, pad)?;
    let (x, wt) = (input.data(), kernels.data());
    let (plane, taps) = (d.oh * d.ow, d.c_in * d.kh * d.kw);
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    let mut cols = vec![0.0; taps * plane];
    for b in 0..d.batch {
        im2col(x, &d, b, stride, pad, &mut cols);
        for o in 0..d.c_out {
            let orow = &mut out[(b * d.c_out + o) * plane..][..plane];
            for (p, &wv) in wt[o * taps..(o + 1) * taps].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (acc, &c) in orow.iter_mut().zip(&cols[p * plane..(p + 1) * plane]) {
                    *acc += wv * c;
                }
            }
        }
    }
    let mut shape = vec![d.c_out, d.oh, d.ow];
    if input.rank() == 4 {
        shape.insert(0, d.batch);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn conv2d_backward_input(
    dy: &[f64],
    kernels: &Tensor,
    input_shape: &[usize],
    _out_shape: &[usize],
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let d = conv_dims(input_shape, kernels.shape(), stride, pad).expect("validated in forward");
    let (plane, taps) = (d.oh * d.ow, d.c_in * d.kh * d.kw);
    let mut cols = vec![0.0; taps * plane];
    for b in 0..d.batch {
        cols.fill(0.0);
        let dyb = &dy[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        matmul_tn_acc(kernels.data(), dyb, &mut cols, d.c_out, taps, plane);
        col2im_acc(&cols, &d, b, stride, pad, dx);
    }
}

pub(crate) fn conv2d_backward_kernels(
    dy: &[f64],
    input: &Tensor,
    kernel_shape: &[usize],
    _out_shape: &[usize],
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    let d = conv_dims(input.shape(), kernel_shape, stride, pad).expect("validated in forward");
    let (plane, taps) = (d.oh * d.ow, d.c_in * d.kh * d.kw);
    let mut cols = vec![0.0; taps * plane];
    for b in 0..d.batch {
        im2col(input.data(), &d, b, stride, pad, &mut cols);
        let dyb = &dy[b * d.c_out * plane..(b + 1) * d.c_out * plane];
        matmul_nt_acc(dyb, &cols, dw, d.c_out, plane, taps);
    }
}

/// Half-open pooling window `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

/// Bin `i` of `bins` over `extent` cells: `[floor(i·extent/bins), ceil((i+1)·extent/bins))`.
pub fn adaptive_bin(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    (i * extent / bins, ((i + 1) * extent).div_ceil(bins))
}

/// Max over each window for every channel of a `C×H×W` input. Ties go to the
/// first element in row-major order. Returns the `items×C×gh×gw` output and
/// the flat input index of each maximum.
pub fn window_max(
    input: &Tensor,
    windows: &[Window],
    items: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 || windows.len() != items * grid_h * grid_w {
        return Err(Error::dim(format!(
            "window_max over {:?} with {} windows for {}x{}x{}",
            input.shape(),
            windows.len(),
            items,
            grid_h,
            grid_w
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    for win in windows {
        if win.row0 >= win.row1 || win.col0 >= win.col1 || win.row1 > h || win.col1 > w {
            return Err(Error::dim(format!("window {:?} invalid for {}x{} map", win, h, w)));
        }
    }
    let x = input.data();
    let cells = grid_h * grid_w;
    let mut out = Vec::with_capacity(items * c * cells);
    let mut argmax = Vec::with_capacity(items * c * cells);
    for item in 0..items {
        for ch in 0..c {
            let base = ch * h * w;
            for win in &windows[item * cells..(item + 1) * cells] {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + win.row0 * w + win.col0;
                for r in win.row0..win.row1 {
                    for col in win.col0..win.col1 {
                        let idx = base + r * w + col;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(x[best_idx]);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![items, c, grid_h, grid_w], out), argmax))
}

pub fn adaptive_windows(h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<Window> {
    let mut windows = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (row0, row1) = adaptive_bin(i, out_h, h);
        for j in 0..out_w {
            let (col0, col1) = adaptive_bin(j, out_w, w);
            windows.push(Window {
                row0,
                row1,
                col0,
                col1,
            });
        }
    }
    windows
}

pub fn adaptive_max_pool(input: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::dim(format!("adaptive_max_pool of {:?}", input.shape())));
    }
    let (h, w) = (input.shape()[1], input.shape()[2]);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::dim(format!(
            "adaptive_max_pool output {}x{} for input {}x{}",
            out_h, out_w, h, w
        )));
    }
    let (out, argmax) = window_max(input, &adaptive_windows(h, w, out_h, out_w), 1, out_h, out_w)?;
    let c = input.shape()[0];
    Ok((Tensor::from_parts(vec![c, out_h, out_w], out.into_data()), argmax))
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if !(x.rank() == 3 || x.rank() == 4) {
        return Err(Error::dim(format!("global_avg_pool of {:?}", s)));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let out: Vec<f64> = x
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(s[..s.len() - 2].to_vec(), out))
}

/// Normalised target coordinate of lattice index `i` on an `s`-point axis
/// spanning `[-1, 1]`; a single point sits at the centre.
pub fn lattice_coord(i: usize, s: usize) -> f64 {
    if s == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (s - 1) as f64
    }
}

/// Maps a normalised coordinate in `[-1, 1]` to pixel units on an `s`-wide
/// axis. Results within 1e-12 of a whole pixel snap onto it, so lattice
/// points land exactly.
pub fn to_pixel(coord: f64, s: usize) -> f64 {
    let p = (coord + 1.0) / 2.0 * (s - 1) as f64;
    let r = p.round();
    if (p - r).abs() <= 1e-12 {
        r
    } else {
        p
    }
}

/// `max(0, 1 − |p − m|)` and its derivative in `p`. At `p = m` the derivative
/// is taken from the right, matching a floor-based cell choice.
fn tent(p: f64, m: f64) -> (f64, f64) {
    let d = p - m;
    if d.abs() >= 1.0 {
        (0.0, 0.0)
    } else if d >= 0.0 {
        (1.0 - d, -1.0)
    } else {
        (1.0 + d, 1.0)
    }
}

/// Bilinear interpolation of one `s×s` plane at pixel coordinates
/// `(xp, yp)`, with partial derivatives in `xp` and `yp`.
pub fn interpolate(plane: &[f64], s: usize, xp: f64, yp: f64) -> (f64, f64, f64) {
    let (mx, my) = (xp.floor(), yp.floor());
    let mut value = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for n in [my, my + 1.0] {
        if n < 0.0 || n > (s - 1) as f64 {
            continue;
        }
        let (wy, sy) = tent(yp, n);
        if wy == 0.0 && sy == 0.0 {
            continue;
        }
        for m in [mx, mx + 1.0] {
            if m < 0.0 || m > (s - 1) as f64 {
                continue;
            }
            let (wx, sx) = tent(xp, m);
            let u = plane[n as usize * s + m as usize];
            value += u * wx * wy;
            dx += u * sx * wy;
            dy += u * wx * sy;
        }
    }
    (value, dx, dy)
}

/// Source coordinates `(x_s, y_s)` for each row-major cell of an `s×s`
/// lattice under `A = [[scale, 0, tx], [0, scale, ty]]`.
pub fn affine_lattice(tx: f64, ty: f64, scale: f64, s: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(s * s);
    for i in 0..s {
        let yt = lattice_coord(i, s);
        for j in 0..s {
            let xt = lattice_coord(j, s);
            pts.push((scale * xt + tx, scale * yt + ty));
        }
    }
    pts
}

/// Samples a `D×S×S` map at an explicit grid of `S×S` normalised points.
pub fn bilinear_sample_grid(u: &Tensor, grid: &[(f64, f64)]) -> Result<Tensor> {
    if u.rank() != 3 || u.shape()[1] != u.shape()[2] || grid.len() != u.shape()[1] * u.shape()[2] {
        return Err(Error::dim(format!(
            "bilinear sample of {:?} on {} points",
            u.shape(),
            grid.len()
        )));
    }
    let (d, s) = (u.shape()[0], u.shape()[1]);
    let mut out = Vec::with_capacity(d * s * s);
    for plane in u.data().chunks(s * s) {
        for &(xs, ys) in grid {
            out.push(interpolate(plane, s, to_pixel(xs, s), to_pixel(ys, s)).0);
        }
    }
    Ok(Tensor::from_parts(vec![d, s, s], out))
}

fn check_shift(u: &Tensor, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = u.shape();
    if u.rank() != 4 || s[2] != s[3] || t.shape() != [s[0], 2] {
        return Err(Error::dim(format!(
            "bilinear shift of {:?} with offsets {:?}",
            s,
            t.shape()
        )));
    }
    Ok((s[0], s[1], s[2]))
}

pub fn bilinear_shift(u: &Tensor, t: &Tensor, scale: f64) -> Result<Tensor> {
    let (r, d, s) = check_shift(u, t)?;
    let plane = s * s;
    let mut out = Vec::with_capacity(u.len());
    for item in 0..r {
        let (tx, ty) = (t.data()[2 * item], t.data()[2 * item + 1]);
        let grid = affine_lattice(tx, ty, scale, s);
        for ch in 0..d {
            let base = (item * d + ch) * plane;
            let p = &u.data()[base..base + plane];
            for &(xs, ys) in &grid {
                out.push(interpolate(p, s, to_pixel(xs, s), to_pixel(ys, s)).0);
            }
        }
    }
    Ok(Tensor::from_parts(u.shape().to_vec(), out))
}

pub(crate) fn bilinear_shift_backward(
    u: &Tensor,
    t: &Tensor,
    scale: f64,
    dy: &[f64],
    du: &mut [f64],
    dt: &mut [f64],
) {
    let (r, d, s) = check_shift(u, t).expect("validated in forward");
    let plane = s * s;
    let pix_per_norm = (s - 1) as f64 / 2.0;
    for item in 0..r {
        let (tx, ty) = (t.data()[2 * item], t.data()[2 * item + 1]);
        let grid = affine_lattice(tx, ty, scale, s);
        for ch in 0..d {
            let base = (item * d + ch) * plane;
            let p = &u.data()[base..base + plane];
            for (k, &(xs, ys)) in grid.iter().enumerate() {
                let g = dy[base + k];
                if g == 0.0 {
                    continue;
                }
                let (xp, yp) = (to_pixel(xs, s), to_pixel(ys, s));
                let (_, dxp, dyp) = interpolate(p, s, xp, yp);
                dt[2 * item] += g * dxp * pix_per_norm;
                dt[2 * item + 1] += g * dyp * pix_per_norm;
                let (mx, my) = (xp.floor(), yp.floor());
                for n in [my, my + 1.0] {
                    if n < 0.0 || n > (s - 1) as f64 {
                        continue;
                    }
                    let wy = tent(yp, n).0;
                    for m in [mx, mx + 1.0] {
                        if m < 0.0 || m > (s - 1) as f64 {
                            continue;
                        }
                        let w = tent(xp, m).0 * wy;
                        if w != 0.0 {
                            du[base + n as usize * s + m as usize] += g * w;
                        }
                    }
                }
            }
        }
    }
}

/// Integer cells touched by every sample point; used for branch signatures.
pub(crate) fn bilinear_cells(t: &Tensor, scale: f64, s: usize) -> Vec<(i64, i64)> {
    let mut cells = Vec::new();
    for row in t.data().chunks(2) {
        for (xs, ys) in affine_lattice(row[0], row[1], scale, s) {
            cells.push((to_pixel(xs, s).floor() as i64, to_pixel(ys, s).floor() as i64));
        }
    }
    cells
}

pub fn normalize_items(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::dim(format!("normalize_items of {:?}", x.shape())));
    }
    let per = x.len() / x.shape()[0];
    let mut out = x.clone();
    for item in out.data_mut().chunks_mut(per) {
        let norm = item.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / norm.max(crate::autodiff::NORM_EPS);
        for v in item {
            *v *= inv;
        }
    }
    Ok(out)
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
