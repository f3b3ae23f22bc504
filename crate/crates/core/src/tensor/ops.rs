//! Forward primitives and their analytical backwards (vector-Jacobian
//! products).
//!
//! Feature maps are `[B, C, H, W]`, sequences `[B, L, D]`, all row-major.
//! Backward functions take the saved inputs plus the upstream cotangent and
//! return cotangents whose shapes mirror the inputs exactly.

use crate::error::{Error, Result};
use crate::tensor::{expect_rank, expect_same_shape, Tensor};

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

// ---------------------------------------------------------------------------
// conv1x1

/// Pointwise convolution: `out[b,co,h,w] = sum_ci w[co,ci] x[b,ci,h,w] + b[co]`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("conv1x1", x, 4)?;
    expect_rank("conv1x1", w, 2)?;
    let (bt, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin) = (w.shape()[0], w.shape()[1]);
    if wcin != cin {
        return Err(dim_err(
            "conv1x1",
            format!("input channel axis {cin} != weight input axis {wcin}"),
        ));
    }
    if b.shape() != [cout] {
        return Err(dim_err(
            "conv1x1",
            format!("bias shape {:?} != [{cout}]", b.shape()),
        ));
    }
    let hw = h * wd;
    let mut out = vec![0.0; bt * cout * hw];
    for bi in 0..bt {
        for co in 0..cout {
            let bias = b.data()[co];
            let o_base = (bi * cout + co) * hw;
            for p in 0..hw {
                let mut acc = bias;
                for ci in 0..cin {
                    acc += w.data()[co * cin + ci] * x.data()[(bi * cin + ci) * hw + p];
                }
                out[o_base + p] = acc;
            }
        }
    }
    Tensor::new(vec![bt, cout, h, wd], out)
}

pub fn conv1x1_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bt, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let hw = h * wd;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..bt {
        for co in 0..cout {
            let g_base = (bi * cout + co) * hw;
            for p in 0..hw {
                let g = dy.data()[g_base + p];
                db[co] += g;
                for ci in 0..cin {
                    dx[(bi * cin + ci) * hw + p] += w.data()[co * cin + ci] * g;
                    dw[co * cin + ci] += x.data()[(bi * cin + ci) * hw + p] * g;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// conv3x3 (standard, zero padding 1, stride 1)

pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("conv3x3", x, 4)?;
    expect_rank("conv3x3", w, 4)?;
    let (bt, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    if w.shape()[1] != cin || w.shape()[2] != 3 || w.shape()[3] != 3 {
        return Err(dim_err(
            "conv3x3",
            format!("weight shape {:?} != [{cout},{cin},3,3]", w.shape()),
        ));
    }
    if b.shape() != [cout] {
        return Err(dim_err("conv3x3", format!("bias shape {:?}", b.shape())));
    }
    let mut out = vec![0.0; bt * cout * h * wd];
    for bi in 0..bt {
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = ox as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[((bi * cin + ci) * h + iy as usize) * wd
                                        + ix as usize];
                            }
                        }
                    }
                    out[((bi * cout + co) * h + oy) * wd + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bt, cout, h, wd], out)
}

pub fn conv3x3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bt, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..bt {
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..wd {
                    let g = dy.data()[((bi * cout + co) * h + oy) * wd + ox];
                    db[co] += g;
                    for ci in 0..cin {
                        for ky in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = ox as isize + kx as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                dx[xi] += w.data()[wi] * g;
                                dw[wi] += x.data()[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// dwconv3x3 (depthwise, zero padding 1, stride 1)

pub fn dwconv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("dwconv3x3", x, 4)?;
    let (bt, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if w.shape() != [c, 3, 3] {
        return Err(dim_err(
            "dwconv3x3",
            format!("weight shape {:?} != [{c},3,3]", w.shape()),
        ));
    }
    if b.shape() != [c] {
        return Err(dim_err("dwconv3x3", format!("bias shape {:?}", b.shape())));
    }
    let mut out = vec![0.0; x.len()];
    for bi in 0..bt {
        for ci in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b.data()[ci];
                    for ky in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[(ci * 3 + ky) * 3 + kx]
                                * x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[((bi * c + ci) * h + oy) * wd + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bt, c, h, wd], out)
}

pub fn dwconv3x3_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bt, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c];
    for bi in 0..bt {
        for ci in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let g = dy.data()[((bi * c + ci) * h + oy) * wd + ox];
                    db[ci] += g;
                    for ky in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = ((bi * c + ci) * h + iy as usize) * wd + ix as usize;
                            let wi = (ci * 3 + ky) * 3 + kx;
                            dx[xi] += w.data()[wi] * g;
                            dw[wi] += x.data()[xi] * g;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![c], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// linear

/// Matrix product over the last axis, broadcast over all leading axes.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    expect_rank("linear", w, 2)?;
    let din = *x.shape().last().ok_or_else(|| {
        dim_err("linear", "input must have at least one axis".into())
    })?;
    let (wdin, dout) = (w.shape()[0], w.shape()[1]);
    if din != wdin {
        return Err(dim_err(
            "linear",
            format!("last axis {din} != weight input axis {wdin}"),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(dim_err("linear", format!("bias shape {:?}", b.shape())));
        }
    }
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                acc += x.data()[r * din + i] * w.data()[i * dout + o];
            }
            out[r * dout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

/// Returns `(dx, dw, db)`; `db` is produced even for bias-free layers and may
/// be ignored by the caller.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let din = *x.shape().last().unwrap();
    let dout = w.shape()[1];
    let rows = x.len() / din;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; dout];
    for r in 0..rows {
        for o in 0..dout {
            let g = dy.data()[r * dout + o];
            db[o] += g;
            for i in 0..din {
                dx[r * din + i] += w.data()[i * dout + o] * g;
                dw[i * dout + o] += x.data()[r * din + i] * g;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![dout], db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// layer_norm

/// Per-vector normalization over the last axis, then affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if gain.shape() != [d] || shift.shape() != [d] {
        return Err(dim_err(
            "layer_norm",
            format!(
                "gain {:?} / shift {:?} vs feature axis {d}",
                gain.shape(),
                shift.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be > 0".into()));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * inv * gain.data()[i] + shift.data()[i];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dshift = vec![0.0; d];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let g = &dy.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        // dxhat, plus the two row means appearing in the LN backward formula
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut dxhat = vec![0.0; d];
        for i in 0..d {
            let xhat = (row[i] - mean) * inv;
            dgain[i] += g[i] * xhat;
            dshift[i] += g[i];
            dxhat[i] = g[i] * gain.data()[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for i in 0..d {
            let xhat = (row[i] - mean) * inv;
            dx[r * d + i] = inv * (dxhat[i] - m1 - xhat * m2);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![d], dgain).unwrap(),
        Tensor::new(vec![d], dshift).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// batch_norm

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Statistics the forward actually normalized with; consumed by the backward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: BnMode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Updated running statistics produced by a train-mode forward. The caller
/// owns when (and whether) to apply them; params stay immutable.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Channel-wise batch normalization over `[B, C, H, W]`.
///
/// Train mode normalizes by batch statistics (biased variance) and returns an
/// EMA update of the running stats (unbiased variance, momentum-weighted).
/// Eval mode normalizes by the provided running stats.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BnCache, Option<RunningStats>)> {
    expect_rank("batch_norm", x, 4)?;
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    for (t, name) in [(gain, "gain"), (shift, "shift"), (running_mean, "running_mean"), (running_var, "running_var")] {
        if t.shape() != [c] {
            return Err(dim_err(
                "batch_norm",
                format!("{name} shape {:?} != [{c}]", t.shape()),
            ));
        }
    }
    let n = bt * h * w;
    let hw = h * w;
    let (mean, var, update) = match mode {
        BnMode::Train => {
            if n < 2 {
                return Err(Error::DegenerateStats(format!(
                    "batch_norm train mode needs B*H*W >= 2 per channel, got {n}"
                )));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..bt {
                    for p in 0..hw {
                        s += x.data()[(bi * c + ci) * hw + p];
                    }
                }
                let m = s / n as f64;
                let mut v = 0.0;
                for bi in 0..bt {
                    for p in 0..hw {
                        let d = x.data()[(bi * c + ci) * hw + p] - m;
                        v += d * d;
                    }
                }
                mean[ci] = m;
                var[ci] = v / n as f64;
            }
            let unbiased: Vec<f64> = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
            let rm: Vec<f64> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(old, new)| (1.0 - momentum) * old + momentum * new)
                .collect();
            let rv: Vec<f64> = running_var
                .data()
                .iter()
                .zip(&unbiased)
                .map(|(old, new)| (1.0 - momentum) * old + momentum * new)
                .collect();
            (mean, var, Some(RunningStats { mean: rm, var: rv }))
        }
        BnMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
    };
    let mut out = vec![0.0; x.len()];
    for bi in 0..bt {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            for p in 0..hw {
                let i = (bi * c + ci) * hw + p;
                out[i] = (x.data()[i] - mean[ci]) * inv * gain.data()[ci] + shift.data()[ci];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnCache { mode, mean, var },
        update,
    ))
}

pub fn batch_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    cache: &BnCache,
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let n = (bt * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ci in 0..c {
        let inv = 1.0 / (cache.var[ci] + eps).sqrt();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..bt {
            for p in 0..hw {
                let i = (bi * c + ci) * hw + p;
                let xhat = (x.data()[i] - cache.mean[ci]) * inv;
                sum_g += dy.data()[i];
                sum_gx += dy.data()[i] * xhat;
            }
        }
        dgain[ci] = sum_gx;
        dshift[ci] = sum_g;
        match cache.mode {
            BnMode::Train => {
                let m1 = sum_g / n;
                let m2 = sum_gx / n;
                for bi in 0..bt {
                    for p in 0..hw {
                        let i = (bi * c + ci) * hw + p;
                        let xhat = (x.data()[i] - cache.mean[ci]) * inv;
                        dx[i] = gain.data()[ci] * inv * (dy.data()[i] - m1 - xhat * m2);
                    }
                }
            }
            BnMode::Eval => {
                // Running stats are constants w.r.t. the input.
                for bi in 0..bt {
                    for p in 0..hw {
                        let i = (bi * c + ci) * hw + p;
                        dx[i] = gain.data()[ci] * inv * dy.data()[i];
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgain).unwrap(),
        Tensor::new(vec![c], dshift).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// activations

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF (no tanh approximation).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_deriv_scalar(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    phi + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Gelu => x.map(gelu_scalar),
        Activation::Sigmoid => x.map(sigmoid_scalar),
    }
}

pub fn activation_backward(x: &Tensor, kind: Activation, dy: &Tensor) -> Tensor {
    match kind {
        Activation::Gelu => Tensor::new(
            x.shape().to_vec(),
            x.iter()
                .zip(dy.iter())
                .map(|(&v, &g)| gelu_deriv_scalar(v) * g)
                .collect(),
        )
        .unwrap(),
        Activation::Sigmoid => Tensor::new(
            x.shape().to_vec(),
            x.iter()
                .zip(dy.iter())
                .map(|(&v, &g)| {
                    let s = sigmoid_scalar(v);
                    s * (1.0 - s) * g
                })
                .collect(),
        )
        .unwrap(),
    }
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let l = *x.shape().last().unwrap();
    let rows = x.len() / l;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * l..(r + 1) * l];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..l {
            let e = (row[i] - m).exp();
            out[r * l + i] = e;
            sum += e;
        }
        for i in 0..l {
            out[r * l + i] /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Backward given the forward *output* `y`.
pub fn softmax_lastdim_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let l = *y.shape().last().unwrap();
    let rows = y.len() / l;
    let mut dx = vec![0.0; y.len()];
    for r in 0..rows {
        let yr = &y.data()[r * l..(r + 1) * l];
        let gr = &dy.data()[r * l..(r + 1) * l];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..l {
            dx[r * l + i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// reductions, concat, elementwise

/// Mean over one axis; the axis is removed from the shape (falling back to
/// `[1]` for rank-1 inputs).
pub fn reduce_mean(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(dim_err(
            "reduce_mean",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let extent = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..extent {
            for i in 0..inner {
                out[o * inner + i] += x.data()[(o * extent + k) * inner + i];
            }
        }
    }
    for v in &mut out {
        *v /= extent as f64;
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

pub fn reduce_mean_backward(x_shape: &[usize], axis: usize, dy: &Tensor) -> Tensor {
    let extent = x_shape[axis];
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let mut dx = vec![0.0; outer * extent * inner];
    let scale = 1.0 / extent as f64;
    for o in 0..outer {
        for k in 0..extent {
            for i in 0..inner {
                dx[(o * extent + k) * inner + i] = dy.data()[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

/// Channel concatenation, first operand first (image before context).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("concat_channels", a, 4)?;
    expect_rank("concat_channels", b, 4)?;
    let (bt, c1, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let c2 = b.shape()[1];
    if b.shape()[0] != bt || b.shape()[2] != h || b.shape()[3] != w {
        return Err(dim_err(
            "concat_channels",
            format!("spatial/batch mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; bt * (c1 + c2) * hw];
    for bi in 0..bt {
        let dst = bi * (c1 + c2) * hw;
        out[dst..dst + c1 * hw].copy_from_slice(&a.data()[bi * c1 * hw..(bi + 1) * c1 * hw]);
        out[dst + c1 * hw..dst + (c1 + c2) * hw]
            .copy_from_slice(&b.data()[bi * c2 * hw..(bi + 1) * c2 * hw]);
    }
    Tensor::new(vec![bt, c1 + c2, h, w], out)
}

/// Split a `[B, C1+C2, H, W]` tensor back into its concat operands.
pub fn split_channels(x: &Tensor, c1: usize) -> (Tensor, Tensor) {
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let c2 = c - c1;
    let hw = h * w;
    let mut a = vec![0.0; bt * c1 * hw];
    let mut b = vec![0.0; bt * c2 * hw];
    for bi in 0..bt {
        let src = bi * c * hw;
        a[bi * c1 * hw..(bi + 1) * c1 * hw].copy_from_slice(&x.data()[src..src + c1 * hw]);
        b[bi * c2 * hw..(bi + 1) * c2 * hw]
            .copy_from_slice(&x.data()[src + c1 * hw..src + c * hw]);
    }
    (
        Tensor::new(vec![bt, c1, h, w], a).unwrap(),
        Tensor::new(vec![bt, c2, h, w], b).unwrap(),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("add", a, b)?;
    Ok(Tensor::new(
        a.shape().to_vec(),
        a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
    )
    .unwrap())
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("mul", a, b)?;
    Ok(Tensor::new(
        a.shape().to_vec(),
        a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
    )
    .unwrap())
}

// ---------------------------------------------------------------------------
// batched matmul (attention plumbing)

/// `y[b] = a[b] (.) rhs[b]` for `a: [B,M,K]`, `rhs: [B,K,N]`.
pub fn bmm(a: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    expect_rank("bmm", a, 3)?;
    expect_rank("bmm", rhs, 3)?;
    let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (b2, k2, n) = (rhs.shape()[0], rhs.shape()[1], rhs.shape()[2]);
    if bt != b2 || k != k2 {
        return Err(dim_err(
            "bmm",
            format!("{:?} x {:?}", a.shape(), rhs.shape()),
        ));
    }
    let mut out = vec![0.0; bt * m * n];
    for bi in 0..bt {
        for mi in 0..m {
            for ni in 0..n {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += a.data()[(bi * m + mi) * k + ki] * rhs.data()[(bi * k + ki) * n + ni];
                }
                out[(bi * m + mi) * n + ni] = acc;
            }
        }
    }
    Tensor::new(vec![bt, m, n], out)
}

pub fn bmm_backward(a: &Tensor, rhs: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = rhs.shape()[2];
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; rhs.len()];
    for bi in 0..bt {
        for mi in 0..m {
            for ni in 0..n {
                let g = dy.data()[(bi * m + mi) * n + ni];
                for ki in 0..k {
                    da[(bi * m + mi) * k + ki] += rhs.data()[(bi * k + ki) * n + ni] * g;
                    db[(bi * k + ki) * n + ni] += a.data()[(bi * m + mi) * k + ki] * g;
                }
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(rhs.shape().to_vec(), db).unwrap(),
    )
}

/// `y[b] = a[b] (.) rhs[b]^T` for `a: [B,M,K]`, `rhs: [B,N,K]`.
pub fn bmm_nt(a: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    expect_rank("bmm_nt", a, 3)?;
    expect_rank("bmm_nt", rhs, 3)?;
    let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (b2, n, k2) = (rhs.shape()[0], rhs.shape()[1], rhs.shape()[2]);
    if bt != b2 || k != k2 {
        return Err(dim_err(
            "bmm_nt",
            format!("{:?} x {:?}^T", a.shape(), rhs.shape()),
        ));
    }
    let mut out = vec![0.0; bt * m * n];
    for bi in 0..bt {
        for mi in 0..m {
            for ni in 0..n {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += a.data()[(bi * m + mi) * k + ki] * rhs.data()[(bi * n + ni) * k + ki];
                }
                out[(bi * m + mi) * n + ni] = acc;
            }
        }
    }
    Tensor::new(vec![bt, m, n], out)
}

pub fn bmm_nt_backward(a: &Tensor, rhs: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = rhs.shape()[1];
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; rhs.len()];
    for bi in 0..bt {
        for mi in 0..m {
            for ni in 0..n {
                let g = dy.data()[(bi * m + mi) * n + ni];
                for ki in 0..k {
                    da[(bi * m + mi) * k + ki] += rhs.data()[(bi * n + ni) * k + ki] * g;
                    db[(bi * n + ni) * k + ki] += a.data()[(bi * m + mi) * k + ki] * g;
                }
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(rhs.shape().to_vec(), db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// broadcast helpers used by the fusion block

/// Gate multiplication: `y[b,c,h,w] = x[b,c,h,w] * g[b,0,h,w]`.
pub fn mul_gate(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    expect_rank("mul_gate", x, 4)?;
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if g.shape() != [bt, 1, h, w] {
        return Err(dim_err(
            "mul_gate",
            format!("gate shape {:?} vs [{bt},1,{h},{w}]", g.shape()),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..bt {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * c + ci) * hw + p] =
                    x.data()[(bi * c + ci) * hw + p] * g.data()[bi * hw + p];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dg)`.
pub fn mul_gate_backward(x: &Tensor, g: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; g.len()];
    for bi in 0..bt {
        for ci in 0..c {
            for p in 0..hw {
                let i = (bi * c + ci) * hw + p;
                dx[i] = g.data()[bi * hw + p] * dy.data()[i];
                dg[bi * hw + p] += x.data()[i] * dy.data()[i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(g.shape().to_vec(), dg).unwrap(),
    )
}

/// FiLM modulation: `y[b,c,h,w] = (1 + gamma[b,c]) * x[b,c,h,w] + beta[b,c]`.
pub fn film(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    expect_rank("film", x, 4)?;
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.shape() != [bt, c] || beta.shape() != [bt, c] {
        return Err(dim_err(
            "film",
            format!(
                "gamma {:?} / beta {:?} vs [{bt},{c}]",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..bt {
        for ci in 0..c {
            let ga = gamma.data()[bi * c + ci];
            let be = beta.data()[bi * c + ci];
            for p in 0..hw {
                let i = (bi * c + ci) * hw + p;
                out[i] = (1.0 + ga) * x.data()[i] + be;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn film_backward(x: &Tensor, gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bt, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; bt * c];
    let mut dbeta = vec![0.0; bt * c];
    for bi in 0..bt {
        for ci in 0..c {
            let ga = gamma.data()[bi * c + ci];
            for p in 0..hw {
                let i = (bi * c + ci) * hw + p;
                dx[i] = (1.0 + ga) * dy.data()[i];
                dgamma[bi * c + ci] += x.data()[i] * dy.data()[i];
                dbeta[bi * c + ci] += dy.data()[i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![bt, c], dgamma).unwrap(),
        Tensor::new(vec![bt, c], dbeta).unwrap(),
    )
}

/// Copy the `[start, start+len)` range of the last axis.
pub fn slice_lastdim(x: &Tensor, start: usize, len: usize) -> Tensor {
    let d = *x.shape().last().unwrap();
    assert!(start + len <= d, "slice_lastdim out of range");
    let rows = x.len() / d;
    let mut out = vec![0.0; rows * len];
    for r in 0..rows {
        out[r * len..(r + 1) * len].copy_from_slice(&x.data()[r * d + start..r * d + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(shape, out).unwrap()
}

/// Scatter-add a last-axis slice cotangent back into the full-width tensor.
pub fn accumulate_lastdim_slice(dst: &mut Tensor, start: usize, piece: &Tensor) {
    let d = *dst.shape().last().unwrap();
    let len = *piece.shape().last().unwrap();
    let rows = piece.len() / len;
    for r in 0..rows {
        for i in 0..len {
            dst.data_mut()[r * d + start + i] += piece.data()[r * len + i];
        }
    }
}
