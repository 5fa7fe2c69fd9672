//! Forward and backward kernels for every layer kind the network uses.
//!
//! All kernels are plain functions over [`Tensor`]s. Summation order is fixed
//! by the loop structure (and by `matrixmultiply`'s blocking, which depends
//! only on the operand sizes), so repeated calls are bitwise reproducible.

use crate::{Error, Result};

use super::Tensor;

/// Floor applied to probabilities inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Tolerance on `sum(row) == 1` accepted by [`cross_entropy`].
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Output columns handled per im2col block; bounds scratch memory.
const CONV_BLOCK_COLS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Stride 1, padding `floor(k / 2)`.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
        }
    }

    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            if self.stride[axis] == 0 || kernel[axis] == 0 {
                return Err(Error::Shape(format!("axis {axis}: stride and kernel must be >= 1")));
            }
            let padded = input[axis] + 2 * self.padding[axis];
            if kernel[axis] > padded {
                return Err(Error::Shape(format!(
                    "spatial axis {axis}: kernel {} exceeds padded size {padded}",
                    kernel[axis]
                )));
            }
            out[axis] = (padded - kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    f: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl ConvDims {
    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }
    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }
    fn taps(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }
}

fn conv_dims(input: &Tensor, weights: &Tensor, geom: &ConvGeom) -> Result<ConvDims> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 5 {
        return Err(Error::Shape(format!("conv3d input must be [N,C,D,H,W], got {is:?}")));
    }
    if ws.len() != 5 {
        return Err(Error::Shape(format!("conv3d weights must be [F,C,kd,kh,kw], got {ws:?}")));
    }
    if is[1] != ws[1] {
        return Err(Error::Shape(format!(
            "conv3d channel dimension: input has {} channels, weights expect {}",
            is[1], ws[1]
        )));
    }
    let input_sp = [is[2], is[3], is[4]];
    let kernel = [ws[2], ws[3], ws[4]];
    Ok(ConvDims {
        n: is[0],
        c: is[1],
        f: ws[0],
        input: input_sp,
        kernel,
        output: geom.output_dims(input_sp, kernel)?,
    })
}

/// Planes of output depth handled per block, so that blocks hold whole planes.
fn planes_per_block(d: &ConvDims) -> usize {
    let plane = d.output[1] * d.output[2];
    (CONV_BLOCK_COLS / plane).max(1)
}

/// Output columns `[lo, hi)` whose tap `e` lands inside an input row of
/// width `iw`.
fn valid_range(ow: usize, iw: usize, stride: usize, e: usize, pad: usize) -> (usize, usize) {
    // Need 0 <= xo * stride + e - pad < iw.
    let lo = if e >= pad { 0 } else { (pad - e).div_ceil(stride) };
    let hi = if iw + pad <= e { 0 } else { (iw + pad - e).div_ceil(stride) };
    let hi = hi.min(ow);
    (lo.min(hi), hi)
}

/// Fills `col` (`taps x cols`, row-major) for output planes `[od0, od1)` of
/// one sample.
fn im2col(x: &[f64], d: &ConvDims, geom: &ConvGeom, od0: usize, od1: usize, col: &mut [f64]) {
    let [_, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [_, oh, ow] = d.output;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let cols = (od1 - od0) * oh * ow;
    let in_sp = d.in_spatial();
    let mut row = 0;
    for c in 0..d.c {
        let xc = &x[c * in_sp..(c + 1) * in_sp];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for od in od0..od1 {
                        let zd = (od * sd + a) as isize - pd as isize;
                        if zd < 0 || zd >= d.input[0] as isize {
                            dst[p..p + oh * ow].fill(0.0);
                            p += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let zh = (y * sh + b) as isize - ph as isize;
                            if zh < 0 || zh >= ih as isize {
                                dst[p..p + ow].fill(0.0);
                                p += ow;
                                continue;
                            }
                            let base = (zd as usize * ih + zh as usize) * iw;
                            let (lo, hi) = valid_range(ow, iw, sw, e, pw);
                            let row_out = &mut dst[p..p + ow];
                            row_out[..lo].fill(0.0);
                            row_out[hi..].fill(0.0);
                            let first = base + lo * sw + e - pw;
                            if sw == 1 {
                                row_out[lo..hi].copy_from_slice(&xc[first..first + hi - lo]);
                            } else {
                                for (j, v) in row_out[lo..hi].iter_mut().enumerate() {
                                    *v = xc[first + j * sw];
                                }
                            }
                            p += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the input-gradient layout; inverse of
/// [`im2col`].
fn col2im(col: &[f64], d: &ConvDims, geom: &ConvGeom, od0: usize, od1: usize, dx: &mut [f64]) {
    let [_, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [_, oh, ow] = d.output;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let cols = (od1 - od0) * oh * ow;
    let in_sp = d.in_spatial();
    let mut row = 0;
    for c in 0..d.c {
        let dxc = &mut dx[c * in_sp..(c + 1) * in_sp];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut p = 0;
                    for od in od0..od1 {
                        let zd = (od * sd + a) as isize - pd as isize;
                        if zd < 0 || zd >= d.input[0] as isize {
                            p += oh * ow;
                            continue;
                        }
                        for y in 0..oh {
                            let zh = (y * sh + b) as isize - ph as isize;
                            if zh < 0 || zh >= ih as isize {
                                p += ow;
                                continue;
                            }
                            let base = (zd as usize * ih + zh as usize) * iw;
                            let (lo, hi) = valid_range(ow, iw, sw, e, pw);
                            let first = base + lo * sw + e - pw;
                            let src_row = &src[p + lo..p + hi];
                            if sw == 1 {
                                for (t, v) in dxc[first..first + src_row.len()].iter_mut().zip(src_row) {
                                    *t += v;
                                }
                            } else {
                                for (j, v) in src_row.iter().enumerate() {
                                    dxc[first + j * sw] += v;
                                }
                            }
                            p += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` over strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the
    // borrowed slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// 3D cross-correlation plus per-filter bias.
///
/// `input` is `[N,C,D,H,W]`, `weights` `[F,C,kd,kh,kw]`, `bias` `[F]`.
pub fn conv3d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let d = conv_dims(input, weights, geom)?;
    if bias.shape() != [d.f] {
        return Err(Error::Shape(format!(
            "conv3d bias must be [{}], got {:?}",
            d.f,
            bias.shape()
        )));
    }
    let (in_sp, out_sp, taps) = (d.in_spatial(), d.out_spatial(), d.taps());
    let plane = d.output[1] * d.output[2];
    let step = planes_per_block(&d);
    let mut out = vec![0.0; d.n * d.f * out_sp];
    let mut col = vec![0.0; taps * step * plane];
    let w = weights.data();
    for n in 0..d.n {
        let x = &input.data()[n * d.c * in_sp..(n + 1) * d.c * in_sp];
        let y = &mut out[n * d.f * out_sp..(n + 1) * d.f * out_sp];
        let mut od0 = 0;
        while od0 < d.output[0] {
            let od1 = (od0 + step).min(d.output[0]);
            let cols = (od1 - od0) * plane;
            im2col(x, &d, geom, od0, od1, &mut col);
            gemm(
                d.f,
                taps,
                cols,
                w,
                (taps, 1),
                &col,
                (cols, 1),
                0.0,
                &mut y[od0 * plane..],
                (out_sp, 1),
            );
            od0 = od1;
        }
        for (f, &bf) in bias.data().iter().enumerate() {
            for v in &mut y[f * out_sp..(f + 1) * out_sp] {
                *v += bf;
            }
        }
    }
    Tensor::from_vec([d.n, d.f, d.output[0], d.output[1], d.output[2]], out)
}

/// Forward state the convolution backward pass needs.
#[derive(Debug, Clone, Copy)]
pub struct ConvCache<'a> {
    pub input: &'a Tensor,
    pub weights: &'a Tensor,
    pub geom: ConvGeom,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv3d_backward(upstream: &Tensor, cache: &ConvCache<'_>, want_input_grad: bool) -> Result<ConvGrads> {
    let d = conv_dims(cache.input, cache.weights, &cache.geom)?;
    let expected = [d.n, d.f, d.output[0], d.output[1], d.output[2]];
    if upstream.shape() != expected {
        return Err(Error::Shape(format!(
            "conv3d upstream gradient must be {expected:?}, got {:?}",
            upstream.shape()
        )));
    }
    let geom = &cache.geom;
    let (in_sp, out_sp, taps) = (d.in_spatial(), d.out_spatial(), d.taps());
    let plane = d.output[1] * d.output[2];
    let step = planes_per_block(&d);
    let w = cache.weights.data();
    let mut dw = vec![0.0; d.f * taps];
    let mut db = vec![0.0; d.f];
    let mut dx = want_input_grad.then(|| vec![0.0; d.n * d.c * in_sp]);
    let mut col = vec![0.0; taps * step * plane];
    let mut dcol = if want_input_grad {
        vec![0.0; taps * step * plane]
    } else {
        Vec::new()
    };

    for n in 0..d.n {
        let x = &cache.input.data()[n * d.c * in_sp..(n + 1) * d.c * in_sp];
        let dy = &upstream.data()[n * d.f * out_sp..(n + 1) * d.f * out_sp];
        for f in 0..d.f {
            db[f] += dy[f * out_sp..(f + 1) * out_sp].iter().sum::<f64>();
        }
        let mut od0 = 0;
        while od0 < d.output[0] {
            let od1 = (od0 + step).min(d.output[0]);
            let cols = (od1 - od0) * plane;
            let dy_block = &dy[od0 * plane..];
            im2col(x, &d, geom, od0, od1, &mut col);
            // dW^T[taps, F] += col[taps, cols] * dY^T
            gemm(taps, cols, d.f, &col, (cols, 1), dy_block, (1, out_sp), 1.0, &mut dw, (1, taps));
            if let Some(dx) = dx.as_mut() {
                // dcol[taps, cols] = W^T * dY
                gemm(taps, d.f, cols, w, (1, taps), dy_block, (out_sp, 1), 0.0, &mut dcol, (cols, 1));
                col2im(&dcol, &d, geom, od0, od1, &mut dx[n * d.c * in_sp..(n + 1) * d.c * in_sp]);
            }
            od0 = od1;
        }
    }
    Ok(ConvGrads {
        input: dx.map(|v| Tensor::from_vec(cache.input.shape(), v)).transpose()?,
        weights: Tensor::from_vec(cache.weights.shape(), dw)?,
        bias: Tensor::from_vec([d.f], db)?,
    })
}

/// Stateful convolution layer that remembers its last input for backward.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub geom: ConvGeom,
    cached_input: Option<Tensor>,
}

impl Conv3dLayer {
    pub fn new(weights: Tensor, bias: Tensor, geom: ConvGeom) -> Self {
        Self {
            weights,
            bias,
            geom,
            cached_input: None,
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = conv3d_forward(input, &self.weights, &self.bias, &self.geom)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<ConvGrads> {
        let input = self.cached_input.as_ref().ok_or(Error::MissingCache)?;
        let cache = ConvCache {
            input,
            weights: &self.weights,
            geom: self.geom,
        };
        conv3d_backward(upstream, &cache, true)
    }
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

pub fn leaky_relu_backward(x: &[f64], upstream: &[f64], slope: f64) -> Vec<f64> {
    x.iter()
        .zip(upstream)
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// `(N, C, spatial size)` of a tensor with at least two axes.
fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 3 {
        return Err(Error::Shape(format!(
            "global pooling needs [N,C,spatial..], got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Per-channel max or mean over all spatial positions. For `Max` the second
/// element holds the flat index of the first maximum of each channel.
pub fn global_pool(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, sp) = channel_layout(x)?;
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    for nc in 0..n * c {
        let chan = &x.data()[nc * sp..(nc + 1) * sp];
        match mode {
            PoolMode::Max => {
                let mut best = 0;
                for (i, &v) in chan.iter().enumerate() {
                    if v > chan[best] {
                        best = i;
                    }
                }
                out.push(chan[best]);
                argmax.push(nc * sp + best);
            }
            PoolMode::Avg => out.push(chan.iter().sum::<f64>() / sp as f64),
        }
    }
    Ok((Tensor::from_vec([n, c], out)?, argmax))
}

pub fn global_pool_backward(
    input_shape: &[usize],
    upstream: &[f64],
    mode: PoolMode,
    argmax: &[usize],
) -> Vec<f64> {
    let sp: usize = input_shape[2..].iter().product();
    let mut dx = vec![0.0; input_shape.iter().product()];
    match mode {
        PoolMode::Max => {
            for (&idx, &g) in argmax.iter().zip(upstream) {
                dx[idx] += g;
            }
        }
        PoolMode::Avg => {
            for (nc, &g) in upstream.iter().enumerate() {
                let share = g / sp as f64;
                dx[nc * sp..(nc + 1) * sp].fill(share);
            }
        }
    }
    dx
}

fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::Shape(format!(
            "fully connected expects x [N,in] and w [out,in], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, inp, out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if w.shape()[1] != inp {
        return Err(Error::Shape(format!(
            "fully connected in_dim: input has {inp} features, weights expect {}",
            w.shape()[1]
        )));
    }
    if b.shape() != [out] {
        return Err(Error::Shape(format!(
            "fully connected bias must be [{out}], got {:?}",
            b.shape()
        )));
    }
    Ok((n, inp, out))
}

/// `y = x w^T + b` with `x: [N,in]`, `w: [out,in]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, inp, out) = check_linear(x, w, b)?;
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(n, inp, out, x.data(), (inp, 1), w.data(), (1, inp), 1.0, &mut y, (out, 1));
    Tensor::from_vec([n, out], y)
}

/// Returns `(dx, dw, db)`; `dx` is skipped unless requested.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    upstream: &[f64],
    want_input_grad: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (n, inp, out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let dx = want_input_grad.then(|| {
        let mut dx = vec![0.0; n * inp];
        gemm(n, out, inp, upstream, (out, 1), w.data(), (inp, 1), 0.0, &mut dx, (inp, 1));
        dx
    });
    let mut dw = vec![0.0; out * inp];
    gemm(out, n, inp, upstream, (1, out), x.data(), (inp, 1), 0.0, &mut dw, (inp, 1));
    let mut db = vec![0.0; out];
    for row in upstream.chunks(out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

pub fn sigmoid_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    y.iter().zip(upstream).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!("softmax expects [N,K], got {:?}", x.shape())));
    }
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn softmax_backward(y: &Tensor, upstream: &[f64]) -> Vec<f64> {
    let k = y.shape()[1];
    let mut dx = Vec::with_capacity(y.numel());
    for (s, g) in y.data().chunks(k).zip(upstream.chunks(k)) {
        let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        dx.extend(s.iter().zip(g).map(|(&si, &gi)| si * (gi - dot)));
    }
    dx
}

/// Concatenates `[N,a]` and `[N,b]` into `[N,a+b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "concat expects [N,a] and [N,b], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, wa, wb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(n * (wa + wb));
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::from_vec([n, wa + wb], out)
}

pub fn concat_backward(split: usize, width: usize, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut da = Vec::new();
    let mut db = Vec::new();
    for row in upstream.chunks(width) {
        da.extend_from_slice(&row[..split]);
        db.extend_from_slice(&row[split..]);
    }
    (da, db)
}

/// Multiplies a `[N,C]` gate into `[N,C,...]` features, broadcasting over
/// the spatial axes.
pub fn multiply_broadcast(gate: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, c, sp) = channel_layout(x)?;
    if gate.shape() != [n, c] {
        return Err(Error::Shape(format!(
            "gate must be [{n},{c}] to scale {:?}, got {:?}",
            x.shape(),
            gate.shape()
        )));
    }
    let mut out = x.data().to_vec();
    for (nc, &g) in gate.data().iter().enumerate() {
        for v in &mut out[nc * sp..(nc + 1) * sp] {
            *v *= g;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Returns `(d_gate, d_x)`.
pub fn multiply_broadcast_backward(gate: &Tensor, x: &Tensor, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sp: usize = x.shape()[2..].iter().product();
    let mut dgate = Vec::with_capacity(gate.numel());
    let mut dx = upstream.to_vec();
    for (nc, &g) in gate.data().iter().enumerate() {
        let xs = &x.data()[nc * sp..(nc + 1) * sp];
        let gs = &upstream[nc * sp..(nc + 1) * sp];
        dgate.push(xs.iter().zip(gs).map(|(a, b)| a * b).sum());
        for v in &mut dx[nc * sp..(nc + 1) * sp] {
            *v *= g;
        }
    }
    (dgate, dx)
}

pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    x.clone().reshape([n, x.numel() / n])
}

/// Mean over the batch of `-sum(target * ln(max(prob, 1e-12)))`.
///
/// `probs` must already be softmax-normalized: every row has to sum to one
/// within [`ROW_SUM_TOL`].
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.rank() != 2 || probs.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "cross entropy expects matching [N,K] tensors, got {:?} and {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut total = 0.0;
    for (i, (p, t)) in probs.data().chunks(k).zip(targets.data().chunks(k)).enumerate() {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::NotNormalized(format!("row {i} sums to {s}")));
        }
        total -= p
            .iter()
            .zip(t)
            .map(|(&pi, &ti)| ti * pi.max(LOG_CLAMP).ln())
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

pub fn cross_entropy_backward(probs: &Tensor, targets: &Tensor, upstream: f64) -> Vec<f64> {
    let n = probs.shape()[0] as f64;
    probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| if p > LOG_CLAMP { -upstream * t / (p * n) } else { 0.0 })
        .collect()
}
