//! Dense f64 tensors and the forward/backward kernels used by the network:
//! same-size 2D convolution, ReLU, per-channel batch normalization,
//! per-pixel softmax cross-entropy and momentum SGD.
//!
//! Every reduction runs in a fixed order, so identical inputs give
//! bit-identical outputs.

use crate::error::{contract, Error, Result};
use crate::labels::LabelMap;

/// Default epsilon added to the batch variance.
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Row-major tensor of up to four dimensions, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad shapes and NaN/Inf.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(contract(format!("tensor rank must be 1..=4, got {}", shape.len())));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(contract(format!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(contract(format!("expected a CxHxW tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(contract(format!(
            "{what}: shape {:?} does not match {:?}",
            b.shape, a.shape
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution

/// Weights `[C_out, C_in, k, k]` (k is 3 for feature layers, 1 for the
/// per-pixel classifier) and one bias per output channel. Stride is 1 and the
/// input is zero-padded by `k / 2`, so spatial size is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    weights: Tensor,
    bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let [out_c, _in_c, kh, kw] = weights.shape[..] else {
            return Err(contract(format!(
                "conv weights must be rank 4, got {:?}",
                weights.shape
            )));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(contract(format!("conv kernel must be 3x3 or 1x1, got {kh}x{kw}")));
        }
        if bias.len() != out_c {
            return Err(contract(format!(
                "conv bias has {} entries for {out_c} outputs",
                bias.len()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape[2]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights.data
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Weights and bias borrowed mutably at once.
    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights.data, &mut self.bias)
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), where `a` is logically
/// m×k and `b` is k×n. `*_t` selects a transposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above bounds every index dgemm touches for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[C, H, W]` input into a `(C·k·k) × (H·W)` patch matrix.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let ox = dx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst[y * w + x] = src[(x as isize + ox) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let src = &col[row * hw..(row + 1) * hw];
                let ox = dx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst[(x as isize + ox) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

fn check_conv_input(input: &Tensor, params: &ConvParams) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if c != params.in_channels() {
        return Err(contract(format!(
            "conv expects {} input channels, got {c}",
            params.in_channels()
        )));
    }
    if h == 0 || w == 0 {
        return Err(contract("conv input has an empty spatial extent"));
    }
    Ok((c, h, w))
}

fn patches<'a>(input: &'a Tensor, c: usize, h: usize, w: usize, k: usize) -> std::borrow::Cow<'a, [f64]> {
    if k == 1 {
        std::borrow::Cow::Borrowed(input.data())
    } else {
        std::borrow::Cow::Owned(im2col(input.data(), c, h, w, k))
    }
}

/// `out[o,y,x] = bias[o] + Σ w[o,c,dy,dx] · in_padded[c, y+dy, x+dx]`.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let (c, h, w) = check_conv_input(input, params)?;
    let k = params.kernel_size();
    let out_c = params.out_channels();
    let hw = h * w;
    let col = patches(input, c, h, w, k);
    let mut out = vec![0.0; out_c * hw];
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(params.bias[o]);
    }
    gemm(
        out_c,
        c * k * k,
        hw,
        params.weights.data(),
        false,
        &col,
        false,
        &mut out,
        true,
    );
    Ok(Tensor::from_parts(vec![out_c, h, w], out))
}

fn conv_param_grads(col: &[f64], params: &ConvParams, grad_out: &Tensor, hw: usize) -> ConvParams {
    let out_c = params.out_channels();
    let ckk = params.in_channels() * params.kernel_size() * params.kernel_size();
    let mut gw = vec![0.0; out_c * ckk];
    gemm(out_c, hw, ckk, grad_out.data(), false, col, true, &mut gw, false);
    let gb = grad_out.data().chunks_exact(hw).map(|row| row.iter().sum()).collect();
    ConvParams {
        weights: Tensor::from_parts(params.weights.shape.clone(), gw),
        bias: gb,
    }
}

fn check_grad_out(grad_out: &Tensor, out_c: usize, h: usize, w: usize) -> Result<()> {
    if grad_out.shape() != [out_c, h, w] {
        return Err(contract(format!(
            "conv grad_out has shape {:?}, forward output is [{out_c}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    Ok(())
}

/// Gradients of [`conv2d_forward`] with respect to the input, weights and bias.
pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<(Tensor, ConvParams)> {
    let (c, h, w) = check_conv_input(input, params)?;
    let out_c = params.out_channels();
    check_grad_out(grad_out, out_c, h, w)?;
    let k = params.kernel_size();
    let hw = h * w;
    let ckk = c * k * k;
    let col = patches(input, c, h, w, k);
    let grads = conv_param_grads(&col, params, grad_out, hw);
    drop(col);

    let mut gcol = vec![0.0; ckk * hw];
    gemm(
        ckk,
        out_c,
        hw,
        params.weights.data(),
        true,
        grad_out.data(),
        false,
        &mut gcol,
        false,
    );
    let grad_in = if k == 1 { gcol } else { col2im(&gcol, c, h, w, k) };
    Ok((Tensor::from_parts(vec![c, h, w], grad_in), grads))
}

/// Like [`conv2d_backward`] but skips the input gradient (first layer).
pub fn conv2d_backward_params(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvParams> {
    let (c, h, w) = check_conv_input(input, params)?;
    check_grad_out(grad_out, params.out_channels(), h, w)?;
    let col = patches(input, c, h, w, params.kernel_size());
    Ok(conv_param_grads(&col, params, grad_out, h * w))
}

// ---------------------------------------------------------------------------
// ReLU

/// `max(0, x)` elementwise. NaN passes through unchanged.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    Tensor::from_parts(input.shape.clone(), data)
}

/// Passes `grad_out` where `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(input, grad_out, "relu grad_out")?;
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(input.shape.clone(), data))
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Learnable per-channel scale/shift plus the variance epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    eps: f64,
}

impl BnParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(contract(format!(
                "bn gamma has {} channels, beta has {}",
                gamma.len(),
                beta.len()
            )));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(contract(format!("bn eps must be positive, got {eps}")));
        }
        Ok(Self { gamma, beta, eps })
    }

    /// gamma = 1, beta = 0.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma_mut(&mut self) -> &mut [f64] {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    /// Gamma and beta borrowed mutably at once.
    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.gamma, &mut self.beta)
    }
}

/// Batch statistics and normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    normalized: Tensor,
}

impl BnCache {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population (biased) variance per channel.
    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// `(x - mean) / sqrt(var + eps)` before the affine transform.
    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }
}

/// Gradients returned by [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Normalizes each channel over its H·W positions using batch statistics.
pub fn batchnorm_forward(input: &Tensor, params: &BnParams) -> Result<(Tensor, BnCache)> {
    let (c, h, w) = input.dims3()?;
    if c != params.channels() {
        return Err(contract(format!(
            "bn has {} channels, input has {c}",
            params.channels()
        )));
    }
    let n = h * w;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "batch norm needs at least 2 positions per channel, got {h}x{w}"
        )));
    }
    let nf = n as f64;
    let mut out = vec![0.0; c * n];
    let mut normalized = vec![0.0; c * n];
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let x = &input.data[ch * n..(ch + 1) * n];
        let m = x.iter().sum::<f64>() / nf;
        let v = x.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / nf;
        let is = 1.0 / (v + params.eps).sqrt();
        let (g, b) = (params.gamma[ch], params.beta[ch]);
        let xh = &mut normalized[ch * n..(ch + 1) * n];
        let y = &mut out[ch * n..(ch + 1) * n];
        for i in 0..n {
            xh[i] = (x[i] - m) * is;
            y[i] = g * xh[i] + b;
        }
        mean.push(m);
        var.push(v);
        inv_std.push(is);
    }
    let cache = BnCache {
        mean,
        var,
        inv_std,
        normalized: Tensor::from_parts(vec![c, h, w], normalized),
    };
    Ok((Tensor::from_parts(vec![c, h, w], out), cache))
}

/// Exact gradient of [`batchnorm_forward`], including the dependence of the
/// batch mean and variance on the input.
pub fn batchnorm_backward(cache: &BnCache, params: &BnParams, grad_out: &Tensor) -> Result<BnGrads> {
    same_shape(&cache.normalized, grad_out, "bn grad_out")?;
    let (c, h, w) = grad_out.dims3()?;
    if c != params.channels() || cache.mean.len() != c {
        return Err(contract(format!(
            "bn cache/params have {}/{} channels, grad_out has {c}",
            cache.mean.len(),
            params.channels()
        )));
    }
    let n = h * w;
    let nf = n as f64;
    let mut grad_in = vec![0.0; c * n];
    let mut grad_gamma = Vec::with_capacity(c);
    let mut grad_beta = Vec::with_capacity(c);
    for ch in 0..c {
        let dy = &grad_out.data[ch * n..(ch + 1) * n];
        let xh = &cache.normalized.data[ch * n..(ch + 1) * n];
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        let scale = params.gamma[ch] * cache.inv_std[ch] / nf;
        let dx = &mut grad_in[ch * n..(ch + 1) * n];
        for i in 0..n {
            dx[i] = scale * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
        grad_gamma.push(sum_dy_xh);
        grad_beta.push(sum_dy);
    }
    Ok(BnGrads {
        input: Tensor::from_parts(vec![c, h, w], grad_in),
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

/// Mean per-pixel cross-entropy of `softmax(logits)` against integer labels.
///
/// Returns the loss and its gradient `(softmax - onehot) / (H·W)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let (q, h, w) = logits.dims3()?;
    if labels.dims() != (h, w) {
        return Err(contract(format!(
            "labels are {:?} but logits are {h}x{w}",
            labels.dims()
        )));
    }
    let n = h * w;
    let nf = n as f64;
    let z = logits.data();
    let mut grad = vec![0.0; q * n];
    let mut loss = 0.0;
    let mut probs = vec![0.0; q];
    for (px, &label) in labels.labels().iter().enumerate() {
        let label = label as usize;
        if label >= q {
            return Err(contract(format!("label {label} at pixel {px} is outside [0, {q})")));
        }
        let mut max = f64::NEG_INFINITY;
        for ch in 0..q {
            max = max.max(z[ch * n + px]);
        }
        let mut sum = 0.0;
        for (ch, p) in probs.iter_mut().enumerate() {
            *p = (z[ch * n + px] - max).exp();
            sum += *p;
        }
        loss += sum.ln() + max - z[label * n + px];
        for (ch, p) in probs.iter().enumerate() {
            grad[ch * n + px] = p / sum / nf;
        }
        grad[label * n + px] -= 1.0 / nf;
    }
    Ok((loss / nf, Tensor::from_parts(vec![q, h, w], grad)))
}

// ---------------------------------------------------------------------------
// SGD

/// Classical momentum SGD state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(contract(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(contract(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Ok(Self {
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← momentum·v + g; p ← p − lr·v` for every parameter buffer.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(contract(format!(
            "sgd got {} parameter buffers, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(contract(format!(
                "sgd buffer {i}: param {} / grad {} / velocity {} lengths differ",
                p.len(),
                g.len(),
                v.len()
            )));
        }
    }
    let (lr, mom) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = mom * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}
