//! Forward and backward kernels.
//!
//! Spatial tensors are channels-last. The public functions accept a single
//! image `[H, W, C]` or a batch `[B, H, W, C]`; the tape in
//! [`graph`](super::graph) always works on batches.

use super::{BatchNormState, ParamStore, Scalar, Tensor};
use crate::error::{bail, Result};

/// Probability clip applied inside both cross-entropy losses.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; odd kernels only.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalized exponential over the last axis.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// View a rank-3 image as a batch of one. Returns the batched shape.
fn as_batch(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [h, w, c] => Ok([1, h, w, c]),
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => bail!(
            Dimension,
            "{what}: expected [H,W,C] or [B,H,W,C], got {shape:?}"
        ),
    }
}

fn restore_rank<T: Scalar>(like: &[usize], t: Tensor<T>) -> Result<Tensor<T>> {
    if like.len() == 3 {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub o: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], k: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [b, h, w, c] = x;
        let &[kh, kw, kc, o] = k else {
            bail!(
                Dimension,
                "conv2d: kernel must be [kh,kw,Cin,Cout], got {k:?}"
            );
        };
        if kc != c {
            bail!(
                Dimension,
                "conv2d: input has {c} channels, kernel expects {kc}"
            );
        }
        if stride == 0 {
            bail!(Argument, "conv2d: stride must be at least 1");
        }
        let (ph, pw) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    bail!(
                        Argument,
                        "conv2d: same padding needs odd kernel extents, got {kh}x{kw}"
                    );
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * ph < kh || w + 2 * pw < kw {
            bail!(
                Dimension,
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            );
        }
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (w + 2 * pw - kw) / stride + 1;
        Ok(ConvGeom {
            b,
            h,
            w,
            c,
            kh,
            kw,
            o,
            stride,
            ph,
            pw,
            ho,
            wo,
        })
    }

    pub fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.b, self.ho, self.wo, self.o]
    }

    /// Input row/column for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.ph, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pw, g.w) else {
                            continue;
                        };
                        let s = ((b * g.h + iy) * g.w + ix) * g.c;
                        let d = (ky * g.kw + kx) * g.c;
                        dst[d..d + g.c].copy_from_slice(&x[s..s + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut dx = vec![T::zero(); g.b * g.h * g.w * g.c];
    let mut row = 0;
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.ph, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pw, g.w) else {
                            continue;
                        };
                        let d = ((b * g.h + iy) * g.w + ix) * g.c;
                        let s = (ky * g.kw + kx) * g.c;
                        for (acc, &v) in dx[d..d + g.c].iter_mut().zip(&src[s..s + g.c]) {
                            *acc += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Returns the output buffer and the im2col matrix (kept for the backward pass).
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let rows = g.rows();
    let mut out = match bias {
        Some(b) => {
            let mut out = Vec::with_capacity(rows * g.o);
            for _ in 0..rows {
                out.extend_from_slice(b);
            }
            out
        }
        None => vec![T::zero(); rows * g.o],
    };
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        rows,
        g.patch(),
        g.o,
        &cols,
        false,
        kernel,
        false,
        beta,
        &mut out,
    );
    (out, cols)
}

/// Gradients with respect to input, kernel, and bias.
pub(crate) fn conv_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    kernel: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.rows();
    let patch = g.patch();
    let mut dk = vec![T::zero(); patch * g.o];
    T::gemm(
        patch,
        rows,
        g.o,
        cols,
        true,
        dout,
        false,
        T::zero(),
        &mut dk,
    );
    let mut dcols = vec![T::zero(); rows * patch];
    T::gemm(
        rows,
        g.o,
        patch,
        dout,
        false,
        kernel,
        true,
        T::zero(),
        &mut dcols,
    );
    let dx = col2im(&dcols, g);
    let mut db = vec![T::zero(); g.o];
    for r in dout.chunks_exact(g.o) {
        for (acc, &v) in db.iter_mut().zip(r) {
            *acc += v;
        }
    }
    (dx, dk, db)
}

/// 2D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let xs = as_batch(x.shape(), "conv2d")?;
    let g = ConvGeom::new(xs, kernel.shape(), stride, padding)?;
    let (out, _) = conv_forward(x.data(), kernel.data(), None, &g);
    restore_rank(x.shape(), Tensor::new(&g.out_shape(), out)?)
}

// ---------------------------------------------------------------------------
// Activations

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    let one = T::one();
    let y = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    // Keep the result inside the open interval at the precision of T.
    let top = one - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(top)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::Softmax => {
            let width = *x.shape().last().unwrap_or(&1);
            let data = softmax_rows(x.data(), width);
            Tensor::new(x.shape(), data).expect("softmax keeps shape")
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling and resampling

/// Output buffer and, for each output element, the flat input index of its max.
pub(crate) fn max_pool2_forward<T: Scalar>(x: &[T], s: [usize; 4]) -> (Vec<T>, Vec<u32>) {
    let [b, h, w, c] = s;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * ho * wo * c);
    let mut arg = Vec::with_capacity(out.capacity());
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ci in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ci;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool_geom(shape: &[usize]) -> Result<[usize; 4]> {
    let s = as_batch(shape, "max_pool2")?;
    if s[1] % 2 != 0 || s[2] % 2 != 0 {
        bail!(
            Dimension,
            "max_pool2: extents {}x{} must be even",
            s[1],
            s[2]
        );
    }
    Ok(s)
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = pool_geom(x.shape())?;
    let (out, _) = max_pool2_forward(x.data(), s);
    restore_rank(
        x.shape(),
        Tensor::new(&[s[0], s[1] / 2, s[2] / 2, s[3]], out)?,
    )
}

pub(crate) fn upsample_geom(x: &[usize], skip: &[usize]) -> Result<([usize; 4], [usize; 4])> {
    let xs = as_batch(x, "upsample2_concat")?;
    let ss = as_batch(skip, "upsample2_concat")?;
    if x.len() != skip.len() || ss[0] != xs[0] || ss[1] != 2 * xs[1] || ss[2] != 2 * xs[2] {
        bail!(
            Dimension,
            "upsample2_concat: skip {skip:?} must have exactly double the extents of {x:?}"
        );
    }
    Ok((xs, ss))
}

pub(crate) fn upsample_concat_forward<T: Scalar>(
    x: &[T],
    skip: &[T],
    xs: [usize; 4],
    ss: [usize; 4],
) -> Vec<T> {
    let [b, h, w, c1] = xs;
    let c2 = ss[3];
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(b * h2 * w2 * (c1 + c2));
    for bi in 0..b {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((bi * h + y / 2) * w + xx / 2) * c1;
                out.extend_from_slice(&x[src..src + c1]);
                let s = ((bi * h2 + y) * w2 + xx) * c2;
                out.extend_from_slice(&skip[s..s + c2]);
            }
        }
    }
    out
}

pub(crate) fn upsample_concat_backward<T: Scalar>(
    dout: &[T],
    xs: [usize; 4],
    ss: [usize; 4],
) -> (Vec<T>, Vec<T>) {
    let [b, h, w, c1] = xs;
    let c2 = ss[3];
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); b * h * w * c1];
    let mut dskip = Vec::with_capacity(b * h2 * w2 * c2);
    for (p, px) in dout.chunks_exact(c1 + c2).enumerate() {
        let xx = p % w2;
        let y = (p / w2) % h2;
        let bi = p / (w2 * h2);
        let d = ((bi * h + y / 2) * w + xx / 2) * c1;
        for (acc, &v) in dx[d..d + c1].iter_mut().zip(&px[..c1]) {
            *acc += v;
        }
        dskip.extend_from_slice(&px[c1..]);
    }
    (dx, dskip)
}

/// Nearest-neighbour ×2 upsampling of `x`, concatenated with `skip` along
/// channels (skip channels last).
pub fn upsample2_concat<T: Scalar>(x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ss) = upsample_geom(x.shape(), skip.shape())?;
    let out = upsample_concat_forward(x.data(), skip.data(), xs, ss);
    let t = Tensor::new(&[ss[0], ss[1], ss[2], xs[3] + ss[3]], out)?;
    restore_rank(x.shape(), t)
}

// ---------------------------------------------------------------------------
// Batch normalization

pub(crate) struct BnTrainOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn bn_train_forward<T: Scalar>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnTrainOut<T> {
    let n = x.len() / c;
    let nf = T::from_f64(n as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![T::zero(); c];
    for px in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= nf);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    BnTrainOut {
        y,
        xhat,
        mean,
        var,
        inv_std,
    }
}

pub(crate) fn bn_train_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let n = T::from_f64((dy.len() / c) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (d, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += d[ch];
            dgamma[ch] += d[ch] * h[ch];
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    for (d, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch] / n;
            dx.push(k * (n * d[ch] - dbeta[ch] - h[ch] * dgamma[ch]));
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn bn_eval_forward<T: Scalar>(
    x: &[T],
    state: &BatchNormState<T>,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let inv_std: Vec<T> = state
        .running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + state.epsilon).sqrt())
        .collect();
    let mean = state.running_mean.data();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            y.push(gamma[ch] * h + beta[ch]);
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn bn_check<T: Scalar>(
    shape: &[usize],
    state: &BatchNormState<T>,
    mode: BnMode,
) -> Result<usize> {
    let c = *shape.last().unwrap_or(&0);
    if shape.len() < 2 || c != state.channels() {
        bail!(
            Dimension,
            "batch_norm: state has {} channels, input shape {shape:?}",
            state.channels()
        );
    }
    if mode == BnMode::Train && shape[0] < 2 {
        bail!(
            Config,
            "batch_norm: train mode needs a batch of at least 2, got {}",
            shape[0]
        );
    }
    Ok(c)
}

/// Per-channel batch normalization over `[B, H, W, C]` (or `[B, C]`).
///
/// Train mode normalizes by batch statistics and updates the running
/// statistics of `state`; eval mode uses the running statistics.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    store: &ParamStore<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    bn_check(x.shape(), state, mode)?;
    let gamma = store.get(state.gamma).value.data();
    let beta = store.get(state.beta).value.data();
    let y = match mode {
        BnMode::Train => {
            let out = bn_train_forward(x.data(), state.channels(), gamma, beta, state.epsilon);
            state.update_running(&out.mean, &out.var, x.len() / state.channels());
            out.y
        }
        BnMode::Eval => bn_eval_forward(x.data(), state, gamma, beta).0,
    };
    Tensor::new(x.shape(), y)
}

// ---------------------------------------------------------------------------
// Losses

#[inline]
pub(crate) fn clip_prob<T: Scalar>(p: T) -> T {
    let eps = T::from_f64(PROB_CLIP);
    p.max(eps).min(T::one() - eps)
}

/// Mean pixel-wise binary cross-entropy `(1/N) Σ −g ln p − (1−g) ln(1−p)`.
pub fn pixelwise_bce<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> Result<T> {
    if p.shape() != g.shape() {
        bail!(
            Dimension,
            "pixelwise_bce: prediction {:?} vs target {:?}",
            p.shape(),
            g.shape()
        );
    }
    let one = T::one();
    let total: T = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| {
            let pc = clip_prob(pv);
            -gv * pc.ln() - (one - gv) * (one - pc).ln()
        })
        .sum();
    Ok(total / T::from_f64(p.len() as f64))
}

/// Gradient of [`pixelwise_bce`] with respect to `p`.
///
/// Evaluated at the clipped probability, so saturated predictions still
/// receive a restoring gradient.
pub(crate) fn bce_grad<T: Scalar>(p: &[T], g: &[T], upstream: T) -> Vec<T> {
    let n = T::from_f64(p.len() as f64);
    let one = T::one();
    p.iter()
        .zip(g)
        .map(|(&pv, &gv)| {
            let pc = clip_prob(pv);
            upstream * (pc - gv) / (pc * (one - pc)) / n
        })
        .collect()
}

/// Cross-entropy of a probability vector against a class index, `−ln p[label]`.
pub fn categorical_ce<T: Scalar>(probs: &Tensor<T>, label: usize) -> Result<T> {
    let k = probs.len();
    if label >= k {
        bail!(
            Argument,
            "categorical_ce: label {label} out of range for {k} classes"
        );
    }
    Ok(-clip_prob(probs.data()[label]).ln())
}

/// Mean cross-entropy over rows of `[B, K]` probabilities.
pub(crate) fn categorical_ce_rows<T: Scalar>(probs: &[T], k: usize, labels: &[usize]) -> Result<T> {
    if probs.len() != k * labels.len() {
        bail!(
            Dimension,
            "categorical_ce: {} labels for {} probabilities",
            labels.len(),
            probs.len()
        );
    }
    let mut total = T::zero();
    for (row, &l) in probs.chunks_exact(k).zip(labels) {
        if l >= k {
            bail!(
                Argument,
                "categorical_ce: label {l} out of range for {k} classes"
            );
        }
        total += -clip_prob(row[l]).ln();
    }
    Ok(total / T::from_f64(labels.len() as f64))
}
