use rayon::prelude::*;

use super::{invalid, mismatch, NnError, Rng, Tensor};

type Result<T> = std::result::Result<T, NnError>;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
struct MatView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatView<'a> {
    fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    fn transposed(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major of stride `ldc`.
fn gemm(alpha: f32, a: MatView, b: MatView, beta: f32, c: &mut [f32], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand view out of bounds");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        c.chunks_mut(ldc).take(m).for_each(|row| row[..n].iter_mut().for_each(|v| *v *= beta));
        return;
    }
    // SAFETY: every view was checked to address only elements inside its slice,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", a.dims(), b.dims()));
    }
    a.check_finite("matmul")?;
    b.check_finite("matmul")?;
    let mut out = vec![0.0; m * n];
    gemm(1.0, MatView::row_major(a.data(), m, k), MatView::row_major(b.data(), k, n), 0.0, &mut out, n);
    Tensor::new([m, n], out)
}

/// `x W^T + b` over raw row-major weights of shape `[out, in]`.
fn affine(x: &[f32], rows: usize, w: &[f32], b: &[f32], out: usize, input: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        1.0,
        MatView::row_major(x, rows, input),
        MatView::row_major(w, out, input).transposed(),
        1.0,
        &mut y,
        out,
    );
    y
}

/// `x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, input) = x.matrix_dims("linear")?;
    let (out, w_in) = w.matrix_dims("linear")?;
    if w_in != input {
        return Err(mismatch("linear", x.dims(), w.dims()));
    }
    if b.dims() != [out] {
        return Err(mismatch("linear", w.dims(), b.dims()));
    }
    x.check_finite("linear")?;
    w.check_finite("linear")?;
    b.check_finite("linear")?;
    Tensor::new([n, out], affine(x.data(), n, w.data(), b.data(), out, input))
}

/// Per-row normalization to zero mean and unit variance, then `gamma * . + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, d) = x.matrix_dims("layer_norm")?;
    if gamma.dims() != [d] || beta.dims() != [d] {
        return Err(mismatch("layer_norm", x.dims(), gamma.dims()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid("layer_norm", format!("eps must be positive, got {eps}")));
    }
    x.check_finite("layer_norm")?;
    let (g, bt) = (gamma.data(), beta.data());
    let mut out = vec![0.0; n * d];
    for (src, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = src.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for i in 0..d {
            dst[i] = ((f64::from(src[i]) - mean) * inv) as f32 * g[i] + bt[i];
        }
    }
    Tensor::new([n, d], out)
}

/// Error function, absolute error below 2e-7: Taylor series near zero,
/// Abramowitz and Stegun 7.1.26 elsewhere.
#[inline]
pub fn erf_scalar(x: f32) -> f32 {
    const P: f32 = 0.327_591_1;
    const A: [f32; 5] = [0.254_829_6, -0.284_496_74, 1.421_413_8, -1.453_152_1, 1.061_405_4];
    const C: [f32; 9] = [1.0, -1.0 / 3.0, 0.1, -1.0 / 42.0, 1.0 / 216.0, -1.0 / 1320.0, 1.0 / 9360.0, -1.0 / 75600.0, 1.0 / 685440.0];
    let ax = x.abs();
    let x2 = x * x;
    let mut s = C[8];
    for c in C[..8].iter().rev() {
        s = s * x2 + c;
    }
    let series = std::f32::consts::FRAC_2_SQRT_PI * ax * s;
    let t = 1.0 / (1.0 + P * ax);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    let tail = 1.0 - poly * exp_nonpos(-x2);
    let y = if ax < 0.8 { series } else { tail };
    y.copysign(x)
}

/// GELU, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + erf_scalar(x * std::f32::consts::FRAC_1_SQRT_2))
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.check_finite("gelu")?;
    Tensor::new(x.dims(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.check_finite("sigmoid")?;
    Tensor::new(x.dims(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.check_finite("relu")?;
    Tensor::new(x.dims(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// `exp(x)` for `x <= 0`, within 2 ulp of the correctly rounded value.
/// Arguments below -87 are clamped there.
#[inline]
pub fn exp_nonpos(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = if x < -87.0 { -87.0 } else { x };
    let shifted = x * std::f32::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    let k = shifted.to_bits().wrapping_sub(ROUND.to_bits());
    e * f32::from_bits(k.wrapping_add(127) << 23)
}

/// Reduction over eight independent lanes.
fn lanes<F: Fn(f32, f32) -> f32>(row: &[f32], init: f32, f: F) -> f32 {
    let mut acc = [init; 8];
    let chunks = row.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = f(acc[i], c[i]);
        }
    }
    tail.iter().fold(acc.into_iter().fold(init, &f), |a, &b| f(a, b))
}

fn softmax_in_place(row: &mut [f32]) {
    let max = lanes(row, f32::NEG_INFINITY, |a, b| if b > a { b } else { a });
    row.iter_mut().for_each(|v| *v = exp_nonpos(*v - max));
    let sum = lanes(row, 0.0, |a, b| a + b);
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = x.dims();
    if axis >= dims.len() {
        return Err(invalid("softmax", format!("axis {axis} out of range for {dims:?}")));
    }
    x.check_finite("softmax")?;
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = x.data().to_vec();
    if inner == 1 {
        out.chunks_exact_mut(n.max(1)).for_each(softmax_in_place);
    } else {
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for j in 0..n {
                    buf[j] = out[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for j in 0..n {
                    out[base + j * inner] = buf[j];
                }
            }
        }
    }
    Tensor::new(dims, out)
}

/// Mean over tokens: `[n, d] -> [d]`.
pub fn global_avg_pool(tokens: &Tensor) -> Result<Tensor> {
    let (n, d) = tokens.matrix_dims("global_avg_pool")?;
    if n == 0 {
        return Err(invalid("global_avg_pool", "no tokens"));
    }
    tokens.check_finite("global_avg_pool")?;
    let mut acc = vec![0.0f64; d];
    for row in tokens.data().chunks_exact(d) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += f64::from(v));
    }
    Ok(Tensor::from_vec(acc.into_iter().map(|a| (a / n as f64) as f32).collect()))
}

/// Attention projections: fused `[3D, D]` QKV weight (rows q, k, v) and output projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub qkv_weight: &'a Tensor,
    pub qkv_bias: &'a Tensor,
    pub proj_weight: &'a Tensor,
    pub proj_bias: &'a Tensor,
}

/// Multi-head scaled dot-product attention of `q_tokens` over `kv_tokens`.
pub fn multi_head_attention(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    w: &AttentionWeights,
    n_heads: usize,
) -> Result<Tensor> {
    const OP: &str = "multi_head_attention";
    let (nq, d) = q_tokens.matrix_dims(OP)?;
    let (nk, dk) = kv_tokens.matrix_dims(OP)?;
    if dk != d {
        return Err(mismatch(OP, q_tokens.dims(), kv_tokens.dims()));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(invalid(OP, format!("{n_heads} heads do not divide embedding dim {d}")));
    }
    if w.qkv_weight.dims() != [3 * d, d] || w.qkv_bias.dims() != [3 * d] {
        return Err(mismatch(OP, &[3 * d, d], w.qkv_weight.dims()));
    }
    if w.proj_weight.dims() != [d, d] || w.proj_bias.dims() != [d] {
        return Err(mismatch(OP, &[d, d], w.proj_weight.dims()));
    }
    if nk == 0 {
        return Err(invalid(OP, "empty key/value sequence"));
    }
    for t in [q_tokens, kv_tokens, w.qkv_weight, w.qkv_bias, w.proj_weight, w.proj_bias] {
        t.check_finite(OP)?;
    }

    let (wd, bd) = (w.qkv_weight.data(), w.qkv_bias.data());
    let q = affine(q_tokens.data(), nq, &wd[..d * d], &bd[..d], d, d);
    let kv = affine(kv_tokens.data(), nk, &wd[d * d..], &bd[d..], 2 * d, d);

    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let heads: Vec<Vec<f32>> = (0..n_heads)
        .into_par_iter()
        .map(|h| {
            let q_h = MatView { data: &q[h * dh..], rows: nq, cols: dh, rs: d, cs: 1 };
            let k_h = MatView { data: &kv[h * dh..], rows: nk, cols: dh, rs: 2 * d, cs: 1 };
            let v_h = MatView { data: &kv[d + h * dh..], rows: nk, cols: dh, rs: 2 * d, cs: 1 };
            let mut scores = vec![0.0; nq * nk];
            gemm(scale, q_h, k_h.transposed(), 0.0, &mut scores, nk);
            scores.chunks_exact_mut(nk).for_each(softmax_in_place);
            let mut out = vec![0.0; nq * dh];
            gemm(1.0, MatView::row_major(&scores, nq, nk), v_h, 0.0, &mut out, dh);
            out
        })
        .collect();

    let mut merged = vec![0.0; nq * d];
    for (h, head) in heads.iter().enumerate() {
        for (dst, src) in merged.chunks_exact_mut(d).zip(head.chunks_exact(dh)) {
            dst[h * dh..(h + 1) * dh].copy_from_slice(src);
        }
    }
    Tensor::new([nq, d], affine(&merged, nq, w.proj_weight.data(), w.proj_bias.data(), d, d))
}

/// 2-D convolution of `x: [C, H, W]` with `kernel: [O, C, kh, kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (c, h, w) = match x.dims()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(invalid(OP, format!("input must be [C, H, W], got {:?}", x.dims()))),
    };
    let (o, kc, kh, kw) = match kernel.dims()[..] {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => return Err(invalid(OP, format!("kernel must be [O, C, kh, kw], got {:?}", kernel.dims()))),
    };
    if kc != c {
        return Err(mismatch(OP, x.dims(), kernel.dims()));
    }
    if stride == 0 {
        return Err(invalid(OP, "stride must be positive"));
    }
    if let Some(b) = bias {
        if b.dims() != [o] {
            return Err(mismatch(OP, kernel.dims(), b.dims()));
        }
        b.check_finite(OP)?;
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(invalid(OP, "kernel larger than padded input"));
    }
    x.check_finite(OP)?;
    kernel.check_finite(OP)?;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let patch = c * kh * kw;
    let npix = ho * wo;
    // im2col: [patch, npix]
    let mut cols = vec![0.0f32; patch * npix];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = xd[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f32; o * npix];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_exact_mut(npix).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
    }
    gemm(
        1.0,
        MatView::row_major(kernel.data(), o, patch),
        MatView::row_major(&cols, patch, npix),
        1.0,
        &mut out,
        npix,
    );
    Tensor::new([o, ho, wo], out)
}

/// Gumbel-softmax over a rank-1 logit vector.
///
/// With `rng = None` no noise is added (plain tempered softmax). `hard`
/// returns the one-hot vector at the first maximum of the soft sample.
pub fn gumbel_softmax(logits: &Tensor, tau: f32, rng: Option<&mut Rng>, hard: bool) -> Result<Tensor> {
    const OP: &str = "gumbel_softmax";
    if logits.rank() != 1 || logits.is_empty() {
        return Err(invalid(OP, format!("logits must be a non-empty vector, got {:?}", logits.dims())));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(OP, format!("temperature must be positive, got {tau}")));
    }
    logits.check_finite(OP)?;
    let mut y: Vec<f64> = logits.data().iter().map(|&l| f64::from(l)).collect();
    if let Some(rng) = rng {
        y.iter_mut().for_each(|v| *v += rng.gumbel());
    }
    let t = f64::from(tau);
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in y.iter_mut() {
        *v = ((*v - max) / t).exp();
        sum += *v;
    }
    let soft: Vec<f32> = y.iter().map(|v| (v / sum) as f32).collect();
    if hard {
        let idx = argmax(&soft);
        let mut one_hot = vec![0.0; soft.len()];
        one_hot[idx] = 1.0;
        Ok(Tensor::from_vec(one_hot))
    } else {
        Ok(Tensor::from_vec(soft))
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
