//! Channels-last tensor building blocks shared by the denoiser, the semantic
//! backend and the guidance adapters. Everything here is differentiable
//! through candle's autograd.

use candle_core::{DType, Device, Tensor, D};

use crate::error::shape;
use crate::Result;

/// `x @ w^T` over the last dimension, `w` stored as `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (out_dim, in_dim) = w.dims2()?;
    let last = *dims.last().ok_or_else(|| shape("linear on a scalar"))?;
    if last != in_dim {
        return Err(shape(format!("linear expects {in_dim} input features, got {last}")));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out_dims)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn rms_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + eps)?.sqrt()?)?)
}

/// Softmax over the last dimension as a single fused kernel for f32/f64,
/// with an analytic backward `p * (g - sum(g * p))`. Other dtypes fall back
/// to the composite formulation.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    match x.dtype() {
        DType::F32 | DType::F64 => Ok(x.contiguous()?.apply_op1(FusedSoftmax)?),
        _ => {
            let m = x.max_keepdim(D::Minus1)?.detach();
            let e = x.broadcast_sub(&m)?.exp()?;
            let s = e.sum_keepdim(D::Minus1)?;
            Ok(e.broadcast_div(&s)?)
        }
    }
}

struct FusedSoftmax;

fn softmax_rows<T: num_traits::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

impl candle_core::CustomOp1 for FusedSoftmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("fused softmax needs a contiguous input".into()))?;
        let dim = layout.dims().last().copied().unwrap_or(1).max(1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], dim)),
            _ => candle_core::bail!("fused softmax supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((grad_res.broadcast_sub(&dot)? * res)?))
    }
}

/// Scaled dot-product attention on `(batch, len, dim)` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dim = q.dim(D::Minus1)?;
    let scores = q
        .contiguous()?
        .matmul(&k.t()?.contiguous()?)?
        .affine(1.0 / (dim as f64).sqrt(), 0.0)?;
    let probs = softmax_last(&scores)?;
    Ok(probs.matmul(&v.contiguous()?)?)
}

/// 3x3 same-padding convolution on `(N, H, W, C)`. `w` has shape
/// `(out, 9 * C)` with taps ordered `(dy, dx, c)`.
pub fn conv3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (_, _, _, c) = x.dims4()?;
    let (out, k) = w.dims2()?;
    if k != 9 * c {
        return Err(shape(format!("conv3x3 expects a ({out}, {}) kernel, got ({out}, {k})", 9 * c)));
    }
    let kernel = w.reshape((out, 3, 3, c))?.permute((0, 3, 1, 2))?.contiguous()?;
    let y = x.permute((0, 3, 1, 2))?.contiguous()?.conv2d(&kernel, 1, 1, 1, 1)?;
    Ok(y.permute((0, 2, 3, 1))?.contiguous()?)
}

/// 2x2 average pooling on `(N, H, W, C)`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape(format!("avg_pool2 needs even spatial dims, got {h}x{w}")));
    }
    let y = x.reshape((n, h / 2, 2, w / 2, 2, c))?.sum(4)?.sum(2)?;
    Ok(y.affine(0.25, 0.0)?)
}

/// Nearest 2x upsampling on `(N, H, W, C)`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    let y = x
        .reshape((n, h, 1, w, 1, c))?
        .broadcast_as((n, h, 2, w, 2, c))?
        .contiguous()?;
    Ok(y.reshape((n, 2 * h, 2 * w, c))?)
}

/// How a 2-D map is resampled to a new spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Row-stochastic `(out, in)` interpolation matrix with half-pixel centres.
pub fn resize_matrix(input: usize, output: usize, mode: ResizeMode) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = (o as f64 + 0.5) * scale - 0.5;
        match mode {
            ResizeMode::Nearest => {
                let i = ((o as f64 + 0.5) * scale).floor() as usize;
                m[o * input + i.min(input - 1)] = 1.0;
            }
            ResizeMode::Bilinear => {
                let src = src.clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                let frac = src - lo as f64;
                m[o * input + lo] += 1.0 - frac;
                m[o * input + hi] += frac;
            }
        }
    }
    m
}

/// Resizes `(N, h, w, C)` to `(N, out_h, out_w, C)`; a no-op when sizes match.
pub fn resize_spatial(x: &Tensor, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rh = matrix_tensor(&resize_matrix(h, out_h, mode), out_h, h, dtype, dev)?;
    let rw = matrix_tensor(&resize_matrix(w, out_w, mode), out_w, w, dtype, dev)?;
    // (N, C, h, w) -> rows then columns
    let y = x.permute((0, 3, 1, 2))?.contiguous()?;
    let y = y.broadcast_matmul(&rw.t()?)?;
    let y = rh.broadcast_left(1)?.broadcast_left(1)?.broadcast_matmul(&y)?;
    Ok(y.permute((0, 2, 3, 1))?.contiguous()?)
}

fn matrix_tensor(v: &[f64], rows: usize, cols: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(v, (rows, cols), dev)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Sum of squares of every element, as f64.
pub fn sum_sq(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?)
}

/// `||a - b|| / ||b||`.
pub fn relative_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = sum_sq(&(a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?)?;
    let base = sum_sq(b)?;
    Ok((diff / base.max(f64::MIN_POSITIVE)).sqrt())
}

/// Exact bitwise equality of two tensors (shape, dtype and every element).
pub fn bit_identical(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let bytes = |t: &Tensor| -> Result<Vec<u64>> {
        let flat = t.flatten_all()?;
        Ok(match t.dtype() {
            DType::F64 => flat.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect(),
            _ => flat
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .into_iter()
                .map(|x| x.to_bits() as u64)
                .collect(),
        })
    };
    Ok(bytes(a)? == bytes(b)?)
}
