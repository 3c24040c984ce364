//! Frame videos, latent videos and the toy patch autoencoder.
//!
//! The toy encoder flattens non-overlapping `p x p x 3` patches and applies a
//! fixed `d x 3p^2` matrix with orthonormal rows. Decoding applies the
//! transpose and clamps to `[0, 1]`, so `encode(decode(z)) == z` for any latent
//! whose decoded pixels stay in range, and `decode(encode(x)) == x` for every
//! frame on the decoder's range.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, shape};
use crate::{rng, Result};

/// `N` RGB frames stored channels-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVideo {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Borrowed view of one frame.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [f32],
}

impl FrameVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(invalid("frame video needs at least one non-empty frame"));
        }
        if data.len() != frames * height * width * 3 {
            return Err(shape(format!(
                "expected {} values for {frames}x{height}x{width}x3, got {}",
                frames * height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> Frame<'_> {
        let n = self.height * self.width * 3;
        Frame {
            height: self.height,
            width: self.width,
            data: &self.data[i * n..(i + 1) * n],
        }
    }

    /// Frames `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::new();
        for &i in indices {
            if i >= self.frames {
                return Err(invalid(format!("frame {i} out of range")));
            }
            data.extend_from_slice(self.frame(i).data);
        }
        Self::new(indices.len(), self.height, self.width, data)
    }

    /// Bilinear resize of every frame (half-pixel centres).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let rows = crate::nn::resize_matrix(self.height, height, crate::nn::ResizeMode::Bilinear);
        let cols = crate::nn::resize_matrix(self.width, width, crate::nn::ResizeMode::Bilinear);
        let taps = |m: &[f64], n_in: usize, o: usize| -> Vec<(usize, f32)> {
            (0..n_in)
                .filter_map(|i| {
                    let w = m[o * n_in + i];
                    (w != 0.0).then_some((i, w as f32))
                })
                .collect()
        };
        let row_taps: Vec<_> = (0..height).map(|o| taps(&rows, self.height, o)).collect();
        let col_taps: Vec<_> = (0..width).map(|o| taps(&cols, self.width, o)).collect();
        let mut data = vec![0f32; self.frames * height * width * 3];
        for n in 0..self.frames {
            let src = self.frame(n).data;
            for (y, rt) in row_taps.iter().enumerate() {
                for (x, ct) in col_taps.iter().enumerate() {
                    let mut px = [0f32; 3];
                    for &(sy, wy) in rt {
                        for &(sx, wx) in ct {
                            let base = (sy * self.width + sx) * 3;
                            for c in 0..3 {
                                px[c] += wy * wx * src[base + c];
                            }
                        }
                    }
                    let o = ((n * height + y) * width + x) * 3;
                    for c in 0..3 {
                        data[o + c] = px[c].clamp(0.0, 1.0);
                    }
                }
            }
        }
        Self {
            frames: self.frames,
            height,
            width,
            data,
        }
    }

    /// Per-channel maximum absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if (self.frames, self.height, self.width) != (other.frames, other.height, other.width) {
            return Err(shape("frame videos differ in shape"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// `N x H x W x d` latents; the tensor every diffusion step acts on.
#[derive(Debug, Clone)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims4()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frame_count(&self) -> usize {
        self.0.dims()[0]
    }

    /// `(N, H, W, d)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }
}

#[derive(Debug, Clone)]
pub struct ToyAutoencoder {
    patch: usize,
    latent_channels: usize,
    /// `latent_channels x 3 p^2`, row-major, rows orthonormal.
    basis: Vec<f64>,
}

impl ToyAutoencoder {
    /// Rows 0..3 are per-channel patch means (`1/p` weights), row 3 a signed
    /// checkerboard over all channels; further rows, if requested, are
    /// Gram-Schmidt completions of seeded random vectors.
    pub fn new(patch: usize, latent_channels: usize) -> Result<Self> {
        let dim = 3 * patch * patch;
        if patch < 2 || latent_channels == 0 || latent_channels > dim {
            return Err(invalid(format!(
                "toy autoencoder needs patch >= 2 and 1 <= d <= {dim}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for c in 0..3 {
            let mut r = vec![0.0; dim];
            for p in 0..patch * patch {
                r[p * 3 + c] = 1.0 / patch as f64;
            }
            rows.push(r);
        }
        let mut checker = vec![0.0; dim];
        let norm = 1.0 / (dim as f64).sqrt();
        for y in 0..patch {
            for x in 0..patch {
                let s = if (x + y) % 2 == 0 { norm } else { -norm };
                for c in 0..3 {
                    checker[(y * patch + x) * 3 + c] = s;
                }
            }
        }
        rows.push(checker);
        let mut r = rng::stream(0, "toy-autoencoder-extra-rows");
        while rows.len() < latent_channels {
            let mut v = rng::gaussian_vec(&mut r, dim, 1.0);
            for _ in 0..2 {
                for u in &rows {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
        rows.truncate(latent_channels);
        Ok(Self {
            patch,
            latent_channels,
            basis: rows.concat(),
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn latent_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(shape(format!(
                "frame {height}x{width} not divisible by patch factor {}",
                self.patch
            )));
        }
        Ok((height / self.patch, width / self.patch))
    }

    pub fn encode_video(&self, v: &FrameVideo) -> Result<LatentVideo> {
        let (h, w) = self.latent_size(v.height, v.width)?;
        let p = self.patch;
        let d = self.latent_channels;
        let dim = 3 * p * p;
        let mut out = vec![0f32; v.frames * h * w * d];
        let mut patch = vec![0f64; dim];
        for n in 0..v.frames {
            let frame = v.frame(n).data;
            for i in 0..h {
                for j in 0..w {
                    for py in 0..p {
                        for px in 0..p {
                            let src = ((i * p + py) * v.width + j * p + px) * 3;
                            let dst = (py * p + px) * 3;
                            for c in 0..3 {
                                patch[dst + c] = frame[src + c] as f64;
                            }
                        }
                    }
                    let o = ((n * h + i) * w + j) * d;
                    for k in 0..d {
                        let row = &self.basis[k * dim..(k + 1) * dim];
                        out[o + k] = row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() as f32;
                    }
                }
            }
        }
        LatentVideo::new(Tensor::from_vec(out, (v.frames, h, w, d), &Device::Cpu)?)
    }

    /// Transpose map followed by a clamp to `[0, 1]`; never errors on range.
    pub fn decode_video(&self, z: &LatentVideo) -> Result<FrameVideo> {
        let (n, h, w, d) = z.dims();
        if d != self.latent_channels {
            return Err(shape(format!(
                "latent has {d} channels, decoder expects {}",
                self.latent_channels
            )));
        }
        let p = self.patch;
        let dim = 3 * p * p;
        let lat = z.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let (hp, wp) = (h * p, w * p);
        let mut data = vec![0f32; n * hp * wp * 3];
        let mut patch = vec![0f64; dim];
        for f in 0..n {
            for i in 0..h {
                for j in 0..w {
                    patch.iter_mut().for_each(|v| *v = 0.0);
                    let zo = ((f * h + i) * w + j) * d;
                    for k in 0..d {
                        let zk = lat[zo + k];
                        let row = &self.basis[k * dim..(k + 1) * dim];
                        patch.iter_mut().zip(row).for_each(|(a, b)| *a += zk * b);
                    }
                    for py in 0..p {
                        for px in 0..p {
                            let dst = ((f * hp + i * p + py) * wp + j * p + px) * 3;
                            let src = (py * p + px) * 3;
                            for c in 0..3 {
                                data[dst + c] = patch[src + c].clamp(0.0, 1.0) as f32;
                            }
                        }
                    }
                }
            }
        }
        FrameVideo::new(n, hp, wp, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_l2;

    fn random_latent(n: usize, h: usize, w: usize, seed: u64) -> LatentVideo {
        // latents whose decoded pixels stay inside [0, 1]: colour means in
        // [0.2, 0.8] (scaled by p) plus a small checker amplitude.
        let mut r = rng::stream(seed, "ae-test");
        let g = rng::gaussian_vec(&mut r, n * h * w * 4, 1.0);
        let v: Vec<f32> = g
            .chunks(4)
            .flat_map(|c| {
                let m = |x: f64| (8.0 * (0.5 + 0.3 * x.tanh())) as f32;
                [m(c[0]), m(c[1]), m(c[2]), (0.5 * c[3].tanh()) as f32]
            })
            .collect();
        LatentVideo::new(Tensor::from_vec(v, (n, h, w, 4), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn basis_rows_are_orthonormal() {
        for d in [4, 6] {
            let ae = ToyAutoencoder::new(8, d).unwrap();
            let dim = 192;
            for a in 0..d {
                for b in 0..d {
                    let dot: f64 = (0..dim).map(|i| ae.basis[a * dim + i] * ae.basis[b * dim + i]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10, "rows {a},{b}: {dot}");
                }
            }
        }
    }

    #[test]
    fn latent_shape_follows_patch_factor() {
        let ae = ToyAutoencoder::new(8, 4).unwrap();
        let v = FrameVideo::new(1, 512, 512, vec![0.0; 512 * 512 * 3]).unwrap();
        let z = ae.encode_video(&v).unwrap();
        assert_eq!(z.dims(), (1, 64, 64, 4));
        // zero frame -> zero latent
        assert_eq!(crate::nn::sum_sq(z.tensor()).unwrap(), 0.0);
        let bad = FrameVideo::new(1, 60, 64, vec![0.0; 60 * 64 * 3]).unwrap();
        assert!(ae.encode_video(&bad).is_err());
    }

    #[test]
    fn round_trip_on_decoder_range() {
        let ae = ToyAutoencoder::new(8, 4).unwrap();
        let z = random_latent(3, 4, 5, 1);
        let x = ae.decode_video(&z).unwrap();
        let z2 = ae.encode_video(&x).unwrap();
        assert!(relative_l2(z2.tensor(), z.tensor()).unwrap() < 1e-6);
        let x2 = ae.decode_video(&z2).unwrap();
        assert!(x2.max_abs_diff(&x).unwrap() < 1e-5);
        assert_eq!(x2.frame_count(), 3);
    }

    #[test]
    fn zero_latent_decodes_black_and_out_of_range_clamps() {
        let ae = ToyAutoencoder::new(8, 4).unwrap();
        let zero = LatentVideo::new(Tensor::zeros((2, 2, 2, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(ae.decode_video(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let big = LatentVideo::new((Tensor::ones((1, 1, 1, 4), DType::F32, &Device::Cpu).unwrap() * 100.0).unwrap()).unwrap();
        let x = ae.decode_video(&big).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let wrong = LatentVideo::new(Tensor::zeros((1, 1, 1, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(ae.decode_video(&wrong).is_err());
    }

    #[test]
    fn frame_video_validates_range() {
        assert!(FrameVideo::new(1, 1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(FrameVideo::new(0, 1, 1, vec![]).is_err());
        assert!(FrameVideo::new(1, 1, 1, vec![0.0; 2]).is_err());
    }
}
