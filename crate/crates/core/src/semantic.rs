//! Semantic patch features, joint PCA, adaptive foreground masks and the PCA
//! colour visualization.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::FrameVideo;
use crate::error::{invalid, shape};
use crate::{nn, rng, Error, Result};

/// `N x h x w x c` token features plus the pixel size they were taken from.
#[derive(Debug, Clone)]
pub struct SemanticFeatureMap {
    features: Tensor,
    source_resolution: (usize, usize),
}

impl SemanticFeatureMap {
    pub fn new(features: Tensor, source_resolution: (usize, usize)) -> Result<Self> {
        features.dims4()?;
        Ok(Self {
            features,
            source_resolution,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn source_resolution(&self) -> (usize, usize) {
        self.source_resolution
    }

    /// `(N, h, w, c)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.features.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Token rows `(N*h*w, c)` as f64.
    pub fn token_rows(&self) -> Result<Vec<Vec<f64>>> {
        let (n, h, w, c) = self.dims();
        Ok(self
            .features
            .to_dtype(DType::F64)?
            .reshape((n * h * w, c))?
            .to_vec2::<f64>()?)
    }

    pub fn select(&self, frames: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(frames.iter().map(|&i| i as u32).collect::<Vec<_>>(), frames.len(), self.features.device())?;
        Self::new(self.features.index_select(&idx, 0)?, self.source_resolution)
    }
}

/// What to do when pixel dims are not a multiple of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPolicy {
    Strict,
    /// Drop the trailing partial patch row/column.
    Crop,
}

/// Anything that turns frames into an `N x h x w x c` token map.
pub trait SemanticBackend {
    fn patch_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn extract(&self, video: &FrameVideo) -> Result<SemanticFeatureMap>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    pub patch_size: usize,
    pub feature_dim: usize,
    /// Frames are resized to this `(height, width)` before patching.
    pub input_size: Option<(usize, usize)>,
    pub patch_policy: PatchPolicy,
    /// Spatial reach of the mixing attention, in tokens.
    pub locality: f64,
    pub seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            patch_size: 28,
            feature_dim: 64,
            input_size: Some((448, 448)),
            patch_policy: PatchPolicy::Strict,
            locality: 1.5,
            seed: 0,
        }
    }
}

/// Frozen random patch embedding followed by one residual attention layer
/// with a Gaussian locality bias.
#[derive(Debug, Clone)]
pub struct ToySemanticBackend {
    config: SemanticConfig,
    patch_proj: Tensor,
    to_q: Tensor,
    to_k: Tensor,
    to_v: Tensor,
}

impl ToySemanticBackend {
    pub fn new(config: SemanticConfig) -> Result<Self> {
        if config.patch_size == 0 || config.feature_dim == 0 {
            return Err(invalid("semantic backend needs positive patch size and feature dim"));
        }
        let fan = 3 * config.patch_size * config.patch_size;
        let c = config.feature_dim;
        let draw = |label: &str, dims: &[usize], std: f64| {
            let mut r = rng::stream(config.seed, label);
            rng::gaussian_tensor(&mut r, dims, std, DType::F32, &Device::Cpu)
        };
        let patch_proj = draw("semantic.patch", &[c, fan], 1.0 / (fan as f64).sqrt())?;
        let std = 1.0 / (c as f64).sqrt();
        Ok(Self {
            to_q: draw("semantic.q", &[c, c], std)?,
            to_k: draw("semantic.k", &[c, c], std)?,
            to_v: draw("semantic.v", &[c, c], 0.5 * std)?,
            patch_proj,
            config,
        })
    }

    pub fn config(&self) -> &SemanticConfig {
        &self.config
    }

    /// Token grid produced for `height x width` pixels after the input resize.
    pub fn grid_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (h, w) = self.config.input_size.unwrap_or((height, width));
        let p = self.config.patch_size;
        match self.config.patch_policy {
            PatchPolicy::Strict if h % p != 0 || w % p != 0 => Err(shape(format!(
                "{h}x{w} pixels not divisible by patch size {p}"
            ))),
            _ if h < p || w < p => Err(shape(format!("{h}x{w} smaller than one {p}px patch"))),
            _ => Ok((h / p, w / p)),
        }
    }

    fn locality_bias(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let n = gh * gw;
        let s2 = 2.0 * self.config.locality * self.config.locality;
        let mut b = vec![0f32; n * n];
        for i in 0..n {
            let (yi, xi) = ((i / gw) as f64, (i % gw) as f64);
            for j in 0..n {
                let (yj, xj) = ((j / gw) as f64, (j % gw) as f64);
                b[i * n + j] = (-((yi - yj).powi(2) + (xi - xj).powi(2)) / s2) as f32;
            }
        }
        Ok(Tensor::from_vec(b, (n, n), &Device::Cpu)?)
    }
}

impl SemanticBackend for ToySemanticBackend {
    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn extract(&self, video: &FrameVideo) -> Result<SemanticFeatureMap> {
        let (gh, gw) = self.grid_size(video.height(), video.width())?;
        let resized;
        let v = match self.config.input_size {
            Some((h, w)) => {
                resized = video.resize(h, w);
                &resized
            }
            None => video,
        };
        let p = self.config.patch_size;
        let n = v.frame_count();
        let pixels = Tensor::from_slice(v.data(), (n, v.height(), v.width(), 3), &Device::Cpu)?
            .narrow(1, 0, gh * p)?
            .narrow(2, 0, gw * p)?;
        let patches = pixels
            .reshape((n, gh, p, gw, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n, gh * gw, 3 * p * p))?;
        let x = nn::linear(&patches, &self.patch_proj)?;
        let c = self.config.feature_dim;
        let q = nn::linear(&x, &self.to_q)?;
        let k = nn::linear(&x, &self.to_k)?;
        let vv = nn::linear(&x, &self.to_v)?;
        let scores = q
            .matmul(&k.t()?.contiguous()?)?
            .affine(1.0 / (c as f64).sqrt(), 0.0)?
            .broadcast_add(&self.locality_bias(gh, gw)?)?;
        let mixed = nn::softmax_last(&scores)?.matmul(&vv)?;
        let features = (x + mixed)?.reshape((n, gh, gw, c))?;
        SemanticFeatureMap::new(features, (video.height(), video.width()))
    }
}

pub fn extract_semantic_features(video: &FrameVideo, backend: &dyn SemanticBackend) -> Result<SemanticFeatureMap> {
    backend.extract(video)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `k` unit rows of length `c`.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Score of one token on component `i`.
    pub fn score(&self, token: &[f64], i: usize) -> f64 {
        token
            .iter()
            .zip(&self.mean)
            .zip(&self.components[i])
            .map(|((x, m), u)| (x - m) * u)
            .sum()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as rows)`, sorted by descending value.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    (values, vectors)
}

/// Flips `u` so its largest-magnitude entry is positive.
fn canonical_sign(mut u: Vec<f64>) -> Vec<f64> {
    let pivot = u.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if pivot < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
    u
}

/// PCA over token rows.
#[allow(clippy::needless_range_loop)]
pub fn fit_pca_rows(rows: &[Vec<f64>], k: usize) -> Result<PcaBasis> {
    let c = rows.first().map_or(0, Vec::len);
    if k == 0 || k > c || rows.len() < k.max(2) {
        return Err(invalid(format!(
            "pca needs 1 <= k <= c and at least k tokens (k={k}, c={c}, tokens={})",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; c];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; c]; c];
    for r in rows {
        let d: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..c {
            for j in i..c {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    let total: f64 = (0..c).map(|i| cov[i][i]).sum();
    if total <= 0.0 {
        return Err(invalid("features have zero variance"));
    }
    let (values, vectors) = symmetric_eigen(&cov);
    Ok(PcaBasis {
        mean,
        components: vectors.into_iter().take(k).map(canonical_sign).collect(),
        explained_variance: values.into_iter().take(k).map(|v| v.max(0.0)).collect(),
    })
}

/// Joint PCA over every token of every frame.
pub fn fit_pca(f: &SemanticFeatureMap, k: usize) -> Result<PcaBasis> {
    fit_pca_rows(&f.token_rows()?, k)
}

/// Binary `N x h x w` mask stored as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ForegroundMask {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(shape(format!(
                "mask data has {} entries for {frames}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask entries must be 0 or 1"));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: bool) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![u8::from(value); frames * height * width],
        }
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.data[(n * self.height + y) * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.data
            .chunks(self.height * self.width)
            .map(|f| f.iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn select(&self, frames: &[usize]) -> Result<Self> {
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(frames.len() * hw);
        for &i in frames {
            if i >= self.frames {
                return Err(invalid(format!("mask frame {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * hw..(i + 1) * hw]);
        }
        Self::new(frames.len(), self.height, self.width, data)
    }

    /// `(N, h, w, 1)` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| f32::from(b)).collect();
        Ok(Tensor::from_vec(v, (self.frames, self.height, self.width, 1), device)?.to_dtype(dtype)?)
    }

    /// Resamples to `height x width`: an output cell is foreground when at
    /// least half of the area it covers in the source grid is foreground.
    /// Upsampling by an integer factor is nearest-neighbour replication.
    pub fn resample(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("mask target size must be positive"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let ry = coverage_matrix(self.height, height);
        let rx = coverage_matrix(self.width, width);
        let mut data = vec![0u8; self.frames * height * width];
        for n in 0..self.frames {
            for (oy, wy) in ry.iter().enumerate() {
                for (ox, wx) in rx.iter().enumerate() {
                    let mut cover = 0.0;
                    for &(iy, fy) in wy {
                        for &(ix, fx) in wx {
                            if self.get(n, iy, ix) {
                                cover += fy * fx;
                            }
                        }
                    }
                    data[(n * height + oy) * width + ox] = u8::from(cover >= 0.5 - 1e-12);
                }
            }
        }
        Self::new(self.frames, height, width, data)
    }
}

/// For each output cell, the input cells it overlaps with their area share.
fn coverage_matrix(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(input))
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    Otsu,
    /// Scores above this quantile of the pooled scores become foreground.
    Quantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignRule {
    /// The side whose tokens have the larger mean centred norm is foreground.
    Auto,
    /// High scores are foreground.
    Positive,
    /// Low scores are foreground.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub threshold: ThresholdRule,
    pub sign: SignRule,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            threshold: ThresholdRule::Otsu,
            sign: SignRule::Auto,
        }
    }
}

/// Otsu's threshold: the cut between consecutive sorted values that
/// maximises the between-class variance. Returns the midpoint of that gap.
pub fn otsu_threshold(scores: &[f64]) -> Result<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() < 2 || s[0] == s[s.len() - 1] {
        return Err(Error::DegenerateMask("scores are constant; nothing to split".into()));
    }
    let n = s.len() as f64;
    let total: f64 = s.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut left = 0.0;
    for i in 0..s.len() - 1 {
        left += s[i];
        if s[i] == s[i + 1] {
            continue;
        }
        let n0 = (i + 1) as f64;
        let n1 = n - n0;
        let m0 = left / n0;
        let m1 = (total - left) / n1;
        let between = n0 * n1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, 0.5 * (s[i] + s[i + 1]));
        }
    }
    Ok(best.1)
}

fn quantile_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(invalid(format!("quantile {q} outside [0, 1)")));
    }
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = ((s.len() as f64 * q).floor() as usize).min(s.len() - 1);
    Ok(s[idx])
}

/// Splits scores into `score > threshold` per the rule.
pub fn threshold_scores(scores: &[f64], rule: ThresholdRule) -> Result<Vec<bool>> {
    if scores.is_empty() {
        return Err(invalid("no scores to threshold"));
    }
    let t = match rule {
        ThresholdRule::Otsu => otsu_threshold(scores)?,
        ThresholdRule::Quantile(q) => quantile_threshold(scores, q)?,
    };
    Ok(scores.iter().map(|&s| s > t).collect())
}

/// Scores every token on component 1, thresholds the pooled scores once and
/// orients the split per the sign rule; the same orientation holds for all
/// frames.
pub fn foreground_mask(f: &SemanticFeatureMap, basis: &PcaBasis, policy: &MaskPolicy) -> Result<ForegroundMask> {
    if basis.k() == 0 {
        return Err(invalid("pca basis has no components"));
    }
    let (n, h, w, c) = f.dims();
    if basis.mean.len() != c {
        return Err(shape(format!("basis has dim {}, features {c}", basis.mean.len())));
    }
    let rows = f.token_rows()?;
    let scores: Vec<f64> = rows.iter().map(|r| basis.score(r, 0)).collect();
    let high = threshold_scores(&scores, policy.threshold)?;
    let high_is_fg = match policy.sign {
        SignRule::Positive => true,
        SignRule::Negative => false,
        SignRule::Auto => {
            let mut acc = [(0.0, 0usize); 2];
            for (r, &hi) in rows.iter().zip(&high) {
                let norm = r.iter().zip(&basis.mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>().sqrt();
                let slot = &mut acc[usize::from(hi)];
                slot.0 += norm;
                slot.1 += 1;
            }
            let mean = |(s, k): (f64, usize)| if k == 0 { 0.0 } else { s / k as f64 };
            mean(acc[1]) >= mean(acc[0])
        }
    };
    let data: Vec<u8> = high.iter().map(|&hi| u8::from(hi == high_is_fg)).collect();
    let mask = ForegroundMask::new(n, h, w, data)?;
    let total = mask.count();
    if total == 0 || total == mask.data.len() {
        return Err(Error::DegenerateMask(format!(
            "{} of {} tokens are foreground",
            total,
            mask.data.len()
        )));
    }
    if let Some(i) = mask.frame_counts().iter().position(|&k| k == 0) {
        return Err(Error::DegenerateMask(format!("frame {i} has no foreground tokens")));
    }
    Ok(mask)
}

/// Zeroes background tokens; foreground tokens pass through unchanged.
pub fn masked_foreground(f: &SemanticFeatureMap, m: &ForegroundMask) -> Result<SemanticFeatureMap> {
    let (n, h, w, _) = f.dims();
    if (m.frames, m.height, m.width) != (n, h, w) {
        return Err(shape(format!(
            "mask {}x{}x{} vs features {n}x{h}x{w}",
            m.frames, m.height, m.width
        )));
    }
    let x = f.features();
    let keep = m
        .to_tensor(DType::U8, x.device())?
        .broadcast_as(x.dims())?
        .contiguous()?;
    let out = keep.where_cond(x, &x.zeros_like()?)?;
    SemanticFeatureMap::new(out, f.source_resolution)
}

/// Projects tokens on the first three components, min-max normalises each
/// channel jointly over all frames (foreground tokens only when a mask is
/// given) and returns a `N x h x w` RGB video. Background renders black; a
/// channel with zero range renders 0.5.
pub fn pca_rgb_visualization(
    f: &SemanticFeatureMap,
    basis3: &PcaBasis,
    mask: Option<&ForegroundMask>,
) -> Result<FrameVideo> {
    if basis3.k() < 3 {
        return Err(invalid(format!("visualization needs 3 components, basis has {}", basis3.k())));
    }
    let (n, h, w, _) = f.dims();
    if let Some(m) = mask {
        if (m.frames, m.height, m.width) != (n, h, w) {
            return Err(shape("visualization mask does not match features"));
        }
    }
    let rows = f.token_rows()?;
    let fg: Vec<bool> = (0..rows.len()).map(|i| mask.is_none_or(|m| m.data[i] == 1)).collect();
    let proj: Vec<[f64; 3]> = rows
        .iter()
        .map(|r| [basis3.score(r, 0), basis3.score(r, 1), basis3.score(r, 2)])
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in proj.iter().zip(&fg).filter(|(_, &k)| k) {
        for ch in 0..3 {
            lo[ch] = lo[ch].min(p[ch]);
            hi[ch] = hi[ch].max(p[ch]);
        }
    }
    let mut data = Vec::with_capacity(rows.len() * 3);
    for (p, &keep) in proj.iter().zip(&fg) {
        for ch in 0..3 {
            let v = if !keep {
                0.0
            } else if hi[ch] > lo[ch] {
                ((p[ch] - lo[ch]) / (hi[ch] - lo[ch])).clamp(0.0, 1.0)
            } else {
                0.5
            };
            data.push(v as f32);
        }
    }
    FrameVideo::new(n, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from_rows(rows: &[Vec<f64>], n: usize, h: usize, w: usize) -> SemanticFeatureMap {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (n, h, w, c), &Device::Cpu).unwrap();
        SemanticFeatureMap::new(t, (h, w)).unwrap()
    }

    fn random_rows(seed: u64, n: usize, c: usize) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, "rows");
        let scales: Vec<f64> = (0..c).map(|i| 1.0 + i as f64).collect();
        (0..n)
            .map(|_| rng::gaussian_vec(&mut r, c, 1.0).iter().zip(&scales).map(|(x, s)| x * s).collect())
            .collect()
    }

    #[test]
    fn toy_backend_grid_sizes() {
        let b = ToySemanticBackend::new(SemanticConfig::default()).unwrap();
        let v = FrameVideo::new(1, 64, 64, vec![0.5; 64 * 64 * 3]).unwrap();
        assert_eq!(b.extract(&v).unwrap().dims(), (1, 16, 16, 64));
        let crop = ToySemanticBackend::new(SemanticConfig {
            input_size: Some((448, 768)),
            patch_policy: PatchPolicy::Crop,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(crop.grid_size(448, 768).unwrap(), (16, 27));
        let strict = ToySemanticBackend::new(SemanticConfig {
            input_size: None,
            ..Default::default()
        })
        .unwrap();
        assert!(strict.grid_size(448, 768).is_err());
        assert_eq!(strict.grid_size(448, 448).unwrap(), (16, 16));
    }

    #[test]
    fn identical_frames_identical_features() {
        let b = ToySemanticBackend::new(SemanticConfig { input_size: Some((112, 112)), ..Default::default() }).unwrap();
        let mut r = rng::stream(0, "px");
        let one: Vec<f32> = (0..32 * 32 * 3).map(|_| rand::Rng::random::<f32>(&mut r)).collect();
        let v = FrameVideo::new(2, 32, 32, [one.clone(), one].concat()).unwrap();
        let f = b.extract(&v).unwrap();
        let a = f.features().get(0).unwrap();
        let c = f.features().get(1).unwrap();
        assert!(nn::bit_identical(&a, &c).unwrap());
    }

    #[test]
    fn pca_cross_example() {
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.1], vec![0.0, -0.1]];
        let b = fit_pca_rows(&rows, 1).unwrap();
        assert!((b.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(b.components[0][1].abs() < 1e-12);
        // sample covariance along x: (1 + 1) / 3
        assert!((b.explained_variance[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pca_one_dimensional_data() {
        let u = [0.6, 0.8];
        let ts = [-2.0, -0.5, 0.0, 1.0, 3.0];
        let rows: Vec<Vec<f64>> = ts.iter().map(|t| vec![1.0 + t * u[0], 2.0 + t * u[1]]).collect();
        let b = fit_pca_rows(&rows, 1).unwrap();
        let cos = b.components[0][0] * u[0] + b.components[0][1] * u[1];
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        let mean = ts.iter().sum::<f64>() / 5.0;
        let var = ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((b.explained_variance[0] - var).abs() < 1e-10);
    }

    #[test]
    fn pca_matches_dense_eigensolver() {
        for seed in 0..5 {
            let rows = random_rows(seed, 500, 8);
            let b = fit_pca_rows(&rows, 8).unwrap();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..8).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let cov = nalgebra::DMatrix::from_fn(8, 8, |i, j| {
                rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0)
            });
            let eig = nalgebra::SymmetricEigen::new(cov);
            let top = eig.eigenvalues.iamax();
            let cos: f64 = (0..8).map(|j| eig.eigenvectors[(j, top)] * b.components[0][j]).sum();
            assert!(cos.abs() >= 0.999, "seed {seed}: {cos}");
            assert!((b.explained_variance[0] - eig.eigenvalues[top]).abs() < 1e-9);
            for i in 0..8 {
                for j in 0..8 {
                    let dot: f64 = (0..8).map(|d| b.components[i][d] * b.components[j][d]).sum();
                    assert!((dot - f64::from(i == j)).abs() < 1e-8);
                }
            }
            assert!(b.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn first_component_beats_direction_sweep() {
        let rows = random_rows(11, 200, 2);
        let b = fit_pca_rows(&rows, 1).unwrap();
        let var_along = |u: [f64; 2]| {
            let s: Vec<f64> = rows.iter().map(|r| r[0] * u[0] + r[1] * u[1]).collect();
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() as f64 - 1.0)
        };
        let best = var_along([b.components[0][0], b.components[0][1]]);
        for i in 0..3600 {
            let a = i as f64 * std::f64::consts::PI / 3600.0;
            assert!(var_along([a.cos(), a.sin()]) <= best + 1e-9);
        }
    }

    #[test]
    fn pca_errors() {
        let rows = random_rows(1, 10, 3);
        assert!(fit_pca_rows(&rows, 0).is_err());
        assert!(fit_pca_rows(&rows, 4).is_err());
        assert!(fit_pca_rows(&vec![vec![1.0, 2.0]; 5], 1).is_err());
    }

    /// Two clusters: a foreground blob far from the origin and a tight
    /// background cluster.
    fn two_cluster_map() -> (SemanticFeatureMap, Vec<u8>) {
        let mut r = rng::stream(3, "clusters");
        let (n, h, w) = (2, 4, 4);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n * h * w {
            let fg = i % 16 == 5 || i % 16 == 6 || i % 16 == 9 || i % 16 == 10;
            let noise = rng::gaussian_vec(&mut r, 3, 0.05);
            let centre = if fg { [3.0, 1.0, -2.0] } else { [0.0, 0.0, 0.0] };
            rows.push((0..3).map(|j| centre[j] + noise[j]).collect());
            truth.push(u8::from(fg));
        }
        (map_from_rows(&rows, n, h, w), truth)
    }

    #[test]
    fn otsu_splits_between_clusters() {
        let scores = [0.0, 0.1, 0.2, 5.0, 5.1, 5.3];
        let t = otsu_threshold(&scores).unwrap();
        assert!((t - 2.6).abs() < 1e-12);
        // brute force oracle
        let mut best = (f64::NEG_INFINITY, 0);
        for cut in 1..scores.len() {
            let (a, b) = scores.split_at(cut);
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let v = (a.len() * b.len()) as f64 * (ma - mb).powi(2);
            if v > best.0 {
                best = (v, cut);
            }
        }
        assert_eq!(best.1, 3);
    }

    #[test]
    fn mask_recovers_foreground_and_is_scale_invariant() {
        let (f, truth) = two_cluster_map();
        let basis = fit_pca(&f, 1).unwrap();
        let m = foreground_mask(&f, &basis, &MaskPolicy::default()).unwrap();
        assert_eq!(m.data(), truth.as_slice());
        let scaled = SemanticFeatureMap::new(f.features().affine(7.5, 0.0).unwrap(), (4, 4)).unwrap();
        let basis2 = fit_pca(&scaled, 1).unwrap();
        assert_eq!(foreground_mask(&scaled, &basis2, &MaskPolicy::default()).unwrap(), m);
        let flipped = MaskPolicy { sign: SignRule::Negative, ..Default::default() };
        let positive = MaskPolicy { sign: SignRule::Positive, ..Default::default() };
        let a = foreground_mask(&f, &basis, &flipped).unwrap();
        let b = foreground_mask(&f, &basis, &positive).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x != y));
    }

    #[test]
    fn rethresholding_a_binary_mask_is_identity() {
        let (f, _) = two_cluster_map();
        let m = foreground_mask(&f, &fit_pca(&f, 1).unwrap(), &MaskPolicy::default()).unwrap();
        let scores: Vec<f64> = m.data().iter().map(|&b| f64::from(b)).collect();
        let again: Vec<u8> = threshold_scores(&scores, ThresholdRule::Otsu).unwrap().into_iter().map(u8::from).collect();
        assert_eq!(again, m.data());
    }

    #[test]
    fn identical_frames_identical_masks() {
        let (f, _) = two_cluster_map();
        let first = f.select(&[0, 0]).unwrap();
        let m = foreground_mask(&first, &fit_pca(&f, 1).unwrap(), &MaskPolicy::default()).unwrap();
        assert_eq!(m.data()[..16], m.data()[16..]);
    }

    #[test]
    fn degenerate_masks_error() {
        let rows = vec![vec![0.0, 0.0]; 8];
        let mut rows2 = rows.clone();
        rows2[0] = vec![1.0, 0.0];
        // frame 1 (tokens 4..8) has no foreground
        let f = map_from_rows(&rows2, 2, 2, 2);
        let b = fit_pca(&f, 1).unwrap();
        assert!(matches!(foreground_mask(&f, &b, &MaskPolicy::default()), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn masking_is_a_projection() {
        let (f, truth) = two_cluster_map();
        let m = ForegroundMask::new(2, 4, 4, truth).unwrap();
        let once = masked_foreground(&f, &m).unwrap();
        let twice = masked_foreground(&once, &m).unwrap();
        assert!(nn::bit_identical(once.features(), twice.features()).unwrap());
        let ones = ForegroundMask::filled(2, 4, 4, true);
        assert!(nn::bit_identical(masked_foreground(&f, &ones).unwrap().features(), f.features()).unwrap());
        let zeros = ForegroundMask::filled(2, 4, 4, false);
        assert_eq!(nn::sum_sq(masked_foreground(&f, &zeros).unwrap().features()).unwrap(), 0.0);
        let rows = f.token_rows().unwrap();
        let expect: f64 = rows
            .iter()
            .zip(m.data())
            .filter(|(_, &k)| k == 1)
            .map(|(r, _)| r.iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert!((nn::sum_sq(once.features()).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn visualization_ranges() {
        let rows = random_rows(5, 32, 4);
        let f = map_from_rows(&rows, 2, 4, 4);
        let b = fit_pca(&f, 3).unwrap();
        let v = pca_rgb_visualization(&f, &b, None).unwrap();
        for ch in 0..3 {
            let vals: Vec<f32> = v.data().iter().skip(ch).step_by(3).copied().collect();
            assert_eq!(vals.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
            assert_eq!(vals.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
        }
        assert!(pca_rgb_visualization(&f, &fit_pca(&f, 2).unwrap(), None).is_err());
    }

    #[test]
    fn constant_features_render_gray_and_background_black() {
        let b = PcaBasis {
            mean: vec![0.0; 3],
            components: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            explained_variance: vec![1.0, 1.0, 1.0],
        };
        let f = map_from_rows(&vec![vec![0.3, 0.3, 0.3]; 4], 1, 2, 2);
        let v = pca_rgb_visualization(&f, &b, None).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
        let m = ForegroundMask::new(1, 2, 2, vec![1, 0, 1, 1]).unwrap();
        let v = pca_rgb_visualization(&f, &b, Some(&m)).unwrap();
        assert_eq!(&v.data()[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_resampling() {
        let m = ForegroundMask::new(1, 2, 2, vec![1, 0, 0, 1]).unwrap();
        let up = m.resample(4, 4).unwrap();
        assert_eq!(
            up.data(),
            &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1]
        );
        assert_eq!(up.resample(2, 2).unwrap(), m);
        // 16 -> 64 -> 16 is exact for integer factors
        let mut r = rng::stream(1, "m");
        let data: Vec<u8> = (0..256).map(|_| u8::from(rand::Rng::random::<bool>(&mut r))).collect();
        let m = ForegroundMask::new(1, 16, 16, data).unwrap();
        assert_eq!(m.resample(64, 64).unwrap().resample(16, 16).unwrap(), m);
    }
}
