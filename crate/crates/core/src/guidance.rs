//! Per-level projection MLPs that carry semantic features into the
//! denoiser's encoder feature space, the resize onto the feature ladder, and
//! the weighted element-wise injection.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape};
use crate::nn::{self, ResizeMode};
use crate::semantic::SemanticFeatureMap;
use crate::{rng, Result};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub resize: ResizeMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            depth: 2,
            resize: ResizeMode::Bilinear,
        }
    }
}

/// Four token-wise MLPs; level `l` maps `c -> d_l`. All layers are bias-free
/// and the output layer starts at zero, so zero tokens always project to zero
/// and a fresh set injects nothing.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    prefix: String,
    in_dim: usize,
    out_dims: [usize; LEVELS],
    config: AdapterConfig,
    params: BTreeMap<String, Tensor>,
}

impl AdapterSet {
    pub fn new(
        prefix: &str,
        in_dim: usize,
        out_dims: [usize; LEVELS],
        config: AdapterConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        if in_dim == 0 || config.hidden_width == 0 {
            return Err(invalid("adapter dimensions must be positive"));
        }
        let mut params = BTreeMap::new();
        for (l, &out) in out_dims.iter().enumerate() {
            let mut fan_in = in_dim;
            for i in 0..=config.depth {
                let name = format!("{prefix}.level{}.fc{i}.weight", l + 1);
                let w = if i == config.depth {
                    Tensor::zeros((out, fan_in), dtype, &Device::Cpu)?
                } else {
                    let mut r = rng::stream(seed, &name);
                    let std = (2.0 / fan_in as f64).sqrt();
                    rng::gaussian_tensor(&mut r, &[config.hidden_width, fan_in], std, dtype, &Device::Cpu)?
                };
                params.insert(name, w);
                fan_in = config.hidden_width;
            }
        }
        Ok(Self {
            prefix: prefix.to_string(),
            in_dim,
            out_dims,
            config,
            params,
        })
    }

    /// Rebuilds a set from named arrays (e.g. a checkpoint or trained vars).
    pub fn from_params(
        prefix: &str,
        config: AdapterConfig,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut out_dims = [0; LEVELS];
        let mut in_dim = 0;
        for (l, out) in out_dims.iter_mut().enumerate() {
            for i in 0..=config.depth {
                let name = format!("{prefix}.level{}.fc{i}.weight", l + 1);
                let w = params
                    .get(&name)
                    .ok_or_else(|| invalid(format!("adapter weight `{name}` missing")))?;
                let (o, fan_in) = w.dims2()?;
                if i == 0 {
                    if l > 0 && fan_in != in_dim {
                        return Err(shape("adapter levels disagree on input width"));
                    }
                    in_dim = fan_in;
                }
                if i == config.depth {
                    *out = o;
                }
            }
        }
        let expected = LEVELS * (config.depth + 1);
        if params.len() != expected {
            return Err(invalid(format!(
                "adapter set `{prefix}` expects {expected} arrays, got {}",
                params.len()
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            in_dim,
            out_dims,
            config,
            params,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dims(&self) -> [usize; LEVELS] {
        self.out_dims
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn with_params(&self, params: BTreeMap<String, Tensor>) -> Result<Self> {
        Self::from_params(&self.prefix, self.config.clone(), params)
    }

    /// Token-wise MLP of level `l` (1-based) applied to `(N, h, w, c)`.
    ///
    /// The MLP is bias-free and `gelu(0) = 0`, so all-zero tokens (the
    /// background of masked features) map to zero. When they are the
    /// majority only the remaining rows are pushed through the MLP and
    /// scattered back, which gives the same result.
    pub fn project_level(&self, x: &Tensor, level: usize) -> Result<Tensor> {
        if !(1..=LEVELS).contains(&level) {
            return Err(invalid(format!("adapter level must be in 1..={LEVELS}, got {level}")));
        }
        let dims = x.dims().to_vec();
        let c = *dims.last().ok_or_else(|| shape("adapter input is a scalar"))?;
        let rows = x.elem_count() / c.max(1);
        let flat = x.reshape((rows, c))?;
        let live: Vec<u32> = flat
            .abs()?
            .max(D::Minus1)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i as u32)
            .collect();
        let out_dim = self.out_dims[level - 1];
        let mut out_shape = dims;
        *out_shape.last_mut().unwrap() = out_dim;
        if 2 * live.len() >= rows {
            return Ok(self.mlp(&flat, level)?.reshape(out_shape)?);
        }
        let zeros = Tensor::zeros((rows, out_dim), x.dtype(), x.device())?;
        if live.is_empty() {
            return Ok(zeros.reshape(out_shape)?);
        }
        let idx = Tensor::from_vec(live.clone(), live.len(), x.device())?;
        let y = self.mlp(&flat.index_select(&idx, 0)?, level)?;
        Ok(zeros.index_add(&idx, &y, 0)?.reshape(out_shape)?)
    }

    fn mlp(&self, x: &Tensor, level: usize) -> Result<Tensor> {
        let mut h = x.clone();
        for i in 0..=self.config.depth {
            let w = &self.params[&format!("{}.level{level}.fc{i}.weight", self.prefix)];
            h = nn::linear(&h, w)?;
            if i < self.config.depth {
                h = nn::gelu(&h)?;
            }
        }
        Ok(h)
    }
}

/// Projected guidance for the four encoder levels plus its weight.
#[derive(Debug, Clone)]
pub struct GuidanceStack {
    levels: Vec<Tensor>,
    weight: f64,
}

impl GuidanceStack {
    pub fn new(levels: Vec<Tensor>, weight: f64) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(shape(format!("guidance needs {LEVELS} levels, got {}", levels.len())));
        }
        if weight.is_nan() || weight < 0.0 {
            return Err(invalid(format!("guidance weight must be >= 0, got {weight}")));
        }
        Ok(Self { levels, weight })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn with_weight(&self, weight: f64) -> Result<Self> {
        Self::new(self.levels.clone(), weight)
    }

    /// Checks every level against `(N, H_l, W_l, d_l)`.
    pub fn validate(&self, expected: &[[usize; 4]]) -> Result<()> {
        if expected.len() != self.levels.len() {
            return Err(shape(format!(
                "guidance has {} levels, denoiser taps {}",
                self.levels.len(),
                expected.len()
            )));
        }
        for (l, (g, e)) in self.levels.iter().zip(expected).enumerate() {
            if g.dims() != e {
                return Err(shape(format!(
                    "guidance level {} is {:?}, tap is {:?}",
                    l + 1,
                    g.dims(),
                    e
                )));
            }
        }
        Ok(())
    }
}

/// Checks that `sizes` halves level over level.
pub fn validate_ladder(sizes: &[(usize, usize); LEVELS]) -> Result<()> {
    for l in 1..LEVELS {
        let (ph, pw) = sizes[l - 1];
        if ph % 2 != 0 || pw % 2 != 0 || sizes[l] != (ph / 2, pw / 2) {
            return Err(invalid(format!("target sizes {sizes:?} are not a halving ladder")));
        }
    }
    Ok(())
}

/// Applies the level MLPs token-wise, then resizes each level onto the ladder.
pub fn project_guidance(
    f_d: &SemanticFeatureMap,
    adapters: &AdapterSet,
    target_sizes: &[(usize, usize); LEVELS],
    weight: f64,
) -> Result<GuidanceStack> {
    project_guidance_tensor(f_d.features(), adapters, target_sizes, weight)
}

pub fn project_guidance_tensor(
    features: &Tensor,
    adapters: &AdapterSet,
    target_sizes: &[(usize, usize); LEVELS],
    weight: f64,
) -> Result<GuidanceStack> {
    let (_, _, _, c) = features.dims4()?;
    if c != adapters.in_dim {
        return Err(shape(format!(
            "features have {c} channels, adapters expect {}",
            adapters.in_dim
        )));
    }
    validate_ladder(target_sizes)?;
    let x = features.to_dtype(adapters.params.values().next().map_or(DType::F32, |t| t.dtype()))?;
    let mut levels = Vec::with_capacity(LEVELS);
    for (l, &(h, w)) in target_sizes.iter().enumerate() {
        let projected = adapters.project_level(&x, l + 1)?;
        levels.push(nn::resize_spatial(&projected, h, w, adapters.config.resize)?);
    }
    GuidanceStack::new(levels, weight)
}

/// `f_t + lambda * f_s`. `lambda == 0` returns `f_t` untouched.
pub fn inject_guidance(f_t: &Tensor, f_s: &Tensor, lambda: f64) -> Result<Tensor> {
    if f_t.dims() != f_s.dims() {
        return Err(shape(format!(
            "inject_guidance: {:?} vs {:?}",
            f_t.dims(),
            f_s.dims()
        )));
    }
    if lambda == 0.0 {
        return Ok(f_t.clone());
    }
    Ok((f_t + f_s.affine(lambda, 0.0)?)?)
}
