//! Stage 1: fit the motion adapters `psi` so the frozen denoiser, fed with
//! projected foreground semantics, predicts the noise on the subject region
//! at high timesteps.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::autoencoder::LatentVideo;
use crate::denoiser::Denoiser;
use crate::error::{invalid, shape};
use crate::guidance::{project_guidance_tensor, AdapterConfig, AdapterSet, GuidanceStack};
use crate::lora::LoraSet;
use crate::schedule::{add_noise, NoiseSchedule, TimestepSampler};
use crate::semantic::{masked_foreground, ForegroundMask, SemanticFeatureMap};
use crate::text::{embed_prompt, TextEmbedding};
use crate::{rng, Error, Result};

/// Moment parameters of the Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub(crate) fn optimizer(&self, vars: Vec<Var>, lr: f64) -> Result<AdamW> {
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: 0.0,
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionTrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Guidance weight while training; this stage always uses 1.0.
    pub lambda: f64,
    /// Lower end of the timestep window; `None` means `T / 2`.
    pub t_min: Option<usize>,
    pub seed: u64,
    /// Number of fixed `(t, eps)` pairs used to measure progress.
    pub probe_size: usize,
    /// Also optimize the temporal attention layers.
    pub train_motion_layers: bool,
    /// Inject projected semantic features. Turning this off leaves `psi`
    /// untouched and is only useful together with `train_motion_layers`.
    pub use_guidance: bool,
    pub adam: AdamConfig,
}

impl Default for MotionTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            iterations: 100,
            lambda: 1.0,
            t_min: None,
            seed: 0,
            probe_size: 4,
            train_motion_layers: false,
            use_guidance: true,
            adam: AdamConfig::default(),
        }
    }
}

impl MotionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config {
                key: "motion_train.iterations".into(),
                msg: "must be >= 1".into(),
            });
        }
        if self.lambda != 1.0 {
            return Err(Error::Config {
                key: "motion_train.lambda".into(),
                msg: format!("stage 1 trains at lambda = 1.0, got {}", self.lambda),
            });
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config {
                key: "motion_train.learning_rate".into(),
                msg: "must be positive".into(),
            });
        }
        if !self.use_guidance && !self.train_motion_layers {
            return Err(Error::Config {
                key: "motion_train.use_guidance".into(),
                msg: "nothing to train with guidance off and motion layers frozen".into(),
            });
        }
        Ok(())
    }

    /// The stage-1 timestep sampler over `[t_min, T]`.
    pub fn sampler(&self, schedule: &NoiseSchedule) -> Result<TimestepSampler> {
        let total = schedule.total_steps();
        let t_min = self.t_min.unwrap_or(total / 2).max(1);
        TimestepSampler::new(t_min, total, total, rng::derive_seed(self.seed, "motion.t"))
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub t: usize,
    pub loss: f64,
}

/// Mean squared residual over masked positions only. `mask` is `(N, H, W, 1)`
/// with 0/1 entries and broadcasts over channels; the divisor counts masked
/// elements including channels. Off-mask residuals are discarded before
/// squaring reaches the sum, so their values (even non-finite) never matter.
pub fn masked_noise_loss(eps: &Tensor, eps_pred: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_pred.dims() {
        return Err(shape(format!("eps {:?} vs eps_pred {:?}", eps.dims(), eps_pred.dims())));
    }
    let (n, h, w, d) = eps.dims4()?;
    if mask.dims() != [n, h, w, 1] {
        return Err(shape(format!("mask {:?} does not cover latents {:?}", mask.dims(), eps.dims())));
    }
    let count = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()? * d as f64;
    if count == 0.0 {
        return Err(Error::DegenerateMask("loss mask selects nothing".into()));
    }
    let keep = mask.ne(0.0)?.broadcast_as(eps.dims())?.contiguous()?;
    let resid = (eps - eps_pred.to_dtype(eps.dtype())?)?;
    let kept = keep.where_cond(&resid, &resid.zeros_like()?)?;
    Ok(kept.sqr()?.sum_all()?.affine(1.0 / count, 0.0)?)
}

/// Transports a token mask to the latent grid as an `(N, H, W, 1)` tensor.
pub fn latent_mask(mask: &ForegroundMask, h: usize, w: usize, dtype: DType) -> Result<(ForegroundMask, Tensor)> {
    let m = mask.resample(h, w)?;
    let t = m.to_tensor(dtype, &candle_core::Device::Cpu)?;
    Ok((m, t))
}

/// Everything the noise-prediction objective needs for one `(t, eps)` draw.
pub(crate) struct Objective<'a> {
    pub denoiser: &'a Denoiser,
    pub z0: &'a Tensor,
    pub text: &'a TextEmbedding,
    pub mask: &'a Tensor,
}

impl Objective<'_> {
    pub fn loss(
        &self,
        t: usize,
        eps: &Tensor,
        guidance: Option<&GuidanceStack>,
        lora: Option<&LoraSet>,
    ) -> Result<Tensor> {
        let z_t = add_noise(self.z0, eps, t, self.denoiser.schedule())?;
        let out = self.denoiser.predict_noise(&z_t, t, self.text, guidance, lora)?;
        masked_noise_loss(eps, &out.eps_pred, self.mask)
    }
}

/// The stage-1 objective for one `(t, eps)` draw as a function of the
/// adapters: project the background-masked token features, inject them at
/// weight `lambda` and score the prediction on the latent mask.
pub struct MotionLoss<'a> {
    pub denoiser: &'a Denoiser,
    pub z0: &'a Tensor,
    pub text: &'a TextEmbedding,
    /// `(N, h, w, c)` token features with background tokens zeroed.
    pub features: &'a Tensor,
    /// `(N, H, W, 1)` latent-resolution mask.
    pub mask: &'a Tensor,
    pub lambda: f64,
}

impl MotionLoss<'_> {
    pub fn guidance(&self, adapters: &AdapterSet) -> Result<GuidanceStack> {
        let (_, h, w, _) = self.z0.dims4()?;
        project_guidance_tensor(self.features, adapters, &self.denoiser.tap_sizes(h, w)?, self.lambda)
    }

    pub fn eval(&self, adapters: Option<&AdapterSet>, t: usize, eps: &Tensor) -> Result<Tensor> {
        let g = adapters.map(|a| self.guidance(a)).transpose()?;
        self.objective().loss(t, eps, g.as_ref(), None)
    }

    fn objective(&self) -> Objective<'_> {
        Objective {
            denoiser: self.denoiser,
            z0: self.z0,
            text: self.text,
            mask: self.mask,
        }
    }
}

/// Fixed `(t, eps)` pairs for before/after comparisons.
pub(crate) fn probe_batch(
    sampler: &TimestepSampler,
    size: usize,
    seed: u64,
    label: &str,
    z0: &Tensor,
) -> Result<Vec<(usize, Tensor)>> {
    let mut ts = TimestepSampler::new(sampler.t_min(), sampler.t_max(), sampler.t_max(), rng::derive_seed(seed, label))?;
    let mut r = rng::stream(seed, &format!("{label}.eps"));
    (0..size)
        .map(|_| {
            let t = ts.sample();
            let eps = rng::gaussian_tensor(&mut r, z0.dims(), 1.0, z0.dtype(), z0.device())?;
            Ok((t, eps))
        })
        .collect()
}

pub(crate) fn vars_from(params: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Var>> {
    params
        .iter()
        .map(|(k, t)| Ok((k.clone(), Var::from_tensor(t)?)))
        .collect()
}

pub(crate) fn var_tensors(vars: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
    vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
}

pub(crate) fn detached(vars: &BTreeMap<String, Var>) -> Result<BTreeMap<String, Tensor>> {
    vars.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
        .collect()
}

/// Inputs of stage 1. `features` are the token features of the source video
/// and `mask` the foreground mask on the same token grid; background tokens
/// are zeroed here before projection.
#[derive(Debug, Clone, Copy)]
pub struct MotionTrainInputs<'a> {
    pub latents: &'a LatentVideo,
    pub prompt: &'a str,
    pub features: &'a SemanticFeatureMap,
    pub mask: &'a ForegroundMask,
}

#[derive(Debug, Clone)]
pub struct MotionTrainOutput {
    pub adapters: AdapterSet,
    /// Updated temporal-attention weights when they were trained.
    pub motion_weights: Option<BTreeMap<String, Tensor>>,
    pub losses: Vec<LossRecord>,
    pub probe_before: f64,
    pub probe_after: f64,
    /// The mask at latent resolution used by the loss.
    pub latent_mask: ForegroundMask,
    /// Names of every optimized parameter.
    pub trained_parameters: Vec<String>,
}

pub fn train_motion_adapters(
    inputs: MotionTrainInputs<'_>,
    denoiser: &Denoiser,
    adapter_config: &AdapterConfig,
    cfg: &MotionTrainConfig,
) -> Result<MotionTrainOutput> {
    cfg.validate()?;
    let z0 = inputs.latents.tensor().to_dtype(denoiser.dtype())?;
    let (n, h, w, _) = z0.dims4()?;
    let (fn_, fh, fw, c) = inputs.features.dims();
    if fn_ != n {
        return Err(shape(format!("{fn_} feature frames for {n} latent frames")));
    }
    if (inputs.mask.height(), inputs.mask.width()) != (fh, fw) || inputs.mask.frame_count() != n {
        return Err(shape("mask must be on the feature token grid"));
    }
    let f_d = masked_foreground(inputs.features, inputs.mask)?.features().to_dtype(denoiser.dtype())?;
    let (lat_mask, mask_t) = latent_mask(inputs.mask, h, w, denoiser.dtype())?;
    if lat_mask.count() == 0 {
        return Err(Error::DegenerateMask("mask vanishes at latent resolution".into()));
    }
    let text = embed_prompt(inputs.prompt, denoiser.config().text_dim)?;

    let init = AdapterSet::new(
        "psi",
        c,
        denoiser.config().channel_widths,
        adapter_config.clone(),
        rng::derive_seed(cfg.seed, "psi.init"),
        denoiser.dtype(),
    )?;
    let psi_vars = if cfg.use_guidance { vars_from(init.params())? } else { BTreeMap::new() };
    let motion_vars = if cfg.train_motion_layers {
        if !denoiser.has_motion_layers() {
            return Err(invalid("no motion layers to train"));
        }
        let names = denoiser.motion_param_names();
        vars_from(&names.iter().map(|k| (k.clone(), denoiser.params()[k].clone())).collect())?
    } else {
        BTreeMap::new()
    };
    let live_adapters = if cfg.use_guidance { init.with_params(var_tensors(&psi_vars))? } else { init.clone() };
    let live_denoiser = if cfg.train_motion_layers {
        denoiser.with_params(&var_tensors(&motion_vars))?
    } else {
        denoiser.clone()
    };
    let objective = MotionLoss {
        denoiser: &live_denoiser,
        z0: &z0,
        text: &text,
        features: &f_d,
        mask: &mask_t,
        lambda: cfg.lambda,
    };
    let adapters_in_use = cfg.use_guidance.then_some(&live_adapters);
    let mut sampler = cfg.sampler(denoiser.schedule())?;
    let probes = probe_batch(&sampler, cfg.probe_size, cfg.seed, "motion.probe", &z0)?;
    let probe_loss = |adapters: Option<&AdapterSet>| -> Result<f64> {
        let mut total = 0.0;
        for (t, eps) in &probes {
            total += objective.eval(adapters, *t, eps)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total / probes.len().max(1) as f64)
    };
    let probe_before = probe_loss(adapters_in_use)?;

    let mut trained_parameters: Vec<String> = psi_vars.keys().chain(motion_vars.keys()).cloned().collect();
    trained_parameters.sort();
    let all_vars: Vec<Var> = psi_vars.values().chain(motion_vars.values()).cloned().collect();
    let mut opt = cfg.adam.optimizer(all_vars, cfg.learning_rate)?;
    let mut noise = rng::stream(cfg.seed, "motion.eps");
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let t = sampler.sample();
        let eps = rng::gaussian_tensor(&mut noise, z0.dims(), 1.0, z0.dtype(), z0.device())?;
        let loss = objective.eval(adapters_in_use, t, &eps)?;
        opt.backward_step(&loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        log::debug!("motion iteration {iteration}: t={t} loss={value:.6}");
        losses.push(LossRecord { iteration, t, loss: value });
    }
    let probe_after = probe_loss(adapters_in_use)?;

    let adapters = if cfg.use_guidance { init.with_params(detached(&psi_vars)?)? } else { init };
    let motion_weights = if cfg.train_motion_layers { Some(detached(&motion_vars)?) } else { None };
    Ok(MotionTrainOutput {
        adapters,
        motion_weights,
        losses,
        probe_before,
        probe_after,
        latent_mask: lat_mask,
        trained_parameters,
    })
}
