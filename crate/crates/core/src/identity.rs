//! Stage 2: register a target subject from a few reference images by
//! training low-rank deltas on the spatial attention projections together
//! with identity adapters `phi`, over the full timestep range.

use std::collections::BTreeMap;

use candle_core::{DType, Var};
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use crate::autoencoder::LatentVideo;
use crate::denoiser::Denoiser;
use crate::error::{invalid, shape};
use crate::guidance::{project_guidance_tensor, AdapterConfig, AdapterSet, GuidanceStack};
use crate::lora::{init_lora, LoraDelta, LoraSet};
use crate::motion::{detached, latent_mask, probe_batch, vars_from, var_tensors, AdamConfig, LossRecord, Objective};
use crate::schedule::{NoiseSchedule, TimestepSampler};
use crate::semantic::{masked_foreground, ForegroundMask, SemanticFeatureMap};
use crate::text::embed_prompt;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityTrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Expected number of reference images; checked when set.
    pub reference_count: Option<usize>,
    pub rank: usize,
    pub scale: f64,
    pub seed: u64,
    pub probe_size: usize,
    /// Fuse `phi`-projected semantic features while training.
    pub use_semantic_guidance: bool,
    pub adam: AdamConfig,
}

impl Default for IdentityTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            iterations: 1000,
            reference_count: None,
            rank: 4,
            scale: 1.0,
            seed: 0,
            probe_size: 4,
            use_semantic_guidance: true,
            adam: AdamConfig::default(),
        }
    }
}

impl IdentityTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Error::Config {
            key: format!("identity_train.{key}"),
            msg: msg.into(),
        };
        if self.iterations == 0 {
            return Err(bad("iterations", "must be >= 1"));
        }
        if self.rank == 0 {
            return Err(bad("rank", "must be >= 1"));
        }
        if self.reference_count == Some(0) {
            return Err(bad("reference_count", "must be >= 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(bad("learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Uniform over the whole range `[1, T]`.
    pub fn sampler(&self, schedule: &NoiseSchedule) -> Result<TimestepSampler> {
        let total = schedule.total_steps();
        TimestepSampler::new(1, total, total, rng::derive_seed(self.seed, "identity.t"))
    }
}

/// `"a photo of <identifier> <class_word>"`; the identifier may be empty.
pub fn build_identity_prompt(class_word: &str, identifier: &str) -> Result<String> {
    let class_word = class_word.trim();
    if class_word.is_empty() {
        return Err(invalid("class word is empty"));
    }
    let identifier = identifier.trim();
    Ok(if identifier.is_empty() {
        format!("a photo of {class_word}")
    } else {
        format!("a photo of {identifier} {class_word}")
    })
}

/// Reference latents with their token features and token-grid masks.
#[derive(Debug, Clone, Copy)]
pub struct IdentityTrainInputs<'a> {
    pub references: &'a LatentVideo,
    pub prompt: &'a str,
    pub features: &'a SemanticFeatureMap,
    pub masks: &'a ForegroundMask,
}

#[derive(Debug, Clone)]
pub struct IdentityTrainOutput {
    pub lora: LoraSet,
    /// `None` when semantic guidance was disabled.
    pub phi: Option<AdapterSet>,
    pub losses: Vec<LossRecord>,
    pub probe_before: f64,
    pub probe_after: f64,
    pub latent_mask: ForegroundMask,
    pub trained_parameters: Vec<String>,
}

pub fn register_identity(
    inputs: IdentityTrainInputs<'_>,
    denoiser: &Denoiser,
    adapter_config: &AdapterConfig,
    cfg: &IdentityTrainConfig,
) -> Result<IdentityTrainOutput> {
    cfg.validate()?;
    let z0 = inputs.references.tensor().to_dtype(denoiser.dtype())?;
    let (p, h, w, _) = z0.dims4()?;
    if let Some(expected) = cfg.reference_count {
        if expected != p {
            return Err(invalid(format!("expected {expected} reference images, got {p}")));
        }
    }
    let (fp, fh, fw, c) = inputs.features.dims();
    if fp != p || inputs.masks.frame_count() != p || (inputs.masks.height(), inputs.masks.width()) != (fh, fw) {
        return Err(shape("reference features and masks must share the token grid and count"));
    }
    for (i, k) in inputs.masks.frame_counts().iter().enumerate() {
        if *k == 0 {
            return Err(Error::DegenerateMask(format!("reference {i} has an empty mask")));
        }
    }
    let frame_wise = if denoiser.config().motion_layers_enabled {
        denoiser.with_motion_enabled(false)?
    } else {
        denoiser.clone()
    };
    let f_d = masked_foreground(inputs.features, inputs.masks)?.features().to_dtype(denoiser.dtype())?;
    let (lat_mask, mask_t) = latent_mask(inputs.masks, h, w, denoiser.dtype())?;
    let text = embed_prompt(inputs.prompt, denoiser.config().text_dim)?;
    let ladder = denoiser.tap_sizes(h, w)?;

    let mut lora_vars: BTreeMap<String, (Var, Var)> = BTreeMap::new();
    for (layer, d_in, d_out) in denoiser.lora_targets() {
        let seed = rng::derive_seed(cfg.seed, &format!("lora.{layer}"));
        let d = init_lora(d_in, d_out, cfg.rank, cfg.scale, seed, denoiser.dtype(), z0.device())?;
        lora_vars.insert(layer, (Var::from_tensor(d.down())?, Var::from_tensor(d.up())?));
    }
    let live_lora = lora_vars
        .iter()
        .map(|(k, (a, b))| Ok((k.clone(), LoraDelta::from_parts(a.as_tensor().clone(), b.as_tensor().clone(), cfg.scale)?)))
        .collect::<Result<LoraSet>>()?;

    let phi_init = AdapterSet::new(
        "phi",
        c,
        denoiser.config().channel_widths,
        adapter_config.clone(),
        rng::derive_seed(cfg.seed, "phi.init"),
        denoiser.dtype(),
    )?;
    let phi_vars = if cfg.use_semantic_guidance { vars_from(phi_init.params())? } else { BTreeMap::new() };
    let live_phi = phi_init.with_params(if cfg.use_semantic_guidance { var_tensors(&phi_vars) } else { phi_init.params().clone() })?;
    let guidance = || -> Result<Option<GuidanceStack>> {
        if !cfg.use_semantic_guidance {
            return Ok(None);
        }
        project_guidance_tensor(&f_d, &live_phi, &ladder, 1.0).map(Some)
    };

    let objective = Objective {
        denoiser: &frame_wise,
        z0: &z0,
        text: &text,
        mask: &mask_t,
    };
    let mut sampler = cfg.sampler(denoiser.schedule())?;
    let probes = probe_batch(&sampler, cfg.probe_size, cfg.seed, "identity.probe", &z0)?;
    let probe_loss = || -> Result<f64> {
        let g = guidance()?;
        let mut total = 0.0;
        for (t, eps) in &probes {
            total += objective.loss(*t, eps, g.as_ref(), Some(&live_lora))?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total / probes.len().max(1) as f64)
    };
    let probe_before = probe_loss()?;

    let mut trained_parameters: Vec<String> = lora_vars
        .keys()
        .flat_map(|k| [format!("{k}.lora.down"), format!("{k}.lora.up")])
        .chain(phi_vars.keys().cloned())
        .collect();
    trained_parameters.sort();
    let all_vars: Vec<Var> = lora_vars
        .values()
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .chain(phi_vars.values().cloned())
        .collect();
    let mut opt = cfg.adam.optimizer(all_vars, cfg.learning_rate)?;
    let mut noise = rng::stream(cfg.seed, "identity.eps");
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let t = sampler.sample();
        let eps = rng::gaussian_tensor(&mut noise, z0.dims(), 1.0, z0.dtype(), z0.device())?;
        let loss = objective.loss(t, &eps, guidance()?.as_ref(), Some(&live_lora))?;
        opt.backward_step(&loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        log::debug!("identity iteration {iteration}: t={t} loss={value:.6}");
        losses.push(LossRecord { iteration, t, loss: value });
    }
    let probe_after = probe_loss()?;

    let lora = lora_vars
        .iter()
        .map(|(k, (a, b))| {
            let delta = LoraDelta::from_parts(a.as_tensor().detach().copy()?, b.as_tensor().detach().copy()?, cfg.scale)?;
            Ok((k.clone(), delta))
        })
        .collect::<Result<LoraSet>>()?;
    let phi = if cfg.use_semantic_guidance { Some(phi_init.with_params(detached(&phi_vars)?)?) } else { None };
    Ok(IdentityTrainOutput {
        lora,
        phi,
        losses,
        probe_before,
        probe_after,
        latent_mask: lat_mask,
        trained_parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::BetaSpacing;

    #[test]
    fn prompt_template() {
        assert_eq!(build_identity_prompt("corgi", "sks").unwrap(), "a photo of sks corgi");
        assert_eq!(build_identity_prompt("corgi", "").unwrap(), "a photo of corgi");
        assert_eq!(
            build_identity_prompt("corgi", "sks").unwrap(),
            build_identity_prompt("corgi", "sks").unwrap()
        );
        assert!(build_identity_prompt(" ", "sks").is_err());
    }

    #[test]
    fn stage_two_window_reaches_low_timesteps() {
        let s = NoiseSchedule::build(1000, 0.00085, 0.012, BetaSpacing::ScaledLinear).unwrap();
        let mut sampler = IdentityTrainConfig::default().sampler(&s).unwrap();
        let draws: Vec<usize> = (0..10_000).map(|_| sampler.sample()).collect();
        assert!(draws.iter().all(|t| (1..=1000).contains(t)));
        assert!(draws.iter().any(|&t| t < 500));
    }

    #[test]
    fn config_validation() {
        assert!(IdentityTrainConfig::default().validate().is_ok());
        assert!(IdentityTrainConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(IdentityTrainConfig { reference_count: Some(0), ..Default::default() }.validate().is_err());
    }
}
