//! Stage 3: invert the source video with DDIM, swap the subject word, then
//! denoise with motion guidance over the early (noisy) half of the schedule,
//! the identity LoRA at every step, and per-step latent blending against the
//! stored inversion trajectory.

use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{FrameVideo, LatentVideo, ToyAutoencoder};
use crate::denoiser::Denoiser;
use crate::error::{invalid, shape};
use crate::guidance::{project_guidance_tensor, AdapterSet, GuidanceStack};
use crate::lora::LoraSet;
use crate::schedule::{ddim_denoise_step, ddim_invert_step, NoiseSchedule};
use crate::semantic::{ForegroundMask, SemanticFeatureMap};
use crate::text::{embed_prompt, tokenize, TextEmbedding};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub lambda: f64,
    pub num_steps: usize,
    /// Guidance is injected while `t > injection_stop`; `None` means `T / 2`.
    pub injection_stop: Option<usize>,
    /// Word replaced in the source prompt; empty keeps the prompt.
    pub source_word: String,
    pub target_word: String,
    pub blend_enabled: bool,
    pub seed: u64,
    /// Keep every `trajectory_stride`-th inverted latent and recompute the
    /// rest on demand. 1 stores the whole trajectory.
    pub trajectory_stride: usize,
    /// Classifier-free guidance scale. Off unless set.
    pub cfg_scale: Option<f64>,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            num_steps: 50,
            injection_stop: None,
            source_word: String::new(),
            target_word: String::new(),
            blend_enabled: true,
            seed: 0,
            trajectory_stride: 1,
            cfg_scale: None,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Config {
            key: format!("edit.{key}"),
            msg,
        };
        if self.num_steps == 0 || self.num_steps > total_steps {
            return Err(bad("num_steps", format!("must be in 1..={total_steps}")));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(bad("lambda", "must be >= 0".into()));
        }
        if self.injection_stop.is_some_and(|s| s > total_steps) {
            return Err(bad("injection_stop", format!("must be <= {total_steps}")));
        }
        if self.trajectory_stride == 0 {
            return Err(bad("trajectory_stride", "must be >= 1".into()));
        }
        if self.source_word.trim().is_empty() != self.target_word.trim().is_empty() {
            return Err(bad("target_word", "source_word and target_word must be set together".into()));
        }
        Ok(())
    }

    pub fn injection_stop(&self, total_steps: usize) -> usize {
        self.injection_stop.unwrap_or(total_steps / 2)
    }
}

/// Replaces every whole-token occurrence of `source_word`.
pub fn swap_subject_word(prompt: &str, source_word: &str, target_word: &str) -> Result<String> {
    let src = source_word.trim().to_lowercase();
    let tokens = tokenize(prompt);
    if !tokens.contains(&src) {
        return Err(invalid(format!("`{source_word}` is not a word of the prompt `{prompt}`")));
    }
    let out: Vec<&str> = tokens
        .iter()
        .map(|t| if *t == src { target_word.trim() } else { t.as_str() })
        .collect();
    Ok(out.join(" "))
}

/// `m * z_edit + (1 - m) * z_src` by selection, so off-mask values are copied
/// bit for bit. `mask` is `(N, H, W, 1)` with 0/1 entries.
pub fn blend_latents(z_edit: &Tensor, z_src: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if z_edit.dims() != z_src.dims() {
        return Err(shape(format!("blend: {:?} vs {:?}", z_edit.dims(), z_src.dims())));
    }
    let (n, h, w, _) = z_edit.dims4()?;
    if mask.dims() != [n, h, w, 1] {
        return Err(shape(format!("blend mask {:?} does not cover {:?}", mask.dims(), z_edit.dims())));
    }
    let keep = mask.ne(0.0)?.broadcast_as(z_edit.dims())?.contiguous()?;
    Ok(keep.where_cond(z_edit, &z_src.to_dtype(z_edit.dtype())?)?)
}

/// Timesteps `[0, s, 2s, ..., T]` of an `n`-step strided schedule.
pub fn ddim_timesteps(schedule: &NoiseSchedule, num_steps: usize) -> Result<Vec<usize>> {
    let mut ts = vec![0];
    ts.extend(schedule.strided_timesteps(num_steps)?);
    Ok(ts)
}

fn predict(
    denoiser: &Denoiser,
    z: &Tensor,
    t: usize,
    text: &TextEmbedding,
    guidance: Option<&GuidanceStack>,
    lora: Option<&LoraSet>,
    cfg_scale: Option<f64>,
) -> Result<Tensor> {
    let cond = denoiser.predict_noise(z, t, text, guidance, lora)?.eps_pred;
    match cfg_scale {
        None => Ok(cond),
        Some(s) => {
            let null = TextEmbedding::null(text.embedding().dims()[1], text.embedding().dtype())?;
            let uncond = denoiser.predict_noise(z, t, &null, guidance, lora)?.eps_pred;
            Ok((&uncond + (cond - &uncond)?.affine(s, 0.0)?)?)
        }
    }
}

/// Inverted latents at every timestep of `ts`: element `i` lives at `ts[i]`,
/// element 0 is `z0`. Each step evaluates the frozen, unguided model at the
/// current latent and the destination timestep.
pub fn ddim_invert(denoiser: &Denoiser, z0: &Tensor, text: &TextEmbedding, ts: &[usize]) -> Result<Vec<Tensor>> {
    invert_until(denoiser, z0, text, ts, ts.len() - 1, 1)
}

/// Runs inversion up to index `last`, keeping every `stride`-th latent (and
/// always the final one); other slots hold `None`-like placeholders that the
/// caller never reads.
fn invert_until(
    denoiser: &Denoiser,
    z0: &Tensor,
    text: &TextEmbedding,
    ts: &[usize],
    last: usize,
    stride: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(last + 1);
    out.push(z0.clone());
    let mut z = z0.clone();
    for i in 1..=last {
        let eps = denoiser.predict_noise(&z, ts[i], text, None, None)?.eps_pred;
        z = ddim_invert_step(&z, &eps, ts[i - 1], ts[i], denoiser.schedule())?;
        if i % stride == 0 || i == last {
            out.push(z.clone());
        } else {
            out.push(Tensor::zeros(0, z.dtype(), z.device())?);
        }
    }
    Ok(out)
}

/// The inverted trajectory, either fully stored or sparsely checkpointed.
#[derive(Debug, Clone)]
pub struct Trajectory {
    timesteps: Vec<usize>,
    stride: usize,
    latents: Vec<Tensor>,
}

impl Trajectory {
    pub fn compute(denoiser: &Denoiser, z0: &Tensor, text: &TextEmbedding, num_steps: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("trajectory stride must be >= 1"));
        }
        let timesteps = ddim_timesteps(denoiser.schedule(), num_steps)?;
        let latents = invert_until(denoiser, z0, text, &timesteps, num_steps, stride)?;
        Ok(Self {
            timesteps,
            stride,
            latents,
        })
    }

    pub fn from_latents(timesteps: Vec<usize>, latents: Vec<Tensor>) -> Result<Self> {
        if latents.len() != timesteps.len() {
            return Err(shape(format!(
                "trajectory has {} latents for {} timesteps",
                latents.len(),
                timesteps.len()
            )));
        }
        Ok(Self {
            timesteps,
            stride: 1,
            latents,
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// Latent at index `i`, recomputed from the nearest checkpoint when it
    /// was not stored.
    pub fn latent(&self, i: usize, denoiser: &Denoiser, text: &TextEmbedding) -> Result<Tensor> {
        if i >= self.latents.len() {
            return Err(invalid(format!("trajectory index {i} out of range")));
        }
        if self.stride == 1 || i.is_multiple_of(self.stride) || i == self.latents.len() - 1 {
            return Ok(self.latents[i].clone());
        }
        let base = i - i % self.stride;
        let mut z = self.latents[base].clone();
        for j in base + 1..=i {
            let eps = denoiser.predict_noise(&z, self.timesteps[j], text, None, None)?.eps_pred;
            z = ddim_invert_step(&z, &eps, self.timesteps[j - 1], self.timesteps[j], denoiser.schedule())?;
        }
        Ok(z)
    }
}

/// What happened at one denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub guidance_applied: bool,
    pub lora_applied: bool,
    pub blended: bool,
    pub millis: f64,
}

/// Optional signals for the denoising pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct EditSignals<'a> {
    pub adapters: Option<&'a AdapterSet>,
    /// Foreground token features `F_d` of the source.
    pub features: Option<&'a SemanticFeatureMap>,
    pub lora: Option<&'a LoraSet>,
    /// Blending mask; required when blending is enabled.
    pub mask: Option<&'a ForegroundMask>,
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub latents: Tensor,
    /// Latent after every step, index `k` holding the state at the
    /// `k`-th step's `t_prev`.
    pub steps: Vec<Tensor>,
    pub logs: Vec<StepLog>,
}

/// Denoises from the top of `trajectory` with the target prompt.
pub fn denoise_from_trajectory(
    denoiser: &Denoiser,
    trajectory: &Trajectory,
    source_text: &TextEmbedding,
    target_text: &TextEmbedding,
    signals: EditSignals<'_>,
    cfg: &EditConfig,
) -> Result<DenoiseResult> {
    let total = denoiser.schedule().total_steps();
    cfg.validate(total)?;
    if trajectory.num_steps() != cfg.num_steps {
        return Err(invalid(format!(
            "trajectory has {} steps, config asks for {}",
            trajectory.num_steps(),
            cfg.num_steps
        )));
    }
    let z_top = trajectory.latent(cfg.num_steps, denoiser, source_text)?;
    let (n, h, w, _) = z_top.dims4()?;
    let guidance = match (signals.adapters, signals.features) {
        (Some(a), Some(f)) => Some(project_guidance_tensor(
            &f.features().to_dtype(denoiser.dtype())?,
            a,
            &denoiser.tap_sizes(h, w)?,
            cfg.lambda,
        )?),
        (None, None) if cfg.lambda == 0.0 => None,
        (None, _) => return Err(Error::MissingPrerequisite("motion adapters are required when lambda > 0".into())),
        (Some(_), None) => return Err(Error::MissingPrerequisite("adapters given without semantic features".into())),
    };
    let mask = if cfg.blend_enabled {
        let m = signals
            .mask
            .ok_or_else(|| Error::MissingPrerequisite("blending needs a foreground mask".into()))?;
        if m.frame_count() != n {
            return Err(shape("blend mask frame count differs from the video"));
        }
        Some(m.resample(h, w)?.to_tensor(z_top.dtype(), z_top.device())?)
    } else {
        None
    };
    let stop = cfg.injection_stop(total);
    let ts = trajectory.timesteps();
    let mut z = z_top;
    let mut steps = Vec::with_capacity(cfg.num_steps);
    let mut logs = Vec::with_capacity(cfg.num_steps);
    for (index, i) in (1..=cfg.num_steps).rev().enumerate() {
        let start = Instant::now();
        let (t, t_prev) = (ts[i], ts[i - 1]);
        let inject = t > stop && cfg.lambda > 0.0;
        let g = if t > stop { guidance.as_ref() } else { None };
        let eps = predict(denoiser, &z, t, target_text, g, signals.lora, cfg.cfg_scale)?;
        z = ddim_denoise_step(&z, &eps, t, t_prev, denoiser.schedule())?;
        if let Some(m) = &mask {
            z = blend_latents(&z, &trajectory.latent(i - 1, denoiser, source_text)?, m)?;
        }
        steps.push(z.clone());
        logs.push(StepLog {
            index,
            t,
            t_prev,
            guidance_applied: inject && g.is_some(),
            lora_applied: signals.lora.is_some(),
            blended: mask.is_some(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(DenoiseResult { latents: z, steps, logs })
}

/// Plain reconstruction: denoise the trajectory under the source prompt with
/// no guidance, no LoRA and no blending.
pub fn reconstruct(denoiser: &Denoiser, trajectory: &Trajectory, text: &TextEmbedding) -> Result<DenoiseResult> {
    let cfg = EditConfig {
        lambda: 0.0,
        num_steps: trajectory.num_steps(),
        blend_enabled: false,
        ..Default::default()
    };
    denoise_from_trajectory(denoiser, trajectory, text, text, EditSignals::default(), &cfg)
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub frames: FrameVideo,
    pub source_latents: LatentVideo,
    pub latents: LatentVideo,
    pub target_prompt: String,
    pub trajectory: Trajectory,
    pub denoise: DenoiseResult,
}

/// Encoder plus denoiser: the full inversion-based editing pass.
#[derive(Debug, Clone, Copy)]
pub struct EditPipeline<'a> {
    pub denoiser: &'a Denoiser,
    pub autoencoder: &'a ToyAutoencoder,
}

impl EditPipeline<'_> {
    pub fn edit_video(
        &self,
        source: &FrameVideo,
        source_prompt: &str,
        signals: EditSignals<'_>,
        cfg: &EditConfig,
    ) -> Result<EditResult> {
        cfg.validate(self.denoiser.schedule().total_steps())?;
        let target_prompt = if cfg.source_word.trim().is_empty() {
            source_prompt.to_string()
        } else {
            swap_subject_word(source_prompt, &cfg.source_word, &cfg.target_word)?
        };
        let dim = self.denoiser.config().text_dim;
        let source_text = embed_prompt(source_prompt, dim)?;
        let target_text = embed_prompt(&target_prompt, dim)?;
        let source_latents = self.autoencoder.encode_video(source)?;
        let z0 = source_latents.tensor().to_dtype(self.denoiser.dtype())?;
        let trajectory = Trajectory::compute(self.denoiser, &z0, &source_text, cfg.num_steps, cfg.trajectory_stride)?;
        let denoise = denoise_from_trajectory(self.denoiser, &trajectory, &source_text, &target_text, signals, cfg)?;
        let latents = LatentVideo::new(denoise.latents.to_dtype(DType::F32)?)?;
        let frames = self.autoencoder.decode_video(&latents)?;
        Ok(EditResult {
            frames,
            source_latents,
            latents,
            target_prompt,
            trajectory,
            denoise,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bit_identical;
    use candle_core::Device;

    #[test]
    fn swap_examples() {
        assert_eq!(swap_subject_word("a cat running on grass", "cat", "dog").unwrap(), "a dog running on grass");
        assert_eq!(swap_subject_word("a cat and a cat", "cat", "corgi").unwrap(), "a corgi and a corgi");
        assert!(swap_subject_word("a caterpillar", "cat", "dog").is_err());
    }

    #[test]
    fn blend_examples() {
        let a = Tensor::from_vec(vec![1f32, 2.0, 3.0, 4.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(vec![-1f32, -2.0, -3.0, -4.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 2, 1, 1), DType::F32, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert!(bit_identical(&blend_latents(&a, &b, &ones).unwrap(), &a).unwrap());
        assert!(bit_identical(&blend_latents(&a, &b, &zeros).unwrap(), &b).unwrap());
        let mixed = Tensor::from_vec(vec![1f32, 0.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let out = blend_latents(&a, &b, &mixed).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out, vec![1.0, 2.0, -3.0, -4.0]);
        assert!(blend_latents(&a, &b, &Tensor::ones((1, 1, 1, 1), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn edit_config_validation() {
        assert!(EditConfig::default().validate(1000).is_ok());
        assert!(EditConfig { num_steps: 0, ..Default::default() }.validate(1000).is_err());
        assert!(EditConfig { injection_stop: Some(1001), ..Default::default() }.validate(1000).is_err());
        assert!(EditConfig { source_word: "cat".into(), ..Default::default() }.validate(1000).is_err());
        assert_eq!(EditConfig::default().injection_stop(1000), 500);
    }
}
