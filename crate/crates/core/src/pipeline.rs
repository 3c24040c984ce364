//! Wires the stages together around one [`RunConfig`]: subject analysis,
//! motion adapters, identity registration, editing and evaluation, plus the
//! checkpoint layout each stage reads and writes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{FrameVideo, ToyAutoencoder};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::denoiser::Denoiser;
use crate::guidance::{AdapterConfig, AdapterSet};
use crate::identity::{build_identity_prompt, register_identity, IdentityTrainInputs, IdentityTrainOutput};
use crate::inference::{EditConfig, EditPipeline, EditResult, EditSignals};
use crate::lora::{lora_set_from_arrays, lora_set_to_arrays, LoraSet};
use crate::metrics::{image_alignment, temporal_consistency, text_alignment, MetricRow, ToyEmbedder};
use crate::motion::{train_motion_adapters, LossRecord, MotionTrainConfig, MotionTrainInputs, MotionTrainOutput};
use crate::semantic::{fit_pca, foreground_mask, masked_foreground, ForegroundMask, PcaBasis, SemanticBackend, SemanticFeatureMap, ToySemanticBackend};
use crate::{Error, Result};

pub const MOTION_CHECKPOINT: &str = "motion";
pub const LORA_CHECKPOINT: &str = "lora";
pub const PHI_CHECKPOINT: &str = "phi";
pub const EMBEDDER_DIM: usize = 32;

/// Semantic features of a clip with its 1-D PCA basis and token-grid mask.
#[derive(Debug, Clone)]
pub struct SubjectAnalysis {
    pub features: SemanticFeatureMap,
    pub basis: PcaBasis,
    pub mask: ForegroundMask,
}

/// Trained stage-1 state as stored on disk.
#[derive(Debug, Clone)]
pub struct MotionArtifacts {
    pub adapters: AdapterSet,
    pub motion_weights: Option<BTreeMap<String, Tensor>>,
    /// Whether `adapters` were optimized; untrained sets must not steer edits.
    pub guidance_trained: bool,
}

#[derive(Debug, Clone)]
pub struct IdentityArtifacts {
    pub lora: LoraSet,
    pub phi: Option<AdapterSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub probe_before: f64,
    pub probe_after: f64,
    pub trained_parameters: Vec<String>,
}

/// The frozen models of a run.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub autoencoder: ToyAutoencoder,
    pub denoiser: Denoiser,
    pub semantic: ToySemanticBackend,
    pub embedder: ToyEmbedder,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let autoencoder = ToyAutoencoder::new(config.autoencoder.patch, config.autoencoder.latent_channels)?;
        let denoiser = Denoiser::toy(config.denoiser.clone(), schedule, config.denoiser_seed(), DType::F32)?;
        let semantic = ToySemanticBackend::new(config.semantic.clone())?;
        let embedder = ToyEmbedder::new(EMBEDDER_DIM, crate::rng::derive_seed(config.seed, "embedder"));
        Ok(Self {
            config,
            autoencoder,
            denoiser,
            semantic,
            embedder,
        })
    }

    /// Features, foreground direction and mask of a clip or image set.
    pub fn analyze(&self, frames: &FrameVideo) -> Result<SubjectAnalysis> {
        let features = self.semantic.extract(frames)?;
        let basis = fit_pca(&features, 1)?;
        let mask = foreground_mask(&features, &basis, &self.config.mask)?;
        Ok(SubjectAnalysis { features, basis, mask })
    }

    /// Features of a clip paired with an existing token-grid mask.
    pub fn analyze_with_mask(&self, frames: &FrameVideo, mask: ForegroundMask) -> Result<SubjectAnalysis> {
        let features = self.semantic.extract(frames)?;
        let (n, h, w, _) = features.dims();
        if (mask.frame_count(), mask.height(), mask.width()) != (n, h, w) {
            return Err(crate::error::shape(format!(
                "mask is {}x{}x{}, feature grid is {n}x{h}x{w}",
                mask.frame_count(),
                mask.height(),
                mask.width()
            )));
        }
        let basis = fit_pca(&features, 1)?;
        Ok(SubjectAnalysis { features, basis, mask })
    }

    pub fn train_motion(&self, video: &FrameVideo, subject: &SubjectAnalysis, cfg: &MotionTrainConfig) -> Result<MotionTrainOutput> {
        let latents = self.autoencoder.encode_video(video)?;
        train_motion_adapters(
            MotionTrainInputs {
                latents: &latents,
                prompt: &self.config.prompts.source,
                features: &subject.features,
                mask: &subject.mask,
            },
            &self.denoiser,
            &self.config.adapters,
            cfg,
        )
    }

    pub fn identity_prompt(&self) -> Result<String> {
        build_identity_prompt(&self.config.prompts.class_word, &self.config.prompts.identifier)
    }

    pub fn register(
        &self,
        references: &FrameVideo,
        subject: &SubjectAnalysis,
        cfg: &crate::identity::IdentityTrainConfig,
    ) -> Result<IdentityTrainOutput> {
        let latents = self.autoencoder.encode_video(references)?;
        let prompt = self.identity_prompt()?;
        register_identity(
            IdentityTrainInputs {
                references: &latents,
                prompt: &prompt,
                features: &subject.features,
                masks: &subject.mask,
            },
            &self.denoiser,
            &self.config.adapters,
            cfg,
        )
    }

    /// Edits `video`. Motion guidance needs trained adapters; identity comes
    /// from the LoRA alone.
    pub fn edit(
        &self,
        video: &FrameVideo,
        subject: &SubjectAnalysis,
        motion: Option<&MotionArtifacts>,
        lora: Option<&LoraSet>,
        cfg: &EditConfig,
    ) -> Result<EditResult> {
        let denoiser = match motion.and_then(|m| m.motion_weights.as_ref()) {
            Some(w) => self.denoiser.with_params(w)?,
            None => self.denoiser.clone(),
        };
        let adapters = motion.filter(|m| m.guidance_trained).map(|m| &m.adapters);
        if cfg.lambda > 0.0 && adapters.is_none() {
            return Err(Error::MissingPrerequisite(
                "motion guidance with lambda > 0 needs trained adapters (run train-motion)".into(),
            ));
        }
        let foreground = match adapters {
            Some(_) => Some(masked_foreground(&subject.features, &subject.mask)?),
            None => None,
        };
        let signals = EditSignals {
            adapters,
            features: foreground.as_ref(),
            lora,
            mask: cfg.blend_enabled.then_some(&subject.mask),
        };
        EditPipeline {
            denoiser: &denoiser,
            autoencoder: &self.autoencoder,
        }
        .edit_video(video, &self.config.prompts.source, signals, cfg)
    }

    /// One report row; image alignment only when references are given.
    pub fn evaluate(&self, method: &str, frames: &FrameVideo, prompt: &str, references: Option<&FrameVideo>) -> Result<MetricRow> {
        Ok(MetricRow {
            method: method.to_string(),
            text_alignment: Some(text_alignment(frames, prompt, &self.embedder)),
            image_alignment: references.map(|r| image_alignment(frames, r, &self.embedder)),
            temporal_consistency: Some(temporal_consistency(frames, &self.embedder)?),
        })
    }
}

/// `psi.*` adapters plus optional trained motion weights, with the adapter
/// config in the metadata.
pub fn save_motion(dir: &Path, out: &MotionTrainOutput, adapter_config: &AdapterConfig, guidance_trained: bool) -> Result<()> {
    let mut arrays = out.adapters.params().clone();
    if let Some(w) = &out.motion_weights {
        arrays.extend(w.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    Checkpoint::new(arrays)
        .with_metadata("adapter_config", adapter_config)?
        .with_metadata("guidance_trained", guidance_trained)?
        .with_metadata("summary", summary(out.probe_before, out.probe_after, &out.trained_parameters))?
        .save(dir, MOTION_CHECKPOINT)?;
    Ok(())
}

pub fn load_motion(dir: &Path) -> Result<MotionArtifacts> {
    let ck = Checkpoint::load(dir, MOTION_CHECKPOINT)?;
    let config: AdapterConfig = ck.metadata_as("adapter_config")?;
    let adapters = AdapterSet::from_params("psi", config, ck.subset("psi."))?;
    let motion = ck.subset("unet.");
    Ok(MotionArtifacts {
        adapters,
        motion_weights: (!motion.is_empty()).then_some(motion),
        guidance_trained: ck.metadata_as("guidance_trained")?,
    })
}

/// LoRA checkpoint (self-describing: rank, scale, attachment names) and,
/// when trained, the `phi` adapters.
pub fn save_identity(dir: &Path, out: &IdentityTrainOutput, adapter_config: &AdapterConfig) -> Result<()> {
    let first = out.lora.values().next().ok_or_else(|| crate::error::invalid("empty LoRA set"))?;
    Checkpoint::new(lora_set_to_arrays(&out.lora))
        .with_metadata("rank", first.rank())?
        .with_metadata("scale", first.scale())?
        .with_metadata("targets", out.lora.keys().collect::<Vec<_>>())?
        .with_metadata("summary", summary(out.probe_before, out.probe_after, &out.trained_parameters))?
        .save(dir, LORA_CHECKPOINT)?;
    if let Some(phi) = &out.phi {
        Checkpoint::new(phi.params().clone())
            .with_metadata("adapter_config", adapter_config)?
            .save(dir, PHI_CHECKPOINT)?;
    }
    Ok(())
}

pub fn load_identity(dir: &Path) -> Result<IdentityArtifacts> {
    let ck = Checkpoint::load(dir, LORA_CHECKPOINT)?;
    let lora = lora_set_from_arrays(&ck.arrays, ck.metadata_as("scale")?)?;
    let phi = if crate::checkpoint::exists(dir, PHI_CHECKPOINT) {
        let p = Checkpoint::load(dir, PHI_CHECKPOINT)?;
        Some(AdapterSet::from_params("phi", p.metadata_as("adapter_config")?, p.arrays)?)
    } else {
        None
    };
    Ok(IdentityArtifacts { lora, phi })
}

fn summary(before: f64, after: f64, names: &[String]) -> TrainingSummary {
    TrainingSummary {
        probe_before: before,
        probe_after: after,
        trained_parameters: names.to_vec(),
    }
}

pub fn losses_to_csv(losses: &[LossRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in losses {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
