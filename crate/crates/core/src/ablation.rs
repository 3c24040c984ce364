//! Ablation variants: the guidance-weight sweep with frozen motion layers,
//! trainable motion layers without semantic guidance, and identity
//! registration with and without the semantic branch.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::autoencoder::FrameVideo;
use crate::error::invalid;
use crate::inference::EditConfig;
use crate::metrics::MetricRow;
use crate::pipeline::{MotionArtifacts, Pipeline, SubjectAnalysis};
use crate::{Error, Result};

pub const DEFAULT_LAMBDAS: [f64; 3] = [0.0, 0.3, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    LambdaSweep,
    LearnableMotionNoGuidance,
    IdentityWith,
    IdentityWithout,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        Self::LambdaSweep,
        Self::LearnableMotionNoGuidance,
        Self::IdentityWith,
        Self::IdentityWithout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LambdaSweep => "lambda_sweep",
            Self::LearnableMotionNoGuidance => "learnable_motion_no_guidance",
            Self::IdentityWith => "identity_with",
            Self::IdentityWithout => "identity_without",
        }
    }

    pub fn needs_references(self) -> bool {
        matches!(self, Self::IdentityWith | Self::IdentityWithout)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| invalid(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: AblationVariant,
    /// Used by the sweep only.
    pub lambda_values: Vec<f64>,
}

impl AblationSpec {
    pub fn new(variant: AblationVariant, lambda_values: Vec<f64>) -> Result<Self> {
        let spec = Self { variant, lambda_values };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sweep(lambda_values: Vec<f64>) -> Result<Self> {
        Self::new(AblationVariant::LambdaSweep, lambda_values)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == AblationVariant::LambdaSweep && self.lambda_values.is_empty() {
            return Err(invalid("lambda_sweep needs at least one lambda value"));
        }
        if let Some(l) = self.lambda_values.iter().find(|l| l.is_nan() || **l < 0.0) {
            return Err(invalid(format!("lambda values must be >= 0, got {l}")));
        }
        Ok(())
    }

    /// One label per report row.
    pub fn row_labels(&self) -> Vec<String> {
        match self.variant {
            AblationVariant::LambdaSweep => self
                .lambda_values
                .iter()
                .map(|l| format!("lambda={l:.1}, frozen motion module"))
                .collect(),
            AblationVariant::LearnableMotionNoGuidance => vec!["no semantic guidance, learnable motion module".into()],
            AblationVariant::IdentityWith => vec!["identity with semantic guidance".into()],
            AblationVariant::IdentityWithout => vec!["identity without semantic guidance".into()],
        }
    }
}

pub struct AblationAssets<'a> {
    pub video: &'a FrameVideo,
    pub subject: &'a SubjectAnalysis,
    pub references: Option<&'a FrameVideo>,
    /// Stage-1 adapters to reuse; trained from the video when absent.
    pub motion: Option<&'a MotionArtifacts>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<MetricRow>,
    /// Final edited latents per row, in row order.
    pub latents: Vec<Tensor>,
}

fn motion_for(pipeline: &Pipeline, assets: &AblationAssets<'_>) -> Result<MotionArtifacts> {
    if let Some(m) = assets.motion {
        return Ok(m.clone());
    }
    let out = pipeline.train_motion(assets.video, assets.subject, &pipeline.config.motion_train)?;
    Ok(MotionArtifacts {
        adapters: out.adapters,
        motion_weights: None,
        guidance_trained: true,
    })
}

/// Runs one variant end to end and returns its report rows.
pub fn run_ablation(pipeline: &Pipeline, spec: &AblationSpec, assets: &AblationAssets<'_>) -> Result<AblationOutcome> {
    spec.validate()?;
    let base = &pipeline.config;
    let labels = spec.row_labels();
    let mut rows = Vec::new();
    let mut latents = Vec::new();
    let mut record = |label: &str, edit: crate::inference::EditResult, refs: Option<&FrameVideo>| -> Result<()> {
        rows.push(pipeline.evaluate(label, &edit.frames, &edit.target_prompt, refs)?);
        latents.push(edit.latents.into_tensor());
        Ok(())
    };
    match spec.variant {
        AblationVariant::LambdaSweep => {
            let motion = motion_for(pipeline, assets)?;
            for (lambda, label) in spec.lambda_values.iter().zip(&labels) {
                let cfg = EditConfig { lambda: *lambda, ..base.edit.clone() };
                let edit = pipeline.edit(assets.video, assets.subject, Some(&motion), None, &cfg)?;
                record(label, edit, None)?;
            }
        }
        AblationVariant::LearnableMotionNoGuidance => {
            let mut train = base.motion_train.clone();
            train.train_motion_layers = true;
            train.use_guidance = false;
            let out = pipeline.train_motion(assets.video, assets.subject, &train)?;
            let motion = MotionArtifacts {
                adapters: out.adapters,
                motion_weights: out.motion_weights,
                guidance_trained: false,
            };
            let cfg = EditConfig { lambda: 0.0, ..base.edit.clone() };
            let edit = pipeline.edit(assets.video, assets.subject, Some(&motion), None, &cfg)?;
            record(&labels[0], edit, None)?;
        }
        AblationVariant::IdentityWith | AblationVariant::IdentityWithout => {
            let refs = assets.references.ok_or_else(|| {
                Error::MissingPrerequisite(format!("{} needs reference images", spec.variant))
            })?;
            let motion = motion_for(pipeline, assets)?;
            let ref_subject = pipeline.analyze(refs)?;
            let mut train = base.identity_train.clone();
            train.use_semantic_guidance = spec.variant == AblationVariant::IdentityWith;
            let identity = pipeline.register(refs, &ref_subject, &train)?;
            let edit = pipeline.edit(assets.video, assets.subject, Some(&motion), Some(&identity.lora), &base.edit)?;
            record(&labels[0], edit, Some(refs))?;
        }
    }
    Ok(AblationOutcome { rows, latents })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("lambda".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn sweep_needs_lambdas() {
        assert!(AblationSpec::sweep(vec![]).is_err());
        assert!(AblationSpec::sweep(vec![-0.1]).is_err());
        let s = AblationSpec::sweep(DEFAULT_LAMBDAS.to_vec()).unwrap();
        assert_eq!(
            s.row_labels(),
            vec![
                "lambda=0.0, frozen motion module",
                "lambda=0.3, frozen motion module",
                "lambda=1.0, frozen motion module"
            ]
        );
        let id = AblationSpec::new(AblationVariant::IdentityWithout, vec![]).unwrap();
        assert_eq!(id.row_labels().len(), 1);
    }
}
