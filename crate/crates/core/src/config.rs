//! Run configuration: one TOML document with a section per stage. Unknown
//! keys are rejected everywhere, stage seeds left out are derived from the
//! global `seed`, and only the `[paths]` entries may be overridden from the
//! environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::guidance::AdapterConfig;
use crate::identity::IdentityTrainConfig;
use crate::inference::EditConfig;
use crate::motion::MotionTrainConfig;
use crate::schedule::{BetaSpacing, NoiseSchedule};
use crate::semantic::{MaskPolicy, SemanticConfig, ThresholdRule};
use crate::{denoiser::DenoiserConfig, rng, Error, Result};

/// Environment variables consulted by [`load_config`], by `[paths]` key.
pub const PATH_OVERRIDES: [(&str, &str); 4] = [
    ("video_dir", "VIDGUIDE_VIDEO_DIR"),
    ("refs_dir", "VIDGUIDE_REFS_DIR"),
    ("checkpoint_dir", "VIDGUIDE_CHECKPOINT_DIR"),
    ("output_dir", "VIDGUIDE_OUTPUT_DIR"),
];

/// Sections whose `seed` is derived from the global seed when omitted.
const SEEDED_SECTIONS: [&str; 4] = ["semantic", "motion_train", "identity_train", "edit"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            spacing: BetaSpacing::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.total_steps, self.beta_start, self.beta_end, self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub patch: usize,
    pub latent_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            latent_channels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Describes the source video.
    pub source: String,
    /// Class of the target subject, used in the registration prompt.
    pub class_word: String,
    /// Rare token bound to the target subject.
    pub identifier: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            source: "a red square sliding over gravel".into(),
            class_word: "square".into(),
            identifier: "sks".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub video_dir: Option<PathBuf>,
    pub refs_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl PathConfig {
    fn slot(&mut self, key: &str) -> &mut Option<PathBuf> {
        match key {
            "video_dir" => &mut self.video_dir,
            "refs_dir" => &mut self.refs_dir,
            "checkpoint_dir" => &mut self.checkpoint_dir,
            _ => &mut self.output_dir,
        }
    }

    fn resolve(&mut self, base: &Path) {
        for (key, _) in PATH_OVERRIDES {
            if let Some(p) = self.slot(key) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn require(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "video_dir" => &self.video_dir,
            "refs_dir" => &self.refs_dir,
            "checkpoint_dir" => &self.checkpoint_dir,
            "output_dir" => &self.output_dir,
            _ => return Err(config_error(format!("paths.{key}"), "no such path")),
        };
        p.as_deref()
            .ok_or_else(|| Error::MissingPrerequisite(format!("paths.{key} is not set")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderConfig,
    pub denoiser: DenoiserConfig,
    pub semantic: SemanticConfig,
    pub mask: MaskPolicy,
    pub adapters: AdapterConfig,
    pub motion_train: MotionTrainConfig,
    pub identity_train: IdentityTrainConfig,
    pub edit: EditConfig,
    pub prompts: PromptConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            semantic: SemanticConfig::default(),
            mask: MaskPolicy::default(),
            adapters: AdapterConfig::default(),
            motion_train: MotionTrainConfig::default(),
            identity_train: IdentityTrainConfig::default(),
            edit: EditConfig::default(),
            prompts: PromptConfig::default(),
            paths: PathConfig::default(),
        };
        c.derive_stage_seeds(&[]);
        c
    }
}

/// TOML integers are signed 64-bit, so derived seeds keep 63 bits.
fn toml_seed(s: u64) -> u64 {
    s & i64::MAX as u64
}

fn config_error(key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

/// Re-labels an error from a section's own validation with that section.
fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => config_error(section, other.to_string()),
    }
}

impl RunConfig {
    /// Seed of the frozen denoiser weights.
    pub fn denoiser_seed(&self) -> u64 {
        toml_seed(rng::derive_seed(self.seed, "denoiser"))
    }

    /// Fills every stage seed that is not in `explicit` from the global seed.
    fn derive_stage_seeds(&mut self, explicit: &[&str]) {
        for section in SEEDED_SECTIONS {
            if explicit.contains(&section) {
                continue;
            }
            let s = toml_seed(rng::derive_seed(self.seed, section));
            match section {
                "semantic" => self.semantic.seed = s,
                "motion_train" => self.motion_train.seed = s,
                "identity_train" => self.identity_train.seed = s,
                _ => self.edit.seed = s,
            }
        }
    }

    /// Parses TOML text. Relative paths are resolved against `base_dir`.
    /// Path existence is not checked here; see [`load_config`].
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(error_key(&e), e.message()))?;
        let mut cfg: RunConfig = raw
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| config_error(error_key(&e), e.message()))?;
        let explicit: Vec<&str> = SEEDED_SECTIONS
            .into_iter()
            .filter(|s| raw.get(*s).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key("seed")))
            .collect();
        cfg.derive_stage_seeds(&explicit);
        cfg.paths.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_error("<config>", e.to_string()))
    }

    /// Checks every section; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build().map_err(|e| in_section("schedule", e))?;
        let total = schedule.total_steps();
        crate::autoencoder::ToyAutoencoder::new(self.autoencoder.patch, self.autoencoder.latent_channels)
            .map_err(|e| in_section("autoencoder", e))?;
        self.denoiser.validate().map_err(|e| in_section("denoiser", e))?;
        if self.denoiser.latent_channels != self.autoencoder.latent_channels {
            return Err(config_error(
                "denoiser.latent_channels",
                format!("must equal autoencoder.latent_channels = {}", self.autoencoder.latent_channels),
            ));
        }
        if self.semantic.patch_size == 0 || self.semantic.feature_dim == 0 {
            return Err(config_error("semantic.patch_size", "patch_size and feature_dim must be positive"));
        }
        if let ThresholdRule::Quantile(q) = self.mask.threshold {
            if !(q > 0.0 && q < 1.0) {
                return Err(config_error("mask.threshold", "quantile must lie in (0, 1)"));
            }
        }
        if self.adapters.hidden_width == 0 {
            return Err(config_error("adapters.hidden_width", "must be >= 1"));
        }
        self.motion_train.validate().map_err(|e| in_section("motion_train", e))?;
        if self.motion_train.t_min.is_some_and(|t| t == 0 || t > total) {
            return Err(config_error("motion_train.t_min", format!("must be in 1..={total}")));
        }
        self.identity_train.validate().map_err(|e| in_section("identity_train", e))?;
        self.edit.validate(total).map_err(|e| in_section("edit", e))?;
        if self.prompts.source.trim().is_empty() {
            return Err(config_error("prompts.source", "must not be empty"));
        }
        if self.prompts.class_word.trim().is_empty() {
            return Err(config_error("prompts.class_word", "must not be empty"));
        }
        Ok(())
    }

    /// Replaces `[paths]` entries from `VIDGUIDE_*` variables, looked up
    /// through `lookup` so tests need not touch the process environment.
    pub fn apply_path_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (key, var) in PATH_OVERRIDES {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                *self.paths.slot(key) = Some(PathBuf::from(v));
            }
        }
    }

    /// Input directories that are set must exist.
    pub fn check_paths(&self) -> Result<()> {
        for (key, p) in [("video_dir", &self.paths.video_dir), ("refs_dir", &self.paths.refs_dir)] {
            if let Some(p) = p {
                if !p.is_dir() {
                    return Err(config_error(format!("paths.{key}"), format!("{} is not a directory", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    // serde reports unknown fields as "unknown field `name`, expected ..."
    msg.split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("unknown variant"))
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".into())
}

/// Reads, validates and resolves a config file. Relative paths are taken
/// relative to the file's directory, environment overrides are applied, and
/// input directories must exist.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error("<file>", format!("{}: {e}", path.display())))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut cfg = RunConfig::from_toml_str(&text, base)?;
    cfg.apply_path_overrides(|k| std::env::var(k).ok());
    cfg.check_paths()?;
    Ok(cfg)
}

pub fn dump_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, cfg.to_toml_string()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(text, Path::new("/base"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("seed = 7\n").unwrap();
        assert_eq!(c.edit.lambda, 1.0);
        assert_eq!(c.edit.num_steps, 50);
        assert_eq!(c.motion_train.learning_rate, 5e-4);
        assert_eq!(c.identity_train.learning_rate, 1e-4);
        assert_eq!(c.motion_train.iterations, 100);
        assert_eq!(c.schedule.total_steps, 1000);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse("[edit]\nlamda = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
        let err = parse("colour = 1\n").unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = parse("[edit]\nlambda = -1.0\n").unwrap_err().to_string();
        assert!(err.contains("edit.lambda"), "{err}");
        let err = parse("[motion_train]\nt_min = 0\n").unwrap_err().to_string();
        assert!(err.contains("motion_train.t_min"), "{err}");
        let err = parse("[identity_train]\nrank = 0\n").unwrap_err().to_string();
        assert!(err.contains("identity_train.rank"), "{err}");
    }

    #[test]
    fn stage_seeds_follow_the_global_seed_unless_given() {
        let a = parse("seed = 1\n").unwrap();
        let b = parse("seed = 2\n").unwrap();
        assert_ne!(a.motion_train.seed, b.motion_train.seed);
        assert_ne!(a.motion_train.seed, a.identity_train.seed);
        let c = parse("seed = 2\n[edit]\nseed = 99\n").unwrap();
        assert_eq!(c.edit.seed, 99);
        assert_eq!(c.motion_train.seed, b.motion_train.seed);
    }

    #[test]
    fn dump_then_load_is_equal() {
        let text = "seed = 3\n[edit]\nlambda = 0.3\ninjection_stop = 400\n[mask]\nthreshold = { quantile = 0.8 }\n[paths]\nvideo_dir = \"video\"\n";
        let c = parse(text).unwrap();
        assert_eq!(c.paths.video_dir.as_deref(), Some(Path::new("/base/video")));
        let again = parse(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn env_overrides_only_touch_paths() {
        let mut c = parse("").unwrap();
        let before = c.clone();
        c.apply_path_overrides(|k| (k == "VIDGUIDE_OUTPUT_DIR").then(|| "/tmp/out".to_string()));
        assert_eq!(c.paths.output_dir.as_deref(), Some(Path::new("/tmp/out")));
        c.paths.output_dir = None;
        assert_eq!(c, before);
    }

    #[test]
    fn load_config_checks_input_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\nvideo_dir = \"missing\"\n").unwrap();
        assert!(load_config(&path).is_err());
        std::fs::create_dir(dir.path().join("missing")).unwrap();
        let c = load_config(&path).unwrap();
        assert_eq!(c.paths.video_dir.unwrap(), dir.path().join("missing"));
    }
}
