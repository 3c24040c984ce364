//! `vidguide` command line. Every subcommand reads one run config and maps
//! onto a single pipeline stage; artifacts travel between stages through
//! the configured checkpoint directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vidguide_core::ablation::{run_ablation, AblationAssets, AblationSpec, AblationVariant, DEFAULT_LAMBDAS};
use vidguide_core::checkpoint::{self, tensor_sha256, Checkpoint};
use vidguide_core::config::{load_config, RunConfig};
use vidguide_core::inference::{StepLog, Trajectory};
use vidguide_core::io::{load_frames, load_masks, read_json, save_frames, save_masks, write_json};
use vidguide_core::metrics::{evaluation_report, MetricRow};
use vidguide_core::pipeline::{
    load_identity, load_motion, losses_to_csv, save_identity, save_motion, MotionArtifacts, Pipeline, SubjectAnalysis,
};
use vidguide_core::semantic::{fit_pca, pca_rgb_visualization, SemanticBackend};
use vidguide_core::synth::{moving_square, reference_images, SquareVideoSpec};
use vidguide_core::text::embed_prompt;
use vidguide_core::{Error, FrameVideo};

pub const MANIFEST_FILE: &str = "manifest.json";
const MASK_DIR: &str = "mask";
const REF_MASK_DIR: &str = "ref_mask";
const INVERSION_CHECKPOINT: &str = "inversion";

#[derive(Debug, Parser)]
#[command(name = "vidguide", version, about = "Subject-driven video editing with semantic-feature guidance")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic moving-square clip, reference images and a
    /// matching run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        references: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Foreground masks of the source video (and references, if configured).
    Mask {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Stage 1: train the motion adapters.
    TrainMotion {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Stage 2: register the reference subject.
    RegisterIdentity {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// DDIM-invert the source video and store the trajectory.
    Invert {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Edit the source video; writes frames and a JSON manifest.
    Edit {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Ignore a registered identity and edit from the prompt alone.
        #[arg(long)]
        text_only: bool,
    },
    /// Score edit outputs and write a CSV and a rendered table.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directories written by `edit`.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run ablation variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Variant(s) to run; all when omitted.
        #[arg(long)]
        variant: Vec<AblationVariant>,
        /// Guidance weights for the sweep, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDAS)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA-RGB rendering of the semantic features, one image per frame.
    VisualizeFeatures {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, frames, references, seed } => synth(&out, frames, references, seed),
        Command::Mask { cfg } => mask(&Stage::open(&cfg.config)?),
        Command::TrainMotion { cfg } => train_motion(&Stage::open(&cfg.config)?),
        Command::RegisterIdentity { cfg } => register(&Stage::open(&cfg.config)?),
        Command::Invert { cfg } => invert(&Stage::open(&cfg.config)?),
        Command::Edit { cfg, out, text_only } => edit(&Stage::open(&cfg.config)?, &out, text_only).map(|_| ()),
        Command::Evaluate { cfg, runs, out } => evaluate(&Stage::open(&cfg.config)?, &runs, &out),
        Command::Ablate { cfg, variant, lambdas, out } => ablate(&Stage::open(&cfg.config)?, &variant, lambdas, &out),
        Command::VisualizeFeatures { cfg, out } => visualize(&Stage::open(&cfg.config)?, &out),
    }
}

/// Loaded config plus the frozen models.
struct Stage {
    pipeline: Pipeline,
}

impl Stage {
    fn open(path: &Path) -> Result<Self> {
        let config = load_config(path).with_context(|| format!("loading {}", path.display()))?;
        Ok(Self {
            pipeline: Pipeline::new(config)?,
        })
    }

    fn cfg(&self) -> &RunConfig {
        &self.pipeline.config
    }

    fn dir(&self, key: &str) -> Result<&Path> {
        Ok(self.cfg().paths.require(key)?)
    }

    fn video(&self) -> Result<FrameVideo> {
        Ok(load_frames(self.dir("video_dir")?)?)
    }

    fn references(&self) -> Result<FrameVideo> {
        Ok(load_frames(self.dir("refs_dir")?)?)
    }

    fn masked(&self, frames: &FrameVideo, sub: &str) -> Result<SubjectAnalysis> {
        let dir = self.dir("checkpoint_dir")?.join(sub);
        if !dir.is_dir() {
            return Err(Error::MissingPrerequisite(format!("{} not found (run `mask` first)", dir.display())).into());
        }
        Ok(self.pipeline.analyze_with_mask(frames, load_masks(&dir)?)?)
    }
}

fn synth(out: &Path, frames: usize, references: usize, seed: u64) -> Result<()> {
    let spec = SquareVideoSpec { frames, seed, ..Default::default() };
    let (video, truth) = moving_square(&spec)?;
    save_frames(&video, &out.join("video"))?;
    save_masks(&truth, &out.join("video_truth_mask"))?;
    if references > 0 {
        let (refs, _) = reference_images(references, spec.size, seed)?;
        save_frames(&refs, &out.join("refs"))?;
    }
    let refs_line = if references > 0 { "refs_dir = \"refs\"\n" } else { "" };
    let text = format!(
        "seed = {seed}\n\n[denoiser]\ntemporal_window = {frames}\n\n[paths]\nvideo_dir = \"video\"\n{refs_line}checkpoint_dir = \"checkpoints\"\noutput_dir = \"outputs\"\n"
    );
    RunConfig::from_toml_str(&text, out)?;
    std::fs::write(out.join("run.toml"), text)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn mask(stage: &Stage) -> Result<()> {
    let ck = stage.dir("checkpoint_dir")?;
    let video = stage.video()?;
    let subject = stage.pipeline.analyze(&video)?;
    save_masks(&subject.mask, &ck.join(MASK_DIR))?;
    println!("video mask: {:?} tokens per frame", subject.mask.frame_counts());
    if stage.cfg().paths.refs_dir.is_some() {
        let refs = stage.pipeline.analyze(&stage.references()?)?;
        save_masks(&refs.mask, &ck.join(REF_MASK_DIR))?;
        println!("reference masks: {:?} tokens", refs.mask.frame_counts());
    }
    Ok(())
}

fn train_motion(stage: &Stage) -> Result<()> {
    let ck = stage.dir("checkpoint_dir")?;
    let video = stage.video()?;
    let subject = stage.masked(&video, MASK_DIR)?;
    let cfg = &stage.cfg().motion_train;
    let out = stage.pipeline.train_motion(&video, &subject, cfg)?;
    save_motion(ck, &out, &stage.cfg().adapters, cfg.use_guidance)?;
    std::fs::write(ck.join("motion_losses.csv"), losses_to_csv(&out.losses)?)?;
    println!(
        "motion adapters: probe loss {:.6} -> {:.6} ({:.1}%)",
        out.probe_before,
        out.probe_after,
        100.0 * out.probe_after / out.probe_before
    );
    Ok(())
}

fn register(stage: &Stage) -> Result<()> {
    let ck = stage.dir("checkpoint_dir")?;
    let refs = stage.references()?;
    let subject = stage.masked(&refs, REF_MASK_DIR)?;
    let out = stage.pipeline.register(&refs, &subject, &stage.cfg().identity_train)?;
    save_identity(ck, &out, &stage.cfg().adapters)?;
    std::fs::write(ck.join("identity_losses.csv"), losses_to_csv(&out.losses)?)?;
    println!(
        "identity: probe loss {:.6} -> {:.6} ({:.1}%)",
        out.probe_before,
        out.probe_after,
        100.0 * out.probe_after / out.probe_before
    );
    Ok(())
}

fn invert(stage: &Stage) -> Result<()> {
    let p = &stage.pipeline;
    let video = stage.video()?;
    let z0 = p.autoencoder.encode_video(&video)?.into_tensor();
    let text = embed_prompt(&p.config.prompts.source, p.denoiser.config().text_dim)?;
    let steps = p.config.edit.num_steps;
    let traj = Trajectory::compute(&p.denoiser, &z0, &text, steps, 1)?;
    let mut arrays = BTreeMap::new();
    for i in 0..=traj.num_steps() {
        arrays.insert(format!("z.{i:03}"), traj.latent(i, &p.denoiser, &text)?);
    }
    Checkpoint::new(arrays)
        .with_metadata("timesteps", traj.timesteps())?
        .with_metadata("prompt", &p.config.prompts.source)?
        .save(stage.dir("checkpoint_dir")?, INVERSION_CHECKPOINT)?;
    println!("stored {} inverted latents", traj.num_steps() + 1);
    Ok(())
}

/// Per-step record without wall-clock fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub guidance_applied: bool,
    pub lora_applied: bool,
    pub blended: bool,
}

impl From<&StepLog> for StepRecord {
    fn from(s: &StepLog) -> Self {
        Self {
            index: s.index,
            t: s.t,
            t_prev: s.t_prev,
            guidance_applied: s.guidance_applied,
            lora_applied: s.lora_applied,
            blended: s.blended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub step_ms: Vec<f64>,
}

/// Written next to the frames of every edit. `timing` is the only field
/// that may differ between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditManifest {
    pub config: RunConfig,
    pub source_prompt: String,
    pub target_prompt: String,
    pub identity: bool,
    pub motion_checkpoint: Option<String>,
    pub lora_checkpoint: Option<String>,
    pub frame_files: Vec<String>,
    pub latents_sha256: String,
    pub steps: Vec<StepRecord>,
    pub timing: Timing,
}

impl EditManifest {
    /// JSON of everything except `timing`.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v.as_object_mut().expect("manifest is an object").remove("timing");
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

fn checkpoint_digest(dir: &Path, name: &str) -> Result<Option<String>> {
    if !checkpoint::exists(dir, name) {
        return Ok(None);
    }
    let bytes = std::fs::read(checkpoint::manifest_path(dir, name))?;
    Ok(Some(hex::encode(Sha256::digest(bytes))))
}

fn edit(stage: &Stage, out: &Path, text_only: bool) -> Result<EditManifest> {
    let started = Instant::now();
    let cfg = stage.cfg();
    let ck = stage.dir("checkpoint_dir")?;
    let video = stage.video()?;
    let subject = stage.masked(&video, MASK_DIR)?;
    let motion: Option<MotionArtifacts> = if checkpoint::exists(ck, vidguide_core::pipeline::MOTION_CHECKPOINT) {
        Some(load_motion(ck)?)
    } else {
        None
    };
    let use_identity = !text_only && checkpoint::exists(ck, vidguide_core::pipeline::LORA_CHECKPOINT);
    let identity = if use_identity { Some(load_identity(ck)?) } else { None };
    let result = stage.pipeline.edit(&video, &subject, motion.as_ref(), identity.as_ref().map(|i| &i.lora), &cfg.edit)?;
    let frame_dir = out.join("frames");
    let files = save_frames(&result.frames, &frame_dir)?;
    let manifest = EditManifest {
        config: cfg.clone(),
        source_prompt: cfg.prompts.source.clone(),
        target_prompt: result.target_prompt.clone(),
        identity: use_identity,
        motion_checkpoint: if motion.is_some() { checkpoint_digest(ck, vidguide_core::pipeline::MOTION_CHECKPOINT)? } else { None },
        lora_checkpoint: if use_identity { checkpoint_digest(ck, vidguide_core::pipeline::LORA_CHECKPOINT)? } else { None },
        frame_files: files
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
        latents_sha256: tensor_sha256(result.latents.tensor())?,
        steps: result.denoise.logs.iter().map(StepRecord::from).collect(),
        timing: Timing {
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            step_ms: result.denoise.logs.iter().map(|s| s.millis).collect(),
        },
    };
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    println!("edited {} frames into {}", result.frames.frame_count(), frame_dir.display());
    Ok(manifest)
}

fn evaluate(stage: &Stage, runs: &[PathBuf], out: &Path) -> Result<()> {
    let refs = match &stage.cfg().paths.refs_dir {
        Some(_) => Some(stage.references()?),
        None => None,
    };
    let mut rows: Vec<MetricRow> = Vec::new();
    for run in runs {
        let manifest: EditManifest = read_json(&run.join(MANIFEST_FILE))
            .with_context(|| format!("{} is not an edit output", run.display()))?;
        let frames = load_frames(&run.join("frames"))?;
        let method = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "edit".into());
        let references = if manifest.identity { refs.as_ref() } else { None };
        if manifest.identity && references.is_none() {
            bail!("{} used an identity but paths.refs_dir is not set", run.display());
        }
        rows.push(stage.pipeline.evaluate(&method, &frames, &manifest.target_prompt, references)?);
    }
    evaluation_report(&rows, out, "metrics")?;
    print!("{}", vidguide_core::metrics::render_table(&rows)?);
    Ok(())
}

fn ablate(stage: &Stage, variants: &[AblationVariant], lambdas: Vec<f64>, out: &Path) -> Result<()> {
    let variants: Vec<AblationVariant> = if variants.is_empty() { AblationVariant::ALL.to_vec() } else { variants.to_vec() };
    let video = stage.video()?;
    let ck = stage.dir("checkpoint_dir")?;
    let subject = if ck.join(MASK_DIR).is_dir() {
        stage.masked(&video, MASK_DIR)?
    } else {
        stage.pipeline.analyze(&video)?
    };
    let refs = match &stage.cfg().paths.refs_dir {
        Some(_) => Some(stage.references()?),
        None => None,
    };
    let motion = if checkpoint::exists(ck, vidguide_core::pipeline::MOTION_CHECKPOINT) {
        Some(load_motion(ck)?).filter(|m| m.guidance_trained)
    } else {
        None
    };
    let mut rows = Vec::new();
    for variant in variants {
        let spec = AblationSpec::new(variant, lambdas.clone())?;
        let assets = AblationAssets {
            video: &video,
            subject: &subject,
            references: refs.as_ref(),
            motion: motion.as_ref(),
        };
        let outcome = run_ablation(&stage.pipeline, &spec, &assets).with_context(|| format!("variant {variant}"))?;
        rows.extend(outcome.rows);
    }
    evaluation_report(&rows, out, "ablation")?;
    print!("{}", vidguide_core::metrics::render_table(&rows)?);
    Ok(())
}

fn visualize(stage: &Stage, out: &Path) -> Result<()> {
    let video = stage.video()?;
    let features = stage.pipeline.semantic.extract(&video)?;
    let basis = fit_pca(&features, 3)?;
    let grid = pca_rgb_visualization(&features, &basis, None)?;
    let scale = (video.height() / grid.height()).max(1);
    let rgb = upscale_nearest(&grid, scale);
    let files = save_frames(&rgb, out)?;
    println!("wrote {} feature images to {}", files.len(), out.display());
    Ok(())
}

fn upscale_nearest(v: &FrameVideo, k: usize) -> FrameVideo {
    let (n, h, w) = (v.frame_count(), v.height(), v.width());
    let mut data = Vec::with_capacity(n * h * w * k * k * 3);
    for f in 0..n {
        let src = v.frame(f).data;
        for y in 0..h * k {
            for x in 0..w * k {
                let i = ((y / k) * w + x / k) * 3;
                data.extend_from_slice(&src[i..i + 3]);
            }
        }
    }
    FrameVideo::new(n, h * k, w * k, data).expect("sizes are consistent")
}
