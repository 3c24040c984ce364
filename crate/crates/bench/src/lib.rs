//! Shared fixtures for the benchmarks: the default models plus a short clip
//! with its semantic analysis and a set of non-trivial adapters.

use std::collections::BTreeMap;

use candle_core::Tensor;
use vidguide_core::guidance::AdapterSet;
use vidguide_core::pipeline::{Pipeline, SubjectAnalysis};
use vidguide_core::synth::{moving_square, SquareVideoSpec};
use vidguide_core::text::{embed_prompt, TextEmbedding};
use vidguide_core::{rng, FrameVideo, Result, RunConfig};

pub struct Fixture {
    pub pipeline: Pipeline,
    pub video: FrameVideo,
    pub subject: SubjectAnalysis,
    pub latents: Tensor,
    pub text: TextEmbedding,
    pub adapters: AdapterSet,
}

impl Fixture {
    /// `frames`-frame 64x64 clip on a denoiser whose temporal window matches.
    pub fn new(frames: usize) -> Result<Self> {
        let mut config = RunConfig::default();
        config.denoiser.temporal_window = frames;
        let pipeline = Pipeline::new(config)?;
        let (video, _) = moving_square(&SquareVideoSpec {
            frames,
            ..Default::default()
        })?;
        let subject = pipeline.analyze(&video)?;
        let latents = pipeline.autoencoder.encode_video(&video)?.into_tensor();
        let text = embed_prompt(&pipeline.config.prompts.source, pipeline.denoiser.config().text_dim)?;
        let (_, _, _, c) = subject.features.dims();
        let fresh = AdapterSet::new(
            "psi",
            c,
            pipeline.denoiser.config().channel_widths,
            pipeline.config.adapters.clone(),
            1,
            candle_core::DType::F32,
        )?;
        let adapters = fresh.with_params(jitter(fresh.params(), 0.02)?)?;
        Ok(Self {
            pipeline,
            video,
            subject,
            latents,
            text,
            adapters,
        })
    }
}

fn jitter(params: &BTreeMap<String, Tensor>, std: f64) -> Result<BTreeMap<String, Tensor>> {
    params
        .iter()
        .map(|(k, t)| {
            let mut r = rng::stream(7, k);
            let noise = rng::gaussian_tensor(&mut r, t.dims(), std, t.dtype(), t.device())?;
            Ok((k.clone(), (t + noise)?))
        })
        .collect()
}
