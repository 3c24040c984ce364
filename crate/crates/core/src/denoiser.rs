//! Toy inflated noise-prediction network.
//!
//! Four encoder stages run at `H`, `H/2`, `H/4`, `H/8`. Each stage is a
//! residual 3x3 conv block with additive time and pooled-text conditioning,
//! a windowed spatial self-attention and, when motion layers are enabled, a
//! temporal self-attention across frames with a learned frame-position table.
//! The stage output is the feature tap `F_l`; guidance is added to it before
//! it feeds both the next stage and the decoder skip. The decoder upsamples
//! and adds skips back to full resolution and predicts a velocity `v`, turned
//! into `eps = sqrt(1 - abar) z_t + sqrt(abar) v`.
//!
//! All weights live in one flat name -> tensor map (`unet.*`), which is also
//! the checkpoint layout.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape};
use crate::guidance::{GuidanceStack, LEVELS};
use crate::lora::{apply_lora, LoraSet};
use crate::schedule::NoiseSchedule;
use crate::text::TextEmbedding;
use crate::{nn, rng, Result};

const NORM_EPS: f64 = 1e-6;
const PROJECTIONS: [&str; 4] = ["to_q", "to_k", "to_v", "to_out"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Feature width `d_l` of each encoder stage.
    pub channel_widths: [usize; LEVELS],
    pub motion_layers_enabled: bool,
    pub motion_layers_trainable: bool,
    /// Frame count the temporal attention spans.
    pub temporal_window: usize,
    /// Side of the square spatial-attention window.
    pub attention_window: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    /// Init scale of the velocity head.
    pub output_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channel_widths: [8, 16, 32, 32],
            motion_layers_enabled: true,
            motion_layers_trainable: false,
            temporal_window: 16,
            attention_window: 8,
            text_dim: 32,
            time_dim: 32,
            output_gain: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_window == 0 {
            return Err(invalid("temporal_window must be >= 1"));
        }
        if self.latent_channels == 0 || self.channel_widths.contains(&0) {
            return Err(invalid("channel widths must be positive"));
        }
        if self.attention_window == 0 || self.text_dim == 0 || self.time_dim < 2 {
            return Err(invalid("attention_window, text_dim and time_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_pred: Tensor,
    /// The four encoder taps before any injection.
    pub encoder_features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: BTreeMap<String, Tensor>,
    seed: u64,
    dtype: DType,
}

fn stage(l: usize) -> String {
    format!("unet.down.{l}")
}

impl Denoiser {
    /// Frozen toy weights drawn from `seed`. Motion layers are added when the
    /// config enables them.
    pub fn toy(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let widths = config.channel_widths;
        let mut specs: Vec<(String, Vec<usize>, f64)> = Vec::new();
        let d = config.latent_channels;
        specs.push(("unet.conv_in.weight".into(), vec![widths[0], 9 * d], 1.0));
        for l in 1..=LEVELS {
            let c = widths[l - 1];
            let s = stage(l);
            if l > 1 {
                specs.push((format!("{s}.proj.weight"), vec![c, widths[l - 2]], 1.0));
            }
            specs.push((format!("{s}.conv.weight"), vec![c, 9 * c], 0.5));
            specs.push((format!("{s}.cond_time.weight"), vec![c, config.time_dim], 0.5));
            specs.push((format!("{s}.cond_text.weight"), vec![c, config.text_dim], 0.5));
            for p in PROJECTIONS {
                let gain = if p == "to_out" { 0.5 } else { 1.0 };
                specs.push((format!("{s}.attn.{p}.weight"), vec![c, c], gain));
            }
        }
        for l in 1..LEVELS {
            let c = widths[l - 1];
            specs.push((format!("unet.up.{l}.proj.weight"), vec![c, widths[l]], 1.0));
            specs.push((format!("unet.up.{l}.conv.weight"), vec![c, 9 * c], 0.5));
        }
        specs.push(("unet.conv_out.weight".into(), vec![d, widths[0]], config.output_gain));

        let mut params = BTreeMap::new();
        for (name, dims, gain) in specs {
            params.insert(name.clone(), init_weight(seed, &name, &dims, gain, dtype)?);
        }
        let mut base_config = config.clone();
        base_config.motion_layers_enabled = false;
        let base = Self {
            config: base_config,
            schedule,
            params,
            seed,
            dtype,
        };
        if config.motion_layers_enabled {
            inflate_with_motion_layers(base, &config)
        } else {
            Ok(Self { config, ..base })
        }
    }

    /// Rebuilds a denoiser from a flat parameter map, checking completeness.
    pub fn from_params(
        config: DenoiserConfig,
        schedule: NoiseSchedule,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let dtype = params
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| invalid("empty denoiser parameter map"))?;
        let reference = Self::toy(config.clone(), schedule.clone(), 0, dtype)?;
        for (name, t) in &reference.params {
            let got = params
                .get(name)
                .ok_or_else(|| invalid(format!("denoiser weight `{name}` missing")))?;
            if got.dims() != t.dims() {
                return Err(shape(format!(
                    "`{name}` is {:?}, config expects {:?}",
                    got.dims(),
                    t.dims()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(invalid(format!("unexpected denoiser weight `{extra}`")));
        }
        Ok(Self {
            config,
            schedule,
            params,
            seed: 0,
            dtype,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Same network with some parameters swapped (e.g. for trainable vars).
    pub fn with_params(&self, replacements: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = self.params.clone();
        for (k, v) in replacements {
            let old = params
                .get(k)
                .ok_or_else(|| invalid(format!("no denoiser weight `{k}` to replace")))?;
            if old.dims() != v.dims() {
                return Err(shape(format!("replacement for `{k}` has wrong shape")));
            }
            params.insert(k.clone(), v.clone());
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn with_motion_enabled(&self, enabled: bool) -> Result<Self> {
        if enabled && !self.has_motion_layers() {
            return Err(invalid("denoiser has no motion layers; inflate it first"));
        }
        let mut d = self.clone();
        d.config.motion_layers_enabled = enabled;
        Ok(d)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            dtype,
            ..self.clone()
        })
    }

    pub fn has_motion_layers(&self) -> bool {
        self.params.keys().any(|k| k.contains(".motion."))
    }

    pub fn motion_param_names(&self) -> Vec<String> {
        self.params.keys().filter(|k| k.contains(".motion.")).cloned().collect()
    }

    /// Layers that accept a low-rank delta, with `(d_in, d_out)`.
    pub fn lora_targets(&self) -> Vec<(String, usize, usize)> {
        (1..=LEVELS)
            .flat_map(|l| {
                let c = self.config.channel_widths[l - 1];
                PROJECTIONS.iter().map(move |p| (format!("{}.attn.{p}", stage(l)), c, c))
            })
            .collect()
    }

    /// Content hash over every weight, in name order.
    pub fn weight_hash(&self) -> Result<String> {
        hash_arrays(&self.params)
    }

    /// Spatial size of each tap for an `h x w` latent.
    pub fn tap_sizes(&self, h: usize, w: usize) -> Result<[(usize, usize); LEVELS]> {
        let div = 1 << (LEVELS - 1);
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(shape(format!("latent {h}x{w} must be divisible by {div}")));
        }
        let mut out = [(0, 0); LEVELS];
        for (l, o) in out.iter_mut().enumerate() {
            *o = (h >> l, w >> l);
        }
        Ok(out)
    }

    /// `(N, H_l, W_l, d_l)` for every tap.
    pub fn tap_shapes(&self, n: usize, h: usize, w: usize) -> Result<Vec<[usize; 4]>> {
        Ok(self
            .tap_sizes(h, w)?
            .iter()
            .zip(self.config.channel_widths)
            .map(|(&(th, tw), c)| [n, th, tw, c])
            .collect())
    }

    pub fn predict_noise(
        &self,
        z_t: &Tensor,
        t: usize,
        text: &TextEmbedding,
        guidance: Option<&GuidanceStack>,
        lora: Option<&LoraSet>,
    ) -> Result<DenoiserOutput> {
        let (n, h, w, d) = z_t.dims4()?;
        if d != self.config.latent_channels {
            return Err(shape(format!(
                "latent has {d} channels, denoiser expects {}",
                self.config.latent_channels
            )));
        }
        let motion = self.config.motion_layers_enabled;
        if motion && n != self.config.temporal_window {
            return Err(shape(format!(
                "motion layers span {} frames, got {n}",
                self.config.temporal_window
            )));
        }
        if let Some(g) = guidance {
            g.validate(&self.tap_shapes(n, h, w)?)?;
        }
        if let Some(set) = lora {
            let targets = self.lora_targets();
            for (name, delta) in set {
                let Some((_, i, o)) = targets.iter().find(|(t, _, _)| t == name) else {
                    return Err(invalid(format!("`{name}` is not a lora attachment point")));
                };
                if (delta.d_in(), delta.d_out()) != (*i, *o) {
                    return Err(shape(format!("lora `{name}` has wrong dimensions")));
                }
            }
        }
        let ab = self.schedule.alpha_bar(t)?;
        if t == 0 {
            return Err(crate::Error::TimestepRange {
                t,
                min: 1,
                max: self.schedule.total_steps(),
            });
        }
        let z = z_t.to_dtype(self.dtype)?;
        let dev = z.device().clone();
        let temb = Tensor::from_vec(nn::sinusoidal(t as f64, self.config.time_dim), self.config.time_dim, &dev)?
            .to_dtype(self.dtype)?;
        let txt = text.pooled()?.to_dtype(self.dtype)?;

        let mut h_cur = nn::conv3x3(&z, self.p("unet.conv_in.weight"))?;
        let mut taps = Vec::with_capacity(LEVELS);
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 1..=LEVELS {
            let s = stage(l);
            if l > 1 {
                h_cur = nn::linear(&nn::avg_pool2(&h_cur)?, self.p(&format!("{s}.proj.weight")))?;
            }
            let cond = (nn::linear(&temb.unsqueeze(0)?, self.p(&format!("{s}.cond_time.weight")))?
                + nn::linear(&txt.unsqueeze(0)?, self.p(&format!("{s}.cond_text.weight")))?)?
                .squeeze(0)?;
            let inner = nn::gelu(&nn::rms_norm(&h_cur, NORM_EPS)?.broadcast_add(&cond)?)?;
            h_cur = (&h_cur + nn::conv3x3(&inner, self.p(&format!("{s}.conv.weight")))?)?;
            h_cur = (&h_cur + self.spatial_attention(&nn::rms_norm(&h_cur, NORM_EPS)?, &s, lora)?)?;
            if motion {
                h_cur = (&h_cur + self.temporal_attention(&nn::rms_norm(&h_cur, NORM_EPS)?, &s)?)?;
            }
            taps.push(h_cur.clone());
            if let Some(g) = guidance {
                h_cur = crate::guidance::inject_guidance(&h_cur, &g.levels()[l - 1], g.weight())?;
            }
            skips.push(h_cur.clone());
        }

        let mut dec = skips[LEVELS - 1].clone();
        for l in (1..LEVELS).rev() {
            let up = nn::linear(&nn::upsample2(&dec)?, self.p(&format!("unet.up.{l}.proj.weight")))?;
            dec = (up + &skips[l - 1])?;
            let inner = nn::gelu(&nn::rms_norm(&dec, NORM_EPS)?)?;
            dec = (&dec + nn::conv3x3(&inner, self.p(&format!("unet.up.{l}.conv.weight")))?)?;
        }
        let v = nn::linear(&dec, self.p("unet.conv_out.weight"))?;
        let eps_pred = (z.affine((1.0 - ab).sqrt(), 0.0)? + v.affine(ab.sqrt(), 0.0)?)?;
        Ok(DenoiserOutput {
            eps_pred,
            encoder_features: taps,
        })
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("denoiser weight `{name}` not built"))
    }

    fn project(&self, x: &Tensor, layer: &str, lora: Option<&LoraSet>) -> Result<Tensor> {
        let w = self.p(&format!("{layer}.weight"));
        match lora.and_then(|set| set.get(layer)) {
            Some(delta) => apply_lora(x, w, delta),
            None => nn::linear(x, w),
        }
    }

    fn spatial_attention(&self, x: &Tensor, s: &str, lora: Option<&LoraSet>) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let wh = self.config.attention_window.min(h);
        let ww = self.config.attention_window.min(w);
        if h % wh != 0 || w % ww != 0 {
            return Err(shape(format!("{h}x{w} map not divisible into {wh}x{ww} windows")));
        }
        let (nh, nw) = (h / wh, w / ww);
        let windows = x
            .reshape((n, nh, wh, nw, ww, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n * nh * nw, wh * ww, c))?;
        let a = format!("{s}.attn");
        let q = self.project(&windows, &format!("{a}.to_q"), lora)?;
        let k = self.project(&windows, &format!("{a}.to_k"), lora)?;
        let v = self.project(&windows, &format!("{a}.to_v"), lora)?;
        let o = self.project(&nn::attention(&q, &k, &v)?, &format!("{a}.to_out"), lora)?;
        Ok(o.reshape((n, nh, nw, wh, ww, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n, h, w, c))?)
    }

    fn temporal_attention(&self, x: &Tensor, s: &str) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        let m = format!("{s}.motion");
        let pos = self.p(&format!("{m}.pos")).narrow(0, 0, n)?;
        let seq = x
            .permute((1, 2, 0, 3))?
            .contiguous()?
            .reshape((h * w, n, c))?
            .broadcast_add(&pos)?;
        let q = nn::linear(&seq, self.p(&format!("{m}.to_q.weight")))?;
        let k = nn::linear(&seq, self.p(&format!("{m}.to_k.weight")))?;
        let v = nn::linear(&seq, self.p(&format!("{m}.to_v.weight")))?;
        let o = nn::linear(&nn::attention(&q, &k, &v)?, self.p(&format!("{m}.to_out.weight")))?;
        Ok(o.reshape((h, w, n, c))?.permute((2, 0, 1, 3))?.contiguous()?)
    }
}

fn init_weight(seed: u64, name: &str, dims: &[usize], gain: f64, dtype: DType) -> Result<Tensor> {
    let fan_in = *dims.last().unwrap_or(&1);
    let std = gain / (fan_in as f64).sqrt();
    let mut r = rng::stream(seed, name);
    rng::gaussian_tensor(&mut r, dims, std, dtype, &Device::Cpu)
}

/// Adds temporal self-attention after every stage. With
/// `motion_layers_enabled = false` the returned network stays frame-wise.
pub fn inflate_with_motion_layers(mut denoiser: Denoiser, config: &DenoiserConfig) -> Result<Denoiser> {
    config.validate()?;
    if config.channel_widths != denoiser.config.channel_widths {
        return Err(invalid("inflation config must keep the base channel widths"));
    }
    for l in 1..=LEVELS {
        let c = config.channel_widths[l - 1];
        let m = format!("{}.motion", stage(l));
        let mut specs = vec![(format!("{m}.pos"), vec![config.temporal_window, c], (c as f64).sqrt())];
        for p in PROJECTIONS {
            let gain = if p == "to_out" { 0.5 } else { 1.0 };
            specs.push((format!("{m}.{p}.weight"), vec![c, c], gain));
        }
        for (name, dims, gain) in specs {
            let w = init_weight(denoiser.seed, &name, &dims, gain, denoiser.dtype)?;
            denoiser.params.insert(name, w);
        }
    }
    denoiser.config.temporal_window = config.temporal_window;
    denoiser.config.motion_layers_enabled = config.motion_layers_enabled;
    denoiser.config.motion_layers_trainable = config.motion_layers_trainable;
    Ok(denoiser)
}

/// sha256 over `name || dtype || shape || little-endian data`, name order.
pub fn hash_arrays(arrays: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in arrays {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        h.update(crate::checkpoint::tensor_bytes(t)?);
    }
    Ok(hex::encode(h.finalize()))
}
