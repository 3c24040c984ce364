//! Procedural test assets: a textured square sliding over a static noise
//! background, and a handful of reference images of a second subject.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::FrameVideo;
use crate::error::invalid;
use crate::semantic::ForegroundMask;
use crate::{rng, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareVideoSpec {
    pub frames: usize,
    pub size: usize,
    pub square: usize,
    /// Horizontal pixels per frame.
    pub speed: usize,
    pub top: usize,
    pub left: usize,
    pub seed: u64,
}

impl Default for SquareVideoSpec {
    fn default() -> Self {
        Self {
            frames: 16,
            size: 64,
            square: 24,
            speed: 2,
            top: 20,
            left: 4,
            seed: 0,
        }
    }
}

impl SquareVideoSpec {
    /// Same scene with every length multiplied by `k`.
    pub fn scaled(self, k: usize) -> Self {
        Self {
            size: self.size * k,
            square: self.square * k,
            speed: self.speed * k,
            top: self.top * k,
            left: self.left * k,
            ..self
        }
    }
}

const SUBJECT: [[f32; 3]; 2] = [[0.92, 0.35, 0.18], [0.70, 0.16, 0.10]];
const REFERENCE: [[f32; 3]; 2] = [[0.20, 0.45, 0.90], [0.10, 0.25, 0.65]];

fn checker(u: usize, v: usize, cell: usize, colors: &[[f32; 3]; 2]) -> [f32; 3] {
    colors[((u / cell) + (v / cell)) % 2]
}

/// The moving-square video and its pixel-resolution ground-truth mask.
pub fn moving_square(spec: &SquareVideoSpec) -> Result<(FrameVideo, ForegroundMask)> {
    let end = spec.left + spec.speed * spec.frames.saturating_sub(1) + spec.square;
    if spec.frames == 0 || end > spec.size || spec.top + spec.square > spec.size {
        return Err(invalid("square leaves the frame"));
    }
    let s = spec.size;
    let mut r = rng::stream(spec.seed, "synth.background");
    let background: Vec<f32> = (0..s * s * 3).map(|_| 0.4 + 0.2 * r.random::<f32>()).collect();
    let cell = (spec.square / 6).max(1);
    let mut data = Vec::with_capacity(spec.frames * s * s * 3);
    let mut mask = Vec::with_capacity(spec.frames * s * s);
    for f in 0..spec.frames {
        let x0 = spec.left + spec.speed * f;
        for y in 0..s {
            for x in 0..s {
                let inside = (spec.top..spec.top + spec.square).contains(&y) && (x0..x0 + spec.square).contains(&x);
                mask.push(u8::from(inside));
                if inside {
                    data.extend(checker(x - x0, y - spec.top, cell, &SUBJECT));
                } else {
                    data.extend_from_slice(&background[(y * s + x) * 3..(y * s + x) * 3 + 3]);
                }
            }
        }
    }
    Ok((FrameVideo::new(spec.frames, s, s, data)?, ForegroundMask::new(spec.frames, s, s, mask)?))
}

/// `count` stills of a blue striped subject at different places on a pale
/// background, with their masks.
pub fn reference_images(count: usize, size: usize, seed: u64) -> Result<(FrameVideo, ForegroundMask)> {
    if count == 0 || size < 16 {
        return Err(invalid("need at least one reference of at least 16 px"));
    }
    let mut r = rng::stream(seed, "synth.references");
    let mut data = Vec::with_capacity(count * size * size * 3);
    let mut mask = Vec::with_capacity(count * size * size);
    for _ in 0..count {
        let side = size * 3 / 8 + r.random_range(0..=size / 8);
        let top = r.random_range(0..=size - side);
        let left = r.random_range(0..=size - side);
        let cell = (side / 6).max(1);
        for y in 0..size {
            for x in 0..size {
                let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                mask.push(u8::from(inside));
                if inside {
                    data.extend(checker(0, y - top, cell, &REFERENCE));
                } else {
                    let g = 0.75 + 0.1 * r.random::<f32>();
                    data.extend([g, g, g * 0.95]);
                }
            }
        }
    }
    Ok((FrameVideo::new(count, size, size, data)?, ForegroundMask::new(count, size, size, mask)?))
}
