//! Low-rank weight deltas `W + scale * up @ down`.
//!
//! `down` is `r x d_in`, `up` is `d_out x r`. `up` starts at zero so a fresh
//! delta changes nothing.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, shape};
use crate::{nn, rng, Result};

#[derive(Debug, Clone)]
pub struct LoraDelta {
    down: Tensor,
    up: Tensor,
    rank: usize,
    scale: f64,
}

/// Adapted layer name (e.g. `unet.down.1.attn.to_q`) to its delta.
pub type LoraSet = BTreeMap<String, LoraDelta>;

impl LoraDelta {
    pub fn from_parts(down: Tensor, up: Tensor, scale: f64) -> Result<Self> {
        let (rank, _) = down.dims2()?;
        let (_, r_up) = up.dims2()?;
        if rank == 0 || r_up != rank {
            return Err(shape(format!(
                "lora factors disagree on rank: down {:?}, up {:?}",
                down.dims(),
                up.dims()
            )));
        }
        Ok(Self {
            down,
            up,
            rank,
            scale,
        })
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn d_in(&self) -> usize {
        self.down.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.dims()[0]
    }

    pub fn negated(&self) -> Result<Self> {
        Ok(Self {
            up: self.up.neg()?,
            ..self.clone()
        })
    }

    /// Dense `scale * up @ down`, shape `d_out x d_in`.
    pub fn dense(&self) -> Result<Tensor> {
        Ok(self.up.matmul(&self.down)?.affine(self.scale, 0.0)?)
    }

    fn check_base(&self, w: &Tensor) -> Result<()> {
        let (o, i) = w.dims2()?;
        if (o, i) != (self.d_out(), self.d_in()) {
            return Err(shape(format!(
                "base weight {o}x{i} does not match lora {}x{}",
                self.d_out(),
                self.d_in()
            )));
        }
        Ok(())
    }
}

/// Fresh delta: `down ~ N(0, 1/d_in)`, `up = 0`.
pub fn init_lora(
    d_in: usize,
    d_out: usize,
    rank: usize,
    scale: f64,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<LoraDelta> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(invalid(format!(
            "lora rank {rank} outside 1..={}",
            d_in.min(d_out)
        )));
    }
    let mut r = rng::stream(seed, "lora-down");
    let down = rng::gaussian_tensor(&mut r, &[rank, d_in], 1.0 / (d_in as f64).sqrt(), dtype, device)?;
    let up = Tensor::zeros((d_out, rank), dtype, device)?;
    LoraDelta::from_parts(down, up, scale)
}

/// `x @ W^T + scale * (x @ down^T) @ up^T` over the last dim of `x`.
/// With `W` stored `(d_out, d_in)` this is `W x + scale * up (down x)` per vector.
pub fn apply_lora(x: &Tensor, w: &Tensor, delta: &LoraDelta) -> Result<Tensor> {
    delta.check_base(w)?;
    let base = nn::linear(x, w)?;
    let low = nn::linear(&nn::linear(x, &delta.down)?, &delta.up)?;
    Ok((base + low.affine(delta.scale, 0.0)?)?)
}

pub fn merge_lora(w: &Tensor, delta: &LoraDelta) -> Result<Tensor> {
    delta.check_base(w)?;
    Ok((w + delta.dense()?)?)
}

/// Checkpoint entries `<layer>.lora.down` / `<layer>.lora.up`.
pub fn lora_set_to_arrays(set: &LoraSet) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (layer, d) in set {
        out.insert(format!("{layer}.lora.down"), d.down.clone());
        out.insert(format!("{layer}.lora.up"), d.up.clone());
    }
    out
}

pub fn lora_set_from_arrays(arrays: &BTreeMap<String, Tensor>, scale: f64) -> Result<LoraSet> {
    let mut set = LoraSet::new();
    for (name, down) in arrays {
        let Some(layer) = name.strip_suffix(".lora.down") else {
            if !name.ends_with(".lora.up") {
                return Err(invalid(format!("unexpected array `{name}` in lora checkpoint")));
            }
            continue;
        };
        let up = arrays
            .get(&format!("{layer}.lora.up"))
            .ok_or_else(|| invalid(format!("`{layer}.lora.up` missing")))?;
        set.insert(layer.to_string(), LoraDelta::from_parts(down.clone(), up.clone(), scale)?);
    }
    for name in arrays.keys() {
        if let Some(layer) = name.strip_suffix(".lora.up") {
            if !set.contains_key(layer) {
                return Err(invalid(format!("`{layer}.lora.down` missing")));
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bit_identical, relative_l2};
    use proptest::prelude::*;

    fn t2(v: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::from_slice(v, (r, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn fresh_delta_is_invisible() {
        let mut r = rng::stream(5, "t");
        let w = rng::gaussian_tensor(&mut r, &[6, 5], 1.0, DType::F32, &Device::Cpu).unwrap();
        let x = rng::gaussian_tensor(&mut r, &[3, 5], 1.0, DType::F32, &Device::Cpu).unwrap();
        let d = init_lora(5, 6, 3, 1.0, 9, DType::F32, &Device::Cpu).unwrap();
        let adapted = apply_lora(&x, &w, &d).unwrap();
        assert!(bit_identical(&adapted, &nn::linear(&x, &w).unwrap()).unwrap());
        assert!(bit_identical(&merge_lora(&w, &d).unwrap(), &w).unwrap());
    }

    #[test]
    fn init_is_seeded_and_rank_checked() {
        let a = init_lora(8, 4, 2, 1.0, 1, DType::F64, &Device::Cpu).unwrap();
        let b = init_lora(8, 4, 2, 1.0, 1, DType::F64, &Device::Cpu).unwrap();
        assert!(bit_identical(a.down(), b.down()).unwrap());
        assert!(init_lora(8, 4, 5, 1.0, 1, DType::F64, &Device::Cpu).is_err());
        assert!(init_lora(8, 4, 0, 1.0, 1, DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn hand_computed_rank_one() {
        let w = t2(&[0.0; 4], 2, 2);
        let d = LoraDelta::from_parts(t2(&[1.0, 0.0], 1, 2), t2(&[1.0, 0.0], 2, 1), 1.0).unwrap();
        let x = t2(&[3.0, 5.0], 1, 2);
        let y = apply_lora(&x, &w, &d).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(y, vec![vec![3.0, 0.0]]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let d = init_lora(4, 4, 1, 1.0, 0, DType::F64, &Device::Cpu).unwrap();
        let w = t2(&[0.0; 6], 2, 3);
        assert!(merge_lora(&w, &d).is_err());
        assert!(apply_lora(&t2(&[0.0; 3], 1, 3), &w, &d).is_err());
    }

    #[test]
    fn delta_rank_bounded_by_r() {
        // singular-value counting via nalgebra on the dense delta
        let mut r = rng::stream(2, "rank");
        for rank in 1..=3 {
            let down = rng::gaussian_tensor(&mut r, &[rank, 7], 1.0, DType::F64, &Device::Cpu).unwrap();
            let up = rng::gaussian_tensor(&mut r, &[6, rank], 1.0, DType::F64, &Device::Cpu).unwrap();
            let d = LoraDelta::from_parts(down, up, 0.5).unwrap();
            let dense = d.dense().unwrap().to_vec2::<f64>().unwrap();
            let m = nalgebra::DMatrix::from_fn(6, 7, |i, j| dense[i][j]);
            let sv = m.singular_values();
            let count = sv.iter().filter(|s| **s > 1e-9 * sv[0]).count();
            assert_eq!(count, rank);
        }
    }

    #[test]
    fn arrays_round_trip() {
        let mut set = LoraSet::new();
        set.insert("a.to_q".into(), init_lora(4, 4, 2, 1.0, 0, DType::F32, &Device::Cpu).unwrap());
        let arrays = lora_set_to_arrays(&set);
        assert!(arrays.contains_key("a.to_q.lora.down") && arrays.contains_key("a.to_q.lora.up"));
        let back = lora_set_from_arrays(&arrays, 1.0).unwrap();
        assert!(bit_identical(back["a.to_q"].down(), set["a.to_q"].down()).unwrap());
        let mut broken = arrays.clone();
        broken.remove("a.to_q.lora.down");
        assert!(lora_set_from_arrays(&broken, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn runtime_matches_merged(seed in any::<u64>(), d_in in 1usize..12, d_out in 1usize..12, scale in 0.1f64..4.0) {
            let rank = 1 + (seed as usize % d_in.min(d_out));
            let mut r = rng::stream(seed, "prop-lora");
            let w = rng::gaussian_tensor(&mut r, &[d_out, d_in], 1.0, DType::F64, &Device::Cpu).unwrap();
            let down = rng::gaussian_tensor(&mut r, &[rank, d_in], 1.0, DType::F64, &Device::Cpu).unwrap();
            let up = rng::gaussian_tensor(&mut r, &[d_out, rank], 1.0, DType::F64, &Device::Cpu).unwrap();
            let x = rng::gaussian_tensor(&mut r, &[2, d_in], 1.0, DType::F64, &Device::Cpu).unwrap();
            let d = LoraDelta::from_parts(down, up, scale).unwrap();
            let runtime = apply_lora(&x, &w, &d).unwrap();
            let merged = nn::linear(&x, &merge_lora(&w, &d).unwrap()).unwrap();
            prop_assert!(relative_l2(&runtime, &merged).unwrap() < 1e-6);
            let undone = merge_lora(&merge_lora(&w, &d).unwrap(), &d.negated().unwrap()).unwrap();
            prop_assert!(relative_l2(&undone, &w).unwrap() < 1e-6);
        }
    }
}
