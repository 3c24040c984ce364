use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use vidguide_core::checkpoint::Checkpoint;
use vidguide_core::config::ScheduleConfig;
use vidguide_core::guidance::inject_guidance;
use vidguide_core::inference::{blend_latents, ddim_timesteps};
use vidguide_core::metrics::cosine;
use vidguide_core::motion::masked_noise_loss;
use vidguide_core::schedule::{add_noise, ddim_denoise_step, ddim_invert_step, NoiseSchedule};
use vidguide_core::semantic::ForegroundMask;
use vidguide_core::RunConfig;

fn schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn timestep_pair() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=1000).prop_flat_map(|t| (0..t).prop_map(move |p| (p, t)))
}

#[test]
fn cumulative_alphas_decrease_strictly_inside_unit_interval() {
    let s = schedule();
    let ab = s.alpha_bars();
    assert_eq!(ab.len(), 1000);
    assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
    assert!(ab.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
}

#[test]
fn edit_timesteps_are_evenly_strided() {
    let ts = ddim_timesteps(&schedule(), 50).unwrap();
    assert_eq!(ts.len(), 51);
    assert_eq!(ts[0], 0);
    assert_eq!(*ts.last().unwrap(), 1000);
    assert!(ts.windows(2).all(|w| w[1] - w[0] == 20));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn denoise_then_invert_returns_the_start(
        (t_prev, t) in timestep_pair(),
        z in prop::collection::vec(-3.0f64..3.0, 8),
        eps in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let s = schedule();
        let zt = tensor(z.clone(), &[1, 2, 2, 2]);
        let e = tensor(eps, &[1, 2, 2, 2]);
        let down = ddim_denoise_step(&zt, &e, t, t_prev, &s).unwrap();
        let up = ddim_invert_step(&down, &e, t_prev, t, &s).unwrap();
        for (a, b) in values(&up).iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn denoising_a_perfect_prediction_recovers_the_clean_latent(
        t in 1usize..=1000,
        z in prop::collection::vec(-2.0f64..2.0, 8),
        eps in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let s = schedule();
        let z0 = tensor(z.clone(), &[2, 2, 2, 1]);
        let e = tensor(eps, &[2, 2, 2, 1]);
        let zt = add_noise(&z0, &e, t, &s).unwrap();
        let back = ddim_denoise_step(&zt, &e, t, 0, &s).unwrap();
        for (a, b) in values(&back).iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn blending_takes_edit_inside_and_source_outside(
        bits in prop::collection::vec(any::<bool>(), 6),
        edit in prop::collection::vec(-5.0f64..5.0, 18),
        src in prop::collection::vec(-5.0f64..5.0, 18),
    ) {
        let m = tensor(bits.iter().map(|&b| f64::from(u8::from(b))).collect(), &[1, 2, 3, 1]);
        let out = values(&blend_latents(&tensor(edit.clone(), &[1, 2, 3, 3]), &tensor(src.clone(), &[1, 2, 3, 3]), &m).unwrap());
        for (i, v) in out.iter().enumerate() {
            let want = if bits[i / 3] { edit[i] } else { src[i] };
            prop_assert_eq!(v.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn masked_loss_is_mean_of_kept_squares(
        bits in prop::collection::vec(any::<bool>(), 8),
        a in prop::collection::vec(-4.0f64..4.0, 16),
        b in prop::collection::vec(-4.0f64..4.0, 16),
    ) {
        prop_assume!(bits.iter().any(|&x| x));
        let m = tensor(bits.iter().map(|&x| f64::from(u8::from(x))).collect(), &[2, 2, 2, 1]);
        let loss = masked_noise_loss(&tensor(a.clone(), &[2, 2, 2, 2]), &tensor(b.clone(), &[2, 2, 2, 2]), &m)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for i in 0..16 {
            if bits[i / 2] {
                sum += (a[i] - b[i]).powi(2);
                n += 1.0;
            }
        }
        prop_assert!((loss - sum / n).abs() <= 1e-12 * (1.0 + sum));
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn injection_is_affine_in_weight(
        ft in prop::collection::vec(-3.0f64..3.0, 8),
        fs in prop::collection::vec(-3.0f64..3.0, 8),
        lambda in 0.0f64..4.0,
    ) {
        let out = values(&inject_guidance(&tensor(ft.clone(), &[1, 2, 2, 2]), &tensor(fs.clone(), &[1, 2, 2, 2]), lambda).unwrap());
        for i in 0..8 {
            prop_assert!((out[i] - (ft[i] + lambda * fs[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_and_empty_masks_survive_resampling(h in 1usize..12, w in 1usize..12, th in 1usize..40, tw in 1usize..40) {
        for value in [false, true] {
            let m = ForegroundMask::filled(2, h, w, value).resample(th, tw).unwrap();
            prop_assert_eq!((m.frame_count(), m.height(), m.width()), (2, th, tw));
            prop_assert_eq!(m.count(), if value { 2 * th * tw } else { 0 });
        }
    }

    #[test]
    fn cosine_ignores_positive_scale(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((cosine(&a, &b) - cosine(&scaled, &b)).abs() <= 1e-12);
        prop_assert!(cosine(&a, &b).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn config_survives_toml(seed in 0u64..(1 << 62), lambda in 0.0f64..3.0, steps in 1usize..100, lr in 1e-6f64..1e-2) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.edit.lambda = lambda;
        cfg.edit.num_steps = steps;
        cfg.motion_train.learning_rate = lr;
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text, std::path::Path::new(".")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bitwise(
        a in prop::collection::vec(-1e6f32..1e6, 1..40),
        b in prop::collection::vec(-1e6f64..1e6, 1..40),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut arrays = BTreeMap::new();
        let na = a.len();
        arrays.insert("x.a".to_string(), Tensor::from_vec(a, na, &Device::Cpu).unwrap());
        let nb = b.len();
        arrays.insert("x.b".to_string(), Tensor::from_vec(b, (1, nb), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap());
        let ck = Checkpoint::new(arrays);
        ck.save(dir.path(), "prop").unwrap();
        let back = Checkpoint::load(dir.path(), "prop").unwrap();
        prop_assert_eq!(back.manifest("prop").unwrap(), ck.manifest("prop").unwrap());
        for (k, t) in &ck.arrays {
            prop_assert!(vidguide_core::nn::bit_identical(t, &back.arrays[k]).unwrap());
        }
    }
}
