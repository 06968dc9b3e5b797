//! Worked examples and statistical contracts for the numeric core, volume
//! I/O and patch geometry.

use std::collections::HashSet;

use maemi_core::ndnum::{adam_step, AdamState, Tape, Tensor};
use maemi_core::patchgrid::{random_crop, sample_mask, sincos_pos_embed_3d, PatchSpec};
use maemi_core::volio::{decode_mvol, encode_mvol, min_filter, normalize, Volume, MIN_KERNEL};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn chi2_upper_1pct(dof: usize) -> f64 {
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.99)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let id = tape.constant([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let m: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    let mv = tape.constant([3, 2], m.clone()).unwrap();
    let p = tape.matmul(id, mv).unwrap();
    assert_eq!(tape.value(p), &m[..]);

    let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
    let b = tape.leaf(&t(&[2, 1], &[5.0, 6.0]).with_grad());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[17.0, 39.0]);
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    // d sum(AB)/dA = 1·Bᵀ, d sum(AB)/dB = Aᵀ·1
    assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
    assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant([2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant([2], vec![0.0, 0.0]).unwrap();
    let flat = tape.constant([1, 2], vec![4.0, 4.0]).unwrap();
    let y = tape.layer_norm(flat, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);
    let x = tape.constant([1, 2], vec![1.0, 3.0]).unwrap();
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y), &[-1.0, 1.0]);
}

#[test]
fn attention_examples() {
    let mut tape = Tape::new();
    let scale = 0.5;
    let q = tape.constant([2, 1, 4], vec![0.3, -1.0, 2.0, 0.1, 1.0, 1.0, -4.0, 0.0]).unwrap();
    let v = tape.constant([2, 1, 4], vec![7.0, -2.0, 0.5, 3.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let o = tape.softmax_attention(q, q, v, scale).unwrap();
    assert_eq!(tape.value(o), tape.value(v));

    let uniform = tape.constant([1, 3, 4], vec![0.2; 12]).unwrap();
    let rows: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let v = tape.constant([1, 3, 4], rows.clone()).unwrap();
    let o = tape.softmax_attention(uniform, uniform, v, scale).unwrap();
    let mean: Vec<f64> = (0..4).map(|j| (rows[j] + rows[4 + j] + rows[8 + j]) / 3.0).collect();
    for row in tape.value(o).chunks(4) {
        for (a, b) in row.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let (h, n, dh) = (3, 7, 4);
    let mut tape = Tape::new();
    let mut rand = |tape: &mut Tape| {
        tape.constant([h, n, dh], (0..h * n * dh).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap()
    };
    let (q, k, v) = (rand(&mut tape), rand(&mut tape), rand(&mut tape));
    let o = tape.softmax_attention(q, k, v, 0.5).unwrap();
    let w = tape.attention_weights(o).unwrap();
    assert_eq!(w.len(), h * n * n);
    for row in w.chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[0.5, -1.0, 9.0]).with_grad());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn adam_converges_on_a_quadratic() {
    let mut params = vec![Tensor::scalar(0.0).with_grad()];
    let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8, 0.0);
    for _ in 0..200 {
        let w = params[0].data()[0];
        params[0].set_grad(vec![2.0 * (w - 3.0)]).unwrap();
        adam_step(&mut params, &mut state, 0.1).unwrap();
    }
    let w = params[0].data()[0];
    assert!((w - 3.0).abs() < 1e-2, "{w}");
}

#[test]
fn mvol_round_trips_awkward_values() {
    let specials = [
        0.0,
        -0.0,
        f32::MIN_POSITIVE as f64,
        f32::from_bits(1) as f64,
        -(f32::from_bits(0x007f_ffff) as f64),
        f32::MAX as f64,
        f32::MIN as f64,
        1.0e30f32 as f64,
        -7.5e-39f32 as f64,
    ];
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let dims = [5, 4, 3];
    let n = 2 * 60;
    let data: Vec<f64> = (0..n)
        .map(|i| match i % 3 {
            0 => specials[r.random_range(0..specials.len())],
            1 => f32::from_bits(r.random::<u32>() & 0x7f7f_ffff) as f64,
            _ => r.random_range(-1e6f32..1e6) as f64,
        })
        .collect();
    let v = Volume::new(2, dims, [0.75, 0.5, 2.5], data).unwrap();
    let back = decode_mvol(&encode_mvol(&v).unwrap()).unwrap();
    assert_eq!(back.dims(), dims);
    assert_eq!(back.spacing(), v.spacing());
    for (a, b) in v.data().iter().zip(back.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn mask_partition_over_a_thousand_triples() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let n = r.random_range(1..3000);
        let ratio = r.random_range(0.0..0.999);
        let plan = sample_mask(n, ratio, r.random()).unwrap();
        let mut seen = vec![false; n];
        for &i in plan.kept.iter().chain(&plan.masked) {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert!(!plan.kept.is_empty());
    }
}

fn mask_counts(n: usize, ratio: f64, seeds: u64) -> (Vec<usize>, f64) {
    let p = (n as f64 * ratio).round() / n as f64;
    let mut counts = vec![0usize; n];
    for seed in 0..seeds {
        for &i in &sample_mask(n, ratio, seed).unwrap().masked {
            counts[i] += 1;
        }
    }
    (counts, p)
}

#[test]
fn every_token_is_masked_at_the_target_rate() {
    let seeds = 40000;
    let (counts, p) = mask_counts(20, 0.9, seeds);
    // Each plan is an independent draw, so a token's count is binomial.
    let sigma = (seeds as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let z = (c as f64 - seeds as f64 * p) / sigma;
        assert!(z.abs() <= 3.0, "token {i}: count {c}, z {z}");
    }
}

#[test]
fn mask_counts_pass_a_goodness_of_fit_test() {
    let seeds = 4000;
    let (counts, p) = mask_counts(100, 0.9, seeds);
    let expected = seeds as f64 * p;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Counts sum to a constant, so the statistic scaled by 1/(1-p) is
    // chi-square with n-1 degrees of freedom.
    let stat = chi2 / (1.0 - p);
    let critical = chi2_upper_1pct(counts.len() - 1);
    assert!(stat < critical, "{stat} vs {critical}");
}

#[test]
fn random_crop_origins_are_uniform() {
    let spec = PatchSpec { mri_patch: [4, 4, 2], vit_patch: [2, 2, 1], channels: 1 };
    let dims = [8, 8, 4];
    let v = Volume::zeros(1, dims, [1.0; 3]).unwrap();
    let span = [5, 5, 3];
    let cells = span.iter().product::<usize>();
    let mut hist = vec![0usize; cells];
    let draws = 1000;
    for seed in 0..draws {
        let (patch, o) = random_crop(&v, &spec, seed).unwrap();
        assert_eq!(patch.dims(), spec.mri_patch);
        assert!((0..3).all(|a| o[a] + spec.mri_patch[a] <= dims[a]), "{o:?}");
        hist[o[0] + span[0] * (o[1] + span[1] * o[2])] += 1;
    }
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = hist.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    let critical = chi2_upper_1pct(cells - 1);
    assert!(chi2 < critical, "chi2 {chi2} critical {critical}");
}

#[test]
fn pos_embed_is_injective_on_the_default_grid() {
    let grid = PatchSpec::paper().grid_shape();
    assert_eq!(grid, [30, 21, 4]);
    for d in [6, 12, 24, 48] {
        let e = sincos_pos_embed_3d(grid, d).unwrap();
        let rows: HashSet<Vec<u64>> = e.chunks(d).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(rows.len(), grid.iter().product::<usize>(), "d {d}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn min_filter_is_decreasing_and_idempotent_bounded(
        dims in (3usize..9, 3usize..9, 2usize..5),
        seed in any::<u64>(),
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>();
        let v = Volume::new(1, dims, [1.0; 3], (0..n).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap();
        let once = min_filter(&v, MIN_KERNEL).unwrap();
        let twice = min_filter(&once, MIN_KERNEL).unwrap();
        for i in 0..n {
            prop_assert!(once.data()[i] <= v.data()[i]);
            prop_assert!(twice.data()[i] <= once.data()[i]);
        }
    }

    #[test]
    fn normalize_hits_target_statistics(
        channels in 1usize..4,
        offset in -1e3f64..1e3,
        spread in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        let dims = [6, 5, 3];
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = channels * dims.iter().product::<usize>();
        let data = (0..n).map(|_| offset + spread * r.random_range(-1.0..1.0)).collect();
        let v = normalize(&Volume::new(channels, dims, [1.0; 3], data).unwrap(), 0.5, 0.25).unwrap();
        for c in 0..channels {
            let (mean, std) = v.channel_stats(c);
            prop_assert!((mean - 0.5).abs() < 1e-9, "{mean}");
            prop_assert!((std - 0.25).abs() < 1e-9, "{std}");
        }
    }
}
