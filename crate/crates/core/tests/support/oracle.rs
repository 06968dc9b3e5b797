//! Brute-force reference implementations written independently of the
//! library code, plus the randomised equivalence runs built on them.

use maemi_core::anomaly::fuse_maps;
use maemi_core::dcebaseline::{subtraction_image, DceSeries, FilterOrder};
use maemi_core::evalmetrics::{auroc, average_precision};
use maemi_core::ndnum::{gemm, Tape, Tensor, Trans};
use maemi_core::volio::{min_filter, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 100;
pub const FLOAT_TOL: f64 = 1e-12;

/// Window minimum read straight off the definition: odd extents centred,
/// even extents reaching one further forward, borders clamped.
pub fn min_filter_naive(v: &Volume, k: [usize; 3]) -> Volume {
    let d = v.dims();
    let mut out = v.clone();
    for c in 0..v.channels() {
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let mut m = f64::INFINITY;
                    for dz in 0..k[2] {
                        for dy in 0..k[1] {
                            for dx in 0..k[0] {
                                let at = |p: usize, o: usize, kk: usize, n: usize| {
                                    let q = p as i64 + o as i64 - (kk as i64 - 1) / 2;
                                    q.clamp(0, n as i64 - 1) as usize
                                };
                                let s = v.get(c, at(x, dx, k[0], d[0]), at(y, dy, k[1], d[1]), at(z, dz, k[2], d[2]));
                                m = m.min(s);
                            }
                        }
                    }
                    out.set(c, x, y, z, m);
                }
            }
        }
    }
    out
}

pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Fraction of positive/negative pairs ordered correctly, ties worth ½.
pub fn auroc_pairwise(s: &[f64], l: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            pairs += 1.0;
            if s[i] > s[j] {
                wins += 1.0;
            } else if s[i] == s[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Precision and recall of `score ≥ t` at every distinct threshold `t`,
/// highest first, accumulated as recall increments times precision.
pub fn ap_threshold_sweep(s: &[f64], l: &[bool]) -> f64 {
    let positives = l.iter().filter(|&&v| v).count() as f64;
    let mut thresholds = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| l[i]).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// `min_filter(mean_k (pre - post_k)²)`, or with the filter moved onto
/// every term.
pub fn subtraction_naive(pre: &Volume, post: &[Volume], per_term: bool) -> Volume {
    let k = [3, 3, 2];
    let mut acc = Volume::zeros(1, pre.dims(), pre.spacing()).unwrap();
    for p in post {
        let mut t = pre.clone();
        for i in 0..t.voxels() {
            let d = pre.data()[i] - p.data()[i];
            t.data_mut()[i] = d * d;
        }
        if per_term {
            t = min_filter_naive(&t, k);
        }
        for i in 0..t.voxels() {
            acc.data_mut()[i] += t.data()[i];
        }
    }
    for v in acc.data_mut() {
        *v /= post.len() as f64;
    }
    if per_term {
        acc
    } else {
        min_filter_naive(&acc, k)
    }
}

pub fn fuse_naive(a: &Volume, b: &Volume) -> Volume {
    let mut m = a.clone();
    for i in 0..m.voxels() {
        m.data_mut()[i] = (a.data()[i] + b.data()[i]) / 2.0;
    }
    min_filter_naive(&m, [3, 3, 2])
}

pub fn random_volume(r: &mut ChaCha8Rng, channels: usize, dims: [usize; 3]) -> Volume {
    let n = channels * dims.iter().product::<usize>();
    Volume::new(channels, dims, [1.0; 3], (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Values drawn from a handful of levels so ties are common.
pub fn tied_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = r.random_range(2..8);
    (0..n).map(|_| r.random_range(0..levels) as f64 * 0.25).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Number of instances where the library and the oracle disagree beyond
/// `tol`, for each component.
pub struct Mismatches {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub worst: f64,
}

fn tally(name: &'static str, tol: f64, seed: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> Mismatches {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = one(&mut r);
        worst = worst.max(d);
        if d > tol {
            failures += 1;
        }
    }
    Mismatches { name, instances: INSTANCES, failures, worst }
}

fn small_dims(r: &mut ChaCha8Rng) -> [usize; 3] {
    [r.random_range(3..8), r.random_range(3..8), r.random_range(2..5)]
}

pub fn check_min_filter() -> Mismatches {
    tally("min_filter", 0.0, 1, |r| {
        let dims = small_dims(r);
        let k = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..3)];
        let channels = r.random_range(1..3);
        let v = random_volume(r, channels, dims);
        max_abs_diff(min_filter(&v, k).unwrap().data(), min_filter_naive(&v, k).data())
    })
}

pub fn check_matmul() -> Mismatches {
    tally("matmul", FLOAT_TOL, 2, |r| {
        let (m, k, n) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9));
        let a: Vec<f64> = (0..m * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let want = matmul_naive(&a, &b, m, k, n);
        let mut tape = Tape::new();
        let av = tape.leaf(&Tensor::new([m, k], a.clone()).unwrap());
        let bv = tape.leaf(&Tensor::new([k, n], b.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        let mut worst = max_abs_diff(tape.value(c), &want);
        // Same product from transposed buffers.
        let at: Vec<f64> = (0..m * k).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..k * n).map(|i| b[(i % k) * n + i / k]).collect();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &at, Trans::Yes, &bt, Trans::Yes, &mut out, 0.0);
        worst = worst.max(max_abs_diff(&out, &want));
        worst
    })
}

pub fn check_subtraction() -> Mismatches {
    tally("subtraction_image", FLOAT_TOL, 3, |r| {
        let dims = small_dims(r);
        let pre = random_volume(r, 1, dims);
        let post: Vec<Volume> = (0..r.random_range(1..5)).map(|_| random_volume(r, 1, dims)).collect();
        let series = DceSeries::new(pre.clone(), post.clone()).unwrap();
        let mut worst: f64 = 0.0;
        for (order, per_term) in [(FilterOrder::FilterLast, false), (FilterOrder::PerTerm, true)] {
            let got = subtraction_image(&series, order).unwrap();
            worst = worst.max(max_abs_diff(got.data(), subtraction_naive(&pre, &post, per_term).data()));
        }
        worst
    })
}

pub fn check_fuse_maps() -> Mismatches {
    tally("fuse_maps", 0.0, 4, |r| {
        let dims = small_dims(r);
        let (a, b) = (random_volume(r, 1, dims), random_volume(r, 1, dims));
        max_abs_diff(fuse_maps(&a, &b).unwrap().data(), fuse_naive(&a, &b).data())
    })
}

fn labelled(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..60);
    let mut l: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
    l[0] = true;
    l[1] = false;
    let s = if r.random_bool(0.5) {
        tied_scores(r, n)
    } else {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    (s, l)
}

pub fn check_auroc() -> Mismatches {
    tally("auroc", FLOAT_TOL, 5, |r| {
        let (s, l) = labelled(r);
        (auroc(&s, &l).unwrap() - auroc_pairwise(&s, &l)).abs()
    })
}

pub fn check_average_precision() -> Mismatches {
    tally("average_precision", FLOAT_TOL, 6, |r| {
        let (s, l) = labelled(r);
        (average_precision(&s, &l).unwrap() - ap_threshold_sweep(&s, &l)).abs()
    })
}

pub fn suite() -> Vec<Mismatches> {
    vec![
        check_min_filter(),
        check_matmul(),
        check_subtraction(),
        check_fuse_maps(),
        check_auroc(),
        check_average_precision(),
    ]
}
