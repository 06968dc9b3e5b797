//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run.

use maemi_core::mae3d::{LossScope, MaeConfig, MaeModel};
use maemi_core::ndnum::{Tape, Tensor, Var};
use maemi_core::patchgrid::{sample_mask, MaskPlan, PatchSpec, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five-point central difference `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`.
const STEP: f64 = 1e-4;
const STENCIL: [(f64, f64); 4] = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];
pub const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Check d/d(inputs) of `sum(w ⊙ f(inputs))` for a random weight tensor `w`.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        tape.set_check_finite(true);
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| {
                if grad {
                    tape.leaf(&t.clone().with_grad())
                } else {
                    tape.constant(t.shape().to_vec(), t.data().to_vec()).unwrap()
                }
            })
            .collect();
        let y = f(&mut tape, &vars);
        let shape = tape.shape(y).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut wr, &shape);
        let w = tape.constant(shape, w.data().to_vec()).unwrap();
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let value = tape.item(loss);
        if !grad {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(ins)
            .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
            .collect();
        (value, g)
    };
    let (_, grads) = eval(&inputs, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut n = 0.0;
            for (k, w) in STENCIL {
                let mut x = inputs.clone();
                x[i].data_mut()[j] += k * STEP;
                n += w * eval(&x, false).0;
            }
            let n = n / (12.0 * STEP);
            worst = worst.max(rel_err(grads[i][j], n));
        }
    }
    worst
}

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

pub fn matmul_and_bias() -> f64 {
    let mut r = rng();
    check(vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 5]), random(&mut r, &[5])], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        t.add_bias(y, v[2]).unwrap()
    })
}

pub fn elementwise_ops() -> f64 {
    let mut r = rng();
    let ins = vec![random(&mut r, &[4, 3]), random(&mut r, &[4, 3])];
    check(ins, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(a, v[1]).unwrap();
        let m = t.mul(s, v[1]).unwrap();
        t.scale(m, -1.7).unwrap()
    })
}

pub fn reductions() -> f64 {
    let mut r = rng();
    check(vec![random(&mut r, &[5, 2])], |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        let m = t.mean(sq).unwrap();
        let s = t.sum(v[0]).unwrap();
        t.add(m, s).unwrap()
    })
}

pub fn gelu() -> f64 {
    let mut r = rng();
    check(vec![random(&mut r, &[6, 4]).scaled(3.0)], |t, v| t.gelu(v[0]).unwrap())
}

pub fn layer_norm() -> f64 {
    let mut r = rng();
    check(
        vec![random(&mut r, &[4, 6]).scaled(2.0), random(&mut r, &[6]), random(&mut r, &[6])],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(),
    )
}

pub fn heads_and_attention() -> f64 {
    let mut r = rng();
    let ins = vec![
        random(&mut r, &[5, 6]),
        random(&mut r, &[5, 6]),
        random(&mut r, &[5, 6]),
    ];
    check(ins, |t, v| {
        let q = t.split_heads(v[0], 2).unwrap();
        let k = t.split_heads(v[1], 2).unwrap();
        let vv = t.split_heads(v[2], 2).unwrap();
        let a = t.softmax_attention(q, k, vv, 1.0 / 3f64.sqrt()).unwrap();
        t.merge_heads(a).unwrap()
    })
}

pub fn row_plumbing() -> f64 {
    let mut r = rng();
    let ins = vec![random(&mut r, &[3, 4]), random(&mut r, &[4])];
    check(ins, |t, v| {
        let b = t.broadcast_rows(v[1], 2).unwrap();
        let c = t.concat_rows(v[0], b).unwrap();
        t.gather_rows(c, &[4, 0, 0, 2, 3, 1]).unwrap()
    })
}

trait Scaled {
    fn scaled(self, s: f64) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= s);
        self
    }
}

/// Desk widths and depths on a small patch so every parameter can be probed.
fn grad_model(scope: LossScope) -> (MaeModel, TokenGrid, MaskPlan) {
    let mut cfg = MaeConfig::desk();
    cfg.spec = PatchSpec {
        mri_patch: [6, 6, 4],
        vit_patch: [3, 3, 2],
        channels: 2,
    };
    cfg.init_std = 0.3;
    cfg.loss_scope = scope;
    let model = MaeModel::new(cfg, 5).unwrap();
    let spec = model.spec().clone();
    let mut r = rng();
    let grid = TokenGrid {
        tokens: (0..spec.token_count() * spec.token_dim())
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
        grid_shape: spec.grid_shape(),
        token_dim: spec.token_dim(),
    };
    let plan = sample_mask(spec.token_count(), 0.5, 3).unwrap();
    (model, grid, plan)
}

pub fn full_model_error(scope: LossScope) -> f64 {
    let (mut model, grid, plan) = grad_model(scope);
    let (_, grads) = model.loss_and_grad(&grid, &plan).unwrap();
    let flat_grad: Vec<f64> = grads.into_iter().flatten().collect();
    let base = model.flat_params();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        let mut n = 0.0;
        for (k, w) in STENCIL {
            p[i] = base[i] + k * STEP;
            model.set_flat_params(&p).unwrap();
            n += w * model.loss(&grid, &plan).unwrap();
        }
        let n = n / (12.0 * STEP);
        worst = worst.max(rel_err(flat_grad[i], n));
    }
    worst
}


/// Worst relative error of every op check and both full-model checks.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul_and_bias", matmul_and_bias()),
        ("elementwise_ops", elementwise_ops()),
        ("reductions", reductions()),
        ("gelu", gelu()),
        ("layer_norm", layer_norm()),
        ("heads_and_attention", heads_and_attention()),
        ("row_plumbing", row_plumbing()),
        ("full_model_masked", full_model_error(LossScope::Masked)),
        ("full_model_all_tokens", full_model_error(LossScope::All)),
    ]
}
