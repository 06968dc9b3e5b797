//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate
//! schedule used for training.

use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Optimiser state: step count plus first/second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    /// Fresh state for `params`. Defaults used for MAE training are
    /// `beta1 = 0.9`, `beta2 = 0.95`, `eps = 1e-8`, `weight_decay = 0.05`.
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn mae_default(params: &[Tensor]) -> Self {
        Self::new(params, 0.9, 0.95, 1e-8, 0.05)
    }
}

/// One AdamW update over all `params`.
///
/// Weight decay touches only tensors with two or more dimensions (weight
/// matrices); biases, norm parameters and the mask token are not decayed.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        bail!(
            Contract,
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        );
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            bail!(Contract, "parameter {i} has no gradient");
        }
        if state.m[i].len() != p.numel() {
            bail!(
                Dimension,
                "moment buffer {i} has {} entries for a parameter of {}",
                state.m[i].len(),
                p.numel()
            );
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.ndim() >= 2 { state.weight_decay } else { 0.0 };
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * decay * *w;
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate for a 0-indexed `epoch`.
///
/// Linear warmup `base·epoch/warmup` for `epoch < warmup` (so epoch 0 runs at
/// zero), then cosine decay `base·½(1 + cos(π·(epoch−warmup)/(total−warmup)))`,
/// which reaches `base` at `epoch == warmup` and approaches zero at the end.
pub fn lr_schedule(epoch: usize, base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        bail!(
            Config,
            "warmup epochs ({warmup_epochs}) must be fewer than total epochs ({total_epochs})"
        );
    }
    if epoch >= total_epochs {
        bail!(Config, "epoch {epoch} outside schedule of {total_epochs} epochs");
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * epoch as f64 / warmup_epochs as f64);
    }
    let progress = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64, g: f64) -> Tensor {
        let mut t = Tensor::new([1], vec![w]).unwrap().with_grad();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![scalar_param(1.5, 0.0)];
        let mut s = AdamState::new(&p, 0.9, 0.95, 1e-8, 0.0);
        adam_step(&mut p, &mut s, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after one bias-corrected step, so Δw = lr/(1+eps).
        let mut p = vec![scalar_param(0.0, 1.0)];
        let mut s = AdamState::new(&p, 0.9, 0.95, 1e-8, 0.0);
        adam_step(&mut p, &mut s, 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = vec![Tensor::new([1], vec![0.0]).unwrap().with_grad()];
        let mut s = AdamState::mae_default(&p);
        assert!(matches!(
            adam_step(&mut p, &mut s, 0.1),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn decay_only_on_matrices() {
        let mut p = vec![
            scalar_param(1.0, 0.0),
            {
                let mut t = Tensor::new([1, 1], vec![1.0]).unwrap().with_grad();
                t.set_grad(vec![0.0]).unwrap();
                t
            },
        ];
        let mut s = AdamState::new(&p, 0.9, 0.95, 1e-8, 0.5);
        adam_step(&mut p, &mut s, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 1.0);
        assert!((p[1].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 1e-3, 7, 1000).unwrap(), 0.0);
        assert_eq!(lr_schedule(7, 1e-3, 7, 1000).unwrap(), 1e-3);
        let tail = lr_schedule(999, 1e-3, 7, 1000).unwrap();
        let expected = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 992.0 / 993.0).cos());
        assert_eq!(tail, expected);
        assert!(tail < 1e-8);
        assert!(lr_schedule(3, 1e-3, 7, 7).is_err());
        assert!(lr_schedule(10, 1e-3, 2, 10).is_err());
    }
}
