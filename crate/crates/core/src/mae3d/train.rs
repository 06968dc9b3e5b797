use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::TrainConfig;
use super::model::MaeModel;
use crate::error::{bail, Error, Result};
use crate::ndnum::{adam_step, lr_schedule, AdamState};
use crate::par;
use crate::patchgrid::{flip_augment, random_crop, sample_mask, tokenize, MaskPlan, TokenGrid};
use crate::rng::{self, tag};
use crate::volio::Volume;

/// Fresh AdamW state for `model` with the moments and decay of `cfg`.
pub fn optimizer_for(model: &MaeModel, cfg: &TrainConfig) -> AdamState {
    AdamState::new(model.params(), cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay)
}

/// One optimiser step on a batch of prepared samples; returns the mean loss.
///
/// Per-sample gradients are computed in parallel and summed in batch order.
pub fn train_step(model: &mut MaeModel, opt: &mut AdamState, batch: &[(TokenGrid, MaskPlan)], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        bail!(Data, "empty batch");
    }
    let results = {
        let m: &MaeModel = model;
        par::map_slice(batch, |(g, p)| m.loss_and_grad(g, p))
    };
    let mut loss = 0.0;
    let mut sum: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    for r in results {
        let (l, grads) = r?;
        loss += l;
        for (acc, g) in sum.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    if !loss.is_finite() {
        bail!(NonFinite, "loss became {loss}");
    }
    for (p, mut g) in model.params_mut().iter_mut().zip(sum) {
        g.iter_mut().for_each(|v| *v *= inv);
        p.set_grad(g)?;
    }
    adam_step(model.params_mut(), opt, lr)?;
    Ok(loss)
}

/// Augmented training sample `index` of `epoch`: random crop, random flips
/// and a fresh mask, all seeded from `(cfg.seed, epoch, index)`.
pub fn prepare_sample(
    model: &MaeModel,
    volume: &Volume,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(TokenGrid, MaskPlan)> {
    let spec = model.spec();
    if volume.channels() != spec.channels {
        bail!(
            Data,
            "training volume has {} channels, model expects {}",
            volume.channels(),
            spec.channels
        );
    }
    let path = [epoch as u64, index as u64];
    let (patch, _) = random_crop(volume, spec, rng::derive_seed(cfg.seed, &path)).map_err(|e| match e {
        Error::Dimension(m) => Error::Data(m),
        e => e,
    })?;
    let mut fr = rng::stream(cfg.seed, &[tag::FLIP, path[0], path[1]]);
    let coronal = fr.random_bool(cfg.flip_coronal_prob);
    let sagittal = fr.random_bool(cfg.flip_sagittal_prob);
    let patch = flip_augment(&patch, coronal, sagittal);
    let grid = tokenize(&patch, spec)?;
    let plan = sample_mask(
        spec.token_count(),
        model.config().mask_ratio,
        rng::derive_seed(cfg.seed, &[tag::MASK, path[0], path[1]]),
    )?;
    Ok((grid, plan))
}

/// One pass over `dataset` in a seeded order; returns the mean batch loss.
pub fn train_epoch(
    model: &mut MaeModel,
    opt: &mut AdamState,
    dataset: &[Volume],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    cfg.validate()?;
    if dataset.is_empty() {
        bail!(Data, "training set is empty");
    }
    let lr = lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[tag::EPOCH_ORDER, epoch as u64]));
    let mut total = 0.0;
    let mut steps = 0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch = {
            let m: &MaeModel = model;
            let prepared = par::map_range(chunk.len(), |i| {
                prepare_sample(m, &dataset[chunk[i]], cfg, epoch, b * cfg.batch_size + i)
            });
            prepared.into_iter().collect::<Result<Vec<_>>>()?
        };
        total += train_step(model, opt, &batch, lr).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {epoch} at lr {lr:e}")),
            e => e,
        })?;
        steps += 1;
    }
    Ok(total / steps as f64)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Train the given epochs of the `cfg.epochs` schedule, calling `on_epoch`
/// after each. Splitting a schedule into consecutive ranges gives the same
/// result as one call over `0..cfg.epochs`.
pub fn train(
    model: &mut MaeModel,
    opt: &mut AdamState,
    dataset: &[Volume],
    cfg: &TrainConfig,
    epochs: Range<usize>,
    mut on_epoch: impl FnMut(&EpochLog, &MaeModel, &AdamState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if epochs.end > cfg.epochs {
        bail!(Config, "epoch range {epochs:?} exceeds the {}-epoch schedule", cfg.epochs);
    }
    let mut log = Vec::new();
    for epoch in epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs)?;
        let loss = train_epoch(model, opt, dataset, cfg, epoch)?;
        let row = EpochLog { epoch, lr, loss };
        on_epoch(&row, model, opt)?;
        log.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae3d::MaeConfig;

    fn data() -> Vec<Volume> {
        let spec = MaeConfig::desk().spec;
        let dims = [spec.mri_patch[0] + 6, spec.mri_patch[1], spec.mri_patch[2]];
        (0..3)
            .map(|s| {
                let mut r = rng::stream(s, &[99]);
                let n = 2 * dims.iter().product::<usize>();
                Volume::new(2, dims, [1.0; 3], (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 3,
            warmup_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = MaeModel::new(MaeConfig::desk(), 1).unwrap();
        let before = m.flat_params();
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..small_cfg()
        };
        let mut opt = optimizer_for(&m, &cfg);
        train_epoch(&mut m, &mut opt, &data(), &cfg, 1).unwrap();
        assert_eq!(m.flat_params(), before);
    }

    #[test]
    fn epochs_are_reproducible() {
        let run = || {
            let mut m = MaeModel::new(MaeConfig::desk(), 1).unwrap();
            let cfg = small_cfg();
            let mut opt = optimizer_for(&m, &cfg);
            let l = train_epoch(&mut m, &mut opt, &data(), &cfg, 1).unwrap();
            (l, m.flat_params())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_and_small_volume() {
        let mut m = MaeModel::new(MaeConfig::desk(), 1).unwrap();
        let cfg = small_cfg();
        let mut opt = optimizer_for(&m, &cfg);
        assert!(matches!(
            train_epoch(&mut m, &mut opt, &[], &cfg, 0),
            Err(Error::Data(_))
        ));
        let tiny = vec![Volume::zeros(2, [8, 8, 8], [1.0; 3]).unwrap()];
        assert!(matches!(
            train_epoch(&mut m, &mut opt, &tiny, &cfg, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn split_schedule_matches_single_run() {
        let cfg = small_cfg();
        let fresh = || {
            let m = MaeModel::new(MaeConfig::desk(), 4).unwrap();
            let o = optimizer_for(&m, &cfg);
            (m, o)
        };
        let (mut a, mut oa) = fresh();
        let la = train(&mut a, &mut oa, &data(), &cfg, 0..3, |_, _, _| Ok(())).unwrap();
        let (mut b, mut ob) = fresh();
        let mut lb = train(&mut b, &mut ob, &data(), &cfg, 0..1, |_, _, _| Ok(())).unwrap();
        lb.extend(train(&mut b, &mut ob, &data(), &cfg, 1..3, |_, _, _| Ok(())).unwrap());
        assert_eq!(la, lb);
        assert_eq!(a.flat_params(), b.flat_params());
        assert!(matches!(
            train(&mut b, &mut ob, &data(), &cfg, 2..4, |_, _, _| Ok(())),
            Err(Error::Config(_))
        ));
    }
}
