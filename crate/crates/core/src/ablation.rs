//! Hyperparameter sweeps: retrain and re-evaluate the detector per value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anomaly::{sliding_window_infer, InferenceConfig};
use crate::error::{bail, Error, Result};
use crate::evalmetrics::{evaluate_cases, EvalCase, EvalReport};
use crate::mae3d::{optimizer_for, train, MaeConfig, MaeModel, TrainConfig};
use crate::volio::{BoundingBox, Volume};

/// A labelled test volume.
#[derive(Clone, Debug)]
pub struct TestCase {
    pub name: String,
    pub image: Volume,
    pub boxes: Vec<BoundingBox>,
    pub tissue_mask: Volume,
}

/// Everything one detection experiment needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: MaeConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

/// Outcome of one experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub model: MaeModel,
    pub final_loss: f64,
    pub maps: Vec<Volume>,
    pub report: EvalReport,
}

/// Train a fresh model on `train_set`, infer every test case and evaluate
/// the pooled maps.
pub fn run_experiment(cfg: &ExperimentConfig, train_set: &[Volume], test: &[TestCase]) -> Result<Experiment> {
    let mut model = MaeModel::new(cfg.model.clone(), cfg.train.seed)?;
    let mut opt = optimizer_for(&model, &cfg.train);
    let log = train(&mut model, &mut opt, train_set, &cfg.train, 0..cfg.train.epochs, |_, _, _| Ok(()))?;
    let maps = test
        .iter()
        .map(|c| Ok(sliding_window_infer(&model, &c.image, &cfg.inference)?.fused))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_maps(test, &maps)?;
    Ok(Experiment {
        model,
        final_loss: log.last().map_or(f64::NAN, |l| l.loss),
        maps,
        report,
    })
}

/// Pooled metrics of `maps` against the labels of `test`.
pub fn evaluate_maps(test: &[TestCase], maps: &[Volume]) -> Result<EvalReport> {
    if test.len() != maps.len() {
        bail!(Dimension, "{} maps for {} test cases", maps.len(), test.len());
    }
    let cases: Vec<EvalCase> = test
        .iter()
        .zip(maps)
        .map(|(c, m)| EvalCase {
            name: c.name.clone(),
            map: m,
            boxes: &c.boxes,
            tissue_mask: &c.tissue_mask,
        })
        .collect();
    evaluate_cases(&cases)
}

/// The swept hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Training and inference masking ratio together.
    MaskRatio,
    /// ViT-patch extents, `XxYxZ`.
    VitPatch,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::MaskRatio => "mask_ratio",
            SweepParam::VitPatch => "vit_patch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Ratio(f64),
    Patch([usize; 3]),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Ratio(r) => write!(f, "{r}"),
            SweepValue::Patch([x, y, z]) => write!(f, "{x}x{y}x{z}"),
        }
    }
}

/// A parsed `name=v1,v2,…` sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<SweepValue>,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some((name, list)) = s.split_once('=') else {
            bail!(Config, "sweep '{s}' is not of the form name=v1,v2");
        };
        let param = match name.trim() {
            "mask_ratio" => SweepParam::MaskRatio,
            "vit_patch" => SweepParam::VitPatch,
            other => bail!(Config, "unknown sweep parameter '{other}' (mask_ratio or vit_patch)"),
        };
        let values = list
            .split(',')
            .map(|v| parse_value(param, v.trim()))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            bail!(Config, "sweep '{s}' has no values");
        }
        Ok(Sweep { param, values })
    }
}

fn parse_value(param: SweepParam, v: &str) -> Result<SweepValue> {
    let bad = || Error::Config(format!("bad {} value '{v}'", param.name()));
    match param {
        SweepParam::MaskRatio => v.parse().map(SweepValue::Ratio).map_err(|_| bad()),
        SweepParam::VitPatch => {
            let parts = v
                .split('x')
                .map(|p| p.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let p: [usize; 3] = parts.try_into().map_err(|_| bad())?;
            Ok(SweepValue::Patch(p))
        }
    }
}

impl Sweep {
    /// `base` with the swept value substituted, validated.
    pub fn apply(&self, base: &ExperimentConfig, value: SweepValue) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match (self.param, value) {
            (SweepParam::MaskRatio, SweepValue::Ratio(r)) => {
                cfg.model.mask_ratio = r;
                cfg.inference.mask_ratio = r;
            }
            (SweepParam::VitPatch, SweepValue::Patch(p)) => cfg.model.spec.vit_patch = p,
            _ => bail!(Config, "value {value} does not fit sweep {}", self.param.name()),
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.inference.validate(&cfg.model.spec)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: SweepValue,
    pub final_loss: f64,
    pub auroc: f64,
    pub ap: f64,
    pub ap_baseline: f64,
}

/// Run one experiment per sweep value, in order.
pub fn run_sweep(
    sweep: &Sweep,
    base: &ExperimentConfig,
    train_set: &[Volume],
    test: &[TestCase],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    // Validate every value before spending time on training.
    let configs = sweep
        .values
        .iter()
        .map(|&v| sweep.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (cfg, &value) in configs.iter().zip(&sweep.values) {
        let e = run_experiment(cfg, train_set, test)?;
        let row = SweepRow {
            param: sweep.param,
            value,
            final_loss: e.final_loss,
            auroc: e.report.auroc,
            ap: e.report.ap,
            ap_baseline: e.report.ap_baseline,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    param: &'a str,
    value: String,
    final_loss: f64,
    auroc: f64,
    ap: f64,
    ap_baseline: f64,
}

fn write_rows<W: std::io::Write>(rows: &[SweepRow], w: W) -> csv::Result<W> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(CsvRow {
            param: r.param.name(),
            value: r.value.to_string(),
            final_loss: r.final_loss,
            auroc: r.auroc,
            ap: r.ap,
            ap_baseline: r.ap_baseline,
        })?;
    }
    out.into_inner().map_err(|e| e.into_error().into())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let bytes = write_rows(rows, Vec::new()).expect("writing to memory cannot fail");
    String::from_utf8(bytes).expect("csv output is UTF-8")
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}
