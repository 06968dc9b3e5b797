//! Resolved run configuration: preset, then `--config` file, then flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use maemi_core::anomaly::InferenceConfig;
use maemi_core::dcebaseline::FilterOrder;
use maemi_core::mae3d::{MaeConfig, TrainConfig};
use maemi_core::phantom::{PhantomConfig, SplitSizes};
use maemi_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// Input and output locations of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
    pub dce: Option<PathBuf>,
    pub maps: Vec<PathBuf>,
}

/// Everything a command needs to replay its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub preset: Preset,
    pub phantom: PhantomConfig,
    pub splits: SplitSizes,
    pub model: MaeConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub filter_order: FilterOrder,
    pub identity_stub: bool,
    pub resume: bool,
    pub save_every: usize,
    pub sweep: Option<String>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train, inference) = match preset {
            Preset::Desk => (MaeConfig::desk(), TrainConfig::desk(), InferenceConfig::desk()),
            Preset::Paper => (MaeConfig::paper(), TrainConfig::default(), InferenceConfig::paper()),
        };
        Self {
            command: String::new(),
            preset,
            phantom: PhantomConfig::default(),
            splits: SplitSizes {
                train: 40,
                val: 0,
                test: 20,
            },
            model,
            train,
            inference,
            filter_order: FilterOrder::FilterLast,
            identity_stub: false,
            resume: false,
            save_every: 10,
            sweep: None,
            paths: Paths::default(),
        }
    }

    /// Preset defaults overlaid with the JSON file at `path`, if any. The
    /// file's own `preset` wins over `preset` when present.
    pub fn load(preset: Option<Preset>, path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::preset(preset.unwrap_or_default()));
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        let chosen = match (preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| json_err(path, e))?,
            (None, None) => Preset::default(),
        };
        let mut base = serde_json::to_value(Self::preset(chosen)).expect("config serialises");
        merge(&mut base, file);
        base["preset"] = serde_json::to_value(chosen).expect("preset serialises");
        serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Give every component the same seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.train.seed = seed;
        self.inference.seed = seed;
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| json_err(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Json {
        path: path.into(),
        source: e,
    }
}

/// Recursively overlay `patch` onto `base`; objects merge, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse `AxBxC`.
pub fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("'{s}' is not of the form AxBxC")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("'{s}' is not of the form AxBxC"))
}
