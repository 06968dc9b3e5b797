use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::CommandFactory;
use maemi_core::ablation::{evaluate_maps, run_sweep, sweep_csv, ExperimentConfig, Sweep, TestCase};
use maemi_core::anomaly::{apply_tissue_mask, sliding_window_infer, IdentityStub};
use maemi_core::dcebaseline::{subtraction_image, DceSeries, FilterOrder};
use maemi_core::evalmetrics::{evaluate, EvalReport};
use maemi_core::mae3d::{
    load_checkpoint, load_optimizer, optimizer_for, save_checkpoint, save_optimizer, train, MaeModel, Reconstructor,
};
use maemi_core::phantom::{generate_dataset, resolve, Manifest, MANIFEST_FILE};
use maemi_core::volio::{read_mvol, read_sidecar, read_sidecar_file, role, write_mvol, write_sidecar, Sidecar, Volume};
use maemi_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command, Common, EvalArgs, InferArgs, PhantomArgs, SubtractArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.state";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Subtract(a) => subtract(a),
        Command::Eval(a) => eval(a),
    }
}

fn resolve_config(common: &Common, command: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.preset, common.config.as_deref())?;
    cfg.command = command.to_string();
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// A missing required option, reported with the command's usage line.
fn missing(command: &str, what: &str) -> Error {
    let mut cli = Cli::command();
    cli.build();
    let usage = cli
        .find_subcommand_mut(command)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    Error::Config(format!("{what} is required\n\n{usage}"))
}

fn required(command: &str, flag: &str, v: &Option<PathBuf>) -> Result<PathBuf> {
    v.clone().ok_or_else(|| missing(command, flag))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn save(v: &Volume, path: &Path, sc: &Sidecar) -> Result<()> {
    write_mvol(v, path)?;
    write_sidecar(path, sc)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, "phantom")?;
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    let out = required("phantom", "--out", &cfg.paths.out)?;
    if let Some(n) = a.train {
        cfg.splits.train = n;
    }
    if let Some(n) = a.val {
        cfg.splits.val = n;
    }
    if let Some(n) = a.test {
        cfg.splits.test = n;
    }
    if let Some(d) = a.dims {
        cfg.phantom.dims = d;
    }
    if let Some(f) = a.healthy_fraction {
        cfg.phantom.test_healthy_fraction = f;
    }
    cfg.phantom.validate()?;
    create_dir(&out)?;
    let m = generate_dataset(&cfg.phantom, cfg.splits, &out)?;
    cfg.write(&out)?;
    println!(
        "wrote {} train, {} val, {} test cases to {}",
        m.train.len(),
        m.val.len(),
        m.test.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::read(path)
}

fn training_volumes(manifest_path: &Path, m: &Manifest, channels: usize) -> Result<Vec<Volume>> {
    m.train
        .iter()
        .map(|rel| {
            let p = resolve(manifest_path, rel);
            let v = read_mvol(&p)?;
            if v.channels() != channels {
                return Err(Error::Dimension(format!(
                    "{}: {} channels, model expects {channels}",
                    p.display(),
                    v.channels()
                )));
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    epoch: usize,
    lr: f64,
    loss: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.into(), source },
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, "train")?;
    if a.manifest.is_some() {
        cfg.paths.manifest = a.manifest;
    }
    if a.out.is_some() {
        cfg.paths.out = a.out;
    }
    let manifest_path = required("train", "--manifest", &cfg.paths.manifest)?;
    let out = required("train", "--out", &cfg.paths.out)?;
    if let Some(v) = a.epochs {
        // Shrinking the run below the warmup keeps the warmup fraction.
        if a.warmup.is_none() && cfg.train.warmup_epochs >= v {
            cfg.train.warmup_epochs = v * cfg.train.warmup_epochs / cfg.train.epochs.max(1);
        }
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.warmup {
        cfg.train.warmup_epochs = v;
    }
    if let Some(v) = a.mask_ratio {
        cfg.model.mask_ratio = v;
    }
    if let Some(v) = a.vit_patch {
        cfg.model.spec.vit_patch = v;
    }
    if let Some(v) = a.save_every {
        cfg.save_every = v;
    }
    cfg.resume |= a.resume;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.save_every == 0 {
        return Err(Error::Config("save_every must be at least 1".into()));
    }

    let manifest = read_manifest(&manifest_path)?;
    let data = training_volumes(&manifest_path, &manifest, cfg.model.spec.channels)?;
    create_dir(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let opt_path = out.join(OPTIMIZER_FILE);
    let log_path = out.join(LOSS_LOG_FILE);

    let (mut model, mut opt, start, previous) = if cfg.resume {
        let model = load_checkpoint(&ckpt)?;
        if model.config() != &cfg.model {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration",
                ckpt.display()
            )));
        }
        let mut opt = optimizer_for(&model, &cfg.train);
        let start = load_optimizer(&mut opt, &opt_path)?;
        let rows: Vec<LossRow> = read_loss_log(&log_path)?.into_iter().filter(|r| r.epoch < start).collect();
        (model, opt, start, rows)
    } else {
        let model = MaeModel::new(cfg.model.clone(), cfg.train.seed)?;
        let opt = optimizer_for(&model, &cfg.train);
        (model, opt, 0, Vec::new())
    };
    cfg.write(&out)?;

    let file = File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = csv::Writer::from_writer(file);
    for r in &previous {
        log.serialize(r).map_err(|e| csv_err(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let epochs = cfg.train.epochs;
    let until = a.until.unwrap_or(epochs);
    if until > epochs {
        return Err(Error::Config(format!("--until {until} is past the {epochs}-epoch schedule")));
    }
    let save_every = cfg.save_every;
    println!(
        "training {} parameters on {} volumes, epochs {start}..{until} of {epochs}",
        model.parameter_count(),
        data.len()
    );
    let rows = train(&mut model, &mut opt, &data, &cfg.train, start..until.max(start), |row, m, o| {
        log.serialize(LossRow {
            epoch: row.epoch,
            lr: row.lr,
            loss: row.loss,
        })
        .map_err(|e| csv_err(&log_path, e))?;
        log.flush().map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let next = row.epoch + 1;
        if next % save_every == 0 || next == until {
            save_checkpoint(m, &ckpt)?;
            save_optimizer(o, next, &opt_path)?;
        }
        Ok(())
    })?;
    if rows.is_empty() {
        // Nothing left to train: still leave a loadable checkpoint behind.
        save_checkpoint(&model, &ckpt)?;
        save_optimizer(&opt, start, &opt_path)?;
    }
    match rows.last() {
        Some(r) => println!("epoch {} lr {:.3e} loss {:.6}", r.epoch, r.lr, r.loss),
        None => println!("no epochs left to train"),
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// One volume to process: output stem, input path, optional tissue mask.
struct Item {
    stem: String,
    input: PathBuf,
    mask: Option<PathBuf>,
}

fn test_items(manifest_path: &Path, pick: impl Fn(&maemi_core::phantom::TestEntry) -> &str) -> Result<Vec<Item>> {
    let m = read_manifest(manifest_path)?;
    Ok(m.test
        .iter()
        .map(|t| Item {
            stem: stem(Path::new(&t.image)),
            input: resolve(manifest_path, pick(t)),
            mask: Some(resolve(manifest_path, &t.mask)),
        })
        .collect())
}

fn infer(a: InferArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, "infer")?;
    for (slot, v) in [
        (&mut cfg.paths.checkpoint, a.checkpoint),
        (&mut cfg.paths.manifest, a.manifest),
        (&mut cfg.paths.input, a.input),
        (&mut cfg.paths.mask, a.mask),
        (&mut cfg.paths.out, a.out),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    cfg.identity_stub |= a.identity_stub;
    if let Some(v) = a.stride {
        cfg.inference.stride = v;
    }
    if let Some(v) = a.repetitions {
        cfg.inference.repetitions = v;
    }
    if let Some(v) = a.mask_ratio {
        cfg.inference.mask_ratio = v;
    }
    cfg.inference.error_on_visible |= a.error_on_visible;
    let out = required("infer", "--out", &cfg.paths.out)?;

    let stub;
    let model;
    let (recon, source): (&dyn Reconstructor, String) = if cfg.identity_stub {
        stub = IdentityStub { spec: cfg.model.spec };
        (&stub, "identity_stub".to_string())
    } else {
        let path = required("infer", "--checkpoint or --identity-stub", &cfg.paths.checkpoint)?;
        model = load_checkpoint(&path)?;
        cfg.model = model.config().clone();
        (&model, path.display().to_string())
    };
    cfg.inference.validate(recon.spec())?;

    let items = match (&cfg.paths.manifest, &cfg.paths.input) {
        (Some(m), None) => test_items(m, |t| &t.image)?,
        (None, Some(i)) => vec![Item {
            stem: stem(i),
            input: i.clone(),
            mask: cfg.paths.mask.clone(),
        }],
        _ => return Err(missing("infer", "exactly one of --manifest and --input")),
    };
    create_dir(&out)?;
    cfg.write(&out)?;
    let mut forwards = 0;
    for it in &items {
        let volume = read_mvol(&it.input)?;
        if volume.channels() != recon.spec().channels {
            return Err(Error::Dimension(format!(
                "{}: {} channels, model expects {}",
                it.input.display(),
                volume.channels(),
                recon.spec().channels
            )));
        }
        let res = sliding_window_infer(recon, &volume, &cfg.inference)?;
        forwards += res.forwards;
        let fused = match &it.mask {
            Some(m) => apply_tissue_mask(&res.fused, &read_mvol(m)?)?,
            None => res.fused.clone(),
        };
        let mut sc = Sidecar::new(role::ANOMALY_MAP, &["anomaly"]);
        sc.extra.insert("model_checkpoint".into(), json!(source));
        sc.extra.insert(
            "config".into(),
            serde_json::to_value(&cfg.inference).expect("inference config serialises"),
        );
        sc.extra.insert("tissue_masked".into(), json!(it.mask.is_some()));
        sc.extra.insert("uncovered".into(), json!(res.uncovered));
        save(&fused, &out.join(format!("{}_anomaly.mvol", it.stem)), &sc)?;
        let mut sc = Sidecar::new(role::SEQUENCE_ERRORS, &maemi_core::phantom::SEQUENCES);
        sc.extra.insert("model_checkpoint".into(), json!(source));
        save(&res.per_sequence, &out.join(format!("{}_errors.mvol", it.stem)), &sc)?;
        println!("{}: forwards {} uncovered {}", it.stem, res.forwards, res.uncovered);
    }
    println!("forwards: {forwards}");
    Ok(())
}

fn subtract(a: SubtractArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, "subtract")?;
    for (slot, v) in [
        (&mut cfg.paths.dce, a.dce),
        (&mut cfg.paths.manifest, a.manifest),
        (&mut cfg.paths.out, a.out),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    if a.filter_per_term {
        cfg.filter_order = FilterOrder::PerTerm;
    }
    let out = required("subtract", "--out", &cfg.paths.out)?;
    let items = match (&cfg.paths.manifest, &cfg.paths.dce) {
        (Some(m), None) => test_items(m, |t| &t.dce)?,
        (None, Some(d)) => {
            let s = stem(d);
            vec![Item {
                stem: s.strip_suffix("_dce").unwrap_or(&s).to_string(),
                input: d.clone(),
                mask: None,
            }]
        }
        _ => return Err(missing("subtract", "exactly one of --manifest and --dce")),
    };
    create_dir(&out)?;
    cfg.write(&out)?;
    for it in &items {
        let series = DceSeries::from_stacked(&read_mvol(&it.input)?)?;
        let s = subtraction_image(&series, cfg.filter_order)?;
        let mut sc = Sidecar::new(role::SUBTRACTION, &["subtraction"]);
        sc.extra.insert(
            "filter_order".into(),
            serde_json::to_value(cfg.filter_order).expect("filter order serialises"),
        );
        sc.extra.insert("post_contrast".into(), json!(series.post().len()));
        save(&s, &out.join(format!("{}_subtraction.mvol", it.stem)), &sc)?;
        println!("{}: subtraction over {} post-contrast volumes", it.stem, series.post().len());
    }
    Ok(())
}

/// Labelled test cases of a manifest.
pub fn load_test_cases(manifest_path: &Path) -> Result<Vec<TestCase>> {
    let m = read_manifest(manifest_path)?;
    m.test
        .iter()
        .map(|t| {
            Ok(TestCase {
                name: stem(Path::new(&t.image)),
                image: read_mvol(resolve(manifest_path, &t.image))?,
                boxes: read_sidecar_file(resolve(manifest_path, &t.boxes_in_sidecar))?.boxes,
                tissue_mask: read_mvol(resolve(manifest_path, &t.mask))?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub maps: PathBuf,
    pub report: EvalReport,
}

/// Method label and map file of `case` inside `dir`.
fn find_map(dir: &Path, case: &str) -> Result<(String, PathBuf)> {
    let found: Vec<(String, PathBuf)> = [("maemi", "anomaly"), ("subtraction", "subtraction")]
        .into_iter()
        .map(|(m, suffix)| (m.to_string(), dir.join(format!("{case}_{suffix}.mvol"))))
        .filter(|(_, p)| p.exists())
        .collect();
    match found.len() {
        1 => Ok(found.into_iter().next().expect("one element")),
        0 => Err(Error::Io {
            path: dir.join(format!("{case}_anomaly.mvol")),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no map for this case"),
        }),
        _ => Err(Error::Config(format!(
            "{}: both an anomaly map and a subtraction image exist for {case}",
            dir.display()
        ))),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, "eval")?;
    for (slot, v) in [
        (&mut cfg.paths.manifest, a.manifest),
        (&mut cfg.paths.input, a.map),
        (&mut cfg.paths.mask, a.mask),
        (&mut cfg.paths.boxes, a.boxes),
        (&mut cfg.paths.out, a.out),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    if !a.maps.is_empty() {
        cfg.paths.maps = a.maps;
    }
    if a.sweep.is_some() {
        cfg.sweep = a.sweep;
    }

    if let Some(spec) = cfg.sweep.clone() {
        let sweep: Sweep = spec.parse()?;
        let manifest_path = required("eval", "--manifest", &cfg.paths.manifest)?;
        let out = required("eval", "--out", &cfg.paths.out)?;
        let base = ExperimentConfig {
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            inference: cfg.inference.clone(),
        };
        let m = read_manifest(&manifest_path)?;
        let train_set = training_volumes(&manifest_path, &m, cfg.model.spec.channels)?;
        let test = load_test_cases(&manifest_path)?;
        create_dir(&out)?;
        cfg.write(&out)?;
        println!("{:<12} {:>10} {:>8} {:>8} {:>10}", sweep.param.name(), "loss", "AUROC", "AP", "baseline");
        let rows = run_sweep(&sweep, &base, &train_set, &test, |r| {
            println!(
                "{:<12} {:>10.5} {:>8.4} {:>8.4} {:>10.4}",
                r.value.to_string(),
                r.final_loss,
                r.auroc,
                r.ap,
                r.ap_baseline
            )
        })?;
        let path = out.join(SWEEP_FILE);
        fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::Io { path, source: e })?;
        return Ok(());
    }

    if let Some(map) = cfg.paths.input.clone() {
        let mask = required("eval", "--mask", &cfg.paths.mask)?;
        let boxes = required("eval", "--boxes", &cfg.paths.boxes)?;
        let report = evaluate(&read_mvol(&map)?, &read_sidecar_file(&boxes)?.boxes, &read_mvol(&mask)?)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        if let Some(out) = &cfg.paths.out {
            write_json(out, &report)?;
        }
        return Ok(());
    }

    let manifest_path = required("eval", "--manifest", &cfg.paths.manifest)?;
    if cfg.paths.maps.is_empty() {
        return Err(missing("eval", "--maps, --map or --sweep"));
    }
    let test = load_test_cases(&manifest_path)?;
    let mut rows = Vec::new();
    for dir in &cfg.paths.maps {
        let mut method = None;
        let mut maps = Vec::with_capacity(test.len());
        for c in &test {
            let (m, path) = find_map(dir, &c.name)?;
            if method.get_or_insert_with(|| m.clone()) != &m {
                return Err(Error::Config(format!("{}: mixed map kinds", dir.display())));
            }
            let sc = read_sidecar(&path)?;
            if sc.role != role::ANOMALY_MAP && sc.role != role::SUBTRACTION {
                return Err(Error::Config(format!("{}: role '{}' is not a score map", path.display(), sc.role)));
            }
            maps.push(read_mvol(&path)?);
        }
        rows.push(MethodRow {
            method: method.unwrap_or_default(),
            maps: dir.clone(),
            report: evaluate_maps(&test, &maps)?,
        });
    }
    println!("{:<12} {:>8} {:>8} {:>12}", "method", "AUROC", "AP", "AP baseline");
    for r in &rows {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>12.4}",
            r.method, r.report.auroc, r.report.ap, r.report.ap_baseline
        );
    }
    if let Some(out) = &cfg.paths.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
            cfg.write(dir)?;
        }
        write_json(out, &json!({ "rows": rows }))?;
    }
    Ok(())
}
