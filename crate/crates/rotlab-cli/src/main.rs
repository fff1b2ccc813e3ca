//! Experiment driver: config in, report.json and CSV artifacts out.
//!
//! Every subcommand writes a `report.json` under `--out` echoing the
//! resolved configuration, the metrics it produced, the artifact files it
//! wrote, and per-stage wall-clock seconds. Exit codes: 0 success, 2 config
//! or schema violation, 3 pipeline failure (the message names the stage).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use rotlab::dataset::{manifest_read, manifest_write, AugmentPolicy, Dataset, SyntheticSpec};
use rotlab::defense;
use rotlab::geometry::{corrupt, Corruption};
use rotlab::metrics;
use rotlab::model::{
    self, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig,
};
use rotlab::poison::{self, PoisonConfig, Scenario};
use rotlab::theory;
use rotlab::Angle;

#[derive(Debug)]
enum CliError {
    Schema(String),
    Pipeline { stage: String, msg: String },
}

impl CliError {
    fn schema(msg: impl Into<String>) -> Self {
        CliError::Schema(msg.into())
    }

    fn at(stage: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Pipeline {
            stage: stage.into(),
            msg: msg.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "rotlab", version, about = "Rotation-backdoor experiment driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it as a manifest directory.
    GenData(GenDataArgs),
    /// Poison a dataset with a rotation trigger.
    Poison(PoisonArgs),
    /// Train a classifier or detector on a manifest directory.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Sweep attack success over test-time rotation angles.
    Sweep(SweepArgs),
    /// Run a backdoor countermeasure over a (suspect) dataset.
    Defend(DefendArgs),
    /// Mixture-model numerics: bound curves, the 180-degree check, and the
    /// angle-shift simulation.
    Theory(TheoryArgs),
    /// Apply pixel corruptions (noise or blur) to a dataset.
    Corrupt(CorruptArgs),
    /// Validate and print an existing run report.
    Report(ReportArgs),
}

/// Flags shared by every pipeline subcommand. Values may also come from a
/// JSON config file; explicit flags win.
#[derive(Args, Clone)]
struct Common {
    /// JSON file with default values for any flag of this subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (mandatory, via flag or config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Class,
    Detect,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Sca,
    Mca,
    Oma,
    Oha,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Scenario {
        match s {
            ScenarioArg::Sca => Scenario::Sca,
            ScenarioArg::Mca => Scenario::Mca,
            ScenarioArg::Oma => Scenario::Oma,
            ScenarioArg::Oha => Scenario::Oha,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DefenseKind {
    Ss,
    Ac,
    Strip,
    Nc,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "class")]
    kind: DataKind,
    #[arg(long)]
    classes: Option<usize>,
    /// Samples per class (classification) or total scenes (detection).
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args)]
struct PoisonArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest directory of the clean dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Trigger angle in degrees.
    #[arg(long)]
    angle: Option<f64>,
    /// Poisoning rate as a fraction.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    target: Option<usize>,
    /// Donor class for the single-class scenario.
    #[arg(long)]
    source: Option<usize>,
    /// Object-pool size for the detection scenarios.
    #[arg(long)]
    pool_size: Option<usize>,
    /// Object side length for the detection pool.
    #[arg(long)]
    pool_obj_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Rotation augmentation range LO:HI in degrees.
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Manifest directory of the test set.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long)]
    target: Option<usize>,
    /// Detection scenario for recall metrics (oma or oha).
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    pool_obj_size: Option<usize>,
    /// Seed for the held-out evaluation object pool.
    #[arg(long)]
    pool_seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    sweep_step: Option<f64>,
}

#[derive(Args)]
struct DefendArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Suspect dataset manifest (poison flags supply ground truth).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Known-clean dataset manifest (pool/calibration for strip, batch
    /// for nc).
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, value_enum)]
    defense: Option<DefenseKind>,
    /// Expected poisoning rate for the spectral defense.
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args)]
struct TheoryArgs {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    action: TheoryAction,
}

#[derive(Subcommand)]
enum TheoryAction {
    /// Verify that the attack bound peaks at 180 degrees.
    CheckTheorem1 {
        #[arg(long)]
        angle: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        grid_step: Option<f64>,
    },
    /// Export the bound as CSV over [0, 180].
    BoundCurve {
        #[arg(long)]
        angle: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Pre-rotate training data with growing spread and track where the
    /// attack success peaks.
    ShiftSim {
        #[arg(long)]
        angle: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        target: Option<usize>,
        /// Comma-separated spreads in degrees.
        #[arg(long)]
        sigmas: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        canvas: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        sweep_step: Option<f64>,
    },
}

#[derive(Args)]
struct CorruptArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Gaussian pixel-noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Gaussian blur kernel size (odd).
    #[arg(long)]
    blur: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding report.json.
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Config file merging
// ---------------------------------------------------------------------------

/// Resolved defaults loaded from `--config`; flags override these.
struct FileCfg(Value);

impl FileCfg {
    fn load(path: &Option<PathBuf>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileCfg(json!({})));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::schema(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::schema(format!("config is not valid JSON: {e}")))?;
        if !v.is_object() {
            return Err(CliError::schema("config root must be a JSON object"));
        }
        Ok(FileCfg(v))
    }

    fn u64(&self, key: &str, flag: Option<u64>) -> Option<u64> {
        flag.or_else(|| self.0.get(key).and_then(Value::as_u64))
    }

    fn usize(&self, key: &str, flag: Option<usize>) -> Option<usize> {
        flag.or_else(|| self.0.get(key).and_then(Value::as_u64).map(|v| v as usize))
    }

    fn f64(&self, key: &str, flag: Option<f64>) -> Option<f64> {
        flag.or_else(|| self.0.get(key).and_then(Value::as_f64))
    }

    fn string(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.0.get(key).and_then(Value::as_str).map(String::from))
    }

    fn usize_list(&self, key: &str) -> Option<Vec<usize>> {
        self.0.get(key).and_then(Value::as_array).map(|a| {
            a.iter()
                .filter_map(Value::as_u64)
                .map(|v| v as usize)
                .collect()
        })
    }

    fn path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.0.get(key).and_then(Value::as_str).map(PathBuf::from))
    }
}

fn require<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::schema(format!("missing required value: {what}")))
}

fn parse_augment(s: &str) -> Result<AugmentPolicy, CliError> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| CliError::schema(format!("--augment expects LO:HI, got {s:?}")))?;
    let lo: f64 = lo
        .parse()
        .map_err(|_| CliError::schema(format!("bad augment bound {lo:?}")))?;
    let hi: f64 = hi
        .parse()
        .map_err(|_| CliError::schema(format!("bad augment bound {hi:?}")))?;
    if lo > hi {
        return Err(CliError::schema(format!("augment range {lo}:{hi} is inverted")));
    }
    Ok(AugmentPolicy { lo, hi })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| CliError::schema(format!("bad {what} entry {part:?}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct RunReport {
    config: Value,
    metrics: Value,
    artifacts: Vec<String>,
    wall_clock: BTreeMap<String, f64>,
    out: PathBuf,
}

impl RunReport {
    fn new(out: &Path, config: Value) -> Result<Self, CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::at("setup", format!("cannot create {}: {e}", out.display())))?;
        Ok(RunReport {
            config,
            metrics: json!({}),
            artifacts: Vec::new(),
            wall_clock: BTreeMap::new(),
            out: out.to_path_buf(),
        })
    }

    fn time<T>(
        &mut self,
        stage: &str,
        f: impl FnOnce() -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let start = Instant::now();
        let v = f()?;
        self.wall_clock
            .insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(v)
    }

    fn artifact(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    fn write(self) -> Result<(), CliError> {
        let report = json!({
            "config": self.config,
            "metrics": self.metrics,
            "artifacts": self.artifacts,
            "wall_clock": self.wall_clock,
        });
        let path = self.out.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| CliError::at("report", format!("cannot write {}: {e}", path.display())))
    }
}

fn main() {
    rotlab::exec::init_threads();
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::Schema(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Pipeline { stage, msg }) => {
            eprintln!("error in stage {stage}: {msg}");
            3
        }
    };
    std::process::exit(code);
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Poison(a) => poison_cmd(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Sweep(a) => sweep_cmd(a),
        Cmd::Defend(a) => defend_cmd(a),
        Cmd::Theory(a) => theory_cmd(a),
        Cmd::Corrupt(a) => corrupt_cmd(a),
        Cmd::Report(a) => report_cmd(a),
    }
}

fn resolve_common(common: &Common, cfg: &FileCfg) -> Result<(u64, PathBuf), CliError> {
    let seed = require(cfg.u64("seed", common.seed), "--seed")?;
    let out = require(cfg.path("out", common.out.clone()), "--out")?;
    Ok((seed, out))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    let is_detect = a.kind == DataKind::Detect;
    let spec = SyntheticSpec {
        num_classes: cfg.usize("classes", a.classes).unwrap_or(4),
        samples_per_class: cfg
            .usize("per_class", a.per_class)
            .unwrap_or(if is_detect { 200 } else { 100 }),
        canvas: cfg
            .usize("canvas", a.canvas)
            .unwrap_or(if is_detect { 64 } else { 32 }),
        orientation_jitter: cfg.f64("jitter", a.jitter).unwrap_or(5.0),
        seed,
        family_map: cfg.usize_list("family_map"),
    };
    spec.validate()
        .map_err(|e| CliError::schema(e.to_string()))?;
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "gen-data",
            "kind": if is_detect { "detection" } else { "classification" },
            "spec": serde_json::to_value(&spec).unwrap(),
        }),
    )?;
    let ds = report.time("generate", || {
        if is_detect {
            rotlab::dataset::gen_detection_dataset(&spec)
                .map(Dataset::Detection)
                .map_err(|e| CliError::at("generate", e))
        } else {
            rotlab::dataset::gen_classification_dataset(&spec)
                .map(Dataset::Classification)
                .map_err(|e| CliError::at("generate", e))
        }
    })?;
    report.time("write", || {
        manifest_write(&out, &ds, None).map_err(|e| CliError::at("write", e))
    })?;
    report.artifact("manifest.json");
    report.write()
}

fn poison_cmd(a: PoisonArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    let data = require(cfg.path("data", a.data), "--data")?;
    let scenario: Scenario = require(
        a.scenario.map(Scenario::from).or_else(|| {
            cfg.string("scenario", None)
                .and_then(|s| serde_json::from_value(Value::String(s)).ok())
        }),
        "--scenario",
    )?;
    let rate = require(cfg.f64("rate", a.rate), "--rate")?;
    if !(0.0..1.0).contains(&rate) {
        return Err(CliError::schema(format!("rate {rate} outside [0, 1)")));
    }
    let pcfg = PoisonConfig {
        scenario,
        trigger_angle: require(cfg.f64("angle", a.angle), "--angle")?,
        rate,
        target_class: require(cfg.usize("target", a.target), "--target")?,
        source_class: cfg.usize("source", a.source),
        placement: Default::default(),
        mca_include_target: false,
        seed,
    };
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "poison",
            "data": data.display().to_string(),
            "poison": serde_json::to_value(&pcfg).unwrap(),
        }),
    )?;
    let (ds, _, _) = report.time("load", || {
        manifest_read(&data).map_err(|e| CliError::at("load", e))
    })?;
    let (poisoned, flags, echo) = report.time("poison", || match (&ds, scenario) {
        (Dataset::Classification(set), Scenario::Sca | Scenario::Mca) => {
            let p = poison::poison_classification(set, &pcfg, None)
                .map_err(|e| CliError::at("poison", e))?;
            Ok((
                Dataset::Classification(p.set),
                p.flags,
                serde_json::to_value(&p.config).unwrap(),
            ))
        }
        (Dataset::Detection(set), Scenario::Oma | Scenario::Oha) => {
            let pool_size = cfg.usize("pool_size", a.pool_size).unwrap_or(40);
            let obj_size = cfg.usize("pool_obj_size", a.pool_obj_size).unwrap_or(16);
            let pool = rotlab::dataset::gen_object_pool(
                set.num_classes,
                pool_size,
                obj_size,
                seed ^ 0xB00,
                cfg.usize_list("family_map").as_deref(),
            );
            let p = poison::poison_detection(set, &pcfg, &pool)
                .map_err(|e| CliError::at("poison", e))?;
            Ok((
                Dataset::Detection(p.set),
                p.flags,
                serde_json::to_value(&p.config).unwrap(),
            ))
        }
        _ => Err(CliError::schema(
            "scenario does not match the dataset kind (sca/mca need classification, oma/oha need detection)",
        )),
    })?;
    report.time("write", || {
        manifest_write(&out, &poisoned, Some((&flags, echo)))
            .map_err(|e| CliError::at("write", e))
    })?;
    report.artifact("manifest.json");
    report.metrics = json!({
        "poisoned_items": flags.iter().filter(|&&f| f).count(),
        "total_items": flags.len(),
    });
    report.write()
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    let data = require(cfg.path("data", a.data), "--data")?;
    let augment = match cfg.string("augment", a.augment.clone()) {
        Some(s) => parse_augment(&s)?,
        None => AugmentPolicy::none(),
    };
    let tcfg = TrainConfig {
        learning_rate: cfg.f64("lr", a.lr).unwrap_or(0.1),
        momentum: cfg.f64("momentum", None).unwrap_or(0.0),
        epochs: cfg.usize("epochs", a.epochs).unwrap_or(30),
        batch_size: cfg.usize("batch", a.batch).unwrap_or(32),
        augment,
        seed,
    };
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "train",
            "data": data.display().to_string(),
            "train": serde_json::to_value(&tcfg).unwrap(),
        }),
    )?;
    let (ds, _, _) = report.time("load", || {
        manifest_read(&data).map_err(|e| CliError::at("load", e))
    })?;
    let ckpt = report.time("train", || match &ds {
        Dataset::Classification(set) => model::train_classifier(set, &tcfg)
            .map(Checkpoint::Classifier)
            .map_err(|e| CliError::at("train", e)),
        Dataset::Detection(set) => model::train_detector(set, &tcfg)
            .map(Checkpoint::Detector)
            .map_err(|e| CliError::at("train", e)),
    })?;
    report.time("write", || {
        save_checkpoint(&out.join("model.rtlb"), &ckpt).map_err(|e| CliError::at("write", e))
    })?;
    report.artifact("model.rtlb");
    report.write()
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::at("load-model", e))
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    let model_path = require(cfg.path("model", a.model), "--model")?;
    let data = require(cfg.path("data", a.data), "--data")?;
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "eval",
            "model": model_path.display().to_string(),
            "data": data.display().to_string(),
        }),
    )?;
    let ckpt = report.time("load-model", || load_model(&model_path))?;
    let (ds, _, _) = report.time("load-data", || {
        manifest_read(&data).map_err(|e| CliError::at("load-data", e))
    })?;
    let mut bundle = metrics::MetricBundle::default();
    match (&ckpt, &ds) {
        (Checkpoint::Classifier(params), Dataset::Classification(set)) => {
            let angle = require(cfg.f64("angle", a.angle), "--angle")?;
            let target = require(cfg.usize("target", a.target), "--target")?;
            let (cda, asr) = report.time("eval", || {
                metrics::eval_classifier(params, &set.examples, Angle::from_degrees(angle), target)
                    .map_err(|e| CliError::at("eval", e))
            })?;
            bundle.cda = Some(cda);
            bundle.asr = Some(asr);
        }
        (Checkpoint::Detector(params), Dataset::Detection(set)) => {
            let (preds, truths) = report.time("detect", || {
                let mut preds = Vec::new();
                let mut truths = Vec::new();
                for s in &set.samples {
                    preds.push(
                        model::detect(params, &s.image, 0.5, 0.5)
                            .map_err(|e| CliError::at("detect", e))?,
                    );
                    truths.push(s.boxes.clone());
                }
                Ok((preds, truths))
            })?;
            let mut ap_sum = 0.0;
            for class in 0..set.num_classes {
                ap_sum += metrics::ap_at_50(&preds, &truths, class);
            }
            bundle.ap50 = Some(ap_sum / set.num_classes as f64);

            if let Some(scn) = a.scenario {
                let scenario: Scenario = scn.into();
                let angle = require(cfg.f64("angle", a.angle), "--angle")?;
                let target = require(cfg.usize("target", a.target), "--target")?;
                let pool = rotlab::dataset::gen_object_pool(
                    set.num_classes,
                    cfg.usize("pool_size", a.pool_size).unwrap_or(20),
                    cfg.usize("pool_obj_size", a.pool_obj_size).unwrap_or(16),
                    cfg.u64("pool_seed", a.pool_seed).unwrap_or(seed ^ 0xE7A1),
                    cfg.usize_list("family_map").as_deref(),
                );
                let rcfg = metrics::RecallEvalConfig {
                    canvas: params.canvas,
                    seed,
                    ..Default::default()
                };
                let (cdr, dasr) = report.time("recall", || {
                    metrics::detection_recall_metrics(
                        params,
                        &pool,
                        scenario,
                        Angle::from_degrees(angle),
                        target,
                        &rcfg,
                    )
                    .map_err(|e| CliError::at("recall", e))
                })?;
                bundle.cdr = Some(cdr);
                bundle.dasr = Some(dasr);
            }
        }
        _ => {
            return Err(CliError::schema(
                "model kind does not match the dataset kind",
            ))
        }
    }
    report.metrics = serde_json::to_value(&bundle).unwrap();
    report.write()
}

fn sweep_cmd(a: SweepArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (_seed, out) = resolve_common(&a.common, &cfg)?;
    let model_path = require(cfg.path("model", a.model), "--model")?;
    let data = require(cfg.path("data", a.data), "--data")?;
    let target = require(cfg.usize("target", a.target), "--target")?;
    let step = cfg.f64("sweep_step", a.sweep_step).unwrap_or(5.0);
    if step <= 0.0 {
        return Err(CliError::schema(format!("sweep step {step} must be positive")));
    }
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "sweep",
            "model": model_path.display().to_string(),
            "data": data.display().to_string(),
            "target": target,
            "sweep_step": step,
        }),
    )?;
    let ckpt = report.time("load-model", || load_model(&model_path))?;
    let Checkpoint::Classifier(params) = ckpt else {
        return Err(CliError::schema("sweep requires a classifier checkpoint"));
    };
    let (ds, _, _) = report.time("load-data", || {
        manifest_read(&data).map_err(|e| CliError::at("load-data", e))
    })?;
    let Dataset::Classification(set) = ds else {
        return Err(CliError::schema("sweep requires a classification dataset"));
    };
    let sweep = report.time("sweep", || {
        metrics::asr_sweep(&params, &set.examples, target, step, 0.5)
            .map_err(|e| CliError::at("sweep", e))
    })?;
    std::fs::write(out.join("sweep.csv"), metrics::sweep_to_csv(&sweep))
        .map_err(|e| CliError::at("write", e))?;
    report.artifact("sweep.csv");
    report.metrics = json!({
        "vulnerable_ranges": sweep.vulnerable_ranges,
        "max_asr": sweep.asr.iter().cloned().fold(0.0f64, f64::max),
    });
    report.write()
}

fn defend_cmd(a: DefendArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    let model_path = require(cfg.path("model", a.model), "--model")?;
    let data = require(cfg.path("data", a.data), "--data")?;
    let kind = require(a.defense, "--defense")?;
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "defend",
            "model": model_path.display().to_string(),
            "data": data.display().to_string(),
            "defense": match kind {
                DefenseKind::Ss => "ss",
                DefenseKind::Ac => "ac",
                DefenseKind::Strip => "strip",
                DefenseKind::Nc => "nc",
            },
        }),
    )?;
    let ckpt = report.time("load-model", || load_model(&model_path))?;
    let Checkpoint::Classifier(params) = ckpt else {
        return Err(CliError::schema("defenses operate on classifier checkpoints"));
    };
    let (ds, flags, pconf) = report.time("load-data", || {
        manifest_read(&data).map_err(|e| CliError::at("load-data", e))
    })?;
    let Dataset::Classification(set) = ds else {
        return Err(CliError::schema("defenses need a classification dataset"));
    };
    let poison_ids: Vec<usize> = flags
        .unwrap_or_default()
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i)
        .collect();

    let features = || -> Result<defense::FeatureMatrix, CliError> {
        let mut rows = Vec::new();
        for ex in &set.examples {
            rows.push(
                model::hidden_activations(&params, &ex.image)
                    .map_err(|e| CliError::at("features", e))?,
            );
        }
        Ok(defense::FeatureMatrix {
            ids: (0..rows.len()).collect(),
            labels: set.examples.iter().map(|e| e.label).collect(),
            rows,
        })
    };

    let dreport = match kind {
        DefenseKind::Ss => {
            let rate = cfg.f64("rate", a.rate).or_else(|| {
                pconf
                    .as_ref()
                    .and_then(|p| p.get("rate"))
                    .and_then(Value::as_f64)
            });
            let rate = require(rate, "--rate (or a poisoned manifest)")?;
            let f = report.time("features", features)?;
            report.time("defend", || {
                defense::spectral_signature(&f, rate, &poison_ids)
                    .map_err(|e| CliError::at("defend", e))
            })?
        }
        DefenseKind::Ac => {
            let f = report.time("features", features)?;
            report.time("defend", || {
                defense::activation_clustering(&f, seed, &poison_ids)
                    .map_err(|e| CliError::at("defend", e))
            })?
        }
        DefenseKind::Strip => {
            let clean_dir = require(cfg.path("clean", a.clean), "--clean")?;
            let (clean_ds, _, _) =
                manifest_read(&clean_dir).map_err(|e| CliError::at("load-clean", e))?;
            let Dataset::Classification(clean) = clean_ds else {
                return Err(CliError::schema("--clean must be a classification dataset"));
            };
            let imgs: Vec<_> = clean.examples.iter().map(|e| e.image.clone()).collect();
            let half = imgs.len() / 2;
            if half < defense::STRIP_OVERLAYS {
                return Err(CliError::schema(format!(
                    "clean set too small: need at least {} images for blending",
                    2 * defense::STRIP_OVERLAYS
                )));
            }
            let suspects: Vec<_> = set.examples.iter().map(|e| e.image.clone()).collect();
            let outcome = report.time("defend", || {
                defense::strip(
                    &params,
                    &suspects,
                    &imgs[..half],
                    &imgs[half..],
                    defense::STRIP_OVERLAYS,
                    defense::STRIP_SACRIFICE,
                    seed,
                    &poison_ids,
                )
                .map_err(|e| CliError::at("defend", e))
            })?;
            outcome.report
        }
        DefenseKind::Nc => {
            let clean_dir = require(cfg.path("clean", a.clean), "--clean")?;
            let (clean_ds, _, _) =
                manifest_read(&clean_dir).map_err(|e| CliError::at("load-clean", e))?;
            let Dataset::Classification(clean) = clean_ds else {
                return Err(CliError::schema("--clean must be a classification dataset"));
            };
            let batch: Vec<_> = clean
                .examples
                .iter()
                .take(16)
                .map(|e| e.image.clone())
                .collect();
            let outcome = report.time("defend", || {
                defense::neural_cleanse(
                    &params,
                    &batch,
                    defense::NC_ITERS,
                    defense::NC_LAMBDA,
                    seed,
                )
                .map_err(|e| CliError::at("defend", e))
            })?;
            report.metrics = json!({ "detected": outcome.detected });
            outcome.report
        }
    };
    std::fs::write(
        out.join("defense.json"),
        serde_json::to_string_pretty(&dreport).unwrap(),
    )
    .map_err(|e| CliError::at("write", e))?;
    report.artifact("defense.json");
    let mut m = report.metrics.as_object().cloned().unwrap_or_default();
    m.insert("elimination".into(), json!(dreport.elimination));
    m.insert("sacrifice".into(), json!(dreport.sacrifice));
    report.metrics = Value::Object(m);
    report.write()
}

fn theory_cmd(a: TheoryArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    match a.action {
        TheoryAction::CheckTheorem1 {
            angle,
            sigma,
            rate,
            grid_step,
        } => {
            let angle = cfg.f64("angle", angle).unwrap_or(45.0);
            let sigma = cfg.f64("sigma", sigma).unwrap_or(30.0);
            let rate = cfg.f64("rate", rate).unwrap_or(0.01);
            let step = cfg.f64("grid_step", grid_step).unwrap_or(0.1);
            let mut report = RunReport::new(
                &out,
                json!({
                    "subcommand": "theory check-theorem1",
                    "angle": angle, "sigma": sigma, "rate": rate, "grid_step": step,
                }),
            )?;
            let outcome = report.time("check", || {
                let mix = theory::RotationMixture::new(angle, sigma, rate)
                    .map_err(|e| CliError::schema(e.to_string()))?;
                Ok(theory::theorem1_check(&mix, step))
            })?;
            report.metrics = serde_json::to_value(&outcome).unwrap();
            report.write()
        }
        TheoryAction::BoundCurve {
            angle,
            sigma,
            rate,
            step,
        } => {
            let angle = cfg.f64("angle", angle).unwrap_or(45.0);
            let sigma = cfg.f64("sigma", sigma).unwrap_or(30.0);
            let rate = cfg.f64("rate", rate).unwrap_or(0.01);
            let step = cfg.f64("step", step).unwrap_or(1.0);
            let mut report = RunReport::new(
                &out,
                json!({
                    "subcommand": "theory bound-curve",
                    "angle": angle, "sigma": sigma, "rate": rate, "step": step,
                }),
            )?;
            report.time("curve", || {
                let mix = theory::RotationMixture::new(angle, sigma, rate)
                    .map_err(|e| CliError::schema(e.to_string()))?;
                let csv =
                    theory::bound_curve_to_csv(&mix, step, theory::BoundDenominator::Mixture);
                std::fs::write(out.join("bound.csv"), csv)
                    .map_err(|e| CliError::at("write", e))
            })?;
            report.artifact("bound.csv");
            report.write()
        }
        TheoryAction::ShiftSim {
            angle,
            rate,
            target,
            sigmas,
            seeds,
            classes,
            per_class,
            canvas,
            epochs,
            sweep_step,
        } => {
            let angle = cfg.f64("angle", angle).unwrap_or(45.0);
            let rate = cfg.f64("rate", rate).unwrap_or(0.05);
            let target = cfg.usize("target", target).unwrap_or(0);
            let sigmas: Vec<f64> = match cfg.string("sigmas", sigmas) {
                Some(s) => parse_list(&s, "sigma")?,
                None => vec![0.0, 15.0, 30.0],
            };
            let seeds: Vec<u64> = match cfg.string("seeds", seeds) {
                Some(s) => parse_list(&s, "seed")?,
                None => vec![1, 2, 3],
            };
            let spec = SyntheticSpec {
                num_classes: cfg.usize("classes", classes).unwrap_or(4),
                samples_per_class: cfg.usize("per_class", per_class).unwrap_or(60),
                canvas: cfg.usize("canvas", canvas).unwrap_or(32),
                orientation_jitter: 5.0,
                seed,
                family_map: None,
            };
            spec.validate()
                .map_err(|e| CliError::schema(e.to_string()))?;
            let scfg = theory::ShiftSimConfig {
                poison: PoisonConfig {
                    scenario: Scenario::Mca,
                    trigger_angle: angle,
                    rate,
                    target_class: target,
                    source_class: None,
                    placement: Default::default(),
                    mca_include_target: false,
                    seed,
                },
                train: TrainConfig {
                    epochs: cfg.usize("epochs", epochs).unwrap_or(20),
                    seed,
                    ..Default::default()
                },
                sigmas,
                seeds,
                sweep_step: cfg.f64("sweep_step", sweep_step).unwrap_or(5.0),
            };
            let mut report = RunReport::new(
                &out,
                json!({
                    "subcommand": "theory shift-sim",
                    "spec": serde_json::to_value(&spec).unwrap(),
                    "sim": serde_json::to_value(&scfg).unwrap(),
                }),
            )?;
            let rows = report.time("simulate", || {
                let base = rotlab::dataset::gen_classification_dataset(&spec)
                    .map_err(|e| CliError::at("simulate", e))?;
                let test_spec = SyntheticSpec {
                    seed: spec.seed ^ 0x7E57,
                    samples_per_class: 40,
                    ..spec.clone()
                };
                let test = rotlab::dataset::gen_classification_dataset(&test_spec)
                    .map_err(|e| CliError::at("simulate", e))?;
                theory::angle_shift_sim(&base, &test.examples, &scfg)
                    .map_err(|e| CliError::at("simulate", e))
            })?;
            let table = theory::sim_table_json(&rows);
            std::fs::write(
                out.join("shift_sim.json"),
                serde_json::to_string_pretty(&table).unwrap(),
            )
            .map_err(|e| CliError::at("write", e))?;
            report.artifact("shift_sim.json");
            report.metrics = table;
            report.write()
        }
    }
}

fn corrupt_cmd(a: CorruptArgs) -> Result<(), CliError> {
    let cfg = FileCfg::load(&a.common.config)?;
    let (seed, out) = resolve_common(&a.common, &cfg)?;
    let data = require(cfg.path("data", a.data), "--data")?;
    let noise = cfg.f64("noise", a.noise);
    let blur = cfg.usize("blur", a.blur);
    let kind = match (noise, blur) {
        (Some(sigma), None) => Corruption::GaussianNoise { sigma },
        (None, Some(kernel)) => {
            if kernel % 2 == 0 {
                return Err(CliError::schema(format!("blur kernel {kernel} must be odd")));
            }
            Corruption::GaussianBlur { kernel }
        }
        _ => {
            return Err(CliError::schema(
                "exactly one of --noise or --blur is required",
            ))
        }
    };
    let mut report = RunReport::new(
        &out,
        json!({
            "subcommand": "corrupt",
            "data": data.display().to_string(),
            "corruption": format!("{kind:?}"),
        }),
    )?;
    let (ds, flags, pconf) = report.time("load", || {
        manifest_read(&data).map_err(|e| CliError::at("load", e))
    })?;
    let corrupted = report.time("corrupt", || {
        let apply = |img: &rotlab::Image, i: usize| {
            corrupt(img, kind, seed ^ rotlab::dataset::sample_seed(0xC0, i))
                .map_err(|e| CliError::at("corrupt", e))
        };
        Ok(match &ds {
            Dataset::Classification(set) => {
                let mut set = set.clone();
                for (i, ex) in set.examples.iter_mut().enumerate() {
                    ex.image = apply(&ex.image, i)?;
                }
                Dataset::Classification(set)
            }
            Dataset::Detection(set) => {
                let mut set = set.clone();
                for (i, s) in set.samples.iter_mut().enumerate() {
                    s.image = apply(&s.image, i)?;
                }
                Dataset::Detection(set)
            }
        })
    })?;
    report.time("write", || {
        let poison = flags
            .as_ref()
            .zip(pconf)
            .map(|(f, c)| (f.as_slice(), c));
        manifest_write(&out, &corrupted, poison).map_err(|e| CliError::at("write", e))
    })?;
    report.artifact("manifest.json");
    report.write()
}

fn report_cmd(a: ReportArgs) -> Result<(), CliError> {
    let path = a.out.join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::schema(format!("cannot read {}: {e}", path.display())))?;
    let report: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::schema(format!("report is not valid JSON: {e}")))?;
    if let Some(artifacts) = report.get("artifacts").and_then(Value::as_array) {
        for art in artifacts {
            let Some(rel) = art.as_str() else {
                return Err(CliError::schema("artifact entries must be strings"));
            };
            if !a.out.join(rel).exists() {
                return Err(CliError::at(
                    "report",
                    format!("artifact {rel} referenced by report.json is missing"),
                ));
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}
