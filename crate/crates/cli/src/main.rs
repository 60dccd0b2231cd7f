//! `xtalk`: file-based pipeline from synthetic layouts to crosstalk-aware
//! stage delays.
//!
//! ```text
//! xtalk gen --config suite.json --out designs/
//! xtalk oracle designs/synth-000.json --out labels/synth-000.json
//! xtalk features designs/synth-000.json --labels labels/synth-000.json --out data/synth-000.csv
//! xtalk train data/*.csv --out model.xtm
//! xtalk predict designs/synth-007.json --model model.xtm --out report.json
//! xtalk eval report.json --labels labels/synth-007.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use xtalk::bench::{generate_suite, GenConfig, SuiteManifest};
use xtalk::error::{
    DatasetError, GenError, LabelError, LayoutError, ModelError, OracleError, StaError,
};
use xtalk::features::{attach_labels, extract_features, load_samples, save_samples, Dataset};
use xtalk::layout::{extract_coupling_pairs, load_design, save_design, Design, NetId};
use xtalk::model::{load_model, save_model, train_two_step, TrainConfig};
use xtalk::oracle::{sweep_skew, write_sweep_table, SweepConfig};
use xtalk::sta::{build_report, score_report, write_table, CrosstalkReport};
use xtalk::window::{
    load_labels, load_summary, oracle_label_design, save_labels, save_summary, summary_path,
    window_labels, LabelConfig, OracleSummary, PairClass, PairLabel, DEFAULT_THRESHOLD,
};

#[derive(Parser)]
#[command(name = "xtalk", version, about = "Crosstalk-aware interconnect delay estimation")]
struct Cli {
    /// Worker threads; 0 uses one per core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// More logging on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a suite of synthetic designs.
    ///
    /// Writes one design file per design, `suite.json` with per-design seeds
    /// and statistics, and `run.manifest.json`.
    Gen(GenArgs),
    /// Label every coupling pair of a design with the RC oracle.
    ///
    /// Writes the pair labels, a `<stem>.oracle.json` sidecar with quiet
    /// segment delays and per-net golden delays, and a run manifest.
    Oracle(OracleArgs),
    /// Sweep aggressor arrival on a two-net bundle and tabulate the victim
    /// delay change.
    Sweep(SweepArgs),
    /// Extract one feature row per segment, labeled when oracle labels are
    /// given.
    Features(FeaturesArgs),
    /// Train the classifier, delta regressor and quiet-delay regressor.
    Train(TrainArgs),
    /// Predict stage delays for every net of a design.
    Predict(PredictArgs),
    /// Score a prediction report against oracle labels.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Suite config: `{"generator": {..}, "designs": N, "seed": S}`; all
    /// keys optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Number of designs; overrides the config.
    #[arg(long)]
    designs: Option<usize>,
    /// Suite seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct OracleArgs {
    /// Design file.
    design: PathBuf,
    /// Output label file.
    #[arg(long)]
    out: PathBuf,
    /// Fixed simulation step (ps); derived from the network when absent.
    #[arg(long)]
    dt: Option<f64>,
    /// RC sections per wire.
    #[arg(long, default_value_t = 8)]
    segments_per_wire: usize,
    /// |delta| above this is TSI (ps).
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Extraction distance (µm); three minimum spacings when absent.
    #[arg(long)]
    w_max: Option<f64>,
    /// Guard band added to victim windows when comparing window labels with
    /// the oracle (ps).
    #[arg(long, default_value_t = 0.0)]
    guard: f64,
    /// Skip the all-neighbors-switching golden runs.
    #[arg(long)]
    no_golden: bool,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// Bundle config (JSON, keys optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// First aggressor input arrival (ps).
    #[arg(long, default_value_t = 0.0)]
    from: f64,
    /// Last aggressor input arrival (ps).
    #[arg(long, default_value_t = 200.0)]
    to: f64,
    /// Arrival step (ps).
    #[arg(long, default_value_t = 5.0)]
    step: f64,
}

#[derive(clap::Args)]
struct FeaturesArgs {
    /// Design file.
    design: PathBuf,
    /// Oracle labels; their `.oracle.json` sidecar must sit next to them.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Extraction distance (µm) for unlabeled designs.
    #[arg(long, conflicts_with = "labels")]
    w_max: Option<f64>,
    /// Output dataset (CSV). The file stem names the design in traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitBy {
    /// Whole designs go to one side.
    Design,
    /// Samples are shuffled, stratified by class.
    Sample,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Labeled datasets (CSV).
    #[arg(required = true)]
    datasets: Vec<PathBuf>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Model hyperparameters (JSON, keys optional).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of samples used for training.
    #[arg(long, default_value_t = 0.7)]
    split: f64,
    #[arg(long, value_enum, default_value_t = SplitBy::Design)]
    split_by: SplitBy,
    /// Held-out datasets that replace the random test split.
    #[arg(long, num_args = 1..)]
    test: Vec<PathBuf>,
    /// Grid-search tree depth, tree count, learning rate and leaf count.
    #[arg(long)]
    grid: bool,
    /// Also fit and score a single regressor on the total segment delay.
    #[arg(long)]
    onestep: bool,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// Design file.
    design: PathBuf,
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Output report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Oracle labels; adds golden columns to the report.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated nets forming a path, e.g. `3,17,42`. Repeatable.
    #[arg(long = "path", value_name = "NETS")]
    paths: Vec<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Report written by `predict`.
    report: PathBuf,
    /// Oracle labels for the same design.
    #[arg(long)]
    labels: PathBuf,
    /// Also write the scores as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    context: String,
}

const IO: (u8, &str) = (1, "io");
const USAGE: (u8, &str) = (2, "usage");
const VALIDATION: (u8, &str) = (3, "validation");
const NUMERICAL: (u8, &str) = (4, "numerical");

impl Failure {
    fn new((code, kind): (u8, &'static str), message: impl Display, context: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.to_string(),
            context: context.into(),
        }
    }

    fn usage(message: impl Display) -> Self {
        Self::new(USAGE, message, "check the flags with --help")
    }
}

trait Classify: Display {
    fn class(&self) -> (u8, &'static str);
}

impl Classify for std::io::Error {
    fn class(&self) -> (u8, &'static str) {
        match self.kind() {
            std::io::ErrorKind::InvalidData => VALIDATION,
            _ => IO,
        }
    }
}

impl Classify for serde_json::Error {
    fn class(&self) -> (u8, &'static str) {
        if self.is_io() {
            IO
        } else {
            VALIDATION
        }
    }
}

impl Classify for LayoutError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            LayoutError::Io { .. } => IO,
            _ => VALIDATION,
        }
    }
}

impl Classify for OracleError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            OracleError::Diverged { .. } | OracleError::NoCrossing { .. } => NUMERICAL,
            _ => VALIDATION,
        }
    }
}

impl Classify for LabelError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            LabelError::MissingOracle { .. } => NUMERICAL,
            LabelError::Oracle(e) => e.class(),
        }
    }
}

impl Classify for GenError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            GenError::Oracle(e) => e.class(),
            GenError::Layout(e) => e.class(),
            _ => VALIDATION,
        }
    }
}

impl Classify for DatasetError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            DatasetError::BadFraction(_) => USAGE,
            DatasetError::Io(e) => e.class(),
            _ => VALIDATION,
        }
    }
}

impl Classify for ModelError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            ModelError::SingleClass | ModelError::InsufficientSamples { .. } | ModelError::EmptyEval => {
                NUMERICAL
            }
            ModelError::Dataset(e) => e.class(),
            ModelError::Io(e) => e.class(),
            _ => VALIDATION,
        }
    }
}

impl Classify for StaError {
    fn class(&self) -> (u8, &'static str) {
        match self {
            StaError::NonPositiveStage(_) => NUMERICAL,
            StaError::Model(e) => e.class(),
            StaError::Dataset(e) => e.class(),
            _ => VALIDATION,
        }
    }
}

trait Context<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Classify> Context<T> for Result<T, E> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(e.class(), &e, f()))
    }
}

/// Written next to every command's outputs. Everything but `timestamp` and
/// `duration_s` is reproducible.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    version: &'static str,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    jobs: usize,
    duration_s: f64,
    /// Seconds since the Unix epoch.
    timestamp: u64,
}

struct Run {
    command: &'static str,
    started: Instant,
}

impl Run {
    fn finish(
        &self,
        at: &Path,
        config: Value,
        inputs: &[&Path],
        outputs: &[&Path],
        seeds: &[(&str, u64)],
    ) -> Result<(), Failure> {
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            jobs: rayon::current_num_threads(),
            duration_s: self.started.elapsed().as_secs_f64(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        write_json(&m, at)
    }
}

/// `dir/x.json` -> `dir/x.manifest.json`.
fn manifest_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write_json<T: Serialize + ?Sized>(v: &T, path: &Path) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(v).context(|| format!("serializing {}", path.display()))?;
    s.push('\n');
    ensure_parent(path)?;
    fs::write(path, s).context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).context(|| format!("parsing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).context(|| format!("creating directory {}", p.display()))
        }
        _ => Ok(()),
    }
}

fn load(path: &Path) -> Result<Design, Failure> {
    load_design(path).context(|| format!("loading design {}", path.display()))
}

fn load_oracle(labels: &Path) -> Result<(Vec<PairLabel>, OracleSummary), Failure> {
    let l = load_labels(labels).context(|| format!("loading labels {}", labels.display()))?;
    let sp = summary_path(labels);
    let s = load_summary(&sp).context(|| format!("loading oracle sidecar {}", sp.display()))?;
    Ok((l, s))
}

fn check_positive(name: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Failure::usage(format!("--{name} must be a positive number, got {v}")))
    }
}

#[derive(Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SuiteConfig {
    generator: GenConfig,
    designs: Option<usize>,
    seed: Option<u64>,
}

fn cmd_gen(run: &Run, a: &GenArgs) -> Result<(), Failure> {
    let cfg: SuiteConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SuiteConfig::default(),
    };
    let count = a.designs.or(cfg.designs).unwrap_or(1);
    let seed = a.seed.or(cfg.seed).unwrap_or(cfg.generator.seed);
    if count == 0 {
        return Err(Failure::usage("--designs must be at least 1"));
    }
    let (designs, manifest): (Vec<Design>, SuiteManifest) =
        generate_suite(&cfg.generator, count, seed).context(|| "generating the suite".into())?;
    fs::create_dir_all(&a.out).context(|| format!("creating {}", a.out.display()))?;
    let mut outputs = Vec::new();
    for d in &designs {
        let path = a.out.join(format!("{}.json", d.name()));
        save_design(d, &path).context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    let suite = a.out.join("suite.json");
    write_json(&manifest, &suite)?;
    outputs.push(suite);
    for e in &manifest.designs {
        println!(
            "{}  nets {}  segments {}  pairs {}  coupled {:.3}",
            e.name, e.nets, e.segments, e.pairs, e.coupled_fraction
        );
    }
    let config = json!({ "generator": cfg.generator, "designs": count, "seed": seed });
    let seeds: Vec<(&str, u64)> = manifest.designs.iter().map(|e| (e.name.as_str(), e.seed)).collect();
    let mut all = vec![("suite", seed)];
    all.extend(seeds);
    let outs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    run.finish(&a.out.join("run.manifest.json"), config, &inputs, &outs, &all)
}

fn cmd_oracle(run: &Run, a: &OracleArgs) -> Result<(), Failure> {
    if let Some(dt) = a.dt {
        check_positive("dt", dt)?;
    }
    if let Some(w) = a.w_max {
        check_positive("w-max", w)?;
    }
    if a.segments_per_wire == 0 {
        return Err(Failure::usage("--segments-per-wire must be at least 1"));
    }
    if !(a.threshold >= 0.0) {
        return Err(Failure::usage(format!("--threshold must be >= 0, got {}", a.threshold)));
    }
    if !(a.guard >= 0.0) {
        return Err(Failure::usage(format!("--guard must be >= 0, got {}", a.guard)));
    }
    let design = load(&a.design)?;
    let cfg = LabelConfig {
        w_max: a.w_max,
        segments_per_wire: a.segments_per_wire,
        dt: a.dt,
        threshold: a.threshold,
        golden: !a.no_golden,
    };
    let ol = oracle_label_design(&design, &cfg).context(|| format!("labeling {}", a.design.display()))?;
    ensure_parent(&a.out)?;
    save_labels(&ol.labels, &a.out).context(|| format!("writing {}", a.out.display()))?;
    let sidecar = summary_path(&a.out);
    save_summary(&ol.summary, &sidecar).context(|| format!("writing {}", sidecar.display()))?;

    let windows = window_labels(&design, &ol.pairs, a.guard);
    let tsi = ol.labels.iter().filter(|l| l.classification == PairClass::Tsi).count();
    let agree = windows
        .iter()
        .zip(&ol.labels)
        .filter(|(w, o)| w.classification == o.classification)
        .count();
    let missed = windows
        .iter()
        .zip(&ol.labels)
        .filter(|(w, o)| w.classification == PairClass::Fsi && o.classification == PairClass::Tsi)
        .count();
    let n = ol.labels.len();
    println!(
        "{}: {} directed pairs, {} TSI ({:.2}%), window agreement {:.4}, window misses {}",
        design.name(),
        n,
        tsi,
        100.0 * tsi as f64 / n.max(1) as f64,
        agree as f64 / n.max(1) as f64,
        missed
    );
    let config = json!({ "label": cfg, "guard": a.guard });
    run.finish(&manifest_path(&a.out), config, &[&a.design], &[&a.out, &sidecar], &[])
}

fn cmd_sweep(run: &Run, a: &SweepArgs) -> Result<(), Failure> {
    check_positive("step", a.step)?;
    if !(a.to >= a.from) {
        return Err(Failure::usage(format!("--to ({}) must not be below --from ({})", a.to, a.from)));
    }
    let cfg: SweepConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SweepConfig::default(),
    };
    let rows = sweep_skew(&cfg, a.from, a.to, a.step).context(|| "sweeping aggressor arrival".into())?;
    let mut buf = Vec::new();
    write_sweep_table(&rows, &mut buf).context(|| "formatting the table".into())?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, buf).context(|| format!("writing {}", a.out.display()))?;
    let peak = rows.iter().map(|r| r.delta).fold(f64::NEG_INFINITY, f64::max);
    println!("{} rows, peak delta {:.3} ps", rows.len(), peak);
    let config = json!({ "bundle": cfg, "from": a.from, "to": a.to, "step": a.step });
    let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    run.finish(&manifest_path(&a.out), config, &inputs, &[&a.out], &[])
}

fn cmd_features(run: &Run, a: &FeaturesArgs) -> Result<(), Failure> {
    if let Some(w) = a.w_max {
        check_positive("w-max", w)?;
    }
    let design = load(&a.design)?;
    let mut inputs: Vec<&Path> = vec![&a.design];
    let (samples, w_max) = match &a.labels {
        Some(lp) => {
            let (labels, summary) = load_oracle(lp)?;
            if summary.design != design.name() {
                return Err(Failure::new(
                    VALIDATION,
                    format!("labels are for design `{}`, not `{}`", summary.design, design.name()),
                    format!("matching {} with {}", lp.display(), a.design.display()),
                ));
            }
            let pairs = extract_coupling_pairs(&design, summary.w_max);
            let mut s = extract_features(&design, &pairs, summary.w_max);
            attach_labels(&mut s, &labels, &summary).context(|| format!("attaching {}", lp.display()))?;
            inputs.push(lp);
            (s, summary.w_max)
        }
        None => {
            let w = a.w_max.unwrap_or_else(|| design.default_w_max());
            let pairs = extract_coupling_pairs(&design, w);
            (extract_features(&design, &pairs, w), w)
        }
    };
    ensure_parent(&a.out)?;
    save_samples(&samples, &a.out).context(|| format!("writing {}", a.out.display()))?;
    let coupled = samples.iter().filter(|s| s.features.is_coupled()).count();
    println!("{}: {} samples, {} coupled", design.name(), samples.len(), coupled);
    let config = json!({ "w_max": w_max, "labeled": a.labels.is_some() });
    run.finish(&manifest_path(&a.out), config, &inputs, &[&a.out], &[])
}

fn cmd_train(run: &Run, a: &TrainArgs) -> Result<(), Failure> {
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(Failure::usage(format!("--split must lie strictly between 0 and 1, got {}", a.split)));
    }
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.grid |= a.grid;
    cfg.onestep |= a.onestep;

    let read = |paths: &[PathBuf]| -> Result<Vec<_>, Failure> {
        let mut all = Vec::new();
        for p in paths {
            let s = load_samples(p).context(|| format!("loading dataset {}", p.display()))?;
            if let Some(i) = s.iter().position(|s| s.label.is_none()) {
                return Err(Failure::new(
                    VALIDATION,
                    format!("row {} has no label", i + 1),
                    format!("training needs labeled data; regenerate {} with --labels", p.display()),
                ));
            }
            all.extend(s);
        }
        Ok(all)
    };
    let samples = read(&a.datasets)?;
    let ds = Dataset::new(samples);
    let ds = match a.split_by {
        SplitBy::Design => ds.split_by_design(a.split, a.seed),
        SplitBy::Sample => ds.split(a.split, a.seed),
    }
    .context(|| "splitting the dataset".into())?;
    let ds = if a.test.is_empty() { ds } else { ds.with_test(read(&a.test)?) };
    let ds = ds.normalize().context(|| "normalizing features".into())?;
    let (model, report) = train_two_step(&ds, &cfg).context(|| "training".into())?;

    ensure_parent(&a.out)?;
    save_model(&model, &a.out).context(|| format!("writing {}", a.out.display()))?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report_path = a.out.with_file_name(format!("{stem}.report.json"));
    write_json(&report, &report_path)?;

    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!("train {}  test {}", ds.subset(xtalk::features::Split::Train).len(), ds.subset(xtalk::features::Split::Test).len());
    println!("step 1 accuracy         {}", fmt(report.classifier.classification.map(|c| c.accuracy)));
    println!("step 2 delta R2         {}", fmt(report.regressor.r2));
    println!("quiet delay R2          {}", fmt(report.nosi.r2));
    println!("two-step total R2       {}  (TSI {})", fmt(report.two_step.r2), fmt(report.two_step_tsi.r2));
    if let (Some(o), Some(ot)) = (&report.onestep, &report.onestep_tsi) {
        println!("one-step total R2       {}  (TSI {})", fmt(o.r2), fmt(ot.r2));
    }

    let mut inputs: Vec<&Path> = a.datasets.iter().map(|p| p.as_path()).collect();
    inputs.extend(a.test.iter().map(|p| p.as_path()));
    inputs.extend(a.config.iter().map(|p| p.as_path()));
    let config = json!({ "train": cfg, "split": a.split, "split_by": a.split_by });
    run.finish(
        &manifest_path(&a.out),
        config,
        &inputs,
        &[&a.out, &report_path],
        &[("split", a.seed), ("classifier", cfg.classifier.seed), ("regressor", cfg.regressor.seed)],
    )
}

fn parse_path(s: &str) -> Result<Vec<NetId>, Failure> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<NetId>()
                .map_err(|e| Failure::usage(format!("bad net id `{t}` in --path {s}: {e}")))
        })
        .collect()
}

fn cmd_predict(run: &Run, a: &PredictArgs) -> Result<(), Failure> {
    let paths = a.paths.iter().map(|s| parse_path(s)).collect::<Result<Vec<_>, _>>()?;
    let design = load(&a.design)?;
    let model = load_model(&a.model).context(|| format!("loading model {}", a.model.display()))?;
    let oracle = a.labels.as_deref().map(load_oracle).transpose()?;
    if let Some((_, s)) = &oracle {
        if s.design != design.name() {
            return Err(Failure::new(
                VALIDATION,
                format!("labels are for design `{}`, not `{}`", s.design, design.name()),
                "pass the labels produced for this design".to_string(),
            ));
        }
    }
    let mut report = build_report(
        &design,
        &model,
        oracle.as_ref().map(|(l, _)| l.as_slice()),
        oracle.as_ref().map(|(_, s)| s),
    )
    .context(|| format!("predicting {}", a.design.display()))?;
    for p in &paths {
        let d = report.path(p).context(|| format!("assembling path {p:?}"))?;
        report.paths.push(d);
    }
    write_json(&report, &a.out)?;

    let mut table = Vec::new();
    write_table(&report, &mut table).context(|| "formatting the table".into())?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    match &a.table {
        Some(t) => {
            ensure_parent(t)?;
            fs::write(t, &table).context(|| format!("writing {}", t.display()))?;
            outputs.push(t);
        }
        None => {
            std::io::stdout().write_all(&table).context(|| "writing to stdout".into())?;
        }
    }
    let mut inputs: Vec<&Path> = vec![&a.design, &a.model];
    inputs.extend(a.labels.as_deref());
    let config = json!({ "paths": paths, "w_max": report.w_max });
    run.finish(&manifest_path(&a.out), config, &inputs, &outputs, &[])
}

fn cmd_eval(run: &Run, a: &EvalArgs) -> Result<(), Failure> {
    let report: CrosstalkReport = read_json(&a.report)?;
    let (labels, summary) = load_oracle(&a.labels)?;
    if summary.design != report.design {
        return Err(Failure::new(
            VALIDATION,
            format!("labels are for design `{}`, report is for `{}`", summary.design, report.design),
            format!("matching {} with {}", a.labels.display(), a.report.display()),
        ));
    }
    let score = score_report(&report, &labels, &summary).context(|| "scoring the report".into())?;
    let c = &score.confusion;
    println!("design          {}", report.design);
    println!("nets            {}", score.nets);
    println!("stage R2        {:.4}", score.stage_r2);
    match score.accuracy_ratio {
        Some(r) => println!("accuracy ratio  {r:.4}"),
        None => println!("accuracy ratio  -"),
    }
    println!("pair accuracy   {:.4}", score.pair_accuracy);
    println!();
    println!("{:>14} {:>10} {:>10}", "", "oracle TSI", "oracle FSI");
    println!("{:>14} {:>10} {:>10}", "predicted TSI", c.tp, c.fp);
    println!("{:>14} {:>10} {:>10}", "predicted FSI", c.fn_, c.tn);
    if let Some(out) = &a.out {
        write_json(&score, out)?;
        run.finish(&manifest_path(out), json!({}), &[&a.report, &a.labels], &[out], &[])?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let name = match &cli.command {
        Command::Gen(_) => "gen",
        Command::Oracle(_) => "oracle",
        Command::Sweep(_) => "sweep",
        Command::Features(_) => "features",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::Eval(_) => "eval",
    };
    let run = Run {
        command: name,
        started: Instant::now(),
    };
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Failure::new(IO, e, "starting the worker pool"))
        .and_then(|pool| {
            pool.install(|| match &cli.command {
                Command::Gen(a) => cmd_gen(&run, a),
                Command::Oracle(a) => cmd_oracle(&run, a),
                Command::Sweep(a) => cmd_sweep(&run, a),
                Command::Features(a) => cmd_features(&run, a),
                Command::Train(a) => cmd_train(&run, a),
                Command::Predict(a) => cmd_predict(&run, a),
                Command::Eval(a) => cmd_eval(&run, a),
            })
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = json!({
                "error": f.kind,
                "code": f.code,
                "command": name,
                "message": f.message,
            });
            eprintln!("{line}");
            eprintln!("xtalk {name}: {}: {}", f.context, f.message);
            ExitCode::from(f.code)
        }
    }
}
