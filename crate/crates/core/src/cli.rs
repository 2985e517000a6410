//! The `gradistill` command line.
//!
//! Every verb shares one flag namespace. Values resolve in the order
//! explicit flag, `--config FILE` record, `GRADISTILL_SEED` (seed only),
//! built-in default. Each verb rejects flags it does not use, checks its
//! required flags before touching any file, and writes a `config.txt` echo
//! into `--out` that reproduces the run via `--config`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::augment::{blend, overlay_map, AugmentError, RngStream};
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::cifar::{self, Split};
use crate::data::igcache::{read_ig_cache, IgCache};
use crate::data::metrics::{write_metrics, MetricsReport};
use crate::data::ppm::export_panel;
use crate::data::record::Record;
use crate::data::{DataError, Dataset};
use crate::harness::bench::BenchComparison;
use crate::harness::grid::write_grid_csv;
use crate::harness::{
    benchmark_latency, evaluate, grid_search, run_ablation, train, GridSearchSpace, HarnessError,
    Mode, SoftTargetInput, TrainConfig, TrainInputs,
};
use crate::ig::{precompute_dataset, Baseline, IGConfig, IgError, TargetPolicy};
use crate::models::{Architecture, Model, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "GRADISTILL_SEED";
const GRID_DEFAULT_EPOCHS: &str = "10";
const VALIDATION_MAX: usize = 5000;

macro_rules! options {
    ($( $(#[$m:meta])* $field:ident : $ty:ty = $flag:literal ),* $(,)?) => {
        /// Flags shared by every verb; all optional at parse time.
        #[derive(Args, Debug, Clone, Default, PartialEq)]
        pub struct Options {
            $( $(#[$m])* #[arg(long = $flag)] pub $field: Option<$ty>, )*
        }

        impl Options {
            pub const FLAGS: &'static [&'static str] = &[$($flag),*];

            /// `(flag, value)` for every flag that is set, in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $( if let Some(x) = &self.$field { v.push(($flag, x.to_string())); } )*
                v
            }

            /// Sets `key` from text unless it already holds a value.
            /// Returns `Ok(false)` for an unknown key.
            fn fill(&mut self, key: &str, value: &str) -> Result<bool, String> {
                match key {
                    $( $flag => {
                        if self.$field.is_none() {
                            self.$field = Some(value.parse::<$ty>().map_err(|e| format!("{key}={value}: {e}"))?);
                        }
                        Ok(true)
                    } )*
                    _ => Ok(false),
                }
            }
        }
    };
}

options! {
    /// CIFAR-10 binary directory.
    data: String = "data",
    /// Teacher checkpoint.
    teacher: String = "teacher",
    student_arch: Architecture = "student-arch",
    teacher_arch: Architecture = "teacher-arch",
    /// Attribution cache to read.
    ig_cache: String = "ig-cache",
    /// Output directory; nothing is written elsewhere.
    out: String = "out",
    epochs: usize = "epochs",
    lr: f64 = "lr",
    batch: usize = "batch",
    alpha: f64 = "alpha",
    temperature: f64 = "temperature",
    p: f64 = "p",
    /// Interpolation steps for attribution.
    steps: usize = "steps",
    seed: u64 = "seed",
    mode: Mode = "mode",
    /// Grid axes, e.g. "T=1,2.5,5;alpha=0.005,0.01;p=0.05,0.1".
    grid: String = "grid",
    soft_target_input: SoftTargetInput = "soft-target-input",
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    kl_t_squared: bool = "kl-t-squared",
    target_policy: TargetPolicy = "target-policy",
    /// Key=value file of flag defaults.
    config: String = "config",
    workers: usize = "workers",
    /// Image index for visualize.
    index: usize = "index",
    /// Checkpoint to evaluate or benchmark.
    model: String = "model",
    /// Comma-separated class subset, relabelled in the given order.
    classes: String = "classes",
    max_train: usize = "max-train",
    max_test: usize = "max-test",
    warmup: usize = "warmup",
    reps: usize = "reps",
    /// Resume an existing attribution cache.
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    append: bool = "append",
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Train a teacher with cross-entropy.
    TrainTeacher(Options),
    /// Attribute every training image with a frozen teacher.
    PrecomputeIg(Options),
    /// Train a student in one mode.
    Train(Options),
    /// Train the four modes with shared settings.
    Ablation(Options),
    /// Sweep temperature, alpha and overlay probability.
    Gridsearch(Options),
    /// Report test accuracy of a checkpoint.
    Eval(Options),
    /// Measure forward latency of a checkpoint.
    Bench(Options),
    /// Write an original / attribution / overlay panel.
    Visualize(Options),
}

#[derive(Parser, Debug, Clone, PartialEq)]
#[command(
    name = "gradistill",
    version,
    about = "Knowledge distillation with integrated-gradients overlays"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

impl Command {
    pub fn verb(&self) -> &'static str {
        self.spec().name
    }

    pub fn options(&self) -> &Options {
        match self {
            Command::TrainTeacher(o)
            | Command::PrecomputeIg(o)
            | Command::Train(o)
            | Command::Ablation(o)
            | Command::Gridsearch(o)
            | Command::Eval(o)
            | Command::Bench(o)
            | Command::Visualize(o) => o,
        }
    }

    fn options_mut(&mut self) -> &mut Options {
        match self {
            Command::TrainTeacher(o)
            | Command::PrecomputeIg(o)
            | Command::Train(o)
            | Command::Ablation(o)
            | Command::Gridsearch(o)
            | Command::Eval(o)
            | Command::Bench(o)
            | Command::Visualize(o) => o,
        }
    }

    fn spec(&self) -> &'static VerbSpec {
        let i = match self {
            Command::TrainTeacher(_) => 0,
            Command::PrecomputeIg(_) => 1,
            Command::Train(_) => 2,
            Command::Ablation(_) => 3,
            Command::Gridsearch(_) => 4,
            Command::Eval(_) => 5,
            Command::Bench(_) => 6,
            Command::Visualize(_) => 7,
        };
        &VERBS[i]
    }
}

impl Cli {
    /// Argument vector that parses back to `self`.
    pub fn render(&self) -> Vec<String> {
        let mut argv = vec!["gradistill".to_string(), self.command.verb().to_string()];
        for (k, v) in self.command.options().pairs() {
            argv.push(format!("--{k}={v}"));
        }
        argv
    }
}

struct VerbSpec {
    name: &'static str,
    required: &'static [&'static str],
    accepted: &'static [&'static str],
    defaults: &'static [(&'static str, &'static str)],
}

const DATA_FLAGS: [&str; 3] = ["classes", "max-train", "max-test"];

const VERBS: [VerbSpec; 8] = [
    VerbSpec {
        name: "train-teacher",
        required: &["data", "out"],
        accepted: &["teacher-arch", "epochs", "lr", "batch", "seed"],
        defaults: &[
            ("teacher-arch", "teacher-L"),
            ("epochs", "100"),
            ("lr", "0.001"),
            ("batch", "128"),
        ],
    },
    VerbSpec {
        name: "precompute-ig",
        required: &["data", "teacher", "out"],
        accepted: &["steps", "workers", "target-policy", "append", "batch"],
        defaults: &[
            ("steps", "256"),
            ("workers", "1"),
            ("target-policy", "predicted_class"),
            ("append", "false"),
            ("batch", "32"),
        ],
    },
    VerbSpec {
        name: "train",
        required: &["data", "out"],
        accepted: &[
            "teacher",
            "ig-cache",
            "student-arch",
            "epochs",
            "lr",
            "batch",
            "alpha",
            "temperature",
            "p",
            "seed",
            "mode",
            "soft-target-input",
            "kl-t-squared",
        ],
        defaults: &TRAIN_DEFAULTS,
    },
    VerbSpec {
        name: "ablation",
        required: &["data", "teacher", "ig-cache", "out"],
        accepted: &[
            "student-arch",
            "epochs",
            "lr",
            "batch",
            "alpha",
            "temperature",
            "p",
            "seed",
            "soft-target-input",
            "kl-t-squared",
        ],
        defaults: &TRAIN_DEFAULTS,
    },
    VerbSpec {
        name: "gridsearch",
        required: &["data", "out", "grid"],
        accepted: &[
            "teacher",
            "ig-cache",
            "student-arch",
            "epochs",
            "lr",
            "batch",
            "alpha",
            "temperature",
            "p",
            "seed",
            "mode",
            "soft-target-input",
            "kl-t-squared",
        ],
        defaults: &GRID_DEFAULTS,
    },
    VerbSpec {
        name: "eval",
        required: &["data", "model", "out"],
        accepted: &[],
        defaults: &[],
    },
    VerbSpec {
        name: "bench",
        required: &["model", "out"],
        accepted: &["teacher", "batch", "warmup", "reps", "seed"],
        defaults: &[("batch", "128"), ("warmup", "10"), ("reps", "100")],
    },
    VerbSpec {
        name: "visualize",
        required: &["data", "ig-cache", "out"],
        accepted: &["index", "seed"],
        defaults: &[("index", "0")],
    },
];

const TRAIN_DEFAULTS: [(&str, &str); 10] = [
    ("student-arch", "student-S"),
    ("epochs", "100"),
    ("lr", "0.001"),
    ("batch", "128"),
    ("alpha", "0.01"),
    ("temperature", "2.5"),
    ("p", "0.1"),
    ("mode", "kd_ig"),
    ("soft-target-input", "augmented"),
    ("kl-t-squared", "false"),
];

const GRID_DEFAULTS: [(&str, &str); 10] = [
    ("student-arch", "student-S"),
    ("epochs", GRID_DEFAULT_EPOCHS),
    ("lr", "0.001"),
    ("batch", "128"),
    ("alpha", "0.01"),
    ("temperature", "2.5"),
    ("p", "0.1"),
    ("mode", "kd_ig"),
    ("soft-target-input", "augmented"),
    ("kl-t-squared", "false"),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Ig(#[from] IgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn accepts(spec: &VerbSpec, flag: &str) -> bool {
    flag == "config"
        || spec.required.contains(&flag)
        || spec.accepted.contains(&flag)
        || (spec.required.contains(&"data") && DATA_FLAGS.contains(&flag))
}

/// A command with every value resolved, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
}

impl Invocation {
    fn opts(&self) -> &Options {
        self.command.options()
    }

    /// The config echo: every resolved flag of this verb.
    pub fn echo(&self) -> Record {
        let mut r = Record::new();
        r.set("verb", self.command.verb());
        for (k, v) in self.opts().pairs() {
            if k != "config" {
                r.set(k, v);
            }
        }
        r
    }
}

/// Merges the config file, environment and defaults into `command` and
/// validates the flag set for its verb. `env_seed` is the value of
/// `GRADISTILL_SEED`, if any.
pub fn resolve(mut command: Command, env_seed: Option<&str>) -> Result<Invocation, CliError> {
    let spec = command.spec();
    let explicit = command.options().pairs();
    for (k, _) in &explicit {
        if !accepts(spec, k) {
            return Err(usage(format!("--{k} is not accepted by `{}`", spec.name)));
        }
    }
    if let Some(path) = command.options().config.clone() {
        let rec = Record::load(Path::new(&path))?;
        let opts = command.options_mut();
        for (k, v) in rec.iter() {
            if k == "verb" {
                if v != spec.name {
                    return Err(usage(format!(
                        "config file {path} is for `{v}`, not `{}`",
                        spec.name
                    )));
                }
                continue;
            }
            if k == "config" {
                continue;
            }
            if !Options::FLAGS.contains(&k) {
                return Err(usage(format!("config file {path}: unknown key `{k}`")));
            }
            if !accepts(spec, k) {
                return Err(usage(format!(
                    "config file {path}: `{k}` is not accepted by `{}`",
                    spec.name
                )));
            }
            opts.fill(k, v)
                .map_err(|e| usage(format!("config file {path}: {e}")))?;
        }
    }
    let opts = command.options_mut();
    if accepts(spec, "seed") && opts.seed.is_none() {
        let seed = env_seed.unwrap_or("0");
        opts.fill("seed", seed)
            .map_err(|e| usage(format!("{SEED_ENV}: {e}")))?;
    }
    for (k, v) in spec.defaults {
        opts.fill(k, v).expect("built-in defaults parse");
    }
    for k in spec.required {
        if !opts.pairs().iter().any(|(f, _)| f == k) {
            return Err(usage(format!("`{}` requires --{k}", spec.name)));
        }
    }
    if let Some(mode) = opts.mode {
        if mode.distills() && opts.teacher.is_none() {
            return Err(usage(format!("--mode {mode} requires --teacher")));
        }
        if mode.overlays() && opts.ig_cache.is_none() {
            return Err(usage(format!("--mode {mode} requires --ig-cache")));
        }
    }
    Ok(Invocation { command })
}

/// Parses and resolves `argv` (including the program name).
pub fn parse_args<I, T>(argv: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| usage(e.render().to_string()))?;
    let env = std::env::var(SEED_ENV).ok();
    resolve(cli.command, env.as_deref())
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> &'a T {
    v.as_ref()
        .unwrap_or_else(|| panic!("--{flag} resolved before run"))
}

fn parse_classes(spec: &str) -> Result<Vec<usize>, CliError> {
    let classes: Vec<usize> = spec
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("--classes {spec}: {e}")))?;
    if classes.is_empty() || classes.iter().any(|&c| c >= cifar::NUM_CLASSES) {
        return Err(usage(format!(
            "--classes {spec}: expected class indices 0-9"
        )));
    }
    Ok(classes)
}

fn load_split(opts: &Options, split: Split) -> Result<Dataset, CliError> {
    let dir = PathBuf::from(need(&opts.data, "data"));
    let mut ds = Dataset::from_records(&cifar::load_split(&dir, split)?);
    if let Some(c) = &opts.classes {
        ds = ds.select_classes(&parse_classes(c)?);
    }
    let cap = match split {
        Split::Train => opts.max_train,
        Split::Test => opts.max_test,
    };
    if let Some(n) = cap {
        ds = ds.take(n);
    }
    if ds.is_empty() {
        return Err(DataError::Invalid(format!(
            "{split:?} split of {} is empty after filtering",
            dir.display()
        ))
        .into());
    }
    Ok(ds)
}

fn out_dir(opts: &Options) -> Result<PathBuf, CliError> {
    let out = PathBuf::from(need(&opts.out, "out"));
    fs::create_dir_all(&out).map_err(crate::data::io_err(&out))?;
    Ok(out)
}

fn train_config(opts: &Options, arch: Architecture, mode: Mode) -> TrainConfig {
    let mut c = TrainConfig {
        mode,
        architecture: arch,
        epochs: *need(&opts.epochs, "epochs"),
        batch_size: *need(&opts.batch, "batch"),
        seed: *need(&opts.seed, "seed"),
        teacher_checkpoint: opts.teacher.as_ref().map(PathBuf::from),
        ig_cache: opts.ig_cache.as_ref().map(PathBuf::from),
        ..TrainConfig::default()
    };
    c.adam.learning_rate = *need(&opts.lr, "lr");
    if let Some(v) = opts.alpha {
        c.alpha = v;
    }
    if let Some(v) = opts.temperature {
        c.temperature = v;
    }
    if let Some(v) = opts.p {
        c.overlay_p = v;
    }
    if let Some(v) = opts.soft_target_input {
        c.soft_target_input = v;
    }
    if let Some(v) = opts.kl_t_squared {
        c.kl_t_squared = v;
    }
    c
}

fn load_cache(path: &str, train: &Dataset, teacher: Option<&Model>) -> Result<IgCache, CliError> {
    let cache = read_ig_cache(Path::new(path))?;
    if let Some(t) = teacher {
        cache.header().check_fingerprint(&t.fingerprint())?;
    }
    let (c, h, w) = train.shape();
    if cache.header().map_shape() != [c, h, w] {
        return Err(DataError::Invalid(format!(
            "{path}: maps of shape {:?} do not match images {:?}",
            cache.header().map_shape(),
            [c, h, w]
        ))
        .into());
    }
    if cache.len() < train.len() {
        return Err(DataError::Invalid(format!(
            "{path}: {} maps for {} training images (precompute with the same --classes and --max-train)",
            cache.len(),
            train.len()
        ))
        .into());
    }
    Ok(cache)
}

struct Resources {
    teacher: Option<Model>,
    cache: Option<IgCache>,
}

fn load_resources(
    opts: &Options,
    train: &Dataset,
    need_teacher: bool,
    need_cache: bool,
) -> Result<Resources, CliError> {
    let teacher = match (&opts.teacher, need_teacher) {
        (Some(p), true) => Some(load_checkpoint(Path::new(p))?),
        _ => None,
    };
    let cache = match (&opts.ig_cache, need_cache) {
        (Some(p), true) => Some(load_cache(p, train, teacher.as_ref())?),
        _ => None,
    };
    Ok(Resources { teacher, cache })
}

fn inputs<'a>(train: &'a Dataset, res: &'a Resources) -> TrainInputs<'a> {
    TrainInputs {
        train,
        validation: None,
        test: None,
        teacher: res.teacher.as_ref(),
        attributions: res
            .cache
            .as_ref()
            .map(|c| c as &dyn crate::augment::AttributionSource),
    }
}

fn summary(report: &MetricsReport) -> String {
    let mut s = format!(
        "final_accuracy={:.4} parameters={} wall_clock_s={:.1}",
        report.final_accuracy, report.parameter_count, report.wall_clock_s
    );
    if let Some(c) = report.compression_factor {
        s.push_str(&format!(" compression={c:.2}"));
    }
    s
}

/// Runs a resolved invocation, returning the one-line summary.
pub fn run(inv: &Invocation) -> Result<String, CliError> {
    let o = inv.opts();
    let echo = inv.echo();
    let write_echo = |out: &Path| echo.save(&out.join("config.txt"));
    match &inv.command {
        Command::TrainTeacher(_) => {
            let train_set = load_split(o, Split::Train)?;
            let test = load_split(o, Split::Test)?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let config = train_config(o, *need(&o.teacher_arch, "teacher-arch"), Mode::Baseline);
            let inputs = TrainInputs {
                test: Some(&test),
                ..TrainInputs::new(&train_set)
            };
            let res = train(&config, &inputs)?;
            let mut report = res.report;
            report.config = echo.clone();
            save_checkpoint(&res.model, &out.join("teacher.gdml"))?;
            write_metrics(&report, &out.join("metrics.txt"))?;
            Ok(summary(&report))
        }
        Command::PrecomputeIg(_) => {
            let train_set = load_split(o, Split::Train)?;
            let teacher = load_checkpoint(Path::new(need(&o.teacher, "teacher")))?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let config = IGConfig {
                steps: *need(&o.steps, "steps"),
                baseline: Baseline::Black,
                target_policy: *need(&o.target_policy, "target-policy"),
                batch_size: *need(&o.batch, "batch"),
            };
            let s = precompute_dataset(
                &teacher,
                &train_set,
                &config,
                &out.join("ig_cache.gdig"),
                *need(&o.workers, "workers"),
                *need(&o.append, "append"),
            )?;
            Ok(s.to_string())
        }
        Command::Train(_) => {
            let train_set = load_split(o, Split::Train)?;
            let test = load_split(o, Split::Test)?;
            let mode = *need(&o.mode, "mode");
            let res = load_resources(o, &train_set, mode.distills(), mode.overlays())?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let config = train_config(o, *need(&o.student_arch, "student-arch"), mode);
            let inputs = TrainInputs {
                test: Some(&test),
                ..inputs(&train_set, &res)
            };
            let r = train(&config, &inputs)?;
            let mut report = r.report;
            report.config = echo.clone();
            save_checkpoint(&r.model, &out.join("student.gdml"))?;
            write_metrics(&report, &out.join("metrics.txt"))?;
            Ok(summary(&report))
        }
        Command::Ablation(_) => {
            let train_set = load_split(o, Split::Train)?;
            let test = load_split(o, Split::Test)?;
            let res = load_resources(o, &train_set, true, true)?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let base = train_config(o, *need(&o.student_arch, "student-arch"), Mode::Baseline);
            let inputs = TrainInputs {
                test: Some(&test),
                ..inputs(&train_set, &res)
            };
            let report = run_ablation(&base, &inputs)?;
            for run in &report.runs {
                let dir = out.join(run.mode.name());
                fs::create_dir_all(&dir).map_err(crate::data::io_err(&dir))?;
                save_checkpoint(&run.model, &dir.join("student.gdml"))?;
                let mut m = run.report.clone();
                m.config.set("verb", "ablation");
                write_metrics(&m, &dir.join("metrics.txt"))?;
            }
            let table = report.render_table();
            crate::data::write_file(&out.join("ablation.csv"), table.as_bytes())?;
            let cells: Vec<String> = report
                .runs
                .iter()
                .map(|r| format!("{}={:.4}", r.mode, r.report.final_accuracy))
                .collect();
            Ok(cells.join(" "))
        }
        Command::Gridsearch(_) => {
            let full = load_split(o, Split::Train)?;
            let test = load_split(o, Split::Test)?;
            let mode = *need(&o.mode, "mode");
            let holdout = VALIDATION_MAX.min(full.len() / 10).max(1);
            let (train_set, val) = full.split_tail(holdout);
            if train_set.is_empty() {
                return Err(DataError::Invalid(
                    "training split too small for a validation holdout".into(),
                )
                .into());
            }
            let res = load_resources(o, &train_set, mode.distills(), mode.overlays())?;
            let base = train_config(o, *need(&o.student_arch, "student-arch"), mode);
            let space = GridSearchSpace::parse(need(&o.grid, "grid"), &base, base.epochs)?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let inputs = TrainInputs {
                validation: Some(&val),
                test: Some(&test),
                ..inputs(&train_set, &res)
            };
            let cells = grid_search(&space, &base, &inputs, Some(&out.join("grid_cells.csv")))?;
            write_grid_csv(&cells, &out.join("grid.csv"))?;
            let best = &cells[0];
            Ok(format!(
                "cells={} best T={} alpha={} p={} val_acc={:.4} test_acc={:.4}",
                cells.len(),
                best.temperature,
                best.alpha,
                best.p,
                best.val_acc,
                best.test_acc
            ))
        }
        Command::Eval(_) => {
            let test = load_split(o, Split::Test)?;
            let model = load_checkpoint(Path::new(need(&o.model, "model")))?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let acc = evaluate(&model, &test)?;
            let report = MetricsReport {
                final_accuracy: acc,
                parameter_count: model.parameter_count(),
                config: echo.clone(),
                ..MetricsReport::default()
            };
            write_metrics(&report, &out.join("eval.txt"))?;
            Ok(format!("accuracy {acc:.4}"))
        }
        Command::Bench(_) => {
            let model = load_checkpoint(Path::new(need(&o.model, "model")))?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let batch_size = *need(&o.batch, "batch");
            let (warmup, reps) = (*need(&o.warmup, "warmup"), *need(&o.reps, "reps"));
            let batch = bench_batch(model.config(), batch_size, *need(&o.seed, "seed"));
            let stats = benchmark_latency(&model, &batch, warmup, reps)?;
            let mut report = MetricsReport {
                final_accuracy: 0.0,
                parameter_count: model.parameter_count(),
                latency: Some(stats.clone()),
                config: echo.clone(),
                ..MetricsReport::default()
            };
            let mut line = format!(
                "mean_ms={:.3} p50_ms={:.3} p95_ms={:.3} batch={batch_size}",
                stats.mean_ms, stats.p50_ms, stats.p95_ms
            );
            if let Some(t) = &o.teacher {
                let teacher = load_checkpoint(Path::new(t))?;
                let tb = bench_batch(teacher.config(), batch_size, *need(&o.seed, "seed"));
                let ts = benchmark_latency(&teacher, &tb, warmup, reps)?;
                let cmp = BenchComparison::new(ts.clone(), stats);
                report.teacher_parameter_count = Some(teacher.parameter_count());
                report.compression_factor =
                    Some(crate::models::compression_factor(&teacher, &model));
                let mut tr = report.clone();
                tr.parameter_count = teacher.parameter_count();
                tr.latency = Some(ts);
                write_metrics(&tr, &out.join("bench_teacher.txt"))?;
                line.push_str(&format!(
                    " teacher_mean_ms={:.3} speedup={:.2}",
                    cmp.reference.mean_ms, cmp.speedup
                ));
            }
            write_metrics(&report, &out.join("bench.txt"))?;
            Ok(line)
        }
        Command::Visualize(_) => {
            let train_set = load_split(o, Split::Train)?;
            let index = *need(&o.index, "index");
            if index >= train_set.len() {
                return Err(DataError::IndexOutOfRange {
                    index,
                    count: train_set.len(),
                }
                .into());
            }
            let cache = read_ig_cache(Path::new(need(&o.ig_cache, "ig-cache")))?;
            let attr = cache.entry(index)?;
            let out = out_dir(o)?;
            write_echo(&out)?;
            let mut rng = RngStream::for_image(*need(&o.seed, "seed"), 0, index as u32);
            let s = rng.log_uniform(1.0, 2.0);
            let x = train_set.image_tensor(index);
            let heat = overlay_map(&attr, s)?;
            let overlaid = blend(&x, &heat)?;
            let path = out.join(format!("panel_{index:05}.ppm"));
            export_panel(&x, &heat, &overlaid, &path)?;
            Ok(format!("wrote {} (s={s:.3})", path.display()))
        }
    }
}

fn bench_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
    let (c, h, w) = cfg.input_shape;
    let mut rng = RngStream::new(seed);
    Tensor::new(
        vec![n, c, h, w],
        (0..n * c * h * w).map(|_| rng.uniform()).collect(),
    )
    .expect("shape")
}

/// Entry point: parses, runs and maps outcomes to exit codes 0, 1 and 2.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let parsed = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let env = std::env::var(SEED_ENV).ok();
    let result = resolve(parsed.command, env.as_deref()).and_then(|inv| run(&inv));
    match result {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("run `gradistill --help` for usage");
            }
            e.exit_code()
        }
    }
}

impl fmt::Display for Invocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cli = Cli {
            command: self.command.clone(),
        };
        f.write_str(&cli.render().join(" "))
    }
}
