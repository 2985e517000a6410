use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamHyper, AdamState};
use super::HarnessError;
use crate::augment::{augment_batch, AttributionSource, OverlayConfig};
use crate::autodiff::Tape;
use crate::data::metrics::{EpochRow, MetricsReport};
use crate::data::record::Record;
use crate::data::Dataset;
use crate::ig::argmax;
use crate::loss::KdObjective;
use crate::models::{build_model, Architecture, Model, ModelConfig};
use crate::tensor::Tensor;

const SHUFFLE_KEY: u64 = 0x5348_5546_464c_4521;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Baseline,
    Kd,
    Ig,
    KdIg,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Kd, Mode::Ig, Mode::KdIg];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Kd => "kd",
            Mode::Ig => "ig",
            Mode::KdIg => "kd_ig",
        }
    }

    pub fn distills(self) -> bool {
        matches!(self, Mode::Kd | Mode::KdIg)
    }

    pub fn overlays(self) -> bool {
        matches!(self, Mode::Ig | Mode::KdIg)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected baseline, kd, ig or kd_ig)"))
    }
}

/// Which image the teacher sees when producing soft targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SoftTargetInput {
    Augmented,
    Original,
}

impl SoftTargetInput {
    pub fn name(self) -> &'static str {
        match self {
            SoftTargetInput::Augmented => "augmented",
            SoftTargetInput::Original => "original",
        }
    }
}

impl fmt::Display for SoftTargetInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SoftTargetInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "augmented" => Ok(SoftTargetInput::Augmented),
            "original" => Ok(SoftTargetInput::Original),
            _ => Err(format!(
                "unknown soft target input `{s}` (expected augmented or original)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub alpha: f64,
    pub temperature: f64,
    pub overlay_p: f64,
    pub kl_t_squared: bool,
    pub seed: u64,
    pub soft_target_input: SoftTargetInput,
    pub teacher_checkpoint: Option<PathBuf>,
    pub ig_cache: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::KdIg,
            architecture: Architecture::StudentS,
            epochs: 100,
            batch_size: 128,
            adam: AdamHyper::default(),
            alpha: 0.01,
            temperature: 2.5,
            overlay_p: 0.1,
            kl_t_squared: false,
            seed: 0,
            soft_target_input: SoftTargetInput::Augmented,
            teacher_checkpoint: None,
            ig_cache: None,
        }
    }
}

fn parse_key<T: FromStr>(rec: &Record, key: &str) -> Result<Option<T>, HarnessError>
where
    T::Err: fmt::Display,
{
    rec.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| HarnessError::InvalidConfig(format!("{key}={v}: {e}")))
        })
        .transpose()
}

impl TrainConfig {
    pub const RECORD_KEYS: [&'static str; 16] = [
        "mode",
        "architecture",
        "epochs",
        "batch_size",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "alpha",
        "temperature",
        "p",
        "kl_t_squared",
        "seed",
        "soft_target_input",
        "teacher_checkpoint",
        "ig_cache",
    ];

    pub fn objective(&self) -> Result<KdObjective, HarnessError> {
        if !self.mode.distills() {
            return Ok(KdObjective::hard_only());
        }
        let mut obj = KdObjective::new(self.alpha, self.temperature)?;
        obj.kl_t_squared = self.kl_t_squared;
        Ok(obj)
    }

    pub fn overlay(&self) -> Result<Option<OverlayConfig>, HarnessError> {
        if !self.mode.overlays() {
            return Ok(None);
        }
        Ok(Some(OverlayConfig::new(self.overlay_p, self.seed)?))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(HarnessError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.adam.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.overlay_p) {
            return Err(HarnessError::InvalidConfig(format!(
                "p {} outside [0, 1]",
                self.overlay_p
            )));
        }
        self.objective()?;
        Ok(())
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.set("mode", self.mode);
        r.set("architecture", self.architecture);
        r.set("epochs", self.epochs);
        r.set("batch_size", self.batch_size);
        r.set("learning_rate", self.adam.learning_rate);
        r.set("beta1", self.adam.beta1);
        r.set("beta2", self.adam.beta2);
        r.set("epsilon", self.adam.epsilon);
        r.set("alpha", self.alpha);
        r.set("temperature", self.temperature);
        r.set("p", self.overlay_p);
        r.set("kl_t_squared", self.kl_t_squared);
        r.set("seed", self.seed);
        r.set("soft_target_input", self.soft_target_input);
        if let Some(p) = &self.teacher_checkpoint {
            r.set("teacher_checkpoint", p.display());
        }
        if let Some(p) = &self.ig_cache {
            r.set("ig_cache", p.display());
        }
        r
    }

    /// Overrides every field whose key is present in `rec`; other keys are ignored.
    pub fn apply_record(&mut self, rec: &Record) -> Result<(), HarnessError> {
        if let Some(v) = parse_key(rec, "mode")? {
            self.mode = v;
        }
        if let Some(v) = parse_key(rec, "architecture")? {
            self.architecture = v;
        }
        if let Some(v) = parse_key(rec, "epochs")? {
            self.epochs = v;
        }
        if let Some(v) = parse_key(rec, "batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = parse_key(rec, "learning_rate")? {
            self.adam.learning_rate = v;
        }
        if let Some(v) = parse_key(rec, "beta1")? {
            self.adam.beta1 = v;
        }
        if let Some(v) = parse_key(rec, "beta2")? {
            self.adam.beta2 = v;
        }
        if let Some(v) = parse_key(rec, "epsilon")? {
            self.adam.epsilon = v;
        }
        if let Some(v) = parse_key(rec, "alpha")? {
            self.alpha = v;
        }
        if let Some(v) = parse_key(rec, "temperature")? {
            self.temperature = v;
        }
        if let Some(v) = parse_key(rec, "p")? {
            self.overlay_p = v;
        }
        if let Some(v) = parse_key(rec, "kl_t_squared")? {
            self.kl_t_squared = v;
        }
        if let Some(v) = parse_key(rec, "seed")? {
            self.seed = v;
        }
        if let Some(v) = parse_key(rec, "soft_target_input")? {
            self.soft_target_input = v;
        }
        if let Some(v) = rec.get("teacher_checkpoint") {
            self.teacher_checkpoint = Some(PathBuf::from(v));
        }
        if let Some(v) = rec.get("ig_cache") {
            self.ig_cache = Some(PathBuf::from(v));
        }
        Ok(())
    }

    pub fn from_record(rec: &Record) -> Result<Self, HarnessError> {
        let mut c = TrainConfig::default();
        c.apply_record(rec)?;
        Ok(c)
    }
}

/// Data and frozen resources for one run.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    /// Scored after every epoch; also the ranking set in grid search.
    pub validation: Option<&'a Dataset>,
    pub test: Option<&'a Dataset>,
    pub teacher: Option<&'a Model>,
    pub attributions: Option<&'a dyn AttributionSource>,
}

impl<'a> TrainInputs<'a> {
    pub fn new(train: &'a Dataset) -> Self {
        TrainInputs {
            train,
            validation: None,
            test: None,
            teacher: None,
            attributions: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: MetricsReport,
    /// Accuracy on the validation set after the last epoch, when one was given.
    pub validation_accuracy: Option<f64>,
}

/// Anything that maps an `[n, c, h, w]` batch to `[n, k]` logits.
pub trait Classifier {
    fn batch_logits(&self, batch: &Tensor) -> Result<Tensor, HarnessError>;
}

impl Classifier for Model {
    fn batch_logits(&self, batch: &Tensor) -> Result<Tensor, HarnessError> {
        Ok(self.forward_logits(batch)?)
    }
}

/// Fraction of argmax-correct predictions, without augmentation.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, dataset: &Dataset) -> Result<f64, HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let logits = model.batch_logits(&dataset.batch(idx))?;
        for (j, &i) in idx.iter().enumerate() {
            if argmax(logits.row(j)) == dataset.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_KEY);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn gather_rows(batch: &Tensor, rows: &[usize]) -> Tensor {
    let per = batch.row_len();
    let mut shape = batch.shape().to_vec();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(batch.row(r));
    }
    Tensor::new(shape, data).expect("shape")
}

/// Teacher logits for a batch. Logits of unaugmented images are cached by
/// dataset index; overlaid images are scored fresh when the teacher sees
/// the augmented input.
struct TeacherTargets<'a> {
    teacher: &'a Model,
    input: SoftTargetInput,
    cache: Vec<Option<Vec<f64>>>,
}

impl TeacherTargets<'_> {
    fn logits(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        augmented: &Tensor,
        fired: &[bool],
    ) -> Result<Tensor, HarnessError> {
        let fresh: Vec<usize> = (0..idx.len())
            .filter(|&j| fired[j] && self.input == SoftTargetInput::Augmented)
            .collect();
        let missing: Vec<usize> = (0..idx.len())
            .filter(|&j| !fresh.contains(&j) && self.cache[idx[j]].is_none())
            .map(|j| idx[j])
            .collect();
        if !missing.is_empty() {
            let logits = self.teacher.forward_logits(&data.batch(&missing))?;
            for (r, &i) in missing.iter().enumerate() {
                self.cache[i] = Some(logits.row(r).to_vec());
            }
        }
        let fresh_logits = if fresh.is_empty() {
            None
        } else {
            Some(
                self.teacher
                    .forward_logits(&gather_rows(augmented, &fresh))?,
            )
        };
        let k = self.teacher.num_classes();
        let mut out = Vec::with_capacity(idx.len() * k);
        for (j, &i) in idx.iter().enumerate() {
            match fresh.iter().position(|&f| f == j) {
                Some(r) => out.extend_from_slice(fresh_logits.as_ref().expect("computed").row(r)),
                None => out.extend_from_slice(self.cache[i].as_ref().expect("cached")),
            }
        }
        Ok(Tensor::new(vec![idx.len(), k], out)?)
    }
}

/// Trains a fresh model of `config.architecture` on `inputs.train`.
pub fn train(config: &TrainConfig, inputs: &TrainInputs<'_>) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let data = inputs.train;
    if data.is_empty() {
        return Err(HarnessError::InvalidConfig("training set is empty".into()));
    }
    let objective = config.objective()?;
    let overlay = config.overlay()?;
    let teacher = match (config.mode.distills(), inputs.teacher) {
        (true, None) => {
            return Err(HarnessError::MissingResource {
                mode: config.mode,
                what: "a teacher checkpoint",
            })
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    let attrs = match (config.mode.overlays(), inputs.attributions) {
        (true, None) => {
            return Err(HarnessError::MissingResource {
                mode: config.mode,
                what: "an IG cache",
            })
        }
        (true, Some(a)) => Some(a),
        (false, _) => None,
    };
    if let Some(t) = teacher {
        if t.num_classes() != data.num_classes() {
            return Err(HarnessError::InvalidConfig(format!(
                "teacher predicts {} classes, dataset has {}",
                t.num_classes(),
                data.num_classes()
            )));
        }
    }

    let mut mcfg = ModelConfig::preset(config.architecture, data.num_classes(), config.seed);
    mcfg.input_shape = data.shape();
    let mut model = build_model(mcfg)?;
    let mut targets = teacher
        .filter(|_| objective.uses_teacher())
        .map(|t| TeacherTargets {
            teacher: t,
            input: config.soft_target_input,
            cache: vec![None; data.len()],
        });
    let mut state = AdamState::new();
    let n = data.len();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut validation_accuracy = None;

    for epoch in 0..config.epochs {
        let order = epoch_order(n, config.seed, epoch);
        let (mut total, mut hard, mut kl) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let labels = data.batch_labels(idx);
            let mut x = data.batch(idx);
            let mut fired = vec![false; idx.len()];
            if let (Some(ov), Some(a)) = (&overlay, attrs) {
                let (aug, draws) = augment_batch(&x, idx, a, ov, epoch as u32)?;
                x = aug;
                fired = draws.iter().map(Option::is_some).collect();
            }
            let teacher_logits = match targets.as_mut() {
                Some(t) => Some(t.logits(data, idx, &x, &fired)?),
                None => None,
            };

            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let rec = model.record(&mut tape, xv, true)?;
            let logits = tape.value(rec.logits).clone();
            let (loss, grad) = objective.batch(&logits, teacher_logits.as_ref(), &labels)?;
            if !loss.total.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            tape.backward_with_seed(rec.logits, &grad)?;
            let grads: Vec<Vec<f64>> = rec
                .params
                .iter()
                .map(|&v| tape.take_grad(v).expect("parameter leaves require grad"))
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params = model.params_mut();
            adam_step(&mut params, &grad_refs, &mut state, &config.adam)?;

            let w = idx.len() as f64;
            total += loss.total * w;
            hard += loss.hard_loss * w;
            kl += loss.kl_loss * w;
            correct += (0..idx.len())
                .filter(|&j| argmax(logits.row(j)) == labels[j])
                .count();
        }
        let acc = match inputs.validation {
            Some(v) => {
                let a = evaluate(&model, v)?;
                validation_accuracy = Some(a);
                a
            }
            None => correct as f64 / n as f64,
        };
        let row = EpochRow {
            epoch: epoch + 1,
            loss_total: total / n as f64,
            loss_hard: hard / n as f64,
            loss_kl: kl / n as f64,
            acc,
        };
        log::info!(
            "{} epoch {}/{}: loss {:.5} (hard {:.5}, kl {:.5}) acc {:.4}",
            config.mode,
            row.epoch,
            config.epochs,
            row.loss_total,
            row.loss_hard,
            row.loss_kl,
            row.acc
        );
        epochs.push(row);
    }

    let final_accuracy = match (inputs.test, inputs.validation) {
        (Some(t), _) => evaluate(&model, t)?,
        (None, Some(_)) => validation_accuracy.expect("set each epoch"),
        (None, None) => epochs.last().expect("at least one epoch").acc,
    };
    let report = MetricsReport {
        final_accuracy,
        parameter_count: model.parameter_count(),
        teacher_parameter_count: teacher.map(Model::parameter_count),
        compression_factor: teacher.map(|t| crate::models::compression_factor(t, &model)),
        latency: None,
        wall_clock_s: started.elapsed().as_secs_f64(),
        config: config.to_record(),
        epochs,
    };
    Ok(TrainOutcome {
        model,
        report,
        validation_accuracy,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub mode: Mode,
    pub model: Model,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn accuracy(&self, mode: Mode) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.mode == mode)
            .map(|r| r.report.final_accuracy)
    }

    /// Accuracy difference against the baseline run, in percentage points.
    pub fn delta_pp(&self, mode: Mode) -> Option<f64> {
        Some(100.0 * (self.accuracy(mode)? - self.accuracy(Mode::Baseline)?))
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("mode,accuracy,delta_pp\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{:.4},{:+.2}\n",
                r.mode,
                r.report.final_accuracy,
                self.delta_pp(r.mode).unwrap_or(0.0)
            ));
        }
        out
    }
}

/// The four training modes with every other setting shared.
pub fn run_ablation(
    base: &TrainConfig,
    inputs: &TrainInputs<'_>,
) -> Result<AblationReport, HarnessError> {
    let mut runs = Vec::with_capacity(4);
    for mode in Mode::ALL {
        let config = TrainConfig {
            mode,
            ..base.clone()
        };
        let out = train(&config, inputs)?;
        runs.push(AblationRun {
            mode,
            model: out.model,
            report: out.report,
        });
    }
    Ok(AblationReport { runs })
}
