//! Config-driven experiment runner, metric records and summaries.
//!
//! For every seed: build the stream, then for every task train with replay,
//! update memory, pick a temperature with each configured calibrator and
//! score the cumulative test set of tasks `1..=t`.

use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{
    self, collect_logits, equal_mass_bins, equal_width_bins, temp_opt, Bin, TempBounds, Temperature,
};
use crate::cil::{evaluate, train_task, IncrementalState, OptimizerKind, TrainConfig};
use crate::datagen::{
    gen_gaussian_stream, load_csv_stream, Sample, SplitFractions, StreamConfig, TaskStream,
};
use crate::error::{Error, Result};
use crate::nnet::Architecture;
use crate::tcil::{tcil_temperature, DirectionPolicy, MagSearchConfig, TcilConfig, TcilReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibrator {
    Vanilla,
    TsNewValid,
    Tcil,
    TcilRandom,
    TcilClosest,
    TcilFarthest,
    OptimalTsOracle,
}

impl Calibrator {
    pub const ALL: [Calibrator; 7] = [
        Calibrator::Vanilla,
        Calibrator::TsNewValid,
        Calibrator::Tcil,
        Calibrator::TcilRandom,
        Calibrator::TcilClosest,
        Calibrator::TcilFarthest,
        Calibrator::OptimalTsOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Calibrator::Vanilla => "vanilla",
            Calibrator::TsNewValid => "ts_new_valid",
            Calibrator::Tcil => "tcil",
            Calibrator::TcilRandom => "tcil_random",
            Calibrator::TcilClosest => "tcil_closest",
            Calibrator::TcilFarthest => "tcil_farthest",
            Calibrator::OptimalTsOracle => "optimal_ts_oracle",
        }
    }

    fn policy(self, seed: u64) -> Option<DirectionPolicy> {
        match self {
            Calibrator::Tcil => Some(DirectionPolicy::Tcil),
            Calibrator::TcilRandom => Some(DirectionPolicy::RandomClass { seed }),
            Calibrator::TcilClosest => Some(DirectionPolicy::ClosestOnly),
            Calibrator::TcilFarthest => Some(DirectionPolicy::FarthestOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Calibrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flat experiment configuration. Every key is optional; unknown keys are
/// rejected.
///
/// The default schedule (memory 200, 250 epochs, learning rate 0.005, hidden
/// width 128, feature width 32) is longer and wider than
/// [`TrainConfig::default`] and [`Architecture::desk_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub calibrators: Vec<Calibrator>,
    pub bins: usize,
    pub memory_capacity: usize,

    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
    pub blob_spread: f64,
    /// Load `label,f1,...,fd` rows instead of generating blobs.
    pub csv_path: Option<PathBuf>,
    pub csv_train_fraction: f64,
    pub csv_valid_fraction: f64,

    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,

    pub eps_low: f64,
    pub eps_high: f64,
    pub eps_tolerance: f64,
    pub max_iters: usize,
    pub temp_min: f64,
    pub temp_max: f64,
    pub temp_tolerance: f64,
    /// Clamp perturbed inputs to `[0, 1]`; defaults to whether the data lies
    /// in that range.
    pub clip: Option<bool>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stream = StreamConfig::default();
        let train = TrainConfig::default();
        let mag = MagSearchConfig::default();
        let temp = TempBounds::default();
        ExperimentConfig {
            seeds: (0..5).collect(),
            calibrators: vec![
                Calibrator::Vanilla,
                Calibrator::TsNewValid,
                Calibrator::Tcil,
            ],
            bins: calib::DEFAULT_BINS,
            memory_capacity: 200,
            num_tasks: stream.num_tasks,
            classes_per_task: stream.classes_per_task,
            input_dim: stream.input_dim,
            train_per_class: stream.train_per_class,
            valid_per_class: stream.valid_per_class,
            test_per_class: stream.test_per_class,
            blob_spread: stream.blob_spread,
            csv_path: None,
            csv_train_fraction: 0.6,
            csv_valid_fraction: 0.1,
            hidden_dims: vec![128],
            feature_dim: 32,
            epochs: 250,
            batch_size: train.batch_size,
            learning_rate: 0.005,
            weight_decay: train.weight_decay,
            optimizer: train.optimizer,
            eps_low: mag.eps_low,
            eps_high: mag.eps_high,
            eps_tolerance: mag.tolerance,
            max_iters: mag.max_iters,
            temp_min: temp.min,
            temp_max: temp.max,
            temp_tolerance: temp.tolerance,
            clip: None,
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parse TOML key-value text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .and_then(|span| key_at(text, span.start))
                .unwrap_or_else(|| "<root>".to_string());
            config_err(&path, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.calibrators.is_empty() {
            return Err(config_err(
                "calibrators",
                "at least one calibrator is required",
            ));
        }
        if let Some(dup) = self
            .calibrators
            .iter()
            .enumerate()
            .find(|(i, c)| self.calibrators[..*i].contains(c))
        {
            return Err(config_err(
                &format!("calibrators[{}]", dup.0),
                "duplicate calibrator",
            ));
        }
        let positive = [
            ("bins", self.bins),
            ("memory_capacity", self.memory_capacity),
            ("feature_dim", self.feature_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config_err(k, "must be at least 1"));
            }
        }
        if let Some(i) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(config_err(
                &format!("hidden_dims[{i}]"),
                "must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        if self.csv_path.is_none() {
            self.stream_config(0).validate()?;
        } else {
            if self.num_tasks == 0 {
                return Err(config_err("num_tasks", "must be at least 1"));
            }
            if !(self.csv_train_fraction > 0.0 && self.csv_valid_fraction > 0.0)
                || self.csv_train_fraction + self.csv_valid_fraction >= 1.0
            {
                return Err(config_err(
                    "csv_train_fraction",
                    "train and valid fractions must be positive and leave room for test data",
                ));
            }
        }
        self.magsearch()
            .validate()
            .map_err(|e| config_err("eps_low", e.to_string()))?;
        self.temp_bounds()
            .validate()
            .map_err(|e| config_err("temp_min", e.to_string()))?;
        Ok(())
    }

    pub fn stream_config(&self, seed: u64) -> StreamConfig {
        StreamConfig {
            num_tasks: self.num_tasks,
            classes_per_task: self.classes_per_task,
            input_dim: self.input_dim,
            train_per_class: self.train_per_class,
            valid_per_class: self.valid_per_class,
            test_per_class: self.test_per_class,
            blob_spread: self.blob_spread,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            optimizer: self.optimizer,
            seed,
        }
    }

    pub fn magsearch(&self) -> MagSearchConfig {
        MagSearchConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            tolerance: self.eps_tolerance,
            max_iters: self.max_iters,
        }
    }

    pub fn temp_bounds(&self) -> TempBounds {
        TempBounds {
            min: self.temp_min,
            max: self.temp_max,
            tolerance: self.temp_tolerance,
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes: 0,
        }
    }

    /// The task stream for `seed`.
    pub fn build_stream(&self, seed: u64) -> Result<TaskStream> {
        match &self.csv_path {
            Some(path) => load_csv_stream(
                path,
                self.num_tasks,
                SplitFractions {
                    train: self.csv_train_fraction,
                    valid: self.csv_valid_fraction,
                },
                seed,
            ),
            None => gen_gaussian_stream(&self.stream_config(seed)),
        }
    }
}

/// Top-level key on the line containing byte `offset`.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let start = text[..offset.min(text.len())]
        .rfind('\n')
        .map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty()).then(|| key.trim_matches('"').to_string())
}

/// Metrics of one calibrator at one task of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub task_index: usize,
    pub calibrator: Calibrator,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_adv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_unreachable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mispred_old: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mispred_new: Option<f64>,
    pub accuracy: f64,
    /// `(task, accuracy)` for every task seen so far.
    pub per_task_accuracy: Vec<(usize, f64)>,
    pub ece_percent: f64,
    pub aece_percent: f64,
    /// Equal-width reliability bins of the ECE computation.
    pub bins: Vec<Bin>,
}

/// Everything observed at one task of one seed, before records are emitted.
#[derive(Debug, Clone)]
pub struct TaskOutcome<'a> {
    pub seed: u64,
    pub task: usize,
    pub state: &'a IncrementalState,
    pub stream: &'a TaskStream,
}

/// Run every seed; records come back ordered by (seed, task, calibrator).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let per_seed: Vec<Result<Vec<MetricsRecord>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, |_| Ok(())))
        .collect();
    let mut out = Vec::new();
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

/// One seed of [`run_experiment`]. `observe` sees the trained state after
/// every memory update.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    observe: impl FnMut(&TaskOutcome<'_>) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let stream = cfg.build_stream(seed)?;
    run_stream(cfg, seed, &stream, observe)
}

/// [`run_seed`] on a prebuilt stream.
pub fn run_stream(
    cfg: &ExperimentConfig,
    seed: u64,
    stream: &TaskStream,
    mut observe: impl FnMut(&TaskOutcome<'_>) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let clip = cfg.clip.unwrap_or(stream.in_unit_range());
    let tcil_cfg = TcilConfig {
        magsearch: cfg.magsearch(),
        bounds: cfg.temp_bounds(),
        clip,
    };
    let train_cfg = cfg.train_config(seed);
    let mut state = IncrementalState::new(
        &cfg.architecture(stream.input_dim()),
        cfg.memory_capacity,
        seed,
    )?;
    let mut records = Vec::with_capacity(stream.num_tasks() * cfg.calibrators.len());

    for t in 1..=stream.num_tasks() {
        let classes = stream.classes(t);
        train_task(&mut state, t, classes, stream.train(t), &train_cfg)?;
        state.memory.update(
            stream.train(t),
            classes,
            seed.wrapping_mul(1_000_003).wrapping_add(t as u64),
        )?;
        observe(&TaskOutcome {
            seed,
            task: t,
            state: &state,
            stream,
        })?;

        let test: Vec<&Sample> = stream.cumulative_test(t);
        let test_logits = collect_logits(&state.model, test.iter().map(|s| s.pair()))?;
        let accuracy = evaluate(
            &state.model,
            &test,
            |c| stream.task_of(c).unwrap_or(0),
            Temperature::ONE,
        )?;

        for &cal in &cfg.calibrators {
            let mut tcil: Option<TcilReport> = None;
            let temperature = match cal {
                Calibrator::Vanilla => Temperature::ONE,
                Calibrator::TsNewValid => temp_opt(
                    &collect_logits(&state.model, stream.valid(t).iter().map(Sample::pair))?,
                    &tcil_cfg.bounds,
                )?,
                Calibrator::OptimalTsOracle => temp_opt(&test_logits, &tcil_cfg.bounds)?,
                _ => {
                    let policy = cal.policy(seed).expect("tcil variants carry a policy");
                    let report = tcil_temperature(&state, stream.valid(t), policy, &tcil_cfg)?;
                    let t_adv = report.t_adv;
                    tcil = Some(report);
                    t_adv
                }
            };
            log::debug!("seed {seed} task {t} {cal}: T = {:.4}", temperature.value());
            let scored = calib::score(&test_logits, temperature)?;
            let width = equal_width_bins(&scored, cfg.bins)?;
            let ece = width.calibration_error();
            let aece = if scored.len() >= cfg.bins {
                equal_mass_bins(&scored, cfg.bins)?.calibration_error()
            } else {
                ece
            };
            if !ece.is_finite() || !aece.is_finite() {
                return Err(Error::Numeric(format!(
                    "calibration error is not finite at task {t}"
                )));
            }
            records.push(MetricsRecord {
                seed,
                task_index: t,
                calibrator: cal,
                temperature: temperature.value(),
                eps_adv: tcil.as_ref().map(|r| r.eps_adv),
                t_target: tcil.as_ref().map(|r| r.t_target.value()),
                eps_unreachable: tcil.as_ref().map(|r| r.search.unreachable),
                mispred_old: tcil.as_ref().and_then(|r| r.mispred_old),
                mispred_new: tcil.as_ref().map(|r| r.mispred_new),
                accuracy: accuracy.overall,
                per_task_accuracy: accuracy.per_task.iter().map(|(&k, &v)| (k, v)).collect(),
                ece_percent: 100.0 * ece,
                aece_percent: 100.0 * aece,
                bins: width.bins,
            });
        }
    }
    Ok(records)
}

/// One JSON object per line.
pub fn write_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                row: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reliability bins of every record as CSV.
pub fn bins_csv(records: &[MetricsRecord]) -> String {
    let mut out =
        String::from("seed,task,calibrator,bin_lower,bin_upper,count,accuracy,confidence\n");
    for r in records {
        for b in &r.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.seed,
                r.task_index,
                r.calibrator,
                b.lower,
                b.upper,
                b.count,
                b.accuracy,
                b.confidence
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub calibrator: Calibrator,
    pub seeds: usize,
    /// Accuracy (percent) at the last task.
    pub final_accuracy: MeanStd,
    /// ECE (percent) averaged over tasks.
    pub avg_ece: MeanStd,
    pub avg_aece: MeanStd,
    /// ECE (percent) at the last task.
    pub final_ece: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, c: Calibrator) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.calibrator == c)
    }
}

/// Per-calibrator mean ± std across seeds, calibrators in first-seen order.
pub fn summarize(records: &[MetricsRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to summarize".into()));
    }
    let mut order: Vec<Calibrator> = Vec::new();
    for r in records {
        if !order.contains(&r.calibrator) {
            order.push(r.calibrator);
        }
    }
    let mut seeds: Vec<u64> = Vec::new();
    for r in records {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    let rows = order
        .into_iter()
        .map(|cal| {
            let (mut acc, mut ece, mut aece, mut fece) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &seed in &seeds {
                let mine: Vec<&MetricsRecord> = records
                    .iter()
                    .filter(|r| r.seed == seed && r.calibrator == cal)
                    .collect();
                let Some(last) = mine.iter().max_by_key(|r| r.task_index) else {
                    continue;
                };
                let n = mine.len() as f64;
                acc.push(100.0 * last.accuracy);
                fece.push(last.ece_percent);
                ece.push(mine.iter().map(|r| r.ece_percent).sum::<f64>() / n);
                aece.push(mine.iter().map(|r| r.aece_percent).sum::<f64>() / n);
            }
            SummaryRow {
                calibrator: cal,
                seeds: acc.len(),
                final_accuracy: MeanStd::of(&acc),
                avg_ece: MeanStd::of(&ece),
                avg_aece: MeanStd::of(&aece),
                final_ece: MeanStd::of(&fece),
            }
        })
        .collect();
    Ok(Summary { rows })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>5} {:>16} {:>16} {:>16} {:>16}",
            "calibrator", "seeds", "final acc %", "avg ECE %", "avg AECE %", "final ECE %"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>5} {:>16} {:>16} {:>16} {:>16}",
                r.calibrator.name(),
                r.seeds,
                r.final_accuracy.to_string(),
                r.avg_ece.to_string(),
                r.avg_aece.to_string(),
                r.final_ece.to_string()
            )?;
        }
        Ok(())
    }
}
