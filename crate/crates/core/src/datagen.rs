//! Class-incremental task streams: synthetic Gaussian blobs and CSV files.
//!
//! Splits are reached through [`TaskStream`] accessors. An optional access
//! log records which task's train, validation or test data was requested.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: ClassId,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: ClassId) -> Self {
        Sample { x, y }
    }

    /// `(x, y)` view for the network and calibration APIs.
    pub fn pair(&self) -> (&[f64], ClassId) {
        (&self.x, self.y)
    }
}

/// Inclusive, contiguous block of class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRange {
    pub first: ClassId,
    pub last: ClassId,
}

impl ClassRange {
    pub fn new(first: usize, last: usize) -> Self {
        debug_assert!(first >= 1 && last >= first);
        ClassRange {
            first: ClassId(first),
            last: ClassId(last),
        }
    }

    pub fn len(&self) -> usize {
        self.last.0 - self.first.0 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.first <= c && c <= self.last
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> {
        (self.first.0..=self.last.0).map(ClassId)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
    pub blob_spread: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_tasks: 5,
            classes_per_task: 2,
            input_dim: 8,
            train_per_class: 200,
            valid_per_class: 40,
            test_per_class: 100,
            blob_spread: 0.35,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("valid_per_class", self.valid_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config {
                    path: name.into(),
                    message: "must be at least 1".into(),
                });
            }
        }
        if !(self.blob_spread > 0.0 && self.blob_spread.is_finite()) {
            return Err(Error::Config {
                path: "blob_spread".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One task's class block and its splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    index: usize,
    classes: ClassRange,
    train: Vec<Sample>,
    valid: Vec<Sample>,
    test: Vec<Sample>,
}

impl TaskData {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn classes(&self) -> ClassRange {
        self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One recorded split access: which split of which (1-based) task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SplitAccess {
    pub split: Split,
    pub task: usize,
}

pub type AccessLog = Arc<Mutex<Vec<SplitAccess>>>;

/// Ordered, class-disjoint tasks.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
    input_dim: usize,
    in_unit_range: bool,
    log: Option<AccessLog>,
}

impl TaskStream {
    fn new(tasks: Vec<TaskData>, input_dim: usize) -> Self {
        let in_unit_range = tasks.iter().all(|t| {
            t.train
                .iter()
                .chain(&t.valid)
                .chain(&t.test)
                .all(|s| s.x.iter().all(|v| (0.0..=1.0).contains(v)))
        });
        TaskStream {
            tasks,
            input_dim,
            in_unit_range,
            log: None,
        }
    }

    /// Attach a fresh access log and return a handle to it.
    pub fn with_access_log(mut self) -> (Self, AccessLog) {
        let log = AccessLog::default();
        self.log = Some(log.clone());
        (self, log)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Whether every feature of every sample lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.in_unit_range
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.last().map_or(0, |t| t.classes.last.0)
    }

    /// `C_t` for 1-based task `t`.
    pub fn classes(&self, t: usize) -> ClassRange {
        self.task(t).classes
    }

    /// `C_{t,old}`: classes introduced before task `t`.
    pub fn old_class_count(&self, t: usize) -> usize {
        self.task(t).classes.first.0 - 1
    }

    /// 1-based task owning class `c`.
    pub fn task_of(&self, c: ClassId) -> Option<usize> {
        self.tasks
            .iter()
            .find(|t| t.classes.contains(c))
            .map(|t| t.index)
    }

    pub fn train(&self, t: usize) -> &[Sample] {
        self.record(Split::Train, t);
        &self.task(t).train
    }

    /// Validation data of task `t` only.
    pub fn valid(&self, t: usize) -> &[Sample] {
        self.record(Split::Valid, t);
        &self.task(t).valid
    }

    pub fn test(&self, t: usize) -> &[Sample] {
        self.record(Split::Test, t);
        &self.task(t).test
    }

    /// Test samples of tasks `1..=t`, in task order.
    pub fn cumulative_test(&self, t: usize) -> Vec<&Sample> {
        (1..=t).flat_map(|j| self.test(j)).collect()
    }

    pub fn task_data(&self, t: usize) -> &TaskData {
        self.task(t)
    }

    fn task(&self, t: usize) -> &TaskData {
        assert!(
            t >= 1 && t <= self.tasks.len(),
            "task index {t} out of range"
        );
        &self.tasks[t - 1]
    }

    fn record(&self, split: Split, task: usize) {
        if let Some(log) = &self.log {
            log.lock().unwrap().push(SplitAccess { split, task });
        }
    }

    /// Every sample of every split, task by task (train, valid, test).
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.valid).chain(&t.test))
    }
}

/// Gaussian blobs around uniformly drawn class means, clipped to `[0, 1]`.
pub fn gen_gaussian_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.num_tasks * cfg.classes_per_task;
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| (0..cfg.input_dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, cfg.blob_spread)
        .map_err(|e| Error::Domain(format!("blob_spread: {e}")))?;
    let draw = |mean: &[f64], y: ClassId, n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let x = mean
                    .iter()
                    .map(|m| (m + noise.sample(rng)).clamp(0.0, 1.0))
                    .collect();
                Sample::new(x, y)
            })
            .collect()
    };
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let first = t * cfg.classes_per_task + 1;
        let classes = ClassRange::new(first, first + cfg.classes_per_task - 1);
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for c in classes.iter() {
            let mean = &means[c.index()];
            train.extend(draw(mean, c, cfg.train_per_class, &mut rng));
            valid.extend(draw(mean, c, cfg.valid_per_class, &mut rng));
            test.extend(draw(mean, c, cfg.test_per_class, &mut rng));
        }
        tasks.push(TaskData {
            index: t + 1,
            classes,
            train,
            valid,
            test,
        });
    }
    Ok(TaskStream::new(tasks, cfg.input_dim))
}

/// Train and validation shares of each class; the rest is test data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let ok = self.train > 0.0 && self.valid > 0.0 && self.train + self.valid <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "split fractions ({}, {}) must be positive and sum to at most 1",
                self.train, self.valid
            )))
        }
    }

    /// `(train, valid, test)` counts for `n` rows.
    fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let valid = ((n as f64 * self.valid).round() as usize).min(n - train);
        (train, valid, n - train - valid)
    }
}

/// Parse `label,f1,...,fd` rows.
pub fn parse_csv(text: &str) -> Result<Vec<Sample>> {
    let mut rows = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Format {
                    row,
                    message: format!("expected {w} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        if fields.len() < 2 {
            return Err(Error::Format {
                row,
                message: "need a label and at least one feature".into(),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Format {
            row,
            message: format!("bad label `{}`", fields[0]),
        })?;
        if label == 0 {
            return Err(Error::Format {
                row,
                message: "labels are 1-based".into(),
            });
        }
        let x = fields[1..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Format {
                    row,
                    message: format!("bad feature `{f}`"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(Sample::new(x, ClassId(label)));
    }
    if rows.is_empty() {
        return Err(Error::Format {
            row: 0,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}

/// Partition the classes of a CSV file into `num_tasks` ascending blocks
/// and split each class's rows after a seeded shuffle.
pub fn load_csv_stream(
    path: impl AsRef<Path>,
    num_tasks: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<TaskStream> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    csv_stream_from_str(&text, num_tasks, fractions, seed)
}

pub fn csv_stream_from_str(
    text: &str,
    num_tasks: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<TaskStream> {
    fractions.validate()?;
    if num_tasks == 0 {
        return Err(Error::Domain("num_tasks must be at least 1".into()));
    }
    let rows = parse_csv(text)?;
    let input_dim = rows[0].x.len();
    let mut by_class: BTreeMap<ClassId, Vec<Sample>> = BTreeMap::new();
    for s in rows {
        by_class.entry(s.y).or_default().push(s);
    }
    let k = by_class.len();
    if let Some((_, &c)) = by_class.keys().enumerate().find(|(i, c)| c.index() != *i) {
        return Err(Error::Format {
            row: 0,
            message: format!("labels must form 1..={k}; class {c} breaks the sequence"),
        });
    }
    if !k.is_multiple_of(num_tasks) {
        return Err(Error::Format {
            row: 0,
            message: format!("{k} classes cannot be split evenly into {num_tasks} tasks"),
        });
    }
    let per_task = k / num_tasks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut classes_iter = by_class.into_iter();
    for t in 0..num_tasks {
        let first = t * per_task + 1;
        let classes = ClassRange::new(first, first + per_task - 1);
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (_, mut rows) in classes_iter.by_ref().take(per_task) {
            rows.shuffle(&mut rng);
            let (ntr, nva, _) = fractions.counts(rows.len());
            let mut it = rows.into_iter();
            train.extend(it.by_ref().take(ntr));
            valid.extend(it.by_ref().take(nva));
            test.extend(it);
        }
        tasks.push(TaskData {
            index: t + 1,
            classes,
            train,
            valid,
            test,
        });
    }
    Ok(TaskStream::new(tasks, input_dim))
}

/// Render samples as header-free `label,f1,...,fd` lines.
pub fn to_csv<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.y.0.to_string());
        for v in &s.x {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}
