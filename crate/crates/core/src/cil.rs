//! Experience-replay incremental training and the bounded exemplar memory.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClassRange, Sample};
use crate::error::{Error, Result};
use crate::nnet::{Architecture, HeadInit, MlpModel, Network};
use crate::ClassId;

/// Capacity-bounded exemplar store over all seen classes, grouped by class
/// in ascending label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    capacity: usize,
    exemplars: Vec<Sample>,
    classes_seen: usize,
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Memory {
            capacity,
            exemplars: Vec::new(),
            classes_seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn classes_seen(&self) -> usize {
        self.classes_seen
    }

    pub fn exemplars(&self) -> &[Sample] {
        &self.exemplars
    }

    /// Positions of each class's exemplars.
    pub fn per_class_index(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut map: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.exemplars.iter().enumerate() {
            map.entry(s.y).or_default().push(i);
        }
        map
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        self.per_class_index()
            .into_iter()
            .map(|(c, v)| (c, v.len()))
            .collect()
    }

    /// Exemplars whose label lies in `classes`.
    pub fn of_classes(&self, classes: ClassRange) -> Vec<Sample> {
        self.exemplars
            .iter()
            .filter(|s| classes.contains(s.y))
            .cloned()
            .collect()
    }

    /// Add `new_classes` and rebalance: each class gets `M / K` slots, the
    /// remainder going one each to the lowest labels. Old classes are
    /// down-sampled uniformly at random; new classes are sampled uniformly
    /// from `new_train`.
    pub fn update(
        &mut self,
        new_train: &[Sample],
        new_classes: ClassRange,
        seed: u64,
    ) -> Result<()> {
        if new_classes.first.0 != self.classes_seen + 1 {
            return Err(Error::Stream(format!(
                "memory holds classes 1..={} but the update starts at {}",
                self.classes_seen, new_classes.first
            )));
        }
        if let Some(s) = new_train.iter().find(|s| !new_classes.contains(s.y)) {
            return Err(Error::Precondition(format!(
                "sample labelled {} outside the new classes {}..={}",
                s.y, new_classes.first, new_classes.last
            )));
        }
        let k = new_classes.last.0;
        let quotas = class_quotas(self.capacity, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut pools: BTreeMap<ClassId, Vec<Sample>> = BTreeMap::new();
        for s in self.exemplars.drain(..).chain(new_train.iter().cloned()) {
            pools.entry(s.y).or_default().push(s);
        }
        let mut kept = Vec::with_capacity(self.capacity);
        for (c, pool) in pools {
            let quota = quotas[c.index()];
            if pool.len() <= quota {
                kept.extend(pool);
            } else {
                let mut picks: Vec<usize> = (0..pool.len())
                    .collect::<Vec<_>>()
                    .choose_multiple(&mut rng, quota)
                    .copied()
                    .collect();
                picks.sort_unstable();
                kept.extend(picks.into_iter().map(|i| pool[i].clone()));
            }
        }
        self.exemplars = kept;
        self.classes_seen = k;
        Ok(())
    }
}

/// Per-class slot counts for `k` classes sharing `capacity`.
pub fn class_quotas(capacity: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let base = capacity / k;
    let rem = capacity % k;
    (0..k).map(|i| base + usize::from(i < rem)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 2e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Precondition("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Precondition("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Precondition(
                "weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First-order optimizer state over the model's parameter slices.
struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: &TrainConfig, model: &mut MlpModel) -> Self {
        let shapes: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    // L2 weight decay folded into the gradient.
    fn apply(&mut self, model: &mut MlpModel, grads: &[&[f64]]) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (params, g)) in model.param_slices_mut().into_iter().zip(grads).enumerate() {
            for (i, (p, &gi)) in params.iter_mut().zip(g.iter()).enumerate() {
                let g = gi + self.weight_decay * *p;
                match self.kind {
                    OptimizerKind::Sgd => *p -= self.lr * g,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[k][i];
                        let v = &mut self.v[k][i];
                        *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                        *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *p -= self.lr * mh / (vh.sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Model, memory and progress of one incremental run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalState {
    pub model: MlpModel,
    pub memory: Memory,
    /// Last trained task (0 before the first).
    pub task_index: usize,
    pub classes_seen: usize,
    /// Classes of the most recently trained task.
    pub current_classes: Option<ClassRange>,
    pub head_init: HeadInit,
}

impl IncrementalState {
    /// Fresh model with an empty head and empty memory.
    pub fn new(arch: &Architecture, memory_capacity: usize, seed: u64) -> Result<Self> {
        let arch = Architecture {
            num_classes: 0,
            ..arch.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(IncrementalState {
            model: MlpModel::init(&arch, &mut rng)?,
            memory: Memory::new(memory_capacity),
            task_index: 0,
            classes_seen: 0,
            current_classes: None,
            head_init: HeadInit::Zero,
        })
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub samples_seen: usize,
}

/// Train on task `task` (1-based, classes `classes`) using its training split
/// and the current memory. The head is widened first; memory is not updated.
pub fn train_task(
    state: &mut IncrementalState,
    task: usize,
    classes: ClassRange,
    train: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if classes.first.0 != state.classes_seen + 1 {
        return Err(Error::Stream(format!(
            "task {task} starts at class {} but {} classes have been seen",
            classes.first, state.classes_seen
        )));
    }
    if train.is_empty() {
        return Err(Error::Precondition(format!(
            "task {task} has no training data"
        )));
    }
    if let Some(s) = train.iter().find(|s| !classes.contains(s.y)) {
        return Err(Error::Stream(format!(
            "training sample labelled {} outside task {task}",
            s.y
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    state
        .model
        .widen_head(classes.len(), state.head_init, &mut rng)?;

    let pool: Vec<&Sample> = train.iter().chain(state.memory.exemplars()).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut opt = Optimizer::new(cfg, &mut state.model);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lg = state
                .model
                .param_gradients(batch.iter().map(|&i| pool[i].pair()), 1.0)?;
            if !lg.loss.is_finite() {
                return Err(Error::Numeric(format!("training loss became {}", lg.loss)));
            }
            total += lg.loss * batch.len() as f64;
            opt.apply(&mut state.model, &lg.grads.slices());
        }
        if !state.model.all_finite() {
            return Err(Error::Numeric("model parameters became non-finite".into()));
        }
        epoch_losses.push(total / pool.len() as f64);
    }
    state.task_index = task;
    state.classes_seen = classes.last.0;
    state.current_classes = Some(classes);
    Ok(TrainLog {
        epoch_losses,
        samples_seen: pool.len(),
    })
}

/// Top-1 accuracy overall and per originating task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_task: BTreeMap<usize, f64>,
}

/// Top-1 accuracy of `model` on `samples`; `task_of` maps a class to its task.
///
/// The temperature is accepted for interface symmetry; it never changes the
/// argmax.
pub fn evaluate<N: Network + ?Sized>(
    model: &N,
    samples: &[&Sample],
    task_of: impl Fn(ClassId) -> usize,
    _temperature: crate::Temperature,
) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(Error::Precondition(
            "evaluate on an empty sample set".into(),
        ));
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for s in samples {
        let ok = model.predict(&s.x)? == s.y;
        correct += ok as usize;
        let e = hits.entry(task_of(s.y)).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    Ok(Accuracy {
        overall: correct as f64 / samples.len() as f64,
        per_task: hits
            .into_iter()
            .map(|(t, (c, n))| (t, c as f64 / n as f64))
            .collect(),
    })
}
