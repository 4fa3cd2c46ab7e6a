//! Temperature calibration from adversarially perturbed exemplars.
//!
//! Exemplars in memory are overfit, so fitting a temperature on them directly
//! yields a temperature that is far too low. Instead every exemplar is moved
//! by one targeted sign-gradient step of a shared magnitude `eps`:
//!
//! - the direction is set per exemplar by a target class chosen in feature
//!   space: new-task exemplars are pushed toward their farthest class mean,
//!   old-task exemplars toward their closest one, so old tasks (which really
//!   are less accurate) get easier, more frequent mispredictions;
//! - the magnitude is found by bisection so that the perturbed new-task
//!   exemplars reproduce the temperature fitted on the new-task validation
//!   split.
//!
//! The temperature fitted on the full perturbed memory is the output.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{collect_logits, temp_opt, LabeledLogits, TempBounds, Temperature};
use crate::cil::{IncrementalState, Memory};
use crate::datagen::{ClassRange, Sample};
use crate::error::{Error, Result};
use crate::nnet::{argmax_class, Network};
use crate::ClassId;

/// Per-class mean feature vectors over memory exemplars.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMeans {
    means: BTreeMap<ClassId, Vec<f64>>,
    counts: BTreeMap<ClassId, usize>,
}

impl FeatureMeans {
    /// Means from precomputed `(features, label)` pairs. Every class in
    /// `1..=classes_seen` must appear at least once.
    pub fn from_features<'a, I>(items: I, classes_seen: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], ClassId)>,
    {
        let mut sums: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        for (f, y) in items {
            let acc = sums.entry(y).or_insert_with(|| vec![0.0; f.len()]);
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v;
            }
            *counts.entry(y).or_default() += 1;
        }
        if let Some(c) = (1..=classes_seen)
            .map(ClassId)
            .find(|c| !counts.contains_key(c))
        {
            return Err(Error::MissingClass(c));
        }
        let means = sums
            .into_iter()
            .map(|(c, mut s)| {
                let n = counts[&c] as f64;
                s.iter_mut().for_each(|v| *v /= n);
                (c, s)
            })
            .collect();
        Ok(FeatureMeans { means, counts })
    }

    pub fn get(&self, c: ClassId) -> Option<&[f64]> {
        self.means.get(&c).map(Vec::as_slice)
    }

    pub fn count(&self, c: ClassId) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.means.keys().copied()
    }
}

/// Mean feature vector of each class's exemplars.
pub fn feature_means<N: Network + ?Sized>(model: &N, memory: &Memory) -> Result<FeatureMeans> {
    if memory.is_empty() {
        return Err(Error::Precondition(
            "feature means over an empty memory".into(),
        ));
    }
    let feats = exemplar_features(model, memory.exemplars())?;
    FeatureMeans::from_features(
        feats
            .iter()
            .map(Vec::as_slice)
            .zip(memory.exemplars().iter().map(|s| s.y)),
        memory.classes_seen(),
    )
}

fn exemplar_features<N: Network + ?Sized>(model: &N, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| model.features(&s.x)).collect()
}

/// How the target class of each perturbation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum DirectionPolicy {
    /// Farthest class for new-task exemplars, closest for old-task ones.
    Tcil,
    /// Uniformly random class other than the true one.
    RandomClass {
        seed: u64,
    },
    ClosestOnly,
    FarthestOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    Closest,
    Farthest,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

// Ties go to the lowest class index.
fn extreme_class(
    features: &[f64],
    y: ClassId,
    means: &FeatureMeans,
    rule: Rule,
) -> Option<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    for (&c, mu) in &means.means {
        if c == y {
            continue;
        }
        let d = distance(features, mu);
        let better = match (best, rule) {
            (None, _) => true,
            (Some((_, b)), Rule::Closest) => d < b,
            (Some((_, b)), Rule::Farthest) => d > b,
        };
        if better {
            best = Some((c, d));
        }
    }
    best.map(|(c, _)| c)
}

/// Target class `y'` for an exemplar with features `features` and label `y`.
///
/// `rng` is only drawn from by [`DirectionPolicy::RandomClass`].
pub fn select_target(
    features: &[f64],
    y: ClassId,
    means: &FeatureMeans,
    policy: DirectionPolicy,
    new_classes: ClassRange,
    rng: &mut impl Rng,
) -> Result<ClassId> {
    if means.len() < 2 {
        return Err(Error::Domain(format!(
            "target selection needs at least 2 classes, have {}",
            means.len()
        )));
    }
    if means.get(y).is_none() {
        return Err(Error::MissingClass(y));
    }
    let rule = match policy {
        DirectionPolicy::Tcil if new_classes.contains(y) => Rule::Farthest,
        DirectionPolicy::Tcil => Rule::Closest,
        DirectionPolicy::ClosestOnly => Rule::Closest,
        DirectionPolicy::FarthestOnly => Rule::Farthest,
        DirectionPolicy::RandomClass { .. } => {
            let others: Vec<ClassId> = means.classes().filter(|&c| c != y).collect();
            return Ok(others[rng.random_range(0..others.len())]);
        }
    };
    Ok(extreme_class(features, y, means, rule).expect("at least one other class"))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Descent direction toward `target`: `-sign(grad_x CE(x, target))`.
fn attack_direction<N: Network + ?Sized>(
    model: &N,
    x: &[f64],
    target: ClassId,
) -> Result<Vec<f64>> {
    Ok(model
        .input_gradient(x, target)?
        .into_iter()
        .map(|g| -sign(g))
        .collect())
}

fn step(x: &[f64], direction: &[f64], eps: f64, clip: bool) -> Vec<f64> {
    x.iter()
        .zip(direction)
        .map(|(v, d)| {
            let moved = v + eps * d;
            if clip {
                moved.clamp(0.0, 1.0)
            } else {
                moved
            }
        })
        .collect()
}

/// `x - eps * sign(grad_x CE(x, target))`, optionally clamped to `[0, 1]`.
pub fn fgsm_targeted<N: Network + ?Sized>(
    model: &N,
    x: &[f64],
    target: ClassId,
    eps: f64,
    clip: bool,
) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!(
            "perturbation magnitude {eps} must be non-negative"
        )));
    }
    let dir = attack_direction(model, x, target)?;
    Ok(step(x, &dir, eps, clip))
}

/// Bisection settings for the perturbation magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagSearchConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for MagSearchConfig {
    fn default() -> Self {
        MagSearchConfig {
            eps_low: 0.0,
            eps_high: 1.0,
            tolerance: 1e-3,
            max_iters: 64,
        }
    }
}

impl MagSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low >= 0.0 && self.eps_high > self.eps_low && self.eps_high.is_finite()) {
            return Err(Error::Domain(format!(
                "magnitude bracket must satisfy 0 <= low < high, got [{}, {}]",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Domain("magnitude tolerance must be positive".into()));
        }
        Ok(())
    }

    /// `ceil(log2((high - low) / tolerance))`
    pub fn expected_iterations(&self) -> usize {
        let ratio = (self.eps_high - self.eps_low) / self.tolerance;
        if ratio <= 1.0 {
            0
        } else {
            (ratio.log2().ceil() as usize).min(self.max_iters)
        }
    }
}

/// Result of [`mag_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagSearchOutcome {
    pub eps: f64,
    pub iterations: usize,
    pub temp_opt_calls: usize,
    /// Even the upper bracket end leaves the perturbed temperature below target.
    pub unreachable: bool,
    /// `(eps, T_adv(eps))` at every probe, in order.
    pub probes: Vec<(f64, f64)>,
}

/// New-task exemplars prepared for repeated perturbation: each one's
/// farthest-class direction is fixed, only the step length varies.
pub struct FarthestProbe<'a, N: ?Sized> {
    model: &'a N,
    samples: Vec<(&'a Sample, Vec<f64>)>,
    bounds: TempBounds,
    clip: bool,
}

impl<'a, N: Network + ?Sized> FarthestProbe<'a, N> {
    pub fn new(
        model: &'a N,
        new_exemplars: &'a [Sample],
        features: &[Vec<f64>],
        means: &FeatureMeans,
        bounds: TempBounds,
        clip: bool,
    ) -> Result<Self> {
        if new_exemplars.is_empty() {
            return Err(Error::Sequencing(
                "no new-task exemplars in memory; update memory before calibrating".into(),
            ));
        }
        let samples = new_exemplars
            .iter()
            .zip(features)
            .map(|(s, f)| {
                let target = extreme_class(f, s.y, means, Rule::Farthest).ok_or_else(|| {
                    Error::Domain("target selection needs at least 2 classes".into())
                })?;
                Ok((s, attack_direction(model, &s.x, target)?))
            })
            .collect::<Result<_>>()?;
        Ok(FarthestProbe {
            model,
            samples,
            bounds,
            clip,
        })
    }

    /// Temperature fitted on the exemplars perturbed with magnitude `eps`.
    pub fn temperature(&self, eps: f64) -> Result<Temperature> {
        let data: Vec<LabeledLogits> = self
            .samples
            .iter()
            .map(|(s, dir)| {
                let x = step(&s.x, dir, eps, self.clip);
                Ok(LabeledLogits::new(self.model.logits(&x)?, s.y))
            })
            .collect::<Result<_>>()?;
        temp_opt(&data, &self.bounds)
    }
}

/// Bisect the magnitude so that new-task exemplars perturbed toward their
/// farthest class yield `t_target`.
pub fn mag_search<N: Network + ?Sized>(
    probe: &FarthestProbe<'_, N>,
    t_target: Temperature,
    cfg: &MagSearchConfig,
) -> Result<MagSearchOutcome> {
    cfg.validate()?;
    let (mut low, mut high) = (cfg.eps_low, cfg.eps_high);
    let mut probes = Vec::new();
    let mut iterations = 0;
    while high - low > cfg.tolerance && iterations < cfg.max_iters {
        let eps = (low + high) / 2.0;
        let t = probe.temperature(eps)?;
        probes.push((eps, t.value()));
        if t < t_target {
            low = eps;
        } else {
            high = eps;
        }
        iterations += 1;
    }
    let mut outcome = MagSearchOutcome {
        eps: (low + high) / 2.0,
        iterations,
        temp_opt_calls: iterations,
        unreachable: false,
        probes,
    };
    if high == cfg.eps_high {
        let t = probe.temperature(cfg.eps_high)?;
        outcome.temp_opt_calls += 1;
        outcome.probes.push((cfg.eps_high, t.value()));
        if t < t_target {
            outcome.eps = cfg.eps_high;
            outcome.unreachable = true;
        }
    }
    Ok(outcome)
}

/// Whether an exemplar belongs to the task being calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Old,
    New,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedItem {
    pub x_adv: Vec<f64>,
    pub y: ClassId,
    pub target: ClassId,
    pub group: Group,
}

/// Perturbed copies of a set of exemplars.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerturbedSet {
    pub items: Vec<PerturbedItem>,
}

/// Perturb every exemplar with magnitude `eps` toward the target chosen by
/// `policy`. `features` must hold `phi(x)` for each exemplar, in order.
#[allow(clippy::too_many_arguments)]
pub fn perturb_exemplars<N: Network + ?Sized>(
    model: &N,
    exemplars: &[Sample],
    features: &[Vec<f64>],
    means: &FeatureMeans,
    policy: DirectionPolicy,
    new_classes: ClassRange,
    eps: f64,
    clip: bool,
) -> Result<PerturbedSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(match policy {
        DirectionPolicy::RandomClass { seed } => seed,
        _ => 0,
    });
    let items = exemplars
        .iter()
        .zip(features)
        .map(|(s, f)| {
            let target = select_target(f, s.y, means, policy, new_classes, &mut rng)?;
            Ok(PerturbedItem {
                x_adv: fgsm_targeted(model, &s.x, target, eps, clip)?,
                y: s.y,
                target,
                group: if new_classes.contains(s.y) {
                    Group::New
                } else {
                    Group::Old
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(PerturbedSet { items })
}

/// Fraction of `group`'s perturbed items whose prediction differs from the
/// original label.
pub fn misprediction_rate<N: Network + ?Sized>(
    model: &N,
    set: &PerturbedSet,
    group: Group,
) -> Result<f64> {
    let mut n = 0usize;
    let mut wrong = 0usize;
    for it in set.items.iter().filter(|it| it.group == group) {
        n += 1;
        wrong += (model.predict(&it.x_adv)? != it.y) as usize;
    }
    if n == 0 {
        return Err(Error::Precondition(format!(
            "no {group:?} items in the perturbed set"
        )));
    }
    Ok(wrong as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcilConfig {
    pub magsearch: MagSearchConfig,
    pub bounds: TempBounds,
    /// Clamp perturbed inputs to `[0, 1]`.
    pub clip: bool,
}

impl Default for TcilConfig {
    fn default() -> Self {
        TcilConfig {
            magsearch: MagSearchConfig::default(),
            bounds: TempBounds::default(),
            clip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcilReport {
    pub t_target: Temperature,
    pub t_adv: Temperature,
    pub eps_adv: f64,
    pub search: MagSearchOutcome,
    /// `None` when the memory holds no old-task exemplars.
    pub mispred_old: Option<f64>,
    pub mispred_new: f64,
    pub perturbed: PerturbedSet,
}

/// Calibrated temperature for the state's latest task. Memory must already
/// contain that task's exemplars.
pub fn tcil_temperature(
    state: &IncrementalState,
    valid: &[Sample],
    policy: DirectionPolicy,
    cfg: &TcilConfig,
) -> Result<TcilReport> {
    let classes = state
        .current_classes
        .ok_or_else(|| Error::Sequencing("no task has been trained yet".into()))?;
    tcil_temperature_with(&state.model, &state.memory, valid, classes, policy, cfg)
}

/// [`tcil_temperature`] on an explicit network, memory and new-class block.
pub fn tcil_temperature_with<N: Network + ?Sized>(
    model: &N,
    memory: &Memory,
    valid: &[Sample],
    new_classes: ClassRange,
    policy: DirectionPolicy,
    cfg: &TcilConfig,
) -> Result<TcilReport> {
    if valid.is_empty() {
        return Err(Error::Precondition(
            "empty new-task validation split".into(),
        ));
    }
    if memory.classes_seen() != new_classes.last.0 {
        return Err(Error::Sequencing(format!(
            "memory covers {} classes but the current task ends at class {}",
            memory.classes_seen(),
            new_classes.last
        )));
    }
    let t_target = temp_opt(
        &collect_logits(model, valid.iter().map(Sample::pair))?,
        &cfg.bounds,
    )?;

    let exemplars = memory.exemplars();
    let features = exemplar_features(model, exemplars)?;
    let means = FeatureMeans::from_features(
        features
            .iter()
            .map(Vec::as_slice)
            .zip(exemplars.iter().map(|s| s.y)),
        memory.classes_seen(),
    )?;

    let (new_samples, new_features): (Vec<Sample>, Vec<Vec<f64>>) = exemplars
        .iter()
        .zip(&features)
        .filter(|(s, _)| new_classes.contains(s.y))
        .map(|(s, f)| (s.clone(), f.clone()))
        .unzip();
    let probe = FarthestProbe::new(
        model,
        &new_samples,
        &new_features,
        &means,
        cfg.bounds,
        cfg.clip,
    )?;
    let search = mag_search(&probe, t_target, &cfg.magsearch)?;
    if search.unreachable {
        log::warn!(
            "target temperature {:.4} not reached at eps = {}; using the upper bracket",
            t_target.value(),
            cfg.magsearch.eps_high
        );
    }

    let perturbed = perturb_exemplars(
        model,
        exemplars,
        &features,
        &means,
        policy,
        new_classes,
        search.eps,
        cfg.clip,
    )?;
    let logits: Vec<LabeledLogits> = perturbed
        .items
        .iter()
        .map(|it| Ok(LabeledLogits::new(model.logits(&it.x_adv)?, it.y)))
        .collect::<Result<_>>()?;
    let t_adv = temp_opt(&logits, &cfg.bounds)?;

    let rate = |g: Group| {
        let (mut n, mut wrong) = (0usize, 0usize);
        for (it, l) in perturbed.items.iter().zip(&logits) {
            if it.group == g {
                n += 1;
                wrong += (argmax_class(&l.logits) != it.y) as usize;
            }
        }
        (n > 0).then(|| wrong as f64 / n as f64)
    };
    Ok(TcilReport {
        t_target,
        t_adv,
        eps_adv: search.eps,
        mispred_old: rate(Group::Old),
        mispred_new: rate(Group::New).unwrap_or(0.0),
        search,
        perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Dense, Matrix, MlpModel};

    fn means_at(points: &[(usize, Vec<f64>)]) -> FeatureMeans {
        FeatureMeans::from_features(points.iter().map(|(c, f)| (f.as_slice(), ClassId(*c))), 0)
            .unwrap()
    }

    #[test]
    fn forced_choice_with_two_classes() {
        let m = means_at(&[(1, vec![0.0]), (2, vec![3.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for policy in [
            DirectionPolicy::Tcil,
            DirectionPolicy::ClosestOnly,
            DirectionPolicy::FarthestOnly,
            DirectionPolicy::RandomClass { seed: 3 },
        ] {
            for new in [ClassRange::new(1, 2), ClassRange::new(3, 3)] {
                assert_eq!(
                    select_target(&[0.0], ClassId(1), &m, policy, new, &mut rng).unwrap(),
                    ClassId(2)
                );
            }
        }
    }

    #[test]
    fn closest_for_old_farthest_for_new() {
        // phi(x) at the origin; class means at distances 1, 2, 5
        let m = means_at(&[
            (1, vec![1.0, 0.0]),
            (2, vec![0.0, 2.0]),
            (3, vec![-3.0, 4.0]),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = [0.0, 0.0];
        let old = select_target(
            &f,
            ClassId(1),
            &m,
            DirectionPolicy::Tcil,
            ClassRange::new(4, 4),
            &mut rng,
        );
        assert_eq!(old.unwrap(), ClassId(2));
        let new = select_target(
            &f,
            ClassId(1),
            &m,
            DirectionPolicy::Tcil,
            ClassRange::new(1, 3),
            &mut rng,
        );
        assert_eq!(new.unwrap(), ClassId(3));
    }

    #[test]
    fn ties_pick_lowest_class() {
        let m = means_at(&[(1, vec![0.0]), (2, vec![1.0]), (3, vec![-1.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [DirectionPolicy::ClosestOnly, DirectionPolicy::FarthestOnly] {
            let c =
                select_target(&[0.0], ClassId(1), &m, p, ClassRange::new(1, 3), &mut rng).unwrap();
            assert_eq!(c, ClassId(2));
        }
    }

    #[test]
    fn single_class_is_a_domain_error() {
        let m = means_at(&[(1, vec![0.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_target(
                &[0.0],
                ClassId(1),
                &m,
                DirectionPolicy::Tcil,
                ClassRange::new(1, 1),
                &mut rng
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn missing_class_is_named() {
        let r =
            FeatureMeans::from_features([(&[0.0][..], ClassId(1)), (&[1.0][..], ClassId(3))], 3);
        assert!(matches!(r, Err(Error::MissingClass(ClassId(2)))));
    }

    #[test]
    fn random_policy_never_returns_true_class() {
        let m = means_at(&(1..=6).map(|c| (c, vec![c as f64])).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..200 {
            let y = ClassId(1 + i % 6);
            let c = select_target(
                &[0.0],
                y,
                &m,
                DirectionPolicy::RandomClass { seed: 0 },
                ClassRange::new(5, 6),
                &mut rng,
            )
            .unwrap();
            assert_ne!(c, y);
        }
    }

    fn linear_model() -> MlpModel {
        let w = Matrix::from_vec(3, 2, vec![1.0, -1.0, -0.5, 2.0, 0.0, 0.3]).unwrap();
        MlpModel::from_layers(vec![], Dense::new(w, vec![0.1, 0.0, -0.2]).unwrap()).unwrap()
    }

    #[test]
    fn fgsm_sign_structure() {
        let m = linear_model();
        let x = [0.4, 0.6];
        assert_eq!(
            fgsm_targeted(&m, &x, ClassId(2), 0.0, false).unwrap(),
            x.to_vec()
        );
        let adv = fgsm_targeted(&m, &x, ClassId(2), 0.05, false).unwrap();
        for (a, b) in adv.iter().zip(&x) {
            let d = (a - b).abs();
            assert!((d - 0.05).abs() < 1e-15 || d == 0.0);
        }
        let clipped = fgsm_targeted(&m, &[0.99, 0.01], ClassId(1), 0.5, true).unwrap();
        assert!(clipped.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(fgsm_targeted(&m, &x, ClassId(2), -0.1, false).is_err());
    }

    #[test]
    fn bisection_iteration_count() {
        let cfg = MagSearchConfig {
            tolerance: 0.25,
            ..MagSearchConfig::default()
        };
        assert_eq!(cfg.expected_iterations(), 2);
        assert_eq!(MagSearchConfig::default().expected_iterations(), 10);
    }
}
