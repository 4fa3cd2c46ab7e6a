//! Softmax probabilities, calibration error metrics and temperature fitting.
//!
//! Metrics are fractions in `[0, 1]`; callers multiply by 100 when reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{argmax_class, Network};
use crate::ClassId;

/// Default number of confidence bins.
pub const DEFAULT_BINS: usize = 10;

/// `log(sum(exp(v)))`, max-shifted.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A strictly positive softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Temperature(value))
        } else {
            Err(Error::Domain(format!(
                "temperature must be positive and finite, got {value}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Search bracket and stopping rule for [`temp_opt`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempBounds {
    pub min: f64,
    pub max: f64,
    /// Bracket width in `ln T` at which golden-section refinement stops.
    pub tolerance: f64,
}

impl Default for TempBounds {
    fn default() -> Self {
        TempBounds {
            min: 0.05,
            max: 20.0,
            tolerance: 1e-4,
        }
    }
}

impl TempBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(Error::Domain(format!(
                "temperature bounds must satisfy 0 < min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Domain(
                "temperature tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Softmax output with its confidence and predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs {
    p: Vec<f64>,
    prediction: ClassId,
}

impl Probs {
    /// Wrap an explicit probability vector. It must sum to one within 1e-9.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        let prediction = argmax_class(&p);
        Ok(Probs { p, prediction })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    /// Maximum class probability.
    pub fn confidence(&self) -> f64 {
        self.p[self.prediction.index()]
    }

    pub fn prediction(&self) -> ClassId {
        self.prediction
    }
}

/// Numerically stable softmax of `logits / T`.
pub fn softmax_with_temp(logits: &[f64], t: Temperature) -> Result<Probs> {
    if logits.is_empty() {
        return Err(Error::Domain("empty logit vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let inv = 1.0 / t.value();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| ((z - max) * inv).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    // argmax on the logits: exp may flatten tiny gaps into exact ties
    let prediction = argmax_class(logits);
    Ok(Probs { p, prediction })
}

/// Logits paired with their true class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLogits {
    pub logits: Vec<f64>,
    pub label: ClassId,
}

impl LabeledLogits {
    pub fn new(logits: Vec<f64>, label: ClassId) -> Self {
        LabeledLogits { logits, label }
    }
}

/// Mean negative log-likelihood under temperature `T`.
pub fn nll(dataset: &[LabeledLogits], t: Temperature) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Precondition("nll over an empty dataset".into()));
    }
    let inv = 1.0 / t.value();
    let mut total = 0.0;
    let mut scaled = Vec::new();
    for s in dataset {
        if s.label.0 == 0 || s.label.0 > s.logits.len() {
            return Err(Error::Label {
                label: s.label.0,
                num_classes: s.logits.len(),
            });
        }
        scaled.clear();
        scaled.extend(s.logits.iter().map(|z| z * inv));
        total += log_sum_exp(&scaled) - scaled[s.label.index()];
    }
    Ok(total / dataset.len() as f64)
}

const COARSE_POINTS: usize = 64;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Temperature minimizing the NLL of `dataset` inside `bounds`.
///
/// A 64-point scan on `ln T` brackets the best grid point, then golden-section
/// search refines inside that bracket. Bounds are returned exactly when they
/// score at least as well as the refined interior point.
pub fn temp_opt(dataset: &[LabeledLogits], bounds: &TempBounds) -> Result<Temperature> {
    bounds.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("temp_opt over an empty dataset".into()));
    }
    let lo = bounds.min.ln();
    let hi = bounds.max.ln();
    let loss = |u: f64| nll(dataset, Temperature(u.exp().clamp(bounds.min, bounds.max)));

    let step = (hi - lo) / (COARSE_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..COARSE_POINTS)
        .map(|i| {
            if i == COARSE_POINTS - 1 {
                hi
            } else {
                lo + step * i as f64
            }
        })
        .collect();
    let mut best_i = 0;
    let mut best = f64::INFINITY;
    for (i, &u) in grid.iter().enumerate() {
        let l = loss(u)?;
        if !l.is_finite() {
            return Err(Error::Numeric(
                "non-finite NLL during temperature search".into(),
            ));
        }
        if l < best {
            best = l;
            best_i = i;
        }
    }

    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(COARSE_POINTS - 1)];
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = loss(c)?;
    let mut fd = loss(d)?;
    while b - a > bounds.tolerance {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = loss(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = loss(d)?;
        }
    }
    let (mut u_best, mut f_best) = if fc < fd { (c, fc) } else { (d, fd) };
    // an endpoint wins ties so monotone losses land exactly on the bound
    for u in [lo, hi] {
        if (u - u_best).abs() <= step {
            let f = loss(u)?;
            if f <= f_best {
                u_best = u;
                f_best = f;
            }
        }
    }
    let _ = f_best;
    let t = if u_best == lo {
        bounds.min
    } else if u_best == hi {
        bounds.max
    } else {
        u_best.exp().clamp(bounds.min, bounds.max)
    };
    Temperature::new(t)
}

/// Temperature fitted on the full test set of every seen task. Reporting
/// only; never fed back into calibration.
pub fn optimal_ts_oracle<N, I, X>(
    model: &N,
    test_samples: I,
    bounds: &TempBounds,
) -> Result<Temperature>
where
    N: Network + ?Sized,
    I: IntoIterator<Item = (X, ClassId)>,
    X: AsRef<[f64]>,
{
    let data = collect_logits(model, test_samples)?;
    temp_opt(&data, bounds)
}

/// Evaluate `model` on every sample and keep the raw logits.
pub fn collect_logits<N, I, X>(model: &N, samples: I) -> Result<Vec<LabeledLogits>>
where
    N: Network + ?Sized,
    I: IntoIterator<Item = (X, ClassId)>,
    X: AsRef<[f64]>,
{
    samples
        .into_iter()
        .map(|(x, y)| Ok(LabeledLogits::new(model.logits(x.as_ref())?, y)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth,
    EqualMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Per-bin accuracy and confidence for a binned set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub scheme: BinScheme,
    pub bins: Vec<Bin>,
    pub total: usize,
}

impl BinStats {
    /// `sum_i |B_i| / N * |acc(B_i) - conf(B_i)|`; empty bins contribute 0.
    pub fn calibration_error(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n) * (b.accuracy - b.confidence).abs())
            .sum()
    }
}

/// A scored prediction: probabilities and the true class.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub probs: Probs,
    pub label: ClassId,
}

impl Scored {
    pub fn new(probs: Probs, label: ClassId) -> Self {
        Scored { probs, label }
    }

    #[inline]
    pub fn confidence(&self) -> f64 {
        self.probs.confidence()
    }

    #[inline]
    pub fn correct(&self) -> bool {
        self.probs.prediction() == self.label
    }
}

/// Upper edge of equal-width bin `i` (1-based) out of `b`.
#[inline]
fn edge(i: usize, b: usize) -> f64 {
    i as f64 / b as f64
}

/// 1-based equal-width bin holding confidence `p`: `((i-1)/B, i/B]`, with 0
/// assigned to the first bin.
fn width_bin(p: f64, b: usize) -> usize {
    let mut i = ((p * b as f64).ceil() as usize).clamp(1, b);
    while i > 1 && p <= edge(i - 1, b) {
        i -= 1;
    }
    while i < b && p > edge(i, b) {
        i += 1;
    }
    i
}

#[derive(Default, Clone, Copy)]
struct Accum {
    count: usize,
    correct: usize,
    conf_sum: f64,
}

impl Accum {
    fn push(&mut self, s: &Scored) {
        self.count += 1;
        self.correct += s.correct() as usize;
        self.conf_sum += s.confidence();
    }

    fn finish(self, lower: f64, upper: f64) -> Bin {
        let (accuracy, confidence) = if self.count == 0 {
            (0.0, 0.0)
        } else {
            (
                self.correct as f64 / self.count as f64,
                self.conf_sum / self.count as f64,
            )
        };
        Bin {
            lower,
            upper,
            count: self.count,
            accuracy,
            confidence,
        }
    }
}

/// Equal-width reliability bins over confidence.
pub fn equal_width_bins(samples: &[Scored], bins: usize) -> Result<BinStats> {
    if bins == 0 {
        return Err(Error::Domain("bin count must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to bin".into()));
    }
    let mut acc = vec![Accum::default(); bins];
    for s in samples {
        acc[width_bin(s.confidence(), bins) - 1].push(s);
    }
    Ok(BinStats {
        scheme: BinScheme::EqualWidth,
        bins: acc
            .into_iter()
            .enumerate()
            .map(|(i, a)| a.finish(edge(i, bins), edge(i + 1, bins)))
            .collect(),
        total: samples.len(),
    })
}

/// Sizes of equal-mass bins: `N / B` each, remainder one apiece on the last bins.
pub fn equal_mass_sizes(n: usize, bins: usize) -> Vec<usize> {
    let base = n / bins;
    let rem = n % bins;
    (0..bins)
        .map(|i| base + usize::from(i >= bins - rem))
        .collect()
}

/// Equal-mass bins over confidence-sorted samples. Bin bounds are the
/// smallest and largest confidence inside each bin.
pub fn equal_mass_bins(samples: &[Scored], bins: usize) -> Result<BinStats> {
    if bins == 0 {
        return Err(Error::Domain("bin count must be at least 1".into()));
    }
    if samples.len() < bins {
        return Err(Error::Domain(format!(
            "equal-mass binning needs at least {bins} samples, got {}",
            samples.len()
        )));
    }
    let mut order: Vec<&Scored> = samples.iter().collect();
    order.sort_by(|a, b| a.confidence().total_cmp(&b.confidence()));
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for size in equal_mass_sizes(samples.len(), bins) {
        let chunk = &order[start..start + size];
        let mut a = Accum::default();
        chunk.iter().for_each(|s| a.push(s));
        out.push(a.finish(chunk[0].confidence(), chunk[size - 1].confidence()));
        start += size;
    }
    Ok(BinStats {
        scheme: BinScheme::EqualMass,
        bins: out,
        total: samples.len(),
    })
}

/// Expected calibration error with `bins` equal-width bins.
pub fn ece(samples: &[Scored], bins: usize) -> Result<f64> {
    Ok(equal_width_bins(samples, bins)?.calibration_error())
}

/// Adaptive (equal-mass) expected calibration error.
pub fn aece(samples: &[Scored], bins: usize) -> Result<f64> {
    Ok(equal_mass_bins(samples, bins)?.calibration_error())
}

/// Score a set of logits at temperature `t`.
pub fn score(data: &[LabeledLogits], t: Temperature) -> Result<Vec<Scored>> {
    data.iter()
        .map(|s| Ok(Scored::new(softmax_with_temp(&s.logits, t)?, s.label)))
        .collect()
}
