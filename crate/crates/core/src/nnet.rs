//! Dense feedforward classifier with explicit forward and backward passes.
//!
//! The network is split into a feature extractor (a chain of affine + ReLU
//! layers) and a linear classification head. Gradients are available with
//! respect to every parameter, for training, and with respect to the input,
//! for sign-gradient perturbation.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::log_sum_exp;
use crate::error::{Error, Result};
use crate::ClassId;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                expected: rows * cols,
                actual: values.len(),
                context: "matrix values",
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains a non-finite entry".into()));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// `self^T * y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += scale * a b^T`
    fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += scale * ar * bc;
            }
        }
    }

    fn append_rows(&mut self, extra: usize, fill: impl FnMut() -> f64) {
        self.values
            .extend(std::iter::repeat_with(fill).take(extra * self.cols));
        self.rows += extra;
    }
}

/// An affine map `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape {
                expected: weight.rows(),
                actual: bias.len(),
                context: "bias length",
            });
        }
        Ok(Dense { weight, bias })
    }

    fn he_uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = he_bound(in_dim);
        let values = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Dense {
            weight: Matrix {
                rows: out_dim,
                cols: in_dim,
                values,
            },
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// New rows start at zero so existing logits are unchanged.
    #[default]
    Zero,
    HeUniform,
}

/// Layer widths of an [`MlpModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn desk_scale(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden_dims: vec![32],
            feature_dim: 16,
            num_classes,
        }
    }
}

/// `f(x) = head(phi(x))`, where `phi` is a stack of ReLU layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    feature_layers: Vec<Dense>,
    head: Dense,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[i + 1]` is the output of
    /// feature layer `i`.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Output of the feature extractor.
    pub fn features(&self) -> &[f64] {
        self.activations
            .last()
            .expect("trace always holds the input")
    }
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub feature_layers: Vec<Dense>,
    pub head: Dense,
}

impl Gradients {
    /// Slices in the same order as [`MlpModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.feature_layers.len() + 2);
        for layer in self
            .feature_layers
            .iter()
            .chain(std::iter::once(&self.head))
        {
            out.push(layer.weight.values());
            out.push(layer.bias.as_slice());
        }
        out
    }
}

/// Mean cross-entropy of a batch and its parameter gradients.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: Gradients,
}

impl MlpModel {
    /// He-uniform weights, zero biases. The head uses the same scheme.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.hidden_dims.contains(&0) {
            return Err(Error::Precondition("layer widths must be positive".into()));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden_dims);
        dims.push(arch.feature_dim);
        let feature_layers = dims
            .windows(2)
            .map(|w| Dense::he_uniform(w[1], w[0], rng))
            .collect();
        let head = Dense::he_uniform(arch.num_classes, arch.feature_dim, rng);
        Ok(MlpModel {
            feature_layers,
            head,
        })
    }

    /// Assemble a model from explicit layers. `feature_layers` may be empty,
    /// in which case the features are the raw input.
    pub fn from_layers(feature_layers: Vec<Dense>, head: Dense) -> Result<Self> {
        let mut width = match feature_layers.first() {
            Some(l) => l.in_dim(),
            None => head.in_dim(),
        };
        for layer in feature_layers.iter().chain(std::iter::once(&head)) {
            if layer.in_dim() != width {
                return Err(Error::Shape {
                    expected: width,
                    actual: layer.in_dim(),
                    context: "layer input width",
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape {
                    expected: layer.out_dim(),
                    actual: layer.bias.len(),
                    context: "bias length",
                });
            }
            width = layer.out_dim();
        }
        Ok(MlpModel {
            feature_layers,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self.feature_layers.first() {
            Some(l) => l.in_dim(),
            None => self.head.in_dim(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn feature_layers(&self) -> &[Dense] {
        &self.feature_layers
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.feature_layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.feature_layers.len());
        activations.push(x.to_vec());
        for layer in &self.feature_layers {
            let z = layer.apply(activations.last().unwrap());
            activations.push(z.iter().map(|&v| relu(v)).collect());
            pre_activations.push(z);
        }
        let logits = self.head.apply(activations.last().unwrap());
        Ok(ForwardTrace {
            activations,
            pre_activations,
            logits,
        })
    }

    /// Gradients of the mean temperature-scaled cross-entropy over `batch`.
    pub fn param_gradients<'a, I>(&self, batch: I, temperature: f64) -> Result<LossAndGrad>
    where
        I: IntoIterator<Item = (&'a [f64], ClassId)>,
    {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        let mut n = 0usize;
        for (x, y) in batch {
            self.check_label(y)?;
            let trace = self.forward(x)?;
            let (sample_loss, dlogits) = ce_and_logit_grad(&trace.logits, y, temperature);
            loss += sample_loss;
            self.accumulate(&trace, &dlogits, &mut grads);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        let scale = 1.0 / n as f64;
        for layer in grads
            .feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut grads.head))
        {
            layer.weight.values.iter_mut().for_each(|g| *g *= scale);
            layer.bias.iter_mut().for_each(|g| *g *= scale);
        }
        Ok(LossAndGrad {
            loss: loss * scale,
            grads,
        })
    }

    /// Gradient of the single-sample cross-entropy (T = 1) with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], label: ClassId) -> Result<Vec<f64>> {
        self.check_label(label)?;
        let trace = self.forward(x)?;
        let (_, dlogits) = ce_and_logit_grad(&trace.logits, label, 1.0);
        let mut delta = self.head.weight.matvec_transposed(&dlogits);
        for (i, layer) in self.feature_layers.iter().enumerate().rev() {
            relu_backward(&mut delta, &trace.pre_activations[i]);
            delta = layer.weight.matvec_transposed(&delta);
        }
        Ok(delta)
    }

    /// Append `extra_classes` rows to the head. Existing rows are untouched.
    pub fn widen_head(
        &mut self,
        extra_classes: usize,
        init: HeadInit,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if extra_classes == 0 {
            return Err(Error::Precondition(
                "widen_head needs at least one extra class".into(),
            ));
        }
        match init {
            HeadInit::Zero => self.head.weight.append_rows(extra_classes, || 0.0),
            HeadInit::HeUniform => {
                let bound = he_bound(self.feature_dim());
                self.head
                    .weight
                    .append_rows(extra_classes, || rng.random_range(-bound..=bound));
            }
        }
        self.head
            .bias
            .extend(std::iter::repeat_n(0.0, extra_classes));
        Ok(())
    }

    /// Mutable parameter slices: each feature layer's weight then bias, then
    /// the head's weight and bias.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.feature_layers.len() + 2);
        for layer in self
            .feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
        {
            out.push(layer.weight.values.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.feature_layers
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|l| l.weight.values.len() + l.bias.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.feature_layers
            .iter()
            .chain(std::iter::once(&self.head))
            .all(|l| l.weight.values.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            feature_layers: self
                .feature_layers
                .iter()
                .map(|l| Dense::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            head: Dense::zeros(self.head.out_dim(), self.head.in_dim()),
        }
    }

    fn accumulate(&self, trace: &ForwardTrace, dlogits: &[f64], grads: &mut Gradients) {
        grads.head.weight.add_outer(dlogits, trace.features(), 1.0);
        for (g, d) in grads.head.bias.iter_mut().zip(dlogits) {
            *g += d;
        }
        let mut delta = self.head.weight.matvec_transposed(dlogits);
        for (i, layer) in self.feature_layers.iter().enumerate().rev() {
            relu_backward(&mut delta, &trace.pre_activations[i]);
            let g = &mut grads.feature_layers[i];
            g.weight.add_outer(&delta, &trace.activations[i], 1.0);
            for (gb, d) in g.bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            if i > 0 {
                delta = layer.weight.matvec_transposed(&delta);
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
                context: "input vector",
            });
        }
        Ok(())
    }

    fn check_label(&self, y: ClassId) -> Result<()> {
        if y.0 == 0 || y.0 > self.num_classes() {
            return Err(Error::Label {
                label: y.0,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

// Subgradient at 0 is 0.
fn relu_backward(delta: &mut [f64], pre: &[f64]) {
    for (d, &z) in delta.iter_mut().zip(pre) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Cross-entropy of `logits / t` against `y`, and its gradient in the raw logits.
fn ce_and_logit_grad(logits: &[f64], y: ClassId, t: f64) -> (f64, Vec<f64>) {
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    let lse = log_sum_exp(&scaled);
    let loss = lse - scaled[y.index()];
    let mut grad: Vec<f64> = scaled.iter().map(|s| (s - lse).exp() / t).collect();
    grad[y.index()] -= 1.0 / t;
    (loss, grad)
}

/// Anything that can be evaluated and differentiated with respect to its input.
///
/// Calibration routines accept any implementor, including the call-counting
/// [`CountingNetwork`] wrapper.
pub trait Network {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<ForwardTrace>;
    fn input_gradient(&self, x: &[f64], label: ClassId) -> Result<Vec<f64>>;

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.activations.pop().unwrap())
    }

    fn predict(&self, x: &[f64]) -> Result<ClassId> {
        Ok(argmax_class(&self.logits(x)?))
    }
}

impl Network for MlpModel {
    fn input_dim(&self) -> usize {
        MlpModel::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        MlpModel::num_classes(self)
    }

    fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        MlpModel::forward(self, x)
    }

    fn input_gradient(&self, x: &[f64], label: ClassId) -> Result<Vec<f64>> {
        MlpModel::input_gradient(self, x, label)
    }
}

/// Wraps a network and counts forward and input-gradient invocations.
#[derive(Debug)]
pub struct CountingNetwork<'a, N> {
    inner: &'a N,
    forwards: AtomicUsize,
    backwards: AtomicUsize,
}

impl<'a, N: Network> CountingNetwork<'a, N> {
    pub fn new(inner: &'a N) -> Self {
        CountingNetwork {
            inner,
            forwards: AtomicUsize::new(0),
            backwards: AtomicUsize::new(0),
        }
    }

    pub fn forward_calls(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> usize {
        self.backwards.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> usize {
        self.forward_calls() + self.gradient_calls()
    }
}

impl<N: Network> Network for CountingNetwork<'_, N> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.forward(x)
    }

    fn input_gradient(&self, x: &[f64], label: ClassId) -> Result<Vec<f64>> {
        self.backwards.fetch_add(1, Ordering::Relaxed);
        self.inner.input_gradient(x, label)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_class(values: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    ClassId::from_index(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, dims: &[usize], k: usize) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            input_dim: dims[0],
            hidden_dims: dims[1..dims.len() - 1].to_vec(),
            feature_dim: *dims.last().unwrap(),
            num_classes: k,
        };
        let mut m = MlpModel::init(&arch, &mut rng).unwrap();
        // non-zero biases so ReLU kinks are off the origin
        for s in m.param_slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        m
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let m = MlpModel::from_layers(vec![Dense::zeros(4, 3)], Dense::zeros(5, 4)).unwrap();
        let t = m.forward(&[0.3, -1.0, 7.0]).unwrap();
        assert_eq!(t.logits, vec![0.0; 5]);
    }

    #[test]
    fn identity_head_passes_input_through() {
        let head = Dense::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let m = MlpModel::from_layers(vec![], head).unwrap();
        assert_eq!(m.forward(&[1.5, -2.0]).unwrap().logits, vec![1.5, -2.0]);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let m = random_net(7, &[2, 4], 3);
        let x = [0.25, -0.75];
        let l0 = &m.feature_layers()[0];
        let mut h = [0.0; 4];
        for (r, hr) in h.iter_mut().enumerate() {
            let z = l0.weight.get(r, 0) * x[0] + l0.weight.get(r, 1) * x[1] + l0.bias[r];
            *hr = if z > 0.0 { z } else { 0.0 };
        }
        let head = m.head();
        for k in 0..3 {
            let mut z = head.bias[k];
            for (r, hr) in h.iter().enumerate() {
                z += head.weight.get(k, r) * hr;
            }
            let got = m.forward(&x).unwrap().logits[k];
            assert!((got - z).abs() < 1e-12, "{got} vs {z}");
        }
    }

    #[test]
    fn shape_and_label_errors() {
        let m = random_net(1, &[3, 4, 2], 3);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            m.input_gradient(&[0.0; 3], ClassId(4)),
            Err(Error::Label { .. })
        ));
        let x = [0.0; 3];
        assert!(matches!(
            m.param_gradients([(&x[..], ClassId(0))], 1.0),
            Err(Error::Label { .. })
        ));
        let empty: Vec<(&[f64], ClassId)> = vec![];
        assert!(matches!(
            m.param_gradients(empty, 1.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn saturated_softmax_has_vanishing_head_gradient() {
        let mut w = Matrix::zeros(2, 1);
        w.values_mut()[0] = 100.0;
        w.values_mut()[1] = -100.0;
        let m = MlpModel::from_layers(vec![], Dense::new(w, vec![0.0, 0.0]).unwrap()).unwrap();
        let x = [1.0];
        let lg = m.param_gradients([(&x[..], ClassId(1))], 1.0).unwrap();
        for g in lg.grads.slices().concat() {
            assert!(g.abs() < 1e-6);
        }
    }

    #[test]
    fn duplicating_batch_leaves_gradients_unchanged() {
        let m = random_net(3, &[3, 5, 4], 3);
        let xs = [[0.1, 0.2, 0.9], [0.7, 0.3, 0.4]];
        let ys = [ClassId(1), ClassId(3)];
        let once = m
            .param_gradients(xs.iter().map(|x| &x[..]).zip(ys), 1.0)
            .unwrap();
        let twice = m
            .param_gradients(
                xs.iter()
                    .chain(&xs)
                    .map(|x| &x[..])
                    .zip(ys.iter().chain(&ys).copied()),
                1.0,
            )
            .unwrap();
        for (a, b) in once
            .grads
            .slices()
            .concat()
            .iter()
            .zip(twice.grads.slices().concat())
        {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((once.loss - twice.loss).abs() < 1e-14);
    }

    #[test]
    fn zero_network_has_zero_input_gradient() {
        let m = MlpModel::from_layers(vec![Dense::zeros(3, 2)], Dense::zeros(3, 3)).unwrap();
        assert_eq!(
            m.input_gradient(&[0.4, 0.6], ClassId(2)).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn true_and_target_gradients_differ() {
        let m = random_net(11, &[4, 6, 5], 3);
        let x = [0.2, 0.4, 0.6, 0.8];
        let g1 = m.input_gradient(&x, ClassId(1)).unwrap();
        let g2 = m.input_gradient(&x, ClassId(2)).unwrap();
        assert_ne!(g1, g2);
    }

    #[test]
    fn widen_rejects_zero_and_preserves_old_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = random_net(2, &[3, 6, 4], 3);
        assert!(m.widen_head(0, HeadInit::Zero, &mut rng).is_err());
        let before = m.clone();
        m.widen_head(2, HeadInit::HeUniform, &mut rng).unwrap();
        assert_eq!(m.num_classes(), 5);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = before.forward(&x).unwrap().logits;
            let b = m.forward(&x).unwrap().logits;
            assert_eq!(a[..], b[..3]);
        }
    }

    #[test]
    fn zero_widening_keeps_old_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = random_net(4, &[3, 6, 4], 3);
        let before = m.clone();
        m.widen_head(2, HeadInit::Zero, &mut rng).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let old = before.forward(&x).unwrap().logits;
            let new = m.forward(&x).unwrap().logits;
            assert_eq!(argmax_class(&old), argmax_class(&new[..3]));
        }
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let a = random_net(42, &[5, 7, 3], 4);
        let b = random_net(42, &[5, 7, 3], 4);
        assert_eq!(a, b);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn counting_network_counts() {
        let m = random_net(1, &[2, 3, 2], 2);
        let c = CountingNetwork::new(&m);
        c.forward(&[0.0, 1.0]).unwrap();
        c.logits(&[0.0, 1.0]).unwrap();
        c.input_gradient(&[0.0, 1.0], ClassId(1)).unwrap();
        assert_eq!(c.forward_calls(), 2);
        assert_eq!(c.gradient_calls(), 1);
    }
}
