//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code paths it checks.
#![allow(dead_code)]

use tcil_core::calib::Scored;
use tcil_core::nnet::{Architecture, MlpModel};
use tcil_core::ClassId;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line re-evaluation of the network from its public layers.
pub fn oracle_features(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let mut h: Vec<f64> = x.to_vec();
    for layer in model.feature_layers() {
        let mut next = Vec::with_capacity(layer.out_dim());
        for r in 0..layer.out_dim() {
            let mut z = layer.bias[r];
            for (c, hc) in h.iter().enumerate() {
                z += layer.weight.get(r, c) * hc;
            }
            next.push(z.max(0.0));
        }
        h = next;
    }
    h
}

pub fn oracle_logits(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let h = oracle_features(model, x);
    let head = model.head();
    (0..head.out_dim())
        .map(|k| {
            let mut z = head.bias[k];
            for (c, hc) in h.iter().enumerate() {
                z += head.weight.get(k, c) * hc;
            }
            z
        })
        .collect()
}

/// `-log softmax(z / t)[y]`, computed without max-shifting when safe.
pub fn oracle_ce(logits: &[f64], y: ClassId, t: f64) -> f64 {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max) / t;
    let denom: f64 = logits.iter().map(|z| (z / t - m).exp()).sum();
    -(logits[y.0 - 1] / t - m) + denom.ln()
}

pub fn oracle_mean_ce(model: &MlpModel, batch: &[(Vec<f64>, ClassId)], t: f64) -> f64 {
    batch
        .iter()
        .map(|(x, y)| oracle_ce(&oracle_logits(model, x), *y, t))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn oracle_nll(data: &[(Vec<f64>, ClassId)], t: f64) -> f64 {
    data.iter().map(|(z, y)| oracle_ce(z, *y, t)).sum::<f64>() / data.len() as f64
}

/// Relative error with an absolute floor for tiny entries.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    if analytic.abs() < 1e-6 {
        (analytic - numeric).abs() < 1e-7
    } else {
        ((analytic - numeric) / analytic.abs().max(numeric.abs())).abs() < 1e-4
    }
}

pub fn random_net(rng: &mut ChaCha8Rng, max_dim: usize) -> MlpModel {
    let arch = Architecture {
        input_dim: rng.random_range(1..=max_dim),
        hidden_dims: vec![rng.random_range(1..=max_dim)],
        feature_dim: rng.random_range(1..=max_dim),
        num_classes: rng.random_range(2..=max_dim),
    };
    let mut m = MlpModel::init(&arch, rng).unwrap();
    for s in m.param_slices_mut() {
        for v in s.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    m
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference check of every parameter of `model` on `batch`.
/// Returns the number of mismatching entries and the total checked.
pub fn check_param_gradients(
    model: &MlpModel,
    batch: &[(Vec<f64>, ClassId)],
    t: f64,
) -> (usize, usize) {
    let h = 1e-4;
    let analytic = model
        .param_gradients(batch.iter().map(|(x, y)| (x.as_slice(), *y)), t)
        .unwrap()
        .grads;
    let analytic: Vec<f64> = analytic.slices().concat();
    let mut probe = model.clone();
    let sizes: Vec<usize> = probe.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut bad = 0;
    let mut k = 0;
    for (si, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = probe.param_slices_mut()[si][i];
            probe.param_slices_mut()[si][i] = orig + h;
            let up = oracle_mean_ce(&probe, batch, t);
            probe.param_slices_mut()[si][i] = orig - h;
            let down = oracle_mean_ce(&probe, batch, t);
            probe.param_slices_mut()[si][i] = orig;
            if !grad_close(analytic[k], (up - down) / (2.0 * h)) {
                bad += 1;
            }
            k += 1;
        }
    }
    (bad, k)
}

/// Central-difference check of the input gradient.
pub fn check_input_gradient(model: &MlpModel, x: &[f64], y: ClassId) -> (usize, usize) {
    let h = 1e-4;
    let g = model.input_gradient(x, y).unwrap();
    let mut bad = 0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let num = (oracle_ce(&oracle_logits(model, &xp), y, 1.0)
            - oracle_ce(&oracle_logits(model, &xm), y, 1.0))
            / (2.0 * h);
        if !grad_close(g[i], num) {
            bad += 1;
        }
    }
    (bad, x.len())
}

/// Equal-width ECE by scanning each bin over the whole sample list.
pub fn brute_ece(samples: &[Scored], b: usize) -> f64 {
    let n = samples.len() as f64;
    let mut total = 0.0;
    for i in 1..=b {
        let lower = (i - 1) as f64 / b as f64;
        let upper = i as f64 / b as f64;
        let (mut count, mut correct, mut conf) = (0usize, 0usize, 0.0);
        for s in samples {
            let p = s.probs.confidence();
            let inside = (p > lower && p <= upper) || (i == 1 && p == 0.0);
            if inside {
                count += 1;
                correct += (s.probs.prediction() == s.label) as usize;
                conf += p;
            }
        }
        if count > 0 {
            let acc = correct as f64 / count as f64;
            let c = conf / count as f64;
            total += (count as f64 / n) * (acc - c).abs();
        }
    }
    total
}

/// Equal-mass ECE: order by repeated selection of the least-confident
/// remaining sample (earliest index on ties), then cut into bins whose sizes
/// grow by one for the last `N mod B` bins.
pub fn brute_aece(samples: &[Scored], b: usize) -> f64 {
    let n = samples.len();
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            match best {
                None => best = Some(j),
                Some(k) if samples[j].probs.confidence() < samples[k].probs.confidence() => {
                    best = Some(j)
                }
                _ => {}
            }
        }
        let j = best.unwrap();
        taken[j] = true;
        order.push(j);
    }
    let mut total = 0.0;
    let mut start = 0;
    for i in 0..b {
        let size = n / b + if i >= b - n % b { 1 } else { 0 };
        let (mut correct, mut conf) = (0usize, 0.0);
        for &j in &order[start..start + size] {
            correct += (samples[j].probs.prediction() == samples[j].label) as usize;
            conf += samples[j].probs.confidence();
        }
        if size > 0 {
            let acc = correct as f64 / size as f64;
            let c = conf / size as f64;
            total += (size as f64 / n as f64) * (acc - c).abs();
        }
        start += size;
    }
    total
}

/// Grid search of the NLL-minimizing temperature over `[lo, hi]`.
pub fn grid_temperature(data: &[(Vec<f64>, ClassId)], lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let mut best = (lo, f64::INFINITY);
    let steps = ((hi - lo) / step).round() as usize;
    for i in 0..=steps {
        let t = lo + step * i as f64;
        let l = oracle_nll(data, t);
        if l < best.1 {
            best = (t, l);
        }
    }
    best
}
