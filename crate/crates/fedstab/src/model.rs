//! Smooth differentiable local objectives with hand-derived gradients and
//! estimators for the constants used by the generalization bounds.
//!
//! Three families:
//! - `Quadratic`: ridge least squares on a scalar class target; exact
//!   smoothness constant, convex sanity tier.
//! - `Logistic`: binary sigmoid (2 classes) or softmax cross-entropy, with
//!   weight decay; exact per-sample smoothness bound.
//! - `Mlp`: one hidden tanh layer + softmax; non-convex tier, smoothness
//!   estimated empirically.

use crate::data::{Federation, Shard};
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Quadratic,
    Logistic,
    Mlp,
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(ModelFamily::Quadratic),
            "logistic" => Ok(ModelFamily::Logistic),
            "mlp" => Ok(ModelFamily::Mlp),
            other => Err(Error::validation(format!(
                "unknown model family '{other}' (expected quadratic|logistic|mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub d: usize,
    pub classes: usize,
    pub hidden: usize,
    pub weight_decay: f64,
}

/// Constants of the smoothness/variance/Lipschitz assumptions, measured or
/// exact depending on the family. `mu` defaults to `1/L`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub l: f64,
    pub sigma_l: f64,
    pub g: f64,
    pub u: f64,
    pub mu: f64,
    pub probe_count: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.d < 1 {
            return Err(Error::validation("model dimension must be >= 1"));
        }
        if spec.classes < 2 {
            return Err(Error::validation("model needs at least 2 classes"));
        }
        if spec.weight_decay < 0.0 {
            return Err(Error::validation("weight_decay must be non-negative"));
        }
        if spec.family == ModelFamily::Mlp && spec.hidden < 1 {
            return Err(Error::validation("mlp needs hidden >= 1"));
        }
        Ok(Model { spec })
    }

    pub fn param_dim(&self) -> usize {
        let ModelSpec {
            d, classes, hidden, ..
        } = self.spec;
        match self.spec.family {
            ModelFamily::Quadratic => d,
            ModelFamily::Logistic => {
                if classes == 2 {
                    d
                } else {
                    classes * d
                }
            }
            ModelFamily::Mlp => hidden * d + classes * hidden,
        }
    }

    /// Scalar regression target for the quadratic family: classes mapped
    /// affinely onto [-1, 1].
    fn target(&self, label: usize) -> f64 {
        2.0 * label as f64 / (self.spec.classes - 1) as f64 - 1.0
    }

    pub fn init_params(&self, master_seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = CounterRng::new(master_seed, Purpose::Init, 0, 0);
        (0..self.param_dim()).map(|_| scale * rng.next_normal()).collect()
    }

    pub fn loss(&self, w: &[f64], x: &[f64], y: usize) -> f64 {
        self.check_dims(w, x, y);
        match self.spec.family {
            ModelFamily::Quadratic => {
                let r = dot(w, x) - self.target(y);
                0.5 * r * r + 0.5 * self.spec.weight_decay * sq_norm(w)
            }
            ModelFamily::Logistic if self.spec.classes == 2 => {
                let sign = if y == 1 { 1.0 } else { -1.0 };
                softplus(-sign * dot(w, x)) + 0.5 * self.spec.weight_decay * sq_norm(w)
            }
            ModelFamily::Logistic => {
                let (lse, logit_y) = self.softmax_parts(w, x, y);
                lse - logit_y + 0.5 * self.spec.weight_decay * sq_norm(w)
            }
            ModelFamily::Mlp => self.mlp_loss_grad(w, x, y, None),
        }
    }

    pub fn grad(&self, w: &[f64], x: &[f64], y: usize) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.loss_grad_into(w, x, y, &mut out);
        out
    }

    /// Loss and gradient in one pass; returns the loss.
    pub fn loss_grad_into(&self, w: &[f64], x: &[f64], y: usize, out: &mut [f64]) -> f64 {
        self.check_dims(w, x, y);
        let wd = self.spec.weight_decay;
        match self.spec.family {
            ModelFamily::Quadratic => {
                let r = dot(w, x) - self.target(y);
                for j in 0..w.len() {
                    out[j] = r * x[j] + wd * w[j];
                }
                0.5 * r * r + 0.5 * wd * sq_norm(w)
            }
            ModelFamily::Logistic if self.spec.classes == 2 => {
                let sign = if y == 1 { 1.0 } else { -1.0 };
                let z = dot(w, x);
                let p = sigmoid(-sign * z);
                for j in 0..w.len() {
                    out[j] = -sign * p * x[j] + wd * w[j];
                }
                softplus(-sign * z) + 0.5 * wd * sq_norm(w)
            }
            ModelFamily::Logistic => {
                let d = self.spec.d;
                let c = self.spec.classes;
                let mut logits = vec![0.0; c];
                for (k, logit) in logits.iter_mut().enumerate() {
                    *logit = dot(&w[k * d..(k + 1) * d], x);
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for logit in &logits {
                    denom += (logit - max).exp();
                }
                let lse = max + denom.ln();
                for k in 0..c {
                    let p = (logits[k] - max).exp() / denom - f64::from(k == y);
                    for j in 0..d {
                        out[k * d + j] = p * x[j] + wd * w[k * d + j];
                    }
                }
                lse - logits[y] + 0.5 * wd * sq_norm(w)
            }
            ModelFamily::Mlp => self.mlp_loss_grad(w, x, y, Some(out)),
        }
    }

    fn softmax_parts(&self, w: &[f64], x: &[f64], y: usize) -> (f64, f64) {
        let d = self.spec.d;
        let c = self.spec.classes;
        let logits: Vec<f64> = (0..c).map(|k| dot(&w[k * d..(k + 1) * d], x)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        (lse, logits[y])
    }

    fn mlp_loss_grad(&self, w: &[f64], x: &[f64], y: usize, grad: Option<&mut [f64]>) -> f64 {
        let ModelSpec {
            d,
            classes: c,
            hidden: h,
            weight_decay: wd,
            ..
        } = self.spec;
        let (w1, w2) = w.split_at(h * d);
        let mut z = vec![0.0; h];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = dot(&w1[i * d..(i + 1) * d], x).tanh();
        }
        let mut logits = vec![0.0; c];
        for (k, logit) in logits.iter_mut().enumerate() {
            *logit = dot(&w2[k * h..(k + 1) * h], &z);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let loss = max + denom.ln() - logits[y] + 0.5 * wd * sq_norm(w);
        if let Some(out) = grad {
            let dlogits: Vec<f64> = (0..c)
                .map(|k| (logits[k] - max).exp() / denom - f64::from(k == y))
                .collect();
            let (g1, g2) = out.split_at_mut(h * d);
            for k in 0..c {
                for i in 0..h {
                    g2[k * h + i] = dlogits[k] * z[i] + wd * w2[k * h + i];
                }
            }
            for i in 0..h {
                let mut dz = 0.0;
                for k in 0..c {
                    dz += dlogits[k] * w2[k * h + i];
                }
                let da = dz * (1.0 - z[i] * z[i]);
                for j in 0..d {
                    g1[i * d + j] = da * x[j] + wd * w1[i * d + j];
                }
            }
        }
        loss
    }

    /// Mean loss over a shard.
    pub fn shard_loss(&self, w: &[f64], shard: &Shard) -> f64 {
        let mut sum = 0.0;
        for j in 0..shard.len() {
            let (x, y) = shard.sample(j);
            sum += self.loss(w, x, y);
        }
        sum / shard.len() as f64
    }

    /// Full-batch gradient over a shard, accumulated in sample order.
    pub fn shard_grad(&self, w: &[f64], shard: &Shard) -> Vec<f64> {
        let mut acc = vec![0.0; w.len()];
        let mut g = vec![0.0; w.len()];
        for j in 0..shard.len() {
            let (x, y) = shard.sample(j);
            self.loss_grad_into(w, x, y, &mut g);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        for a in acc.iter_mut() {
            *a /= shard.len() as f64;
        }
        acc
    }

    /// Exact per-sample smoothness bound, when the family admits one:
    /// quadratic `||x||^2 + wd`, binary logistic `||x||^2/4 + wd`,
    /// softmax `||x||^2/2 + wd`. None for the MLP.
    pub fn exact_smoothness(&self, fed: &Federation) -> Option<f64> {
        let factor = match self.spec.family {
            ModelFamily::Quadratic => 1.0,
            ModelFamily::Logistic if self.spec.classes == 2 => 0.25,
            ModelFamily::Logistic => 0.5,
            ModelFamily::Mlp => return None,
        };
        let mut l: f64 = 0.0;
        for shard in fed.shards() {
            for j in 0..shard.len() {
                l = l.max(factor * sq_norm(shard.feature_row(j)) + self.spec.weight_decay);
            }
        }
        Some(l)
    }

    fn check_dims(&self, w: &[f64], x: &[f64], _y: usize) {
        assert_eq!(w.len(), self.param_dim(), "parameter dimension mismatch");
        assert_eq!(x.len(), self.spec.d, "feature dimension mismatch");
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    sq_norm(a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Estimate the assumption constants from probes on the federation's data.
///
/// `l` is the exact per-sample bound for quadratic/logistic and an empirical
/// maximum of gradient-difference ratios for the MLP. `sigma_l` is the
/// largest per-sample deviation from the shard gradient seen at any probe
/// point. `g` and `u` are empirical maxima of loss-difference ratios and
/// loss values over the probes; the engine additionally tracks the running
/// maximum loss of every run so `u` can be checked post hoc.
pub fn estimate_constants(
    model: &Model,
    fed: &Federation,
    probe_count: usize,
    seed: u64,
) -> Result<AssumptionConstants> {
    if probe_count < 100 {
        return Err(Error::validation("probe_count must be >= 100"));
    }
    let p = model.param_dim();
    let scales = [0.0, 0.05, 0.2, 0.5, 1.0, 2.0];
    let probes: Vec<Vec<f64>> = (0..probe_count)
        .map(|i| {
            let mut rng = CounterRng::new(seed, Purpose::Probe, i as u64, 0);
            let scale = scales[i % scales.len()];
            (0..p).map(|_| scale * rng.next_normal()).collect()
        })
        .collect();

    let mut sigma_l: f64 = 0.0;
    let mut u: f64 = 0.0;
    let mut g: f64 = 0.0;
    let mut l_emp: f64 = 0.0;
    let mut grad_buf = vec![0.0; p];
    for (i, w) in probes.iter().enumerate() {
        for shard in fed.shards() {
            let full = model.shard_grad(w, shard);
            for j in 0..shard.len() {
                let (x, y) = shard.sample(j);
                let loss = model.loss_grad_into(w, x, y, &mut grad_buf);
                u = u.max(loss);
                let dev = grad_buf
                    .iter()
                    .zip(&full)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sigma_l = sigma_l.max(dev);
            }
        }
        // Pairwise probes for the Lipschitz surrogate and (MLP) smoothness.
        let other = &probes[(i + 1) % probes.len()];
        let dw = dist(w, other);
        if dw > 1e-12 {
            for shard in fed.shards().take(2) {
                for j in (0..shard.len()).step_by((shard.len() / 4).max(1)) {
                    let (x, y) = shard.sample(j);
                    let df = (model.loss(w, x, y) - model.loss(other, x, y)).abs();
                    g = g.max(df / dw);
                    let ga = model.grad(w, x, y);
                    let gb = model.grad(other, x, y);
                    l_emp = l_emp.max(dist(&ga, &gb) / dw);
                }
            }
        }
    }

    let l = match model.exact_smoothness(fed) {
        Some(exact) => exact,
        None => l_emp,
    };
    if l <= 0.0 {
        return Err(Error::NumericalValidation(
            "estimated smoothness constant is not positive".into(),
        ));
    }
    Ok(AssumptionConstants {
        l,
        sigma_l,
        g,
        u,
        mu: 1.0 / l,
        probe_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, generate_synthetic};
    use approx::assert_relative_eq;

    fn quad_model(d: usize, classes: usize, wd: f64) -> Model {
        Model::new(ModelSpec {
            family: ModelFamily::Quadratic,
            d,
            classes,
            hidden: 0,
            weight_decay: wd,
        })
        .unwrap()
    }

    fn logistic_model(d: usize, classes: usize, wd: f64) -> Model {
        Model::new(ModelSpec {
            family: ModelFamily::Logistic,
            d,
            classes,
            hidden: 0,
            weight_decay: wd,
        })
        .unwrap()
    }

    fn mlp_model(d: usize, classes: usize, hidden: usize, wd: f64) -> Model {
        Model::new(ModelSpec {
            family: ModelFamily::Mlp,
            d,
            classes,
            hidden,
            weight_decay: wd,
        })
        .unwrap()
    }

    #[test]
    fn binary_logistic_at_zero_is_ln2() {
        let model = logistic_model(3, 2, 0.0);
        let w = vec![0.0; 3];
        assert_relative_eq!(
            model.loss(&w, &[0.3, -0.7, 0.1], 1),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn softmax_at_zero_is_ln_c() {
        let model = logistic_model(4, 5, 0.0);
        let w = vec![0.0; 20];
        assert_relative_eq!(
            model.loss(&w, &[0.1, 0.2, 0.3, 0.4], 2),
            5.0f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn quadratic_zero_at_sample_minimizer() {
        // d=2, classes=2: target of label 1 is +1. w with w.x = 1 has zero loss.
        let model = quad_model(2, 2, 0.0);
        let x = [2.0, 0.0];
        let w = vec![0.5, 3.0];
        assert_relative_eq!(model.loss(&w, &x, 1), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_is_pure() {
        let model = logistic_model(3, 3, 0.01);
        let w = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.2, -0.3];
        let x = [1.0, -1.0, 0.5];
        assert_eq!(model.loss(&w, &x, 1), model.loss(&w, &x, 1));
    }

    /// Central finite differences as the independent oracle for gradients.
    fn finite_diff_check(model: &Model, probes: usize, seed: u64) {
        let p = model.param_dim();
        let eps = 1e-4;
        for i in 0..probes {
            let mut rng = CounterRng::new(seed, Purpose::Probe, i as u64, 1);
            let w: Vec<f64> = (0..p).map(|_| 0.5 * rng.next_normal()).collect();
            let x: Vec<f64> = (0..model.spec.d).map(|_| rng.next_normal()).collect();
            let y = rng.index(model.spec.classes);
            let grad = model.grad(&w, &x, y);
            let u: Vec<f64> = {
                let raw: Vec<f64> = (0..p).map(|_| rng.next_normal()).collect();
                let n = norm(&raw);
                raw.into_iter().map(|v| v / n).collect()
            };
            let wp: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
            let wm: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - eps * b).collect();
            let fd = (model.loss(&wp, &x, y) - model.loss(&wm, &x, y)) / (2.0 * eps);
            let analytic = dot(&grad, &u);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-5,
                "probe {i}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_diff_check(&quad_model(4, 3, 0.05), 100, 10);
        finite_diff_check(&logistic_model(4, 2, 0.01), 100, 11);
        finite_diff_check(&logistic_model(4, 5, 0.01), 100, 12);
        finite_diff_check(&mlp_model(4, 3, 6, 0.01), 100, 13);
    }

    #[test]
    fn shard_grad_is_mean_of_sample_grads() {
        let pool = generate_synthetic(4, 3, 120, 3).unwrap();
        let fed = dirichlet_partition(&pool, 4, 0.5, 1).unwrap();
        let model = logistic_model(4, 3, 0.01);
        let w = model.init_params(5, 0.3);
        let shard = fed.shard(0);
        let full = model.shard_grad(&w, shard);
        let mut acc = vec![0.0; w.len()];
        for j in 0..shard.len() {
            let (x, y) = shard.sample(j);
            let g = model.grad(&w, x, y);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        for a in acc.iter_mut() {
            *a /= shard.len() as f64;
        }
        // Same accumulation order, so equality is exact.
        assert_eq!(full, acc);
    }

    #[test]
    fn quadratic_gradient_is_linear_in_w() {
        // grad(w) - grad(w') = (x x^T + wd I)(w - w') for fixed sample.
        let model = quad_model(3, 2, 0.1);
        let x = [0.5, -1.0, 2.0];
        let w1 = vec![0.3, 0.7, -0.2];
        let w2 = vec![-1.0, 0.1, 0.4];
        let g1 = model.grad(&w1, &x, 0);
        let g2 = model.grad(&w2, &x, 0);
        let dw: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a - b).collect();
        let hx = dot(&x, &dw);
        for j in 0..3 {
            let expect = hx * x[j] + 0.1 * dw[j];
            assert_relative_eq!(g1[j] - g2[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_dim_quadratic_smoothness_is_one() {
        // f = (w - a)^2 / 2 corresponds to x = 1, no weight decay.
        let pool = generate_synthetic(1, 2, 8, 0).unwrap();
        let mut fed = dirichlet_partition(&pool, 2, 1.0, 0).unwrap();
        // Overwrite features with exactly 1.0 to pin the oracle.
        {
            let shards: Vec<_> = (0..fed.m)
                .map(|i| {
                    let mut s = fed.shard(i).clone();
                    s.features.iter_mut().for_each(|v| *v = 1.0);
                    std::sync::Arc::new(s)
                })
                .collect();
            fed = Federation { shards, ..fed };
        }
        let model = quad_model(1, 2, 0.0);
        assert_relative_eq!(model.exact_smoothness(&fed).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn logistic_unit_norm_single_sample_l_is_quarter() {
        let pool = generate_synthetic(3, 2, 2, 0).unwrap();
        let mut fed = dirichlet_partition(&pool, 2, 1.0, 0).unwrap();
        {
            let shards: Vec<_> = (0..fed.m)
                .map(|i| {
                    let mut s = fed.shard(i).clone();
                    // Unit-norm feature row.
                    let row = [0.6, 0.8, 0.0];
                    s.features.copy_from_slice(&row);
                    std::sync::Arc::new(s)
                })
                .collect();
            fed = Federation { shards, ..fed };
        }
        let model = logistic_model(3, 2, 0.0);
        assert_relative_eq!(model.exact_smoothness(&fed).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn single_sample_shard_has_zero_sigma() {
        let pool = generate_synthetic(3, 2, 2, 4).unwrap();
        let fed = dirichlet_partition(&pool, 2, 1.0, 0).unwrap();
        assert_eq!(fed.samples_per_client, 1);
        let model = quad_model(3, 2, 0.0);
        let c = estimate_constants(&model, &fed, 100, 9).unwrap();
        assert_eq!(c.sigma_l, 0.0);
        assert!(c.mu * c.l <= 1.0 + 1e-12);
    }

    #[test]
    fn estimate_rejects_small_probe_budget() {
        let pool = generate_synthetic(3, 2, 20, 4).unwrap();
        let fed = dirichlet_partition(&pool, 2, 1.0, 0).unwrap();
        let model = quad_model(3, 2, 0.0);
        assert!(estimate_constants(&model, &fed, 99, 9).is_err());
    }

    #[test]
    fn smoothness_bound_holds_on_probes() {
        // ||grad(w) - grad(w')|| <= L ||w - w'|| for >= 99% of random pairs.
        let pool = generate_synthetic(5, 3, 300, 8).unwrap();
        let fed = dirichlet_partition(&pool, 3, 0.5, 2).unwrap();
        for model in [quad_model(5, 3, 0.01), logistic_model(5, 3, 0.01)] {
            let l = model.exact_smoothness(&fed).unwrap();
            let p = model.param_dim();
            let mut violations = 0;
            let total = 10_000;
            let mut rng = CounterRng::new(77, Purpose::Probe, 0, 2);
            for _ in 0..total {
                let w1: Vec<f64> = (0..p).map(|_| rng.next_normal()).collect();
                let w2: Vec<f64> = (0..p).map(|_| rng.next_normal()).collect();
                let shard = fed.shard(rng.index(fed.m));
                let j = rng.index(shard.len());
                let (x, y) = shard.sample(j);
                let g1 = model.grad(&w1, x, y);
                let g2 = model.grad(&w2, x, y);
                if dist(&g1, &g2) > l * dist(&w1, &w2) * (1.0 + 1e-10) {
                    violations += 1;
                }
            }
            assert!(
                violations <= total / 100,
                "{violations} smoothness violations out of {total}"
            );
        }
    }
}
