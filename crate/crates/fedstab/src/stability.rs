//! Empirical stability estimates from coupled traces and evaluation of the
//! theoretical generalization bounds for comparison.

use crate::error::{Error, Result};
use crate::model::{dist, AssumptionConstants, Model};
use crate::rng::{CounterRng, Purpose};
use serde::Serialize;

/// Empirical generalization-gap measurements for one final model pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GenGap {
    /// `max_z |f(w, z) - f(w~, z)|` over the probe set.
    pub max_loss_gap: f64,
    /// `||w - w~||`.
    pub param_dist: f64,
    /// `G_est * ||w - w~||` when a Lipschitz surrogate was supplied.
    pub lipschitz_proxy: Option<f64>,
}

/// How `empirical_gen_gap` reports the gap.
#[derive(Debug, Clone, Copy)]
pub enum GMode {
    Direct,
    /// Also report `G * ||w - w~||` for the supplied surrogate constant.
    LipschitzProxy(f64),
}

/// Probe samples drawn from the union of client distributions.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub d: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ProbeSet {
    /// Fresh draws from the federation's generator, disjoint from training
    /// data by construction (dedicated stream).
    pub fn draw(generator: &crate::data::GeneratorSpec, count: usize, seed: u64) -> ProbeSet {
        let classes = generator.classes;
        let mut features = Vec::with_capacity(count * generator.d);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % classes;
            let mut rng = CounterRng::new(seed, Purpose::Probe, 0xf00d, i as u64);
            let x = generator.draw_with(class, &mut rng);
            features.extend_from_slice(&x);
            labels.push(class);
        }
        ProbeSet {
            d: generator.d,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.d..(i + 1) * self.d], self.labels[i])
    }
}

/// Largest per-probe loss difference between the two final models.
pub fn empirical_gen_gap(
    model: &Model,
    w_a: &[f64],
    w_b: &[f64],
    probes: &ProbeSet,
    mode: GMode,
) -> Result<GenGap> {
    if probes.is_empty() {
        return Err(Error::validation("probe set must not be empty"));
    }
    let mut max_gap: f64 = 0.0;
    for i in 0..probes.len() {
        let (x, y) = probes.sample(i);
        max_gap = max_gap.max((model.loss(w_a, x, y) - model.loss(w_b, x, y)).abs());
    }
    let param_dist = dist(w_a, w_b);
    let lipschitz_proxy = match mode {
        GMode::Direct => None,
        GMode::LipschitzProxy(g) => Some(g * param_dist),
    };
    Ok(GenGap {
        max_loss_gap: max_gap,
        param_dist,
        lipschitz_proxy,
    })
}

/// Measure the Lipschitz surrogate `G` near trained solutions: the largest
/// `|f(w, z) - f(w~, z)| / ||w - w~||` over final pairs and probes.
pub fn measure_g(model: &Model, pairs: &[(Vec<f64>, Vec<f64>)], probes: &ProbeSet) -> f64 {
    let mut g: f64 = 0.0;
    for (wa, wb) in pairs {
        let dw = dist(wa, wb);
        if dw <= 1e-300 {
            continue;
        }
        for i in 0..probes.len() {
            let (x, y) = probes.sample(i);
            g = g.max((model.loss(wa, x, y) - model.loss(wb, x, y)).abs() / dw);
        }
    }
    g
}

/// Evaluated theoretical bound with the observation index that attains it.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    /// The two-term bound evaluated at the clamped `tau0`; this is what the
    /// stability decomposition yields for any admissible observation index.
    pub epsilon: f64,
    /// The closed-form minimized bound (valid when no clamping occurred).
    pub closed_form: f64,
    pub tau0: f64,
    pub clamped: bool,
    pub constants: AssumptionConstants,
    pub m: usize,
    /// Active clients — absent for the decentralized bound.
    pub n: Option<usize>,
    /// Topology coefficient — absent for the centralized bound.
    pub kappa_lambda: Option<f64>,
    pub samples_per_client: usize,
    pub rounds: usize,
    pub local_steps: usize,
}

fn check_constants(c: &AssumptionConstants) -> Result<f64> {
    let mul = c.mu * c.l;
    if !(c.l > 0.0) || !(c.u > 0.0) || c.sigma_l < 0.0 || c.g < 0.0 || !mul.is_finite() {
        return Err(Error::validation(
            "bounds need L > 0, U > 0 and non-negative sigma_l, G",
        ));
    }
    if mul > 1.0 + 1e-12 {
        return Err(Error::validation(format!(
            "mu * L = {mul} exceeds 1; the step-size scale must satisfy mu <= 1/L"
        )));
    }
    Ok(mul.min(1.0))
}

/// Centralized bound: observation-index term
/// `2 sigma G / (m S L) * (TK/tau0)^(mu L)` plus the touch-probability term
/// `n U tau0 / (m S)`, minimized at
/// `tau0 = (2 sigma G / (n U L))^(1/(1+mu L)) (TK)^(mu L/(1+mu L))`.
pub fn cfl_generalization_bound(
    c: &AssumptionConstants,
    m: usize,
    n: usize,
    samples_per_client: usize,
    rounds: usize,
    local_steps: usize,
) -> Result<BoundReport> {
    if n < 1 || n > m {
        return Err(Error::validation(format!(
            "need 1 <= n <= m, got n = {n}, m = {m}"
        )));
    }
    let mul = check_constants(c)?;
    let s = samples_per_client as f64;
    let tk = (rounds * local_steps) as f64;
    let (nf, mf) = (n as f64, m as f64);
    let tau0_raw =
        (2.0 * c.sigma_l * c.g / (nf * c.u * c.l)).powf(1.0 / (1.0 + mul)) * tk.powf(mul / (1.0 + mul));
    let tau0 = tau0_raw.clamp(1.0, tk);
    let epsilon =
        2.0 * c.sigma_l * c.g / (mf * s * c.l) * (tk / tau0).powf(mul) + nf * c.u * tau0 / (mf * s);
    let closed_form = 4.0 / s
        * (c.sigma_l * c.g / c.l).powf(1.0 / (1.0 + mul))
        * (nf.powf(mul / (1.0 + mul)) / mf)
        * (c.u * tk).powf(mul / (1.0 + mul));
    Ok(BoundReport {
        epsilon,
        closed_form,
        tau0,
        clamped: tau0 != tau0_raw,
        constants: *c,
        m,
        n: Some(n),
        kappa_lambda: None,
        samples_per_client,
        rounds,
        local_steps,
    })
}

/// Decentralized bound with topology factor `(1 + 6 sqrt(m) kappa) / m`.
pub fn dfl_generalization_bound(
    c: &AssumptionConstants,
    m: usize,
    kappa: f64,
    samples_per_client: usize,
    rounds: usize,
    local_steps: usize,
) -> Result<BoundReport> {
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(Error::validation("kappa must be finite and non-negative"));
    }
    let mul = check_constants(c)?;
    let s = samples_per_client as f64;
    let tk = (rounds * local_steps) as f64;
    let mf = m as f64;
    let topo = (1.0 + 6.0 * mf.sqrt() * kappa) / mf;
    let tau0_raw = (2.0 * c.sigma_l * c.g / (c.u * c.l) * topo).powf(1.0 / (1.0 + mul))
        * tk.powf(mul / (1.0 + mul));
    let tau0 = tau0_raw.clamp(1.0, tk);
    let epsilon =
        2.0 * c.sigma_l * c.g / (s * c.l) * topo * (tk / tau0).powf(mul) + c.u * tau0 / s;
    let closed_form = 4.0 / s
        * (c.sigma_l * c.g / c.l).powf(1.0 / (1.0 + mul))
        * topo.powf(1.0 / (1.0 + mul))
        * (c.u * tk).powf(mul / (1.0 + mul));
    Ok(BoundReport {
        epsilon,
        closed_form,
        tau0,
        clamped: tau0 != tau0_raw,
        constants: *c,
        m,
        n: None,
        kappa_lambda: Some(kappa),
        samples_per_client,
        rounds,
        local_steps,
    })
}

/// Participation count balancing optimization (linear speedup in n) against
/// generalization: `n* = m^((1 + mu L)/(1 + 2 mu L))`. Callers round.
pub fn optimal_participation(m: usize, mu_l: f64) -> f64 {
    (m as f64).powf((1.0 + mu_l) / (1.0 + 2.0 * mu_l))
}

/// The topology-quality threshold `sqrt(m)` (constant factor taken as 1).
pub fn collapse_threshold(m: usize) -> f64 {
    (m as f64).sqrt()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CollapseCheck {
    pub kappa_lambda: f64,
    pub threshold: f64,
    /// Whether the topology exceeds the threshold (stability degrades as m
    /// grows).
    pub collapsed: bool,
}

pub fn collapse_check(kappa: f64, m: usize) -> CollapseCheck {
    let threshold = collapse_threshold(m);
    CollapseCheck {
        kappa_lambda: kappa,
        threshold,
        collapsed: kappa > threshold,
    }
}

/// Aggregate of one statistic across coupled traces: central moments,
/// quantiles, and a bootstrap band for the mean.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurveSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    pub boot_lo: f64,
    pub boot_hi: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Mean, quantile band, and a deterministic bootstrap interval for the mean.
/// Requires at least 10 values.
pub fn stability_curve(values: &[f64], bootstrap_seed: u64, resamples: usize) -> Result<CurveSummary> {
    if values.len() < 10 {
        return Err(Error::validation(format!(
            "stability_curve needs at least 10 traces, got {}",
            values.len()
        )));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = values.iter().sum::<f64>() / n as f64;

    let mut boot_means = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let mut rng = CounterRng::new(bootstrap_seed, Purpose::Bootstrap, b as u64, 0);
        let sum: f64 = (0..n).map(|_| values[rng.index(n)]).sum();
        boot_means.push(sum / n as f64);
    }
    boot_means.sort_by(|a, b| a.partial_cmp(b).unwrap());

    Ok(CurveSummary {
        count: n,
        mean,
        median: quantile(&sorted, 0.5),
        q05: quantile(&sorted, 0.05),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
        q95: quantile(&sorted, 0.95),
        boot_lo: if boot_means.is_empty() { mean } else { quantile(&boot_means, 0.025) },
        boot_hi: if boot_means.is_empty() { mean } else { quantile(&boot_means, 0.975) },
    })
}
