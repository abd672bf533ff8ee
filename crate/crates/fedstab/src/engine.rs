//! Deterministic execution of FedAvg (server rounds with partial
//! participation) and D-FedAvg (gossip rounds), including coupled twin runs
//! on a federation and its one-sample neighbor with identical randomness.
//!
//! All randomness comes from counter-based streams keyed by
//! `(master_seed, purpose, round, client)`, so the two arms of a coupled run
//! consume identical draws by construction and results do not depend on
//! scheduling. Aggregations accumulate in client-index order with
//! scale-then-add, making CFL at `n = m` bit-identical to DFL on the full
//! topology.

use crate::data::{Federation, Perturbation};
use crate::error::{Error, Result};
use crate::model::{dist, Model};
use crate::rng::{CounterRng, Purpose};
use crate::topology::MixingMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// eta_tau = mu / tau with tau = t*K + k + 1 (1-indexed iterations).
    InverseIteration,
    /// eta = mu for every step.
    Constant,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Communication rounds T.
    pub rounds: usize,
    /// Local SGD steps per round K.
    pub local_steps: usize,
    /// Minibatch size; 1 for theory-faithful runs.
    pub batch: usize,
    /// Step-size scale mu.
    pub mu: f64,
    pub schedule: Schedule,
    pub master_seed: u64,
    /// Scale of the Gaussian parameter initialization.
    pub init_scale: f64,
    /// Keep per-step per-client records (needed for the step-inequality checks).
    pub record_steps: bool,
    /// Evaluate mean losses of the report model every round.
    pub record_round_losses: bool,
    /// Keep the report model after every round.
    pub record_round_models: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 1,
            local_steps: 1,
            batch: 1,
            mu: 0.1,
            schedule: Schedule::InverseIteration,
            master_seed: 0,
            init_scale: 0.01,
            record_steps: false,
            record_round_losses: false,
            record_round_models: false,
        }
    }
}

/// Which algorithm drives a run.
#[derive(Debug, Clone, Copy)]
pub enum Algo<'a> {
    /// Server rounds: sample `active` clients, broadcast, K local steps,
    /// average the active clients.
    Cfl { active: usize },
    /// Gossip rounds: mix with the matrix, then K local steps on every
    /// client. The report model is the uniform average.
    Dfl { matrix: &'a MixingMatrix },
}

/// Output of a single run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub final_model: Vec<f64>,
    pub round_losses: Vec<f64>,
    pub max_loss: f64,
    pub iterations: usize,
    pub round_models: Option<Vec<Vec<f64>>>,
}

/// Per-step record of one client's coupled distances.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepRecord {
    pub round: usize,
    pub step: usize,
    pub tau: u64,
    pub client: usize,
    pub eta: f64,
    /// Whether this step's batch drew the perturbed index on the perturbed
    /// client.
    pub perturbed: bool,
    pub dist_before: f64,
    pub dist_after: f64,
    /// `||grad(w_b, z*) - grad(w_b, z~*)||` at the pre-step second-arm state;
    /// 0 unless `perturbed`.
    pub pair_grad_gap: f64,
}

/// Round-boundary record: Delta at the end of local training vs Delta right
/// after the next aggregation/mixing step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RoundBoundary {
    pub round: usize,
    pub delta_end: f64,
    pub delta_start_next: f64,
}

/// Everything measured on a coupled twin run.
#[derive(Debug, Clone)]
pub struct CoupledTrace {
    /// Delta over the iteration grid tau = 0..=T*K, where
    /// `deltas[tau] = sum_i ||w_i - w~_i||` after the tau-th local step.
    pub deltas: Vec<f64>,
    /// First iteration (1-based) whose batch contained the perturbed sample
    /// on an active perturbed client.
    pub tau_hat: Option<u64>,
    /// Every such iteration.
    pub touch_taus: Vec<u64>,
    /// Distance between the two report models.
    pub final_gap: f64,
    /// Per-client distances at the end of the last local training phase
    /// (the models clients would deploy in a serverless run).
    pub final_client_gaps: Vec<f64>,
    pub steps: Option<Vec<StepRecord>>,
    pub boundaries: Vec<RoundBoundary>,
    pub round_losses_a: Vec<f64>,
    pub round_losses_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub a: RunTrace,
    pub b: RunTrace,
    pub coupled: CoupledTrace,
}

impl CoupledTrace {
    /// CSV with one row per recorded iteration:
    /// `t,k,tau,delta,mean_loss_C,mean_loss_Ctilde`. Loss columns carry the
    /// containing round's end-of-round evaluation.
    pub fn to_csv(&self, local_steps: usize) -> String {
        let mut out = String::from("t,k,tau,delta,mean_loss_C,mean_loss_Ctilde\n");
        for (tau, delta) in self.deltas.iter().enumerate() {
            let (t, k) = if tau == 0 {
                (0, 0)
            } else {
                ((tau - 1) / local_steps, (tau - 1) % local_steps + 1)
            };
            let (la, lb) = if self.round_losses_a.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let idx = t.min(self.round_losses_a.len() - 1);
                (self.round_losses_a[idx], self.round_losses_b[idx])
            };
            out.push_str(&format!("{t},{k},{tau},{delta},{la},{lb}\n"));
        }
        out
    }
}

fn eta_at(cfg: &TrainConfig, tau: u64) -> f64 {
    match cfg.schedule {
        Schedule::InverseIteration => cfg.mu / tau as f64,
        Schedule::Constant => cfg.mu,
    }
}

fn validate(fed: &Federation, model: &Model, algo: &Algo, cfg: &TrainConfig) -> Result<()> {
    if cfg.rounds < 1 || cfg.local_steps < 1 {
        return Err(Error::validation("rounds and local_steps must be >= 1"));
    }
    if cfg.batch < 1 {
        return Err(Error::validation("batch must be >= 1"));
    }
    if !cfg.mu.is_finite() || cfg.mu < 0.0 {
        return Err(Error::validation("mu must be finite and non-negative"));
    }
    if model.spec.d != fed.generator.d || model.spec.classes != fed.generator.classes {
        return Err(Error::validation("model dimensions do not match the federation"));
    }
    match algo {
        Algo::Cfl { active } => {
            if *active < 1 || *active > fed.m {
                return Err(Error::validation(format!(
                    "active clients must satisfy 1 <= n <= m, got n = {active}, m = {}",
                    fed.m
                )));
            }
        }
        Algo::Dfl { matrix } => {
            if matrix.m != fed.m {
                return Err(Error::validation(format!(
                    "mixing matrix size {} does not match client count {}",
                    matrix.m, fed.m
                )));
            }
        }
    }
    Ok(())
}

/// Weighted sum of rows by pairwise (binary-counter) tree reduction over
/// the scaled terms, in iteration order. Shared by the CFL average and the
/// DFL gossip row so the two agree bitwise when the weights coincide; the
/// tree shape also makes averaging bitwise-equal inputs exact whenever the
/// term count is a power of two, which keeps a gossip step on identical
/// models from drifting off the broadcast path.
fn weighted_mean_into<'a>(
    out: &mut [f64],
    terms: impl Iterator<Item = (f64, &'a [f64])>,
    scratch: &mut ReduceScratch,
) {
    // stack[k] holds a partial sum of exactly 2^k scaled terms.
    let stack = &mut scratch.stack;
    let spare = &mut scratch.spare;
    stack.clear();
    for (weight, row) in terms {
        let mut buf = spare.pop().unwrap_or_default();
        buf.clear();
        buf.extend(row.iter().map(|r| weight * r));
        let mut rank = 0u32;
        while let Some((top_rank, top)) = stack.last() {
            if *top_rank != rank {
                break;
            }
            for (b, t) in buf.iter_mut().zip(top) {
                *b += t;
            }
            let (_, used) = stack.pop().unwrap();
            spare.push(used);
            rank += 1;
        }
        stack.push((rank, buf));
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    // Remaining partial sums combine smallest-first.
    for (_, part) in stack.drain(..).rev() {
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
        spare.push(part);
    }
}

/// Reusable buffers for the pairwise reduction.
#[derive(Default)]
struct ReduceScratch {
    stack: Vec<(u32, Vec<f64>)>,
    spare: Vec<Vec<f64>>,
}

fn check_finite(states: &[Vec<f64>], round: usize, step: usize) -> Result<()> {
    for (client, w) in states.iter().enumerate() {
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericDivergence {
                round,
                step,
                client,
                detail: "non-finite parameter entry".into(),
            });
        }
    }
    Ok(())
}

struct Arm<'a> {
    fed: &'a Federation,
    states: Vec<Vec<f64>>,
    mixed: Vec<Vec<f64>>,
    report: Vec<f64>,
    max_loss: f64,
    round_losses: Vec<f64>,
    round_models: Vec<Vec<f64>>,
    scratch: ReduceScratch,
}

impl<'a> Arm<'a> {
    fn new(fed: &'a Federation, w0: &[f64], m: usize) -> Self {
        Arm {
            fed,
            states: vec![w0.to_vec(); m],
            mixed: vec![vec![0.0; w0.len()]; m],
            report: w0.to_vec(),
            max_loss: f64::NEG_INFINITY,
            round_losses: Vec::new(),
            round_models: Vec::new(),
            scratch: ReduceScratch::default(),
        }
    }

    /// Communication step at the start of round `t`. Returns the active set.
    fn communicate(&mut self, algo: &Algo, active: &[usize]) {
        match algo {
            Algo::Cfl { .. } => {
                // Broadcast the current report model to every client
                // (inactive clients hold it for the round).
                for st in self.states.iter_mut() {
                    st.copy_from_slice(&self.report);
                }
                let _ = active;
            }
            Algo::Dfl { matrix } => {
                let m = self.states.len();
                for i in 0..m {
                    let states = &self.states;
                    weighted_mean_into(
                        &mut self.mixed[i],
                        (0..m).filter_map(|j| {
                            let a = matrix.weight(i, j);
                            (a != 0.0).then(|| (a, states[j].as_slice()))
                        }),
                        &mut self.scratch,
                    );
                }
                std::mem::swap(&mut self.states, &mut self.mixed);
            }
        }
    }

    /// Aggregate after local training: CFL averages the active set into the
    /// report model; DFL reports the uniform average of all clients.
    fn aggregate(&mut self, algo: &Algo, active: &[usize]) {
        match algo {
            Algo::Cfl { active: n } => {
                let inv = 1.0 / *n as f64;
                let states = &self.states;
                let mut report = std::mem::take(&mut self.report);
                weighted_mean_into(
                    &mut report,
                    active.iter().map(|&i| (inv, states[i].as_slice())),
                    &mut self.scratch,
                );
                self.report = report;
            }
            Algo::Dfl { .. } => {
                let m = self.states.len();
                let inv = 1.0 / m as f64;
                let states = &self.states;
                let mut report = std::mem::take(&mut self.report);
                weighted_mean_into(
                    &mut report,
                    (0..m).map(|i| (inv, states[i].as_slice())),
                    &mut self.scratch,
                );
                self.report = report;
            }
        }
    }

    fn record_round(&mut self, model: &Model, losses: bool, models: bool) {
        if losses {
            let mean = self
                .fed
                .shards()
                .map(|s| model.shard_loss(&self.report, s))
                .sum::<f64>()
                / self.fed.m as f64;
            self.round_losses.push(mean);
        }
        if models {
            self.round_models.push(self.report.clone());
        }
    }

    fn into_trace(self, iterations: usize, keep_models: bool) -> RunTrace {
        RunTrace {
            final_model: self.report,
            round_losses: self.round_losses,
            max_loss: self.max_loss,
            iterations,
            round_models: keep_models.then_some(self.round_models),
        }
    }
}

/// Draw the sorted active set for round `t`.
fn draw_active(cfg: &TrainConfig, t: usize, m: usize, algo: &Algo) -> Vec<usize> {
    match algo {
        Algo::Cfl { active } => {
            let mut rng = CounterRng::new(cfg.master_seed, Purpose::ClientSelection, t as u64, 0);
            rng.sample_distinct_sorted(m, *active)
        }
        Algo::Dfl { .. } => (0..m).collect(),
    }
}

/// Run one algorithm on one federation.
pub fn run(fed: &Federation, model: &Model, algo: Algo, cfg: &TrainConfig) -> Result<RunTrace> {
    validate(fed, model, &algo, cfg)?;
    let m = fed.m;
    let s = fed.samples_per_client;
    let w0 = model.init_params(cfg.master_seed, cfg.init_scale);
    let mut arm = Arm::new(fed, &w0, m);
    let mut grad = vec![0.0; w0.len()];

    for t in 0..cfg.rounds {
        let active = draw_active(cfg, t, m, &algo);
        arm.communicate(&algo, &active);
        for &i in &active {
            let mut rng = CounterRng::new(cfg.master_seed, Purpose::Minibatch, t as u64, i as u64);
            for k in 0..cfg.local_steps {
                let tau = (t * cfg.local_steps + k + 1) as u64;
                let eta = eta_at(cfg, tau);
                let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.index(s)).collect();
                let max_loss =
                    sgd_step(model, arm.fed, i, &indices, eta, &mut arm.states[i], &mut grad);
                arm.max_loss = arm.max_loss.max(max_loss);
            }
        }
        arm.aggregate(&algo, &active);
        check_finite(std::slice::from_ref(&arm.report), t, cfg.local_steps)?;
        check_finite(&arm.states, t, cfg.local_steps)?;
        arm.record_round(model, cfg.record_round_losses, cfg.record_round_models);
    }
    let iterations = cfg.rounds * cfg.local_steps;
    Ok(arm.into_trace(iterations, cfg.record_round_models))
}

/// One SGD step on client `i` with the given batch; returns the largest
/// per-sample loss seen.
fn sgd_step(
    model: &Model,
    fed: &Federation,
    client: usize,
    indices: &[usize],
    eta: f64,
    w: &mut [f64],
    grad_buf: &mut [f64],
) -> f64 {
    let shard = fed.shard(client);
    let mut max_loss = f64::NEG_INFINITY;
    if indices.len() == 1 {
        let (x, y) = shard.sample(indices[0]);
        let loss = model.loss_grad_into(w, x, y, grad_buf);
        max_loss = loss;
        for (wi, g) in w.iter_mut().zip(grad_buf.iter()) {
            *wi -= eta * g;
        }
    } else {
        let mut acc = vec![0.0; w.len()];
        for &j in indices {
            let (x, y) = shard.sample(j);
            let loss = model.loss_grad_into(w, x, y, grad_buf);
            max_loss = max_loss.max(loss);
            for (a, g) in acc.iter_mut().zip(grad_buf.iter()) {
                *a += g;
            }
        }
        let inv = 1.0 / indices.len() as f64;
        for (wi, a) in w.iter_mut().zip(&acc) {
            *wi -= eta * inv * a;
        }
    }
    max_loss
}

fn delta_between(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dist(x, y)).sum()
}

/// Coupled twin run: identical initialization, client selection, and
/// minibatch indices on a federation and its one-sample neighbor.
pub fn run_coupled(
    fed: &Federation,
    neighbor: &Federation,
    pert: &Perturbation,
    model: &Model,
    algo: Algo,
    cfg: &TrainConfig,
) -> Result<CoupledRun> {
    validate(fed, model, &algo, cfg)?;
    if neighbor.m != fed.m || neighbor.samples_per_client != fed.samples_per_client {
        return Err(Error::validation(
            "neighbor federation shape does not match the original",
        ));
    }
    if fed.count_differing(neighbor) > 1 {
        return Err(Error::validation(
            "federations differ at more than one sample",
        ));
    }
    if pert.client >= fed.m || pert.sample >= fed.samples_per_client {
        return Err(Error::validation("perturbation position out of range"));
    }

    let m = fed.m;
    let s = fed.samples_per_client;
    let kk = cfg.local_steps;
    let w0 = model.init_params(cfg.master_seed, cfg.init_scale);
    let mut arm_a = Arm::new(fed, &w0, m);
    let mut arm_b = Arm::new(neighbor, &w0, m);
    let mut grad = vec![0.0; w0.len()];
    let mut grad2 = vec![0.0; w0.len()];

    let mut deltas = Vec::with_capacity(cfg.rounds * kk + 1);
    deltas.push(0.0);
    let mut steps = cfg.record_steps.then(Vec::new);
    let mut boundaries = Vec::with_capacity(cfg.rounds.saturating_sub(1));
    let mut touch_taus = Vec::new();
    let mut prev_delta_end: Option<f64> = None;
    let mut final_client_gaps = Vec::new();

    for t in 0..cfg.rounds {
        let active = draw_active(cfg, t, m, &algo);
        arm_a.communicate(&algo, &active);
        arm_b.communicate(&algo, &active);
        if let Some(prev) = prev_delta_end {
            boundaries.push(RoundBoundary {
                round: t - 1,
                delta_end: prev,
                delta_start_next: delta_between(&arm_a.states, &arm_b.states),
            });
        }

        // Draw every active client's batch indices for the whole round up
        // front; both arms consume the identical index sequences.
        let round_indices: Vec<(usize, Vec<Vec<usize>>)> = active
            .iter()
            .map(|&i| {
                let mut rng =
                    CounterRng::new(cfg.master_seed, Purpose::Minibatch, t as u64, i as u64);
                let per_step: Vec<Vec<usize>> = (0..kk)
                    .map(|_| (0..cfg.batch).map(|_| rng.index(s)).collect())
                    .collect();
                (i, per_step)
            })
            .collect();

        for k in 0..kk {
            let tau = (t * kk + k + 1) as u64;
            let eta = eta_at(cfg, tau);
            for (i, per_step) in &round_indices {
                let i = *i;
                let indices = &per_step[k];
                let perturbed = i == pert.client && indices.contains(&pert.sample);
                if perturbed {
                    touch_taus.push(tau);
                }
                let want_record = steps.is_some();
                let dist_before =
                    want_record.then(|| dist(&arm_a.states[i], &arm_b.states[i]));
                let pair_grad_gap = if perturbed && want_record && cfg.batch == 1 {
                    // Gradient difference of the perturbed pair at the
                    // second arm's pre-step state.
                    let wb = &arm_b.states[i];
                    let (xo, yo) = (&pert.original.0, pert.original.1);
                    let (xr, yr) = (&pert.replacement.0, pert.replacement.1);
                    model.loss_grad_into(wb, xo, yo, &mut grad);
                    model.loss_grad_into(wb, xr, yr, &mut grad2);
                    dist(&grad, &grad2)
                } else {
                    0.0
                };
                let la = sgd_step(model, arm_a.fed, i, indices, eta, &mut arm_a.states[i], &mut grad);
                let lb = sgd_step(model, arm_b.fed, i, indices, eta, &mut arm_b.states[i], &mut grad);
                arm_a.max_loss = arm_a.max_loss.max(la);
                arm_b.max_loss = arm_b.max_loss.max(lb);
                if let Some(recs) = steps.as_mut() {
                    recs.push(StepRecord {
                        round: t,
                        step: k,
                        tau,
                        client: i,
                        eta,
                        perturbed,
                        dist_before: dist_before.unwrap(),
                        dist_after: dist(&arm_a.states[i], &arm_b.states[i]),
                        pair_grad_gap,
                    });
                }
            }
            deltas.push(delta_between(&arm_a.states, &arm_b.states));
        }
        prev_delta_end = Some(*deltas.last().unwrap());
        if t + 1 == cfg.rounds {
            final_client_gaps = arm_a
                .states
                .iter()
                .zip(&arm_b.states)
                .map(|(x, y)| dist(x, y))
                .collect();
        }

        arm_a.aggregate(&algo, &active);
        arm_b.aggregate(&algo, &active);
        check_finite(&arm_a.states, t, kk)?;
        check_finite(&arm_b.states, t, kk)?;
        arm_a.record_round(model, cfg.record_round_losses, cfg.record_round_models);
        arm_b.record_round(model, cfg.record_round_losses, cfg.record_round_models);
    }

    let final_gap = dist(&arm_a.report, &arm_b.report);
    let iterations = cfg.rounds * kk;
    let coupled = CoupledTrace {
        tau_hat: touch_taus.first().copied(),
        touch_taus,
        final_gap,
        final_client_gaps,
        deltas,
        steps,
        boundaries,
        round_losses_a: arm_a.round_losses.clone(),
        round_losses_b: arm_b.round_losses.clone(),
    };
    Ok(CoupledRun {
        a: arm_a.into_trace(iterations, cfg.record_round_models),
        b: arm_b.into_trace(iterations, cfg.record_round_models),
        coupled,
    })
}

/// Which sampling pattern a touch-schedule replay uses.
#[derive(Debug, Clone, Copy)]
pub enum TouchAlgo {
    Cfl { active: usize },
    Dfl,
}

/// Replay only the selection and minibatch streams of a run and report the
/// iterations (1-based) at which the perturbed position `(client, sample)`
/// would be drawn by an active client. Identical to what `run_coupled`
/// records, at a fraction of the cost.
pub fn touch_schedule(
    m: usize,
    s: usize,
    algo: TouchAlgo,
    cfg: &TrainConfig,
    client: usize,
    sample: usize,
) -> Vec<u64> {
    let mut touches = Vec::new();
    for t in 0..cfg.rounds {
        let active = match algo {
            TouchAlgo::Cfl { active } => {
                let mut rng =
                    CounterRng::new(cfg.master_seed, Purpose::ClientSelection, t as u64, 0);
                rng.sample_distinct_sorted(m, active).contains(&client)
            }
            TouchAlgo::Dfl => true,
        };
        if !active {
            continue;
        }
        let mut rng = CounterRng::new(cfg.master_seed, Purpose::Minibatch, t as u64, client as u64);
        for k in 0..cfg.local_steps {
            let mut hit = false;
            for _ in 0..cfg.batch {
                if rng.index(s) == sample {
                    hit = true;
                }
            }
            if hit {
                touches.push((t * cfg.local_steps + k + 1) as u64);
            }
        }
    }
    touches
}
