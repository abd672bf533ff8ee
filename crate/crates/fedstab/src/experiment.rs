//! Declarative experiment configs and the sweep runners behind the CLI.
//!
//! A config is one TOML file; unknown keys are rejected. Every run writes a
//! manifest naming the config hash and the seeds it used, and numeric output
//! is a pure function of the config, so a rerun reproduces files byte for
//! byte.

use crate::data::{
    dirichlet_partition, generate_synthetic_scaled, make_identical_neighbor, make_neighbor,
    Federation, DEFAULT_NOISE_STD,
};
use crate::engine::{run_coupled, Algo, Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{estimate_constants, AssumptionConstants, Model, ModelFamily, ModelSpec};
use crate::par;
use crate::rng::{CounterRng, Purpose};
use crate::stability::{
    cfl_generalization_bound, collapse_check, dfl_generalization_bound, empirical_gen_gap, measure_g,
    stability_curve, BoundReport, CollapseCheck, CurveSummary, GMode, ProbeSet,
};
use crate::topology::{MixingMatrix, TopologyKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::str::FromStr;

pub const SCHEMA_VERSION: u32 = 1;

fn default_noise() -> f64 {
    DEFAULT_NOISE_STD
}
fn default_batch() -> usize {
    1
}
fn default_init_scale() -> f64 {
    0.01
}
fn default_schedule() -> String {
    "inverse_iteration".into()
}
fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub d: usize,
    pub classes: usize,
    pub clients: usize,
    /// Pool size; every client receives floor(total/clients) samples.
    pub total: usize,
    pub beta: f64,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub family: String,
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CflBlock {
    pub active: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DflBlock {
    pub topology: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub rounds: usize,
    pub local_steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Absent means "auto": mu = 1/L from the estimated constants.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub cfl: Option<CflBlock>,
    #[serde(default)]
    pub dfl: Option<DflBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityBlock {
    pub seeds: usize,
    pub perturbations: usize,
    pub probe_count: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub zero_perturbation: bool,
    /// Alpha for kappa_lambda; absent means 1 - mu L.
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<String>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: None,
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataBlock,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub stability: StabilityBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "unsupported schema_version {} (this build understands {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.train.cfl, &self.train.dfl) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::validation(
                    "exactly one of [train.cfl] and [train.dfl] must be present",
                ))
            }
        }
        ModelFamily::from_str(&self.model.family)?;
        schedule_from_str(&self.train.schedule)?;
        if self.stability.seeds * self.stability.perturbations < 10 {
            return Err(Error::validation(
                "stability.seeds * stability.perturbations must be at least 10",
            ));
        }
        if self.stability.probe_count == 0 {
            return Err(Error::validation("probe_count must be positive"));
        }
        if let Some(alpha) = self.stability.alpha {
            if alpha <= 0.0 || alpha >= 1.0 {
                return Err(Error::validation("alpha must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized form.
    pub fn content_hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn schedule_from_str(s: &str) -> Result<Schedule> {
    match s {
        "inverse_iteration" => Ok(Schedule::InverseIteration),
        "constant" => Ok(Schedule::Constant),
        other => Err(Error::validation(format!(
            "unknown schedule '{other}' (expected inverse_iteration|constant)"
        ))),
    }
}

/// A fully prepared experiment: data, model, constants, probes.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub federation: Federation,
    pub model: Model,
    pub constants: AssumptionConstants,
    pub probes: ProbeSet,
    pub train: TrainConfig,
    pub alpha: f64,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Self::prepare_with(config, None, None)
    }

    /// Prepare with overridden client count / per-client samples (used by
    /// the collapse sweep, which grows m at fixed S).
    pub fn prepare_with(
        config: ExperimentConfig,
        clients: Option<usize>,
        samples_per_client: Option<usize>,
    ) -> Result<Self> {
        let d = &config.data;
        let m = clients.unwrap_or(d.clients);
        let total = match samples_per_client {
            Some(s) => s * m,
            None => d.total,
        };
        let pool = generate_synthetic_scaled(d.d, d.classes, total, d.seed, d.noise_std)?;
        let federation = dirichlet_partition(&pool, m, d.beta, d.seed)?;
        let family = ModelFamily::from_str(&config.model.family)?;
        let model = Model::new(ModelSpec {
            family,
            d: d.d,
            classes: d.classes,
            hidden: config.model.hidden,
            weight_decay: config.model.weight_decay,
        })?;
        let mut constants = estimate_constants(
            &model,
            &federation,
            config.stability.probe_count.max(100),
            config.stability.base_seed,
        )?;
        let schedule = schedule_from_str(&config.train.schedule)?;
        let mu = match config.train.mu {
            None => constants.mu,
            Some(mu) => {
                if !(mu.is_finite() && mu > 0.0) {
                    return Err(Error::validation("mu must be positive and finite"));
                }
                if schedule == Schedule::InverseIteration && mu * constants.l > 1.0 + 1e-9 {
                    return Err(Error::validation(format!(
                        "mu = {mu} violates mu * L <= 1 for the estimated L = {} under the \
                         inverse_iteration schedule",
                        constants.l
                    )));
                }
                mu
            }
        };
        constants.mu = mu.min(constants.mu);
        let train = TrainConfig {
            rounds: config.train.rounds,
            local_steps: config.train.local_steps,
            batch: config.train.batch,
            mu,
            schedule,
            master_seed: config.stability.base_seed,
            init_scale: config.train.init_scale,
            record_steps: false,
            record_round_losses: false,
            record_round_models: false,
        };
        let alpha = config
            .stability
            .alpha
            .unwrap_or_else(|| (1.0 - constants.mu * constants.l).clamp(1e-6, 1.0 - 1e-6));
        let probes = ProbeSet::draw(
            &federation.generator,
            config.stability.probe_count,
            config.stability.base_seed ^ 0x5eed,
        );
        Ok(Experiment {
            config,
            federation,
            model,
            constants,
            probes,
            train,
            alpha,
        })
    }
}

/// One cell of a sweep: an algorithm choice over the prepared data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellAlgo {
    Cfl { active: usize },
    Dfl { kind: TopologyKind },
}

impl CellAlgo {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<CellAlgo> {
        if let Some(c) = &cfg.train.cfl {
            Ok(CellAlgo::Cfl { active: c.active })
        } else if let Some(d) = &cfg.train.dfl {
            Ok(CellAlgo::Dfl {
                kind: TopologyKind::from_str(&d.topology)?,
            })
        } else {
            Err(Error::validation("config names neither cfl nor dfl"))
        }
    }
}

/// Raw per-run measurements within a cell.
#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub seed: u64,
    pub perturb_client: usize,
    pub perturb_sample: usize,
    pub tau_hat: Option<u64>,
    /// Summed client divergence at the final local step, over m.
    pub delta_over_m: f64,
    /// Distance between the averaged report models.
    pub final_gap: f64,
    /// Largest per-client gap at the end of local training — the models
    /// clients deploy in a serverless run.
    pub worst_client_gap: f64,
    /// Largest per-probe loss difference between the report models.
    pub loss_gap: f64,
    pub max_loss: f64,
}

/// Aggregated outcome of one sweep cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub algo: &'static str,
    pub topology: Option<String>,
    pub n: Option<usize>,
    pub m: usize,
    pub samples_per_client: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub lambda: Option<f64>,
    pub kappa_lambda: Option<f64>,
    pub g_est: f64,
    pub delta_over_m: CurveSummary,
    pub final_gap: CurveSummary,
    pub worst_client_gap: CurveSummary,
    pub loss_gap: CurveSummary,
    pub proxy_gap: CurveSummary,
    pub bound: BoundReport,
    pub collapse: Option<CollapseCheck>,
    pub runs: Vec<RunStats>,
}

/// Uniformly drawn perturbation positions, shared across cells so sweeps
/// compare on common randomness.
pub fn perturbation_positions(
    m: usize,
    s: usize,
    count: usize,
    base_seed: u64,
) -> Vec<(usize, usize)> {
    (0..count)
        .map(|p| {
            let mut rng = CounterRng::new(base_seed, Purpose::PerturbPositions, p as u64, 0);
            (rng.index(m), rng.index(s))
        })
        .collect()
}

/// Run every (seed, perturbation) coupled job of one cell and aggregate.
pub fn run_cell(exp: &Experiment, algo: CellAlgo) -> Result<CellOutcome> {
    let st = &exp.config.stability;
    let m = exp.federation.m;
    let s = exp.federation.samples_per_client;
    let matrix = match algo {
        CellAlgo::Dfl { kind } => Some(MixingMatrix::build(kind, m)?),
        CellAlgo::Cfl { active } => {
            if active < 1 || active > m {
                return Err(Error::validation(format!(
                    "active count {active} outside [1, {m}]"
                )));
            }
            None
        }
    };
    let positions = perturbation_positions(m, s, st.perturbations, st.base_seed);

    struct Job {
        seed: u64,
        client: usize,
        sample: usize,
    }
    let jobs: Vec<Job> = (0..st.seeds)
        .flat_map(|i| {
            positions.iter().map(move |&(client, sample)| Job {
                seed: st.base_seed + i as u64,
                client,
                sample,
            })
        })
        .collect();

    let outcomes = par::map_jobs(jobs, |job| -> Result<_> {
        let (neighbor, pert) = if st.zero_perturbation {
            make_identical_neighbor(&exp.federation, job.client, job.sample)?
        } else {
            make_neighbor(&exp.federation, job.client, job.sample, job.seed)?
        };
        let cfg = TrainConfig {
            master_seed: job.seed,
            ..exp.train
        };
        let engine_algo = match &matrix {
            Some(mx) => Algo::Dfl { matrix: mx },
            None => match algo {
                CellAlgo::Cfl { active } => Algo::Cfl { active },
                CellAlgo::Dfl { .. } => unreachable!(),
            },
        };
        let out = run_coupled(&exp.federation, &neighbor, &pert, &exp.model, engine_algo, &cfg)?;
        let delta_over_m = out.coupled.deltas.last().copied().unwrap_or(0.0) / m as f64;
        let gap = empirical_gen_gap(
            &exp.model,
            &out.a.final_model,
            &out.b.final_model,
            &exp.probes,
            GMode::Direct,
        )?;
        Ok((
            RunStats {
                seed: job.seed,
                perturb_client: job.client,
                perturb_sample: job.sample,
                tau_hat: out.coupled.tau_hat,
                delta_over_m,
                final_gap: out.coupled.final_gap,
                worst_client_gap: out
                    .coupled
                    .final_client_gaps
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max),
                loss_gap: gap.max_loss_gap,
                max_loss: out.a.max_loss.max(out.b.max_loss),
            },
            (out.a.final_model, out.b.final_model),
        ))
    });

    let mut runs = Vec::with_capacity(outcomes.len());
    let mut pairs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (stats, pair) = o?;
        runs.push(stats);
        pairs.push(pair);
    }

    // Lipschitz surrogate near the trained solutions, then the proxy values
    // it induces.
    let g_near = measure_g(&exp.model, &pairs, &exp.probes);
    let g_est = g_near.max(exp.constants.g);
    let u_run = runs.iter().fold(exp.constants.u, |acc, r| acc.max(r.max_loss));
    let used = AssumptionConstants {
        g: g_est,
        u: u_run,
        ..exp.constants
    };

    let deltas: Vec<f64> = runs.iter().map(|r| r.delta_over_m).collect();
    let gaps: Vec<f64> = runs.iter().map(|r| r.final_gap).collect();
    let worst: Vec<f64> = runs.iter().map(|r| r.worst_client_gap).collect();
    let loss_gaps: Vec<f64> = runs.iter().map(|r| r.loss_gap).collect();
    let proxies: Vec<f64> = runs.iter().map(|r| g_est * r.final_gap).collect();
    let boot_seed = st.base_seed ^ 0xb007;
    let t = exp.train.rounds;
    let k = exp.train.local_steps;

    let (bound, lambda, kappa, collapse, topology, n) = match (&matrix, algo) {
        (Some(mx), CellAlgo::Dfl { kind }) => {
            let profile = mx.spectral_profile(exp.alpha)?;
            let bound = dfl_generalization_bound(&used, m, profile.kappa_lambda, s, t, k)?;
            (
                bound,
                Some(profile.lambda),
                Some(profile.kappa_lambda),
                Some(collapse_check(profile.kappa_lambda, m)),
                Some(kind.name().to_string()),
                None,
            )
        }
        (None, CellAlgo::Cfl { active }) => {
            let bound = cfl_generalization_bound(&used, m, active, s, t, k)?;
            (bound, None, None, None, None, Some(active))
        }
        _ => unreachable!(),
    };

    Ok(CellOutcome {
        algo: if n.is_some() { "cfl" } else { "dfl" },
        topology,
        n,
        m,
        samples_per_client: s,
        rounds: t,
        local_steps: k,
        lambda,
        kappa_lambda: kappa,
        g_est,
        delta_over_m: stability_curve(&deltas, boot_seed, 500)?,
        final_gap: stability_curve(&gaps, boot_seed, 500)?,
        worst_client_gap: stability_curve(&worst, boot_seed, 500)?,
        loss_gap: stability_curve(&loss_gaps, boot_seed, 500)?,
        proxy_gap: stability_curve(&proxies, boot_seed, 500)?,
        bound,
        collapse,
        runs,
    })
}

/// Long-format CSV over cells: one row per (cell, statistic).
pub fn cells_to_csv(cells: &[CellOutcome]) -> String {
    let mut out = String::from(
        "algo,topology,n,m,s,rounds,local_steps,lambda,kappa_lambda,statistic,count,\
         mean,median,q05,q25,q75,q95,boot_lo,boot_hi,g_est,bound_epsilon,bound_closed_form,\
         bound_tau0,bound_clamped,collapse_threshold,collapsed\n",
    );
    for cell in cells {
        for (name, curve) in [
            ("delta_over_m", &cell.delta_over_m),
            ("final_gap", &cell.final_gap),
            ("worst_client_gap", &cell.worst_client_gap),
            ("loss_gap", &cell.loss_gap),
            ("proxy_gap", &cell.proxy_gap),
        ] {
            let opt_f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            let opt_u = |v: Option<usize>| v.map(|x| format!("{x}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                cell.algo,
                cell.topology.clone().unwrap_or_default(),
                opt_u(cell.n),
                cell.m,
                cell.samples_per_client,
                cell.rounds,
                cell.local_steps,
                opt_f(cell.lambda),
                opt_f(cell.kappa_lambda),
                name,
                curve.count,
                curve.mean,
                curve.median,
                curve.q05,
                curve.q25,
                curve.q75,
                curve.q95,
                curve.boot_lo,
                curve.boot_hi,
                cell.g_est,
                cell.bound.epsilon,
                cell.bound.closed_form,
                cell.bound.tau0,
                cell.bound.clamped,
                opt_f(cell.collapse.map(|c| c.threshold)),
                cell.collapse.map(|c| c.collapsed.to_string()).unwrap_or_default(),
            ));
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub crate_version: &'static str,
    pub seeds: Vec<u64>,
    pub perturbations: usize,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, files: Vec<String>) -> Manifest {
        Manifest {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.content_hash(),
            crate_version: env!("CARGO_PKG_VERSION"),
            seeds: (0..cfg.stability.seeds)
                .map(|i| cfg.stability.base_seed + i as u64)
                .collect(),
            perturbations: cfg.stability.perturbations,
            files,
        }
    }
}

fn write_outputs(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    cells: &[CellOutcome],
    extra_files: Vec<(String, String)>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let formats = &cfg.output.formats;
    if formats.iter().any(|f| f == "csv") {
        let name = "summary.csv".to_string();
        std::fs::write(out_dir.join(&name), cells_to_csv(cells))?;
        files.push(name);
    }
    if formats.iter().any(|f| f == "json") {
        let name = "summary.json".to_string();
        let json = serde_json::to_string_pretty(cells).expect("cells serialize");
        std::fs::write(out_dir.join(&name), json)?;
        files.push(name);
    }
    for (name, content) in extra_files {
        std::fs::write(out_dir.join(&name), content)?;
        files.push(name);
    }
    let manifest = Manifest::new(cfg, files);
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

/// `run`: execute the configured single cell, writing coupled traces, the
/// summary, the bound report, and a manifest.
pub fn cmd_run(cfg: ExperimentConfig, out_dir: &Path) -> Result<CellOutcome> {
    let algo = CellAlgo::from_config(&cfg)?;
    let exp = Experiment::prepare(cfg)?;
    let cell = run_cell(&exp, algo)?;

    // Re-run the per-trace CSV exports with round losses on (kept out of the
    // aggregate pass to keep sweep cells lean).
    let st = &exp.config.stability;
    let positions = perturbation_positions(
        exp.federation.m,
        exp.federation.samples_per_client,
        st.perturbations,
        st.base_seed,
    );
    let mut extra = Vec::new();
    for i in 0..st.seeds {
        let seed = st.base_seed + i as u64;
        for (p, &(client, sample)) in positions.iter().enumerate() {
            let (neighbor, pert) = if st.zero_perturbation {
                make_identical_neighbor(&exp.federation, client, sample)?
            } else {
                make_neighbor(&exp.federation, client, sample, seed)?
            };
            let cfg_run = TrainConfig {
                master_seed: seed,
                record_round_losses: true,
                ..exp.train
            };
            let matrix;
            let engine_algo = match algo {
                CellAlgo::Cfl { active } => Algo::Cfl { active },
                CellAlgo::Dfl { kind } => {
                    matrix = MixingMatrix::build(kind, exp.federation.m)?;
                    Algo::Dfl { matrix: &matrix }
                }
            };
            let out = run_coupled(
                &exp.federation,
                &neighbor,
                &pert,
                &exp.model,
                engine_algo,
                &cfg_run,
            )?;
            extra.push((
                format!("trace_seed{seed}_pos{p}.csv"),
                out.coupled.to_csv(exp.train.local_steps),
            ));
        }
    }
    extra.push((
        "bound.json".to_string(),
        serde_json::to_string_pretty(&cell.bound).expect("bound serializes"),
    ));
    write_outputs(&exp.config, out_dir, std::slice::from_ref(&cell), extra)?;
    Ok(cell)
}

/// `sweep-participation`: one cell per n in `n_list`.
pub fn cmd_sweep_participation(
    cfg: ExperimentConfig,
    n_list: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<CellOutcome>> {
    if n_list.is_empty() {
        return Err(Error::validation("n_list must not be empty"));
    }
    let exp = Experiment::prepare(cfg)?;
    let mut cells = Vec::new();
    for &n in n_list {
        cells.push(run_cell(&exp, CellAlgo::Cfl { active: n })?);
    }
    if let Some(dir) = out_dir {
        write_outputs(&exp.config, dir, &cells, Vec::new())?;
    }
    Ok(cells)
}

/// `sweep-topology`: one cell per topology kind.
pub fn cmd_sweep_topology(
    cfg: ExperimentConfig,
    kinds: &[TopologyKind],
    out_dir: Option<&Path>,
) -> Result<Vec<CellOutcome>> {
    if kinds.is_empty() {
        return Err(Error::validation("kinds must not be empty"));
    }
    let exp = Experiment::prepare(cfg)?;
    let mut cells = Vec::new();
    for &kind in kinds {
        cells.push(run_cell(&exp, CellAlgo::Dfl { kind })?);
    }
    if let Some(dir) = out_dir {
        write_outputs(&exp.config, dir, &cells, Vec::new())?;
    }
    Ok(cells)
}

/// Direction of the median gap across increasing m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Increasing,
    Decreasing,
    Mixed,
    Undefined,
}

pub fn trend_of(medians: &[f64]) -> Trend {
    if medians.len() < 2 {
        return Trend::Undefined;
    }
    let inc = medians.windows(2).all(|w| w[1] >= w[0]);
    let dec = medians.windows(2).all(|w| w[1] <= w[0]);
    match (inc, dec) {
        (true, false) => Trend::Increasing,
        (false, true) => Trend::Decreasing,
        _ => Trend::Mixed,
    }
}

#[derive(Debug, Serialize)]
pub struct CollapseRow {
    pub kind: String,
    pub m_values: Vec<usize>,
    pub medians: Vec<f64>,
    pub trend: Trend,
    pub collapse: Vec<CollapseCheck>,
}

/// `collapse`: per (kind, m) cell at fixed per-client S, with the trend
/// verdict per kind.
pub fn cmd_collapse(
    cfg: ExperimentConfig,
    kinds: &[TopologyKind],
    m_list: &[usize],
    fixed_s: usize,
    out_dir: Option<&Path>,
) -> Result<(Vec<CellOutcome>, Vec<CollapseRow>)> {
    if m_list.is_empty() || kinds.is_empty() {
        return Err(Error::validation("m_list and kinds must not be empty"));
    }
    // Validate shape constraints up front so we fail before any long run.
    for &kind in kinds {
        for &m in m_list {
            MixingMatrix::build(kind, m)?;
        }
    }
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut last_config = None;
    for &kind in kinds {
        let mut medians = Vec::new();
        let mut checks = Vec::new();
        for &m in m_list {
            let exp = Experiment::prepare_with(cfg.clone(), Some(m), Some(fixed_s))?;
            let cell = run_cell(&exp, CellAlgo::Dfl { kind })?;
            medians.push(cell.loss_gap.median);
            checks.push(cell.collapse.expect("dfl cell has a collapse check"));
            cells.push(cell);
            last_config = Some(exp.config);
        }
        let trend = trend_of(&medians);
        rows.push(CollapseRow {
            kind: kind.name().to_string(),
            m_values: m_list.to_vec(),
            medians,
            trend,
            collapse: checks,
        });
    }
    if let (Some(dir), Some(config)) = (out_dir, last_config) {
        let rows_json = serde_json::to_string_pretty(&rows).expect("rows serialize");
        write_outputs(&config, dir, &cells, vec![("collapse.json".into(), rows_json)])?;
    }
    Ok((cells, rows))
}
