//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured runtime. Tolerances are pinned in code.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use fedstab::data::{
    dirichlet_partition, generate_synthetic_scaled, make_identical_neighbor, make_neighbor,
};
use fedstab::engine::{
    run, run_coupled, touch_schedule, Algo, Schedule, TouchAlgo, TrainConfig,
};
use fedstab::experiment::{run_cell, CellAlgo, Experiment, ExperimentConfig};
use fedstab::model::{dist, norm, Model, ModelFamily, ModelSpec};
use fedstab::par;
use fedstab::rng::{CounterRng, Purpose};
use fedstab::topology::{kappa_lambda, MixingMatrix, TopologyKind, CONTRACTION_TOL};
use std::time::Instant;

fn pass(criterion: usize, name: &str, started: Instant, detail: String) {
    println!(
        "ACCEPTANCE {criterion} {name}: PASS ({:.1} s) {detail}",
        started.elapsed().as_secs_f64()
    );
}

/// Criterion 1: every builder, every valid m <= 256 — symmetry, row/column
/// sums within 1e-12, eigenvalues in (-1, 1], and the contraction bound
/// ||A^t - P||_op <= lambda^t + 1e-10 for t <= 50.
#[test]
fn c1_topology_suite() {
    let started = Instant::now();
    let mut jobs: Vec<(TopologyKind, usize)> = Vec::new();
    for m in 2..=256usize {
        jobs.push((TopologyKind::Full, m));
    }
    for m in 3..=256usize {
        jobs.push((TopologyKind::Ring, m));
        jobs.push((TopologyKind::Star, m));
        jobs.push((TopologyKind::Exp, m));
    }
    for q in 2..=16usize {
        jobs.push((TopologyKind::Grid, q * q));
    }
    let count = jobs.len();

    let failures: Vec<String> = par::map_jobs(jobs, |(kind, m)| {
        let a = match MixingMatrix::build(kind, m) {
            Ok(a) => a,
            Err(e) => return Some(format!("{kind} m={m}: build failed: {e}")),
        };
        // build() already validates; run the checks explicitly anyway.
        if let Err(e) = a.validate() {
            return Some(format!("{kind} m={m}: {e}"));
        }
        match a.contraction_check(50) {
            Ok(report) => (!report.holds(CONTRACTION_TOL))
                .then(|| format!("{kind} m={m}: contraction excess {}", report.max_excess())),
            Err(e) => Some(format!("{kind} m={m}: {e}")),
        }
    })
    .into_iter()
    .flatten()
    .collect();

    assert!(failures.is_empty(), "violations: {failures:?}");
    pass(1, "topology suite", started, format!("{count} matrices, t <= 50"));
}

/// Criterion 2: numerical dominance of kappa_lambda over the partial sums
/// sum_{s<t} lambda^(t-s-1)/(s+1)^alpha on the 9 x 9 x 200 grid, zero
/// violations.
#[test]
fn c2_kappa_dominance() {
    let started = Instant::now();
    let mut checked = 0usize;
    for li in 1..=9usize {
        for ai in 1..=9usize {
            let lambda = li as f64 / 10.0;
            let alpha = ai as f64 / 10.0;
            let kappa = kappa_lambda(lambda, alpha).unwrap();
            // lhs(t) = sum_{s=0}^{t-1} lambda^(t-1-s) / (s+1)^alpha obeys
            // lhs(t+1) = lambda * lhs(t) + 1/(t+1)^alpha.
            let mut lhs = 0.0f64;
            for t in 1..=200u32 {
                lhs = lambda * lhs + 1.0 / (t as f64).powf(alpha);
                let rhs = kappa / (t as f64).powf(alpha);
                assert!(
                    lhs <= rhs,
                    "violation at lambda={lambda} alpha={alpha} t={t}: {lhs} > {rhs}"
                );
                checked += 1;
            }
        }
    }
    pass(2, "kappa dominance", started, format!("{checked} grid points"));
}

/// Criterion 3: zero-perturbation twins are bitwise identical, and CFL at
/// n = m equals DFL on the full topology bitwise under shared seeds.
#[test]
fn c3_coupled_exactness() {
    let started = Instant::now();
    let pool = generate_synthetic_scaled(6, 3, 256, 11, 0.4).unwrap();
    let fed = dirichlet_partition(&pool, 8, 0.3, 5).unwrap();
    let model = Model::new(ModelSpec {
        family: ModelFamily::Logistic,
        d: 6,
        classes: 3,
        hidden: 0,
        weight_decay: 0.01,
    })
    .unwrap();
    let cfg = TrainConfig {
        rounds: 20,
        local_steps: 3,
        mu: 0.2,
        master_seed: 42,
        ..TrainConfig::default()
    };

    // Zero perturbation: Delta identically zero, bitwise.
    let (twin, pert) = make_identical_neighbor(&fed, 3, 7).unwrap();
    let out = run_coupled(&fed, &twin, &pert, &model, Algo::Cfl { active: 4 }, &cfg).unwrap();
    assert!(out.coupled.deltas.iter().all(|&d| d == 0.0));
    assert_eq!(out.a.final_model, out.b.final_model);

    // Equivalence: CFL n = m vs DFL full on the same seeds, bitwise.
    let full = MixingMatrix::build(TopologyKind::Full, 8).unwrap();
    for seed in [42u64, 43, 44] {
        let c = TrainConfig {
            master_seed: seed,
            ..cfg
        };
        let a = run(&fed, &model, Algo::Cfl { active: 8 }, &c).unwrap();
        let b = run(&fed, &model, Algo::Dfl { matrix: &full }, &c).unwrap();
        assert_eq!(
            a.final_model, b.final_model,
            "CFL n=m and DFL full diverged at seed {seed}"
        );
    }
    pass(3, "coupled exactness", started, "zero-twin + full equivalence".into());
}

/// Criterion 4: same-sample contraction, different-sample inequality, and
/// aggregation non-expansiveness at every logged step of a 20-seed run on
/// the quadratic tier, tolerance 1e-10.
#[test]
fn c4_step_inequality_checks() {
    let started = Instant::now();
    let pool = generate_synthetic_scaled(6, 3, 256, 9, 0.4).unwrap();
    let fed = dirichlet_partition(&pool, 8, 0.3, 7).unwrap();
    let model = Model::new(ModelSpec {
        family: ModelFamily::Quadratic,
        d: 6,
        classes: 3,
        hidden: 0,
        weight_decay: 0.05,
    })
    .unwrap();
    let l = model.exact_smoothness(&fed).unwrap();
    let ring = MixingMatrix::build(TopologyKind::Ring, 8).unwrap();
    let tol = 1e-10;
    let mut steps_checked = 0usize;
    let mut rounds_checked = 0usize;

    for seed in 0..20u64 {
        let cfg = TrainConfig {
            rounds: 25,
            local_steps: 3,
            mu: 1.0 / l,
            master_seed: 1000 + seed,
            record_steps: true,
            ..TrainConfig::default()
        };
        let (neighbor, pert) = make_neighbor(&fed, (seed % 8) as usize, 2, seed).unwrap();
        // CFL runs at full participation, where averaging is pointwise
        // non-expansive (partial participation only bounds it in
        // expectation over the selection).
        for algo in [Algo::Cfl { active: 8 }, Algo::Dfl { matrix: &ring }] {
            let out = run_coupled(&fed, &neighbor, &pert, &model, algo, &cfg).unwrap();
            let mut sigma_hat = 0.0f64;
            for s in out.coupled.steps.as_ref().unwrap() {
                if s.perturbed {
                    sigma_hat = sigma_hat.max(s.pair_grad_gap / 2.0);
                }
            }
            for s in out.coupled.steps.as_ref().unwrap() {
                let factor = 1.0 + s.eta * l;
                if s.perturbed {
                    assert!(
                        s.dist_after <= factor * s.dist_before + 2.0 * s.eta * sigma_hat + tol,
                        "different-sample violation at tau {} (seed {seed})",
                        s.tau
                    );
                } else {
                    assert!(
                        s.dist_after <= factor * s.dist_before + tol,
                        "same-sample violation at tau {} client {} (seed {seed}): {} > {}",
                        s.tau,
                        s.client,
                        s.dist_after,
                        factor * s.dist_before
                    );
                }
                steps_checked += 1;
            }
            for b in &out.coupled.boundaries {
                assert!(
                    b.delta_start_next <= b.delta_end + tol,
                    "aggregation expansion at round {} (seed {seed}): {} > {}",
                    b.round,
                    b.delta_start_next,
                    b.delta_end
                );
                rounds_checked += 1;
            }
        }
    }
    pass(
        4,
        "step inequality checks",
        started,
        format!("{steps_checked} steps, {rounds_checked} boundaries"),
    );
}

/// Criterion 5: the expected number of draws of the perturbed sample before
/// iteration tau0 is n tau0 / (m S) for CFL and tau0 / S for DFL; check the
/// empirical mean within 3 standard errors over >= 500 seeds, and the
/// first-touch frequency against the union bound.
#[test]
fn c5_sampling_probability() {
    let started = Instant::now();
    let (m, s) = (8usize, 32usize);
    let seeds = 4000u64;
    let cfg = TrainConfig {
        rounds: 50,
        local_steps: 1,
        ..TrainConfig::default()
    };
    let mut cells = 0;
    for (algo, n) in [
        (TouchAlgo::Cfl { active: 2 }, 2usize),
        (TouchAlgo::Cfl { active: 8 }, 8),
        (TouchAlgo::Dfl, m),
    ] {
        for tau0 in [10u64, 50] {
            let counts: Vec<f64> = (0..seeds)
                .map(|seed| {
                    let c = TrainConfig {
                        master_seed: 90_000 + seed,
                        ..cfg
                    };
                    touch_schedule(m, s, algo, &c, 3, 17)
                        .iter()
                        .filter(|&&t| t <= tau0)
                        .count() as f64
                })
                .collect();
            let nda = seeds as f64;
            let mean = counts.iter().sum::<f64>() / nda;
            let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (nda - 1.0);
            let se = (var / nda).sqrt();
            let expect = n as f64 * tau0 as f64 / (m as f64 * s as f64);
            assert!(
                (mean - expect).abs() <= 3.0 * se,
                "expected touch count {expect}, got {mean} +- {se} (n={n}, tau0={tau0})"
            );
            // Union bound on the first-touch indicator.
            let freq = counts.iter().filter(|&&c| c > 0.0).count() as f64 / nda;
            let se_freq = (freq * (1.0 - freq) / nda).sqrt();
            assert!(
                freq <= expect + 3.0 * se_freq,
                "first-touch frequency {freq} exceeds union bound {expect}"
            );
            cells += 1;
        }
    }
    pass(5, "sampling probability", started, format!("{cells} cells x {seeds} seeds"));
}

fn base_config(toml: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(toml).expect("valid acceptance config")
}

/// Criterion 6: on the quadratic tier the evaluated bounds dominate the
/// seed-averaged G_est * ||w^T - w~^T|| in every cell of a 3 x 3 design, for
/// both the participation and topology bound forms.
#[test]
fn c6_bound_soundness() {
    let started = Instant::now();
    let mut cells_checked = 0usize;
    for s_per_client in [16usize, 32, 64] {
        let total = 8 * s_per_client;
        let cfg = base_config(&format!(
            r#"
schema_version = 1
[data]
d = 6
classes = 3
clients = 8
total = {total}
beta = 0.3
seed = 21
noise_std = 0.4
[model]
family = "quadratic"
weight_decay = 0.05
[train]
rounds = 30
local_steps = 2
[train.cfl]
active = 2
[stability]
seeds = 20
perturbations = 1
probe_count = 128
base_seed = 7000
"#
        ));
        let exp = Experiment::prepare(cfg).unwrap();
        for algo in [
            CellAlgo::Cfl { active: 2 },
            CellAlgo::Cfl { active: 4 },
            CellAlgo::Cfl { active: 8 },
            CellAlgo::Dfl {
                kind: TopologyKind::Full,
            },
            CellAlgo::Dfl {
                kind: TopologyKind::Exp,
            },
            CellAlgo::Dfl {
                kind: TopologyKind::Ring,
            },
        ] {
            let cell = run_cell(&exp, algo).unwrap();
            assert!(
                cell.bound.epsilon >= cell.proxy_gap.mean,
                "bound {} below empirical proxy {} in cell {:?} S={s_per_client}",
                cell.bound.epsilon,
                cell.proxy_gap.mean,
                algo
            );
            cells_checked += 1;
        }
    }
    assert_eq!(cells_checked, 18);
    pass(6, "bound soundness", started, "18 cells x 20 seeds".into());
}

/// Shared logistic-tier trend config: constant step size in the local
/// overshoot regime, binary classes with heavy overlap so per-sample
/// gradients never saturate. The measured gap statistic is the median of
/// the worst per-client final gap; in a serverless run the per-client
/// models are the deployed ones, and the averaged-model gap is invariant
/// under mixing and therefore blind to the topology at this scale.
fn trend_config(
    clients: usize,
    rounds: usize,
    mu: f64,
    seeds: usize,
    perturbations: usize,
    s_per_client: usize,
) -> ExperimentConfig {
    let total = clients * s_per_client;
    base_config(&format!(
        r#"
schema_version = 1
[data]
d = 10
classes = 2
clients = {clients}
total = {total}
beta = 0.1
seed = 7
noise_std = 1.2
[model]
family = "logistic"
weight_decay = 0.01
[train]
rounds = {rounds}
local_steps = 5
mu = {mu}
schedule = "constant"
[train.cfl]
active = 1
[stability]
seeds = {seeds}
perturbations = {perturbations}
probe_count = 256
base_seed = 3000
"#
    ))
}

fn median_gap(exp: &Experiment, algo: CellAlgo) -> f64 {
    run_cell(exp, algo).unwrap().worst_client_gap.median
}

/// Criterion 7a: empirical gap strictly increasing over
/// n in {1, ceil(m^(2/3)), m} at m = 16 (median over >= 20 seeds x 2
/// positions; ties rerun at doubled seeds).
#[test]
fn c7a_participation_trend() {
    let started = Instant::now();
    let n_list = [1usize, 7, 16];
    let run_at = |seeds: usize| -> Vec<f64> {
        let exp = Experiment::prepare(trend_config(16, 60, 0.3, seeds, 2, 32)).unwrap();
        n_list
            .iter()
            .map(|&n| median_gap(&exp, CellAlgo::Cfl { active: n }))
            .collect()
    };
    let mut meds = run_at(24);
    if !(meds[0] < meds[1] && meds[1] < meds[2]) {
        meds = run_at(48);
    }
    assert!(
        meds[0] < meds[1] && meds[1] < meds[2],
        "participation trend not strictly increasing: {meds:?}"
    );
    pass(7, "trend (a) participation", started, format!("medians {meds:?}"));
}

/// Criterion 7b: gap(full) <= gap(exp) <= gap(grid) <= gap(ring) at m = 16.
#[test]
fn c7b_topology_ordering() {
    let started = Instant::now();
    let kinds = [
        TopologyKind::Full,
        TopologyKind::Exp,
        TopologyKind::Grid,
        TopologyKind::Ring,
    ];
    let run_at = |seeds: usize| -> Vec<f64> {
        let exp = Experiment::prepare(trend_config(16, 60, 0.3, seeds, 2, 32)).unwrap();
        kinds
            .iter()
            .map(|&k| median_gap(&exp, CellAlgo::Dfl { kind: k }))
            .collect()
    };
    let mut meds = run_at(24);
    if !meds.windows(2).all(|w| w[0] <= w[1]) {
        meds = run_at(48);
    }
    assert!(
        meds.windows(2).all(|w| w[0] <= w[1]),
        "topology ordering violated: full/exp/grid/ring = {meds:?}"
    );
    pass(7, "trend (b) topology ordering", started, format!("medians {meds:?}"));
}

/// Criterion 7c: at fixed S = 64 and m in {9, 16, 25}, the gap decreases in
/// m for full/exp and increases for ring (ties rerun at doubled seeds).
///
/// The ring half of this criterion does not hold in this simulator: across
/// every configuration scanned during calibration the ring's measured gap
/// peaks at m = 16 and falls by m = 25 once medians are resolved beyond
/// noise (the per-sample influence of one perturbed point dilutes faster
/// than the topology coefficient grows at these scales). The check is kept
/// as specified rather than weakened, so this test documents the failure.
#[test]
fn c7c_collapse_trend() {
    let started = Instant::now();
    let m_list = [9usize, 16, 25];
    let gap_over_m = |kind: TopologyKind, seeds: usize| -> Vec<f64> {
        m_list
            .iter()
            .map(|&m| {
                let cfg = trend_config(m, 100, 0.5, seeds, 16, 64);
                let exp = Experiment::prepare_with(cfg, Some(m), Some(64)).unwrap();
                median_gap(&exp, CellAlgo::Dfl { kind })
            })
            .collect()
    };
    let mut failures = Vec::new();
    for kind in [TopologyKind::Full, TopologyKind::Exp] {
        let mut meds = gap_over_m(kind, 24);
        if !meds.windows(2).all(|w| w[1] <= w[0]) {
            meds = gap_over_m(kind, 48);
        }
        println!("  7c {kind} medians over m {m_list:?}: {meds:?}");
        if !meds.windows(2).all(|w| w[1] <= w[0]) {
            failures.push(format!("{kind}: gap not decreasing in m: {meds:?}"));
        }
    }
    {
        let mut meds = gap_over_m(TopologyKind::Ring, 24);
        if !meds.windows(2).all(|w| w[1] >= w[0]) {
            meds = gap_over_m(TopologyKind::Ring, 48);
        }
        println!("  7c ring medians over m {m_list:?}: {meds:?}");
        if !meds.windows(2).all(|w| w[1] >= w[0]) {
            failures.push(format!("ring: gap not increasing in m: {meds:?}"));
        }
    }
    if failures.is_empty() {
        pass(7, "trend (c) collapse", started, "full/exp down, ring up".into());
    } else {
        println!(
            "ACCEPTANCE 7 trend (c) collapse: FAIL ({:.1} s) {failures:?}",
            started.elapsed().as_secs_f64()
        );
        panic!("collapse trend not reproduced: {failures:?}");
    }
}

/// Criterion 8: central finite differences agree with analytic gradients at
/// 1e-5 relative tolerance, 100 probes per model family.
#[test]
fn c8_gradient_correctness() {
    let started = Instant::now();
    let specs = [
        ModelSpec {
            family: ModelFamily::Quadratic,
            d: 6,
            classes: 3,
            hidden: 0,
            weight_decay: 0.05,
        },
        ModelSpec {
            family: ModelFamily::Logistic,
            d: 6,
            classes: 2,
            hidden: 0,
            weight_decay: 0.01,
        },
        ModelSpec {
            family: ModelFamily::Logistic,
            d: 6,
            classes: 5,
            hidden: 0,
            weight_decay: 0.01,
        },
        ModelSpec {
            family: ModelFamily::Mlp,
            d: 6,
            classes: 3,
            hidden: 8,
            weight_decay: 0.01,
        },
    ];
    let eps = 1e-4;
    for spec in specs {
        let model = Model::new(spec).unwrap();
        let p = model.param_dim();
        for probe in 0..100u64 {
            let mut rng = CounterRng::new(500 + probe, Purpose::Probe, probe, 3);
            let w: Vec<f64> = (0..p).map(|_| 0.6 * rng.next_normal()).collect();
            let x: Vec<f64> = (0..spec.d).map(|_| rng.next_normal()).collect();
            let y = rng.index(spec.classes);
            let grad = model.grad(&w, &x, y);
            let dir: Vec<f64> = {
                let raw: Vec<f64> = (0..p).map(|_| rng.next_normal()).collect();
                let n = norm(&raw);
                raw.into_iter().map(|v| v / n).collect()
            };
            let wp: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + eps * b).collect();
            let wm: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a - eps * b).collect();
            let fd = (model.loss(&wp, &x, y) - model.loss(&wm, &x, y)) / (2.0 * eps);
            let analytic: f64 = grad.iter().zip(&dir).map(|(g, u)| g * u).sum();
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((fd - analytic).abs() / denom) < 1e-5,
                "family {:?} probe {probe}: fd {fd} vs analytic {analytic}",
                spec.family
            );
        }
    }
    pass(8, "gradient correctness", started, "4 families x 100 probes".into());
}

/// Sanity link between the two gap statistics reported everywhere:
/// ||w^T - w~^T|| <= Delta_K^T / m at the final round.
#[test]
fn final_gap_bounded_by_delta_over_m() {
    let pool = generate_synthetic_scaled(6, 3, 256, 3, 0.4).unwrap();
    let fed = dirichlet_partition(&pool, 8, 0.3, 2).unwrap();
    let model = Model::new(ModelSpec {
        family: ModelFamily::Quadratic,
        d: 6,
        classes: 3,
        hidden: 0,
        weight_decay: 0.01,
    })
    .unwrap();
    let ring = MixingMatrix::build(TopologyKind::Ring, 8).unwrap();
    for seed in 0..10u64 {
        let cfg = TrainConfig {
            rounds: 20,
            local_steps: 2,
            mu: 0.3,
            master_seed: seed,
            ..TrainConfig::default()
        };
        let (neighbor, pert) = make_neighbor(&fed, 1, 3, seed).unwrap();
        for algo in [Algo::Cfl { active: 8 }, Algo::Dfl { matrix: &ring }] {
            let out = run_coupled(&fed, &neighbor, &pert, &model, algo, &cfg).unwrap();
            let delta_over_m = out.coupled.deltas.last().unwrap() / 8.0;
            assert!(
                out.coupled.final_gap <= delta_over_m + 1e-12,
                "final gap {} above delta/m {}",
                out.coupled.final_gap,
                delta_over_m
            );
            let check = dist(&out.a.final_model, &out.b.final_model);
            assert!((check - out.coupled.final_gap).abs() < 1e-15);
        }
    }
}

#[test]
fn engine_schedules_match_definitions() {
    // Constant vs inverse-iteration schedules must differ exactly as the
    // step-size law says; quick guard that the config plumbing is wired.
    let pool = generate_synthetic_scaled(4, 2, 64, 3, 0.4).unwrap();
    let fed = dirichlet_partition(&pool, 2, 0.5, 2).unwrap();
    let model = Model::new(ModelSpec {
        family: ModelFamily::Quadratic,
        d: 4,
        classes: 2,
        hidden: 0,
        weight_decay: 0.0,
    })
    .unwrap();
    let base = TrainConfig {
        rounds: 3,
        local_steps: 2,
        mu: 0.1,
        master_seed: 9,
        ..TrainConfig::default()
    };
    let decayed = run(&fed, &model, Algo::Cfl { active: 2 }, &base).unwrap();
    let constant = run(
        &fed,
        &model,
        Algo::Cfl { active: 2 },
        &TrainConfig {
            schedule: Schedule::Constant,
            ..base
        },
    )
    .unwrap();
    assert_ne!(decayed.final_model, constant.final_model);
}
