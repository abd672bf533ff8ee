//! Scan candidate trend configurations and print the medians each
//! acceptance sub-test would compare.
//!
//! Usage: trend_scan [rounds] [mu] [noise] [seeds] [local_steps] [wd] [beta] [perturbations]

use fedstab::experiment::{run_cell, CellAlgo, Experiment, ExperimentConfig};
use fedstab::topology::TopologyKind;

fn config(
    clients: usize,
    total: usize,
    rounds: usize,
    seeds: usize,
    mu: f64,
    noise: f64,
    local_steps: usize,
    wd: f64,
    beta: f64,
    perturbations: usize,
    data_seed: u64,
    classes: usize,
) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
schema_version = 1
[data]
d = 10
classes = {classes}
clients = {clients}
total = {total}
beta = {beta}
seed = {data_seed}
noise_std = {noise}
[model]
family = "logistic"
weight_decay = {wd}
[train]
rounds = {rounds}
local_steps = {local_steps}
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
    .unwrap()
}

fn main() {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric args"))
        .collect();
    let rounds = *args.first().unwrap_or(&60.0) as usize;
    let mu = *args.get(1).unwrap_or(&0.3);
    let noise = *args.get(2).unwrap_or(&1.2);
    let seeds = *args.get(3).unwrap_or(&24.0) as usize;
    let local_steps = *args.get(4).unwrap_or(&5.0) as usize;
    let wd = *args.get(5).unwrap_or(&0.01);
    let beta = *args.get(6).unwrap_or(&0.1);
    let perturbations = *args.get(7).unwrap_or(&2.0) as usize;
    let data_seed = *args.get(8).unwrap_or(&7.0) as u64;
    let classes = *args.get(9).unwrap_or(&2.0) as usize;
    println!(
        "rounds={rounds} mu={mu} noise={noise} seeds={seeds} K={local_steps} wd={wd} beta={beta} perts={perturbations} dseed={data_seed} C={classes}"
    );

    let stats = |exp: &Experiment, algo: CellAlgo| {
        let cell = run_cell(exp, algo).unwrap();
        (cell.loss_gap.median, cell.delta_over_m.median, cell.worst_client_gap.median)
    };

    println!("-- 7a participation (m=16, S=32) --");
    let exp = Experiment::prepare(config(16, 512, rounds, seeds, mu, noise, local_steps, wd, beta, perturbations, data_seed, classes))
        .unwrap();
    for n in [1usize, 7, 16] {
        let (lg, dm, fg) = stats(&exp, CellAlgo::Cfl { active: n });
        println!("  n={n:2}  loss_gap={lg:.4e} delta/m={dm:.4e} worst_client={fg:.4e}");
    }

    println!("-- 7b topology (m=16, S=32) --");
    for kind in [
        TopologyKind::Full,
        TopologyKind::Exp,
        TopologyKind::Grid,
        TopologyKind::Ring,
    ] {
        let (lg, dm, fg) = stats(&exp, CellAlgo::Dfl { kind });
        println!("  {kind:5}  loss_gap={lg:.4e} delta/m={dm:.4e} worst_client={fg:.4e}");
    }

    println!("-- 7c collapse (S=64, m in 9/16/25) --");
    for kind in [TopologyKind::Full, TopologyKind::Exp, TopologyKind::Ring] {
        let mut line = format!("  {kind:5}");
        for m in [9usize, 16, 25] {
            let cfg = config(m, 64 * m, rounds, seeds, mu, noise, local_steps, wd, beta, perturbations, data_seed, classes);
            let exp = Experiment::prepare_with(cfg, Some(m), Some(64)).unwrap();
            let (lg, dm, wc) = stats(&exp, CellAlgo::Dfl { kind });
            line.push_str(&format!("  m={m:2}: loss={lg:.3e} delta={dm:.3e} worst={wc:.3e}"));
        }
        println!("{line}");
    }
}
