use clap::{Args, Parser, Subcommand};
use fedstab::error::Error;
use fedstab::experiment::{
    cmd_collapse, cmd_run, cmd_sweep_participation, cmd_sweep_topology, ExperimentConfig,
};
use fedstab::stability::collapse_check;
use fedstab::topology::{MixingMatrix, TopologyKind, CONTRACTION_TOL};
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "fedstab",
    about = "Stability and generalization measurements for centralized and decentralized FL",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRun {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override stability.seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Bound the worker pool.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a topology and print its spectral report.
    Topology {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        m: usize,
        /// Alpha for kappa_lambda (default 0.5).
        #[arg(long)]
        alpha: Option<f64>,
        /// Rounds for the contraction check.
        #[arg(long, default_value_t = 50)]
        t_max: usize,
        /// Also write the matrix CSV and the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured experiment cell and write traces + reports.
    Run(CommonRun),
    /// One cell per participation count.
    SweepParticipation {
        #[command(flatten)]
        common: CommonRun,
        /// Comma-separated active-client counts.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
    },
    /// One cell per topology kind.
    SweepTopology {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long, value_delimiter = ',', required = true)]
        kinds: Vec<String>,
    },
    /// Grow m at fixed per-client S and report gap trends per topology.
    Collapse {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long, value_delimiter = ',', required = true)]
        m_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        kinds: Vec<String>,
        #[arg(long)]
        fixed_s: usize,
    },
}

fn load_config(common: &CommonRun) -> Result<ExperimentConfig, Error> {
    if let Some(n) = common.threads {
        fedstab::par::set_threads(n);
    }
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seeds) = common.seeds {
        cfg.stability.seeds = seeds;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn out_dir(common: &CommonRun, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_kinds(kinds: &[String]) -> Result<Vec<TopologyKind>, Error> {
    kinds.iter().map(|k| TopologyKind::from_str(k)).collect()
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Topology {
            kind,
            m,
            alpha,
            t_max,
            out,
        } => {
            let kind = TopologyKind::from_str(&kind)?;
            let alpha = alpha.unwrap_or(0.5);
            let matrix = MixingMatrix::build(kind, m)?;
            let report = matrix.report(alpha)?;
            let contraction = matrix.contraction_check(t_max)?;
            let collapse = collapse_check(report.kappa_lambda, m);
            let payload = serde_json::json!({
                "kind": report.kind,
                "m": report.m,
                "lambda": report.lambda,
                "kappa_lambda": report.kappa_lambda,
                "alpha": report.alpha,
                "collapse": collapse,
                "contraction": {
                    "t_max": t_max,
                    "max_excess": contraction.max_excess(),
                    "pass": contraction.holds(CONTRACTION_TOL),
                },
            });
            let text = serde_json::to_string_pretty(&payload).expect("report serializes");
            println!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(format!("{kind}_{m}.csv")), matrix.to_csv())?;
                std::fs::write(dir.join(format!("{kind}_{m}.json")), text)?;
            }
            Ok(())
        }
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let cell = cmd_run(cfg, &dir)?;
            println!(
                "wrote {} (median delta/m {:.3e}, bound {:.3e})",
                dir.display(),
                cell.delta_over_m.median,
                cell.bound.epsilon
            );
            Ok(())
        }
        Command::SweepParticipation { common, n_list } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let cells = cmd_sweep_participation(cfg, &n_list, Some(&dir))?;
            for c in &cells {
                println!(
                    "n={:3} median_gap={:.4e} bound={:.4e}",
                    c.n.unwrap_or(0),
                    c.proxy_gap.median,
                    c.bound.epsilon
                );
            }
            Ok(())
        }
        Command::SweepTopology { common, kinds } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let cells = cmd_sweep_topology(cfg, &parse_kinds(&kinds)?, Some(&dir))?;
            for c in &cells {
                println!(
                    "{:5} lambda={:.4} kappa={:.4} median_gap={:.4e} bound={:.4e}",
                    c.topology.as_deref().unwrap_or("?"),
                    c.lambda.unwrap_or(f64::NAN),
                    c.kappa_lambda.unwrap_or(f64::NAN),
                    c.proxy_gap.median,
                    c.bound.epsilon
                );
            }
            Ok(())
        }
        Command::Collapse {
            common,
            m_list,
            kinds,
            fixed_s,
        } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&common, &cfg);
            let (_cells, rows) = cmd_collapse(cfg, &parse_kinds(&kinds)?, &m_list, fixed_s, Some(&dir))?;
            for row in &rows {
                println!(
                    "{:5} m={:?} medians={:?} trend={:?}",
                    row.kind, row.m_values, row.medians, row.trend
                );
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
