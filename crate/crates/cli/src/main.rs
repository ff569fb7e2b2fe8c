use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dcbf::barriernet::{self, PolicyNetwork};
use dcbf::config::{Config, PolicyMode};
use dcbf::harness::{self, BarrierNetPolicy, NoiseChannel};
use dcbf::nominal_mpc;
use dcbf::scenario::{Scenario, ScenarioDistribution};

#[derive(Parser)]
#[command(name = "dcbf", version, about = "Differentiable CBF driving policies")]
struct Cli {
    /// master seed for data generation, training and evaluation
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML (or .json) run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Estimated,
    NoCbf,
}

impl From<Mode> for PolicyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Exact => PolicyMode::Exact,
            Mode::Estimated => PolicyMode::Estimated,
            Mode::NoCbf => PolicyMode::NoCbf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Distribution {
    Obstacle,
    LaneKeeping,
    /// `eval_distribution` from the config file
    Config,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations into dataset.csv
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a network; writes model.json and loss.csv
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Closed-loop rollout of one scenario; writes rollout.jsonl
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Monte-Carlo evaluation; writes metrics.json
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "config")]
        distribution: Distribution,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Crash rate against the noise level of one channel; writes sweep.csv
    SweepNoise {
        #[arg(long)]
        model: PathBuf,
        /// d, mu, ds or dobs
        #[arg(long)]
        channel: NoiseChannel,
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
        #[arg(long, value_enum, default_value = "config")]
        distribution: Distribution,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn distribution(cfg: &Config, d: Distribution) -> ScenarioDistribution {
    match d {
        Distribution::Obstacle => ScenarioDistribution::obstacle_avoidance(),
        Distribution::LaneKeeping => ScenarioDistribution::lane_keeping(),
        Distribution::Config => cfg.eval_distribution.clone(),
    }
}

fn load_model(path: &Path) -> Result<PolicyNetwork> {
    PolicyNetwork::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = |name: &str| cli.out.join(name);

    match cli.command {
        Command::GenData { episodes } => {
            if let Some(n) = episodes {
                cfg.dataset.episodes = n;
            }
            cfg.validate()?;
            let data = nominal_mpc::generate_dataset(&cfg.dataset, &cfg.mpc, &cfg.vehicle)?;
            let path = out("dataset.csv");
            nominal_mpc::write_dataset_csv(&path, &data)?;
            info!(
                "{} samples from {} episodes ({} rejected, {} labels filtered)",
                data.samples.len(),
                data.stats.episodes,
                data.stats.rejected,
                data.stats.filtered_labels
            );
            println!("{}", path.display());
        }
        Command::Train { data, epochs } => {
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            cfg.validate()?;
            let data = nominal_mpc::read_dataset_csv(&data).with_context(|| format!("reading {}", data.display()))?;
            if data.n_slots != cfg.network.n_slots {
                bail!("dataset has {} slots, network expects {}", data.n_slots, cfg.network.n_slots);
            }
            let mut net = PolicyNetwork::new(cfg.network.clone(), cfg.train.seed)?;
            let report = barriernet::train(&data.samples, &mut net, &cfg.train, &cfg.vehicle)?;
            info!(
                "loss {:.4} -> {:.4} over {} epochs ({} QP-infeasible evaluations skipped)",
                report.initial_mean, report.final_mean, cfg.train.epochs, report.skipped
            );
            net.save(&out("model.json"))?;
            barriernet::write_loss_csv(&out("loss.csv"), &report.records)?;
            println!("{}", out("model.json").display());
        }
        Command::Rollout { model, scenario, mode, max_steps } => {
            let net = load_model(&model)?;
            let scenario = Scenario::from_file(&scenario).with_context(|| format!("loading scenario {}", scenario.display()))?;
            if scenario.n_slots != net.config.n_slots {
                bail!("scenario has {} slots, network expects {}", scenario.n_slots, net.config.n_slots);
            }
            let mode = mode.map_or(cfg.policy, PolicyMode::from);
            let policy = BarrierNetPolicy { net: &net, options: mode.options(cfg.train.qp) };
            let mut rc = cfg.eval.rollout.clone();
            if let Some(n) = max_steps {
                rc.max_steps = n;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            let result = harness::rollout(&policy, &scenario, &rc, &cfg.vehicle, &mut rng)?;
            let path = out("rollout.jsonl");
            harness::write_rollout_jsonl(BufWriter::new(File::create(&path)?), &result)?;
            if let Some(e) = result.terminal() {
                info!("terminated at step {}: {:?}", e.step, e.kind);
            }
            println!("{}", path.display());
        }
        Command::Eval { model, distribution: d, episodes, mode } => {
            let net = load_model(&model)?;
            let dist = distribution(&cfg, d);
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            let mode = mode.map_or(cfg.policy, PolicyMode::from);
            let policy = BarrierNetPolicy { net: &net, options: mode.options(cfg.train.qp) };
            let metrics = harness::evaluate(&policy, &dist, &cfg.eval, &cfg.vehicle)?;
            info!("crash rate {:.4} over {} episodes", metrics.crash_rate, metrics.episodes);
            write_json(&out("metrics.json"), &metrics)?;
            println!("{}", out("metrics.json").display());
        }
        Command::SweepNoise { model, channel, sigmas, distribution: d, episodes, mode } => {
            let net = load_model(&model)?;
            let dist = distribution(&cfg, d);
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            let mode = mode.map_or(cfg.policy, PolicyMode::from);
            let policy = BarrierNetPolicy { net: &net, options: mode.options(cfg.train.qp) };
            let rows = harness::noise_sweep(&policy, &dist, channel, &sigmas, &cfg.eval, &cfg.vehicle)?;
            harness::write_sweep_csv(&out("sweep.csv"), &rows)?;
            println!("{}", out("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
