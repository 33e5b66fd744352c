use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlnfaith::agents::Architecture;
use vlnfaith::attribution::Method;
use vlnfaith::faitheval::{EvalConfig, KPolicy};
use vlnfaith::navworld::{DatasetConfig, SplitName, WorldConfig};
use vlnfaith::pipeline::{self, config_or_default, PipelineConfig, Result};
use vlnfaith::trainer::TrainConfig;

/// Faithfulness benchmark for token attributions of instruction-following
/// navigation agents.
#[derive(Parser)]
#[command(name = "vlnfaith", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one navigation graph.
    GenWorld {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// TOML file with world settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "world.json")]
        out: PathBuf,
    },
    /// Generate graphs, episodes and the train / val_seen / val_unseen split.
    GenData {
        /// TOML file with dataset settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imitation-train an agent on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        arch: Architecture,
        /// TOML file with training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        agent_seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate and SPL of greedy rollouts.
    EvalNav {
        #[command(flatten)]
        model: Model,
        #[arg(long = "split", default_values = ["val_seen", "val_unseen"])]
        splits: Vec<SplitName>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Erasure-based faithfulness benchmark of attribution methods.
    EvalFaith {
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        eval: EvalArgs,
        /// Minimum success rate on the gate split.
        #[arg(long, default_value_t = 0.8)]
        sr_gate: f64,
        #[arg(long, default_value = "val_seen")]
        gate_split: SplitName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Methods against oracle rationales on steps where the agent is on the expert path.
    CompareOracle {
        #[command(flatten)]
        model: Model,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG attribution heatmaps for one episode.
    Visualize {
        #[command(flatten)]
        model: Model,
        #[arg(long)]
        episode: String,
        #[arg(long = "method", value_delimiter = ',', default_values = ["va_att", "vec_norm", "va_grad", "grad_inp", "grad_cam", "ing_grad", "oracle"])]
        methods: Vec<Method>,
        #[arg(long)]
        eval_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark tables from aggregate files.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        stem: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole default pipeline: data, both agents, gate, benchmark, reports.
    RunAll {
        /// TOML pipeline configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Model {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// TOML file with evaluation settings.
    #[arg(long)]
    eval_config: Option<PathBuf>,
    /// Fixed top-k; defaults to the mean oracle rationale size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "split", default_values = ["val_seen", "val_unseen"])]
    splits: Vec<SplitName>,
    #[arg(long = "method", value_delimiter = ',', default_values = ["va_att", "vec_norm", "va_grad", "grad_inp", "grad_cam", "ing_grad", "random"])]
    methods: Vec<Method>,
}

impl EvalArgs {
    fn config(&self) -> Result<EvalConfig> {
        let mut cfg: EvalConfig = config_or_default(self.eval_config.as_deref())?;
        if let Some(k) = self.k {
            cfg.k = KPolicy::Fixed(k);
        }
        Ok(cfg)
    }
}

fn print_nav(metrics: &[pipeline::SplitMetrics]) {
    for m in metrics {
        println!("{:<11} SR {:.3}  SPL {:.3}  ({} episodes)", m.split.as_str(), m.metrics.sr, m.metrics.spl, m.metrics.episodes);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld { seed, config, out } => {
            let cfg: WorldConfig = config_or_default(config.as_deref())?;
            pipeline::gen_world(seed, &cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::GenData { config, seed, out } => {
            let mut cfg: DatasetConfig = config_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = pipeline::gen_data(&cfg, &out)?;
            for split in SplitName::ALL {
                println!("{:<11} {} episodes", split.as_str(), ds.episodes_in(split).len());
            }
            println!("wrote {}", out.display());
        }
        Command::Train { data, arch, config, agent_seed, epochs, learning_rate, out } => {
            let ds = pipeline::load_dataset(&data)?;
            let mut cfg = match config {
                Some(p) => pipeline::read_config(&p)?,
                None => TrainConfig::for_architecture(arch),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            let (agent, metrics) = pipeline::train(&ds, arch, agent_seed, &cfg, &out)?;
            print_nav(&metrics);
            println!("{} checkpoint in {}", agent.architecture(), out.join("checkpoint").display());
        }
        Command::EvalNav { model, splits, out } => {
            print_nav(&pipeline::eval_nav_checkpoint(&model.data, &model.checkpoint, &splits, &out)?);
        }
        Command::EvalFaith { model, eval, sr_gate, gate_split, out } => {
            let ds = pipeline::load_dataset(&model.data)?;
            let agent = pipeline::load_checkpoint_for(&ds, &model.checkpoint)?;
            let sr = pipeline::check_gate(&ds, &agent, gate_split, sr_gate)?;
            println!("{} SR on {} = {sr:.3} (gate {sr_gate:.2})", agent.architecture(), gate_split.as_str());
            let result = pipeline::eval_faith(&ds, &agent, &eval.splits, &eval.methods, &eval.config()?, &out)?;
            pipeline::write_report(&result.aggregates, &out, "report")?;
            pipeline::write_report(&result.oracle_aggregates, &out, "oracle_report")?;
            print!("{}", vlnfaith::report::to_text(&result.aggregates));
        }
        Command::CompareOracle { model, eval, out } => {
            let ds = pipeline::load_dataset(&model.data)?;
            let agent = pipeline::load_checkpoint_for(&ds, &model.checkpoint)?;
            let rows = pipeline::compare_oracle(&ds, &agent, &eval.splits, &eval.methods, &eval.config()?, &out)?;
            pipeline::write_report(&rows, &out, "oracle_report")?;
            print!("{}", vlnfaith::report::to_text(&rows));
        }
        Command::Visualize { model, episode, methods, eval_config, out } => {
            let ds = pipeline::load_dataset(&model.data)?;
            let agent = pipeline::load_checkpoint_for(&ds, &model.checkpoint)?;
            let cfg: EvalConfig = config_or_default(eval_config.as_deref())?;
            for p in pipeline::visualize(&ds, &agent, &episode, &methods, &cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Report { inputs, stem, out } => {
            let entries = pipeline::report(&inputs, &out, &stem)?;
            print!("{}", vlnfaith::report::to_text(&entries));
        }
        Command::RunAll { config, out } => {
            let cfg: PipelineConfig = config_or_default(config.as_deref())?;
            let summary = pipeline::run_all(&cfg, &out)?;
            for a in &summary.agents {
                println!("{} (gate {})", a.architecture, if a.gate_passed { "passed" } else { "failed" });
                print_nav(&a.navigation);
            }
            if !summary.aggregates.is_empty() {
                print!("{}", vlnfaith::report::to_text(&summary.aggregates));
            }
            println!("outputs in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
