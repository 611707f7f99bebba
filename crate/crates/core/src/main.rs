use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use conveyor_marl::harness::{
    export_trace, run_eval, run_experiment_preset, ExperimentReport, HarnessConfig, HarnessError, ReportFormat,
    Strategy, StrategyResult,
};
use conveyor_marl::marl::{train_with, Assist, CriticArch, HeuristicSpec};

#[derive(Parser, Debug)]
#[command(name = "conveyor", version, about = "Conveyor dispatching simulator, trainer and evaluator")]
struct Cli {
    /// TOML config with [env], [topology], [heuristics], [train], [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for evaluation episodes and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Episode count (training episodes for `train`, evaluation episodes otherwise).
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Simulation steps per episode.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Output file, or directory for `train` and training presets.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Random,
    Low,
    Medium,
    High,
    MarlCheckpoint,
    HybridMarlCheckpoint,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Low => Strategy::Low,
            StrategyArg::Medium => Strategy::Medium,
            StrategyArg::High => Strategy::High,
            StrategyArg::MarlCheckpoint => Strategy::MarlCheckpoint,
            StrategyArg::HybridMarlCheckpoint => Strategy::HybridMarlCheckpoint,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleArg {
    Random,
    Low,
    Medium,
    High,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AssistArg {
    Assisted,
    NonAssisted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CriticArg {
    Joint,
    Separate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Heuristic or random rollouts.
    Simulate {
        #[arg(long, value_enum)]
        strategy: Option<RuleArg>,
    },
    /// Train MARL policies; writes a checkpoint bundle and train_log.csv into --out.
    Train {
        #[arg(long, value_enum)]
        heuristic: Option<RuleArg>,
        /// Bundle of frozen first-iteration actors to use as the heuristic.
        #[arg(long, conflicts_with = "heuristic")]
        frozen: Option<PathBuf>,
        #[arg(long, value_enum)]
        critic: Option<CriticArg>,
        #[arg(long)]
        train_junctions: bool,
    },
    /// Evaluate a strategy per the [eval] section.
    Evaluate {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        assist: Option<AssistArg>,
    },
    /// Run an experiment preset: heuristic_comparison, marl_vs_heuristics, hybrid_critics, marl_star.
    Experiment { preset: String },
    /// Write every decision of one episode as JSON lines.
    ExportTrace {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        assist: Option<AssistArg>,
    },
}

fn rule_spec(r: RuleArg) -> HeuristicSpec {
    match r {
        RuleArg::Random => HeuristicSpec::Random,
        RuleArg::Low => HeuristicSpec::Low,
        RuleArg::Medium => HeuristicSpec::Medium,
        RuleArg::High => HeuristicSpec::High,
    }
}

fn rule_strategy(r: RuleArg) -> Strategy {
    match r {
        RuleArg::Random => Strategy::Random,
        RuleArg::Low => Strategy::Low,
        RuleArg::Medium => Strategy::Medium,
        RuleArg::High => Strategy::High,
    }
}

fn load_config(cli: &Cli) -> Result<HarnessConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval.base_seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.env.episode_steps = steps;
    }
    if let Some(n) = cli.episodes {
        match cli.command {
            Command::Train { .. } => cfg.train.episodes = n,
            _ => cfg.eval.episodes = n,
        }
    }
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn apply_eval_args(cfg: &mut HarnessConfig, strategy: Option<StrategyArg>, checkpoint: Option<PathBuf>, assist: Option<AssistArg>) {
    if let Some(s) = strategy {
        cfg.eval.strategy = s.into();
    }
    if let Some(c) = checkpoint {
        cfg.eval.checkpoint = Some(c);
    }
    if let Some(a) = assist {
        cfg.eval.assist = match a {
            AssistArg::Assisted => Assist::Assisted,
            AssistArg::NonAssisted => Assist::NonAssisted,
        };
    }
}

fn eval_report(cfg: &HarnessConfig, preset: &str) -> Result<ExperimentReport, HarnessError> {
    let setup = cfg.setup()?;
    let results = run_eval(&setup, &cfg.eval)?;
    let mut report = ExperimentReport::new(preset, &cfg.hash());
    let name = match cfg.eval.assist {
        Assist::Assisted if cfg.eval.strategy.is_marl() => format!("{}_assisted", cfg.eval.strategy.as_str()),
        _ => cfg.eval.strategy.as_str().to_string(),
    };
    report.push_strategy(StrategyResult::from_results(&name, &results)?);
    report.complete = true;
    Ok(report)
}

fn print_summary(report: &ExperimentReport) {
    for s in &report.strategies {
        let m = &s.summary;
        eprintln!(
            "{:<28} n={:<4} min={} q1={} median={} q3={} max={} mean={:.2}",
            s.name, m.n, m.min, m.q1, m.median, m.q3, m.max, m.mean
        );
    }
    for i in &report.improvements {
        match i.percent {
            Some(p) => eprintln!("{} over {}: {:+.2}%", i.candidate, i.baseline, p),
            None => eprintln!("{} over {}: undefined (baseline median not positive)", i.candidate, i.baseline),
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli)?;
    let format: ReportFormat = cli.format.into();
    match cli.command {
        Command::Simulate { strategy } => {
            if let Some(r) = strategy {
                cfg.eval.strategy = rule_strategy(r);
            }
            if cfg.eval.strategy.is_marl() {
                return Err(HarnessError::Config("simulate runs heuristics only; use evaluate for checkpoints".into()));
            }
            let report = eval_report(&cfg, "simulate")?;
            print_summary(&report);
            write_output(cli.out.as_deref(), &report.export(format)?)
        }
        Command::Train { heuristic, frozen, critic, train_junctions } => {
            if let Some(h) = heuristic {
                cfg.train.heuristic = rule_spec(h);
            }
            if let Some(f) = frozen {
                cfg.train.heuristic = HeuristicSpec::Frozen(f);
            }
            if let Some(c) = critic {
                cfg.train.critic = match c {
                    CriticArg::Joint => CriticArch::Joint,
                    CriticArg::Separate => CriticArch::Separate,
                };
            }
            if train_junctions {
                cfg.train.train_junctions = true;
            }
            let out = cli.out.ok_or_else(|| HarnessError::Config("train needs --out <dir>".into()))?;
            let setup = cfg.setup()?;
            let mut env = setup.env(None)?;
            let outcome = train_with(&mut env, &setup.params, &cfg.train, |row| {
                if let Some(e) = row.eval_return_mean {
                    eprintln!("episode {:>4} train_return {:.4} eval_return {:.4}", row.episode, row.train_return, e);
                }
            })?;
            std::fs::create_dir_all(&out)?;
            outcome.log.write_csv(std::fs::File::create(out.join("train_log.csv"))?).map_err(HarnessError::from)?;
            outcome.save_bundle(&out, &cfg.train)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            eprintln!("best episode {} eval_return {:.4}; bundle in {}", outcome.best_episode, outcome.best_eval_return, out.display());
            Ok(())
        }
        Command::Evaluate { strategy, checkpoint, assist } => {
            apply_eval_args(&mut cfg, strategy, checkpoint, assist);
            let report = eval_report(&cfg, "evaluate")?;
            print_summary(&report);
            write_output(cli.out.as_deref(), &report.export(format)?)
        }
        Command::Experiment { preset } => {
            let setup = cfg.setup()?;
            let ext = match format {
                ReportFormat::Csv => "csv",
                ReportFormat::Json => "json",
            };
            let trains = preset != "heuristic_comparison";
            let (dir, report_path) = match &cli.out {
                Some(p) if trains => (Some(p.clone()), Some(p.join(format!("report.{ext}")))),
                Some(p) => (None, Some(p.clone())),
                None => (None, None),
            };
            match run_experiment_preset(&preset, &setup, dir.as_deref()) {
                Ok(report) => {
                    print_summary(&report);
                    write_output(report_path.as_deref(), &report.export(format)?)
                }
                Err(failure) => {
                    if report_path.is_some() {
                        write_output(report_path.as_deref(), &failure.partial.export(format)?)?;
                    }
                    Err(failure.error)
                }
            }
        }
        Command::ExportTrace { strategy, checkpoint, assist } => {
            apply_eval_args(&mut cfg, strategy, checkpoint, assist);
            let setup = cfg.setup()?;
            let seed = cfg.eval.base_seed;
            let total = match &cli.out {
                Some(p) => export_trace(&setup, &cfg.eval, seed, std::io::BufWriter::new(std::fs::File::create(p)?))?,
                None => export_trace(&setup, &cfg.eval, seed, std::io::stdout().lock())?,
            };
            eprintln!("episode seed {seed}: throughput {total}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
