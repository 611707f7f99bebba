//! Experiment presets: heuristic comparison, MARL against each heuristic,
//! joint against separate critics, and the second-iteration pipeline.

use std::path::{Path, PathBuf};

use super::{run_eval, EvalConfig, ExperimentReport, HarnessError, Setup, Strategy, StrategyResult};
use crate::marl::{make_second_iteration_config, train_with, Assist, BundleManifest, HeuristicSpec, TrainConfig};
use crate::neural::hex_digest;

pub const PRESETS: [&str; 4] = ["heuristic_comparison", "marl_vs_heuristics", "hybrid_critics", "marl_star"];

/// A preset that stopped early, with everything it produced so far.
#[derive(Debug)]
pub struct PresetFailure {
    pub partial: ExperimentReport,
    pub error: HarnessError,
}

impl std::fmt::Display for PresetFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "preset {} incomplete: {}", self.partial.preset, self.error)
    }
}

impl std::error::Error for PresetFailure {}

/// Runs a named preset. Training presets write bundles and logs under `out_dir`.
pub fn run_experiment_preset(name: &str, setup: &Setup, out_dir: Option<&Path>) -> Result<ExperimentReport, PresetFailure> {
    let mut report = ExperimentReport::new(name, &setup.config.hash());
    let result = match name {
        "heuristic_comparison" => heuristic_comparison(setup, &mut report),
        "marl_vs_heuristics" => with_dir(out_dir, |d| marl_vs_heuristics(setup, d, &mut report)),
        "hybrid_critics" => with_dir(out_dir, |d| hybrid_critics(setup, d, &mut report)),
        "marl_star" => with_dir(out_dir, |d| marl_star(setup, d, &mut report)),
        other => Err(HarnessError::Config(format!("unknown preset {other}; expected one of {}", PRESETS.join(", ")))),
    };
    match result {
        Ok(()) => {
            report.complete = true;
            Ok(report)
        }
        Err(error) => Err(PresetFailure { partial: report, error }),
    }
}

fn with_dir<F: FnOnce(&Path) -> Result<(), HarnessError>>(dir: Option<&Path>, f: F) -> Result<(), HarnessError> {
    let dir = dir.ok_or_else(|| HarnessError::Config("this preset trains policies and needs an output directory".into()))?;
    std::fs::create_dir_all(dir)?;
    f(dir)
}

fn eval_config(setup: &Setup, strategy: Strategy, assist: Assist, checkpoint: Option<PathBuf>) -> EvalConfig {
    let base = &setup.config.eval;
    EvalConfig { strategy, assist, checkpoint, heuristic: None, ..base.clone() }
}

fn eval_into(report: &mut ExperimentReport, name: &str, setup: &Setup, cfg: &EvalConfig) -> Result<(), HarnessError> {
    let results = run_eval(setup, cfg)?;
    report.push_strategy(StrategyResult::from_results(name, &results)?);
    Ok(())
}

fn rule_strategy(spec: &HeuristicSpec) -> Option<(Strategy, &'static str)> {
    Some(match spec {
        HeuristicSpec::Random => (Strategy::Random, "random"),
        HeuristicSpec::Low => (Strategy::Low, "low"),
        HeuristicSpec::Medium => (Strategy::Medium, "medium"),
        HeuristicSpec::High => (Strategy::High, "high"),
        HeuristicSpec::Frozen(_) => return None,
    })
}

/// Trains, writes `train_log.csv` and the bundle into `dir`, and records provenance notes.
fn train_run(
    setup: &Setup,
    cfg: &TrainConfig,
    dir: &Path,
    label: &str,
    report: &mut ExperimentReport,
) -> Result<BundleManifest, HarnessError> {
    let mut env = setup.env(None)?;
    let outcome = train_with(&mut env, &setup.params, cfg, |_| {})?;
    std::fs::create_dir_all(dir)?;
    outcome.log.write_csv(std::fs::File::create(dir.join("train_log.csv"))?)?;
    let manifest = outcome.save_bundle(dir, cfg)?;
    let notes = &mut report.notes;
    notes.insert(format!("{label}.bundle"), dir.display().to_string());
    notes.insert(format!("{label}.config_hash"), manifest.config_hash.clone());
    notes.insert(format!("{label}.best_episode"), outcome.best_episode.to_string());
    notes.insert(format!("{label}.best_eval_return"), outcome.best_eval_return.to_string());
    notes.insert(format!("{label}.binding"), manifest.heuristic_binding.kind.clone());
    if !manifest.heuristic_binding.checkpoint_hashes.is_empty() {
        notes.insert(format!("{label}.binding_hashes"), manifest.heuristic_binding.checkpoint_hashes.join(" "));
    }
    Ok(manifest)
}

fn heuristic_comparison(setup: &Setup, report: &mut ExperimentReport) -> Result<(), HarnessError> {
    let order = [(Strategy::Random, "random"), (Strategy::Low, "low"), (Strategy::Medium, "medium"), (Strategy::High, "high")];
    for (s, name) in order {
        eval_into(report, name, setup, &eval_config(setup, s, Assist::NonAssisted, None))?;
    }
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            report.push_improvement(order[i].1, order[j].1)?;
        }
    }
    Ok(())
}

fn marl_vs_heuristics(setup: &Setup, dir: &Path, report: &mut ExperimentReport) -> Result<(), HarnessError> {
    for spec in [HeuristicSpec::Low, HeuristicSpec::Medium, HeuristicSpec::High] {
        let (strategy, rule) = rule_strategy(&spec).expect("rule");
        eval_into(report, rule, setup, &eval_config(setup, strategy, Assist::NonAssisted, None))?;
        let cfg = TrainConfig { heuristic: spec.clone(), ..setup.config.train.clone() };
        let run_dir = dir.join(format!("marl_{rule}"));
        let label = format!("marl_{rule}");
        train_run(setup, &cfg, &run_dir, &label, report)?;
        for (assist, suffix) in [(Assist::Assisted, "assisted"), (Assist::NonAssisted, "non_assisted")] {
            let name = format!("marl_{rule}_{suffix}");
            let ev = eval_config(setup, Strategy::MarlCheckpoint, assist, Some(run_dir.clone()));
            eval_into(report, &name, setup, &ev)?;
            report.push_improvement(rule, &name)?;
        }
    }
    Ok(())
}

/// The two training configs of the critic comparison: identical except for the critic flag.
pub fn hybrid_train_configs(base: &TrainConfig) -> (TrainConfig, TrainConfig) {
    let joint = TrainConfig { critic: crate::marl::CriticArch::Joint, train_junctions: true, ..base.clone() };
    let separate = TrainConfig { critic: crate::marl::CriticArch::Separate, ..joint.clone() };
    (joint, separate)
}

fn hybrid_critics(setup: &Setup, dir: &Path, report: &mut ExperimentReport) -> Result<(), HarnessError> {
    let (joint, separate) = hybrid_train_configs(&setup.config.train);
    let baseline = match rule_strategy(&joint.heuristic) {
        Some((s, name)) => {
            eval_into(report, name, setup, &eval_config(setup, s, Assist::NonAssisted, None))?;
            Some(name)
        }
        None => None,
    };
    for (cfg, label) in [(&joint, "joint_critic"), (&separate, "separate_critics")] {
        let run_dir = dir.join(label);
        train_run(setup, cfg, &run_dir, label, report)?;
        let ev = eval_config(setup, Strategy::HybridMarlCheckpoint, Assist::NonAssisted, Some(run_dir));
        eval_into(report, label, setup, &ev)?;
        if let Some(b) = baseline {
            report.push_improvement(b, label)?;
        }
    }
    report.push_improvement("joint_critic", "separate_critics")?;
    Ok(())
}

/// File name to SHA-256 for every file in a directory, sorted by name.
pub(crate) fn hash_dir(dir: &Path) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            out.push((entry.file_name().to_string_lossy().into_owned(), hex_digest(&std::fs::read(entry.path())?)));
        }
    }
    out.sort();
    Ok(out)
}

fn marl_star(setup: &Setup, dir: &Path, report: &mut ExperimentReport) -> Result<(), HarnessError> {
    let first_cfg = setup.config.train.clone();
    let first_dir = dir.join("first");
    let second_dir = dir.join("second");
    let baseline = match rule_strategy(&first_cfg.heuristic) {
        Some((s, name)) => {
            eval_into(report, name, setup, &eval_config(setup, s, Assist::NonAssisted, None))?;
            Some(name)
        }
        None => None,
    };

    let first = train_run(setup, &first_cfg, &first_dir, "marl", report)?;
    let before = hash_dir(&first_dir)?;
    let env = setup.env(None)?;
    let second_cfg = make_second_iteration_config(&first_cfg, &first_dir, &env)?;
    let second = train_run(setup, &second_cfg, &second_dir, "marl_star", report)?;
    let after = hash_dir(&first_dir)?;
    if before != after {
        return Err(HarnessError::Runtime("first-iteration bundle changed during second-iteration training".into()));
    }

    // The second run must be bound to exactly the first run's actor files.
    let mut first_actor_hashes: Vec<(usize, String)> =
        first.files.iter().filter_map(|f| f.agent.map(|a| (a, f.sha256.clone()))).collect();
    first_actor_hashes.sort();
    let expected: Vec<String> = first_actor_hashes.into_iter().map(|(_, h)| h).collect();
    if second.heuristic_binding.kind != "frozen" || second.heuristic_binding.checkpoint_hashes != expected {
        return Err(HarnessError::Runtime("second-iteration manifest does not bind the first-iteration actors".into()));
    }
    report.notes.insert("marl.file_hashes".into(), before.iter().map(|(f, h)| format!("{f}={h}")).collect::<Vec<_>>().join(" "));
    report.notes.insert("marl_star.frozen_unchanged".into(), "true".into());

    for (label, run_dir) in [("marl", &first_dir), ("marl_star", &second_dir)] {
        let ev = eval_config(setup, Strategy::MarlCheckpoint, Assist::NonAssisted, Some(run_dir.clone()));
        eval_into(report, label, setup, &ev)?;
        if let Some(b) = baseline {
            report.push_improvement(b, label)?;
        }
    }
    report.push_improvement("marl", "marl_star")?;
    Ok(())
}
