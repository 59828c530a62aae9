use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cppo_core::checkpoint;
use cppo_core::config::{RunConfig, RunManifest};
use cppo_core::error::{Error, Result};
use cppo_core::oracle;
use cppo_core::policy::GridPolicy;
use cppo_core::report::{emit_report, EvalRewards, RunLog};
use cppo_core::trace_io;
use cppo_core::trainer::{evaluate, run_training, EvalCondition, RunPaths, TrainState};

#[derive(Parser)]
#[command(name = "cppo", version, about = "Contrastive perception policy optimization on a synthetic grid task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Shorthand for `--lambda 0`.
        #[arg(long)]
        grpo_only: bool,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from the newest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Paired GRPO (λ=0) and CPPO runs over several seeds, with a curve report.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
    },
    /// Entropy-shift detection and CPL scoring on a trace file.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        k: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a trace from a toy-policy checkpoint.
    ExportTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write entropies instead of full distributions.
        #[arg(long)]
        entropy_only: bool,
    },
    /// Brute-force checks of the MI identity and the objective gradient.
    OracleCheck {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Mi,
    Grad,
    All,
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))
        })
        .collect()
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::parse("", overrides),
    }
}

fn eval_all(state: &TrainState, cfg: &RunConfig) -> Result<EvalRewards> {
    let run = |c| evaluate(&state.policy, &state.params, &cfg.env, cfg.train.max_len, cfg.eval.episodes, cfg.eval.seed, c);
    Ok(EvalRewards {
        clean: run(EvalCondition::Clean)?,
        removing: run(EvalCondition::InfoRemoving)?,
        preserving: run(EvalCondition::InfoPreserving)?,
    })
}

/// Writes the manifest, trains, and evaluates one configured run.
fn train_run(cfg: &RunConfig, out: &Path, resume: bool) -> Result<(RunLog, EvalRewards)> {
    let paths = RunPaths::new(out);
    fs::create_dir_all(out)?;
    RunManifest::new(cfg.clone(), out).write(&paths.manifest())?;
    let outcome = run_training(&cfg.env, &cfg.train, Some(&paths), resume)?;
    let eval = eval_all(&outcome.state, cfg)?;
    let label = out.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
    Ok((RunLog { label, metrics: outcome.metrics }, eval))
}

fn print_eval(label: &str, final_reward: f64, e: &EvalRewards) {
    println!(
        "{label}: final_reward={final_reward:.4} eval clean={:.4} removing={:.4} preserving={:.4}",
        e.clean, e.removing, e.preserving
    );
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("N/A".to_string(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, lambda, grpo_only, sets, out, resume } => {
            let mut overrides = parse_sets(&sets)?;
            if let Some(s) = seed {
                overrides.push(("train.seed".into(), s.to_string()));
            }
            if let Some(l) = lambda {
                overrides.push(("cpl.lambda".into(), l.to_string()));
            }
            if grpo_only {
                overrides.push(("cpl.lambda".into(), "0".into()));
            }
            let cfg = load_config(config.as_deref(), &overrides)?;
            let (log, eval) = train_run(&cfg, &out, resume)?;
            print_eval(&log.label, cppo_core::report::final_mean_reward(&log.metrics), &eval);
            emit_report(&[(log, Some(eval))], &out.join("report"))?;
            Ok(true)
        }
        Command::Compare { config, seeds, sets, out } => {
            let overrides = parse_sets(&sets)?;
            let base = load_config(config.as_deref(), &overrides)?;
            let mut runs = Vec::new();
            for &seed in &seeds {
                for (arm, lambda) in [("grpo", 0.0), ("cppo", base.train.cpl.lambda)] {
                    let mut cfg = base.clone();
                    cfg.train.seed = seed;
                    cfg.train.cpl.lambda = lambda;
                    let dir = out.join(format!("seed{seed}_{arm}"));
                    let (log, eval) = train_run(&cfg, &dir, false)?;
                    print_eval(&log.label, cppo_core::report::final_mean_reward(&log.metrics), &eval);
                    runs.push((log, Some(eval)));
                }
            }
            let summaries = emit_report(&runs, &out.join("report"))?;
            let mean = |arm: &str| {
                let xs: Vec<f64> = summaries.iter().filter(|s| s.label.ends_with(arm)).map(|s| s.final_mean_reward).collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            };
            println!("mean final reward: grpo={:.4} cppo={:.4}", mean("_grpo"), mean("_cppo"));
            Ok(true)
        }
        Command::Analyze { trace, k, tau, report, seed } => {
            let records = trace_io::read_trace(&trace)?;
            let r = trace_io::analyze_trace(&records, k, tau, seed)?;
            println!("rollouts={} tokens={} selected={}", r.rollouts, r.tokens, r.selected_tokens);
            println!(
                "detection precision={} recall={} f1={}",
                fmt_opt(r.detection.precision),
                fmt_opt(r.detection.recall),
                fmt_opt(r.detection.f1)
            );
            println!(
                "random    precision={} recall={} f1={} (±{}, {} resamples)",
                fmt_opt(r.baseline.precision_mean),
                fmt_opt(r.baseline.recall_mean),
                fmt_opt(r.baseline.f1_mean),
                fmt_opt(r.baseline.f1_std),
                r.baseline.resamples
            );
            println!("f1 gap={} rouge1={} random rouge1={}", fmt_opt(r.f1_gap), fmt_opt(r.rouge1_mean), fmt_opt(r.baseline.rouge1_mean));
            if let Some(path) = report {
                let json = serde_json::to_string_pretty(&r).map_err(|e| Error::Report(e.to_string()))?;
                fs::write(path, json)?;
            }
            Ok(true)
        }
        Command::ExportTrace { checkpoint: ckpt, config, out, episodes, seed, entropy_only } => {
            let cfg = load_config(config.as_deref(), &[])?;
            let params = checkpoint::load(&ckpt)?;
            let policy = GridPolicy::new(cfg.env.width, cfg.env.height, cfg.env.alphabet, cfg.train.max_len);
            let records = trace_io::export_policy_trace(&policy, &params, &cfg.env, episodes, seed, !entropy_only)?;
            trace_io::write_trace(&records, &out)?;
            println!("wrote {} records to {}", records.len(), out.display());
            Ok(true)
        }
        Command::OracleCheck { suite, seed } => {
            let mut ok = true;
            if matches!(suite, Suite::Mi | Suite::All) {
                let r = oracle::mi_suite(seed, 100)?;
                println!(
                    "mi: draws={} max_residual={:e} (< {:e}) {}",
                    r.draws,
                    r.max_residual,
                    oracle::MI_TOLERANCE,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            if matches!(suite, Suite::Grad | Suite::All) {
                let r = oracle::grad_suite(seed, 20)?;
                println!(
                    "grad: batches={} max_rel_err={:e} (< {:e}) {}",
                    r.batches.len(),
                    r.max_rel_err,
                    oracle::GRAD_TOLERANCE,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
