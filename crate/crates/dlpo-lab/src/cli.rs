//! The command-line entry point: `pretrain`, `finetune`, `eval`, `compare`.
//!
//! Commands wire configs, checkpoints, and output directories to the
//! [`crate::trainer`] loops. Every failure prints one line to stderr with
//! the prefix `error:` and exits with a documented code: `2` for config
//! problems (including unknown keys and unknown algorithm names), `3` for
//! I/O failures, `4` for corrupt checkpoints, `1` for anything else.
//! `--help` lists every config key with its default, generated from the
//! same table the parser uses.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_config, Config, ConfigError};
use crate::denoiser::DenoiserParams;
use crate::estimators::Algo;
use crate::streams::ensure_thread_pool;
use crate::trainer::{
    evaluate, finetune, pretrain, run_dataset, write_metrics_csv, EvalReport, MetricsRow,
    TrainState, TrainerError, TrainerResult,
};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

/// Renders the config-key reference appended to `--help`.
fn config_keys_help() -> String {
    let mut s = String::from("Config keys (key = default  # description):\n");
    for (key, default, doc) in Config::describe_keys() {
        s.push_str(&format!("  {key} = {default}  # {doc}\n"));
    }
    s
}

/// Diffusion pretraining and RL fine-tuning on synthetic waveforms.
#[derive(Debug, Parser)]
#[command(name = "dlpo-lab", version, after_help = config_keys_help())]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the denoiser; writes pretrained.ckpt and a metrics CSV.
    Pretrain {
        /// Path to the `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune a pretrained checkpoint; writes top-3 checkpoints and a
    /// metrics CSV.
    Finetune {
        /// Path to the `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides the config's `algo` (rwr, ddpo, dpok, klinr, dlpo,
        /// onlydl).
        #[arg(long)]
        algo: Option<String>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the frozen validation set; prints CSV to
    /// stdout.
    Eval {
        /// Path to the `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune all six objectives from one checkpoint over several seeds;
    /// writes table1.csv and per-algorithm curve CSVs.
    Compare {
        /// Path to the `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint every run starts from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `seed` (runs use seed, seed+1, ...).
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Maps a trainer error onto the documented exit codes.
fn exit_code(err: &TrainerError) -> i32 {
    match err {
        TrainerError::Io(_) | TrainerError::Config(ConfigError::Io(_)) => 3,
        TrainerError::Config(_) => 2,
        TrainerError::Checkpoint(e) => {
            if e.is_corruption() {
                4
            } else {
                3
            }
        }
        _ => 1,
    }
}

/// Creates a directory tree, naming it in any failure.
fn make_out_dir(path: &Path) -> std::io::Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Loads the config and applies the `--seed` override.
fn load_run_config(path: &Path, seed: Option<u64>) -> TrainerResult<Config> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads a checkpoint and cross-checks its layout against the config.
fn load_matching_checkpoint(path: &Path, cfg: &Config) -> TrainerResult<DenoiserParams> {
    let (params, _hash) = load_checkpoint(path)?;
    let expected = cfg.layout()?;
    if params.layout != expected {
        return Err(ConfigError::Invalid(format!(
            "checkpoint layout {:?} does not match the config's {:?}",
            params.layout, expected
        ))
        .into());
    }
    Ok(params)
}

fn cmd_pretrain(config: &Path, out: &Path, seed: Option<u64>) -> TrainerResult<()> {
    let cfg = load_run_config(config, seed)?;
    make_out_dir(out)?;
    let dataset = run_dataset(&cfg, cfg.seed)?;
    let (state, rows) = pretrain(&cfg, &dataset)?;
    let ckpt = out.join("pretrained.ckpt");
    save_checkpoint(&ckpt, &state.params, cfg.hash())?;
    write_metrics_csv(&out.join("metrics_pretrain.csv"), &rows)?;
    if let Some(last) = rows.last() {
        println!(
            "pretrained {} epochs: loss {:.4}, recovery error {:.1}%",
            last.step,
            last.diff_loss,
            100.0 * last.recovery_err
        );
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_finetune(
    config: &Path,
    ckpt: &Path,
    algo: Option<&str>,
    out: &Path,
    seed: Option<u64>,
) -> TrainerResult<()> {
    let mut cfg = load_run_config(config, seed)?;
    if let Some(name) = algo {
        cfg.algo = name
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("{e}")))?;
    }
    let pretrained = load_matching_checkpoint(ckpt, &cfg)?;
    make_out_dir(out)?;
    let start = TrainState::from_params(pretrained.clone(), cfg.seed);
    let (state, rows) = finetune(&cfg, start, &pretrained, out)?;
    write_metrics_csv(&out.join(format!("metrics_{}.csv", cfg.algo)), &rows)?;
    if let Some((score, path)) = state.topk.first() {
        println!(
            "finetuned {} for {} rounds: best validation reward {:.4} at {}",
            cfg.algo,
            cfg.finetune_rounds,
            score,
            path.display()
        );
    }
    Ok(())
}

fn cmd_eval(config: &Path, ckpt: &Path, seed: Option<u64>) -> TrainerResult<()> {
    let cfg = load_run_config(config, seed)?;
    let params = load_matching_checkpoint(ckpt, &cfg)?;
    let report = evaluate(&params, &cfg, cfg.seed)?;
    println!("reward_mos,heldout,recovery_err,diff_residual");
    println!(
        "{},{},{},{}",
        report.reward_mos, report.heldout, report.recovery_err, report.diff_residual
    );
    Ok(())
}

/// The comparison table: mean best-checkpoint scores per algorithm over the
/// compare seeds, plus the pretrained baseline.
fn table_csv(baseline: &EvalReport, rows: &[(Algo, EvalReport)]) -> String {
    let mut out = String::from("algo,reward_mos,heldout,recovery_err\n");
    out.push_str(&format!(
        "pretrained,{},{},{}\n",
        baseline.reward_mos, baseline.heldout, baseline.recovery_err
    ));
    for (algo, r) in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            algo, r.reward_mos, r.heldout, r.recovery_err
        ));
    }
    out
}

fn cmd_compare(config: &Path, ckpt: &Path, out: &Path, seed: Option<u64>) -> TrainerResult<()> {
    let cfg = load_run_config(config, seed)?;
    let pretrained = load_matching_checkpoint(ckpt, &cfg)?;
    make_out_dir(out)?;

    let baseline = evaluate(&pretrained, &cfg, cfg.seed)?;
    let mut table: Vec<(Algo, EvalReport)> = Vec::new();
    for algo in Algo::ALL {
        let mut curves: Vec<MetricsRow> = Vec::new();
        let mut sums = EvalReport {
            reward_mos: 0.0,
            heldout: 0.0,
            recovery_err: 0.0,
            diff_residual: 0.0,
        };
        for s in 0..cfg.compare_seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.algo = algo;
            run_cfg.seed = cfg.seed + s as u64;
            let run_dir = out.join(format!("{}_seed{}", algo, run_cfg.seed));
            make_out_dir(&run_dir)?;

            let start = TrainState::from_params(pretrained.clone(), run_cfg.seed);
            let (state, rows) = finetune(&run_cfg, start, &pretrained, &run_dir)?;
            curves.extend(rows);

            let (score, best_path) = state
                .topk
                .first()
                .expect("finetune checkpoints at least once");
            let (best, _) = load_checkpoint(best_path)?;
            let report = evaluate(&best, &run_cfg, run_cfg.seed)?;
            sums.reward_mos += report.reward_mos;
            sums.heldout += report.heldout;
            sums.recovery_err += report.recovery_err;
            sums.diff_residual += report.diff_residual;
            println!(
                "{} seed {}: best validation reward {:.4}, evaluated reward {:.4}",
                algo, run_cfg.seed, score, report.reward_mos
            );
        }
        let n = cfg.compare_seeds as f64;
        table.push((
            algo,
            EvalReport {
                reward_mos: sums.reward_mos / n,
                heldout: sums.heldout / n,
                recovery_err: sums.recovery_err / n,
                diff_residual: sums.diff_residual / n,
            },
        ));
        write_metrics_csv(&out.join(format!("curves_{algo}.csv")), &curves)?;
    }

    let table_path = out.join("table1.csv");
    fs::write(&table_path, table_csv(&baseline, &table))
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", table_path.display())))?;
    println!("wrote {}", table_path.display());
    Ok(())
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reports --help/--version through Err as well; those print
            // to stdout and exit 0, real usage errors go to stderr with 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    ensure_thread_pool();
    let result = match &cli.command {
        Command::Pretrain { config, out, seed } => cmd_pretrain(config, out, *seed),
        Command::Finetune {
            config,
            ckpt,
            algo,
            out,
            seed,
        } => cmd_finetune(config, ckpt, algo.as_deref(), out, *seed),
        Command::Eval { config, ckpt, seed } => cmd_eval(config, ckpt, *seed),
        Command::Compare {
            config,
            ckpt,
            out,
            seed,
        } => cmd_compare(config, ckpt, out, *seed),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
