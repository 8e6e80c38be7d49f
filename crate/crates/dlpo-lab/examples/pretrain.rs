//! Pretrains the conditional denoiser on synthetic waveforms with the
//! standard noise-prediction loss, prints the training curve, and caches a
//! checkpoint that the fine-tuning examples start from.
//!
//! ```bash
//! cargo run --release --example pretrain
//! ```

use std::fs;

use dlpo_lab::checkpoint::save_checkpoint;
use dlpo_lab::trainer::{evaluate, pretrain, run_dataset};

mod common;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = common::example_config();
    cfg.validate()?;

    let dataset = run_dataset(&cfg, cfg.seed)?;
    println!(
        "pretraining on {} waveforms ({} classes, N = {}, T = {}) for {} epochs",
        dataset.len(),
        cfg.k_classes,
        cfg.n_samples,
        cfg.t_steps,
        cfg.pretrain_epochs
    );
    println!();

    let start = std::time::Instant::now();
    let (state, rows) = pretrain(&cfg, &dataset)?;
    let secs = start.elapsed().as_secs_f64();

    println!("{:>6} {:>12} {:>12} {:>12}", "epoch", "diff_loss", "reward_mos", "recovery_err");
    for row in rows.iter().filter(|r| r.step == 1 || r.step % 10 == 0) {
        println!(
            "{:>6} {:>12.5} {:>12.4} {:>12.4}",
            row.step, row.diff_loss, row.reward_mos, row.recovery_err
        );
    }
    println!();
    println!("finished in {secs:.1}s ({} Adam steps)", state.step);

    let report = evaluate(&state.params, &cfg, cfg.seed)?;
    println!(
        "final eval: reward {:.3}/5, heldout {:.3}, recovery error {:.1}%",
        report.reward_mos,
        report.heldout,
        100.0 * report.recovery_err
    );

    fs::create_dir_all(common::out_dir())?;
    let ckpt = common::out_dir().join("pretrained.ckpt");
    save_checkpoint(&ckpt, &state.params, cfg.hash())?;
    println!("saved {}", ckpt.display());
    Ok(())
}
