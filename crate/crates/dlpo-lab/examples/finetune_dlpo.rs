//! Fine-tunes a pretrained denoiser with the DLPO objective — REINFORCE on
//! the reverse process plus a differentiable denoising-residual penalty —
//! and shows the training reward climbing while the residual stays pinned.
//!
//! ```bash
//! cargo run --release --example finetune_dlpo
//! ```

use dlpo_lab::estimators::Algo;
use dlpo_lab::trainer::{evaluate, finetune, TrainState};

mod common;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = common::example_config();
    cfg.algo = Algo::Dlpo;
    cfg.finetune_rounds = 60;
    cfg.batch_size = 16;
    cfg.val_every = 10;
    cfg.validate()?;

    let pretrained = common::load_or_pretrain(&cfg)?;
    let before = evaluate(&pretrained, &cfg, cfg.seed)?;
    println!();
    println!(
        "before fine-tuning: reward {:.3}/5, heldout {:.3}, recovery error {:.1}%",
        before.reward_mos,
        before.heldout,
        100.0 * before.recovery_err
    );
    println!();

    let out = common::out_dir().join("finetune_dlpo");
    std::fs::create_dir_all(&out)?;
    let state = TrainState::from_params(pretrained.clone(), cfg.seed);

    let start = std::time::Instant::now();
    let (state, rows) = finetune(&cfg, state, &pretrained, &out)?;
    let secs = start.elapsed().as_secs_f64();

    println!("{:>6} {:>12} {:>12} {:>12} {:>10}", "round", "reward_mos", "heldout", "residual", "kl");
    for row in rows.iter().filter(|r| r.step == 1 || r.step % 10 == 0) {
        println!(
            "{:>6} {:>12.4} {:>12.4} {:>12.5} {:>10.4}",
            row.step, row.reward_mos, row.heldout, row.diff_loss, row.kl
        );
    }
    println!();
    println!("finished {} rounds in {secs:.1}s", cfg.finetune_rounds);

    let after = evaluate(&state.params, &cfg, cfg.seed)?;
    println!(
        "after fine-tuning:  reward {:.3}/5, heldout {:.3}, recovery error {:.1}%",
        after.reward_mos,
        after.heldout,
        100.0 * after.recovery_err
    );
    println!("reward gain: {:+.3}", after.reward_mos - before.reward_mos);
    println!();
    println!("best validation checkpoints (descending):");
    for (score, path) in &state.topk {
        println!("  {:.4}  {}", score, path.display());
    }
    Ok(())
}
