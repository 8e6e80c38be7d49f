//! Setup shared by the trainable examples: one desk-scale configuration and
//! a cached pretrained checkpoint, so each example stays runnable on its own
//! without repeating the pretraining wait.
#![allow(dead_code)]

use std::error::Error;
use std::fs;
use std::path::PathBuf;

use dlpo_lab::checkpoint::{load_checkpoint, save_checkpoint};
use dlpo_lab::config::Config;
use dlpo_lab::denoiser::DenoiserParams;
use dlpo_lab::trainer::{pretrain, run_dataset};

/// Where the examples keep their artifacts (already ignored by git).
pub fn out_dir() -> PathBuf {
    PathBuf::from("target/example-runs")
}

/// A configuration small enough to pretrain in seconds, shared by the
/// rollout and fine-tuning examples so their checkpoints interchange.
pub fn example_config() -> Config {
    let mut cfg = Config::default();
    cfg.n_samples = 32;
    cfg.k_classes = 4;
    cfg.t_steps = 5;
    cfg.cond_embed_dim = 8;
    cfg.time_embed_dim = 8;
    cfg.hidden1 = 48;
    cfg.hidden2 = 32;
    cfg.dataset_size = 400;
    cfg.pretrain_epochs = 60;
    cfg.pretrain_batch = 32;
    cfg.pretrain_eval_every = 10;
    cfg.val_seeds_per_class = 4;
    cfg.seed = 1;
    cfg
}

/// Returns pretrained parameters for `cfg`, reusing the checkpoint left by a
/// previous example run when its config hash still matches, and pretraining
/// from scratch (then caching) otherwise.
pub fn load_or_pretrain(cfg: &Config) -> Result<DenoiserParams, Box<dyn Error>> {
    cfg.validate()?;
    let path = out_dir().join("pretrained.ckpt");
    if path.exists() {
        if let Ok((params, hash)) = load_checkpoint(&path) {
            if hash == cfg.hash() {
                println!("reusing {}", path.display());
                return Ok(params);
            }
        }
    }
    println!("pretraining ({} epochs)...", cfg.pretrain_epochs);
    let dataset = run_dataset(cfg, cfg.seed)?;
    let (state, _) = pretrain(cfg, &dataset)?;
    fs::create_dir_all(out_dir())?;
    save_checkpoint(&path, &state.params, cfg.hash())?;
    println!("cached {}", path.display());
    Ok(state.params)
}
