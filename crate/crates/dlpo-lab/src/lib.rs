//! A desk-scale lab for fine-tuning denoising diffusion models with
//! reinforcement learning.
//!
//! The crate pretrains a small conditional diffusion model on synthetic 1-D
//! waveforms (sine classes standing in for utterances) and then fine-tunes
//! it against a programmatic 1–5 quality score, treating the reverse
//! diffusion process as a Markov decision process with a terminal reward.
//! Six fine-tuning objectives are implemented side by side — RWR, DDPO,
//! DPOK, KL-in-reward (KLinR), DLPO, and OnlyDL — all sharing one REINFORCE
//! core so they can be compared, reduced to one another, and checked against
//! simulation oracles.
//!
//! Everything runs on CPU in `f64` with explicit seeding: the same config
//! and seed reproduce metrics files byte for byte.
//!
//! # Modules
//!
//! - [`autograd`]: Wengert-tape reverse-mode differentiation over a flat
//!   parameter vector (closed primitive set, finite-difference oracle).
//! - [`diffusion`]: linear variance schedule, forward corruption, posterior
//!   statistics, and the denoising training loss.
//! - [`denoiser`]: the conditional noise-prediction MLP and its tape builder.
//! - [`policy`]: reverse-process rollouts as trajectories with per-step
//!   Gaussian log-densities and KL terms.
//! - [`rewards`]: synthetic dataset plus programmatic quality scores (a
//!   training reward, a held-out guard score, and a class-recovery check).
//! - [`estimators`]: the six gradient estimators.
//! - [`trainer`]: Adam, the pretraining and fine-tuning loops, evaluation,
//!   top-3 checkpointing, and metrics logging.
//! - [`checkpoint`]: binary parameter snapshots with a text sidecar.
//! - [`config`]: `key = value` run configuration with strict validation.
//! - [`cli`]: the `pretrain` / `finetune` / `eval` / `compare` commands.
//!
//! # Runnable examples
//!
//! Each major capability has a standalone example under `examples/`:
//!
//! ```text
//! cargo run --release --example build_schedule      # inspect a noise schedule
//! cargo run --release --example generate_dataset    # synthesize waveforms + scores
//! cargo run --release --example gradient_check      # finite-difference the losses
//! cargo run --release --example pretrain            # train the denoiser
//! cargo run --release --example sample_rollouts     # ancestral sampling + scoring
//! cargo run --release --example finetune_dlpo       # RL fine-tuning with DLPO
//! cargo run --release --example compare_algorithms  # all six objectives, one table
//! ```

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod estimators;
pub mod policy;
pub mod rewards;
pub mod streams;
pub mod trainer;
