//! Deterministic RNG streams and the shared compute thread pool.
//!
//! Every random draw in the crate comes from a ChaCha8 generator derived
//! from the run seed plus a small address: a phase tag (what the stream is
//! for) and two indices (e.g. round and batch element). Streams with
//! different addresses are independent, and the same address always yields
//! the same stream, which is what makes training runs, evaluations, and
//! metrics files bit-reproducible regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

/// What a derived RNG stream is used for. The discriminant is part of the
/// stream address, so adding phases never perturbs existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Synthetic dataset generation.
    Dataset = 1,
    /// Denoiser parameter initialization.
    Init = 2,
    /// Pretraining: shuffling and per-batch noise draws.
    Pretrain = 3,
    /// Fine-tuning: trajectory sampling and estimator draws.
    Finetune = 4,
    /// Validation / evaluation rollouts.
    Eval = 5,
    /// One-off sampling pools (e.g. the static pool some algorithms train on).
    Pool = 6,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream from `(seed, phase, a, b)`.
///
/// The full 256-bit ChaCha key is filled by a splitmix64 chain over the
/// address, so distinct addresses give unrelated streams without any
/// coordination between call sites.
pub fn stream_rng(seed: u64, phase: Phase, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = seed ^ 0x5dee_ce66_d151_7f2d;
    // Fold the address into the splitmix state one word at a time.
    for word in [phase as u64, a, b] {
        state ^= splitmix64(&mut state) ^ word;
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Ensures the global compute pool exists, honoring the `DLPO_LAB_THREADS`
/// environment variable as a cap on worker threads (default: machine cores).
///
/// Parallel sections only ever map independent work items and reduce them in
/// index order afterwards, so the thread count never affects results — only
/// wall-clock time.
pub fn ensure_thread_pool() {
    static POOL: OnceLock<()> = OnceLock::new();
    POOL.get_or_init(|| {
        if let Some(n) = std::env::var("DLPO_LAB_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
        {
            // Ignore failure: a pool may already exist (e.g. under a test
            // harness), in which case rayon keeps the existing one.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    });
}
