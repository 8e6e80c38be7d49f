//! Run configuration: one flat `key = value` file, strictly validated.
//!
//! Every tunable of the lab lives in [`Config`]. The key table below is the
//! single source of truth: it generates the struct, the defaults, the
//! parser, the `--help` listing, and the canonical text form whose FNV-1a
//! hash fingerprints a run in checkpoint sidecars.
//!
//! The file format is deliberately small: one `key = value` per line, `#`
//! starts a comment, blank lines are ignored. Unknown keys, duplicate keys,
//! and unparsable values are hard errors naming the offending line; every
//! value is then cross-checked against the preconditions of the module that
//! consumes it (schedule, layout, reward geometry, estimator settings), so
//! a config that parses is a config that runs.

use crate::checkpoint::fnv1a64;
use crate::denoiser::{DenoiserLayout, LossNorm};
use crate::diffusion::NoiseSchedule;
use crate::estimators::{Algo, BaselineKind, DlSource, DlpoMode, DlpoTSampling, RLConfig};
use crate::rewards::{ConditionSpec, HeldoutWeights, MosWeights};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

/// Errors from reading, parsing, or validating a config.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// The config file could not be read.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// A line is not `key = value`.
    #[error("line {line}: expected `key = value`, got {got:?}")]
    Malformed { line: usize, got: String },
    /// A key that is not in the key table.
    #[error("line {line}: unknown config key {key:?}")]
    UnknownKey { line: usize, key: String },
    /// The same key assigned twice.
    #[error("line {line}: duplicate config key {key:?}")]
    DuplicateKey { line: usize, key: String },
    /// A value that does not parse as its key's type.
    #[error("line {line}: bad value for {key}: {detail}")]
    BadValue {
        line: usize,
        key: String,
        detail: String,
    },
    /// Values parse individually but violate a module precondition.
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Convenience alias for config results.
pub type ConfigResult<T> = Result<T, ConfigError>;

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

macro_rules! define_config {
    ($($field:ident : $ty:ty = $default:expr => $help:literal,)*) => {
        /// Every tunable of a run. Construct with [`Config::default`] and
        /// override fields, or parse a file with [`load_config`].
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $(#[doc = $help] pub $field: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($field: $default,)* }
            }
        }

        impl Config {
            /// All config keys, in canonical (table) order.
            pub fn key_names() -> &'static [&'static str] {
                &[$(stringify!($field),)*]
            }

            /// One `(key, default, description)` row per key, for help
            /// output.
            pub fn describe_keys() -> Vec<(&'static str, String, &'static str)> {
                let d = Config::default();
                vec![$((stringify!($field), d.$field.to_string(), $help),)*]
            }

            /// Sets one key from its textual value. `Ok(false)` means the
            /// key is unknown; `Err` carries the parse failure.
            fn set_from_text(&mut self, key: &str, value: &str) -> Result<bool, String> {
                $(if key == stringify!($field) {
                    self.$field = value.parse::<$ty>().map_err(|e| e.to_string())?;
                    return Ok(true);
                })*
                Ok(false)
            }

            /// Canonical textual form of the value stored under `key`.
            fn value_text(&self, key: &str) -> Option<String> {
                $(if key == stringify!($field) {
                    return Some(self.$field.to_string());
                })*
                None
            }
        }
    };
}

define_config! {
    // Synthetic data and reward geometry.
    n_samples: usize = 128 => "samples per waveform (even, at least 8)",
    k_classes: usize = 8 => "number of condition classes",
    freq_start: usize = 2 => "frequency of class 0 in cycles per window (class c uses freq_start + c)",
    amplitude: f64 = 1.0 => "peak amplitude of the class sines",
    obs_noise_std: f64 = 0.01 => "observation noise added to dataset waveforms",
    dataset_size: usize = 2000 => "number of waveforms in the training dataset",
    mos_spectral: f64 = 0.6 => "training-reward weight of the spectral band share",
    mos_smoothness: f64 = 0.2 => "training-reward weight of the smoothness term",
    mos_amplitude: f64 = 0.2 => "training-reward weight of the RMS amplitude term",
    heldout_periodicity: f64 = 0.7 => "held-out-score weight of the autocorrelation term",
    heldout_crest: f64 = 0.3 => "held-out-score weight of the crest-factor term",
    // Noise schedule.
    t_steps: usize = 10 => "diffusion steps T",
    beta_start: f64 = 0.001 => "first forward variance of the linear schedule",
    beta_end: f64 = 0.6 => "last forward variance of the linear schedule",
    sigma2_min: f64 = 1e-6 => "floor on reverse-step variances",
    // Denoiser dimensions.
    cond_embed_dim: usize = 16 => "class embedding width",
    time_embed_dim: usize = 16 => "timestep embedding width",
    hidden1: usize = 256 => "first hidden layer width",
    hidden2: usize = 256 => "second hidden layer width",
    // Fine-tuning objective.
    algo: Algo = Algo::Dlpo => "objective: rwr, ddpo, dpok, klinr, dlpo, onlydl",
    alpha: f64 = 1.0 => "reward weight in dpok/dlpo",
    beta: f64 = 0.1 => "regularizer weight (KL for dpok, residual for dlpo)",
    baseline: BaselineKind = BaselineKind::MovingAverage => "reward baseline: none, moving_average",
    baseline_decay: f64 = 0.9 => "decay of the moving-average baseline, in [0, 1)",
    dlpo_mode: DlpoMode = DlpoMode::DirectGrad => "residual penalty mode: direct_grad, shaped_reward",
    dlpo_t_sampling: DlpoTSampling = DlpoTSampling::SingleUniform => "residual timesteps: single_uniform, all_steps",
    dl_source: DlSource = DlSource::Trajectory => "residual corruption pairs: trajectory, dataset",
    loss_norm: LossNorm = LossNorm::L2 => "residual norm: l2, l2sq",
    batch_size: usize = 16 => "trajectories per fine-tuning round",
    rwr_pool_size: usize = 1024 => "static sample pool size for rwr",
    // Training loops.
    pretrain_epochs: usize = 200 => "pretraining epochs over the dataset",
    pretrain_batch: usize = 32 => "pretraining minibatch size",
    pretrain_lr: f64 = 0.001 => "pretraining Adam learning rate",
    pretrain_eval_every: usize = 10 => "epochs between pretraining metric rows",
    finetune_rounds: usize = 300 => "fine-tuning rounds (one gradient step each)",
    finetune_lr: f64 = 0.0001 => "fine-tuning Adam learning rate",
    adam_beta1: f64 = 0.9 => "Adam first-moment decay",
    adam_beta2: f64 = 0.999 => "Adam second-moment decay",
    adam_eps: f64 = 1e-8 => "Adam denominator offset",
    // Evaluation and seeding.
    val_every: usize = 10 => "rounds between validation passes",
    val_seeds_per_class: usize = 8 => "fixed rollout seeds per class in the validation set",
    compare_seeds: usize = 3 => "fine-tuning seeds per algorithm in the comparison harness",
    seed: u64 = 0 => "master seed for every stream of the run",
}

impl Config {
    /// The reward geometry this config describes.
    pub fn condition_spec(&self) -> ConfigResult<ConditionSpec> {
        ConditionSpec::new(self.n_samples, self.k_classes, self.freq_start, self.amplitude)
            .map_err(invalid)
    }

    /// The noise schedule this config describes.
    pub fn noise_schedule(&self) -> ConfigResult<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end, self.sigma2_min)
            .map_err(invalid)
    }

    /// The denoiser layout this config describes.
    pub fn layout(&self) -> ConfigResult<DenoiserLayout> {
        DenoiserLayout::new(
            self.n_samples,
            self.k_classes,
            self.t_steps,
            self.cond_embed_dim,
            self.time_embed_dim,
            self.hidden1,
            self.hidden2,
        )
        .map_err(invalid)
    }

    /// The estimator settings this config describes.
    pub fn rl_config(&self) -> RLConfig {
        RLConfig {
            algo: self.algo,
            alpha: self.alpha,
            beta: self.beta,
            baseline: self.baseline,
            baseline_decay: self.baseline_decay,
            dlpo_mode: self.dlpo_mode,
            dlpo_t_sampling: self.dlpo_t_sampling,
            dl_source: self.dl_source,
            loss_norm: self.loss_norm,
            batch_size: self.batch_size,
        }
    }

    /// The training-reward weights.
    pub fn mos_weights(&self) -> MosWeights {
        MosWeights {
            spectral: self.mos_spectral,
            smoothness: self.mos_smoothness,
            amplitude: self.mos_amplitude,
        }
    }

    /// The held-out-score weights.
    pub fn heldout_weights(&self) -> HeldoutWeights {
        HeldoutWeights {
            periodicity: self.heldout_periodicity,
            crest: self.heldout_crest,
        }
    }

    /// Cross-checks every value against the preconditions of the modules
    /// that consume it, constructing each domain object once.
    pub fn validate(&self) -> ConfigResult<()> {
        self.condition_spec()?;
        self.noise_schedule()?;
        self.layout()?;
        self.rl_config().validate().map_err(invalid)?;
        let nonneg = [
            ("obs_noise_std", self.obs_noise_std),
            ("mos_spectral", self.mos_spectral),
            ("mos_smoothness", self.mos_smoothness),
            ("mos_amplitude", self.mos_amplitude),
            ("heldout_periodicity", self.heldout_periodicity),
            ("heldout_crest", self.heldout_crest),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        let positive = [
            ("pretrain_lr", self.pretrain_lr),
            ("finetune_lr", self.finetune_lr),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(invalid(format!("{name} must be finite and positive")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        let at_least_one = [
            ("dataset_size", self.dataset_size),
            ("rwr_pool_size", self.rwr_pool_size),
            ("pretrain_batch", self.pretrain_batch),
            ("pretrain_eval_every", self.pretrain_eval_every),
            ("val_every", self.val_every),
            ("val_seeds_per_class", self.val_seeds_per_class),
            ("compare_seeds", self.compare_seeds),
        ];
        for (name, v) in at_least_one {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// The full configuration as canonical `key = value` text: every key in
    /// table order with its current value. Parsing this text reproduces the
    /// config exactly.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for &key in Self::key_names() {
            let value = self.value_text(key).expect("key table is exhaustive");
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// FNV-1a fingerprint of [`Config::canonical_text`], stored in
    /// checkpoint sidecars for provenance.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }
}

/// Parses config text on top of the defaults and validates the result.
pub fn parse_config(text: &str) -> ConfigResult<Config> {
    let mut cfg = Config::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Malformed {
                line,
                got: content.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::Malformed {
                line,
                got: content.to_string(),
            });
        }
        if !Config::key_names().iter().any(|k| *k == key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        if let Err(detail) = cfg.set_from_text(key, value) {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                detail,
            });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> ConfigResult<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
