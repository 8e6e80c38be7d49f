//! Training loops: Adam, pretraining, fine-tuning, evaluation, logging.
//!
//! All loops are sequential over steps and deterministic given the run
//! seed: every random draw comes from an addressed stream (see
//! [`crate::streams`]), so the same config and seed reproduce parameters
//! and metrics bit for bit regardless of thread count.
//!
//! [`pretrain`] runs minibatch Adam on the denoising loss. [`finetune`]
//! runs one gradient estimate and one Adam step per round under the
//! configured objective, keeps a moving-average reward baseline, and every
//! few rounds scores the current model on a frozen validation set (all K
//! classes × a fixed block of rollout seeds), checkpointing the three best
//! validation scores seen so far. [`evaluate`] is the shared measurement:
//! mean training reward, mean held-out score, condition-recovery error,
//! and mean denoising residual over the validation rollouts.

use crate::checkpoint::{save_checkpoint, sidecar_path, CheckpointError};
use crate::config::{Config, ConfigError};
use crate::denoiser::{ddpm_loss, DenoiserError, DenoiserParams, LossNorm, NoiseRecord};
use crate::diffusion::{DiffusionError, NoiseSchedule, Sample};
use crate::estimators::{estimate_gradient, Algo, BaselineKind, DlSource, EstimatorError};
use crate::policy::{sample_trajectories, PolicyError, Trajectory};
use crate::rewards::{
    condition_recovery, make_dataset, reward_heldout, reward_mos, RewardError,
};
use crate::streams::{stream_rng, Phase};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// How many best-validation checkpoints a fine-tuning run keeps.
pub const TOPK: usize = 3;

/// The metrics CSV header, shared by pretraining and fine-tuning logs.
pub const METRICS_HEADER: &str = "step,reward_mos,heldout,recovery_err,diff_loss,kl,algo,seed";

/// Errors from the training loops.
#[derive(Debug, Error)]
pub enum TrainerError {
    /// Gradient and parameter vectors disagree in length.
    #[error("gradient length {got} does not match parameter length {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    /// Learning rate out of range.
    #[error("learning rate must be finite and positive, got {0}")]
    BadLearningRate(f64),
    /// Adam decay rates out of range.
    #[error("adam decay rates must lie in [0, 1), got ({0}, {1})")]
    BadDecay(f64, f64),
    /// Adam epsilon out of range.
    #[error("adam eps must be finite and positive, got {0}")]
    BadEps(f64),
    /// Pretraining needs data.
    #[error("dataset must be nonempty")]
    EmptyDataset,
    /// Filesystem failure while managing checkpoints.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Invalid configuration.
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Checkpoint write failure.
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    /// Gradient estimation failure.
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    /// Rollout failure.
    #[error(transparent)]
    Policy(#[from] PolicyError),
    /// Denoiser or loss failure.
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    /// Schedule failure.
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    /// Reward failure.
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Convenience alias for trainer results.
pub type TrainerResult<T> = Result<T, TrainerError>;

/// Everything a training loop carries between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Current parameters.
    pub params: DenoiserParams,
    /// Adam first-moment accumulator, same length as θ.
    pub adam_m: Vec<f64>,
    /// Adam second-moment accumulator, same length as θ.
    pub adam_v: Vec<f64>,
    /// Number of Adam updates applied so far.
    pub step: usize,
    /// Moving-average reward baseline b (0 until the first update).
    pub reward_baseline: f64,
    /// The run seed every stream of this state derives from.
    pub rng_seed: u64,
    /// The best validation scores seen so far with their checkpoint paths,
    /// sorted descending, at most [`TOPK`] entries.
    pub topk: Vec<(f64, PathBuf)>,
}

impl TrainState {
    /// A fresh state: seeded parameter initialization, zeroed optimizer.
    pub fn init(cfg: &Config) -> TrainerResult<Self> {
        let layout = cfg.layout()?;
        let params =
            DenoiserParams::init(layout, &mut stream_rng(cfg.seed, Phase::Init, 0, 0));
        Ok(TrainState::from_params(params, cfg.seed))
    }

    /// Wraps existing parameters (e.g. a loaded checkpoint) with a zeroed
    /// optimizer, for fine-tuning.
    pub fn from_params(params: DenoiserParams, seed: u64) -> Self {
        let n = params.theta.len();
        TrainState {
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
            reward_baseline: 0.0,
            rng_seed: seed,
            topk: Vec::new(),
        }
    }

    /// One Adam update with bias correction; increments `step`. A zero
    /// gradient leaves the parameters bitwise unchanged.
    pub fn adam_update(
        &mut self,
        grad: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> TrainerResult<()> {
        if grad.len() != self.params.theta.len() {
            return Err(TrainerError::ShapeMismatch {
                expected: self.params.theta.len(),
                got: grad.len(),
            });
        }
        if !lr.is_finite() || lr <= 0.0 {
            return Err(TrainerError::BadLearningRate(lr));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(TrainerError::BadDecay(beta1, beta2));
        }
        if !eps.is_finite() || eps <= 0.0 {
            return Err(TrainerError::BadEps(eps));
        }
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..grad.len() {
            let g = grad[i];
            self.adam_m[i] = beta1 * self.adam_m[i] + (1.0 - beta1) * g;
            self.adam_v[i] = beta2 * self.adam_v[i] + (1.0 - beta2) * (g * g);
            let m_hat = self.adam_m[i] / bc1;
            let v_hat = self.adam_v[i] / bc2;
            self.params.theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// Records a validation score and its checkpoint, returning the path of
    /// an evicted checkpoint once more than [`TOPK`] are held. Ties keep
    /// the earlier checkpoint first.
    fn push_topk(&mut self, score: f64, path: PathBuf) -> Option<PathBuf> {
        self.topk.push((score, path));
        self.topk.sort_by(|a, b| b.0.total_cmp(&a.0));
        if self.topk.len() > TOPK {
            self.topk.pop().map(|(_, p)| p)
        } else {
            None
        }
    }
}

/// One logged measurement row. Fine-tuning logs one row per round with the
/// round's own batch statistics; pretraining logs one row per epoch with
/// the epoch's mean loss and the most recent evaluation values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Epoch (pretraining) or round (fine-tuning).
    pub step: usize,
    /// Mean training reward of the batch (raw, before the baseline shift).
    pub reward_mos: f64,
    /// Mean held-out score.
    pub heldout: f64,
    /// Fraction of samples whose recovered class differs from the
    /// conditioned one.
    pub recovery_err: f64,
    /// Mean denoising loss (pretraining) or residual diagnostic
    /// (fine-tuning).
    pub diff_loss: f64,
    /// Mean KL against the pretrained policy (0 during pretraining).
    pub kl: f64,
    /// Objective name, or `pretrain`.
    pub algo: &'static str,
    /// The run seed.
    pub seed: u64,
}

impl MetricsRow {
    /// The row as one CSV line (no trailing newline).
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.reward_mos,
            self.heldout,
            self.recovery_err,
            self.diff_loss,
            self.kl,
            self.algo,
            self.seed
        )
    }
}

/// Renders rows as a CSV document under [`METRICS_HEADER`].
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Writes rows as a CSV file.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    fs::write(path, metrics_csv(rows))
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Generates the run's synthetic dataset from its dedicated stream.
pub fn run_dataset(cfg: &Config, seed: u64) -> TrainerResult<Vec<Sample>> {
    let spec = cfg.condition_spec()?;
    Ok(make_dataset(
        &spec,
        cfg.dataset_size,
        cfg.obs_noise_std,
        &mut stream_rng(seed, Phase::Dataset, 0, 0),
    )?)
}

/// The four measurements shared by validation and reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Mean training reward over the validation rollouts.
    pub reward_mos: f64,
    /// Mean held-out score.
    pub heldout: f64,
    /// Fraction of rollouts whose recovered class differs from the
    /// conditioned one.
    pub recovery_err: f64,
    /// Mean per-step implied-noise residual along the rollouts.
    pub diff_residual: f64,
}

/// Mean residual ‖ε̃ − ε_θ‖ over a trajectory's steps, using the implied
/// noise of its own states and the predictions recorded while sampling.
fn trajectory_residual(
    traj: &Trajectory,
    sched: &NoiseSchedule,
    norm: LossNorm,
) -> TrainerResult<f64> {
    let t_steps = traj.t_steps();
    let mut sum = 0.0;
    for i in 0..t_steps {
        let rec = NoiseRecord {
            eps_true: sched.implied_noise(&traj.states[i], traj.x0(), traj.timestep(i))?,
            eps_pred: traj.eps_pred[i].clone(),
        };
        sum += rec.residual(norm);
    }
    Ok(sum / t_steps as f64)
}

/// Scores `params` on the frozen validation set: every class crossed with
/// `val_seeds_per_class` fixed rollout streams. Deterministic given
/// (params, config, seed) — repeated calls measure model change only.
pub fn evaluate(params: &DenoiserParams, cfg: &Config, seed: u64) -> TrainerResult<EvalReport> {
    let spec = cfg.condition_spec()?;
    let sched = cfg.noise_schedule()?;
    let mos_w = cfg.mos_weights();
    let ho_w = cfg.heldout_weights();
    let n = cfg.val_seeds_per_class;
    let classes: Vec<usize> = (0..spec.k_classes * n).map(|idx| idx / n).collect();
    let trajs = sample_trajectories(params, &classes, &sched, |idx| {
        stream_rng(seed, Phase::Eval, (idx / n) as u64, (idx % n) as u64)
    })?;

    let (mut mos, mut ho, mut miss, mut res) = (0.0, 0.0, 0.0, 0.0);
    for traj in &trajs {
        mos += reward_mos(traj.x0(), traj.c, &spec, &mos_w)?;
        ho += reward_heldout(traj.x0(), traj.c, &spec, &ho_w)?;
        if condition_recovery(traj.x0(), &spec)? != traj.c {
            miss += 1.0;
        }
        res += trajectory_residual(traj, &sched, cfg.loss_norm)?;
    }
    let m = trajs.len() as f64;
    Ok(EvalReport {
        reward_mos: mos / m,
        heldout: ho / m,
        recovery_err: miss / m,
        diff_residual: res / m,
    })
}

/// Pretrains the denoiser on `dataset` with minibatch Adam, one row of
/// metrics per epoch. Zero epochs return the freshly initialized state
/// untouched. The evaluation columns refresh on epoch 1, every
/// `pretrain_eval_every` epochs, and on the final epoch; rows in between
/// carry the latest values forward next to their own epoch loss.
pub fn pretrain(cfg: &Config, dataset: &[Sample]) -> TrainerResult<(TrainState, Vec<MetricsRow>)> {
    if dataset.is_empty() {
        return Err(TrainerError::EmptyDataset);
    }
    let sched = cfg.noise_schedule()?;
    let mut state = TrainState::init(cfg)?;
    let seed = state.rng_seed;
    let mut rows = Vec::new();
    let mut last_eval: Option<EvalReport> = None;

    for epoch in 1..=cfg.pretrain_epochs {
        let mut erng = stream_rng(seed, Phase::Pretrain, epoch as u64, 0);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut erng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.pretrain_batch) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, grad) = ddpm_loss(&state.params, &batch, &sched, cfg.loss_norm, &mut erng)?;
            state.adam_update(
                &grad,
                cfg.pretrain_lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )?;
            loss_sum += loss;
            batches += 1;
        }

        if epoch == 1 || epoch % cfg.pretrain_eval_every == 0 || epoch == cfg.pretrain_epochs {
            last_eval = Some(evaluate(&state.params, cfg, seed)?);
        }
        let ev = last_eval.as_ref().expect("epoch 1 always evaluates");
        rows.push(MetricsRow {
            step: epoch,
            reward_mos: ev.reward_mos,
            heldout: ev.heldout,
            recovery_err: ev.recovery_err,
            diff_loss: loss_sum / batches as f64,
            kl: 0.0,
            algo: "pretrain",
            seed,
        });
    }
    Ok((state, rows))
}

/// Evaluates on the validation set, checkpoints the current parameters,
/// and maintains the top-[`TOPK`] list, deleting evicted checkpoints.
fn validate_and_save(state: &mut TrainState, cfg: &Config, out_dir: &Path) -> TrainerResult<()> {
    let report = evaluate(&state.params, cfg, state.rng_seed)?;
    let path = out_dir.join(format!("ckpt_step_{}.ckpt", state.step));
    save_checkpoint(&path, &state.params, cfg.hash())?;
    if let Some(evicted) = state.push_topk(report.reward_mos, path) {
        fs::remove_file(&evicted)?;
        fs::remove_file(sidecar_path(&evicted))?;
    }
    Ok(())
}

/// Fine-tunes `state` against the configured objective, one gradient
/// estimate and one Adam step per round, starting from (and regularizing
/// toward) the frozen `pretrained` parameters.
///
/// Per round this logs the batch's own statistics: raw mean reward,
/// mean held-out score and recovery error of the sampled waveforms, and the
/// estimator's residual and KL diagnostics. Every `val_every` rounds (and
/// on the last) the model is scored on the frozen validation set and the
/// three best-scoring checkpoints are kept in `out_dir`. With zero rounds
/// the parameters come back unchanged, checkpointed once as-is.
///
/// The `rwr` objective never samples from the current model: it draws its
/// batches (with replacement) from a pool of `rwr_pool_size` trajectories
/// sampled from `pretrained` once up front.
pub fn finetune(
    cfg: &Config,
    mut state: TrainState,
    pretrained: &DenoiserParams,
    out_dir: &Path,
) -> TrainerResult<(TrainState, Vec<MetricsRow>)> {
    let spec = cfg.condition_spec()?;
    let sched = cfg.noise_schedule()?;
    let rl = cfg.rl_config();
    let mos_w = cfg.mos_weights();
    let ho_w = cfg.heldout_weights();
    let seed = state.rng_seed;
    let algo_name = rl.algo.as_str();

    // The residual penalty's data source, only materialized when diffused
    // real data was requested.
    let data_pool: Option<Vec<Sample>> =
        if matches!(rl.algo, Algo::Dlpo | Algo::Onlydl) && rl.dl_source == DlSource::Dataset {
            Some(run_dataset(cfg, seed)?)
        } else {
            None
        };
    let rwr_pool: Option<Vec<Trajectory>> = if rl.algo == Algo::Rwr {
        let classes: Vec<usize> = (0..cfg.rwr_pool_size).map(|i| i % spec.k_classes).collect();
        let mut pool = sample_trajectories(pretrained, &classes, &sched, |i| {
            stream_rng(seed, Phase::Pool, i as u64, 0)
        })?;
        for traj in &mut pool {
            traj.reward = Some(reward_mos(traj.x0(), traj.c, &spec, &mos_w)?);
        }
        Some(pool)
    } else {
        None
    };

    let mut rows = Vec::new();
    for round in 1..=cfg.finetune_rounds {
        let r = round as u64;
        // One stream for the round's estimator draws (and pool picks); the
        // `u64::MAX` lane keeps it clear of the per-trajectory streams.
        let mut est_rng = stream_rng(seed, Phase::Finetune, r, u64::MAX);

        let batch: Vec<Trajectory> = match &rwr_pool {
            Some(pool) => (0..rl.batch_size)
                .map(|_| pool[est_rng.random_range(0..pool.len())].clone())
                .collect(),
            None => {
                let classes: Vec<usize> =
                    (0..rl.batch_size).map(|i| i % spec.k_classes).collect();
                let mut trajs = sample_trajectories(&state.params, &classes, &sched, |j| {
                    stream_rng(seed, Phase::Finetune, r, j as u64)
                })?;
                for traj in &mut trajs {
                    traj.reward = Some(reward_mos(traj.x0(), traj.c, &spec, &mos_w)?);
                }
                trajs
            }
        };

        let est = estimate_gradient(
            &state.params,
            pretrained,
            &batch,
            data_pool.as_deref(),
            &rl,
            state.reward_baseline,
            &sched,
            &mut est_rng,
        )?;
        state.adam_update(
            &est.grad,
            cfg.finetune_lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )?;
        if rl.baseline == BaselineKind::MovingAverage {
            state.reward_baseline = rl.baseline_decay * state.reward_baseline
                + (1.0 - rl.baseline_decay) * est.mean_reward;
        }

        let (mut ho, mut miss) = (0.0, 0.0);
        for traj in &batch {
            ho += reward_heldout(traj.x0(), traj.c, &spec, &ho_w)?;
            if condition_recovery(traj.x0(), &spec)? != traj.c {
                miss += 1.0;
            }
        }
        let b = batch.len() as f64;
        rows.push(MetricsRow {
            step: state.step,
            reward_mos: est.mean_reward,
            heldout: ho / b,
            recovery_err: miss / b,
            diff_loss: est.mean_diff_residual,
            kl: est.mean_kl,
            algo: algo_name,
            seed,
        });

        if round % cfg.val_every == 0 || round == cfg.finetune_rounds {
            validate_and_save(&mut state, cfg, out_dir)?;
        }
    }
    if cfg.finetune_rounds == 0 {
        validate_and_save(&mut state, cfg, out_dir)?;
    }
    Ok((state, rows))
}
