//! Gradient estimators for reward fine-tuning of the denoiser.
//!
//! Six objectives share one interface. Each takes a batch of scored
//! trajectories, the current parameters θ, the frozen pretrained parameters
//! θ_pre, a schedule, an [`RLConfig`], a baseline value, and an RNG, and
//! returns a [`GradEstimate`] whose `grad` is a DESCENT direction (the
//! optimizer subtracts it, which ascends the reward):
//!
//! * `ddpo` — plain REINFORCE: −(1/B)·Σ_j r̃_j·Σ_t ∇ log p_θ(x_{t−1}|x_t).
//! * `dpok` — α-weighted REINFORCE plus β times the pathwise gradient of
//!   the per-step KL to the pretrained policy, summed over all steps.
//! * `klinr` — REINFORCE with the KL folded into the reward: the weight is
//!   r̃ minus the trajectory log-density difference against θ_pre.
//! * `dlpo` — α-weighted REINFORCE plus a denoising-residual penalty, either
//!   differentiated pathwise (`direct_grad`) or folded into the weight as a
//!   detached scalar (`shaped_reward`).
//! * `onlydl` — literally `dlpo` with α forced to zero.
//! * `rwr` — reward-weighted regression on trajectories from a static
//!   pretrained pool: the pathwise gradient of (1/B)·Σ_j r̃_j·d_j, where d_j
//!   is the denoising residual at one uniform timestep, a variational
//!   stand-in for −log p_θ(x_0|c).
//!
//! Everywhere r̃ = r − b with the baseline value b supplied by the caller
//! (the trainer owns the moving average; pass 0 to disable). Randomness is
//! drawn up front in batch order before any parallel work, and reductions
//! run in batch order, so results are reproducible for a given generator
//! state regardless of thread count. When β = 0 the entire penalty branch
//! is skipped, including its draws, so the reduced estimator consumes
//! exactly the generator stream the plain one would.

use crate::autograd::AutogradError;
use crate::denoiser::{
    predict_eps, residual_tape, DenoiserError, DenoiserParams, LossNorm, NoiseRecord,
};
use crate::diffusion::{DiffusionError, NoiseSchedule, Sample};
use crate::policy::{
    kl_step, kl_step_tape, logp_step_tape, mu_of_step, traj_logp_diff, PolicyError, Trajectory,
};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Errors from gradient estimation.
#[derive(Debug, Error)]
pub enum EstimatorError {
    /// Gradient estimation needs at least one trajectory.
    #[error("gradient estimation needs a non-empty batch")]
    EmptyBatch,
    /// An [`RLConfig`] field is out of range.
    #[error("bad RL configuration: {0}")]
    BadConfig(&'static str),
    /// A name failed to parse as one of an enum's accepted values.
    #[error("unknown {what} {got:?} (expected one of: {expected})")]
    UnknownName {
        what: &'static str,
        got: String,
        expected: &'static str,
    },
    /// Current and pretrained parameters disagree about the layout.
    #[error("current and pretrained parameters use different layouts")]
    LayoutMismatch,
    /// `dl_source = dataset` was requested without data to diffuse.
    #[error("dl_source = dataset needs a non-empty dataset")]
    MissingDataset,
    /// The supplied baseline value is not finite.
    #[error("baseline value must be finite, got {0}")]
    BadBaseline(f64),
    /// The estimate came out non-finite (first offending coordinate).
    #[error("estimated gradient is not finite at coordinate {0}")]
    NonFiniteGradient(usize),
    /// A trajectory failure (shapes, unset reward, ...).
    #[error(transparent)]
    Policy(#[from] PolicyError),
    /// A denoiser failure.
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    /// A schedule failure.
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    /// An autograd failure.
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Convenience alias for estimator results.
pub type EstimatorResult<T> = Result<T, EstimatorError>;

/// The six fine-tuning objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    /// Reward-weighted regression on a static pretrained pool.
    Rwr,
    /// Plain REINFORCE on the denoising MDP.
    Ddpo,
    /// REINFORCE plus a pathwise per-step KL penalty term.
    Dpok,
    /// REINFORCE with the sequence KL subtracted inside the reward.
    Klinr,
    /// REINFORCE plus a denoising-residual penalty (two modes).
    Dlpo,
    /// The denoising-residual penalty alone (DLPO with α = 0).
    Onlydl,
}

impl Algo {
    /// All six objectives, in the order comparison tables report them.
    pub const ALL: [Algo; 6] = [
        Algo::Rwr,
        Algo::Ddpo,
        Algo::Dpok,
        Algo::Klinr,
        Algo::Dlpo,
        Algo::Onlydl,
    ];

    /// Canonical lowercase name, as used in config files and CSV columns.
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Rwr => "rwr",
            Algo::Ddpo => "ddpo",
            Algo::Dpok => "dpok",
            Algo::Klinr => "klinr",
            Algo::Dlpo => "dlpo",
            Algo::Onlydl => "onlydl",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rwr" => Ok(Algo::Rwr),
            "ddpo" => Ok(Algo::Ddpo),
            "dpok" => Ok(Algo::Dpok),
            "klinr" => Ok(Algo::Klinr),
            "dlpo" => Ok(Algo::Dlpo),
            "onlydl" => Ok(Algo::Onlydl),
            other => Err(EstimatorError::UnknownName {
                what: "algorithm",
                got: other.to_string(),
                expected: "rwr, ddpo, dpok, klinr, dlpo, onlydl",
            }),
        }
    }
}

/// How the `dlpo` objective applies its denoising-residual penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlpoMode {
    /// Differentiate the batch-mean residual pathwise and add β times its
    /// gradient to the REINFORCE term.
    DirectGrad,
    /// Fold −β times the detached residual into each trajectory's
    /// REINFORCE weight.
    ShapedReward,
}

impl DlpoMode {
    /// Canonical lowercase name.
    pub fn as_str(&self) -> &'static str {
        match self {
            DlpoMode::DirectGrad => "direct_grad",
            DlpoMode::ShapedReward => "shaped_reward",
        }
    }
}

impl fmt::Display for DlpoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DlpoMode {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct_grad" => Ok(DlpoMode::DirectGrad),
            "shaped_reward" => Ok(DlpoMode::ShapedReward),
            other => Err(EstimatorError::UnknownName {
                what: "dlpo mode",
                got: other.to_string(),
                expected: "direct_grad, shaped_reward",
            }),
        }
    }
}

/// Which timesteps the residual penalty evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlpoTSampling {
    /// One timestep drawn uniformly from `1..=T` per trajectory.
    SingleUniform,
    /// The mean over every timestep (deterministic, draws nothing).
    AllSteps,
}

impl DlpoTSampling {
    /// Canonical lowercase name.
    pub fn as_str(&self) -> &'static str {
        match self {
            DlpoTSampling::SingleUniform => "single_uniform",
            DlpoTSampling::AllSteps => "all_steps",
        }
    }
}

impl fmt::Display for DlpoTSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DlpoTSampling {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_uniform" => Ok(DlpoTSampling::SingleUniform),
            "all_steps" => Ok(DlpoTSampling::AllSteps),
            other => Err(EstimatorError::UnknownName {
                what: "dlpo t-sampling",
                got: other.to_string(),
                expected: "single_uniform, all_steps",
            }),
        }
    }
}

/// Where the residual penalty's corruption pair (x_t, ε̃) comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlSource {
    /// The trajectory's own visited state, with ε̃ reconstructed from
    /// (x_t, x_0) via the implied-noise inversion. Generated samples have
    /// no ground-truth corruption noise, so this keeps the penalty
    /// on-policy.
    Trajectory,
    /// Fresh forward-diffused real data: a dataset waveform, a drawn
    /// timestep, and drawn noise, exactly as in pretraining.
    Dataset,
}

impl DlSource {
    /// Canonical lowercase name.
    pub fn as_str(&self) -> &'static str {
        match self {
            DlSource::Trajectory => "trajectory",
            DlSource::Dataset => "dataset",
        }
    }
}

impl fmt::Display for DlSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DlSource {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trajectory" => Ok(DlSource::Trajectory),
            "dataset" => Ok(DlSource::Dataset),
            other => Err(EstimatorError::UnknownName {
                what: "dl source",
                got: other.to_string(),
                expected: "trajectory, dataset",
            }),
        }
    }
}

/// Variance-reduction baseline policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// No baseline: r̃ = r.
    None,
    /// Moving average of past batch-mean rewards.
    MovingAverage,
}

impl BaselineKind {
    /// Canonical lowercase name.
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::MovingAverage => "moving_average",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(BaselineKind::None),
            "moving_average" => Ok(BaselineKind::MovingAverage),
            other => Err(EstimatorError::UnknownName {
                what: "baseline kind",
                got: other.to_string(),
                expected: "none, moving_average",
            }),
        }
    }
}

/// Everything the estimators need to know about the fine-tuning objective.
#[derive(Debug, Clone, PartialEq)]
pub struct RLConfig {
    /// Which objective to estimate.
    pub algo: Algo,
    /// Reward weight α ≥ 0.
    pub alpha: f64,
    /// Regularizer weight β ≥ 0 (KL for `dpok`, residual for `dlpo`).
    pub beta: f64,
    /// Baseline policy; the trainer owns the running value.
    pub baseline: BaselineKind,
    /// Decay of the moving-average baseline, in [0, 1).
    pub baseline_decay: f64,
    /// Penalty application mode for `dlpo`/`onlydl`.
    pub dlpo_mode: DlpoMode,
    /// Timestep selection for the residual penalty.
    pub dlpo_t_sampling: DlpoTSampling,
    /// Corruption-pair source for the residual penalty.
    pub dl_source: DlSource,
    /// Residual norm, shared with the pretraining loss.
    pub loss_norm: LossNorm,
    /// Trajectories sampled (or drawn from the pool) per round.
    pub batch_size: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            algo: Algo::Dlpo,
            alpha: 1.0,
            beta: 0.1,
            baseline: BaselineKind::MovingAverage,
            baseline_decay: 0.9,
            dlpo_mode: DlpoMode::DirectGrad,
            dlpo_t_sampling: DlpoTSampling::SingleUniform,
            dl_source: DlSource::Trajectory,
            loss_norm: LossNorm::L2,
            batch_size: 16,
        }
    }
}

impl RLConfig {
    /// Checks every field is in range.
    pub fn validate(&self) -> EstimatorResult<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(EstimatorError::BadConfig(
                "alpha must be finite and non-negative",
            ));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(EstimatorError::BadConfig(
                "beta must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(EstimatorError::BadConfig(
                "baseline_decay must lie in [0, 1)",
            ));
        }
        if self.batch_size == 0 {
            return Err(EstimatorError::BadConfig("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// One estimated descent direction plus the scalars worth logging.
///
/// The diagnostics are computed the same way for every objective, by plain
/// recomputation on the batch states, so they stay comparable across
/// algorithms: `mean_kl` is the batch mean of each trajectory's summed
/// per-step KL against the pretrained policy, and `mean_diff_residual` is
/// the batch mean of each trajectory's residual norm averaged over all
/// timesteps (independent of which timesteps the objective itself sampled).
#[derive(Debug, Clone)]
pub struct GradEstimate {
    /// Descent direction, same length as θ.
    pub grad: Vec<f64>,
    /// Batch mean of the raw (pre-baseline) rewards.
    pub mean_reward: f64,
    /// Batch mean of Σ_t KL(p_θ ‖ p_pre) on the stored states.
    pub mean_kl: f64,
    /// Batch mean of the all-steps average implied-noise residual.
    pub mean_diff_residual: f64,
}

/// Shared argument checks: non-empty batch, consistent shapes, rewards set,
/// matching layouts, finite baseline, valid config.
fn check_batch(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
) -> EstimatorResult<()> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    if params.layout != params_pre.layout {
        return Err(EstimatorError::LayoutMismatch);
    }
    if !baseline.is_finite() {
        return Err(EstimatorError::BadBaseline(baseline));
    }
    for traj in trajs {
        traj.validate(&params.layout, sched)?;
        traj.reward()?;
    }
    Ok(())
}

/// Baseline-shifted weights r̃_j = r_j − b.
fn shifted_rewards(trajs: &[Trajectory], baseline: f64) -> EstimatorResult<Vec<f64>> {
    trajs
        .iter()
        .map(|t| Ok(t.reward()? - baseline))
        .collect()
}

/// The REINFORCE core shared by every score-function objective:
/// −(1/B)·Σ_j w_j·Σ_t ∇_θ log p_θ(x_{t−1}|x_t, c), accumulated per
/// trajectory in parallel and reduced in batch order.
fn reinforce_descent(
    params: &DenoiserParams,
    trajs: &[Trajectory],
    weights: &[f64],
    sched: &NoiseSchedule,
) -> EstimatorResult<Vec<f64>> {
    crate::streams::ensure_thread_pool();
    let n_params = params.layout.param_count();
    let t_steps = sched.t_steps();
    let per: Vec<Vec<f64>> = trajs
        .par_iter()
        .map(|traj| -> EstimatorResult<Vec<f64>> {
            let mut acc = vec![0.0; n_params];
            for i in 0..t_steps {
                let t = t_steps - i;
                let mut tape = logp_step_tape(
                    &params.layout,
                    sched,
                    &traj.states[i],
                    &traj.states[i + 1],
                    traj.c,
                    t,
                )?;
                tape.forward(&params.theta, &[])?;
                let g = tape.backward()?;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
            Ok(acc)
        })
        .collect::<EstimatorResult<Vec<_>>>()?;

    let mut grad = vec![0.0; n_params];
    for (v, &w) in per.iter().zip(weights) {
        for (g, vi) in grad.iter_mut().zip(v) {
            *g += w * vi;
        }
    }
    let b = trajs.len() as f64;
    for g in grad.iter_mut() {
        *g = -(*g / b);
    }
    Ok(grad)
}

/// The timesteps the residual penalty evaluates: either one uniform draw
/// or all of `1..=T` in order.
fn draw_ts(sampling: DlpoTSampling, t_steps: usize, rng: &mut impl Rng) -> Vec<usize> {
    match sampling {
        DlpoTSampling::SingleUniform => vec![rng.random_range(1..=t_steps)],
        DlpoTSampling::AllSteps => (1..=t_steps).collect(),
    }
}

/// One corruption pair for the residual penalty: regress ε_θ(x_t, c, t)
/// toward `target`.
struct ResidualItem {
    x_t: Vec<f64>,
    target: Vec<f64>,
    c: usize,
    t: usize,
}

/// Builds each trajectory's residual items per the configured source and
/// timestep sampling. All draws happen here, sequentially in batch order:
/// per trajectory, `dataset` source first draws the dataset index, then,
/// per selected timestep (the drawn one for `single_uniform`, `1..=T` in
/// order for `all_steps`), the corruption noise.
fn build_residual_items(
    trajs: &[Trajectory],
    dataset: Option<&[Sample]>,
    cfg: &RLConfig,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> EstimatorResult<Vec<Vec<ResidualItem>>> {
    let t_steps = sched.t_steps();
    let mut all = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let items = match cfg.dl_source {
            DlSource::Trajectory => draw_ts(cfg.dlpo_t_sampling, t_steps, rng)
                .into_iter()
                .map(|t| {
                    let x_t = &traj.states[t_steps - t];
                    Ok(ResidualItem {
                        x_t: x_t.clone(),
                        target: sched.implied_noise(x_t, traj.x0(), t)?,
                        c: traj.c,
                        t,
                    })
                })
                .collect::<EstimatorResult<Vec<_>>>()?,
            DlSource::Dataset => {
                let data = match dataset {
                    Some(d) if !d.is_empty() => d,
                    _ => return Err(EstimatorError::MissingDataset),
                };
                let idx = rng.random_range(0..data.len());
                let sample = &data[idx];
                if sample.t != 0 {
                    return Err(EstimatorError::Denoiser(
                        DenoiserError::BatchSampleNotClean(sample.t),
                    ));
                }
                draw_ts(cfg.dlpo_t_sampling, t_steps, rng)
                    .into_iter()
                    .map(|t| {
                        let eps: Vec<f64> = (0..sample.x.len())
                            .map(|_| rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        Ok(ResidualItem {
                            x_t: sched.q_sample(&sample.x, t, &eps)?,
                            target: eps,
                            c: sample.c,
                            t,
                        })
                    })
                    .collect::<EstimatorResult<Vec<_>>>()?
            }
        };
        all.push(items);
    }
    Ok(all)
}

/// Per-trajectory residual d_j = mean of its items' residual norms,
/// values only (plain forwards, no tapes).
fn residual_values(
    params: &DenoiserParams,
    items: &[Vec<ResidualItem>],
    norm: LossNorm,
) -> EstimatorResult<Vec<f64>> {
    crate::streams::ensure_thread_pool();
    items
        .par_iter()
        .map(|list| -> EstimatorResult<f64> {
            let mut sum = 0.0;
            for item in list {
                let rec = NoiseRecord {
                    eps_true: item.target.clone(),
                    eps_pred: predict_eps(params, &item.x_t, item.c, item.t)?,
                };
                sum += rec.residual(norm);
            }
            Ok(sum / list.len() as f64)
        })
        .collect()
}

/// Per-trajectory residual values and gradients: d_j and ∇_θ d_j.
fn residual_values_and_grads(
    params: &DenoiserParams,
    items: &[Vec<ResidualItem>],
    norm: LossNorm,
) -> EstimatorResult<Vec<(f64, Vec<f64>)>> {
    crate::streams::ensure_thread_pool();
    let n_params = params.layout.param_count();
    items
        .par_iter()
        .map(|list| -> EstimatorResult<(f64, Vec<f64>)> {
            let mut value = 0.0;
            let mut acc = vec![0.0; n_params];
            for item in list {
                let mut tape =
                    residual_tape(&params.layout, &item.x_t, &item.target, item.c, item.t, norm)?;
                value += tape.forward(&params.theta, &[])?;
                let g = tape.backward()?;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
            let count = list.len() as f64;
            for a in acc.iter_mut() {
                *a /= count;
            }
            Ok((value / count, acc))
        })
        .collect()
}

/// Uniform logging diagnostics on the batch: (mean_kl, mean_diff_residual).
/// Recomputed from scratch on the stored states so the numbers mean the
/// same thing whatever the batch's provenance (on-policy or pool).
fn batch_diagnostics(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    sched: &NoiseSchedule,
    norm: LossNorm,
) -> EstimatorResult<(f64, f64)> {
    crate::streams::ensure_thread_pool();
    let t_steps = sched.t_steps();
    let per: Vec<(f64, f64)> = trajs
        .par_iter()
        .map(|traj| -> EstimatorResult<(f64, f64)> {
            let mut kl_sum = 0.0;
            let mut res_sum = 0.0;
            for i in 0..t_steps {
                let t = t_steps - i;
                let x_t = &traj.states[i];
                let mu = mu_of_step(params, x_t, traj.c, t, sched)?;
                let mu_pre = mu_of_step(params_pre, x_t, traj.c, t, sched)?;
                kl_sum += kl_step(&mu, &mu_pre, sched.sigma2(t))?;
                let rec = NoiseRecord {
                    eps_true: sched.implied_noise(x_t, traj.x0(), t)?,
                    eps_pred: predict_eps(params, x_t, traj.c, t)?,
                };
                res_sum += rec.residual(norm);
            }
            Ok((kl_sum, res_sum / t_steps as f64))
        })
        .collect::<EstimatorResult<Vec<_>>>()?;

    let b = trajs.len() as f64;
    let (mut kl, mut res) = (0.0, 0.0);
    for (k, r) in &per {
        kl += k;
        res += r;
    }
    Ok((kl / b, res / b))
}

/// Mean of the raw rewards and the finite-gradient guard, then assembly.
fn finish(
    grad: Vec<f64>,
    trajs: &[Trajectory],
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    sched: &NoiseSchedule,
    norm: LossNorm,
) -> EstimatorResult<GradEstimate> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(EstimatorError::NonFiniteGradient(i));
    }
    let mut mean_reward = 0.0;
    for traj in trajs {
        mean_reward += traj.reward()?;
    }
    mean_reward /= trajs.len() as f64;
    let (mean_kl, mean_diff_residual) =
        batch_diagnostics(params, params_pre, trajs, sched, norm)?;
    Ok(GradEstimate {
        grad,
        mean_reward,
        mean_kl,
        mean_diff_residual,
    })
}

/// Plain REINFORCE with weights r̃ = r − b.
pub fn grad_ddpo(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    _rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    check_batch(params, params_pre, trajs, cfg, baseline, sched)?;
    let weights = shifted_rewards(trajs, baseline)?;
    let grad = reinforce_descent(params, trajs, &weights, sched)?;
    finish(grad, trajs, params, params_pre, sched, cfg.loss_norm)
}

/// α-weighted REINFORCE plus β times the pathwise gradient of
/// (1/B)·Σ_j Σ_t KL(p_θ(·|x_t) ‖ p_pre(·|x_t)) on the stored states.
pub fn grad_dpok(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    _rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    check_batch(params, params_pre, trajs, cfg, baseline, sched)?;
    let n_params = params.layout.param_count();
    let t_steps = sched.t_steps();

    let mut grad = if cfg.alpha != 0.0 {
        let weights: Vec<f64> = shifted_rewards(trajs, baseline)?
            .iter()
            .map(|r| cfg.alpha * r)
            .collect();
        reinforce_descent(params, trajs, &weights, sched)?
    } else {
        vec![0.0; n_params]
    };

    if cfg.beta != 0.0 {
        let per: Vec<Vec<f64>> = trajs
            .par_iter()
            .map(|traj| -> EstimatorResult<Vec<f64>> {
                let mut acc = vec![0.0; n_params];
                for i in 0..t_steps {
                    let t = t_steps - i;
                    let x_t = &traj.states[i];
                    let mu_ref = mu_of_step(params_pre, x_t, traj.c, t, sched)?;
                    let mut tape =
                        kl_step_tape(&params.layout, sched, x_t, &mu_ref, traj.c, t)?;
                    tape.forward(&params.theta, &[])?;
                    let g = tape.backward()?;
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                Ok(acc)
            })
            .collect::<EstimatorResult<Vec<_>>>()?;
        let b = trajs.len() as f64;
        let mut kl_grad = vec![0.0; n_params];
        for v in &per {
            for (k, vi) in kl_grad.iter_mut().zip(v) {
                *k += vi;
            }
        }
        for (g, k) in grad.iter_mut().zip(&kl_grad) {
            *g += cfg.beta * (k / b);
        }
    }
    finish(grad, trajs, params, params_pre, sched, cfg.loss_norm)
}

/// REINFORCE with the KL folded into the reward: the weight of trajectory
/// j is r̃_j − Σ_t (log p_θ − log p_pre) recomputed on its stored states
/// (detached — the weight is a plain scalar as far as the tape is
/// concerned). At θ = θ_pre the log-density difference is exactly zero and
/// this reduces to plain REINFORCE.
pub fn grad_klinr(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    _rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    check_batch(params, params_pre, trajs, cfg, baseline, sched)?;
    crate::streams::ensure_thread_pool();
    let diffs: Vec<f64> = trajs
        .par_iter()
        .map(|traj| Ok(traj_logp_diff(traj, params, params_pre, sched)?))
        .collect::<EstimatorResult<Vec<_>>>()?;
    let weights: Vec<f64> = shifted_rewards(trajs, baseline)?
        .iter()
        .zip(&diffs)
        .map(|(r, d)| r - d)
        .collect();
    let grad = reinforce_descent(params, trajs, &weights, sched)?;
    finish(grad, trajs, params, params_pre, sched, cfg.loss_norm)
}

/// The two-mode reward-plus-residual objective.
///
/// `direct_grad`: descent direction α·(REINFORCE with weights r̃) + β·∇D,
/// where D is the batch-mean residual norm at the configured timesteps and
/// source, differentiated pathwise. `shaped_reward`: plain REINFORCE with
/// the detached weight α·r̃_j − β·d_j.
///
/// When β = 0 the residual machinery (and its draws) is skipped entirely;
/// when α = 0 in `direct_grad` mode the REINFORCE pass (which draws
/// nothing) is skipped.
pub fn grad_dlpo(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    dataset: Option<&[Sample]>,
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    check_batch(params, params_pre, trajs, cfg, baseline, sched)?;
    let n_params = params.layout.param_count();
    let rtilde = shifted_rewards(trajs, baseline)?;

    let grad = match cfg.dlpo_mode {
        DlpoMode::DirectGrad => {
            let mut grad = if cfg.alpha != 0.0 {
                let weights: Vec<f64> = rtilde.iter().map(|r| cfg.alpha * r).collect();
                reinforce_descent(params, trajs, &weights, sched)?
            } else {
                vec![0.0; n_params]
            };
            if cfg.beta != 0.0 {
                let items = build_residual_items(trajs, dataset, cfg, sched, rng)?;
                let per = residual_values_and_grads(params, &items, cfg.loss_norm)?;
                let b = trajs.len() as f64;
                let mut dgrad = vec![0.0; n_params];
                for (_, g) in &per {
                    for (d, gi) in dgrad.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                for (g, d) in grad.iter_mut().zip(&dgrad) {
                    *g += cfg.beta * (d / b);
                }
            }
            grad
        }
        DlpoMode::ShapedReward => {
            let weights: Vec<f64> = if cfg.beta != 0.0 {
                let items = build_residual_items(trajs, dataset, cfg, sched, rng)?;
                let dvals = residual_values(params, &items, cfg.loss_norm)?;
                rtilde
                    .iter()
                    .zip(&dvals)
                    .map(|(r, d)| cfg.alpha * r - cfg.beta * d)
                    .collect()
            } else {
                rtilde.iter().map(|r| cfg.alpha * r).collect()
            };
            reinforce_descent(params, trajs, &weights, sched)?
        }
    };
    finish(grad, trajs, params, params_pre, sched, cfg.loss_norm)
}

/// The residual penalty alone: literally [`grad_dlpo`] with α forced to 0,
/// so the two agree bit for bit given the same inputs and generator state.
pub fn grad_onlydl(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    dataset: Option<&[Sample]>,
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    let mut zeroed = cfg.clone();
    zeroed.alpha = 0.0;
    grad_dlpo(params, params_pre, trajs, dataset, &zeroed, baseline, sched, rng)
}

/// Reward-weighted regression: the pathwise descent gradient of
/// (1/B)·Σ_j r̃_j·d_j, where d_j is trajectory j's implied-noise residual
/// at one uniformly drawn timestep — the variational stand-in for
/// −log p_θ(x_0|c). The batch should come from the static pretrained pool;
/// the estimator itself only draws the timesteps (sequentially, in batch
/// order, one per trajectory).
pub fn grad_rwr(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    check_batch(params, params_pre, trajs, cfg, baseline, sched)?;
    let t_steps = sched.t_steps();
    let items: Vec<Vec<ResidualItem>> = trajs
        .iter()
        .map(|traj| -> EstimatorResult<Vec<ResidualItem>> {
            let t = rng.random_range(1..=t_steps);
            let x_t = &traj.states[t_steps - t];
            Ok(vec![ResidualItem {
                x_t: x_t.clone(),
                target: sched.implied_noise(x_t, traj.x0(), t)?,
                c: traj.c,
                t,
            }])
        })
        .collect::<EstimatorResult<Vec<_>>>()?;

    let weights = shifted_rewards(trajs, baseline)?;
    let per = residual_values_and_grads(params, &items, cfg.loss_norm)?;
    let n_params = params.layout.param_count();
    let mut grad = vec![0.0; n_params];
    for ((_, g), &w) in per.iter().zip(&weights) {
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += w * gi;
        }
    }
    let b = trajs.len() as f64;
    for g in grad.iter_mut() {
        *g /= b;
    }
    finish(grad, trajs, params, params_pre, sched, cfg.loss_norm)
}

/// Dispatches to the estimator selected by `cfg.algo`. `dataset` is only
/// consulted by `dlpo`/`onlydl` with `dl_source = dataset`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradient(
    params: &DenoiserParams,
    params_pre: &DenoiserParams,
    trajs: &[Trajectory],
    dataset: Option<&[Sample]>,
    cfg: &RLConfig,
    baseline: f64,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> EstimatorResult<GradEstimate> {
    match cfg.algo {
        Algo::Rwr => grad_rwr(params, params_pre, trajs, cfg, baseline, sched, rng),
        Algo::Ddpo => grad_ddpo(params, params_pre, trajs, cfg, baseline, sched, rng),
        Algo::Dpok => grad_dpok(params, params_pre, trajs, cfg, baseline, sched, rng),
        Algo::Klinr => grad_klinr(params, params_pre, trajs, cfg, baseline, sched, rng),
        Algo::Dlpo => grad_dlpo(params, params_pre, trajs, dataset, cfg, baseline, sched, rng),
        Algo::Onlydl => {
            grad_onlydl(params, params_pre, trajs, dataset, cfg, baseline, sched, rng)
        }
    }
}
