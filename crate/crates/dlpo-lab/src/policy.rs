//! The reverse diffusion process viewed as a Markov decision process.
//!
//! Ancestral sampling runs the learned reverse chain from a standard-normal
//! x_T down to x_0. Treated as an MDP, each reverse step is an action drawn
//! from a diagonal Gaussian whose mean the denoiser predicts and whose
//! variance comes from the schedule; the only reward arrives at the end,
//! when x_0 is scored. A [`Trajectory`] records everything a fine-tuning
//! gradient estimator later needs: the visited states, each action's
//! log-density under the sampling policy, the cached noise predictions, and
//! (after scoring) the terminal reward. There is deliberately just one
//! reward field — rewards at interior steps do not exist in this MDP.
//!
//! Both the current and the pretrained policy share the schedule's variances
//! (only the means differ), which is why the per-step KL divergence has the
//! simple closed form in [`kl_step`].

use crate::autograd::{AutogradError, Tape};
use crate::denoiser::{
    eps_tape, mu_from_eps, mu_tape, predict_eps, DenoiserError, DenoiserLayout, DenoiserParams,
};
use crate::diffusion::{DiffusionError, NoiseSchedule};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

/// Errors from trajectory sampling and log-density computations.
#[derive(Debug, Error)]
pub enum PolicyError {
    /// Condition class out of range.
    #[error("condition class {c} out of range (K = {k})")]
    ClassOutOfRange { c: usize, k: usize },
    /// Gaussian variance must be positive.
    #[error("sigma2 must be positive, got {0}")]
    BadSigma2(f64),
    /// Two vectors that must share a length do not.
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    /// The schedule and the denoiser disagree about the step count.
    #[error("schedule has {sched} steps but the denoiser layout expects {layout}")]
    StepCountMismatch { sched: usize, layout: usize },
    /// A trajectory's recorded shapes are inconsistent.
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(&'static str),
    /// The terminal reward was read before scoring.
    #[error("trajectory reward is not set")]
    RewardUnset,
    /// A denoiser failure during sampling or recomputation.
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    /// A schedule failure during sampling or recomputation.
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    /// An autograd failure while building a step tape.
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Convenience alias for policy results.
pub type PolicyResult<T> = Result<T, PolicyError>;

/// One reverse-process rollout.
///
/// `states[0]` is the initial draw x_T and `states[T]` is the final x_0.
/// Step `i` (0-based) is the transition `states[i] -> states[i+1]` taken at
/// diffusion timestep `t = T - i`; `logp[i]` is its Gaussian log-density
/// under the sampling policy and `eps_pred[i]` the denoiser output that
/// produced its mean.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Condition class the rollout was conditioned on.
    pub c: usize,
    /// Visited states, x_T first, x_0 last (`T + 1` entries).
    pub states: Vec<Vec<f64>>,
    /// Per-step action log-densities (`T` entries).
    pub logp: Vec<f64>,
    /// Cached denoiser outputs along the rollout (`T` entries).
    pub eps_pred: Vec<Vec<f64>>,
    /// Terminal reward, set once x_0 has been scored.
    pub reward: Option<f64>,
}

impl Trajectory {
    /// Number of reverse steps T.
    pub fn t_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// The diffusion timestep of 0-based step `i` (steps run t = T down
    /// to 1).
    pub fn timestep(&self, i: usize) -> usize {
        self.t_steps() - i
    }

    /// The generated waveform x_0.
    pub fn x0(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }

    /// Terminal reward; an error if the trajectory has not been scored yet.
    pub fn reward(&self) -> PolicyResult<f64> {
        self.reward.ok_or(PolicyError::RewardUnset)
    }

    /// Checks the recorded shapes against a layout and schedule.
    pub fn validate(&self, layout: &DenoiserLayout, sched: &NoiseSchedule) -> PolicyResult<()> {
        let t = sched.t_steps();
        if layout.t_steps != t {
            return Err(PolicyError::StepCountMismatch {
                sched: t,
                layout: layout.t_steps,
            });
        }
        if self.c >= layout.k {
            return Err(PolicyError::ClassOutOfRange {
                c: self.c,
                k: layout.k,
            });
        }
        if self.states.len() != t + 1 {
            return Err(PolicyError::MalformedTrajectory("state count"));
        }
        if self.logp.len() != t || self.eps_pred.len() != t {
            return Err(PolicyError::MalformedTrajectory("per-step record count"));
        }
        if self.states.iter().any(|s| s.len() != layout.n)
            || self.eps_pred.iter().any(|e| e.len() != layout.n)
        {
            return Err(PolicyError::MalformedTrajectory("state width"));
        }
        Ok(())
    }
}

/// Log-density of a diagonal Gaussian with mean `mu` and shared per-axis
/// variance `sigma2`, evaluated at `x`:
/// −N/2 · ln(2π σ²) − ‖x − μ‖² / (2σ²).
///
/// The arithmetic arrangement matches the gradient tapes exactly, so stored
/// and recomputed log-densities agree bit for bit.
pub fn logprob_step(mu: &[f64], sigma2: f64, x: &[f64]) -> PolicyResult<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(PolicyError::BadSigma2(sigma2));
    }
    if mu.len() != x.len() {
        return Err(PolicyError::LengthMismatch {
            left: mu.len(),
            right: x.len(),
        });
    }
    let mut ss = 0.0;
    for (xi, mi) in x.iter().zip(mu) {
        let d = xi - mi;
        ss += d * d;
    }
    let norm_const = -(mu.len() as f64 / 2.0) * (2.0 * PI * sigma2).ln();
    let quad_coef = -1.0 / (2.0 * sigma2);
    Ok(quad_coef * ss + norm_const)
}

/// KL divergence between two diagonal Gaussians that share the variance
/// `sigma2` and differ only in mean: ‖μ_a − μ_b‖² / (2σ²).
pub fn kl_step(mu_a: &[f64], mu_b: &[f64], sigma2: f64) -> PolicyResult<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(PolicyError::BadSigma2(sigma2));
    }
    if mu_a.len() != mu_b.len() {
        return Err(PolicyError::LengthMismatch {
            left: mu_a.len(),
            right: mu_b.len(),
        });
    }
    let mut ss = 0.0;
    for (a, b) in mu_a.iter().zip(mu_b) {
        let d = a - b;
        ss += d * d;
    }
    Ok(1.0 / (2.0 * sigma2) * ss)
}

/// Samples one reverse-process rollout under `params`, recording states,
/// per-step log-densities, and the cached noise predictions.
///
/// Draw order is fixed (N normals for x_T, then N per step), so a given
/// generator state always produces the same trajectory.
pub fn sample_trajectory(
    params: &DenoiserParams,
    c: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> PolicyResult<Trajectory> {
    let layout = &params.layout;
    if layout.t_steps != sched.t_steps() {
        return Err(PolicyError::StepCountMismatch {
            sched: sched.t_steps(),
            layout: layout.t_steps,
        });
    }
    if c >= layout.k {
        return Err(PolicyError::ClassOutOfRange { c, k: layout.k });
    }
    let t_steps = sched.t_steps();
    let n = layout.n;

    let mut x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut states = Vec::with_capacity(t_steps + 1);
    let mut logp = Vec::with_capacity(t_steps);
    let mut eps_pred = Vec::with_capacity(t_steps);
    states.push(x.clone());

    for i in 0..t_steps {
        let t = t_steps - i;
        let eps_hat = predict_eps(params, &x, c, t)?;
        let mu = mu_from_eps(&x, &eps_hat, t, sched)?;
        let sigma2 = sched.sigma2(t);
        let sigma = sigma2.sqrt();
        let next: Vec<f64> = mu
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        logp.push(logprob_step(&mu, sigma2, &next)?);
        eps_pred.push(eps_hat);
        states.push(next.clone());
        x = next;
    }

    Ok(Trajectory {
        c,
        states,
        logp,
        eps_pred,
        reward: None,
    })
}

/// Samples a batch of trajectories in parallel, one per entry of `classes`,
/// with an independent deterministic RNG per element (`make_rng(j)`).
/// Results are returned in input order regardless of scheduling.
pub fn sample_trajectories(
    params: &DenoiserParams,
    classes: &[usize],
    sched: &NoiseSchedule,
    make_rng: impl Fn(usize) -> ChaCha8Rng + Sync,
) -> PolicyResult<Vec<Trajectory>> {
    crate::streams::ensure_thread_pool();
    classes
        .par_iter()
        .enumerate()
        .map(|(j, &c)| {
            let mut rng = make_rng(j);
            sample_trajectory(params, c, sched, &mut rng)
        })
        .collect()
}

/// The policy mean at one reverse step: predict the noise with `params`
/// and convert it to the transition mean.
pub fn mu_of_step(
    params: &DenoiserParams,
    x_t: &[f64],
    c: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> PolicyResult<Vec<f64>> {
    let eps_hat = predict_eps(params, x_t, c, t)?;
    Ok(mu_from_eps(x_t, &eps_hat, t, sched)?)
}

/// Recomputes the per-step log-densities of `traj` under `params` on the
/// stored states (the cached `eps_pred` is ignored on purpose: this is the
/// independent recomputation path).
pub fn recompute_logp(
    traj: &Trajectory,
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> PolicyResult<Vec<f64>> {
    traj.validate(&params.layout, sched)?;
    let t_steps = sched.t_steps();
    let mut out = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let t = t_steps - i;
        let mu = mu_of_step(params, &traj.states[i], traj.c, t, sched)?;
        out.push(logprob_step(&mu, sched.sigma2(t), &traj.states[i + 1])?);
    }
    Ok(out)
}

/// Trajectory-level log-density difference Σ_t [log p_a − log p_b] on the
/// stored states: a single-sample estimate of the sequence-level KL between
/// the two models when the trajectory was drawn from `params_a`.
///
/// With `params_a == params_b` every per-step difference is exactly zero.
pub fn traj_logp_diff(
    traj: &Trajectory,
    params_a: &DenoiserParams,
    params_b: &DenoiserParams,
    sched: &NoiseSchedule,
) -> PolicyResult<f64> {
    let lp_a = recompute_logp(traj, params_a, sched)?;
    let lp_b = recompute_logp(traj, params_b, sched)?;
    let mut sum = 0.0;
    for (a, b) in lp_a.iter().zip(&lp_b) {
        sum += a - b;
    }
    Ok(sum)
}

/// Builds a single-use tape whose scalar output is
/// log p_θ(x_prev | x_t, c) at timestep `t`, with both states held fixed
/// as constants. Differentiating it yields the score-function term of one
/// reverse step.
pub fn logp_step_tape(
    layout: &DenoiserLayout,
    sched: &NoiseSchedule,
    x_t: &[f64],
    x_prev: &[f64],
    c: usize,
    t: usize,
) -> PolicyResult<Tape> {
    let sigma2 = sched.sigma2(t);
    let mut tape = Tape::new(layout.param_count(), 0);
    let x_node = tape.constant(x_t.to_vec())?;
    let eps_hat = eps_tape(&mut tape, layout, x_node, c, t)?;
    let mu = mu_tape(&mut tape, x_node, eps_hat, t, sched)?;
    let x_prev_node = tape.constant(x_prev.to_vec())?;
    let diff = tape.sub(x_prev_node, mu)?;
    let sq = tape.square(diff)?;
    let ss = tape.sum(sq)?;
    let quad = tape.scale(ss, -1.0 / (2.0 * sigma2))?;
    let norm_const = -(layout.n as f64 / 2.0) * (2.0 * PI * sigma2).ln();
    let const_node = tape.constant(vec![norm_const])?;
    tape.add(quad, const_node)?;
    Ok(tape)
}

/// Builds a single-use tape whose scalar output is the per-step KL
/// ‖μ_θ(x_t) − μ_ref‖² / (2σ_t²), with the state and the reference mean held
/// fixed. Differentiating it yields the pathwise KL-penalty term of one
/// reverse step.
pub fn kl_step_tape(
    layout: &DenoiserLayout,
    sched: &NoiseSchedule,
    x_t: &[f64],
    mu_ref: &[f64],
    c: usize,
    t: usize,
) -> PolicyResult<Tape> {
    let sigma2 = sched.sigma2(t);
    let mut tape = Tape::new(layout.param_count(), 0);
    let x_node = tape.constant(x_t.to_vec())?;
    let eps_hat = eps_tape(&mut tape, layout, x_node, c, t)?;
    let mu = mu_tape(&mut tape, x_node, eps_hat, t, sched)?;
    let ref_node = tape.constant(mu_ref.to_vec())?;
    let diff = tape.sub(mu, ref_node)?;
    let sq = tape.square(diff)?;
    let ss = tape.sum(sq)?;
    tape.scale(ss, 1.0 / (2.0 * sigma2))?;
    Ok(tape)
}
