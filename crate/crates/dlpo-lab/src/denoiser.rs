//! The conditional noise-prediction network ε_θ(x_t, c, t) and its losses.
//!
//! The network is a deliberately small MLP: the noisy waveform x_t is
//! concatenated with a learned class embedding and a learned timestep
//! embedding, passed through two tanh hidden layers, and mapped linearly to
//! a noise estimate of the waveform's length. All parameters live in one
//! flat `f64` vector with documented offsets (see [`DenoiserLayout`]), which
//! makes optimizers, checkpoints, and finite-difference oracles trivial.
//!
//! The forward pass exists twice on purpose: [`predict_eps`] is the plain
//! evaluation used by samplers, and [`eps_tape`] appends the identical
//! computation to an autograd [`Tape`]. Both use the same kernels and the
//! same accumulation order, so their outputs agree bit for bit — a property
//! the tests pin down, because trajectory log-densities recorded during
//! sampling must match what gradient tapes later recompute.

use crate::autograd::{self, AutogradError, NodeId, Tape};
use crate::diffusion::{DiffusionError, NoiseSchedule, Sample};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

/// Errors from layout construction, parameter validation, or the losses.
#[derive(Debug, Error)]
pub enum DenoiserError {
    /// Every layout dimension must be at least 1.
    #[error("layout dimensions must all be at least 1")]
    BadLayout,
    /// The flat parameter vector does not match the layout.
    #[error("parameter vector has length {got}, layout requires {expected}")]
    WrongParamCount { got: usize, expected: usize },
    /// A parameter is NaN or infinite.
    #[error("non-finite parameter at index {0}")]
    NonFiniteParam(usize),
    /// Condition class out of range.
    #[error("condition class {c} out of range (K = {k})")]
    ClassOutOfRange { c: usize, k: usize },
    /// 1-based timestep out of range.
    #[error("timestep {t} out of range 1..={t_steps}")]
    TimestepOutOfRange { t: usize, t_steps: usize },
    /// The waveform input has the wrong length.
    #[error("input has length {got}, layout expects {expected}")]
    WrongInputLength { got: usize, expected: usize },
    /// The training loss needs at least one batch element.
    #[error("batch must be nonempty")]
    EmptyBatch,
    /// The training loss corrupts clean data itself; pre-corrupted samples
    /// are not accepted.
    #[error("training batch sample sits at step {0}, expected clean data (step 0)")]
    BatchSampleNotClean(usize),
    /// Injected draws do not line up with the batch.
    #[error("got {draws} draw records for a batch of {batch}")]
    DrawCountMismatch { draws: usize, batch: usize },
    /// A loss-norm name that is neither of the two known ones.
    #[error("unknown loss norm {0:?}, expected one of: l2, l2sq")]
    UnknownNorm(String),
    /// An autograd failure inside a loss tape.
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    /// A schedule failure inside a loss.
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Convenience alias for denoiser results.
pub type DenoiserResult<T> = Result<T, DenoiserError>;

/// Which norm the denoising loss applies to the residual ε − ε_θ.
///
/// The plain Euclidean norm is the default; the squared variant is the
/// common alternative convention and is kept behind configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    /// Unsquared Euclidean norm ‖ε − ε_θ‖₂.
    L2,
    /// Squared Euclidean norm ‖ε − ε_θ‖₂².
    L2Sq,
}

impl LossNorm {
    /// Canonical lowercase name, as used in config files.
    pub fn as_str(&self) -> &'static str {
        match self {
            LossNorm::L2 => "l2",
            LossNorm::L2Sq => "l2sq",
        }
    }
}

impl std::fmt::Display for LossNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossNorm {
    type Err = DenoiserError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(LossNorm::L2),
            "l2sq" => Ok(LossNorm::L2Sq),
            other => Err(DenoiserError::UnknownNorm(other.to_string())),
        }
    }
}

/// A matched pair of target noise ε̃ and network prediction ε_θ; the
/// distance between them is the denoising residual that both pretraining
/// and several fine-tuning penalties minimize.
#[derive(Debug, Clone)]
pub struct NoiseRecord {
    /// The injected (or trajectory-implied) noise ε̃.
    pub eps_true: Vec<f64>,
    /// The network output ε_θ(x_t, c, t).
    pub eps_pred: Vec<f64>,
}

impl NoiseRecord {
    /// Residual distance under the given norm, accumulated in index order
    /// (the same order gradient tapes use).
    pub fn residual(&self, norm: LossNorm) -> f64 {
        let mut ss = 0.0;
        for (a, b) in self.eps_true.iter().zip(&self.eps_pred) {
            let d = a - b;
            ss += d * d;
        }
        match norm {
            LossNorm::L2 => ss.sqrt(),
            LossNorm::L2Sq => ss,
        }
    }
}

/// Shape of the denoiser and the offsets of every parameter block inside
/// the flat vector θ.
///
/// Block order (row-major matrices):
///
/// | block            | offset                  | size          |
/// |------------------|-------------------------|---------------|
/// | class embeddings | 0                       | `k · d_c`     |
/// | step embeddings  | `k·d_c`                 | `t_steps · d_t` |
/// | W1               | after embeddings        | `h1 · (n + d_c + d_t)` |
/// | b1               | after W1                | `h1`          |
/// | W2               | after b1                | `h2 · h1`     |
/// | b2               | after W2                | `h2`          |
/// | W3               | after b2                | `n · h2`      |
/// | b3               | after W3                | `n`           |
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserLayout {
    /// Waveform length N.
    pub n: usize,
    /// Number of condition classes K.
    pub k: usize,
    /// Number of diffusion steps T (the step embedding table has T rows).
    pub t_steps: usize,
    /// Class embedding width.
    pub d_c: usize,
    /// Timestep embedding width.
    pub d_t: usize,
    /// First hidden width.
    pub h1: usize,
    /// Second hidden width.
    pub h2: usize,
}

impl DenoiserLayout {
    /// Validates that every dimension is at least 1.
    pub fn new(
        n: usize,
        k: usize,
        t_steps: usize,
        d_c: usize,
        d_t: usize,
        h1: usize,
        h2: usize,
    ) -> DenoiserResult<Self> {
        if [n, k, t_steps, d_c, d_t, h1, h2].iter().any(|&d| d == 0) {
            return Err(DenoiserError::BadLayout);
        }
        Ok(DenoiserLayout {
            n,
            k,
            t_steps,
            d_c,
            d_t,
            h1,
            h2,
        })
    }

    /// Width of the MLP input: waveform plus both embeddings.
    pub fn input_width(&self) -> usize {
        self.n + self.d_c + self.d_t
    }

    /// Offset of the embedding row for class `c`.
    pub fn cond_embed_offset(&self, c: usize) -> usize {
        c * self.d_c
    }

    /// Offset of the embedding row for (1-based) timestep `t`.
    pub fn time_embed_offset(&self, t: usize) -> usize {
        self.k * self.d_c + (t - 1) * self.d_t
    }

    /// Offset of the first hidden layer's weight matrix.
    pub fn w1_offset(&self) -> usize {
        self.k * self.d_c + self.t_steps * self.d_t
    }

    /// Offset of the first hidden layer's bias.
    pub fn b1_offset(&self) -> usize {
        self.w1_offset() + self.h1 * self.input_width()
    }

    /// Offset of the second hidden layer's weight matrix.
    pub fn w2_offset(&self) -> usize {
        self.b1_offset() + self.h1
    }

    /// Offset of the second hidden layer's bias.
    pub fn b2_offset(&self) -> usize {
        self.w2_offset() + self.h2 * self.h1
    }

    /// Offset of the output layer's weight matrix.
    pub fn w3_offset(&self) -> usize {
        self.b2_offset() + self.h2
    }

    /// Offset of the output layer's bias.
    pub fn b3_offset(&self) -> usize {
        self.w3_offset() + self.n * self.h2
    }

    /// Total parameter count of the flat vector θ.
    pub fn param_count(&self) -> usize {
        self.b3_offset() + self.n
    }
}

/// The denoiser's flat parameter vector together with its layout.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    /// Shape and offsets of every block in `theta`.
    pub layout: DenoiserLayout,
    /// The flat parameter vector.
    pub theta: Vec<f64>,
}

impl DenoiserParams {
    /// All-zero parameters (the network then outputs the zero vector).
    pub fn zeros(layout: DenoiserLayout) -> Self {
        let theta = vec![0.0; layout.param_count()];
        DenoiserParams { layout, theta }
    }

    /// Seeded initialization: layer weights and biases uniform in
    /// ±1/√fan_in, embedding tables standard normal scaled by 0.1. Blocks
    /// are drawn in offset order, so the same seed always produces the same
    /// vector.
    pub fn init(layout: DenoiserLayout, rng: &mut impl Rng) -> Self {
        let mut theta = Vec::with_capacity(layout.param_count());
        for _ in 0..layout.k * layout.d_c + layout.t_steps * layout.d_t {
            theta.push(rng.sample::<f64, _>(StandardNormal) * 0.1);
        }
        let mut layer = |count: usize, fan_in: usize, theta: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..count {
                theta.push(rng.random_range(-bound..bound));
            }
        };
        let in_w = layout.input_width();
        layer(layout.h1 * in_w + layout.h1, in_w, &mut theta);
        layer(layout.h2 * layout.h1 + layout.h2, layout.h1, &mut theta);
        layer(layout.n * layout.h2 + layout.n, layout.h2, &mut theta);
        debug_assert_eq!(theta.len(), layout.param_count());
        DenoiserParams { layout, theta }
    }

    /// Wraps an existing vector after checking length and finiteness.
    pub fn from_theta(layout: DenoiserLayout, theta: Vec<f64>) -> DenoiserResult<Self> {
        let expected = layout.param_count();
        if theta.len() != expected {
            return Err(DenoiserError::WrongParamCount {
                got: theta.len(),
                expected,
            });
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFiniteParam(i));
        }
        Ok(DenoiserParams { layout, theta })
    }
}

fn check_call(layout: &DenoiserLayout, x_t: &[f64], c: usize, t: usize) -> DenoiserResult<()> {
    if c >= layout.k {
        return Err(DenoiserError::ClassOutOfRange { c, k: layout.k });
    }
    if t < 1 || t > layout.t_steps {
        return Err(DenoiserError::TimestepOutOfRange {
            t,
            t_steps: layout.t_steps,
        });
    }
    if x_t.len() != layout.n {
        return Err(DenoiserError::WrongInputLength {
            got: x_t.len(),
            expected: layout.n,
        });
    }
    Ok(())
}

/// Plain (untaped) forward pass: ε_θ(x_t, c, t).
///
/// Bit-identical to evaluating [`eps_tape`] on the same arguments.
pub fn predict_eps(
    params: &DenoiserParams,
    x_t: &[f64],
    c: usize,
    t: usize,
) -> DenoiserResult<Vec<f64>> {
    let l = &params.layout;
    check_call(l, x_t, c, t)?;
    let theta = &params.theta;
    let in_w = l.input_width();

    let mut z = Vec::with_capacity(in_w);
    z.extend_from_slice(x_t);
    z.extend_from_slice(&theta[l.cond_embed_offset(c)..][..l.d_c]);
    z.extend_from_slice(&theta[l.time_embed_offset(t)..][..l.d_t]);

    let mut a1 = vec![0.0; l.h1];
    autograd::matvec(&theta[l.w1_offset()..][..l.h1 * in_w], &z, l.h1, in_w, &mut a1);
    let b1 = &theta[l.b1_offset()..][..l.h1];
    let h1: Vec<f64> = a1.iter().zip(b1).map(|(a, b)| (a + b).tanh()).collect();

    let mut a2 = vec![0.0; l.h2];
    autograd::matvec(
        &theta[l.w2_offset()..][..l.h2 * l.h1],
        &h1,
        l.h2,
        l.h1,
        &mut a2,
    );
    let b2 = &theta[l.b2_offset()..][..l.h2];
    let h2: Vec<f64> = a2.iter().zip(b2).map(|(a, b)| (a + b).tanh()).collect();

    let mut a3 = vec![0.0; l.n];
    autograd::matvec(
        &theta[l.w3_offset()..][..l.n * l.h2],
        &h2,
        l.n,
        l.h2,
        &mut a3,
    );
    let b3 = &theta[l.b3_offset()..][..l.n];
    Ok(a3.iter().zip(b3).map(|(a, b)| a + b).collect())
}

/// Appends the denoiser forward pass to `tape` and returns the node holding
/// ε_θ(x_t, c, t). `x_t` must already be a node of length `layout.n` (an
/// input or a constant); `c` and `t` select embedding rows and must be valid
/// for the layout — callers validate them at their own boundary.
pub fn eps_tape(
    tape: &mut Tape,
    layout: &DenoiserLayout,
    x_t: NodeId,
    c: usize,
    t: usize,
) -> Result<NodeId, AutogradError> {
    debug_assert!(c < layout.k && t >= 1 && t <= layout.t_steps);
    let in_w = layout.input_width();
    let e_c = tape.param(layout.cond_embed_offset(c), layout.d_c)?;
    let e_t = tape.param(layout.time_embed_offset(t), layout.d_t)?;
    let z = tape.concat(&[x_t, e_c, e_t])?;

    let w1 = tape.param(layout.w1_offset(), layout.h1 * in_w)?;
    let a1 = tape.matvec(w1, z, layout.h1, in_w)?;
    let b1 = tape.param(layout.b1_offset(), layout.h1)?;
    let z1 = tape.add(a1, b1)?;
    let h1 = tape.tanh(z1)?;

    let w2 = tape.param(layout.w2_offset(), layout.h2 * layout.h1)?;
    let a2 = tape.matvec(w2, h1, layout.h2, layout.h1)?;
    let b2 = tape.param(layout.b2_offset(), layout.h2)?;
    let z2 = tape.add(a2, b2)?;
    let h2 = tape.tanh(z2)?;

    let w3 = tape.param(layout.w3_offset(), layout.n * layout.h2)?;
    let a3 = tape.matvec(w3, h2, layout.n, layout.h2)?;
    let b3 = tape.param(layout.b3_offset(), layout.n)?;
    tape.add(a3, b3)
}

/// Reverse-step mean from a noise estimate:
/// μ = (1/√α_t) · (x_t − (β_t/√(1−ᾱ_t)) · ε̂).
///
/// This exact arrangement is also used inside gradient tapes, so recorded
/// means and recomputed means agree bit for bit.
pub fn mu_from_eps(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> DenoiserResult<Vec<f64>> {
    if t < 1 || t > sched.t_steps() {
        return Err(DenoiserError::TimestepOutOfRange {
            t,
            t_steps: sched.t_steps(),
        });
    }
    if x_t.len() != eps_hat.len() {
        return Err(DiffusionError::LengthMismatch {
            left: x_t.len(),
            right: eps_hat.len(),
        }
        .into());
    }
    let (inv_sqrt_alpha, eps_coef) = mu_coefficients(sched, t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(xt, e)| inv_sqrt_alpha * (xt - eps_coef * e))
        .collect())
}

/// The two scalars of the reverse-mean formula: 1/√α_t and β_t/√(1−ᾱ_t).
pub(crate) fn mu_coefficients(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    (inv_sqrt_alpha, eps_coef)
}

/// Appends `mu_from_eps` to a tape on top of an ε̂ node. `x_t` is a node of
/// the same length (input or constant).
pub fn mu_tape(
    tape: &mut Tape,
    x_t: NodeId,
    eps_hat: NodeId,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<NodeId, AutogradError> {
    let (inv_sqrt_alpha, eps_coef) = mu_coefficients(sched, t);
    let scaled = tape.scale(eps_hat, eps_coef)?;
    let centered = tape.sub(x_t, scaled)?;
    tape.scale(centered, inv_sqrt_alpha)
}

/// One training draw for [`ddpm_loss_with_draws`]: the uniform timestep and
/// the standard-normal corruption noise for one batch element.
#[derive(Debug, Clone)]
pub struct LossDraw {
    /// Timestep in `1..=T`.
    pub t: usize,
    /// Corruption noise ε of the waveform length.
    pub eps: Vec<f64>,
}

/// Builds the per-element residual objective ‖ε − ε_θ(x_t, c, t)‖ (or its
/// square) as a single-use tape. Exposed to the estimators, which reuse the
/// same construction for reward-weighted and penalty terms.
pub(crate) fn residual_tape(
    layout: &DenoiserLayout,
    x_t: &[f64],
    eps_target: &[f64],
    c: usize,
    t: usize,
    norm: LossNorm,
) -> Result<Tape, AutogradError> {
    let mut tape = Tape::new(layout.param_count(), 0);
    let x_node = tape.constant(x_t.to_vec())?;
    let target = tape.constant(eps_target.to_vec())?;
    let eps_hat = eps_tape(&mut tape, layout, x_node, c, t)?;
    let diff = tape.sub(target, eps_hat)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    if norm == LossNorm::L2 {
        tape.sqrt(total)?;
    }
    Ok(tape)
}

/// Denoising training loss on a batch of clean waveforms: for each element
/// a timestep is drawn uniformly from `1..=T` and fresh standard-normal
/// noise corrupts the waveform via the closed-form forward process; the
/// loss is the batch mean of the residual norms and the gradient is its
/// exact derivative with respect to θ.
///
/// All randomness is drawn from `rng` up front in batch order, so the
/// result is deterministic for a given generator state regardless of how
/// the per-element work is parallelized.
pub fn ddpm_loss(
    params: &DenoiserParams,
    batch: &[Sample],
    sched: &NoiseSchedule,
    norm: LossNorm,
    rng: &mut impl Rng,
) -> DenoiserResult<(f64, Vec<f64>)> {
    let draws: Vec<LossDraw> = batch
        .iter()
        .map(|_| LossDraw {
            t: rng.random_range(1..=sched.t_steps()),
            eps: (0..params.layout.n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        })
        .collect();
    ddpm_loss_with_draws(params, batch, &draws, sched, norm)
}

/// Deterministic core of [`ddpm_loss`] with the per-element draws injected.
/// Used directly by tests and oracles that need to pin the corruption noise
/// (e.g. forcing ε = 0 to exercise the zero-residual subgradient rule).
pub fn ddpm_loss_with_draws(
    params: &DenoiserParams,
    batch: &[Sample],
    draws: &[LossDraw],
    sched: &NoiseSchedule,
    norm: LossNorm,
) -> DenoiserResult<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(DenoiserError::EmptyBatch);
    }
    if draws.len() != batch.len() {
        return Err(DenoiserError::DrawCountMismatch {
            draws: draws.len(),
            batch: batch.len(),
        });
    }
    for (sample, draw) in batch.iter().zip(draws) {
        if sample.t != 0 {
            return Err(DenoiserError::BatchSampleNotClean(sample.t));
        }
        check_call(&params.layout, &sample.x, sample.c, draw.t)?;
    }
    crate::streams::ensure_thread_pool();

    let per_element: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .zip(draws)
        .map(|(sample, draw)| -> DenoiserResult<(f64, Vec<f64>)> {
            let x_t = sched.q_sample(&sample.x, draw.t, &draw.eps)?;
            let mut tape =
                residual_tape(&params.layout, &x_t, &draw.eps, sample.c, draw.t, norm)?;
            let value = tape.forward(&params.theta, &[])?;
            let grad = tape.backward()?;
            Ok((value, grad))
        })
        .collect::<DenoiserResult<Vec<_>>>()?;

    // Index-ordered reduction keeps the result independent of thread count.
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.layout.param_count()];
    for (value, g) in &per_element {
        loss += value;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    loss /= b;
    for gi in grad.iter_mut() {
        *gi /= b;
    }
    Ok((loss, grad))
}
