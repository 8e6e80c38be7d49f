//! Noise schedule and forward-process math for denoising diffusion.
//!
//! A [`NoiseSchedule`] holds the per-step corruption variances β_t of a
//! linear schedule together with everything derived from them: α_t = 1 − β_t,
//! the running products ᾱ_t, and the reverse-step (posterior) variances σ_t².
//! On top of the schedule this module provides the closed-form corruption
//! step ([`NoiseSchedule::q_sample`]), its inversion
//! ([`NoiseSchedule::implied_noise`]), and the forward-process posterior mean
//! ([`NoiseSchedule::posterior_mean`]).
//!
//! Timesteps are 1-based throughout: `t = 1` is the first (least noisy)
//! corruption step and `t = T` the last. Step 0 denotes clean data and never
//! indexes schedule arrays.

use thiserror::Error;

/// Errors from schedule construction or misuse of schedule-indexed math.
#[derive(Debug, Error)]
pub enum DiffusionError {
    /// The schedule needs at least one step.
    #[error("step count must be at least 1")]
    NoSteps,
    /// Corruption rates must satisfy `0 < beta_start <= beta_end < 1`.
    #[error("invalid beta range [{beta_start}, {beta_end}]: need 0 < start <= end < 1")]
    BadBetaRange { beta_start: f64, beta_end: f64 },
    /// The reverse-variance floor must be a positive finite number.
    #[error("sigma2_min must be positive and finite, got {0}")]
    BadSigmaFloor(f64),
    /// A 1-based timestep outside `1..=t_steps`.
    #[error("timestep {t} out of range 1..={t_steps}")]
    TimestepOutOfRange { t: usize, t_steps: usize },
    /// Two vectors that must share a length do not.
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Convenience alias for diffusion results.
pub type DiffusionResult<T> = Result<T, DiffusionError>;

/// A waveform tagged with its condition class and its corruption step
/// (`t = 0` means clean data; `1..=T` are forward-process steps).
#[derive(Debug, Clone)]
pub struct Sample {
    /// Waveform values, length N.
    pub x: Vec<f64>,
    /// Condition class index in `0..K`.
    pub c: usize,
    /// Diffusion step the waveform sits at.
    pub t: usize,
}

impl Sample {
    /// A clean (step-0) sample.
    pub fn clean(x: Vec<f64>, c: usize) -> Self {
        Sample { x, c, t: 0 }
    }
}

/// A linear variance schedule and its derived per-step quantities.
///
/// Invariants (established at construction, relied on everywhere):
/// every β_t lies in (0, 1); ᾱ_t is strictly decreasing and stays in (0, 1);
/// every σ_t² is at least the configured floor, so reverse-step Gaussians
/// are never degenerate and log-densities stay finite.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma2: Vec<f64>,
    sigma2_min: f64,
}

impl NoiseSchedule {
    /// Builds a linear schedule: β interpolates from `beta_start` to
    /// `beta_end` over `t_steps` steps, endpoints inclusive (a single-step
    /// schedule uses `beta_start`).
    ///
    /// Reverse-step variances are the forward-posterior variances
    /// β̃_t = β_t · (1 − ᾱ_{t−1}) / (1 − ᾱ_t), with β̃_1 = β_1, floored at
    /// `sigma2_min`.
    pub fn linear(
        t_steps: usize,
        beta_start: f64,
        beta_end: f64,
        sigma2_min: f64,
    ) -> DiffusionResult<Self> {
        if t_steps < 1 {
            return Err(DiffusionError::NoSteps);
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)
            || !beta_start.is_finite()
            || !beta_end.is_finite()
        {
            return Err(DiffusionError::BadBetaRange {
                beta_start,
                beta_end,
            });
        }
        if !(sigma2_min > 0.0) || !sigma2_min.is_finite() {
            return Err(DiffusionError::BadSigmaFloor(sigma2_min));
        }

        let betas: Vec<f64> = if t_steps == 1 {
            vec![beta_start]
        } else {
            (0..t_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let sigma2: Vec<f64> = (1..=t_steps)
            .map(|t| {
                let tilde = if t == 1 {
                    betas[0]
                } else {
                    betas[t - 1] * (1.0 - alpha_bars[t - 2]) / (1.0 - alpha_bars[t - 1])
                };
                tilde.max(sigma2_min)
            })
            .collect();

        Ok(NoiseSchedule {
            t_steps,
            betas,
            alphas,
            alpha_bars,
            sigma2,
            sigma2_min,
        })
    }

    /// Number of diffusion steps T.
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    /// The configured reverse-variance floor.
    pub fn sigma2_min(&self) -> f64 {
        self.sigma2_min
    }

    fn check_t(&self, t: usize) -> DiffusionResult<()> {
        if t < 1 || t > self.t_steps {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                t_steps: self.t_steps,
            });
        }
        Ok(())
    }

    /// β_t for `t` in `1..=T`. Panics on an out-of-range step: accessors are
    /// for code that already holds a valid step; fallible entry points
    /// validate once at the boundary.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "timestep {t} out of range");
        self.betas[t - 1]
    }

    /// α_t = 1 − β_t for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "timestep {t} out of range");
        self.alphas[t - 1]
    }

    /// ᾱ_t = Π_{s≤t} α_s for `t` in `1..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "timestep {t} out of range");
        self.alpha_bars[t - 1]
    }

    /// Reverse-step variance σ_t² (posterior variance, floored) for `t` in
    /// `1..=T`.
    pub fn sigma2(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_steps, "timestep {t} out of range");
        self.sigma2[t - 1]
    }

    /// All β_t in step order.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// All ᾱ_t in step order.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// All σ_t² in step order.
    pub fn sigma2s(&self) -> &[f64] {
        &self.sigma2
    }

    /// Closed-form corruption: x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> DiffusionResult<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(DiffusionError::LengthMismatch {
                left: x0.len(),
                right: eps.len(),
            });
        }
        let ab = self.alpha_bars[t - 1];
        let signal = ab.sqrt();
        let noise = (1.0 - ab).sqrt();
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| signal * x + noise * e)
            .collect())
    }

    /// Inverts [`NoiseSchedule::q_sample`]: the noise that turns `x0` into
    /// `x_t`, ε̃ = (x_t − √ᾱ_t · x0) / √(1 − ᾱ_t).
    ///
    /// Composing `q_sample` then `implied_noise` recovers the drawn ε up to
    /// roundoff.
    pub fn implied_noise(&self, x_t: &[f64], x0: &[f64], t: usize) -> DiffusionResult<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != x_t.len() {
            return Err(DiffusionError::LengthMismatch {
                left: x_t.len(),
                right: x0.len(),
            });
        }
        let ab = self.alpha_bars[t - 1];
        let signal = ab.sqrt();
        let inv_noise = 1.0 / (1.0 - ab).sqrt();
        Ok(x_t
            .iter()
            .zip(x0)
            .map(|(xt, x)| (xt - signal * x) * inv_noise)
            .collect())
    }

    /// Mean of the forward-process posterior q(x_{t−1} | x_t, x0):
    /// μ̃ = [√ᾱ_{t−1} β_t / (1 − ᾱ_t)] · x0 + [√α_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)] · x_t
    /// for t ≥ 2; at t = 1 the posterior collapses onto x0 itself.
    pub fn posterior_mean(&self, x_t: &[f64], x0: &[f64], t: usize) -> DiffusionResult<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != x_t.len() {
            return Err(DiffusionError::LengthMismatch {
                left: x_t.len(),
                right: x0.len(),
            });
        }
        if t == 1 {
            return Ok(x0.to_vec());
        }
        let beta = self.betas[t - 1];
        let alpha = self.alphas[t - 1];
        let ab_prev = self.alpha_bars[t - 2];
        let ab = self.alpha_bars[t - 1];
        let coeff_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coeff_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok(x0
            .iter()
            .zip(x_t)
            .map(|(x, xt)| coeff_x0 * x + coeff_xt * xt)
            .collect())
    }
}
