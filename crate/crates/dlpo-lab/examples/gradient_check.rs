//! Finite-difference checks every tape-built objective on a small random
//! model: the denoising training loss, one reverse-step log-density, and
//! one reverse-step KL term. The same checks gate the estimators in the
//! test suite; this example prints the worst relative errors.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use dlpo_lab::autograd::finite_diff_check;
use dlpo_lab::denoiser::{ddpm_loss_with_draws, DenoiserLayout, DenoiserParams, LossDraw, LossNorm};
use dlpo_lab::diffusion::{NoiseSchedule, Sample};
use dlpo_lab::policy::{kl_step_tape, logp_step_tape, sample_trajectory};
use dlpo_lab::streams::{stream_rng, Phase};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Small enough that central differences over every coordinate stay fast.
    let layout = DenoiserLayout::new(8, 3, 4, 4, 4, 12, 10)?;
    let sched = NoiseSchedule::linear(4, 0.001, 0.6, 1e-6)?;
    let mut rng = stream_rng(7, Phase::Init, 0, 0);
    let params = DenoiserParams::init(layout.clone(), &mut rng);
    println!("model: {} parameters, T = {}", layout.param_count(), sched.t_steps());
    println!();

    // 1. Denoising loss on a fixed batch with frozen corruption draws, so
    //    the objective is a deterministic function of the parameters.
    let batch: Vec<Sample> = (0..6)
        .map(|i| {
            let x: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            Sample::clean(x, i % 3)
        })
        .collect();
    let draws: Vec<LossDraw> = (0..6)
        .map(|i| LossDraw {
            t: 1 + i % 4,
            eps: (0..8).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    for norm in [LossNorm::L2, LossNorm::L2Sq] {
        let (loss, grad) = ddpm_loss_with_draws(&params, &batch, &draws, &sched, norm)?;
        let worst = finite_diff_check(
            |theta| {
                let p = DenoiserParams::from_theta(layout.clone(), theta.to_vec()).unwrap();
                ddpm_loss_with_draws(&p, &batch, &draws, &sched, norm).unwrap().0
            },
            &grad,
            &params.theta,
            1e-5,
        )?;
        println!("ddpm loss ({norm:?}): value {loss:.6}, worst relative gradient error {worst:.3e}");
    }

    // 2. One reverse step's log-density, states held fixed.
    let traj = sample_trajectory(&params, 1, &sched, &mut rng)?;
    let t = 3; // an interior step: state index T - t on the stored path
    let i = sched.t_steps() - t;
    let mut tape = logp_step_tape(&layout, &sched, &traj.states[i], &traj.states[i + 1], traj.c, t)?;
    let value = tape.forward(&params.theta, &[])?;
    let grad = tape.backward()?;
    let worst = finite_diff_check(
        |theta| tape.forward(theta, &[]).unwrap(),
        &grad,
        &params.theta,
        1e-5,
    )?;
    println!("step log-density (t={t}): value {value:.6}, worst relative gradient error {worst:.3e}");

    // 3. One reverse step's KL penalty against a perturbed reference mean.
    let mu_ref: Vec<f64> = traj.states[i].iter().map(|v| 0.9 * v + 0.01).collect();
    let mut tape = kl_step_tape(&layout, &sched, &traj.states[i], &mu_ref, traj.c, t)?;
    let value = tape.forward(&params.theta, &[])?;
    let grad = tape.backward()?;
    let worst = finite_diff_check(
        |theta| tape.forward(theta, &[]).unwrap(),
        &grad,
        &params.theta,
        1e-5,
    )?;
    println!("step KL penalty (t={t}):  value {value:.6}, worst relative gradient error {worst:.3e}");

    println!();
    println!("all three objectives differentiate to ~1e-6 agreement or better");
    Ok(())
}
