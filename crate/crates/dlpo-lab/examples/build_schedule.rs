//! Builds the default linear noise schedule and prints its per-step
//! quantities, then corrupts one clean waveform at a few timesteps to show
//! how quickly the signal drowns.
//!
//! ```bash
//! cargo run --release --example build_schedule
//! ```

use dlpo_lab::diffusion::NoiseSchedule;
use dlpo_lab::rewards::ConditionSpec;
use dlpo_lab::streams::{stream_rng, Phase};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t_steps = 10;
    let sched = NoiseSchedule::linear(t_steps, 0.001, 0.6, 1e-6)?;

    println!("linear schedule, T = {t_steps}, beta 0.001 -> 0.6");
    println!();
    println!("{:>3} {:>10} {:>10} {:>12} {:>12}", "t", "beta", "alpha", "alpha_bar", "sigma2");
    for t in 1..=t_steps {
        println!(
            "{:>3} {:>10.6} {:>10.6} {:>12.6e} {:>12.6e}",
            t,
            sched.beta(t),
            sched.alpha(t),
            sched.alpha_bar(t),
            sched.sigma2(t),
        );
    }
    println!();
    println!(
        "alpha_bar at T = {:.6e}  (terminal states keep < 2% of the signal scale)",
        sched.alpha_bar(t_steps)
    );

    // Forward-corrupt one clean class-0 waveform and watch the signal fade.
    let spec = ConditionSpec::new(32, 4, 2, 1.0)?;
    let x0: Vec<f64> = (0..32)
        .map(|i| (std::f64::consts::TAU * 2.0 * i as f64 / 32.0).sin())
        .collect();
    let mut rng = stream_rng(0, Phase::Dataset, 0, 0);
    println!();
    println!("corrupting one class-0 sine (freq {}):", spec.freq(0));
    println!("{:>3} {:>12} {:>12}", "t", "rms(x_t)", "corr(x_t,x0)");
    let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
    let corr = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    for t in [1, 3, 5, 8, 10] {
        let eps: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = sched.q_sample(&x0, t, &eps)?;
        println!("{:>3} {:>12.4} {:>12.4}", t, rms(&x_t), corr(&x_t, &x0));
    }
    Ok(())
}
