//! Runs ancestral sampling through the reverse process — first with a
//! freshly initialized model, then with a pretrained one — and scores every
//! rollout, showing what pretraining buys before any RL happens.
//!
//! ```bash
//! cargo run --release --example sample_rollouts
//! ```

use dlpo_lab::denoiser::DenoiserParams;
use dlpo_lab::policy::sample_trajectory;
use dlpo_lab::rewards::{condition_recovery, reward_mos};
use dlpo_lab::streams::{stream_rng, Phase};

mod common;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = common::example_config();
    let spec = cfg.condition_spec()?;
    let sched = cfg.noise_schedule()?;
    let mos_w = cfg.mos_weights();

    let mut init_rng = stream_rng(cfg.seed, Phase::Init, 0, 0);
    let untrained = DenoiserParams::init(cfg.layout()?, &mut init_rng);
    let pretrained = common::load_or_pretrain(&cfg)?;
    println!();

    for (label, params) in [("untrained", &untrained), ("pretrained", &pretrained)] {
        println!("{label} model, 3 rollouts per class:");
        println!("{:>2} {:>24} {:>10} {:>10}", "c", "reward_mos (3 draws)", "mean", "recovered");
        let mut total = 0.0;
        let mut hits = 0;
        for c in 0..cfg.k_classes {
            let mut scores = Vec::new();
            let mut recovered = Vec::new();
            for j in 0..3 {
                let mut rng = stream_rng(cfg.seed, Phase::Eval, c as u64, j);
                let traj = sample_trajectory(params, c, &sched, &mut rng)?;
                let x0 = traj.x0();
                scores.push(reward_mos(x0, c, &spec, &mos_w)?);
                recovered.push(condition_recovery(x0, &spec)?);
            }
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            total += mean;
            hits += recovered.iter().filter(|&&r| r == c).count();
            println!(
                "{:>2} {:>24} {:>10.3} {:>10}",
                c,
                format!("{:.2} {:.2} {:.2}", scores[0], scores[1], scores[2]),
                mean,
                format!("{:?}", recovered),
            );
        }
        println!(
            "mean reward {:.3}/5, class recovery {}/{}",
            total / cfg.k_classes as f64,
            hits,
            3 * cfg.k_classes
        );
        println!();
    }

    // The pretrained reverse process also exposes its per-step bookkeeping:
    // each rollout keeps the visited states, the per-step log-densities, and
    // the noise predictions that the RL estimators differentiate through.
    let mut rng = stream_rng(cfg.seed, Phase::Eval, 0, 99);
    let traj = sample_trajectory(&pretrained, 0, &sched, &mut rng)?;
    println!("one class-0 trajectory: {} states, total logp {:.2}", traj.states.len(), traj.logp.iter().sum::<f64>());
    Ok(())
}
