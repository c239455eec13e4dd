mod common;

use common::{mean_var, oracle_chain_moments, GaussianOracle};
use lidargen::diffusion::{make_schedule, sample_chain, timestep_subsequence, DiffusionSchedule, SamplerConfig};
use lidargen::objects::Condition;

fn run(sched: &DiffusionSchedule, steps: usize, mu: f64, s: f64, chains: u64) -> Vec<f64> {
    let oracle = GaussianOracle { mu, s, sched };
    let kappa = Condition::new(0.1, 10.0, -1.0, 4.0, 2.0, 1.5);
    let mut values = Vec::new();
    for seed in 0..chains {
        let cfg = SamplerConfig { inference_steps: steps, seed, ..SamplerConfig::default() };
        values.extend(sample_chain(&oracle, &kappa, 1, sched, &cfg).unwrap());
    }
    values
}

fn check(sched: &DiffusionSchedule, steps: usize, mu: f64, s: f64, chains: u64) {
    let values = run(sched, steps, mu, s, chains);
    let n = values.len() as f64;
    let (m, v) = mean_var(&values);
    let taus = timestep_subsequence(sched.steps(), steps).unwrap();
    let (em, ev) = oracle_chain_moments(sched, &taus, mu, s);
    println!("T={} S={steps} mu {mu} s {s}: mean {m:.4} (exact {em:.4}) var {v:.4} (exact {ev:.4})", sched.steps());
    // simulation agrees with the exact linear-Gaussian chain
    assert!((m - em).abs() < 3.0 * (ev / n).sqrt());
    assert!((v - ev).abs() < 3.0 * ev * (2.0 / (n - 1.0)).sqrt());
    // and the chain lands on the target
    assert!((m - mu).abs() < 0.05 * s, "mean {m} vs {mu}");
    assert!((v / (s * s) - 1.0).abs() < 0.10, "var {v} vs {}", s * s);
}

#[test]
fn hundred_step_chain_recovers_a_gaussian_target() {
    let sched = make_schedule(100, 1e-4, 0.1).unwrap();
    check(&sched, 100, 0.5, 1.0, 5000);
    check(&sched, 100, -1.0, 1.5, 5000);
}

#[test]
fn strided_default_chain_recovers_a_gaussian_target() {
    check(&DiffusionSchedule::default(), 500, 1.0, 0.7, 2000);
}
