//! DDPM noising, the noise-prediction objective, ancestral sampling, and
//! classifier-free guidance.
//!
//! Time steps are 1-based: `t` in `1..=T`, with `alpha_bar(0) = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::objects::{Condition, PaddedBatch, PointSet};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 3.5e-5;
pub const DEFAULT_BETA_MAX: f64 = 0.007;
pub const DEFAULT_INFERENCE_STEPS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linear `beta` from `beta_min` to `beta_max` inclusive over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]")));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps).map(|k| beta_min + (beta_max - beta_min) * k as f64 / (steps - 1) as f64).collect()
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    let sigma = (0..steps)
        .map(|k| {
            let prev = if k == 0 { 1.0 } else { alpha_bar[k - 1] };
            (beta[k] * (1.0 - prev) / (1.0 - alpha_bar[k])).sqrt()
        })
        .collect();
    Ok(DiffusionSchedule { beta, alpha_bar, sigma })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("time step {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// Cumulative product of `alpha` up to `t`; `1` at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// Posterior standard deviation of `q(x_{t-1} | x_t, x_0)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.check(t)?])
    }
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps` with `ab = alpha_bar(t)`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Dimension(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Anything that predicts the noise in `x_t` (row-major `[n x 4]`).
pub trait EpsModel {
    fn predict_eps(&self, x_t: &[f64], t: usize, kappa: &Condition) -> Result<Vec<f64>>;
}

impl EpsModel for Denoiser {
    fn predict_eps(&self, x_t: &[f64], t: usize, kappa: &Condition) -> Result<Vec<f64>> {
        let x: Vec<f32> = x_t.iter().map(|&v| v as f32).collect();
        Ok(self.predict_noise(&x, t, kappa, None)?.into_iter().map(f64::from).collect())
    }
}

/// One draw of the training noise process for a single object.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub t: usize,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
    pub condition: Condition,
}

/// Samples `t ~ U[1, T]`, `eps ~ N(0, I)`, and drops the condition with probability `p_drop`.
pub fn draw_training_example(
    x0: &[f64],
    kappa: &Condition,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
    p_drop: f64,
) -> Result<TrainingExample> {
    let t = rng.random_range(1..=sched.steps());
    let eps = standard_normal(rng, x0.len());
    let x_t = forward_noise(x0, t, &eps, sched)?;
    let condition = if rng.random::<f64>() < p_drop { Condition::null() } else { *kappa };
    Ok(TrainingExample { t, eps, x_t, condition })
}

/// Masked mean squared error between drawn noise and the model's prediction,
/// averaged over every real channel of the batch.
pub fn training_loss(
    batch: &PaddedBatch,
    conditions: &[Condition],
    model: &impl EpsModel,
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
    p_drop: f64,
) -> Result<f64> {
    if conditions.len() != batch.len() {
        return Err(Error::Dimension(format!("{} conditions for {} objects", conditions.len(), batch.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, kappa) in conditions.iter().enumerate() {
        let n = batch.real_count(j);
        let x0 = &batch.data[j][..4 * n];
        let ex = draw_training_example(x0, kappa, sched, rng, p_drop)?;
        let pred = model.predict_eps(&ex.x_t, ex.t, &ex.condition)?;
        sum += pred.iter().zip(&ex.eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>();
        count += 4 * n;
    }
    if count == 0 {
        return Err(Error::InvalidData("batch has no real points".into()));
    }
    Ok(sum / count as f64)
}

/// `lambda c + (1 - lambda) u`, which equals `u + lambda (c - u)` and is exact at `lambda` 0 and 1.
pub fn combine_guidance(cond: &[f64], uncond: &[f64], lambda: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| lambda * c + (1.0 - lambda) * u).collect()
}

/// Classifier-free guided noise estimate.
///
/// With `skip_unconditional` and `lambda == 1` the unconditional pass is not run.
pub fn guided_noise(
    model: &impl EpsModel,
    x_t: &[f64],
    t: usize,
    kappa: &Condition,
    lambda: f64,
    skip_unconditional: bool,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("guidance scale must be non-negative, got {lambda}")));
    }
    let cond = model.predict_eps(x_t, t, kappa)?;
    if lambda == 1.0 && skip_unconditional {
        return Ok(cond);
    }
    let uncond = model.predict_eps(x_t, t, &Condition::null())?;
    Ok(combine_guidance(&cond, &uncond, lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_inference_steps")]
    pub inference_steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub skip_unconditional: bool,
}

fn default_inference_steps() -> usize {
    DEFAULT_INFERENCE_STEPS
}

fn default_guidance() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { inference_steps: DEFAULT_INFERENCE_STEPS, guidance: 1.0, seed: 0, skip_unconditional: true }
    }
}

/// Evenly strided steps `tau_i = round(i T / S)` for `i = 1..=S`.
pub fn timestep_subsequence(steps: usize, inference_steps: usize) -> Result<Vec<usize>> {
    if inference_steps == 0 || inference_steps > steps {
        return Err(Error::Config(format!("inference_steps must be in [1, {steps}], got {inference_steps}")));
    }
    Ok((1..=inference_steps)
        .map(|i| ((i * steps) as f64 / inference_steps as f64).round() as usize)
        .collect())
}

/// Runs the reverse chain from pure noise and returns the raw final state `[n x 4]`.
///
/// Each step uses the posterior of the subsequence: with `ab`, `ab_prev` the
/// cumulative products at consecutive kept steps, `a = ab / ab_prev`,
/// `x <- (x - (1 - a) / sqrt(1 - ab) eps_hat) / sqrt(a) + s z` where
/// `s^2 = (1 - a)(1 - ab_prev) / (1 - ab)`, and no noise on the last step.
pub fn sample_chain(
    model: &impl EpsModel,
    kappa: &Condition,
    n_points: usize,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    if n_points == 0 {
        return Err(Error::InvalidData("cannot sample an object with zero points".into()));
    }
    let taus = timestep_subsequence(sched.steps(), cfg.inference_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = standard_normal(&mut rng, 4 * n_points);
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let ab = sched.alpha_bar(t)?;
        let ab_prev = sched.alpha_bar(prev)?;
        let a = ab / ab_prev;
        let eps = guided_noise(model, &x, t, kappa, cfg.guidance, cfg.skip_unconditional)?;
        let c = (1.0 - a) / (1.0 - ab).sqrt();
        let inv = 1.0 / a.sqrt();
        for (xv, e) in x.iter_mut().zip(&eps) {
            *xv = inv * (*xv - c * e);
        }
        if i > 0 {
            let s = ((1.0 - a) * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            for xv in x.iter_mut() {
                *xv += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("reverse chain diverged at step {t}")));
        }
    }
    Ok(x)
}

/// [`sample_chain`] followed by clamping intensity to `[0, 1]`.
pub fn sample(
    model: &impl EpsModel,
    kappa: &Condition,
    n_points: usize,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<PointSet> {
    let flat = sample_chain(model, kappa, n_points, sched, cfg)?;
    let mut ps = PointSet::from_flat(&flat)?;
    ps.clamp_intensity();
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objects::{pad_batch, Point};
    use std::cell::Cell;

    struct Counting<F> {
        f: F,
        calls: Cell<usize>,
        null_calls: Cell<usize>,
    }

    impl<F: Fn(&[f64], usize, &Condition) -> Vec<f64>> Counting<F> {
        fn new(f: F) -> Self {
            Self { f, calls: Cell::new(0), null_calls: Cell::new(0) }
        }
    }

    impl<F: Fn(&[f64], usize, &Condition) -> Vec<f64>> EpsModel for Counting<F> {
        fn predict_eps(&self, x: &[f64], t: usize, k: &Condition) -> Result<Vec<f64>> {
            self.calls.set(self.calls.get() + 1);
            if k.is_null {
                self.null_calls.set(self.null_calls.get() + 1);
            }
            Ok((self.f)(x, t, k))
        }
    }

    fn kappa() -> Condition {
        Condition::new(0.3, 10.0, -1.2, 4.0, 1.8, 1.5)
    }

    #[test]
    fn schedule_endpoints() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.beta(1).unwrap(), 3.5e-5);
        assert_eq!(s.beta(1000).unwrap(), 0.007);
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 3.5e-5);
        assert!(s.alpha_bar(1000).unwrap() < 0.1);
        let two = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!((two.beta(1).unwrap(), two.beta(2).unwrap()), (0.1, 0.2));
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(s.beta(0).is_err() && s.beta(1001).is_err());
    }

    #[test]
    fn schedule_is_ordered_and_sigma_matches_closed_form() {
        let s = DiffusionSchedule::default();
        for t in 2..=s.steps() {
            assert!(s.beta(t).unwrap() > s.beta(t - 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            let closed = (1.0 - s.alpha(t).unwrap()) * (1.0 - s.alpha_bar(t - 1).unwrap()) / (1.0 - s.alpha_bar(t).unwrap());
            assert!((s.sigma(t).unwrap().powi(2) - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_noise_limits() {
        let s = DiffusionSchedule::default();
        let x0 = [1.0, -2.0, 0.5, 0.25];
        let e = [0.3, 0.1, -0.7, 2.0];
        assert_eq!(forward_noise(&x0, 0, &e, &s).unwrap(), x0.to_vec());
        let ab = s.alpha_bar(400).unwrap();
        let zero = forward_noise(&x0, 400, &[0.0; 4], &s).unwrap();
        assert!(zero.iter().zip(&x0).all(|(a, b)| *a == ab.sqrt() * b));
        let pure = forward_noise(&[0.0; 4], 400, &e, &s).unwrap();
        assert!(pure.iter().zip(&e).all(|(a, b)| *a == (1.0 - ab).sqrt() * b));
        assert!(forward_noise(&x0, 1001, &e, &s).is_err());
    }

    #[test]
    fn two_kernel_steps_match_closed_form_marginal() {
        let s = DiffusionSchedule::default();
        let (t1, t2) = (200, 600);
        let x0 = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ratio = s.alpha_bar(t2).unwrap() / s.alpha_bar(t1).unwrap();
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let x1 = forward_noise(&[x0], t1, &[e1], &s).unwrap()[0];
                ratio.sqrt() * x1 + (1.0 - ratio).sqrt() * e2
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(t2).unwrap();
        let (m_true, v_true) = (ab.sqrt() * x0, 1.0 - ab);
        assert!((mean - m_true).abs() < 3.0 * (v_true / n).sqrt(), "{mean} vs {m_true}");
        assert!((var - v_true).abs() < 3.0 * v_true * (2.0 / (n - 1.0)).sqrt(), "{var} vs {v_true}");
    }

    fn batch() -> (PaddedBatch, Vec<Condition>) {
        let sets: Vec<PointSet> = (0..3)
            .map(|j| PointSet::new((0..5 + j).map(|k| Point::new(k as f64 * 0.1, 0.2, -0.1, 0.5)).collect()))
            .collect();
        (pad_batch(&sets).unwrap(), vec![kappa(); 3])
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_zero_predictor_unit_loss() {
        let (b, k) = batch();
        let s = DiffusionSchedule::default();
        // every object shares point k = (0.1 k, 0.2, -0.1, 0.5), so x_t and t determine eps
        let perfect = Counting::new(|x: &[f64], t, _k: &Condition| {
            let ab = s.alpha_bar(t).unwrap();
            x.iter()
                .enumerate()
                .map(|(c, v)| {
                    let x0 = [0.1 * (c / 4) as f64, 0.2, -0.1, 0.5][c % 4];
                    (v - ab.sqrt() * x0) / (1.0 - ab).sqrt()
                })
                .collect()
        });
        let l = training_loss(&b, &k, &perfect, &s, &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        assert!(l < 1e-20, "{l}");
        assert_eq!(perfect.calls.get(), 3);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = Counting::new(|x: &[f64], _, _: &Condition| vec![0.0; x.len()]);
        let mut acc = 0.0;
        let reps = 10_000 / 18 + 1;
        for _ in 0..reps {
            acc += training_loss(&b, &k, &zero, &s, &mut rng, 0.0).unwrap();
        }
        let mean = acc / reps as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn oracle_with_drawn_noise_is_exact() {
        let s = DiffusionSchedule::default();
        let x0 = vec![0.5, -0.2, 0.1, 0.9];
        let ex = draw_training_example(&x0, &kappa(), &s, &mut ChaCha8Rng::seed_from_u64(4), 0.0).unwrap();
        let ab = s.alpha_bar(ex.t).unwrap();
        let recovered: Vec<f64> = ex.x_t.iter().zip(&x0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
        let err = recovered.iter().zip(&ex.eps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn full_dropout_uses_null_condition_everywhere() {
        let (b, k) = batch();
        let s = DiffusionSchedule::default();
        let m = Counting::new(|x: &[f64], _, _: &Condition| vec![0.0; x.len()]);
        training_loss(&b, &k, &m, &s, &mut ChaCha8Rng::seed_from_u64(2), 1.0).unwrap();
        assert_eq!((m.calls.get(), m.null_calls.get()), (3, 3));
        training_loss(&b, &k, &m, &s, &mut ChaCha8Rng::seed_from_u64(2), 0.0).unwrap();
        assert_eq!(m.null_calls.get(), 3);
    }

    fn affine() -> impl Fn(&[f64], usize, &Condition) -> Vec<f64> {
        |x: &[f64], t, k: &Condition| {
            let off = if k.is_null { -0.3 } else { 0.2 + 0.01 * k.d };
            x.iter().map(|v| 0.1 * v + off + 1e-4 * t as f64).collect()
        }
    }

    #[test]
    fn guidance_combinations() {
        let m = Counting::new(affine());
        let x = [0.1, 0.2, 0.3, 0.4];
        let c = m.predict_eps(&x, 5, &kappa()).unwrap();
        let u = m.predict_eps(&x, 5, &Condition::null()).unwrap();
        assert_eq!(guided_noise(&m, &x, 5, &kappa(), 1.0, false).unwrap(), c);
        assert_eq!(guided_noise(&m, &x, 5, &kappa(), 1.0, true).unwrap(), c);
        assert_eq!(guided_noise(&m, &x, 5, &kappa(), 0.0, false).unwrap(), u);
        let two = guided_noise(&m, &x, 5, &kappa(), 2.0, true).unwrap();
        for k in 0..4 {
            assert!((two[k] - (2.0 * c[k] - u[k])).abs() < 1e-15);
        }
        assert!(guided_noise(&m, &x, 5, &kappa(), -0.5, true).is_err());
    }

    #[test]
    fn skip_halves_calls_with_identical_output() {
        let s = make_schedule(50, 1e-3, 0.1).unwrap();
        let run = |skip| {
            let m = Counting::new(affine());
            let cfg = SamplerConfig { inference_steps: 20, guidance: 1.0, seed: 9, skip_unconditional: skip };
            let out = sample_chain(&m, &kappa(), 6, &s, &cfg).unwrap();
            (out, m.calls.get())
        };
        let (a, ca) = run(true);
        let (b, cb) = run(false);
        assert_eq!(a, b);
        assert_eq!((ca, cb), (20, 40));
    }

    #[test]
    fn single_step_matches_hand_recurrence() {
        let s = make_schedule(1, 0.3, 0.5).unwrap();
        let m = Counting::new(affine());
        let cfg = SamplerConfig { inference_steps: 1, guidance: 1.0, seed: 3, skip_unconditional: true };
        let out = sample_chain(&m, &kappa(), 2, &s, &cfg).unwrap();
        let x1 = standard_normal(&mut ChaCha8Rng::seed_from_u64(3), 8);
        let eps = affine()(&x1, 1, &kappa());
        let beta = 0.3f64;
        let want: Vec<f64> = x1
            .iter()
            .zip(&eps)
            .map(|(x, e)| (x - beta / beta.sqrt() * e) / (1.0 - beta).sqrt())
            .collect();
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_clamps_intensity_only() {
        let s = make_schedule(30, 1e-3, 0.2).unwrap();
        let m = Counting::new(|x: &[f64], _, _: &Condition| x.iter().map(|v| -v).collect());
        let cfg = SamplerConfig { inference_steps: 10, seed: 5, ..SamplerConfig::default() };
        let a = sample(&m, &kappa(), 40, &s, &cfg).unwrap();
        assert_eq!(a, sample(&m, &kappa(), 40, &s, &cfg).unwrap());
        assert!(a.points.iter().all(|p| (0.0..=1.0).contains(&p.i)));
        assert!(sample(&m, &kappa(), 0, &s, &cfg).is_err());
    }

    #[test]
    fn subsequence_is_strided_and_ends_at_t() {
        assert_eq!(timestep_subsequence(1000, 500).unwrap()[..3], [2, 4, 6]);
        assert_eq!(*timestep_subsequence(1000, 500).unwrap().last().unwrap(), 1000);
        assert_eq!(timestep_subsequence(10, 10).unwrap(), (1..=10).collect::<Vec<_>>());
        let odd = timestep_subsequence(100, 7).unwrap();
        assert!(odd.windows(2).all(|w| w[1] > w[0]) && odd[6] == 100);
        assert!(timestep_subsequence(10, 11).is_err());
    }
}
