#![allow(dead_code)]

use lidargen::diffusion::{DiffusionSchedule, EpsModel};
use lidargen::objects::Condition;
use lidargen::Result;

/// Bayes-optimal noise predictor when every coordinate of `x0` is `N(mu, s^2)`.
///
/// `E[x0 | x_t] = mu + sqrt(ab) s^2 / (ab s^2 + 1 - ab) (x_t - sqrt(ab) mu)` and
/// `eps_hat = (x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)`.
pub struct GaussianOracle<'a> {
    pub mu: f64,
    pub s: f64,
    pub sched: &'a DiffusionSchedule,
}

impl EpsModel for GaussianOracle<'_> {
    fn predict_eps(&self, x_t: &[f64], t: usize, _kappa: &Condition) -> Result<Vec<f64>> {
        let ab = self.sched.alpha_bar(t)?;
        let s2 = self.s * self.s;
        let gain = ab.sqrt() * s2 / (ab * s2 + 1.0 - ab);
        Ok(x_t
            .iter()
            .map(|&x| {
                let post = self.mu + gain * (x - ab.sqrt() * self.mu);
                (x - ab.sqrt() * post) / (1.0 - ab).sqrt()
            })
            .collect())
    }
}

pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Exact mean and variance of one coordinate after running the reverse chain
/// driven by [`GaussianOracle`] over `taus`, starting from `N(0, 1)`.
pub fn oracle_chain_moments(sched: &DiffusionSchedule, taus: &[usize], mu: f64, s: f64) -> (f64, f64) {
    let s2 = s * s;
    let (mut m, mut v) = (0.0, 1.0);
    for i in (0..taus.len()).rev() {
        let ab = sched.alpha_bar(taus[i]).unwrap();
        let prev = if i == 0 { 1.0 } else { sched.alpha_bar(taus[i - 1]).unwrap() };
        let a = ab / prev;
        let g = ab.sqrt() * s2 / (ab * s2 + 1.0 - ab);
        let e1 = (1.0 - ab.sqrt() * g) / (1.0 - ab).sqrt();
        let e0 = (ab * g - ab.sqrt()) * mu / (1.0 - ab).sqrt();
        let c = (1.0 - a) / (1.0 - ab).sqrt();
        let coef = (1.0 - c * e1) / a.sqrt();
        m = coef * m - c * e0 / a.sqrt();
        v = coef * coef * v;
        if i > 0 {
            v += (1.0 - a) * (1.0 - prev) / (1.0 - ab);
        }
    }
    (m, v)
}
