//! Sinusoidal encodings of the diffusion time step and the condition tuple.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objects::{wrap_angle, Condition};

/// Number of scalar components in a condition.
pub const CONDITION_SCALARS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_frequencies: usize,
    pub base: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { num_frequencies: 8, base: 10_000.0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 || self.num_frequencies % 2 != 0 {
            return Err(Error::Config(format!(
                "num_frequencies must be a positive even number, got {}",
                self.num_frequencies
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("frequency base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    /// Width of one scalar's encoding.
    pub fn embed_dim(&self) -> usize {
        2 * self.num_frequencies
    }

    /// Width of the concatenated condition encoding.
    pub fn cond_dim(&self) -> usize {
        CONDITION_SCALARS * self.embed_dim()
    }

    /// `omega_k = base^(-k / num_frequencies)`.
    pub fn frequency(&self, k: usize) -> f64 {
        self.base.powf(-(k as f64) / self.num_frequencies as f64)
    }
}

fn fourier_with(value: f64, freqs: impl Iterator<Item = f64>, out: &mut Vec<f64>) {
    for w in freqs {
        let (s, c) = (value * w).sin_cos();
        out.push(s);
        out.push(c);
    }
}

/// Interleaved `(sin(v w_k), cos(v w_k))` pairs over the geometric frequencies.
pub fn fourier_encode(value: f64, cfg: &EncoderConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.embed_dim());
    fourier_with(value, (0..cfg.num_frequencies).map(|k| cfg.frequency(k)), &mut out);
    out
}

/// Angle encoding that is exactly `2 pi`-periodic.
///
/// The angle is lifted to `(sin phi, cos phi)` and each coordinate receives
/// half of the frequency bands. The wrapped angle is snapped to a fixed grid of
/// `2^-22` rad before the lift so that `phi` and `phi + 2 pi k` produce identical bits.
pub fn cyclical_encode(phi: f64, cfg: &EncoderConfig) -> Vec<f64> {
    const GRID: f64 = (1u64 << 22) as f64;
    let snapped = (wrap_angle(phi) * GRID).round() / GRID;
    let (s, c) = snapped.sin_cos();
    let half = cfg.num_frequencies / 2;
    let mut out = Vec::with_capacity(cfg.embed_dim());
    fourier_with(s, (0..half).map(|k| cfg.frequency(k)), &mut out);
    fourier_with(c, (0..half).map(|k| cfg.frequency(k)), &mut out);
    out
}

/// The six per-scalar encodings of a (non-null) condition, in `(phi, d, z, l, w, h)` order.
pub fn condition_tokens(kappa: &Condition, cfg: &EncoderConfig) -> Vec<f64> {
    let mut out = cyclical_encode(kappa.phi, cfg);
    for v in [kappa.d, kappa.z, kappa.l, kappa.w, kappa.h] {
        out.extend(fourier_encode(v, cfg));
    }
    out
}

/// Condition and time encodings.
///
/// A null condition is replaced by `null_embedding` verbatim.
pub fn encode_condition(
    kappa: &Condition,
    t: usize,
    cfg: &EncoderConfig,
    null_embedding: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if null_embedding.len() != cfg.cond_dim() {
        return Err(Error::Dimension(format!(
            "null embedding has width {}, expected {}",
            null_embedding.len(),
            cfg.cond_dim()
        )));
    }
    let cond = if kappa.is_null { null_embedding.to_vec() } else { condition_tokens(kappa, cfg) };
    Ok((cond, fourier_encode(t as f64, cfg)))
}
