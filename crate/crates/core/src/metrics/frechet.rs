//! Feature-space distances (Fréchet, polynomial-kernel MMD) and the
//! bird's-eye-view Jensen–Shannon divergence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objects::PointSet;

pub const BEV_BINS: usize = 64;
pub const JSD_EPS: f64 = 1e-10;
const KPD_BLOCK: usize = 1000;

fn as_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let k = rows.first().map(Vec::len).unwrap_or(0);
    if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("feature rows must be non-empty and of equal width".into()));
    }
    Ok(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    (mean, c.transpose() * c / denom)
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpdResult {
    pub value: f64,
    /// A ridge of `1e-6 * mean(diag)` was added to a singular covariance.
    pub ridged: bool,
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `|m_r - m_g|^2 + tr(S_r + S_g - 2 (S_r^½ S_g S_r^½)^½)` with unbiased
/// covariances. A singular covariance gets the ridge when `allow_ridge`, and
/// is a numeric error otherwise.
pub fn fpd(real: &[Vec<f64>], gen: &[Vec<f64>], allow_ridge: bool) -> Result<FpdResult> {
    let (xr, xg) = (as_matrix(real)?, as_matrix(gen)?);
    if xr.ncols() != xg.ncols() {
        return Err(Error::Dimension(format!("feature widths {} and {}", xr.ncols(), xg.ncols())));
    }
    let (mr, mut sr) = moments(&xr);
    let (mg, mut sg) = moments(&xg);
    let k = xr.ncols();
    let singular = |s: &DMatrix<f64>, n: usize| n <= k || min_eigen(s) <= 1e-12 * s.diagonal().mean().abs().max(1e-300);
    let mut ridged = false;
    if singular(&sr, xr.nrows()) || singular(&sg, xg.nrows()) {
        if !allow_ridge {
            return Err(Error::Numeric("singular feature covariance".into()));
        }
        for s in [&mut sr, &mut sg] {
            let eps = 1e-6 * s.diagonal().mean();
            for i in 0..k {
                s[(i, i)] += eps;
            }
        }
        ridged = true;
    }
    let root_r = sqrt_psd(&sr);
    let inner = &root_r * &sg * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = (&mr - &mg).norm_squared() + sr.trace() + sg.trace() - 2.0 * tr_sqrt;
    Ok(FpdResult { value: value.max(0.0), ridged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpdResult {
    /// Unbiased MMD² estimate; may be slightly negative.
    pub value: f64,
    /// Jackknife standard error, or the spread of block estimates for large sets.
    pub std_error: f64,
    pub blocks: usize,
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d + 1.0).powi(3)
}

fn gram(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| kernel(x, y)).collect()).collect()
}

/// Unbiased MMD² with its two-sample jackknife standard error.
fn mmd2_jackknife(x: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64) {
    let (m, n) = (x.len(), y.len());
    let (kxx, kyy, kxy) = (gram(x, x), gram(y, y), gram(x, y));
    let off = |k: &Vec<Vec<f64>>| -> (f64, Vec<f64>) {
        let rows: Vec<f64> = k.iter().enumerate().map(|(i, r)| r.iter().sum::<f64>() - r[i]).collect();
        (rows.iter().sum(), rows)
    };
    let (sxx, rxx) = off(&kxx);
    let (syy, ryy) = off(&kyy);
    let rxy: Vec<f64> = kxy.iter().map(|r| r.iter().sum()).collect();
    let cxy: Vec<f64> = (0..n).map(|j| kxy.iter().map(|r| r[j]).sum()).collect();
    let sxy: f64 = rxy.iter().sum();
    let est = |sxx: f64, syy: f64, sxy: f64, m: usize, n: usize| {
        sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64
    };
    let value = est(sxx, syy, sxy, m, n);
    if m < 3 || n < 3 {
        return (value, f64::NAN);
    }
    let lx: Vec<f64> = (0..m).map(|i| est(sxx - 2.0 * rxx[i], syy, sxy - rxy[i], m - 1, n)).collect();
    let ly: Vec<f64> = (0..n).map(|j| est(sxx, syy - 2.0 * ryy[j], sxy - cxy[j], m, n - 1)).collect();
    let spread = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.len() - 1) as f64 / v.len() as f64 * v.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
    };
    (value, (spread(&lx) + spread(&ly)).sqrt())
}

/// Kernel distance with `k(x, y) = (x·y / dim + 1)^3`.
///
/// Sets larger than 1000 are split into equal contiguous blocks whose
/// estimates are averaged.
pub fn kpd(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<KpdResult> {
    if real.len() < 2 || gen.len() < 2 {
        return Err(Error::InvalidData("KPD needs at least two samples per side".into()));
    }
    as_matrix(real)?;
    as_matrix(gen)?;
    if real[0].len() != gen[0].len() {
        return Err(Error::Dimension("feature widths differ".into()));
    }
    let blocks = real.len().max(gen.len()).div_ceil(KPD_BLOCK);
    if blocks == 1 {
        let (value, std_error) = mmd2_jackknife(real, gen);
        return Ok(KpdResult { value, std_error, blocks });
    }
    let chunk = |v: &[Vec<f64>], b: usize| -> Vec<Vec<f64>> {
        let (lo, hi) = (b * v.len() / blocks, (b + 1) * v.len() / blocks);
        v[lo..hi].to_vec()
    };
    let ests: Vec<f64> = (0..blocks).map(|b| mmd2_jackknife(&chunk(real, b), &chunk(gen, b)).0).collect();
    let mean = ests.iter().sum::<f64>() / blocks as f64;
    let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (blocks - 1) as f64;
    Ok(KpdResult { value: mean, std_error: (var / blocks as f64).sqrt(), blocks })
}

/// Pooled `BEV_BINS x BEV_BINS` occupancy histogram over `[lo, hi]` in x and y.
pub fn bev_histogram(sets: &[PointSet], lo: [f64; 2], hi: [f64; 2]) -> Vec<f64> {
    let mut h = vec![0.0; BEV_BINS * BEV_BINS];
    let bin = |v: f64, a: f64, b: f64| {
        if b > a {
            (((v - a) / (b - a) * BEV_BINS as f64) as usize).min(BEV_BINS - 1)
        } else {
            0
        }
    };
    for p in sets.iter().flat_map(|s| &s.points) {
        h[bin(p.y, lo[1], hi[1]) * BEV_BINS + bin(p.x, lo[0], hi[0])] += 1.0;
    }
    h
}

/// `0.5 KL(p | m) + 0.5 KL(q | m)` in bits, after adding `eps` to every bin and normalizing.
pub fn jsd_histograms(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let norm = |h: &[f64]| {
        let s: f64 = h.iter().map(|v| v + eps).sum();
        h.iter().map(|v| (v + eps) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    let mut out = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        let term = |v: f64| if v > 0.0 { 0.5 * v * (v / m).log2() } else { 0.0 };
        out += term(*a) + term(*b);
    }
    out.max(0.0)
}

/// Jensen–Shannon divergence between pooled bird's-eye-view occupancies.
pub fn jsd(real: &[PointSet], gen: &[PointSet]) -> Result<f64> {
    let all = real.iter().chain(gen).flat_map(|s| &s.points);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let mut any = false;
    for p in all {
        any = true;
        lo = [lo[0].min(p.x), lo[1].min(p.y)];
        hi = [hi[0].max(p.x), hi[1].max(p.y)];
    }
    if !any || real.iter().all(PointSet::is_empty) || gen.iter().all(PointSet::is_empty) {
        return Err(Error::InvalidData("JSD needs points on both sides".into()));
    }
    Ok(jsd_histograms(&bev_histogram(real, lo, hi), &bev_histogram(gen, lo, hi), JSD_EPS))
}
