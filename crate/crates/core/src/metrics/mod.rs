//! Generative-quality metrics over sets of point clouds.
//!
//! Set-level metrics take a distance `D` between objects: Chamfer, Earth
//! Mover's, or the Euclidean distance between intensity histograms.

mod distance;
mod extractor;
mod frechet;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objects::PointSet;

pub use distance::{auction, chamfer, chamfer_naive, emd, hungarian, EmdResult, KdTree, EMD_EXACT_LIMIT};
pub use extractor::{apc, train_feature_extractor, ExtractorTrainConfig, FeatureExtractor, PointNet, FEATURE_WIDTH};
pub use frechet::{bev_histogram, fpd, jsd, jsd_histograms, kpd, FpdResult, KpdResult, BEV_BINS, JSD_EPS};
pub use report::{evaluate, EvalConfig, LabelledSet, MetricsReport, ReportMeta, SetMetrics};

pub const INTENSITY_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetDistance {
    Chamfer,
    Emd,
    Intensity,
}

/// 256-bin histogram of intensities over `[0, 1]`, L1-normalized.
pub fn intensity_features(ps: &PointSet) -> Vec<f64> {
    let mut h = vec![0.0; INTENSITY_BINS];
    for p in &ps.points {
        let b = ((p.i.clamp(0.0, 1.0) * INTENSITY_BINS as f64) as usize).min(INTENSITY_BINS - 1);
        h[b] += 1.0;
    }
    let n = ps.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Object-to-object distance used by the set metrics (EMD as a sum).
pub fn set_distance(a: &PointSet, b: &PointSet, kind: SetDistance, channels: usize) -> Result<f64> {
    match kind {
        SetDistance::Chamfer => chamfer(a, b, channels),
        SetDistance::Emd => Ok(emd(a, b, channels, false)?.cost),
        SetDistance::Intensity => Ok(euclid(&intensity_features(a), &intensity_features(b))),
    }
}

/// `m[i][j] = D(a_i, b_j)`, evaluated in parallel with a fixed layout.
pub fn distance_matrix(a: &[PointSet], b: &[PointSet], kind: SetDistance, channels: usize) -> Result<Vec<Vec<f64>>> {
    if kind == SetDistance::Intensity {
        let fa: Vec<Vec<f64>> = a.iter().map(intensity_features).collect();
        let fb: Vec<Vec<f64>> = b.iter().map(intensity_features).collect();
        return Ok(fa.iter().map(|x| fb.iter().map(|y| euclid(x, y)).collect()).collect());
    }
    a.par_iter().map(|x| b.iter().map(|y| set_distance(x, y, kind, channels)).collect()).collect()
}

/// Symmetric within-set matrix; only the upper triangle is evaluated.
pub fn self_distance_matrix(a: &[PointSet], kind: SetDistance, channels: usize) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| set_distance(&a[i], &a[j], kind, channels)).collect())
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for (k, &d) in rows[i].iter().enumerate() {
            let j = i + 1 + k;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

/// Fraction of real objects that are the nearest real match of some generated object.
///
/// `d_gr[i][j] = D(g_i, r_j)`; ties go to the lowest real index.
pub fn coverage(d_gr: &[Vec<f64>]) -> Result<f64> {
    let n_r = d_gr.first().map(Vec::len).unwrap_or(0);
    if d_gr.is_empty() || n_r == 0 {
        return Err(Error::InvalidData("coverage needs non-empty sets".into()));
    }
    let mut covered = vec![false; n_r];
    for row in d_gr {
        let mut best = 0;
        for j in 1..n_r {
            if row[j] < row[best] {
                best = j;
            }
        }
        covered[best] = true;
    }
    Ok(covered.iter().filter(|&&c| c).count() as f64 / n_r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnaResult {
    pub value: f64,
    /// Objects whose nearest distance was shared by a same-source and a cross-source neighbour.
    pub ties: usize,
}

/// Leave-one-out 1-nearest-neighbour accuracy over `S_r ∪ S_g`.
///
/// On an exact distance tie between a same-source and a cross-source
/// neighbour, the cross-source one wins and the tie is counted.
pub fn one_nna(d_rr: &[Vec<f64>], d_gg: &[Vec<f64>], d_rg: &[Vec<f64>]) -> Result<NnaResult> {
    let (nr, ng) = (d_rr.len(), d_gg.len());
    if nr + ng < 2 || d_rg.len() != nr || d_rg.iter().any(|r| r.len() != ng) {
        return Err(Error::Dimension(format!("1-NNA matrices inconsistent for {nr} real and {ng} generated")));
    }
    let mut correct = 0usize;
    let mut ties = 0usize;
    let mut classify = |same: &mut dyn Iterator<Item = f64>, cross: &mut dyn Iterator<Item = f64>| {
        let s = same.fold(f64::INFINITY, f64::min);
        let c = cross.fold(f64::INFINITY, f64::min);
        if s == c && s.is_finite() {
            ties += 1;
        }
        if s < c {
            correct += 1;
        }
    };
    for i in 0..nr {
        let mut same = (0..nr).filter(|&j| j != i).map(|j| d_rr[i][j]);
        let mut cross = d_rg[i].iter().copied();
        classify(&mut same, &mut cross);
    }
    for i in 0..ng {
        let mut same = (0..ng).filter(|&j| j != i).map(|j| d_gg[i][j]);
        let mut cross = (0..nr).map(|j| d_rg[j][i]);
        classify(&mut same, &mut cross);
    }
    if ties > 0 {
        log::warn!("1-NNA: {ties} exact distance ties resolved toward the cross-source neighbour");
    }
    Ok(NnaResult { value: correct as f64 / (nr + ng) as f64, ties })
}

/// 1-NNA computed directly from object sets.
pub fn one_nna_sets(real: &[PointSet], gen: &[PointSet], kind: SetDistance, channels: usize) -> Result<NnaResult> {
    let d_rr = self_distance_matrix(real, kind, channels)?;
    let d_gg = self_distance_matrix(gen, kind, channels)?;
    let d_rg = distance_matrix(real, gen, kind, channels)?;
    one_nna(&d_rr, &d_gg, &d_rg)
}
