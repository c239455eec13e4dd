//! Full evaluation of a generated set against a real one, per class and averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{apc, FeatureExtractor};
use super::frechet::{fpd, jsd, kpd};
use super::{chamfer, coverage, distance_matrix, emd, one_nna, self_distance_matrix, SetDistance};
use crate::error::{Error, Result};
use crate::objects::PointSet;

/// Objects with their class names, index-aligned.
#[derive(Debug, Clone, Default)]
pub struct LabelledSet {
    pub sets: Vec<PointSet>,
    pub labels: Vec<String>,
}

impl LabelledSet {
    pub fn new(sets: Vec<PointSet>, labels: Vec<String>) -> Result<Self> {
        if sets.len() != labels.len() {
            return Err(Error::Contract(format!("{} objects with {} labels", sets.len(), labels.len())));
        }
        Ok(Self { sets, labels })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    fn class_indices(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (j, l) in self.labels.iter().enumerate() {
            m.entry(l.as_str()).or_default().push(j);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Channels for CD, EMD, COV and 1-NNA.
    pub channels: usize,
    /// Report the paired EMD as a per-point mean instead of a sum.
    pub emd_per_point: bool,
    /// Resample every object to this many points before any EMD.
    pub emd_points: Option<usize>,
    /// Skip the all-pairs EMD matrices behind COV-EMD and 1-NNA-EMD.
    pub skip_emd_sets: bool,
    pub allow_ridge: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { channels: 3, emd_per_point: false, emd_points: None, skip_emd_sets: false, allow_ridge: true, seed: 0 }
    }
}

/// One row of the report. Missing values could not be computed (see the notes).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub count: usize,
    pub cd: Option<f64>,
    pub emd: Option<f64>,
    pub cov_cd: Option<f64>,
    pub cov_emd: Option<f64>,
    pub cov_int: Option<f64>,
    pub nna_cd: Option<f64>,
    pub nna_emd: Option<f64>,
    pub nna_int: Option<f64>,
    pub fpd_3ch: Option<f64>,
    pub fpd_4ch: Option<f64>,
    pub kpd_3ch: Option<f64>,
    pub kpd_4ch: Option<f64>,
    pub apc: Option<f64>,
    pub jsd: Option<f64>,
}

impl SetMetrics {
    fn values(&self) -> [Option<f64>; 14] {
        [
            self.cd, self.emd, self.cov_cd, self.cov_emd, self.cov_int, self.nna_cd, self.nna_emd, self.nna_int,
            self.fpd_3ch, self.fpd_4ch, self.kpd_3ch, self.kpd_4ch, self.apc, self.jsd,
        ]
    }

    fn from_values(count: usize, v: [Option<f64>; 14]) -> Self {
        let [cd, emd, cov_cd, cov_emd, cov_int, nna_cd, nna_emd, nna_int, fpd_3ch, fpd_4ch, kpd_3ch, kpd_4ch, apc, jsd] = v;
        Self { count, cd, emd, cov_cd, cov_emd, cov_int, nna_cd, nna_emd, nna_int, fpd_3ch, fpd_4ch, kpd_3ch, kpd_4ch, apc, jsd }
    }
}

const COLUMNS: [&str; 14] = [
    "CD", "EMD", "COV-CD", "COV-EMD", "COV-INT", "1NNA-CD", "1NNA-EMD", "1NNA-INT", "FPD-3", "FPD-4", "KPD-3", "KPD-4",
    "APC", "JSD",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub real_count: usize,
    pub generated_count: usize,
    pub channels: usize,
    pub emd_per_point: bool,
    pub emd_points: Option<usize>,
    /// Identifier (content hash) of the feature-extractor checkpoint.
    pub extractor_id: Option<String>,
    pub fpd_ridged: bool,
    pub emd_approximate: bool,
    pub nna_ties: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, SetMetrics>,
    /// Unweighted mean over classes of each available value.
    pub mean: SetMetrics,
    pub meta: ReportMeta,
}

impl MetricsReport {
    /// Plain-text table, one row per class plus the mean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10} {:>5}", "class", "n");
        for c in COLUMNS {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
        let rows = self.per_class.iter().map(|(k, v)| (k.as_str(), v)).chain(std::iter::once(("mean", &self.mean)));
        for (name, m) in rows {
            let _ = write!(out, "{name:<10} {:>5}", m.count);
            for v in m.values() {
                match v {
                    Some(x) => {
                        let _ = write!(out, " {x:>9.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for n in &self.meta.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

fn resample(ps: &PointSet, n: usize, rng: &mut ChaCha8Rng) -> PointSet {
    if ps.len() >= n {
        let mut idx = index::sample(rng, ps.len(), n).into_vec();
        idx.sort_unstable();
        PointSet::new(idx.into_iter().map(|i| ps.points[i]).collect())
    } else {
        let mut pts = ps.points.clone();
        pts.extend((ps.len()..n).map(|_| ps.points[rng.random_range(0..ps.len())]));
        PointSet::new(pts)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

struct ClassEval<'a> {
    real: Vec<&'a PointSet>,
    gen: Vec<&'a PointSet>,
    real_emd: Vec<PointSet>,
    gen_emd: Vec<PointSet>,
    labels: Vec<String>,
}

fn set_metric(
    real: &[PointSet],
    gen: &[PointSet],
    kind: SetDistance,
    channels: usize,
    meta: &mut ReportMeta,
) -> Result<(f64, f64)> {
    let d_gr = distance_matrix(gen, real, kind, channels)?;
    let d_rg: Vec<Vec<f64>> = (0..real.len()).map(|i| d_gr.iter().map(|r| r[i]).collect()).collect();
    let cov = coverage(&d_gr)?;
    let nna = one_nna(&self_distance_matrix(real, kind, channels)?, &self_distance_matrix(gen, kind, channels)?, &d_rg)?;
    meta.nna_ties += nna.ties;
    Ok((cov, nna.value))
}

fn eval_class(c: &ClassEval, extractor: Option<&FeatureExtractor>, cfg: &EvalConfig, meta: &mut ReportMeta) -> Result<SetMetrics> {
    let ch = cfg.channels;
    let real: Vec<PointSet> = c.real.iter().map(|&p| p.clone()).collect();
    let gen: Vec<PointSet> = c.gen.iter().map(|&p| p.clone()).collect();
    let mut m = SetMetrics { count: real.len(), ..Default::default() };

    m.cd = mean(real.iter().zip(&gen).map(|(r, g)| chamfer(r, g, ch)).collect::<Result<Vec<_>>>()?);
    let mut paired = Vec::with_capacity(real.len());
    for (r, g) in c.real_emd.iter().zip(&c.gen_emd) {
        if r.len() != g.len() {
            return Err(Error::Contract(format!(
                "EMD pair with {} real and {} generated points; pass emd_points to resample",
                r.len(),
                g.len()
            )));
        }
        let e = emd(r, g, ch, cfg.emd_per_point)?;
        meta.emd_approximate |= e.approximate;
        paired.push(e.cost);
    }
    m.emd = mean(paired);

    let (cov, nna) = set_metric(&real, &gen, SetDistance::Chamfer, ch, meta)?;
    (m.cov_cd, m.nna_cd) = (Some(cov), Some(nna));
    let (cov, nna) = set_metric(&real, &gen, SetDistance::Intensity, ch, meta)?;
    (m.cov_int, m.nna_int) = (Some(cov), Some(nna));
    let sizes = c.real_emd.iter().chain(&c.gen_emd).map(PointSet::len);
    let uniform = sizes.clone().min() == sizes.max();
    if cfg.skip_emd_sets {
    } else if uniform {
        let (cov, nna) = set_metric(&c.real_emd, &c.gen_emd, SetDistance::Emd, ch, meta)?;
        (m.cov_emd, m.nna_emd) = (Some(cov), Some(nna));
    } else {
        let note = "COV-EMD and 1-NNA-EMD skipped: object sizes differ (set emd_points)".to_string();
        if !meta.notes.contains(&note) {
            meta.notes.push(note);
        }
    }

    if let Some(ex) = extractor {
        for channels in [3, 4] {
            let fr = ex.features(&real, channels)?;
            let fg = ex.features(&gen, channels)?;
            let f = fpd(&fr, &fg, cfg.allow_ridge)?;
            meta.fpd_ridged |= f.ridged;
            let k = if real.len() >= 2 { Some(kpd(&fr, &fg)?.value) } else { None };
            if channels == 3 {
                (m.fpd_3ch, m.kpd_3ch) = (Some(f.value), k);
            } else {
                (m.fpd_4ch, m.kpd_4ch) = (Some(f.value), k);
            }
        }
        m.apc = Some(apc(ex, &gen, &c.labels, 4)?);
    }
    m.jsd = Some(jsd(&real, &gen)?);
    Ok(m)
}

/// Evaluates `gen` against `real`, where `gen[j]` was produced from the condition of `real[j]`.
pub fn evaluate(
    real: &LabelledSet,
    gen: &LabelledSet,
    extractor: Option<&FeatureExtractor>,
    extractor_id: Option<String>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if real.is_empty() || real.len() != gen.len() {
        return Err(Error::Contract(format!("{} real objects against {} generated", real.len(), gen.len())));
    }
    if let Some(j) = (0..real.len()).find(|&j| real.labels[j] != gen.labels[j]) {
        return Err(Error::Contract(format!(
            "object {j}: generated class {:?} differs from real class {:?}",
            gen.labels[j], real.labels[j]
        )));
    }
    if !(cfg.channels == 3 || cfg.channels == 4) {
        return Err(Error::Config(format!("channels must be 3 or 4, got {}", cfg.channels)));
    }
    if let Some(ex) = extractor {
        for l in real.class_indices().keys() {
            ex.class_index(l)?;
        }
    }
    let mut meta = ReportMeta {
        seed: cfg.seed,
        real_count: real.len(),
        generated_count: gen.len(),
        channels: cfg.channels,
        emd_per_point: cfg.emd_per_point,
        emd_points: cfg.emd_points,
        extractor_id,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prep = |sets: &[PointSet], rng: &mut ChaCha8Rng| -> Vec<PointSet> {
        match cfg.emd_points {
            Some(n) => sets.iter().map(|s| resample(s, n, rng)).collect(),
            None => sets.to_vec(),
        }
    };
    let real_emd = prep(&real.sets, &mut rng);
    let gen_emd = prep(&gen.sets, &mut rng);

    let mut per_class = BTreeMap::new();
    for (cls, idx) in real.class_indices() {
        let c = ClassEval {
            real: idx.iter().map(|&j| &real.sets[j]).collect(),
            gen: idx.iter().map(|&j| &gen.sets[j]).collect(),
            real_emd: idx.iter().map(|&j| real_emd[j].clone()).collect(),
            gen_emd: idx.iter().map(|&j| gen_emd[j].clone()).collect(),
            labels: vec![cls.to_string(); idx.len()],
        };
        per_class.insert(cls.to_string(), eval_class(&c, extractor, cfg, &mut meta)?);
    }
    let mut values = [None; 14];
    for (k, v) in values.iter_mut().enumerate() {
        *v = mean(per_class.values().filter_map(|m: &SetMetrics| m.values()[k]));
    }
    let mean_row = SetMetrics::from_values(real.len(), values);
    if meta.fpd_ridged {
        meta.notes.push("FPD covariance was singular; ridge added".into());
    }
    if meta.emd_approximate {
        meta.notes.push("EMD used the approximate solver for large objects".into());
    }
    Ok(MetricsReport { per_class, mean: mean_row, meta })
}
