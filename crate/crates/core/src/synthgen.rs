//! Procedural LiDAR objects.
//!
//! A multi-beam spinning scanner at the origin casts one ray per (beam,
//! azimuth column) against analytic primitives placed in an oriented box.
//! The first hit along each ray becomes a point; its raw intensity is
//! `255 * base * cos(incidence)^k / (1 + c * range^2)` with a small
//! deterministic per-ray jitter.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{object_file_name, Dataset, Manifest, ObjectRecord, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::objects::{canonicalize, BoxAnnotation, LidarObject, Point, PointSet, DEFAULT_I_MAX, MIN_POINTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerSpec {
    pub num_beams: usize,
    pub elevation_max_deg: f64,
    pub elevation_min_deg: f64,
    pub azimuth_step_deg: f64,
    pub sensor_height: f64,
    pub max_range: f64,
    /// Exponent `k` on the cosine of the incidence angle.
    pub incidence_exponent: f64,
    /// Range attenuation `c` in `1 / (1 + c d^2)`.
    pub range_attenuation: f64,
    /// Relative half-width of the per-ray intensity jitter.
    pub intensity_jitter: f64,
}

impl Default for ScannerSpec {
    /// A 32-beam sensor with a +10.67 to -30.67 degree vertical field of view.
    fn default() -> Self {
        Self {
            num_beams: 32,
            elevation_max_deg: 10.67,
            elevation_min_deg: -30.67,
            azimuth_step_deg: 0.2,
            sensor_height: 1.84,
            max_range: 80.0,
            incidence_exponent: 1.0,
            range_attenuation: 0.0025,
            intensity_jitter: 0.05,
        }
    }
}

impl ScannerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0 {
            return Err(Error::Config("scanner needs at least one beam".into()));
        }
        if self.num_beams > 1 && !(self.elevation_max_deg > self.elevation_min_deg) {
            return Err(Error::Config("vertical field of view is degenerate".into()));
        }
        if !(self.azimuth_step_deg > 0.0) || !(self.sensor_height > 0.0) || !(self.max_range > 0.0) {
            return Err(Error::Config("azimuth step, sensor height and range must be positive".into()));
        }
        Ok(())
    }

    /// Beam elevations in radians, top beam first.
    pub fn elevations(&self) -> Vec<f64> {
        if self.num_beams == 1 {
            return vec![self.elevation_max_deg.to_radians()];
        }
        let span = self.elevation_max_deg - self.elevation_min_deg;
        (0..self.num_beams)
            .map(|b| (self.elevation_max_deg - span * b as f64 / (self.num_beams - 1) as f64).to_radians())
            .collect()
    }

    /// Angular spacing between adjacent beams in radians.
    pub fn beam_spacing(&self) -> f64 {
        if self.num_beams == 1 {
            return 0.0;
        }
        (self.elevation_max_deg - self.elevation_min_deg).to_radians() / (self.num_beams - 1) as f64
    }

    pub fn ground_z(&self) -> f64 {
        -self.sensor_height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box { center: [f64; 3], half: [f64; 3] },
    /// Axis-aligned cylinder; `axis` is 1 (y) or 2 (z).
    Cylinder { center: [f64; 3], radius: f64, half_len: f64, axis: usize },
    Sphere { center: [f64; 3], radius: f64 },
}

/// Nearest intersection `t > 0` of `o + t d` with the shape and the surface normal.
fn intersect(shape: &Shape, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Box { center, half } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis0 = 0;
            let mut sign0 = 0.0;
            for k in 0..3 {
                let lo = center[k] - half[k] - o[k];
                let hi = center[k] + half[k] - o[k];
                if d[k].abs() < 1e-15 {
                    if lo > 0.0 || hi < 0.0 {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = (lo / d[k], hi / d[k]);
                let mut s = -1.0;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                    s = 1.0;
                }
                if a > t0 {
                    t0 = a;
                    axis0 = k;
                    sign0 = s;
                }
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis0] = sign0;
            Some((t0, n))
        }
        Shape::Sphere { center, radius } => {
            let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
            let a = dot(d, d);
            let b = 2.0 * dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= EPS {
                return None;
            }
            let p = [o[0] + t * d[0] - center[0], o[1] + t * d[1] - center[1], o[2] + t * d[2] - center[2]];
            Some((t, [p[0] / radius, p[1] / radius, p[2] / radius]))
        }
        Shape::Cylinder { center, radius, half_len, axis } => {
            // radial plane coordinates (u, v) and axial coordinate a
            let (iu, iv) = if axis == 2 { (0, 1) } else { (0, 2) };
            let ou = o[iu] - center[iu];
            let ov = o[iv] - center[iv];
            let oa = o[axis] - center[axis];
            let mut best: Option<(f64, [f64; 3])> = None;
            let mut consider = |t: f64, n: [f64; 3]| {
                if t > EPS && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let a = d[iu] * d[iu] + d[iv] * d[iv];
            if a > 1e-15 {
                let b = 2.0 * (ou * d[iu] + ov * d[iv]);
                let c = ou * ou + ov * ov - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    for t in [(-b - disc.sqrt()) / (2.0 * a), (-b + disc.sqrt()) / (2.0 * a)] {
                        if (oa + t * d[axis]).abs() <= half_len {
                            let mut n = [0.0; 3];
                            n[iu] = (ou + t * d[iu]) / radius;
                            n[iv] = (ov + t * d[iv]) / radius;
                            consider(t, n);
                        }
                    }
                }
            }
            if d[axis].abs() > 1e-15 {
                for s in [-1.0, 1.0] {
                    let t = (s * half_len - oa) / d[axis];
                    let (u, v) = (ou + t * d[iu], ov + t * d[iv]);
                    if u * u + v * v <= radius * radius {
                        let mut n = [0.0; 3];
                        n[axis] = s;
                        consider(t, n);
                    }
                }
            }
            best
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// One primitive with its base reflectance in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Part {
    pub shape: Shape,
    pub reflectance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Post,
    Bike,
    Barrier,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [ObjectClass::Vehicle, ObjectClass::Post, ObjectClass::Bike, ObjectClass::Barrier];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Post => "post",
            ObjectClass::Bike => "bike",
            ObjectClass::Barrier => "barrier",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Label(format!("unknown synthetic class {s:?}")))
    }

    pub fn template(self) -> ShapeTemplate {
        let (l, w, h, d) = match self {
            ObjectClass::Vehicle => ((3.6, 4.8), (1.6, 2.0), (1.4, 1.8), (6.0, 25.0)),
            ObjectClass::Post => ((0.16, 0.4), (0.16, 0.4), (2.5, 4.0), (3.0, 15.0)),
            ObjectClass::Bike => ((1.6, 1.9), (0.5, 0.7), (1.0, 1.2), (4.0, 16.0)),
            ObjectClass::Barrier => ((1.5, 3.0), (0.15, 0.35), (0.8, 1.1), (4.0, 20.0)),
        };
        ShapeTemplate { class: self, length: l, width: w, height: h, distance: d }
    }
}

/// Size and placement ranges of a class; parts are built from sampled `(l, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeTemplate {
    pub class: ObjectClass,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    /// Horizontal range of the box center from the sensor.
    pub distance: (f64, f64),
}

fn boxp(lo: [f64; 3], hi: [f64; 3], reflectance: f64) -> Part {
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1]), 0.5 * (hi[2] - lo[2])];
    Part { shape: Shape::Box { center, half }, reflectance }
}

impl ShapeTemplate {
    /// Primitives in the box frame; their union spans exactly `[-e/2, e/2]` per axis.
    pub fn parts(&self, extent: [f64; 3]) -> Vec<Part> {
        let [l, w, h] = extent;
        let (hl, hw, hh) = (l / 2.0, w / 2.0, h / 2.0);
        match self.class {
            ObjectClass::Vehicle => {
                let body_lo = -hh + 0.12 * h;
                let body_hi = -hh + 0.55 * h;
                let r = 0.17 * h;
                let mut parts = vec![
                    boxp([-hl, -hw, body_lo], [hl, hw, body_hi], 0.55),
                    boxp([-0.3 * l, -0.45 * w, body_hi], [0.25 * l, 0.45 * w, hh], 0.2),
                ];
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        parts.push(Part {
                            shape: Shape::Cylinder {
                                center: [sx * 0.32 * l, sy * (hw - 0.12), -hh + r],
                                radius: r,
                                half_len: 0.1,
                                axis: 1,
                            },
                            reflectance: 0.1,
                        });
                    }
                }
                parts
            }
            ObjectClass::Post => vec![Part {
                shape: Shape::Cylinder { center: [0.0; 3], radius: hl.min(hw), half_len: hh, axis: 2 },
                reflectance: 0.75,
            }],
            ObjectClass::Bike => {
                let rw = (0.35 * h).min(l / 4.0);
                let axle = -hh + rw;
                let mut parts: Vec<Part> = [-1.0, 1.0]
                    .iter()
                    .map(|&s| Part {
                        shape: Shape::Cylinder { center: [s * (hl - rw), 0.0, axle], radius: rw, half_len: 0.03, axis: 1 },
                        reflectance: 0.15,
                    })
                    .collect();
                let fx = hl - rw;
                parts.push(boxp([-fx, -0.03, axle], [fx, 0.03, axle + 0.12], 0.6));
                parts.push(boxp([fx - 0.03, -0.03, axle], [fx + 0.03, 0.03, hh - 0.04], 0.6));
                parts.push(boxp([fx - 0.04, -hw, hh - 0.04], [fx + 0.04, hw, hh], 0.5));
                parts.push(Part { shape: Shape::Sphere { center: [-0.35 * fx, 0.0, axle + 0.35], radius: 0.1 }, reflectance: 0.3 });
                parts
            }
            ObjectClass::Barrier => {
                vec![boxp([-hl, -hw, -hh], [hl, hw, -hh + 0.15 * h], 0.4), boxp([-hl, -0.5 * hw, -hh], [hl, 0.5 * hw, hh], 0.9)]
            }
        }
    }

    /// Random extent and placement on the ground plane.
    pub fn sample_pose(&self, spec: &ScannerSpec, rng: &mut impl Rng) -> BoxAnnotation {
        let u = |rng: &mut dyn rand::RngCore, (a, b): (f64, f64)| rng.random_range(a..=b);
        let l = u(rng, self.length);
        let w = if self.class == ObjectClass::Post { l } else { u(rng, self.width) };
        let h = u(rng, self.height);
        let d = u(rng, self.distance);
        let az = rng.random_range(-PI..PI);
        let yaw = rng.random_range(-PI..PI);
        BoxAnnotation {
            center: [d * az.cos(), d * az.sin(), spec.ground_z() + h / 2.0],
            extent: [l, w, h],
            yaw,
        }
    }
}

/// Outcome of scanning one pose.
#[derive(Debug, Clone, PartialEq)]
pub enum Scan {
    Object(LidarObject),
    /// Fewer than the minimum number of hits (possibly zero); pick a new pose.
    Sparse { hits: usize },
}

fn jitter(beam: usize, col: i64) -> f64 {
    let mut z = (beam as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (col as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 31;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 29;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// First-hit returns on `parts` placed in `bbox`, in sensor coordinates with raw intensity.
pub fn cast_rays(parts: &[Part], bbox: &BoxAnnotation, spec: &ScannerSpec) -> Result<Vec<Point>> {
    spec.validate()?;
    bbox.validate()?;
    let [l, w, _] = bbox.extent;
    if bbox.horizontal_range() <= 0.5 * l.hypot(w) {
        return Err(Error::InvalidAnnotation("the sensor lies inside the object footprint".into()));
    }
    // angular window covering the box
    let center_az = bbox.center[1].atan2(bbox.center[0]);
    let (mut span, mut emin, mut emax) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                let c = bbox.to_sensor([sx * bbox.extent[0], sy * bbox.extent[1], sz * bbox.extent[2]]);
                let rel = crate::objects::wrap_angle(c[1].atan2(c[0]) - center_az);
                span = span.max(rel.abs());
                let e = c[2].atan2(c[0].hypot(c[1]));
                emin = emin.min(e);
                emax = emax.max(e);
            }
        }
    }
    let step = spec.azimuth_step_deg.to_radians();
    let k0 = ((center_az - span) / step).floor() as i64 - 1;
    let k1 = ((center_az + span) / step).ceil() as i64 + 1;
    let (s, c) = bbox.yaw.sin_cos();
    let o_local = bbox.to_local([0.0; 3]);
    let mut out = Vec::new();
    for (b, &elev) in spec.elevations().iter().enumerate() {
        if elev < emin - 1e-6 || elev > emax + 1e-6 {
            continue;
        }
        let (se, ce) = elev.sin_cos();
        for k in k0..=k1 {
            let az = k as f64 * step;
            let d = [ce * az.cos(), ce * az.sin(), se];
            let dl = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
            let mut best: Option<(f64, [f64; 3], f64)> = None;
            for part in parts {
                if let Some((t, n)) = intersect(&part.shape, o_local, dl) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, n, part.reflectance));
                    }
                }
            }
            let Some((t, n, refl)) = best else { continue };
            if t > spec.max_range {
                continue;
            }
            let cos_inc = dot(n, dl).abs().min(1.0);
            let raw = DEFAULT_I_MAX * refl * cos_inc.powf(spec.incidence_exponent) / (1.0 + spec.range_attenuation * t * t);
            let raw = (raw * (1.0 + spec.intensity_jitter * jitter(b, k))).clamp(0.0, DEFAULT_I_MAX);
            out.push(Point::new(t * d[0], t * d[1], t * d[2], raw));
        }
    }
    Ok(out)
}

pub fn scan_object(template: &ShapeTemplate, bbox: &BoxAnnotation, spec: &ScannerSpec) -> Result<Scan> {
    let points = cast_rays(&template.parts(bbox.extent), bbox, spec)?;
    if points.len() < MIN_POINTS {
        return Ok(Scan::Sparse { hits: points.len() });
    }
    Ok(Scan::Object(LidarObject { cls: template.class.name().to_string(), raw: PointSet::new(points), bbox: *bbox }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Objects per class name.
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scanner: ScannerSpec,
    /// Random subsampling cap on points per object.
    #[serde(default = "default_max_points")]
    pub max_points: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_max_points() -> Option<usize> {
    Some(128)
}

fn default_val_fraction() -> f64 {
    0.2
}

impl SynthConfig {
    pub fn new(counts: &[(ObjectClass, usize)], seed: u64) -> Self {
        Self {
            name: default_name(),
            counts: counts.iter().map(|(c, n)| (c.name().to_string(), *n)).collect(),
            seed,
            scanner: ScannerSpec::default(),
            max_points: default_max_points(),
            val_fraction: default_val_fraction(),
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Scans one object with the RNG stream of global index `k`, resampling sparse poses.
pub fn generate_object(class: ObjectClass, k: u64, cfg: &SynthConfig) -> Result<LidarObject> {
    let template = class.template();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k);
    for _ in 0..MAX_ATTEMPTS {
        let bbox = template.sample_pose(&cfg.scanner, &mut rng);
        if let Scan::Object(mut obj) = scan_object(&template, &bbox, &cfg.scanner)? {
            if let Some(cap) = cfg.max_points {
                if obj.raw.len() > cap {
                    let mut idx = rand::seq::index::sample(&mut rng, obj.raw.len(), cap).into_vec();
                    idx.sort_unstable();
                    obj.raw = PointSet::new(idx.iter().map(|&i| obj.raw.points[i]).collect());
                }
            }
            return Ok(obj);
        }
    }
    Err(Error::InvalidData(format!("no pose of {} produced {MIN_POINTS} hits", class.name())))
}

/// Builds a dataset in memory: classes in name order, a per-class seeded 80/20 split.
pub fn make_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.scanner.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config(format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    if cfg.max_points.is_some_and(|m| m < MIN_POINTS) {
        return Err(Error::Config(format!("max_points must be at least {MIN_POINTS}")));
    }
    let mut jobs = Vec::new();
    let mut classes = Vec::new();
    for (name, &count) in &cfg.counts {
        let class = ObjectClass::from_name(name)?;
        if count == 0 {
            return Err(Error::Config(format!("class {name} needs at least one object")));
        }
        for _ in 0..count {
            jobs.push((classes.len(), class));
        }
        classes.push(name.clone());
    }
    let records: Vec<ObjectRecord> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(cid, class))| {
            let obj = generate_object(class, k as u64, cfg)?;
            let (points, condition) = canonicalize(&obj, DEFAULT_I_MAX)?;
            Ok(ObjectRecord { points, condition, class_id: cid as u32 })
        })
        .collect::<Result<_>>()?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(u64::MAX);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for cid in 0..classes.len() {
        let mut members: Vec<usize> = (0..jobs.len()).filter(|&k| jobs[k].0 == cid).collect();
        let n_val = (members.len() as f64 * cfg.val_fraction).round() as usize;
        members.shuffle(&mut split_rng);
        let mut v: Vec<usize> = members[..n_val].to_vec();
        let mut t: Vec<usize> = members[n_val..].to_vec();
        v.sort_unstable();
        t.sort_unstable();
        val.extend(v);
        train.extend(t);
    }
    train.sort_unstable();
    val.sort_unstable();
    let names = |ix: Vec<usize>| ix.into_iter().map(object_file_name).collect::<Vec<_>>();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        name: cfg.name.clone(),
        i_max: DEFAULT_I_MAX,
        classes,
        splits: [("train".to_string(), names(train)), ("val".to_string(), names(val))].into_iter().collect(),
        seed: Some(cfg.seed),
    };
    let objects = records.into_iter().enumerate().map(|(k, r)| (object_file_name(k), r)).collect();
    Ok(Dataset { manifest, objects })
}
