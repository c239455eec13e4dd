//! LiDAR object types and the sensor-relative parameterization.
//!
//! Raw objects live in the sensor frame (sensor at the origin, z up). The
//! canonical form used for learning is box-centered and rotated so the box
//! heading lies along +x, with log-max scaled intensity. The box pose is
//! reduced to the conditioning tuple `(phi, d, z, l, w, h)`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default dataset-level intensity maximum (8-bit sensors).
pub const DEFAULT_I_MAX: f64 = 255.0;

/// Minimum number of points for an object to enter training or evaluation.
pub const MIN_POINTS: usize = 20;

/// Per-side inflation of boxes when testing point membership.
pub const BOX_MARGIN: f64 = 0.01;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// A single return: position in meters plus intensity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub i: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, i: f64) -> Self {
        Self { x, y, z, i }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.i]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.i.is_finite()
    }
}

/// An ordered set of points. Every transform in this module preserves `len()`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointSet {
    pub points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `n x 4` buffer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.to_array()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 4 != 0 {
            return Err(Error::Dimension(format!(
                "flat point buffer of length {} is not a multiple of 4",
                flat.len()
            )));
        }
        Ok(Self::new(
            flat.chunks_exact(4)
                .map(|c| Point::new(c[0], c[1], c[2], c[3]))
                .collect(),
        ))
    }

    /// Symmetric extent `2 * max |coord|` along x, y, z.
    ///
    /// In the box-centered frame this estimates `(l, w, h)` even when only
    /// the faces turned toward the sensor were scanned.
    pub fn centered_extent(&self) -> [f64; 3] {
        let mut m = [0.0f64; 3];
        for p in &self.points {
            m[0] = m[0].max(p.x.abs());
            m[1] = m[1].max(p.y.abs());
            m[2] = m[2].max(p.z.abs());
        }
        [2.0 * m[0], 2.0 * m[1], 2.0 * m[2]]
    }

    /// Intensity clamped into `[0, 1]`.
    pub fn clamp_intensity(&mut self) {
        for p in &mut self.points {
            p.i = p.i.clamp(0.0, 1.0);
        }
    }
}

/// Oriented 3D box in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub center: [f64; 3],
    /// `(l, w, h)`: length along the heading, width, height.
    pub extent: [f64; 3],
    /// Heading around +z, in `[-pi, pi)`.
    pub yaw: f64,
}

impl BoxAnnotation {
    pub fn new(center: [f64; 3], extent: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self { center, extent, yaw: wrap_angle(yaw) };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidAnnotation(format!(
                "box extent {:?} must be strictly positive",
                self.extent
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::InvalidAnnotation("non-finite box pose".into()));
        }
        Ok(())
    }

    pub fn horizontal_range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    /// Sensor-frame point to box frame (translation then `R_z(-yaw)`).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Box frame to sensor frame; inverse of [`Self::to_local`].
    pub fn to_sensor(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0],
            s * q[0] + c * q[1] + self.center[1],
            q[2] + self.center[2],
        ]
    }

    /// Membership in the box inflated by `margin` on every side.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let q = self.to_local(p);
        (0..3).all(|k| q[k].abs() <= 0.5 * self.extent[k] + margin)
    }
}

/// One annotated object in the sensor frame. Raw intensity is in `[0, i_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarObject {
    pub cls: String,
    pub raw: PointSet,
    pub bbox: BoxAnnotation,
}

impl LidarObject {
    /// Builds an object from labelled returns, keeping points of `cls` that fall
    /// inside the inflated box.
    pub fn from_labelled_points(
        cls: &str,
        bbox: BoxAnnotation,
        points: impl IntoIterator<Item = (Point, String)>,
    ) -> Result<Self> {
        bbox.validate()?;
        let raw = points
            .into_iter()
            .filter(|(p, label)| label == cls && bbox.contains([p.x, p.y, p.z], BOX_MARGIN))
            .map(|(p, _)| p)
            .collect();
        Ok(Self { cls: cls.to_string(), raw: PointSet::new(raw), bbox })
    }

    pub fn validate(&self, i_max: f64) -> Result<()> {
        self.bbox.validate()?;
        if self.raw.is_empty() {
            return Err(Error::InvalidData("object has no points".into()));
        }
        for p in &self.raw.points {
            if !p.is_finite() {
                return Err(Error::InvalidData("non-finite point".into()));
            }
            if p.i < 0.0 || p.i > i_max {
                return Err(Error::InvalidData(format!("raw intensity {} outside [0, {i_max}]", p.i)));
            }
            if !self.bbox.contains([p.x, p.y, p.z], BOX_MARGIN) {
                return Err(Error::InvalidData("point outside its box".into()));
            }
        }
        Ok(())
    }
}

/// Conditioning tuple. When `is_null` the numeric fields carry no meaning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub phi: f64,
    pub d: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub is_null: bool,
}

impl Condition {
    pub fn new(phi: f64, d: f64, z: f64, l: f64, w: f64, h: f64) -> Self {
        Self { phi: wrap_angle(phi), d, z, l, w, h, is_null: false }
    }

    /// The classifier-free-guidance null condition.
    pub fn null() -> Self {
        Self { phi: 0.0, d: 0.0, z: 0.0, l: 1.0, w: 1.0, h: 1.0, is_null: true }
    }

    /// `[phi, d, z, l, w, h]`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.phi, self.d, self.z, self.l, self.w, self.h]
    }

    pub fn from_array(k: [f64; 6]) -> Self {
        Self::new(k[0], k[1], k[2], k[3], k[4], k[5])
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    /// Same condition with the observation angle rotated by `delta`.
    pub fn rotated(&self, delta: f64) -> Self {
        Self { phi: wrap_angle(self.phi + delta), ..*self }
    }
}

/// Angle between the box heading and the ray from the box center to the sensor.
///
/// Zero when the heading points at the sensor.
pub fn observation_angle(bbox: &BoxAnnotation) -> Result<f64> {
    let (cx, cy) = (bbox.center[0], bbox.center[1]);
    if cx == 0.0 && cy == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    Ok(wrap_angle((-cy).atan2(-cx) - bbox.yaw))
}

/// Log-max intensity scaling onto `[0, 1]`.
pub fn scale_intensity(i_raw: f64, i_max: f64) -> Result<f64> {
    if !(i_max > 0.0) {
        return Err(Error::Config(format!("i_max must be positive, got {i_max}")));
    }
    if !(i_raw >= 0.0) {
        return Err(Error::InvalidData(format!("negative raw intensity {i_raw}")));
    }
    Ok(i_raw.ln_1p() / i_max.ln_1p())
}

/// Inverse of [`scale_intensity`].
pub fn unscale_intensity(i: f64, i_max: f64) -> f64 {
    (i * i_max.ln_1p()).exp_m1()
}

/// Box-centered, heading-aligned points plus the conditioning tuple.
pub fn canonicalize(obj: &LidarObject, i_max: f64) -> Result<(PointSet, Condition)> {
    obj.bbox.validate()?;
    let phi = observation_angle(&obj.bbox)?;
    let points = obj
        .raw
        .points
        .iter()
        .map(|p| {
            let q = obj.bbox.to_local([p.x, p.y, p.z]);
            Ok(Point::new(q[0], q[1], q[2], scale_intensity(p.i, i_max)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let [l, w, h] = obj.bbox.extent;
    let cond = Condition {
        phi,
        d: obj.bbox.horizontal_range(),
        z: obj.bbox.center[2],
        l,
        w,
        h,
        is_null: false,
    };
    Ok((PointSet::new(points), cond))
}

/// Maps canonical points back into the sensor frame of `bbox`.
pub fn decanonicalize(points: &PointSet, bbox: &BoxAnnotation, i_max: f64) -> PointSet {
    PointSet::new(
        points
            .points
            .iter()
            .map(|p| {
                let q = bbox.to_sensor([p.x, p.y, p.z]);
                Point::new(q[0], q[1], q[2], unscale_intensity(p.i, i_max))
            })
            .collect(),
    )
}

/// A batch zero-padded to its longest member.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub max_len: usize,
    /// One row-major `max_len x 4` buffer per object.
    pub data: Vec<Vec<f64>>,
    /// `true` marks real points.
    pub masks: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn real_count(&self, j: usize) -> usize {
        self.masks[j].iter().filter(|&&m| m).count()
    }

    /// Mask-filtered extraction of object `j`.
    pub fn extract(&self, j: usize) -> PointSet {
        PointSet::new(
            self.data[j]
                .chunks_exact(4)
                .zip(&self.masks[j])
                .filter(|(_, &m)| m)
                .map(|(c, _)| Point::new(c[0], c[1], c[2], c[3]))
                .collect(),
        )
    }
}

pub fn pad_batch(objs: &[PointSet]) -> Result<PaddedBatch> {
    if objs.is_empty() {
        return Err(Error::Contract("cannot pad an empty batch".into()));
    }
    let max_len = objs.iter().map(PointSet::len).max().unwrap_or(0);
    let mut data = Vec::with_capacity(objs.len());
    let mut masks = Vec::with_capacity(objs.len());
    for o in objs {
        let mut buf = o.to_flat();
        buf.resize(max_len * 4, 0.0);
        let mut mask = vec![true; o.len()];
        mask.resize(max_len, false);
        data.push(buf);
        masks.push(mask);
    }
    Ok(PaddedBatch { max_len, data, masks })
}
