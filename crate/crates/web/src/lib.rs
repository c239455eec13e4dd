//! WebAssembly bindings for the static demo page in `www/`.
//!
//! [`Scene`] holds the logic and is testable natively; [`Demo`] is the thin
//! JS-facing wrapper.

use lidargen::diffusion::{forward_noise, standard_normal, DiffusionSchedule};
use lidargen::metrics::{chamfer, emd};
use lidargen::objects::{canonicalize, Condition, PointSet, DEFAULT_I_MAX};
use lidargen::render::render_svg;
use lidargen::synthgen::{generate_object, ObjectClass, SynthConfig};
use lidargen::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// One synthetic scan in canonical coordinates.
#[derive(Debug, Clone)]
pub struct Scene {
    pub class: ObjectClass,
    pub seed: u64,
    pub points: PointSet,
    pub condition: Condition,
    schedule: DiffusionSchedule,
}

impl Scene {
    pub fn scan(class: &str, seed: u64) -> Result<Self> {
        let class = ObjectClass::from_name(class)?;
        let cfg = SynthConfig::new(&[(class, 1)], seed);
        let obj = generate_object(class, 0, &cfg)?;
        let (points, condition) = canonicalize(&obj, DEFAULT_I_MAX)?;
        Ok(Self { class, seed, points, condition, schedule: DiffusionSchedule::default() })
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn svg(&self) -> Result<String> {
        render_svg(&self.points, &self.title())
    }

    /// The object after `t` forward diffusion steps (`t = 0` is the clean scan).
    pub fn noised(&self, t: usize) -> Result<PointSet> {
        if t == 0 {
            return Ok(self.points.clone());
        }
        let x0 = self.points.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eps = standard_normal(&mut rng, x0.len());
        PointSet::from_flat(&forward_noise(&x0, t, &eps, &self.schedule)?)
    }

    pub fn noised_svg(&self, t: usize) -> Result<String> {
        render_svg(&self.noised(t)?, &format!("{} t={t}", self.title()))
    }

    /// Chamfer on the full sets and per-point EMD on strided subsamples of equal size.
    pub fn distances(&self, other: &Scene) -> Result<(f64, f64)> {
        let cd = chamfer(&self.points, &other.points, 3)?;
        let n = self.points.len().min(other.points.len());
        let e = emd(&strided(&self.points, n), &strided(&other.points, n), 3, true)?;
        Ok((cd, e.cost))
    }

    fn title(&self) -> String {
        let k = &self.condition;
        format!("{} seed {} ({} pts, d={:.1} m)", self.class.name(), self.seed, self.points.len(), k.d)
    }
}

fn strided(ps: &PointSet, n: usize) -> PointSet {
    let m = ps.len();
    PointSet::new((0..n).map(|j| ps.points[j * m / n]).collect())
}

fn js(e: lidargen::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(class: &str, seed: u32) -> std::result::Result<Demo, JsError> {
        Scene::scan(class, seed.into()).map(|scene| Demo { scene }).map_err(js)
    }

    pub fn steps(&self) -> usize {
        self.scene.steps()
    }

    pub fn points(&self) -> usize {
        self.scene.points.len()
    }

    pub fn svg(&self) -> std::result::Result<String, JsError> {
        self.scene.svg().map_err(js)
    }

    pub fn noised_svg(&self, t: usize) -> std::result::Result<String, JsError> {
        self.scene.noised_svg(t).map_err(js)
    }

    /// `[chamfer, emd_per_point]` against a fresh scan.
    pub fn compare(&self, class: &str, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
        let other = Scene::scan(class, seed.into()).map_err(js)?;
        let (cd, e) = self.scene.distances(&other).map_err(js)?;
        Ok(vec![cd, e])
    }
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    ObjectClass::ALL.iter().map(|c| c.name().to_string()).collect()
}
