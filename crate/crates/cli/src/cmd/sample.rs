use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use lidargen::dataset::{object_file_name, Dataset, Manifest, ObjectRecord, MANIFEST_VERSION};
use lidargen::denoiser::Denoiser;
use lidargen::diffusion::sample;
use lidargen::objects::{Condition, DEFAULT_I_MAX};
use lidargen::tensor::Checkpoint;
use lidargen::train::TrainConfig;
use lidargen::Error;
use rayon::prelude::*;
use serde::Deserialize;

use super::{read_dataset, require};
use crate::config::{load, section};
use crate::manifest::{atomic_output, RunManifest};
use crate::ConfigArgs;

pub const GENERATED_SPLIT: &str = "generated";
/// Number of evenly spaced observation-angle rotations.
pub const ROTATIONS: usize = 5;

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Denoiser checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output dataset directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines file with one condition per line.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    pub conditions: Option<PathBuf>,
    /// Take conditions from a dataset split instead.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Only use dataset objects of the checkpoint's class instead of refusing others.
    #[arg(long)]
    pub filter_class: bool,
    /// Add `i / 5` of a full turn to every observation angle (i in 0..5).
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u32).range(0..5))]
    pub rotation: u32,
    /// Use at most this many conditions.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub inference_steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// One line of a conditions file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionLine {
    pub class: String,
    pub phi: f64,
    pub d: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub n_points: usize,
    /// Output object file name; defaults to the line index.
    #[serde(default)]
    pub name: Option<String>,
}

struct Job {
    name: String,
    class: String,
    condition: Condition,
    n_points: usize,
}

fn read_conditions(path: &PathBuf) -> anyhow::Result<Vec<Job>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut jobs = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: ConditionLine = serde_json::from_str(line)
            .map_err(|e| Error::InvalidData(format!("{}:{}: {e}", path.display(), k + 1)))?;
        if c.n_points == 0 || [c.d, c.l, c.w, c.h].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidData(format!("{}:{}: bad condition", path.display(), k + 1)).into());
        }
        let idx = jobs.len();
        jobs.push(Job {
            name: c.name.unwrap_or_else(|| object_file_name(idx)),
            class: c.class,
            condition: Condition::new(c.phi, c.d, c.z, c.l, c.w, c.h),
            n_points: c.n_points,
        });
    }
    Ok(jobs)
}

fn dataset_jobs(ds: &Dataset, split: &str, class: &str, filter: bool) -> anyhow::Result<Vec<Job>> {
    let mut jobs = Vec::new();
    for (name, r) in ds.split(split)? {
        let cls = &ds.manifest.classes[r.class_id as usize];
        if filter && cls != class {
            continue;
        }
        jobs.push(Job { name: name.to_string(), class: cls.clone(), condition: r.condition, n_points: r.points.len() });
    }
    Ok(jobs)
}

pub fn run(a: SampleArgs) -> anyhow::Result<()> {
    let loaded = load(a.config.config.as_deref(), &a.config.preset)?;
    require(&a.checkpoint, "checkpoint")?;
    let mut run = RunManifest::new("sample", &loaded.source, &loaded.raw);
    run.input("checkpoint", &a.checkpoint)?;
    let ck = Checkpoint::read(&a.checkpoint)?;
    let class = ck
        .meta
        .get("class")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Contract("checkpoint does not name its class".into()))?
        .to_string();
    let i_max = ck.meta.get("i_max").and_then(|v| v.as_f64()).unwrap_or(DEFAULT_I_MAX);
    let train: TrainConfig = serde_json::from_value(
        ck.meta.get("train").cloned().ok_or_else(|| Error::Contract("checkpoint has no training record".into()))?,
    )?;
    let sched = train.schedule.build()?;
    let model = Denoiser::from_checkpoint(&ck)?;

    let mut jobs = match (&a.conditions, &a.dataset) {
        (Some(p), _) => {
            require(p, "conditions file")?;
            run.input("conditions", p)?;
            read_conditions(p)?
        }
        (None, Some(d)) => {
            let ds = read_dataset(d)?;
            run.input("dataset", d)?;
            dataset_jobs(&ds, &a.split, &class, a.filter_class)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(j) = jobs.iter().find(|j| j.class != class) {
        return Err(Error::Contract(format!("condition {} is class {:?} but the checkpoint is {class:?}", j.name, j.class)).into());
    }
    if let Some(n) = a.limit {
        jobs.truncate(n);
    }
    let cap = model.config().max_points;
    if let Some(j) = jobs.iter().find(|j| j.n_points > cap) {
        return Err(Error::Capacity(format!("{} asks for {} points, model capacity is {cap}", j.name, j.n_points)).into());
    }
    let mut sc = section(&loaded.config.sampler, "sampler", &loaded.source)?;
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(s) = a.inference_steps {
        sc.inference_steps = s;
    }
    if let Some(g) = a.guidance {
        sc.guidance = g;
    }
    let delta = a.rotation as f64 / ROTATIONS as f64 * TAU;
    let records: Vec<(String, ObjectRecord)> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, j)| {
            let cond = j.condition.rotated(delta);
            let cfg = lidargen::diffusion::SamplerConfig { seed: sc.seed.wrapping_add(k as u64), ..sc };
            let points = sample(&model, &cond, j.n_points, &sched, &cfg)?;
            Ok((j.name.clone(), ObjectRecord { points, condition: cond, class_id: 0 }))
        })
        .collect::<lidargen::Result<_>>()?;
    let names: Vec<String> = records.iter().map(|r| r.0.clone()).collect();
    let count = records.len();
    let ds = Dataset {
        manifest: Manifest {
            version: MANIFEST_VERSION,
            name: format!("generated-{class}"),
            i_max,
            classes: vec![class.clone()],
            splits: BTreeMap::from([(GENERATED_SPLIT.to_string(), names)]),
            seed: Some(sc.seed),
        },
        objects: records.into_iter().collect(),
    };
    if ds.objects.len() != count {
        return Err(Error::InvalidData("duplicate object names in conditions".into()).into());
    }
    run.outputs = serde_json::json!({ "class": class, "objects": count, "rotation": a.rotation, "sampler": sc });
    atomic_output(&a.out, |tmp| {
        ds.write_files(tmp)?;
        run.write(tmp)
    })?;
    println!("sampled {count} {class} objects into {}", a.out.display());
    Ok(())
}
