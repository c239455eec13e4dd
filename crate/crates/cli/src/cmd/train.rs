use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use lidargen::dataset::Dataset;
use lidargen::denoiser::Denoiser;
use lidargen::metrics::train_feature_extractor;
use lidargen::objects::PointSet;
use lidargen::tensor::Checkpoint;
use lidargen::train::{TrainSample, Trainer};
use lidargen::Error;

use super::{read_dataset, require};
use crate::config::{load, section};
use crate::manifest::{atomic_output, write_json, RunManifest};
use crate::ConfigArgs;

pub const MODEL_FILE: &str = "model.ckpt";
pub const EXTRACTOR_FILE: &str = "extractor.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Denoiser,
    Extractor,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output run directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "denoiser")]
    pub target: Target,
    /// Class to train on; required when the dataset has several.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Total optimizer steps, overriding the config.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a denoiser checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(a: TrainArgs) -> anyhow::Result<()> {
    match a.target {
        Target::Denoiser => train_denoiser(a),
        Target::Extractor => train_extractor(a),
    }
}

fn pick_class(ds: &Dataset, requested: Option<&str>) -> anyhow::Result<String> {
    match requested {
        Some(c) => {
            ds.manifest.class_id(c)?;
            Ok(c.to_string())
        }
        None if ds.manifest.classes.len() == 1 => Ok(ds.manifest.classes[0].clone()),
        None => Err(Error::Contract(format!(
            "one model per class: dataset has classes {:?}, pass --class",
            ds.manifest.classes
        ))
        .into()),
    }
}

fn nan_dump_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{name}.nan-dump.json"))
}

fn train_denoiser(a: TrainArgs) -> anyhow::Result<()> {
    let loaded = load(a.config.config.as_deref(), &a.config.preset)?;
    let ds = read_dataset(&a.dataset)?;
    let class = pick_class(&ds, a.class.as_deref())?;
    let data: Vec<TrainSample> = ds
        .split_class(&a.split, &class)?
        .into_iter()
        .map(|r| TrainSample { points: r.points.to_flat(), condition: r.condition })
        .collect();
    if data.is_empty() {
        return Err(Error::Contract(format!("split {:?} has no {class} objects", a.split)).into());
    }
    let mut tc = section(&loaded.config.train, "train", &loaded.source)?;
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let mut run = RunManifest::new("train", &loaded.source, &loaded.raw);
    let dataset_sha = run.input("dataset", &a.dataset)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            require(p, "checkpoint")?;
            run.input("resume", p)?;
            let ck = Checkpoint::read(p)?;
            let stored = ck.meta.get("class").and_then(|v| v.as_str()).unwrap_or_default();
            if stored != class {
                return Err(Error::Contract(format!("checkpoint class {stored:?} differs from {class:?}")).into());
            }
            Trainer::from_checkpoint(&ck, tc)?
        }
        None => {
            let mc = section(&loaded.config.denoiser, "denoiser", &loaded.source)?;
            Trainer::new(Denoiser::new(mc, tc.seed)?, tc)?
        }
    };
    let cap = trainer.model.config().max_points;
    if let Some(big) = data.iter().map(|s| s.points.len() / 4).find(|&n| n > cap) {
        return Err(Error::Capacity(format!("object with {big} points exceeds model capacity {cap}")).into());
    }
    let meta = || {
        let mut m = serde_json::Map::new();
        m.insert("class".into(), class.clone().into());
        m.insert("i_max".into(), ds.manifest.i_max.into());
        m.insert("dataset_sha256".into(), dataset_sha.clone().into());
        m
    };
    let every = loaded.config.checkpoint_every.unwrap_or(0);
    let start = trainer.step;
    let dump_path = nan_dump_path(&a.out);
    atomic_output(&a.out, |tmp| {
        let mut csv = String::from("step,loss\n");
        let mut first = None;
        let mut last = f64::NAN;
        while trainer.step < tc.steps {
            match trainer.step(&data)? {
                Ok(r) => {
                    let _ = writeln!(csv, "{},{}", r.step, r.loss);
                    first.get_or_insert(r.loss);
                    last = r.loss;
                    if r.step % 100 == 0 {
                        log::info!("step {} loss {:.5}", r.step, r.loss);
                    }
                    if every > 0 && r.step % every == 0 && r.step < tc.steps {
                        let dir = tmp.join("checkpoints");
                        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                        trainer.to_checkpoint(meta())?.write(&dir.join(format!("step_{:06}.ckpt", r.step)))?;
                    }
                }
                Err(dump) => {
                    write_json(&dump_path, &dump)?;
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {}; batch written to {}",
                        dump.step,
                        dump_path.display()
                    ))
                    .into());
                }
            }
        }
        let p = tmp.join(LOSS_FILE);
        fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
        trainer.to_checkpoint(meta())?.write(&tmp.join(MODEL_FILE))?;
        run.outputs = serde_json::json!({
            "class": class,
            "objects": data.len(),
            "start_step": start,
            "final_step": trainer.step,
            "first_loss": first,
            "last_loss": last,
            "parameters": trainer.model.param_count(),
        });
        run.write(tmp)
    })?;
    println!("trained {class} to step {} in {}", tc.steps, a.out.display());
    Ok(())
}

fn train_extractor(a: TrainArgs) -> anyhow::Result<()> {
    if a.resume.is_some() {
        return Err(Error::Contract("--resume applies to denoiser training only".into()).into());
    }
    let loaded = load(a.config.config.as_deref(), &a.config.preset)?;
    let ds = read_dataset(&a.dataset)?;
    let mut cfg = loaded.config.extractor.unwrap_or_default();
    if let Some(s) = a.steps {
        cfg.steps = s as usize;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data: Vec<(PointSet, usize)> =
        ds.split(&a.split)?.into_iter().map(|(_, r)| (r.points.clone(), r.class_id as usize)).collect();
    if data.is_empty() {
        return Err(Error::Contract(format!("split {:?} is empty", a.split)).into());
    }
    let mut run = RunManifest::new("train", &loaded.source, &loaded.raw);
    let sha = run.input("dataset", &a.dataset)?;
    let ex = train_feature_extractor(&data, ds.manifest.classes.clone(), &cfg)?;
    let sets: Vec<PointSet> = data.iter().map(|d| d.0.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
    let acc3 = ex.accuracy(&sets, &labels, 3)?;
    let acc4 = ex.accuracy(&sets, &labels, 4)?;
    atomic_output(&a.out, |tmp| {
        ex.to_checkpoint(serde_json::json!({ "kind": "extractor", "dataset_sha256": sha }))?.write(&tmp.join(EXTRACTOR_FILE))?;
        run.outputs = serde_json::json!({ "effective": cfg, "train_accuracy_3ch": acc3, "train_accuracy_4ch": acc4 });
        run.write(tmp)
    })?;
    println!("extractor train accuracy {acc3:.3} (3ch) {acc4:.3} (4ch); wrote {}", a.out.display());
    Ok(())
}
