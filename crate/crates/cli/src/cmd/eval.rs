use std::path::PathBuf;

use clap::Args;
use lidargen::metrics::{evaluate, FeatureExtractor, LabelledSet};
use lidargen::tensor::Checkpoint;
use lidargen::Error;

use super::{read_dataset, require};
use crate::cmd::sample::GENERATED_SPLIT;
use crate::manifest::{atomic_file, RunManifest};
use crate::ConfigArgs;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset holding the real objects the generated ones were conditioned on.
    #[arg(long)]
    pub real: PathBuf,
    /// Output of `sample`; objects are matched to real ones by file name.
    #[arg(long)]
    pub generated: PathBuf,
    /// Feature-extractor checkpoint; FPD, KPD and APC are skipped without it.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    #[arg(long, default_value = GENERATED_SPLIT)]
    pub generated_split: String,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the plain-text table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Report EMD as a per-point mean.
    #[arg(long)]
    pub per_point: bool,
    #[arg(long)]
    pub channels: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(a: EvalArgs) -> anyhow::Result<()> {
    let loaded = crate::config::load(a.config.config.as_deref(), &a.config.preset)?;
    let mut cfg = loaded.config.eval.unwrap_or_default();
    if a.per_point {
        cfg.emd_per_point = true;
    }
    if let Some(c) = a.channels {
        cfg.channels = c;
    }
    let mut run = RunManifest::new("eval", &loaded.source, &loaded.raw);
    let real = read_dataset(&a.real)?;
    let gen = read_dataset(&a.generated)?;
    run.input("real", &a.real)?;
    run.input("generated", &a.generated)?;
    let extractor = match &a.extractor {
        Some(p) => {
            require(p, "extractor checkpoint")?;
            let id = run.input("extractor", p)?;
            Some((FeatureExtractor::from_checkpoint(&Checkpoint::read(p)?)?, id))
        }
        None => None,
    };
    let mut r = LabelledSet::default();
    let mut g = LabelledSet::default();
    for (name, rec) in gen.split(&a.generated_split)? {
        let real_rec = real
            .objects
            .get(name)
            .ok_or_else(|| Error::Contract(format!("generated object {name} has no real counterpart")))?;
        r.sets.push(real_rec.points.clone());
        r.labels.push(real.manifest.classes[real_rec.class_id as usize].clone());
        g.sets.push(rec.points.clone());
        g.labels.push(gen.manifest.classes[rec.class_id as usize].clone());
    }
    let report = evaluate(&r, &g, extractor.as_ref().map(|e| &e.0), extractor.as_ref().map(|e| e.1.clone()), &cfg)?;
    let table = report.table();
    let mut doc = serde_json::to_value(&report)?;
    doc["run"] = serde_json::to_value(&run)?;
    atomic_file(&a.out, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
    if let Some(t) = &a.table {
        atomic_file(t, table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}
