use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use lidargen::render::{render_svg, write_ply};

use super::read_dataset;
use crate::config::load;
use crate::manifest::{atomic_output, RunManifest};
use crate::ConfigArgs;

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    /// Split to render; defaults to the first split in the manifest.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(a: RenderArgs) -> anyhow::Result<()> {
    let loaded = load(a.config.config.as_deref(), &a.config.preset)?;
    let ds = read_dataset(&a.dataset)?;
    let split = match &a.split {
        Some(s) => s.clone(),
        None => ds
            .manifest
            .splits
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| lidargen::Error::Contract("dataset has no splits".into()))?,
    };
    let mut objects = ds.split(&split)?;
    if let Some(n) = a.limit {
        objects.truncate(n);
    }
    let mut run = RunManifest::new("render", &loaded.source, &loaded.raw);
    run.input("dataset", &a.dataset)?;
    let rendered = objects
        .iter()
        .map(|(name, rec)| {
            let cls = &ds.manifest.classes[rec.class_id as usize];
            let stem = name.trim_end_matches(".bin").to_string();
            let svg = render_svg(&rec.points, &format!("{cls} {stem}"))
                .with_context(|| format!("rendering {name}"))?;
            Ok((stem, svg, write_ply(&rec.points)?))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    run.outputs = serde_json::json!({ "split": split, "objects": rendered.len() });
    atomic_output(&a.out, |tmp| {
        for (stem, svg, ply) in &rendered {
            for (ext, body) in [("svg", svg), ("ply", ply)] {
                let p = tmp.join(format!("{stem}.{ext}"));
                fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        run.write(tmp)
    })?;
    println!("rendered {} objects into {}", rendered.len(), a.out.display());
    Ok(())
}
