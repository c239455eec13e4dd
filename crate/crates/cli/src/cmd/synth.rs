use std::path::PathBuf;

use clap::Args;
use lidargen::synthgen::{make_dataset, ObjectClass};
use lidargen::Error;

use crate::config::{load, section};
use crate::manifest::{atomic_output, RunManifest};
use crate::ConfigArgs;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    /// Override per-class counts, e.g. `--count vehicle=500` (repeatable).
    #[arg(long = "count", value_name = "CLASS=N")]
    pub counts: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(a: SynthArgs) -> anyhow::Result<()> {
    let loaded = load(a.config.config.as_deref(), &a.config.preset)?;
    let mut cfg = section(&loaded.config.synth, "synth", &loaded.source)?;
    if !a.counts.is_empty() {
        cfg.counts.clear();
        for c in &a.counts {
            let (name, n) = c
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--count expects CLASS=N, got {c:?}")))?;
            ObjectClass::from_name(name)?;
            let n: usize = n.parse().map_err(|_| Error::Config(format!("bad count in {c:?}")))?;
            cfg.counts.insert(name.to_string(), n);
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = make_dataset(&cfg)?;
    let mut run = RunManifest::new("synth", &loaded.source, &loaded.raw);
    run.outputs = serde_json::json!({ "effective": cfg, "objects": ds.objects.len() });
    atomic_output(&a.out, |tmp| {
        ds.write_files(tmp)?;
        run.write(tmp)
    })?;
    println!("wrote {} objects to {}", ds.objects.len(), a.out.display());
    Ok(())
}
