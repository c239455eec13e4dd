pub mod eval;
pub mod render;
pub mod sample;
pub mod synth;
pub mod train;

use std::path::Path;

use lidargen::dataset::Dataset;
use lidargen::Error;

/// Referenced inputs must exist before any work starts.
pub fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Error::Contract(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    require(path, "dataset")?;
    Ok(Dataset::read(path)?)
}
