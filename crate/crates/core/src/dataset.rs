//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and one little-endian binary file
//! per object:
//!
//! ```text
//! [n: u32][n x 4 f32 canonical points][6 f32 condition (phi, d, z, l, w, h)][class id: u32]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objects::{Condition, Point, PointSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub i_max: f64,
    /// Index in this list is the class id stored in object files.
    pub classes: Vec<String>,
    /// Split name to ordered object file names.
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn class_id(&self, cls: &str) -> Result<u32> {
        self.classes
            .iter()
            .position(|c| c == cls)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Label(format!("class {cls:?} not in manifest {:?}", self.classes)))
    }
}

/// A canonical object as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub points: PointSet,
    pub condition: Condition,
    pub class_id: u32,
}

pub fn encode_object(rec: &ObjectRecord) -> Vec<u8> {
    let n = rec.points.len();
    let mut out = Vec::with_capacity(4 + n * 16 + 24 + 4);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for p in &rec.points.points {
        for v in p.to_array() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for v in rec.condition.to_array() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&rec.class_id.to_le_bytes());
    out
}

pub fn decode_object(bytes: &[u8], path: &Path) -> Result<ObjectRecord> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let word = |k: usize| -> [u8; 4] { bytes[4 * k..4 * k + 4].try_into().expect("4-byte slice") };
    if bytes.len() < 4 {
        return Err(bad("truncated header".into()));
    }
    let n = u32::from_le_bytes(word(0)) as usize;
    let expected = 4 * (1 + 4 * n + 6 + 1);
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {n} points, found {}", bytes.len())));
    }
    let f = |k: usize| f32::from_le_bytes(word(k)) as f64;
    let points = (0..n)
        .map(|j| Point::new(f(1 + 4 * j), f(2 + 4 * j), f(3 + 4 * j), f(4 + 4 * j)))
        .collect();
    let base = 1 + 4 * n;
    let kappa = [f(base), f(base + 1), f(base + 2), f(base + 3), f(base + 4), f(base + 5)];
    let class_id = u32::from_le_bytes(word(base + 6));
    Ok(ObjectRecord { points: PointSet::new(points), condition: Condition::from_array(kappa), class_id })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// File name to record.
    pub objects: BTreeMap<String, ObjectRecord>,
}

impl Dataset {
    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: mpath.clone(), reason: e.to_string() })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format { path: mpath, reason: format!("unsupported version {}", manifest.version) });
        }
        let mut objects = BTreeMap::new();
        for name in manifest.splits.values().flatten() {
            if objects.contains_key(name) {
                continue;
            }
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rec = decode_object(&bytes, &p)?;
            if rec.class_id as usize >= manifest.classes.len() {
                return Err(Error::Format { path: p, reason: format!("class id {} out of range", rec.class_id) });
            }
            objects.insert(name.clone(), rec);
        }
        Ok(Self { manifest, objects })
    }

    /// Writes into a fresh directory; refuses to touch an existing path.
    pub fn write(&self, dir: &Path) -> Result<()> {
        atomic_dir(dir, |tmp| self.write_files(tmp))
    }

    /// Writes the manifest and object files into an existing directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        for (name, rec) in &self.objects {
            let p = dir.join(name);
            fs::write(&p, encode_object(rec)).map_err(|e| Error::io(&p, e))?;
        }
        let mp = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))
    }

    /// Records of a split in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<(&str, &ObjectRecord)>> {
        let names = self
            .manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::Contract(format!("dataset has no split {name:?}")))?;
        Ok(names.iter().map(|n| (n.as_str(), &self.objects[n])).collect())
    }

    /// Records of one class within a split, in manifest order.
    pub fn split_class(&self, name: &str, cls: &str) -> Result<Vec<&ObjectRecord>> {
        let id = self.manifest.class_id(cls)?;
        Ok(self.split(name)?.into_iter().map(|(_, r)| r).filter(|r| r.class_id == id).collect())
    }
}

/// Object file name for index `k`.
pub fn object_file_name(k: usize) -> String {
    format!("obj_{k:06}.bin")
}

/// Runs `fill` against a temporary sibling of `dest`, then renames it into
/// place. On failure the temporary directory is removed and `dest` is never
/// created.
pub fn atomic_dir<F>(dest: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if dest.exists() {
        return Err(Error::Contract(format!("output path {} already exists", dest.display())));
    }
    let parent = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let stem = dest.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{stem}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    match fill(&tmp) {
        Ok(()) => fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e)),
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize) -> ObjectRecord {
        ObjectRecord {
            points: PointSet::new((0..n).map(|k| Point::new(k as f64 * 0.5, -0.25, 1.0, 0.125)).collect()),
            condition: Condition::new(0.5, 12.0, -1.0, 4.0, 2.0, 1.5),
            class_id: 1,
        }
    }

    #[test]
    fn binary_layout() {
        let r = rec(2);
        let b = encode_object(&r);
        assert_eq!(b.len(), 4 * (1 + 8 + 6 + 1));
        assert_eq!(&b[..4], &2u32.to_le_bytes());
        assert_eq!(&b[4..8], &0.0f32.to_le_bytes());
        assert_eq!(&b[4 + 16..4 + 20], &0.5f32.to_le_bytes());
        assert_eq!(&b[b.len() - 4..], &1u32.to_le_bytes());
        let back = decode_object(&b, Path::new("x")).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn truncated_file_rejected() {
        let b = encode_object(&rec(3));
        assert!(matches!(decode_object(&b[..b.len() - 1], Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn directory_round_trip_and_no_clobber() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        let mut objects = BTreeMap::new();
        objects.insert(object_file_name(0), rec(20));
        objects.insert(object_file_name(1), rec(25));
        let ds = Dataset {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                name: "t".into(),
                i_max: 255.0,
                classes: vec!["a".into(), "b".into()],
                splits: BTreeMap::from([
                    ("train".into(), vec![object_file_name(0)]),
                    ("val".into(), vec![object_file_name(1)]),
                ]),
                seed: Some(3),
            },
            objects,
        };
        ds.write(&dir).unwrap();
        let back = Dataset::read(&dir).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.split_class("val", "b").unwrap().len(), 1);
        assert!(matches!(ds.write(&dir), Err(Error::Contract(_))));
    }

    #[test]
    fn failed_fill_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let r = atomic_dir(&dir, |_| Err(Error::Contract("boom".into())));
        assert!(r.is_err());
        assert!(!dir.exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }
}
