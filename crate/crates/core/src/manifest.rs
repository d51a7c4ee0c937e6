//! Tab-separated case list: one row per registration pair, with paths
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::Pair;
use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub moving: String,
    pub fixed: String,
    pub moving_seg: Option<String>,
    pub fixed_seg: Option<String>,
    /// Ground-truth sampling field, when known.
    pub field: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<Entry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut rd = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_reader(text.as_slice());
        let mut entries = Vec::new();
        for (i, row) in rd.deserialize().enumerate() {
            let e: Entry = row
                .map_err(|e| Error::Manifest(format!("{}: row {}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .from_writer(Vec::new());
        let bad = |e: csv::Error| Error::Manifest(e.to_string());
        w.write_record(["id", "moving", "fixed", "moving_seg", "fixed_seg", "field"])
            .map_err(bad)?;
        for e in &self.entries {
            w.serialize(e).map_err(bad)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads the images and segmentations of one case.
    pub fn load_pair(&self, e: &Entry) -> Result<Pair> {
        let seg = |p: &Option<String>| {
            p.as_deref()
                .map(|p| io::load_labels(self.resolve(p)))
                .transpose()
        };
        Pair::new(
            io::load_volume(self.resolve(&e.moving))?,
            io::load_volume(self.resolve(&e.fixed))?,
            seg(&e.moving_seg)?,
            seg(&e.fixed_seg)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_missing_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let m = Manifest::new(
            dir.path(),
            vec![
                Entry {
                    id: "a".into(),
                    moving: "a_m.gvol".into(),
                    fixed: "a_f.gvol".into(),
                    moving_seg: Some("a_ms.gvol".into()),
                    fixed_seg: Some("a_fs.gvol".into()),
                    field: None,
                },
                Entry {
                    id: "b".into(),
                    moving: "b_m.gvol".into(),
                    fixed: "b_f.gvol".into(),
                    moving_seg: None,
                    fixed_seg: None,
                    field: Some("b_phi.gvol".into()),
                },
            ],
        );
        m.write(&path).unwrap();
        assert_eq!(Manifest::read(&path).unwrap(), m);
    }

    #[test]
    fn empty_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        Manifest::new(dir.path(), vec![]).write(&path).unwrap();
        assert!(Manifest::read(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        fs::write(&path, "id\tmoving\nx\ty\n").unwrap();
        assert!(matches!(Manifest::read(&path), Err(Error::Manifest(_))));
    }
}
