//! Dataset manifests: CSV lists of image/annotation pairs with split tags.
//!
//! Columns are `image,mask,label,patient,split` plus an optional trailing
//! `source` column recording whether an entry came from the base dataset or
//! from weak localization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split tag {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Base,
    Weak,
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(Provenance::Base),
            "weak" => Ok(Provenance::Weak),
            other => Err(Error::invalid(format!("unknown source tag {other:?}"))),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Base => "base",
            Provenance::Weak => "weak",
        })
    }
}

/// One manifest row. `mask` is a PNG mask or a JSON box list, and may be
/// empty for images without region annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub label: String,
    pub patient: String,
    pub split: Split,
    pub source: Option<Provenance>,
}

impl ManifestEntry {
    pub fn new(
        image: impl Into<String>,
        mask: impl Into<String>,
        label: impl Into<String>,
        patient: impl Into<String>,
        split: Split,
    ) -> Self {
        Self {
            image: image.into(),
            mask: mask.into(),
            label: label.into(),
            patient: patient.into(),
            split,
            source: None,
        }
    }

    pub fn with_source(mut self, source: Provenance) -> Self {
        self.source = Some(source);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image: String,
    mask: String,
    label: String,
    patient: String,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Non-empty image paths, and no patient in two different splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.image.trim().is_empty() {
                return Err(Error::invalid(format!("manifest row {}: empty image path", i + 1)));
            }
            if let Some(prev) = seen.insert(&e.patient, e.split) {
                if prev != e.split {
                    return Err(Error::invalid(format!(
                        "patient {:?} appears in both {prev} and {} splits",
                        e.patient, e.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parse_csv(text: &[u8], origin: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text);
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::format(origin, format!("row {}: {e}", i + 1)))?;
            let split = row
                .split
                .parse()
                .map_err(|e: Error| Error::format(origin, format!("row {}: {e}", i + 1)))?;
            let source = match row.source.as_deref().map(str::trim) {
                None | Some("") => None,
                Some(s) => Some(
                    s.parse()
                        .map_err(|e: Error| Error::format(origin, format!("row {}: {e}", i + 1)))?,
                ),
            };
            entries.push(ManifestEntry {
                image: row.image,
                mask: row.mask,
                label: row.label,
                patient: row.patient,
                split,
                source,
            });
        }
        Self::new(entries).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_csv(&read_bytes(path)?, path)
    }

    /// The `source` column is written only when some entry carries a tag.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let tagged = self.entries.iter().any(|e| e.source.is_some());
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["image", "mask", "label", "patient", "split"];
        if tagged {
            header.push("source");
        }
        let fail = |e: csv::Error| Error::invalid(format!("cannot write manifest CSV: {e}"));
        writer.write_record(&header).map_err(fail)?;
        for e in &self.entries {
            let split = e.split.to_string();
            let mut rec = vec![e.image.as_str(), &e.mask, &e.label, &e.patient, &split];
            let source = e.source.map(|s| s.to_string()).unwrap_or_default();
            if tagged {
                rec.push(&source);
            }
            writer.write_record(&rec).map_err(fail)?;
        }
        writer
            .into_inner()
            .map_err(|e| Error::invalid(format!("cannot write manifest CSV: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    /// Distinct patient ids, sorted.
    pub fn patients(&self) -> Vec<&str> {
        let set: HashSet<&str> = self.entries.iter().map(|e| e.patient.as_str()).collect();
        let mut v: Vec<&str> = set.into_iter().collect();
        v.sort_unstable();
        v
    }
}

/// Rows whose paths are relative are resolved against the manifest's folder.
pub fn resolve(manifest_path: &Path, entry_path: &str) -> std::path::PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest_path
        .parent()
        .map(|d| d.join(p))
        .unwrap_or_else(|| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_and_without_source() {
        let m = DatasetManifest::new(vec![
            ManifestEntry::new("a.png", "a_m.png", "1", "p1", Split::Train),
            ManifestEntry::new("b.png", "", "0", "p2", Split::Test),
        ])
        .unwrap();
        let bytes = m.to_csv().unwrap();
        assert!(bytes.starts_with(b"image,mask,label,patient,split\n"));
        assert_eq!(DatasetManifest::parse_csv(&bytes, Path::new("m.csv")).unwrap(), m);

        let mut tagged = m.clone();
        tagged.entries[0].source = Some(Provenance::Weak);
        let bytes = tagged.to_csv().unwrap();
        assert!(bytes.starts_with(b"image,mask,label,patient,split,source\n"));
        assert_eq!(DatasetManifest::parse_csv(&bytes, Path::new("m.csv")).unwrap(), tagged);
    }

    #[test]
    fn patient_in_two_splits_is_rejected() {
        let r = DatasetManifest::new(vec![
            ManifestEntry::new("a.png", "", "1", "p1", Split::Train),
            ManifestEntry::new("b.png", "", "1", "p1", Split::Val),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn bad_rows_are_rejected() {
        let origin = Path::new("m.csv");
        assert!(DatasetManifest::parse_csv(b"image,mask,label,patient,split\na,b,1,p,holdout\n", origin).is_err());
        assert!(DatasetManifest::parse_csv(b"image,mask,label,patient,split\n,b,1,p,train\n", origin).is_err());
        assert!(DatasetManifest::parse_csv(b"image,mask,label\na,b,1\n", origin).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        assert_eq!(
            resolve(Path::new("/data/m.csv"), "img/a.png"),
            Path::new("/data/img/a.png")
        );
        assert_eq!(resolve(Path::new("/data/m.csv"), "/abs/a.png"), Path::new("/abs/a.png"));
    }
}
