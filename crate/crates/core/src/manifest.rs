//! Tab-separated dataset manifests.
//!
//! One record per line:
//! `id  clean_path  cluttered_path  mask_path  pattern_id  start_frame_offset  [split]`.
//! Lines starting with `#` are comments. Relative paths are resolved against
//! the manifest's directory. The trailing split column is optional and
//! defaults to `train`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sequence::{decode_sequence, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub clean_path: PathBuf,
    pub cluttered_path: PathBuf,
    pub mask_path: PathBuf,
    pub pattern_id: usize,
    pub start_frame_offset: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
}

/// A record with its three sequences loaded.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub record: ManifestRecord,
    pub clean: Sequence,
    pub cluttered: Sequence,
    pub mask: Sequence,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self {
            records,
            root: root.into(),
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() || r.id.contains(['\t', '\n']) {
                return Err(Error::Format(format!("invalid record id {:?}", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# id\tclean_path\tcluttered_path\tmask_path\tpattern_id\tstart_frame_offset\tsplit\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.clean_path.display(),
                r.cluttered_path.display(),
                r.mask_path.display(),
                r.pattern_id,
                r.start_frame_offset,
                r.split
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 && fields.len() != 7 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 6 or 7 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let num = |s: &str, what: &str| -> Result<usize> {
                s.parse().map_err(|_| {
                    Error::Format(format!("manifest line {}: bad {what} {s:?}", lineno + 1))
                })
            };
            records.push(ManifestRecord {
                id: fields[0].to_string(),
                clean_path: fields[1].into(),
                cluttered_path: fields[2].into(),
                mask_path: fields[3].into(),
                pattern_id: num(fields[4], "pattern_id")?,
                start_frame_offset: num(fields[5], "start_frame_offset")?,
                split: match fields.get(6) {
                    Some(s) => s.parse()?,
                    None => Split::Train,
                },
            });
        }
        Self::new(root, records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads the three sequences of a record and checks their dimensions agree.
    pub fn load(&self, record: &ManifestRecord) -> Result<LoadedRecord> {
        let clean = decode_sequence(&self.resolve(&record.clean_path))?;
        let cluttered = decode_sequence(&self.resolve(&record.cluttered_path))?;
        let mask = decode_sequence(&self.resolve(&record.mask_path))?;
        if clean.dims() != cluttered.dims() || clean.dims() != mask.dims() {
            return Err(Error::Dimension(format!(
                "record {}: clean {:?}, cluttered {:?}, mask {:?}",
                record.id,
                clean.dims(),
                cluttered.dims(),
                mask.dims()
            )));
        }
        Ok(LoadedRecord {
            record: record.clone(),
            clean,
            cluttered,
            mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, split: Split) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            clean_path: format!("{id}_clean.stsq").into(),
            cluttered_path: format!("{id}_cluttered.stsq").into(),
            mask_path: format!("{id}_mask.stsq").into(),
            pattern_id: 3,
            start_frame_offset: 0,
            split,
        }
    }

    #[test]
    fn text_round_trip() {
        let m = DatasetManifest::new(
            "/data",
            vec![rec("a", Split::Train), rec("b", Split::Validation)],
        )
        .unwrap();
        let back = DatasetManifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn six_field_lines_default_to_train() {
        let m = DatasetManifest::parse("# c\nx\ta\tb\tc\t5\t2\n", ".").unwrap();
        assert_eq!(m.records[0].split, Split::Train);
        assert_eq!(m.records[0].pattern_id, 5);
        assert_eq!(m.records[0].start_frame_offset, 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(
            DatasetManifest::new(".", vec![rec("a", Split::Train), rec("a", Split::Test)]).is_err()
        );
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(DatasetManifest::parse("x\ta\tb\n", ".").is_err());
        assert!(DatasetManifest::parse("x\ta\tb\tc\tnope\t0\n", ".").is_err());
        assert!(DatasetManifest::parse("x\ta\tb\tc\t1\t0\tholdout\n", ".").is_err());
    }
}
