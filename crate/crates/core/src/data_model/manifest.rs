//! Dataset manifest: JSON Lines, one header record followed by one record per
//! sample.
//!
//! ```text
//! {"format":"apex-manifest","version":1,"class_names":["a","b"],"task_kind":"multi_label","annotations":{}}
//! {"sample_id":"s0","path":"features/s0.apx","labels":[1],"split":"train","spectrogram":"spectrograms/s0.apx"}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ApexError, Result};

pub const MANIFEST_FORMAT: &str = "apex-manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = ApexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ApexError::Validation(format!("unknown split tag '{other}'"))),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub path: String,
    pub labels: Vec<usize>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub task_kind: TaskKind,
    /// Free-form exporter notes, e.g. the feature tap point.
    pub annotations: BTreeMap<String, String>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    class_names: Vec<String>,
    task_kind: TaskKind,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
}

// Split is parsed by hand so an unknown tag is a validation error rather than
// a JSON error.
#[derive(Deserialize)]
struct RawSample {
    sample_id: String,
    path: String,
    labels: Vec<usize>,
    split: String,
    #[serde(default)]
    spectrogram: Option<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(ApexError::Validation(format!("duplicate sample_id '{}'", s.sample_id)));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= n) {
                return Err(ApexError::Validation(format!(
                    "sample '{}' has label {bad} but only {n} classes exist",
                    s.sample_id
                )));
            }
            if self.task_kind == TaskKind::SingleLabel && s.labels.len() != 1 {
                return Err(ApexError::Validation(format!(
                    "single-label sample '{}' has {} labels",
                    s.sample_id,
                    s.labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| ApexError::Validation("manifest is empty".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| ApexError::Validation(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != 1 {
            return Err(ApexError::Validation(format!(
                "unsupported manifest format {} v{}",
                header.format, header.version
            )));
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines {
            let raw: RawSample = serde_json::from_str(line)
                .map_err(|e| ApexError::Validation(format!("manifest line {}: {e}", lineno + 1)))?;
            samples.push(SampleRecord {
                sample_id: raw.sample_id,
                path: raw.path,
                labels: raw.labels,
                split: raw.split.parse()?,
                spectrogram: raw.spectrogram,
            });
        }
        let m = Manifest {
            class_names: header.class_names,
            task_kind: header.task_kind,
            annotations: header.annotations,
            samples,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            class_names: self.class_names.clone(),
            task_kind: self.task_kind,
            annotations: self.annotations.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(path)?)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let mut f = fs::File::create(path)?;
    f.write_all(manifest.to_jsonl().as_bytes())?;
    Ok(())
}
