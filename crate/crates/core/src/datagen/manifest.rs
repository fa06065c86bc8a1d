//! Clip records and the JSON-lines dataset manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub subject: String,
    pub action: String,
    pub style: String,
    pub camera: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: u64,
    pub video_path: String,
    pub caption_long: String,
    pub caption_short: String,
    pub attributes: Attributes,
    pub quality: f64,
    pub shot_boundaries: Vec<usize>,
    pub embedding: Vec<f32>,
}

impl ClipRecord {
    pub fn validate(&self, clip_frames: usize) -> Result<()> {
        if self.caption_long.is_empty() || self.caption_short.is_empty() {
            return Err(Error::invalid(format!("clip {}: empty caption", self.id)));
        }
        let mut prev = 0usize;
        for (i, &b) in self.shot_boundaries.iter().enumerate() {
            if b == 0 || b >= clip_frames || (i > 0 && b <= prev) {
                return Err(Error::invalid(format!(
                    "clip {}: shot boundaries {:?} not strictly increasing within 0..{clip_frames}",
                    self.id, self.shot_boundaries
                )));
            }
            prev = b;
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        match name {
            "subject" => Some(&self.attributes.subject),
            "action" => Some(&self.attributes.action),
            "style" => Some(&self.attributes.style),
            "camera" => Some(&self.attributes.camera),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ClipRecord>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(Error::invalid(format!("duplicate clip id {}", r.id)));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn attribute_histogram(&self, attribute: &str) -> BTreeMap<String, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.records {
            if let Some(v) = r.attribute(attribute) {
                *hist.entry(v.to_string()).or_insert(0) += 1;
            }
        }
        hist
    }

    /// One JSON record per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        DatasetManifest::new(records)
    }
}
