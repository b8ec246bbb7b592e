//! Labeled interaction windows and the JSON-lines dataset format.
//!
//! One sample per line:
//! `{"sample_id": str, "domain_id": str, "y": 0|1, "x": [[s_A, d_A, s_B, d_B], ...]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Array2;

/// Steps per window (1 s at 10 Hz).
pub const DEFAULT_WINDOW: usize = 10;
/// Features per step: `(s_A, d_A, s_B, d_B)`.
pub const NUM_FEATURES: usize = 4;

/// Intention of vehicle A.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Pass = 0,
    Yield = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Pass),
            1 => Ok(Label::Yield),
            other => Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub sample_id: String,
    pub domain_id: String,
    pub y: Label,
    /// `T×4` Frenét features.
    pub x: Array2,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    domain_id: String,
    y: u8,
    x: Vec<Vec<f64>>,
}

impl SequenceSample {
    pub fn to_json_line(&self) -> String {
        let rec = SampleRecord {
            sample_id: self.sample_id.clone(),
            domain_id: self.domain_id.clone(),
            y: self.y.index() as u8,
            x: (0..self.x.rows()).map(|r| self.x.row(r).to_vec()).collect(),
        };
        serde_json::to_string(&rec).expect("sample serializes")
    }

    /// Parses one dataset line, enforcing `window` rows of 4 finite features.
    pub fn from_json_line(line: &str, window: usize) -> Result<Self> {
        let rec: SampleRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("bad sample line: {e}")))?;
        if rec.x.len() != window {
            return Err(Error::Data(format!(
                "sample {} has {} steps, expected {window}",
                rec.sample_id,
                rec.x.len()
            )));
        }
        if let Some(row) = rec.x.iter().find(|r| r.len() != NUM_FEATURES) {
            return Err(Error::Data(format!(
                "sample {} has a row of {} features, expected {NUM_FEATURES}",
                rec.sample_id,
                row.len()
            )));
        }
        let x = Array2::from_rows(&rec.x)
            .map_err(|e| Error::Data(format!("sample {}: {e}", rec.sample_id)))?;
        Ok(Self {
            sample_id: rec.sample_id,
            domain_id: rec.domain_id,
            y: Label::from_index(rec.y as usize)?,
            x,
        })
    }
}

/// Samples sharing one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub samples: Vec<SequenceSample>,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, samples: Vec<SequenceSample>) -> Self {
        Self {
            domain_id: domain_id.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0, 0];
        for s in &self.samples {
            counts[s.y.index()] += 1;
        }
        counts
    }

    pub fn is_balanced(&self) -> bool {
        let [p, y] = self.class_counts();
        p == y
    }
}

pub fn to_jsonl(samples: &[SequenceSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.to_json_line());
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    write_atomic(path, to_jsonl(samples).as_bytes())
}

pub fn read_jsonl(path: &Path, window: usize) -> Result<Vec<SequenceSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            SequenceSample::from_json_line(l, window)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Groups samples by domain, keeping first-appearance order of domains.
pub fn group_by_domain(samples: Vec<SequenceSample>) -> Vec<DomainDataset> {
    let mut out: Vec<DomainDataset> = Vec::new();
    for s in samples {
        match out.iter_mut().find(|d| d.domain_id == s.domain_id) {
            Some(d) => d.samples.push(s),
            None => out.push(DomainDataset::new(s.domain_id.clone(), vec![s])),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SequenceSample {
        SequenceSample {
            sample_id: "FT-1-000001".into(),
            domain_id: "FT-1".into(),
            y: Label::Yield,
            x: Array2::new(10, 4, (0..40).map(|i| i as f64 * 0.1 - 2.0).collect()).unwrap(),
        }
    }

    #[test]
    fn json_line_round_trip() {
        let s = sample();
        let back = SequenceSample::from_json_line(&s.to_json_line(), 10).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn loader_validates_window_and_features() {
        let line = sample().to_json_line();
        assert!(SequenceSample::from_json_line(&line, 9).is_err());
        let bad = r#"{"sample_id":"a","domain_id":"d","y":0,"x":[[1,2,3]]}"#;
        assert!(SequenceSample::from_json_line(bad, 1).is_err());
        let bad_label = r#"{"sample_id":"a","domain_id":"d","y":2,"x":[[1,2,3,4]]}"#;
        assert!(SequenceSample::from_json_line(bad_label, 1).is_err());
    }

    #[test]
    fn grouping_keeps_first_appearance_order() {
        let mut a = sample();
        let mut b = sample();
        b.domain_id = "ZS".into();
        a.sample_id = "x".into();
        let groups = group_by_domain(vec![b.clone(), a.clone(), b]);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].domain_id, "ZS");
        assert_eq!(groups[0].len(), 2);
    }
}
