//! Samples, datasets and their JSON Lines representation.
//!
//! One record per line:
//!
//! ```text
//! {"id":"train-0000","condition":"VSD",
//!  "views":[{"view_probs":[..],"features":[..]}, ..],
//!  "reports":{"echo":"..", "motion":".."}}
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FaeError, Result};
use crate::io::{read_text, write_atomic};
use crate::linalg::Vector;
use crate::vocab::Vocabulary;

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "VSD")]
    Vsd,
    #[serde(rename = "ASD")]
    Asd,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Normal, Condition::Vsd, Condition::Asd];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Normal => "normal",
            Condition::Vsd => "VSD",
            Condition::Asd => "ASD",
        })
    }
}

/// One image's view distribution `y` and morphological feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewObservation {
    pub view_probs: Vector,
    pub features: Vector,
}

impl ViewObservation {
    pub fn validate(&self) -> Result<()> {
        let probs = self.view_probs.as_slice();
        if probs.is_empty() {
            return Err(FaeError::Input("empty view_probs".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(FaeError::Input("view_probs must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(FaeError::Input(format!("view_probs sum to {total}, not 1")));
        }
        if !self.features.is_finite() {
            return Err(FaeError::Input("non-finite features".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub condition: Condition,
    #[serde(rename = "views")]
    pub observations: Vec<ViewObservation>,
    pub reports: BTreeMap<String, String>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(FaeError::Input(format!("sample {} has no observations", self.id)));
        }
        for obs in &self.observations {
            obs.validate()
                .map_err(|e| FaeError::Input(format!("sample {}: {e}", self.id)))?;
        }
        if let Some((topic, _)) = self.reports.iter().find(|(_, r)| r.trim().is_empty()) {
            return Err(FaeError::Input(format!("sample {}: empty report for {topic}", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Topic names in sorted order; a topic's position is its model index.
    pub fn topics(&self) -> Vec<String> {
        self.samples
            .iter()
            .flat_map(|s| s.reports.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn report_texts(&self) -> impl Iterator<Item = &str> {
        self.samples
            .iter()
            .flat_map(|s| s.reports.values().map(String::as_str))
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Dataset::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| FaeError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut samples = Vec::new();
        let mut dims: Option<(usize, usize)> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
            sample.validate().map_err(|e| err(line, e.to_string()))?;
            for obs in &sample.observations {
                let d = (obs.view_probs.dim(), obs.features.dim());
                match dims {
                    None => dims = Some(d),
                    Some(expect) if expect != d => {
                        return Err(err(
                            line,
                            format!("observation dims {d:?} differ from earlier {expect:?}"),
                        ))
                    }
                    _ => {}
                }
            }
            samples.push(sample);
        }
        Ok(Dataset { samples })
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples
            .first()
            .and_then(|s| s.observations.first())
            .map(|o| o.features.dim())
    }

    pub fn num_views(&self) -> Option<usize> {
        self.samples
            .first()
            .and_then(|s| s.observations.first())
            .map(|o| o.view_probs.dim())
    }
}

/// A sample with its reports encoded against a vocabulary and a topic list.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub observations: Vec<ViewObservation>,
    /// `(topic index, target tokens ending in <eos>)`
    pub reports: Vec<(usize, Vec<usize>)>,
}

impl TrainingExample {
    pub fn token_count(&self) -> usize {
        self.reports.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn encode_dataset(
    dataset: &Dataset,
    vocab: &Vocabulary,
    topics: &[String],
) -> Result<Vec<TrainingExample>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let reports = s
                .reports
                .iter()
                .map(|(topic, text)| {
                    let k = topics.iter().position(|t| t == topic).ok_or_else(|| {
                        FaeError::Input(format!("sample {}: unknown topic {topic:?}", s.id))
                    })?;
                    Ok((k, vocab.encode_text(text)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingExample {
                id: s.id.clone(),
                observations: s.observations.clone(),
                reports,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, probs: Vec<f64>) -> Sample {
        Sample {
            id: id.into(),
            condition: Condition::Asd,
            observations: vec![ViewObservation {
                view_probs: Vector::from(probs),
                features: Vector::from(vec![0.1, 1.0 / 3.0, -2.5e-17]),
            }],
            reports: BTreeMap::from([
                ("echo".to_string(), "atrial septal echo".to_string()),
                ("flow".to_string(), "no shunt".to_string()),
            ]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = Dataset::new(vec![sample("a", vec![0.1, 0.2, 0.7]), sample("b", vec![1.0, 0.0, 0.0])]);
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.topics(), ["echo", "flow"]);
    }

    #[test]
    fn truncated_line_is_reported() {
        let ds = Dataset::new(vec![sample("a", vec![0.5, 0.5, 0.0]), sample("b", vec![0.5, 0.5, 0.0])]);
        let text = ds.to_jsonl();
        let cut = &text[..text.len() - 20];
        let err = Dataset::parse(cut, Path::new("x.jsonl")).unwrap_err();
        assert!(matches!(err, FaeError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn off_simplex_view_probs_rejected() {
        let ds = Dataset::new(vec![sample("a", vec![0.4, 0.4, 0.0])]);
        let err = Dataset::parse(&ds.to_jsonl(), Path::new("x.jsonl")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(err.to_string().contains("sum"), "{err}");
    }

    #[test]
    fn encode_against_topic_list() {
        let ds = Dataset::new(vec![sample("a", vec![1.0, 0.0, 0.0])]);
        let vocab = Vocabulary::build(ds.report_texts(), 1);
        let topics = ds.topics();
        let ex = encode_dataset(&ds, &vocab, &topics).unwrap();
        assert_eq!(ex[0].reports.len(), 2);
        assert_eq!(ex[0].reports[1].0, 1);
        assert_eq!(ex[0].token_count(), 4 + 3);
        assert!(encode_dataset(&ds, &vocab, &topics[..1]).is_err());
    }
}
