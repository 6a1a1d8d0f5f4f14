//! Seeded synthetic corpus with unstructured views and topic-specific
//! report templates.
//!
//! Each sample draws a condition, then up to five view observations: every
//! view can be dropped or repeated, and the survivors are shuffled. Features
//! are a fixed per-(view, condition) mean, shifted along a per-view
//! direction by the sample's measurement, plus Gaussian noise. Reports are
//! filled from fixed templates, so equal (topic, condition, measurement)
//! always yields the same string.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, Dataset, Sample, ViewObservation};
use crate::error::{FaeError, Result};
use crate::linalg::{softmax, SeededRng, Vector};

pub const NUM_VIEWS: usize = 5;
pub const TOPIC_NAMES: [&str; 4] = ["echo", "motion", "structure", "flow"];
pub const MEASUREMENT_WORDS: [&str; 5] = ["two", "four", "six", "eight", "ten"];

const TABLE_SALT: u64 = 0x7ab1_e5a1_7c0d_e001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_test: usize,
    pub num_topics: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub view_concentration: f64,
    pub missing_prob: f64,
    pub repeat_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_train: 200,
            num_test: 50,
            num_topics: 4,
            feature_dim: 32,
            feature_noise: 0.3,
            view_concentration: 4.0,
            missing_prob: 0.15,
            repeat_prob: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FaeError::Input(msg.into()));
        if self.num_train == 0 || self.num_test == 0 {
            return bad("num_train and num_test must be at least 1");
        }
        if !(1..=TOPIC_NAMES.len()).contains(&self.num_topics) {
            return bad("num_topics must be between 1 and 4");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        for p in [self.missing_prob, self.repeat_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative");
        }
        if !self.view_concentration.is_finite() {
            return bad("view_concentration must be finite");
        }
        Ok(())
    }
}

/// Which template produced a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemplateMatch {
    pub topic: &'static str,
    pub condition: Condition,
    pub measurement: Option<usize>,
}

/// The report for `topic` given a condition and, for defects, a
/// measurement bucket index into [`MEASUREMENT_WORDS`].
pub fn render(topic: &str, condition: Condition, measurement: usize) -> Option<String> {
    let n = MEASUREMENT_WORDS.get(measurement)?;
    let text = match (topic, condition) {
        ("echo", Condition::Normal) => {
            "the atrial and ventricular septal echo is continuous and the echo pattern is normal".to_string()
        }
        ("echo", Condition::Vsd) => {
            format!("ventricular septal echo shows a defect of {n} mm in the perimembranous part")
        }
        ("echo", Condition::Asd) => {
            format!("atrial septal echo shows a defect of {n} mm in the middle part")
        }
        ("motion", Condition::Normal) => {
            "wall motion of the left ventricle is coordinated and the amplitude is normal".to_string()
        }
        ("motion", Condition::Vsd) => {
            "left ventricular wall motion is enhanced with increased amplitude".to_string()
        }
        ("motion", Condition::Asd) => {
            "right ventricular wall motion is enhanced and the septum moves in the same direction"
                .to_string()
        }
        ("structure", Condition::Normal) => {
            "the size of each cardiac chamber is normal and the valves are unremarkable".to_string()
        }
        ("structure", Condition::Vsd) => {
            "the left atrium and left ventricle are enlarged and the aorta is normal".to_string()
        }
        ("structure", Condition::Asd) => {
            "the right atrium and right ventricle are enlarged and the pulmonary artery is wide"
                .to_string()
        }
        ("flow", Condition::Normal) => {
            "color doppler shows no abnormal shunt across the septum".to_string()
        }
        ("flow", Condition::Vsd) => {
            format!("color doppler shows a left to right shunt of {n} mm at ventricular level")
        }
        ("flow", Condition::Asd) => {
            format!("color doppler shows a left to right shunt at atrial level with a jet width of {n} mm")
        }
        _ => return None,
    };
    Some(text)
}

fn uses_measurement(topic: &str, condition: Condition) -> bool {
    condition != Condition::Normal && matches!(topic, "echo" | "flow")
}

/// Exact-match lookup of `text` against every template instance.
pub fn classify_template(text: &str) -> Option<TemplateMatch> {
    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    for topic in TOPIC_NAMES {
        for condition in Condition::ALL {
            let buckets = if uses_measurement(topic, condition) { MEASUREMENT_WORDS.len() } else { 1 };
            for b in 0..buckets {
                if render(topic, condition, b).as_deref() == Some(text.as_str()) {
                    return Some(TemplateMatch {
                        topic,
                        condition,
                        measurement: uses_measurement(topic, condition).then_some(b),
                    });
                }
            }
        }
    }
    None
}

struct FeatureTable {
    /// `means[view][condition]`
    means: Vec<Vec<Vector>>,
    /// Per-view direction the measurement moves the features along.
    shift: Vec<Vector>,
}

impl FeatureTable {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = SeededRng::new(cfg.seed ^ TABLE_SALT);
        let means = (0..NUM_VIEWS)
            .map(|_| {
                Condition::ALL
                    .iter()
                    .map(|_| rng.draw_gaussian(0.0, 1.0, cfg.feature_dim))
                    .collect()
            })
            .collect();
        let shift = (0..NUM_VIEWS)
            .map(|_| rng.draw_gaussian(0.0, 1.0, cfg.feature_dim))
            .collect();
        FeatureTable { means, shift }
    }
}

fn condition_index(c: Condition) -> usize {
    Condition::ALL.iter().position(|&x| x == c).expect("listed")
}

fn observe(
    cfg: &SynthConfig,
    table: &FeatureTable,
    rng: &mut SeededRng,
    view: usize,
    condition: Condition,
    offset: f64,
) -> ViewObservation {
    let noise = rng.draw_gaussian(0.0, cfg.feature_noise, cfg.feature_dim);
    let mean = &table.means[view][condition_index(condition)];
    let shift = &table.shift[view];
    let features = (0..cfg.feature_dim)
        .map(|i| mean[i] + offset * shift[i] + noise[i])
        .collect();
    let mut logits = rng.draw_gaussian(0.0, 1.0, NUM_VIEWS);
    logits[view] += cfg.view_concentration;
    ViewObservation {
        view_probs: softmax(&logits).expect("non-empty"),
        features,
    }
}

fn generate_sample(cfg: &SynthConfig, table: &FeatureTable, rng: &mut SeededRng, id: String) -> Sample {
    let condition = Condition::ALL[rng.index(Condition::ALL.len())];
    let measurement = rng.index(MEASUREMENT_WORDS.len());
    // Centered so the middle bucket sits on the condition mean.
    let offset = match condition {
        Condition::Normal => 0.0,
        _ => 0.5 * (measurement as f64 - 2.0),
    };

    let mut views = Vec::new();
    for v in 0..NUM_VIEWS {
        if rng.bernoulli(cfg.missing_prob) {
            continue;
        }
        views.push(v);
        if rng.bernoulli(cfg.repeat_prob) {
            views.push(v);
        }
    }
    if views.is_empty() {
        views.push(rng.index(NUM_VIEWS));
    }
    rng.shuffle(&mut views);
    views.truncate(NUM_VIEWS);

    let observations = views
        .into_iter()
        .map(|v| observe(cfg, table, rng, v, condition, offset))
        .collect();
    let reports: BTreeMap<String, String> = TOPIC_NAMES[..cfg.num_topics]
        .iter()
        .map(|&t| (t.to_string(), render(t, condition, measurement).expect("known topic")))
        .collect();
    Sample {
        id,
        condition,
        observations,
        reports,
    }
}

/// `(train, test)` with ids `train-0000..` and `test-0000..`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let table = FeatureTable::new(cfg);
    let mut rng = SeededRng::new(cfg.seed);
    let mut split = |prefix: &str, n: usize| {
        Dataset::new(
            (0..n)
                .map(|i| generate_sample(cfg, &table, &mut rng, format!("{prefix}-{i:04}")))
                .collect(),
        )
    };
    let train = split("train", cfg.num_train);
    let test = split("test", cfg.num_test);
    Ok((train, test))
}
