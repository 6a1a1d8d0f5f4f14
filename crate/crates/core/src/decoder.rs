//! Greedy, beam and sampled generation, and the hypotheses file.
//!
//! `<pad>` and `<bos>` are never emitted. When log-probabilities tie, the
//! winner is the lowest regular token, then `<eos>`, then `<unk>`, so an
//! untrained model babbles the first vocabulary word instead of stopping
//! at once. Every strategy uses this order, which makes beam width 1
//! identical to greedy.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, ViewObservation};
use crate::error::{FaeError, Result};
use crate::io::{read_text, write_atomic};
use crate::linalg::{log_softmax, SeededRng, Vector};
use crate::model::{decode_step, encode_views, DecoderState, FaeGenConfig, FaeGenParams};
use crate::vocab::{Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Rank finished beams by mean rather than total log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam_width: 3,
            max_len: 30,
            temperature: 1.0,
            seed: 0,
            length_normalize: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(FaeError::Input("beam width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(FaeError::Input("max length must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FaeError::Input("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending in `<eos>` unless the length limit cut it.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Mean log-probability per emitted token.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

fn tie_rank(token: usize) -> (u8, usize) {
    match token {
        EOS => (1, 0),
        UNK => (2, 0),
        t => (0, t),
    }
}

fn emittable(vocab_size: usize) -> impl Iterator<Item = usize> {
    (0..vocab_size).filter(|&t| t != PAD && t != BOS)
}

/// Lexicographic comparison of token sequences under the tie order.
fn cmp_tokens(a: &[usize], b: &[usize]) -> Ordering {
    a.iter().map(|&t| tie_rank(t)).cmp(b.iter().map(|&t| tie_rank(t)))
}

struct Decoding<'a> {
    params: &'a FaeGenParams,
    config: &'a FaeGenConfig,
    topic: usize,
    views: Vec<Vector>,
}

impl<'a> Decoding<'a> {
    fn new(
        params: &'a FaeGenParams,
        config: &'a FaeGenConfig,
        observations: &[ViewObservation],
        topic: usize,
    ) -> Result<Self> {
        if topic >= config.num_topics {
            return Err(FaeError::Input(format!(
                "topic {topic} out of range ({} topics)",
                config.num_topics
            )));
        }
        let (views, _) = encode_views(params, config, observations)?;
        Ok(Decoding { params, config, topic, views })
    }

    fn step(&self, prev: usize, state: &DecoderState) -> Result<(Vector, Vector, DecoderState)> {
        let out = decode_step(self.params, self.config, self.topic, prev, state, &self.views)?;
        Ok((log_softmax(&out.logits)?, out.probs, out.state))
    }
}

pub fn greedy_generate(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
    topic: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let dec = Decoding::new(params, config, observations, topic)?;
    let mut state = DecoderState::initial(config);
    let (mut prev, mut tokens, mut log_prob) = (BOS, Vec::new(), 0.0);
    while tokens.len() < max_len {
        let (logp, _, next) = dec.step(prev, &state)?;
        let best = emittable(config.vocab_size)
            .min_by(|&a, &b| logp[b].total_cmp(&logp[a]).then_with(|| tie_rank(a).cmp(&tie_rank(b))))
            .expect("vocabulary has emittable tokens");
        log_prob += logp[best];
        tokens.push(best);
        if best == EOS {
            break;
        }
        prev = best;
        state = next;
    }
    Ok(Hypothesis { tokens, log_prob })
}

struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Keeps the `width` best expansions per step (by total log-probability,
/// ties by token order). Expansions that emit `<eos>` or hit `max_len`
/// retire; the best retired hypothesis wins.
pub fn beam_generate(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
    topic: usize,
    width: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(FaeError::Input("beam width must be at least 1".into()));
    }
    let dec = Decoding::new(params, config, observations, topic)?;
    let mut live = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: DecoderState::initial(config),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for (i, beam) in live.iter().enumerate() {
            let prev = beam.tokens.last().copied().unwrap_or(BOS);
            let (logp, _, next) = dec.step(prev, &beam.state)?;
            for t in emittable(config.vocab_size) {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                candidates.push((i, tokens, beam.log_prob + logp[t], next.clone()));
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| cmp_tokens(&a.1, &b.1)));
        candidates.truncate(width);
        live = Vec::with_capacity(width);
        for (_, tokens, log_prob, state) in candidates {
            if tokens.last() == Some(&EOS) || tokens.len() >= max_len {
                finished.push(Hypothesis { tokens, log_prob });
            } else {
                live.push(Beam { tokens, log_prob, state });
            }
        }
    }
    let key = |h: &Hypothesis| if length_normalize { h.score() } else { h.log_prob };
    finished
        .into_iter()
        .min_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| cmp_tokens(&a.tokens, &b.tokens)))
        .ok_or_else(|| FaeError::Input("beam search finished no hypothesis".into()))
}

/// Draws an index from `p^(1/temperature)`, renormalized.
pub fn sample_token(p: &Vector, rng: &mut SeededRng, temperature: f64) -> usize {
    let probs = p.as_slice();
    let max_log = probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = probs
        .iter()
        .map(|&x| if x > 0.0 { ((x.ln() - max_log) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

pub fn sample_generate(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
    topic: usize,
    max_len: usize,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Hypothesis> {
    let dec = Decoding::new(params, config, observations, topic)?;
    let mut state = DecoderState::initial(config);
    let (mut prev, mut tokens, mut log_prob) = (BOS, Vec::new(), 0.0);
    while tokens.len() < max_len {
        let (logp, mut probs, next) = dec.step(prev, &state)?;
        probs[PAD] = 0.0;
        probs[BOS] = 0.0;
        let t = sample_token(&probs, rng, temperature);
        log_prob += logp[t];
        tokens.push(t);
        if t == EOS {
            break;
        }
        prev = t;
        state = next;
    }
    Ok(Hypothesis { tokens, log_prob })
}

pub fn generate(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
    topic: usize,
    decode: &DecodeConfig,
    rng: &mut SeededRng,
) -> Result<Hypothesis> {
    decode.validate()?;
    match decode.mode {
        DecodeMode::Greedy => greedy_generate(params, config, observations, topic, decode.max_len),
        DecodeMode::Beam => beam_generate(
            params,
            config,
            observations,
            topic,
            decode.beam_width,
            decode.max_len,
            decode.length_normalize,
        ),
        DecodeMode::Sample => sample_generate(
            params,
            config,
            observations,
            topic,
            decode.max_len,
            decode.temperature,
            rng,
        ),
    }
}

/// One line of the hypotheses file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub topic: String,
    pub hypothesis: String,
    pub score: f64,
}

/// One description per topic, keyed by topic name.
pub fn generate_report(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    vocab: &Vocabulary,
    topics: &[String],
    observations: &[ViewObservation],
    decode: &DecodeConfig,
    rng: &mut SeededRng,
) -> Result<BTreeMap<String, (String, f64)>> {
    if topics.len() != config.num_topics {
        return Err(FaeError::Input(format!(
            "{} topic names for {} topics",
            topics.len(),
            config.num_topics
        )));
    }
    topics
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let h = generate(params, config, observations, k, decode, rng)?;
            Ok((name.clone(), (vocab.decode_text(&h.tokens)?, h.score())))
        })
        .collect()
}

/// Hypotheses for every sample in id order, topics in model order.
pub fn generate_dataset(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    vocab: &Vocabulary,
    topics: &[String],
    dataset: &Dataset,
    decode: &DecodeConfig,
) -> Result<Vec<HypothesisRecord>> {
    let mut rng = SeededRng::new(decode.seed);
    let mut samples: Vec<_> = dataset.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::with_capacity(samples.len() * topics.len());
    for s in samples {
        let report = generate_report(params, config, vocab, topics, &s.observations, decode, &mut rng)?;
        for name in topics {
            let (text, score) = &report[name];
            out.push(HypothesisRecord {
                id: s.id.clone(),
                topic: name.clone(),
                hypothesis: text.clone(),
                score: *score,
            });
        }
    }
    Ok(out)
}

pub fn write_hypotheses(path: &Path, records: &[HypothesisRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FaeError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
