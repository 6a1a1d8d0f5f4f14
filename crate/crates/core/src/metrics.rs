//! Corpus-level BLEU, ROUGE-L, CIDEr and an exact-match METEOR.
//!
//! Scores work on token strings. Per-pair values are sorted before they
//! are averaged, so every metric is exactly invariant to pair order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::decoder::HypothesisRecord;
use crate::error::{FaeError, Result};
use crate::vocab::tokenize;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub topic: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn from_text(id: &str, topic: &str, hypothesis: &str, references: &[&str]) -> Self {
        EvalPair {
            id: id.to_string(),
            topic: topic.to_string(),
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if n > 0 {
        for g in tokens.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn sorted_mean(values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    sorted_sum(values) / n
}

fn check_pairs(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(FaeError::Input("no pairs to score".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        return Err(FaeError::Input(format!("pair {}/{} has no reference", p.id, p.topic)));
    }
    Ok(())
}

/// B-1 through B-`max_n`. Clipped counts are pooled over the corpus and the
/// brevity penalty uses the closest reference length per pair (shorter on
/// ties). A zero precision makes that and every higher order zero.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<Vec<f64>> {
    check_pairs(pairs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let c = p.hypothesis.len();
        hyp_len += c;
        ref_len += p
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap();
        for n in 1..=max_n {
            let hyp = ngrams(&p.hypothesis, n);
            let mut max_ref: Counts = BTreeMap::new();
            for r in &p.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &hyp {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 0..max_n {
        if matched[n] == 0 || log_sum == f64::NEG_INFINITY {
            log_sum = f64::NEG_INFINITY;
            out.push(0.0);
            continue;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_pair(hyp: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / hyp.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> Result<f64> {
    check_pairs(pairs)?;
    Ok(sorted_mean(
        pairs
            .iter()
            .map(|p| {
                p.references
                    .iter()
                    .map(|r| rouge_pair(&p.hypothesis, r, beta))
                    .fold(0.0, f64::max)
            })
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderOptions {
    pub max_n: usize,
    pub scale: f64,
    /// Clip hypothesis counts by the reference and apply a Gaussian length
    /// penalty (sigma 6), as in the D-variant.
    pub d_variant: bool,
}

impl Default for CiderOptions {
    fn default() -> Self {
        CiderOptions { max_n: 4, scale: 10.0, d_variant: false }
    }
}

const CIDER_D_SIGMA: f64 = 6.0;

/// idf = ln(N / df) over the pairs' reference sets. Unseen hypothesis
/// n-grams count as df = 1; zero-norm vectors score 0.
pub fn cider(pairs: &[EvalPair], opts: CiderOptions) -> Result<f64> {
    check_pairs(pairs)?;
    let n_docs = pairs.len() as f64;
    let mut per_pair = vec![0.0; pairs.len()];
    for n in 1..=opts.max_n {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for p in pairs {
            let grams: BTreeSet<&[String]> = p.references.iter().flat_map(|r| r.windows(n)).collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        fn weigh<'a>(counts: &Counts<'a>, df: &BTreeMap<&[String], usize>, n_docs: f64) -> BTreeMap<&'a [String], f64> {
            counts
                .iter()
                .map(|(g, &c)| (*g, c as f64 * (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln()))
                .collect()
        }
        for (i, p) in pairs.iter().enumerate() {
            let hyp_counts = ngrams(&p.hypothesis, n);
            let hyp = weigh(&hyp_counts, &df, n_docs);
            let hyp_norm = sorted_sum(hyp.values().map(|v| v * v).collect()).sqrt();
            let mut sims = Vec::with_capacity(p.references.len());
            for r in &p.references {
                let ref_counts = ngrams(r, n);
                let rv = weigh(&ref_counts, &df, n_docs);
                let ref_norm = sorted_sum(rv.values().map(|v| v * v).collect()).sqrt();
                if hyp_norm == 0.0 || ref_norm == 0.0 {
                    sims.push(0.0);
                    continue;
                }
                let dot = sorted_sum(
                    hyp.iter()
                        .filter_map(|(g, hv)| {
                            let rw = rv.get(g)?;
                            Some(if opts.d_variant { hv.min(*rw) * rw } else { hv * rw })
                        })
                        .collect(),
                );
                let mut sim = dot / (hyp_norm * ref_norm);
                if opts.d_variant {
                    let delta = p.hypothesis.len() as f64 - r.len() as f64;
                    sim *= (-delta * delta / (2.0 * CIDER_D_SIGMA * CIDER_D_SIGMA)).exp();
                }
                sims.push(sim);
            }
            per_pair[i] += sorted_mean(sims) / opts.max_n as f64;
        }
    }
    Ok(opts.scale * sorted_mean(per_pair))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteorOptions {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for MeteorOptions {
    fn default() -> Self {
        MeteorOptions { alpha: 0.9, gamma: 0.5, beta: 3.0 }
    }
}

/// Exact-match alignment, left to right. Each hypothesis token takes the
/// reference occurrence that extends the current chunk when there is one,
/// otherwise the earliest unused one. This reaches the maximum number of
/// matches. Returns (matches, chunks).
fn align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, tok) in hyp.iter().enumerate() {
        let extend = prev
            .filter(|&(pi, pj)| pi + 1 == i && pj + 1 < reference.len())
            .map(|(_, pj)| pj + 1)
            .filter(|&j| !used[j] && &reference[j] == tok);
        let j = extend.or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok));
        if let Some(j) = j {
            if extend.is_none() {
                chunks += 1;
            }
            used[j] = true;
            matches += 1;
            prev = Some((i, j));
        }
    }
    (matches, chunks)
}

fn meteor_pair(hyp: &[String], reference: &[String], o: MeteorOptions) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (o.alpha * p + (1.0 - o.alpha) * r);
    let penalty = o.gamma * (chunks as f64 / m as f64).powf(o.beta);
    f * (1.0 - penalty)
}

/// Exact-match only: no stemming or synonyms, so values are not comparable
/// with resource-based METEOR.
pub fn meteor_lite(pairs: &[EvalPair], opts: MeteorOptions) -> Result<f64> {
    check_pairs(pairs)?;
    Ok(sorted_mean(
        pairs
            .iter()
            .map(|p| {
                p.references
                    .iter()
                    .map(|r| meteor_pair(&p.hypothesis, r, opts))
                    .fold(0.0, f64::max)
            })
            .collect(),
    ))
}

pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub pairs: usize,
    pub bleu: Vec<f64>,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl Scores {
    pub fn compute(pairs: &[EvalPair], cider_opts: CiderOptions) -> Result<Self> {
        Ok(Scores {
            pairs: pairs.len(),
            bleu: bleu(pairs, 4)?,
            meteor: meteor_lite(pairs, MeteorOptions::default())?,
            rouge_l: rouge_l(pairs, ROUGE_BETA)?,
            cider: cider(pairs, cider_opts)?,
        })
    }

    /// `B-1 B-2 B-3 B-4 C M R` as one row.
    pub fn row(&self) -> String {
        let mut cells: Vec<String> = self.bleu.iter().map(|b| format!("{b:.3}")).collect();
        cells.push(format!("{:.3}", self.cider));
        cells.push(format!("{:.3}", self.meteor));
        cells.push(format!("{:.3}", self.rouge_l));
        cells.join("  ")
    }

    pub const HEADER: &'static str = "B-1    B-2    B-3    B-4    C      M      R";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub bleu: String,
    pub rouge_beta: f64,
    pub cider: CiderOptions,
    pub cider_idf: String,
    pub meteor: MeteorOptions,
    pub meteor_note: String,
    pub tokenization: String,
}

impl Conventions {
    fn new(cider: CiderOptions) -> Self {
        Conventions {
            bleu: "corpus-level, no smoothing, closest-reference brevity penalty".into(),
            rouge_beta: ROUGE_BETA,
            cider,
            cider_idf: "ln(N/df) over the evaluated pairs' references".into(),
            meteor: MeteorOptions::default(),
            meteor_note: "meteor_lite: exact matches only, not comparable to resource-based METEOR".into(),
            tokenization: "lowercase, whitespace split".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub all: Scores,
    pub per_topic: BTreeMap<String, Scores>,
    pub conventions: Conventions,
}

/// Joins hypotheses to references by (id, topic). An empty filter keeps
/// every topic.
pub fn build_pairs(
    hypotheses: &[HypothesisRecord],
    references: &Dataset,
    topic_filter: &[String],
) -> Result<Vec<EvalPair>> {
    if hypotheses.is_empty() {
        return Err(FaeError::Input("no hypotheses to evaluate".into()));
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for h in hypotheses {
        if !topic_filter.is_empty() && !topic_filter.contains(&h.topic) {
            continue;
        }
        match references.find(&h.id).and_then(|s| s.reports.get(&h.topic)) {
            Some(r) => pairs.push(EvalPair::from_text(&h.id, &h.topic, &h.hypothesis, &[r])),
            None => missing.push(format!("{}/{}", h.id, h.topic)),
        }
    }
    if !missing.is_empty() {
        return Err(FaeError::Unmatched(missing));
    }
    if pairs.is_empty() {
        return Err(FaeError::Input("topic filter left no pairs".into()));
    }
    Ok(pairs)
}

pub fn evaluate_pairs(pairs: &[EvalPair], cider_opts: CiderOptions) -> Result<ScoreReport> {
    let mut by_topic: BTreeMap<String, Vec<EvalPair>> = BTreeMap::new();
    for p in pairs {
        by_topic.entry(p.topic.clone()).or_default().push(p.clone());
    }
    let per_topic = by_topic
        .into_iter()
        .map(|(t, ps)| Ok((t, Scores::compute(&ps, cider_opts)?)))
        .collect::<Result<_>>()?;
    Ok(ScoreReport {
        all: Scores::compute(pairs, cider_opts)?,
        per_topic,
        conventions: Conventions::new(cider_opts),
    })
}

pub fn evaluate(
    hypotheses: &[HypothesisRecord],
    references: &Dataset,
    topic_filter: &[String],
    cider_opts: CiderOptions,
) -> Result<ScoreReport> {
    evaluate_pairs(&build_pairs(hypotheses, references, topic_filter)?, cider_opts)
}
