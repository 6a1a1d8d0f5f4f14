//! The generator network and its exact backpropagation through time.
//!
//! Per sample, every view observation `(y_j, h_j)` is encoded as
//! `U · diag(y_j) · V · h_j`. Each decoding step then
//!
//! 1. attends over the encoded views with the previous output feature as
//!    the query, giving `h_a`;
//! 2. embeds the previous token per direction as `A_d · Σ_{d,k} · B_d · x`,
//!    with `Σ_{d,k}` owned by topic `k`;
//! 3. advances two LSTMs (forward and backward parameter sets) on
//!    `[embedding ; Ws_d · h_a]`;
//! 4. mixes both hidden states into `h_s = tanh(Wg·[h_fwd ; h_bwd] + bg)`
//!    and projects to vocabulary logits `Wo · h_s + bo`.
//!
//! Both directions run left to right and consume the same previous token,
//! so training and generation share one code path.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingExample, ViewObservation, SIMPLEX_TOLERANCE};
use crate::error::{FaeError, Result};
use crate::layers::{
    attention_bwd, attention_fwd, combine_output_bwd, combine_output_fwd, factored_linear_bwd,
    factored_linear_fwd, lstm_cell_bwd, lstm_cell_fwd, nll_loss, AttentionCache, AttentionGrads,
    CombineCache, CombineGrads, FactoredCache, FactoredGrads, LstmCache, LstmCellParams,
    SigmaShape,
};
use crate::linalg::{diag, softmax, Matrix, SeededRng, Vector};
use crate::vocab::BOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// View-factored encoding, attention over views.
    #[default]
    Factored,
    /// Shared linear encoding, attention over views.
    Plain,
    /// Shared linear encoding averaged into a single vector.
    MeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One Σ per topic and direction.
    #[default]
    Factored,
    /// Every topic uses the first Σ of each direction.
    Shared,
}

/// The four ablation variants: both factored transforms, attention only,
/// embedding only, and neither (mean-pooled views, one shared Σ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fae,
    FaOnly,
    FeOnly,
    Vanilla,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fae, Variant::FaOnly, Variant::FeOnly, Variant::Vanilla];

    pub fn modes(self) -> (AttentionMode, EmbeddingMode) {
        match self {
            Variant::Fae => (AttentionMode::Factored, EmbeddingMode::Factored),
            Variant::FaOnly => (AttentionMode::Factored, EmbeddingMode::Shared),
            Variant::FeOnly => (AttentionMode::Plain, EmbeddingMode::Factored),
            Variant::Vanilla => (AttentionMode::MeanPool, EmbeddingMode::Shared),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fae => "FAE",
            Variant::FaOnly => "FA-only",
            Variant::FeOnly => "FE-only",
            Variant::Vanilla => "vanilla",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaeGenConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_views: usize,
    pub topic_factor_dim: usize,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
    pub embedding_mode: EmbeddingMode,
    pub topic_factor_shape: SigmaShape,
}

impl FaeGenConfig {
    /// Defaults: hidden 512, 5×5 view factors, 10×10 topic factors, 30 tokens.
    pub fn new(feature_dim: usize, num_topics: usize, vocab_size: usize) -> Self {
        FaeGenConfig {
            hidden_dim: 512,
            feature_dim,
            num_views: 5,
            topic_factor_dim: 10,
            num_topics,
            vocab_size,
            max_len: 30,
            attention_mode: AttentionMode::Factored,
            embedding_mode: EmbeddingMode::Factored,
            topic_factor_shape: SigmaShape::Full,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.attention_mode, self.embedding_mode) = variant.modes();
        self
    }

    pub fn view_factor_dim(&self) -> usize {
        self.num_views
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("feature_dim", self.feature_dim),
            ("num_views", self.num_views),
            ("topic_factor_dim", self.topic_factor_dim),
            ("num_topics", self.num_topics),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(FaeError::Input(format!("{name} must be at least 1")));
        }
        if self.vocab_size <= BOS {
            return Err(FaeError::Input("vocab_size must include the reserved tokens".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionParams {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma: Vec<Matrix>,
    pub ws: Matrix,
    pub lstm: LstmCellParams,
}

/// Every learned tensor of the network.
///
/// The same struct doubles as a gradient buffer (see [`FaeGenParams::zeros`]).
#[derive(Clone, Debug, PartialEq)]
pub struct FaeGenParams {
    pub u: Matrix,
    pub v: Matrix,
    pub w_plain: Matrix,
    pub wa: Matrix,
    pub wv: Matrix,
    pub wz: Matrix,
    pub fwd: DirectionParams,
    pub bwd: DirectionParams,
    pub wg: Matrix,
    pub bg: Vector,
    pub wo: Matrix,
    pub bo: Vector,
}

/// Read-only view of one named parameter tensor.
pub struct ParamTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

pub struct ParamTensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a mut [f64],
}

fn mshape(m: &Matrix) -> Vec<usize> {
    vec![m.rows(), m.cols()]
}

impl DirectionParams {
    fn zeros(config: &FaeGenConfig) -> Self {
        let (h, fs) = (config.hidden_dim, config.topic_factor_dim);
        DirectionParams {
            a: Matrix::zeros(h, fs),
            b: Matrix::zeros(fs, config.vocab_size),
            sigma: (0..config.num_topics).map(|_| Matrix::zeros(fs, fs)).collect(),
            ws: Matrix::zeros(h, h),
            lstm: LstmCellParams::zeros(2 * h, h),
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<ParamTensor<'a>>) {
        let mut m = |name: String, x: &'a Matrix| {
            out.push(ParamTensor { name, shape: mshape(x), values: x.as_slice() })
        };
        m(format!("{prefix}.A"), &self.a);
        m(format!("{prefix}.B"), &self.b);
        for (k, s) in self.sigma.iter().enumerate() {
            m(format!("{prefix}.Sigma[{k}]"), s);
        }
        m(format!("{prefix}.Ws"), &self.ws);
        let l = &self.lstm;
        m(format!("{prefix}.lstm.W_i"), &l.w_input);
        m(format!("{prefix}.lstm.W_f"), &l.w_forget);
        m(format!("{prefix}.lstm.W_o"), &l.w_output);
        m(format!("{prefix}.lstm.W_c"), &l.w_cell);
        for (name, b) in [("b_i", &l.b_input), ("b_f", &l.b_forget), ("b_o", &l.b_output), ("b_c", &l.b_cell)] {
            out.push(ParamTensor {
                name: format!("{prefix}.lstm.{name}"),
                shape: vec![b.dim()],
                values: b.as_slice(),
            });
        }
    }

    fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamTensorMut<'a>>) {
        fn m<'a>(out: &mut Vec<ParamTensorMut<'a>>, name: String, x: &'a mut Matrix) {
            out.push(ParamTensorMut { name, shape: mshape(x), values: x.as_mut_slice() })
        }
        fn v<'a>(out: &mut Vec<ParamTensorMut<'a>>, name: String, x: &'a mut Vector) {
            out.push(ParamTensorMut { name, shape: vec![x.dim()], values: x.as_mut_slice() })
        }
        m(out, format!("{prefix}.A"), &mut self.a);
        m(out, format!("{prefix}.B"), &mut self.b);
        for (k, s) in self.sigma.iter_mut().enumerate() {
            m(out, format!("{prefix}.Sigma[{k}]"), s);
        }
        m(out, format!("{prefix}.Ws"), &mut self.ws);
        let l = &mut self.lstm;
        m(out, format!("{prefix}.lstm.W_i"), &mut l.w_input);
        m(out, format!("{prefix}.lstm.W_f"), &mut l.w_forget);
        m(out, format!("{prefix}.lstm.W_o"), &mut l.w_output);
        m(out, format!("{prefix}.lstm.W_c"), &mut l.w_cell);
        v(out, format!("{prefix}.lstm.b_i"), &mut l.b_input);
        v(out, format!("{prefix}.lstm.b_f"), &mut l.b_forget);
        v(out, format!("{prefix}.lstm.b_o"), &mut l.b_output);
        v(out, format!("{prefix}.lstm.b_c"), &mut l.b_cell);
    }
}

impl FaeGenParams {
    pub fn zeros(config: &FaeGenConfig) -> Self {
        let (h, d, fv, vocab) = (
            config.hidden_dim,
            config.feature_dim,
            config.view_factor_dim(),
            config.vocab_size,
        );
        FaeGenParams {
            u: Matrix::zeros(h, fv),
            v: Matrix::zeros(fv, d),
            w_plain: Matrix::zeros(h, d),
            wa: Matrix::zeros(1, h),
            wv: Matrix::zeros(h, h),
            wz: Matrix::zeros(h, h),
            fwd: DirectionParams::zeros(config),
            bwd: DirectionParams::zeros(config),
            wg: Matrix::zeros(h, 2 * h),
            bg: Vector::zeros(h),
            wo: Matrix::zeros(vocab, h),
            bo: Vector::zeros(vocab),
        }
    }

    /// All tensors in canonical order.
    pub fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut out = Vec::new();
        for (name, x) in [
            ("U", &self.u),
            ("V", &self.v),
            ("W_plain", &self.w_plain),
            ("Wa", &self.wa),
            ("Wv", &self.wv),
            ("Wz", &self.wz),
        ] {
            out.push(ParamTensor { name: name.into(), shape: mshape(x), values: x.as_slice() });
        }
        self.fwd.push_tensors("fwd", &mut out);
        self.bwd.push_tensors("bwd", &mut out);
        out.push(ParamTensor { name: "Wg".into(), shape: mshape(&self.wg), values: self.wg.as_slice() });
        out.push(ParamTensor { name: "bg".into(), shape: vec![self.bg.dim()], values: self.bg.as_slice() });
        out.push(ParamTensor { name: "Wo".into(), shape: mshape(&self.wo), values: self.wo.as_slice() });
        out.push(ParamTensor { name: "bo".into(), shape: vec![self.bo.dim()], values: self.bo.as_slice() });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamTensorMut<'_>> {
        let mut out = Vec::new();
        for (name, x) in [
            ("U", &mut self.u),
            ("V", &mut self.v),
            ("W_plain", &mut self.w_plain),
            ("Wa", &mut self.wa),
            ("Wv", &mut self.wv),
            ("Wz", &mut self.wz),
        ] {
            out.push(ParamTensorMut { name: name.into(), shape: mshape(x), values: x.as_mut_slice() });
        }
        self.fwd.push_tensors_mut("fwd", &mut out);
        self.bwd.push_tensors_mut("bwd", &mut out);
        out.push(ParamTensorMut { name: "Wg".into(), shape: mshape(&self.wg), values: self.wg.as_mut_slice() });
        out.push(ParamTensorMut { name: "bg".into(), shape: vec![self.bg.dim()], values: self.bg.as_mut_slice() });
        out.push(ParamTensorMut { name: "Wo".into(), shape: mshape(&self.wo), values: self.wo.as_mut_slice() });
        out.push(ParamTensorMut { name: "bo".into(), shape: vec![self.bo.dim()], values: self.bo.as_mut_slice() });
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.values.iter().all(|x| x.is_finite()))
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.values.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.values.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.values.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += s * other`; both must come from the same config.
    pub fn axpy(&mut self, s: f64, other: &FaeGenParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.shape, src.shape);
            for (a, b) in dst.values.iter_mut().zip(src.values) {
                *a += s * b;
            }
        }
    }

    pub fn is_sigma(name: &str) -> bool {
        name.contains(".Sigma[")
    }
}

/// Weights uniform in ±0.08; every Σ starts at identity plus 0.01-scale
/// Gaussian noise (diagonal only when Σ is diagonal-constrained).
pub fn init_params(config: &FaeGenConfig, seed: u64) -> Result<FaeGenParams> {
    init_params_scaled(config, seed, 0.08, 0.01)
}

pub fn init_params_scaled(
    config: &FaeGenConfig,
    seed: u64,
    weight_scale: f64,
    sigma_noise: f64,
) -> Result<FaeGenParams> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut params = FaeGenParams::zeros(config);
    let diagonal = config.topic_factor_shape == SigmaShape::Diagonal;
    for t in params.tensors_mut() {
        if FaeGenParams::is_sigma(&t.name) {
            let n = t.shape[0];
            for r in 0..n {
                for c in 0..n {
                    t.values[r * n + c] = match (r == c, diagonal) {
                        (true, _) => 1.0 + rng.gaussian(0.0, sigma_noise),
                        (false, true) => 0.0,
                        (false, false) => rng.gaussian(0.0, sigma_noise),
                    };
                }
            }
        } else {
            for x in t.values.iter_mut() {
                *x = rng.uniform_range(-weight_scale, weight_scale);
            }
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// View encoding

#[derive(Clone, Debug)]
pub enum EncodeCache {
    Factored(Vec<FactoredCache>),
    Plain(Vec<Vector>),
    MeanPool(Vec<Vector>),
}

fn check_observations(config: &FaeGenConfig, observations: &[ViewObservation]) -> Result<()> {
    if observations.is_empty() {
        return Err(FaeError::Input("sample has no view observations".into()));
    }
    for (j, obs) in observations.iter().enumerate() {
        if obs.view_probs.dim() != config.num_views || obs.features.dim() != config.feature_dim {
            return Err(FaeError::shape(
                "encode_views",
                format!("views {} / features {}", config.num_views, config.feature_dim),
                format!("observation {j}: {} / {}", obs.view_probs.dim(), obs.features.dim()),
            ));
        }
        let probs = obs.view_probs.as_slice();
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < -SIMPLEX_TOLERANCE) || (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(FaeError::Input(format!(
                "observation {j}: view_probs off the simplex (sum {total})"
            )));
        }
    }
    Ok(())
}

pub fn encode_views(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
) -> Result<(Vec<Vector>, EncodeCache)> {
    check_observations(config, observations)?;
    match config.attention_mode {
        AttentionMode::Factored => {
            let mut views = Vec::with_capacity(observations.len());
            let mut caches = Vec::with_capacity(observations.len());
            for obs in observations {
                let (out, cache) =
                    factored_linear_fwd(&params.u, &diag(&obs.view_probs), &params.v, &obs.features)?;
                views.push(out);
                caches.push(cache);
            }
            Ok((views, EncodeCache::Factored(caches)))
        }
        AttentionMode::Plain => {
            let views = observations
                .iter()
                .map(|o| params.w_plain.matvec(&o.features))
                .collect::<Result<Vec<_>>>()?;
            let inputs = observations.iter().map(|o| o.features.clone()).collect();
            Ok((views, EncodeCache::Plain(inputs)))
        }
        AttentionMode::MeanPool => {
            let inputs: Vec<Vector> = observations.iter().map(|o| o.features.clone()).collect();
            let mut mean = Vector::zeros(config.hidden_dim);
            let w = 1.0 / inputs.len() as f64;
            for h in &inputs {
                mean.axpy(w, &params.w_plain.matvec(h)?)?;
            }
            Ok((vec![mean], EncodeCache::MeanPool(inputs)))
        }
    }
}

fn encode_views_bwd(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
    cache: &EncodeCache,
    d_views: &[Vector],
    grads: &mut FaeGenParams,
) -> Result<()> {
    match cache {
        EncodeCache::Factored(caches) => {
            let fv = config.view_factor_dim();
            let mut scratch = Matrix::zeros(fv, fv);
            for ((obs, c), d) in observations.iter().zip(caches).zip(d_views) {
                factored_linear_bwd(
                    &params.u,
                    &diag(&obs.view_probs),
                    &params.v,
                    c,
                    d,
                    SigmaShape::Diagonal,
                    FactoredGrads { du: &mut grads.u, dsigma: &mut scratch, dv: &mut grads.v },
                )?;
            }
        }
        EncodeCache::Plain(inputs) => {
            for (h, d) in inputs.iter().zip(d_views) {
                grads.w_plain.add_outer(d, h)?;
            }
        }
        EncodeCache::MeanPool(inputs) => {
            let scaled = d_views[0].scale(1.0 / inputs.len() as f64);
            for h in inputs {
                grads.w_plain.add_outer(&scaled, h)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// One decoding step

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h_s: Vector,
    pub fwd_h: Vector,
    pub fwd_c: Vector,
    pub bwd_h: Vector,
    pub bwd_c: Vector,
}

impl DecoderState {
    pub fn initial(config: &FaeGenConfig) -> Self {
        let z = || Vector::zeros(config.hidden_dim);
        DecoderState { h_s: z(), fwd_h: z(), fwd_c: z(), bwd_h: z(), bwd_c: z() }
    }
}

#[derive(Clone, Debug)]
struct DirectionStep {
    embed: FactoredCache,
    lstm: LstmCache,
}

#[derive(Clone, Debug)]
pub struct StepCache {
    attention: AttentionCache,
    h_a: Vector,
    dirs: [DirectionStep; 2],
    combine: CombineCache,
}

impl StepCache {
    pub fn alpha(&self) -> &Vector {
        self.attention.alpha()
    }
}

pub struct StepOutput {
    pub probs: Vector,
    pub logits: Vector,
    pub state: DecoderState,
    pub cache: StepCache,
}

fn topic_sigma<'a>(
    config: &FaeGenConfig,
    dir: &'a DirectionParams,
    topic: usize,
) -> Cow<'a, Matrix> {
    let k = match config.embedding_mode {
        EmbeddingMode::Factored => topic,
        EmbeddingMode::Shared => 0,
    };
    let sigma = &dir.sigma[k];
    match config.topic_factor_shape {
        SigmaShape::Full => Cow::Borrowed(sigma),
        SigmaShape::Diagonal => {
            let n = sigma.rows();
            let mut d = Matrix::zeros(n, n);
            for i in 0..n {
                d.set(i, i, sigma.get(i, i));
            }
            Cow::Owned(d)
        }
    }
}

fn check_topic_token(config: &FaeGenConfig, topic: usize, token: usize) -> Result<()> {
    if topic >= config.num_topics {
        return Err(FaeError::Input(format!(
            "topic {topic} out of range ({} topics)",
            config.num_topics
        )));
    }
    if token >= config.vocab_size {
        return Err(FaeError::Input(format!(
            "token {token} out of range (vocabulary {})",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn decode_step(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    topic: usize,
    x_prev: usize,
    state: &DecoderState,
    views: &[Vector],
) -> Result<StepOutput> {
    check_topic_token(config, topic, x_prev)?;
    let (_, h_a, attention) = attention_fwd(&params.wa, &params.wv, &params.wz, views, &state.h_s)?;
    let x = Vector::one_hot(config.vocab_size, x_prev)?;

    let run_dir = |dir: &DirectionParams, h: &Vector, c: &Vector| -> Result<_> {
        let sigma = topic_sigma(config, dir, topic);
        let (embed_out, embed) = factored_linear_fwd(&dir.a, &sigma, &dir.b, &x)?;
        let attended = dir.ws.matvec(&h_a)?;
        let input = crate::linalg::concat(&embed_out, &attended);
        let (h_new, c_new, lstm) = lstm_cell_fwd(&dir.lstm, &input, h, c)?;
        Ok((h_new, c_new, DirectionStep { embed, lstm }))
    };
    let (fwd_h, fwd_c, fwd_step) = run_dir(&params.fwd, &state.fwd_h, &state.fwd_c)?;
    let (bwd_h, bwd_c, bwd_step) = run_dir(&params.bwd, &state.bwd_h, &state.bwd_c)?;

    let (h_s, logits, combine) =
        combine_output_fwd(&params.wg, &params.bg, &params.wo, &params.bo, &fwd_h, &bwd_h)?;
    let probs = softmax(&logits)?;
    Ok(StepOutput {
        probs,
        logits,
        state: DecoderState { h_s, fwd_h, fwd_c, bwd_h, bwd_c },
        cache: StepCache {
            attention,
            h_a,
            dirs: [fwd_step, bwd_step],
            combine,
        },
    })
}

// ---------------------------------------------------------------------------
// Teacher-forced loss and BPTT

/// Everything needed to backpropagate one (sample, topic) sequence.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub topic: usize,
    pub targets: Vec<usize>,
    pub observations: Vec<ViewObservation>,
    pub step_losses: Vec<f64>,
    encode: EncodeCache,
    steps: Vec<StepCache>,
    d_logits: Vec<Vector>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_loss(&self) -> f64 {
        self.step_losses.iter().sum()
    }

    pub fn alphas(&self) -> impl Iterator<Item = &Vector> {
        self.steps.iter().map(|s| s.alpha())
    }

    /// Re-runs the forward pass from the recorded inputs.
    pub fn replay(&self, params: &FaeGenParams, config: &FaeGenConfig) -> Result<(f64, ForwardTrace)> {
        forward_nll(params, config, &self.observations, self.topic, &self.targets)
    }
}

/// Sum over steps of `-log p(target_t | target_<t, views)`, starting from `<bos>`.
pub fn forward_nll(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    observations: &[ViewObservation],
    topic: usize,
    targets: &[usize],
) -> Result<(f64, ForwardTrace)> {
    if targets.is_empty() {
        return Err(FaeError::Input("empty target sequence".into()));
    }
    if targets.len() > config.max_len {
        return Err(FaeError::Input(format!(
            "target length {} exceeds max_len {}",
            targets.len(),
            config.max_len
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= config.vocab_size) {
        return Err(FaeError::Input(format!("unknown token index {bad}")));
    }
    let (views, encode) = encode_views(params, config, observations)?;
    let mut state = DecoderState::initial(config);
    let mut prev = BOS;
    let mut steps = Vec::with_capacity(targets.len());
    let mut step_losses = Vec::with_capacity(targets.len());
    let mut d_logits = Vec::with_capacity(targets.len());
    for &target in targets {
        let out = decode_step(params, config, topic, prev, &state, &views)?;
        let (loss, d) = nll_loss(&out.logits, target)?;
        step_losses.push(loss);
        d_logits.push(d);
        steps.push(out.cache);
        state = out.state;
        prev = target;
    }
    let trace = ForwardTrace {
        topic,
        targets: targets.to_vec(),
        observations: observations.to_vec(),
        step_losses,
        encode,
        steps,
        d_logits,
    };
    Ok((trace.total_loss(), trace))
}

/// Accumulates `scale · ∂loss/∂θ` for the traced sequence into `grads`.
///
/// The trace must come from a forward pass with the same `params`; a stale
/// trace is not detected.
pub fn backward_into(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    trace: &ForwardTrace,
    scale: f64,
    grads: &mut FaeGenParams,
) -> Result<()> {
    let h = config.hidden_dim;
    let n_views = match &trace.encode {
        EncodeCache::Factored(c) => c.len(),
        EncodeCache::Plain(c) => c.len(),
        EncodeCache::MeanPool(_) => 1,
    };
    let mut d_views = vec![Vector::zeros(h); n_views];
    let mut d_hs_next = Vector::zeros(h);
    let mut carry = [(Vector::zeros(h), Vector::zeros(h)), (Vector::zeros(h), Vector::zeros(h))];

    for (step, d_logits) in trace.steps.iter().zip(&trace.d_logits).rev() {
        let d_logits = d_logits.scale(scale);
        let (d_fwd_local, d_bwd_local) = combine_output_bwd(
            &params.wg,
            &params.wo,
            &step.combine,
            &d_logits,
            Some(&d_hs_next),
            CombineGrads { dwg: &mut grads.wg, dbg: &mut grads.bg, dwo: &mut grads.wo, dbo: &mut grads.bo },
        )?;

        let mut d_ha = Vector::zeros(h);
        for (d, local) in [d_fwd_local, d_bwd_local].into_iter().enumerate() {
            let (dp, dg) = if d == 0 {
                (&params.fwd, &mut grads.fwd)
            } else {
                (&params.bwd, &mut grads.bwd)
            };
            let ds = &step.dirs[d];
            let (ch, cc) = &mut carry[d];
            let mut dh = local;
            dh.axpy(1.0, ch)?;
            let (d_input, d_h_prev, d_c_prev) = lstm_cell_bwd(&dp.lstm, &ds.lstm, &dh, cc, &mut dg.lstm)?;
            *ch = d_h_prev;
            *cc = d_c_prev;
            let (d_embed, d_attended) = d_input.split(h)?;
            dg.ws.add_outer(&d_attended, &step.h_a)?;
            d_ha.axpy(1.0, &dp.ws.matvec_t(&d_attended)?)?;

            let k = match config.embedding_mode {
                EmbeddingMode::Factored => trace.topic,
                EmbeddingMode::Shared => 0,
            };
            let sigma = topic_sigma(config, dp, trace.topic);
            factored_linear_bwd(
                &dp.a,
                &sigma,
                &dp.b,
                &ds.embed,
                &d_embed,
                config.topic_factor_shape,
                FactoredGrads { du: &mut dg.a, dsigma: &mut dg.sigma[k], dv: &mut dg.b },
            )?;
        }

        let (d_step_views, d_hs_prev) = attention_bwd(
            &params.wa,
            &params.wv,
            &params.wz,
            &step.attention,
            None,
            &d_ha,
            AttentionGrads { dwa: &mut grads.wa, dwv: &mut grads.wv, dwz: &mut grads.wz },
        )?;
        for (acc, d) in d_views.iter_mut().zip(&d_step_views) {
            acc.axpy(1.0, d)?;
        }
        d_hs_next = d_hs_prev;
    }

    encode_views_bwd(params, config, &trace.observations, &trace.encode, &d_views, grads)
}

pub fn backward(params: &FaeGenParams, config: &FaeGenConfig, trace: &ForwardTrace) -> Result<FaeGenParams> {
    let mut grads = FaeGenParams::zeros(config);
    backward_into(params, config, trace, 1.0, &mut grads)?;
    Ok(grads)
}

/// Loss summed over every topic the example covers.
pub fn sample_loss_all_topics(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    example: &TrainingExample,
) -> Result<(f64, Vec<ForwardTrace>)> {
    if example.reports.is_empty() {
        return Err(FaeError::Input(format!("sample {} has no topic reports", example.id)));
    }
    let mut total = 0.0;
    let mut traces = Vec::with_capacity(example.reports.len());
    for (topic, targets) in &example.reports {
        let (loss, trace) = forward_nll(params, config, &example.observations, *topic, targets)?;
        total += loss;
        traces.push(trace);
    }
    Ok((total, traces))
}

/// Loss and accumulated gradients for one example across all its topics.
pub fn sample_loss_and_grads(
    params: &FaeGenParams,
    config: &FaeGenConfig,
    example: &TrainingExample,
    grads: &mut FaeGenParams,
) -> Result<f64> {
    let (loss, traces) = sample_loss_all_topics(params, config, example)?;
    for trace in &traces {
        backward_into(params, config, trace, 1.0, grads)?;
    }
    Ok(loss)
}
