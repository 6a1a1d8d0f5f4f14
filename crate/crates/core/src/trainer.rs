//! Optimization loop, gradient checking and the pieces they share.

use serde::{Deserialize, Serialize};

use crate::corpus::{TrainingExample, ViewObservation};
use crate::error::{FaeError, Result};
use crate::linalg::{softmax, SeededRng};
use crate::model::{
    init_params, init_params_scaled, sample_loss_all_topics, sample_loss_and_grads, FaeGenConfig,
    FaeGenParams,
};
use crate::vocab::{EOS, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 60,
            clip_norm: 5.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is how a frozen run is expressed.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FaeError::Input("learning_rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(FaeError::Input("epochs must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FaeError::Input("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FaeError::Input("moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut FaeGenParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    first: FaeGenParams,
    second: FaeGenParams,
    steps: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(config: &FaeGenConfig, train: &TrainConfig) -> Self {
        Adam {
            first: FaeGenParams::zeros(config),
            second: FaeGenParams::zeros(config),
            steps: 0,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut FaeGenParams, grads: &FaeGenParams, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut().into_iter().zip(self.second.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p
                .values
                .iter_mut()
                .zip(g.values)
                .zip(m.values.iter_mut())
                .zip(v.values.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_token_nll: f64,
}

/// One `epoch, mean per-token NLL` line per entry.
pub fn format_loss_log(log: &[EpochLoss]) -> String {
    log.iter()
        .map(|e| format!("{}, {}\n", e.epoch, e.mean_token_nll))
        .collect()
}

pub struct TrainOutcome {
    pub params: FaeGenParams,
    pub log: Vec<EpochLoss>,
}

/// Trains from `init_params(model, train.seed)`.
pub fn train(
    examples: &[TrainingExample],
    model: &FaeGenConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = init_params(model, train.seed)?;
    train_from(params, examples, model, train, |_| {})
}

/// Per-sample updates over `examples` in a freshly shuffled order each
/// epoch. `on_epoch` sees every logged epoch as it completes.
pub fn train_from(
    mut params: FaeGenParams,
    examples: &[TrainingExample],
    model: &FaeGenConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    train.validate()?;
    model.validate()?;
    if examples.is_empty() {
        return Err(FaeError::Input("empty training set".into()));
    }
    // The shuffle stream is kept apart from the initialization stream.
    let mut rng = SeededRng::new(train.seed ^ 0x5eed_0f_5a_3b1e);
    let mut adam = Adam::new(model, train);
    let mut grads = FaeGenParams::zeros(model);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for &i in &order {
            let example = &examples[i];
            grads.fill(0.0);
            let loss = sample_loss_and_grads(&params, model, example, &mut grads)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(FaeError::NonFinite {
                    epoch,
                    sample_id: example.id.clone(),
                });
            }
            loss_sum += loss;
            tokens += example.token_count();
            clip_global_norm(&mut grads, train.clip_norm);
            adam.step(&mut params, &grads, train.learning_rate);
        }
        let entry = EpochLoss {
            epoch,
            mean_token_nll: loss_sum / tokens.max(1) as f64,
        };
        if train.log_interval > 0 && (epoch % train.log_interval == 0 || epoch == train.epochs) {
            on_epoch(&entry);
        }
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

/// Mean per-token NLL of `params` over `examples`, no updates.
pub fn evaluate_nll(
    params: &FaeGenParams,
    model: &FaeGenConfig,
    examples: &[TrainingExample],
) -> Result<f64> {
    let (mut loss, mut tokens) = (0.0, 0usize);
    for ex in examples {
        loss += sample_loss_all_topics(params, model, ex)?.0;
        tokens += ex.token_count();
    }
    Ok(loss / tokens.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: FaeGenConfig,
    pub observations: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub max_entries: usize,
    /// Uniform half-width for weights at the probe point.
    pub weight_scale: f64,
    /// Std of the noise around the identity for every Σ.
    pub sigma_noise: f64,
}

impl GradCheckConfig {
    /// hidden 8, features 6, vocabulary 20, 3 views, 4×4 topic factors,
    /// 3 observations, 5 tokens, 2 topics.
    pub fn tiny(seed: u64) -> Self {
        let mut model = FaeGenConfig::new(6, 2, 20);
        model.hidden_dim = 8;
        model.num_views = 3;
        model.topic_factor_dim = 4;
        GradCheckConfig {
            model,
            observations: 3,
            seq_len: 5,
            seed,
            fd_step: 1e-5,
            max_entries: 200,
            weight_scale: 0.7,
            sigma_noise: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub fd_step: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, threshold: f64) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel_error < threshold))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>7}  {:>12}\n", "group", "entries", "max_rel_err");
        for g in &self.groups {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>12.3e}\n",
                g.name, g.entries_checked, g.max_rel_error
            ));
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// A random example with `observations` views and one `seq_len`-token
/// report (ending in `<eos>`) per topic.
pub fn random_example(
    config: &FaeGenConfig,
    observations: usize,
    seq_len: usize,
    rng: &mut SeededRng,
) -> Result<TrainingExample> {
    let observations = (0..observations)
        .map(|_| {
            let logits = rng.draw_gaussian(0.0, 1.0, config.num_views);
            Ok(ViewObservation {
                view_probs: softmax(&logits)?,
                features: rng.draw_gaussian(0.0, 1.0, config.feature_dim),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = (0..config.num_topics)
        .map(|k| {
            let mut tokens: Vec<usize> = (1..seq_len)
                .map(|_| UNK + rng.index(config.vocab_size - UNK))
                .collect();
            tokens.push(EOS);
            (k, tokens)
        })
        .collect();
    Ok(TrainingExample {
        id: "gradcheck".into(),
        observations,
        reports,
    })
}

/// Compares analytic gradients of the total multi-topic loss against
/// central differences, per named parameter group.
///
/// Parameters are drawn wider than the training initialization so every
/// path carries gradient well above the finite-difference noise floor.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = &cfg.model;
    let mut params = init_params_scaled(model, cfg.seed, cfg.weight_scale, cfg.sigma_noise)?;
    let mut rng = SeededRng::new(cfg.seed.wrapping_add(0x9e37_79b9));
    let example = random_example(model, cfg.observations, cfg.seq_len, &mut rng)?;

    let mut analytic = FaeGenParams::zeros(model);
    sample_loss_and_grads(&params, model, &example, &mut analytic)?;

    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (g, name) in names.into_iter().enumerate() {
        let len = analytic.tensors()[g].values.len();
        let mut entries: Vec<usize> = (0..len).collect();
        if len > cfg.max_entries {
            rng.shuffle(&mut entries);
            entries.truncate(cfg.max_entries);
            entries.sort_unstable();
        }
        let analytic_values = analytic.tensors()[g].values.to_vec();
        let mut worst = 0.0f64;
        for &i in &entries {
            let numeric = central_difference(&mut params, model, &example, g, i, cfg.fd_step)?;
            worst = worst.max(relative_error(analytic_values[i], numeric));
        }
        groups.push(GroupError {
            name,
            entries_checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        fd_step: cfg.fd_step,
        groups,
    })
}

/// `(L(θ+h) − L(θ−h)) / 2h`, with the difference taken per decoding step
/// before summing. Differencing two ~30-nat totals would lose several bits
/// to the final summation alone.
fn central_difference(
    params: &mut FaeGenParams,
    model: &FaeGenConfig,
    example: &TrainingExample,
    group: usize,
    entry: usize,
    step: f64,
) -> Result<f64> {
    let set = |p: &mut FaeGenParams, value: f64| p.tensors_mut()[group].values[entry] = value;
    let orig = params.tensors()[group].values[entry];
    set(params, orig + step);
    let up = sample_loss_all_topics(params, model, example)?.1;
    set(params, orig - step);
    let down = sample_loss_all_topics(params, model, example)?.1;
    set(params, orig);
    let diff: f64 = up
        .iter()
        .zip(&down)
        .flat_map(|(u, d)| u.step_losses.iter().zip(&d.step_losses))
        .map(|(u, d)| u - d)
        .sum();
    Ok(diff / (2.0 * step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::SigmaShape;
    use crate::model::{AttentionMode, EmbeddingMode, Variant};

    fn tiny_model() -> FaeGenConfig {
        GradCheckConfig::tiny(1).model
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction() {
        let model = tiny_model();
        let mut g = init_params_scaled(&model, 3, 2.0, 1.0).unwrap();
        let before = g.clone();
        let pre = clip_global_norm(&mut g, 5.0);
        assert!(pre > 5.0);
        assert!(g.global_norm() <= 5.0 + 1e-9);
        let ratio = 5.0 / pre;
        for (a, b) in g.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.values.iter().zip(b.values) {
                assert!((x - ratio * y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
        let mut small = init_params_scaled(&model, 3, 1e-4, 1e-4).unwrap();
        small.fill(1e-4);
        let copy = small.clone();
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, copy);
    }

    #[test]
    fn adam_zero_gradient_step_is_a_no_op() {
        let model = tiny_model();
        let mut params = init_params(&model, 1).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&model, &TrainConfig::default());
        adam.step(&mut params, &FaeGenParams::zeros(&model), 1e-3);
        assert_eq!(params, before);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let model = tiny_model();
        let mut rng = SeededRng::new(4);
        let examples: Vec<_> = (0..3).map(|_| random_example(&model, 2, 4, &mut rng).unwrap()).collect();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..TrainConfig::default() };
        let out = train(&examples, &model, &cfg).unwrap();
        assert_eq!(out.params, init_params(&model, cfg.seed).unwrap());
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[0].mean_token_nll, out.log[2].mean_token_nll);
    }

    #[test]
    fn training_is_reproducible_and_descends() {
        let model = tiny_model();
        let mut rng = SeededRng::new(5);
        let examples: Vec<_> = (0..4).map(|_| random_example(&model, 3, 5, &mut rng).unwrap()).collect();
        let cfg = TrainConfig { learning_rate: 1e-2, epochs: 15, seed: 9, ..TrainConfig::default() };
        let a = train(&examples, &model, &cfg).unwrap();
        let b = train(&examples, &model, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.log.last().unwrap().mean_token_nll < a.log[0].mean_token_nll);
        let text = format_loss_log(&a.log);
        assert_eq!(text.lines().count(), 15);
        assert!(text.starts_with("1, "));
    }

    #[test]
    fn invalid_configs_rejected() {
        let model = tiny_model();
        let mut rng = SeededRng::new(5);
        let ex = vec![random_example(&model, 1, 2, &mut rng).unwrap()];
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train(&ex, &model, &bad).is_err());
        assert!(train(&[], &model, &TrainConfig::default()).is_err());
    }

    #[test]
    fn tiny_config_passes_for_every_variant() {
        for variant in Variant::ALL {
            let mut cfg = GradCheckConfig::tiny(1);
            cfg.model = cfg.model.with_variant(variant);
            let report = grad_check(&cfg).unwrap();
            let names: Vec<String> =
                FaeGenParams::zeros(&cfg.model).tensors().into_iter().map(|t| t.name).collect();
            let reported: Vec<String> = report.groups.iter().map(|g| g.name.clone()).collect();
            assert_eq!(reported, names);
            assert!(report.failures(1e-4).is_empty(), "{variant:?}\n{}", report.to_table());
        }
    }

    // Richardson-extrapolated differences at h = 1e-3 have a roundoff floor
    // two orders below the plain 1e-5 probe, so every entry can be held to
    // a tight mixed tolerance regardless of how small its gradient is.
    #[test]
    fn gradients_match_extrapolated_differences_in_all_modes() {
        for attention in [AttentionMode::Factored, AttentionMode::Plain, AttentionMode::MeanPool] {
            for embedding in [EmbeddingMode::Factored, EmbeddingMode::Shared] {
                for shape in [SigmaShape::Full, SigmaShape::Diagonal] {
                    let mut cfg = GradCheckConfig::tiny(3);
                    cfg.model.attention_mode = attention;
                    cfg.model.embedding_mode = embedding;
                    cfg.model.topic_factor_shape = shape;
                    let model = &cfg.model;
                    let mut params =
                        init_params_scaled(model, cfg.seed, cfg.weight_scale, cfg.sigma_noise).unwrap();
                    let mut rng = SeededRng::new(11);
                    let example = random_example(model, 3, 5, &mut rng).unwrap();
                    let mut analytic = FaeGenParams::zeros(model);
                    sample_loss_and_grads(&params, model, &example, &mut analytic).unwrap();
                    let analytic: Vec<(String, Vec<f64>)> = analytic
                        .tensors()
                        .into_iter()
                        .map(|t| (t.name, t.values.to_vec()))
                        .collect();
                    for (g, (name, values)) in analytic.iter().enumerate() {
                        for (i, &a) in values.iter().enumerate() {
                            let d1 = central_difference(&mut params, model, &example, g, i, 1e-3).unwrap();
                            let d2 = central_difference(&mut params, model, &example, g, i, 5e-4).unwrap();
                            let r = (4.0 * d2 - d1) / 3.0;
                            assert!(
                                (a - r).abs() <= 1e-6 * a.abs().max(r.abs()) + 1e-9,
                                "{attention:?}/{embedding:?}/{shape:?} {name}[{i}]: {a:e} vs {r:e}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn coarse_step_is_detected() {
        let mut cfg = GradCheckConfig::tiny(1);
        cfg.fd_step = 1e-1;
        let report = grad_check(&cfg).unwrap();
        assert!(!report.failures(1e-4).is_empty());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (2.0 + 1e-6)).abs() < 1e-15);
    }
}

