//! Joint training of the hash and classification streams by mini-batch SGD.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::loss::{softmax_logit_grad, softmax_xent_loss, triplet_grads, triplet_loss, LossConfig, Triplet};
use crate::model::{outer_add, Dataset, HashActivation, ModelParams, MultiHot, ParamKind};

const SAMPLING_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub margin: f64,
    /// Weight of the classification loss relative to the triplet loss.
    pub loss_balance: f64,
    pub seed: u64,
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    /// When false the class-wise weights stay frozen (unweighted baseline).
    pub train_class_weights: bool,
    /// Apply weight decay to the class-wise weights too.
    pub class_weight_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            initial_lr: 0.001,
            lr_drop_factor: 10.0,
            lr_drop_every: 2_000,
            weight_decay: 0.0005,
            max_steps: 10_000,
            margin: 1.0,
            loss_balance: 1.0,
            seed: 0,
            convergence_window: 500,
            convergence_tolerance: 1e-6,
            train_class_weights: true,
            class_weight_decay: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: learning rate drops every 20,000 steps.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr_drop_every: 20_000,
            max_steps: 100_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return fail(format!("train.initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return fail(format!("train.lr_drop_factor must be >= 1, got {}", self.lr_drop_factor));
        }
        if self.lr_drop_every == 0 {
            return fail("train.lr_drop_every must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("train.margin must be positive, got {}", self.margin));
        }
        if !(self.loss_balance >= 0.0 && self.loss_balance.is_finite()) {
            return fail(format!("train.loss_balance must be >= 0, got {}", self.loss_balance));
        }
        if self.convergence_window == 0 {
            return fail("train.convergence_window must be at least 1".into());
        }
        if self.convergence_tolerance.is_nan() || self.convergence_tolerance < 0.0 {
            return fail("train.convergence_tolerance must be >= 0".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { margin: self.margin }
    }

    /// Step learning rate: `initial_lr / factor^floor(step / every)`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let drops = (step / self.lr_drop_every) as i32;
        self.initial_lr / self.lr_drop_factor.powi(drops)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub triplet_loss: f64,
    pub class_loss: f64,
    pub lr: f64,
    pub active_fraction: f64,
}

impl StepRecord {
    pub fn combined(&self, loss_balance: f64) -> f64 {
        self.triplet_loss + loss_balance * self.class_loss
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub final_step: usize,
    pub converged: bool,
}

/// Draws triplets whose anchor/positive share a label and anchor/negative
/// share none.
///
/// Items are grouped by label set so that the candidate lists for each
/// distinct label set are computed once.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    group_of: Vec<usize>,
    /// Per label set: (items sharing a label, items sharing none), ascending.
    groups: Vec<(Vec<usize>, Vec<usize>)>,
}

impl TripletSampler {
    pub fn new(dataset: &Dataset) -> Self {
        let mut index: BTreeMap<&MultiHot, usize> = BTreeMap::new();
        let mut groups = Vec::new();
        let mut group_of = Vec::with_capacity(dataset.num_items());
        for label in dataset.labels() {
            let next = index.len();
            let g = *index.entry(label).or_insert_with(|| {
                let (pos, neg): (Vec<usize>, Vec<usize>) =
                    (0..dataset.num_items()).partition(|&j| dataset.label(j).intersects(label));
                groups.push((pos, neg));
                next
            });
            group_of.push(g);
        }
        TripletSampler { group_of, groups }
    }

    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Triplet>> {
        let n = self.group_of.len();
        if n == 0 {
            return Err(Error::Sampling("dataset is empty".into()));
        }
        (0..batch_size).map(|_| self.sample_one(n, rng)).collect()
    }

    fn sample_one<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Triplet> {
        for _ in 0..SAMPLING_RETRIES {
            let anchor = rng.gen_range(0..n);
            let (pos, neg) = &self.groups[self.group_of[anchor]];
            if pos.len() < 2 || neg.is_empty() {
                continue;
            }
            // uniform over sharers other than the anchor itself
            let own = pos.binary_search(&anchor).expect("anchor shares its own labels");
            let mut u = rng.gen_range(0..pos.len() - 1);
            if u >= own {
                u += 1;
            }
            let negative = neg[rng.gen_range(0..neg.len())];
            return Ok(Triplet {
                anchor,
                positive: pos[u],
                negative,
            });
        }
        Err(Error::Sampling(format!(
            "no anchor with both a positive and a negative after {SAMPLING_RETRIES} draws"
        )))
    }
}

/// Samples `batch_size` triplets from `dataset`.
pub fn sample_triplets<R: Rng>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<Vec<Triplet>> {
    TripletSampler::new(dataset).sample(batch_size, rng)
}

/// Gradients and losses of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub grads: ModelParams,
    /// Mean triplet loss over the batch.
    pub triplet_loss: f64,
    /// Mean softmax loss over the 3 x batch member slots.
    pub class_loss: f64,
    pub active_fraction: f64,
}

struct ItemState {
    trace: crate::model::FeatureTrace,
    hash: HashActivation,
    logits: Array1<f64>,
    d_hash: Array1<f64>,
    d_logits: Array1<f64>,
}

/// Loss and full-network gradients of
/// `mean triplet loss + loss_balance * mean softmax loss` over a batch.
///
/// The softmax term averages over every member slot of every triplet, so a
/// batch of `t` triplets contributes `3t` classification terms.
pub fn backward_full(
    params: &ModelParams,
    dataset: &Dataset,
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<BatchGradients> {
    if triplets.is_empty() {
        return Err(Error::EmptyInput("triplet batch".into()));
    }
    check_len("dataset feature dim", params.input_dim(), dataset.feature_dim())?;
    check_len("dataset classes", params.num_classes(), dataset.num_classes())?;
    let n = dataset.num_items();
    let (q, c) = (params.code_length(), params.num_classes());

    let mut items: BTreeMap<usize, ItemState> = BTreeMap::new();
    for t in triplets {
        for idx in [t.anchor, t.positive, t.negative] {
            if idx >= n {
                return Err(Error::OutOfRange { index: idx, len: n });
            }
            if items.contains_key(&idx) {
                continue;
            }
            let trace = params.forward_features_traced(dataset.feature(idx))?;
            let f = trace.output().view();
            let hash = params.forward_hash(f)?;
            let logits = params.class_logits(f)?;
            items.insert(
                idx,
                ItemState {
                    trace,
                    hash,
                    logits,
                    d_hash: Array1::zeros(q),
                    d_logits: Array1::zeros(c),
                },
            );
        }
    }

    let loss_cfg = cfg.loss_config();
    let mut grads = params.zeros_like();
    let t_scale = 1.0 / triplets.len() as f64;
    let c_scale = cfg.loss_balance / (3 * triplets.len()) as f64;
    let mut triplet_total = 0.0;
    let mut class_total = 0.0;
    let mut active = 0usize;

    for t in triplets {
        let anchor_label = dataset.label(t.anchor);
        let w_row = params.class_weight_row(anchor_label)?;
        let (ha, hp, hn) = (&items[&t.anchor].hash, &items[&t.positive].hash, &items[&t.negative].hash);
        let loss = triplet_loss(&loss_cfg, w_row.view(), ha, hp, hn)?;
        triplet_total += loss;
        if loss > 0.0 {
            active += 1;
            let g = triplet_grads(&loss_cfg, w_row.view(), ha, hp, hn, anchor_label)?;
            items.get_mut(&t.anchor).unwrap().d_hash.scaled_add(t_scale, &g.d_anchor);
            items.get_mut(&t.positive).unwrap().d_hash.scaled_add(t_scale, &g.d_positive);
            items.get_mut(&t.negative).unwrap().d_hash.scaled_add(t_scale, &g.d_negative);
            if cfg.train_class_weights {
                grads.class_weights.scaled_add(t_scale, &g.d_weights);
            }
        }
        for idx in [t.anchor, t.positive, t.negative] {
            let label = dataset.label(idx);
            let state = items.get_mut(&idx).unwrap();
            class_total += softmax_xent_loss(state.logits.view(), label)?;
            if c_scale != 0.0 {
                let g = softmax_logit_grad(state.logits.view(), label)?;
                state.d_logits.scaled_add(c_scale, &g);
            }
        }
    }

    for state in items.into_values() {
        let f = state.trace.output();
        let h = state.hash.values();
        let d_z_hash = &state.d_hash * &h.mapv(|v| v * (1.0 - v));
        outer_add(&mut grads.hash_weight, f.view(), d_z_hash.view());
        grads.hash_bias += &d_z_hash;
        outer_add(&mut grads.classifier_weight, f.view(), state.d_logits.view());
        grads.classifier_bias += &state.d_logits;
        if !params.feature_layers.is_empty() {
            let d_f = params.hash_weight.dot(&d_z_hash) + params.classifier_weight.dot(&state.d_logits);
            params.backward_features(&state.trace, d_f, &mut grads);
        }
    }

    Ok(BatchGradients {
        grads,
        triplet_loss: triplet_total * t_scale,
        class_loss: class_total / (3 * triplets.len()) as f64,
        active_fraction: active as f64 * t_scale,
    })
}

/// One SGD update with weight decay, followed by projection of the
/// class-wise weights onto the nonnegative orthant.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, step: usize, cfg: &TrainConfig) -> Result<()> {
    let lr = cfg.learning_rate(step);
    let grad_tensors = grads.tensors();
    for (param, grad) in params.tensors_mut().into_iter().zip(grad_tensors) {
        check_len("gradient tensor", param.data.len(), grad.data.len())?;
        if grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                what: format!("non-finite gradient in {}", param.kind.name()),
            });
        }
        let is_class_weights = param.kind == ParamKind::ClassWeights;
        if is_class_weights && !cfg.train_class_weights {
            continue;
        }
        let decay = if is_class_weights && !cfg.class_weight_decay {
            0.0
        } else {
            cfg.weight_decay
        };
        for (p, &g) in param.data.iter_mut().zip(grad.data) {
            *p -= lr * (g + decay * *p);
            if is_class_weights {
                *p = p.max(0.0);
            }
            if !p.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("non-finite parameter in {}", param.kind.name()),
                });
            }
        }
    }
    Ok(())
}

/// Runs training and returns the updated parameters.
pub fn train(params: &ModelParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    train_with_hook(params, dataset, cfg, |_, _| {})
}

/// Like [`train`], calling `hook(step, params)` after every update.
pub fn train_with_hook<F>(
    params: &ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<(ModelParams, TrainReport)>
where
    F: FnMut(usize, &ModelParams),
{
    cfg.validate()?;
    params.check_consistent()?;
    check_len("dataset feature dim", params.input_dim(), dataset.feature_dim())?;
    check_len("dataset classes", params.num_classes(), dataset.num_classes())?;

    let mut params = params.clone();
    let mut report = TrainReport::default();
    if cfg.max_steps == 0 {
        return Ok((params, report));
    }
    let sampler = TripletSampler::new(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let window = cfg.convergence_window;

    for step in 0..cfg.max_steps {
        let triplets = sampler.sample(cfg.batch_size, &mut rng)?;
        let batch = backward_full(&params, dataset, &triplets, cfg)?;
        if !batch.triplet_loss.is_finite() || !batch.class_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "non-finite loss".into(),
            });
        }
        report.steps.push(StepRecord {
            step,
            triplet_loss: batch.triplet_loss,
            class_loss: batch.class_loss,
            lr: cfg.learning_rate(step),
            active_fraction: batch.active_fraction,
        });
        sgd_step(&mut params, &batch.grads, step, cfg)?;
        hook(step, &params);
        report.final_step = step + 1;

        let seen = report.steps.len();
        if seen >= 2 * window {
            let mean = |records: &[StepRecord]| {
                records.iter().map(|r| r.combined(cfg.loss_balance)).sum::<f64>() / records.len() as f64
            };
            let recent = mean(&report.steps[seen - window..]);
            let previous = mean(&report.steps[seen - 2 * window..seen - window]);
            if (recent - previous).abs() < cfg.convergence_tolerance {
                report.converged = true;
                break;
            }
        }
    }
    Ok((params, report))
}
