//! Siamese fine-tuning: tuples unrolled into pairs, gradients chained through
//! the ℓ2 normalization into the pooling layer and backbone, SGD/Adam with an
//! exponentially decaying rate, in-epoch hard-negative re-mining, reciprocal-
//! rank validation, and best-epoch model selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneGradients, ConvLayer, TinyFcn};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{
    contrastive_grad, contrastive_loss, triplet_grad, triplet_loss, LossConfig, PairLabel,
};
use crate::mining::{mine_negatives, Miner, MiningConfig, NegativeStrategy, TrainingTuple,
    VisibilityGraph};
use crate::numerics::{dot, l2_normalize, rng_from_parts, DescriptorTable, DescriptorVector};
use crate::pooling::{gem_backward_p, pool, pool_backward_x, PoolingConfig, PoolingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Triplet,
}

/// Everything held constant through a training run. The pooling exponents are
/// trained state and live in the [`Model`] instead.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_tuples: usize,
    pub epochs: usize,
    pub remine_per_epoch: usize,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn sgd() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            initial_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_tuples: 5,
            epochs: 30,
            remine_per_epoch: 3,
            loss: LossKind::Contrastive,
            loss_cfg: LossConfig::default(),
            seed: 0,
        }
    }

    pub fn adam() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            initial_lr: 1e-6,
            ..Self::sgd()
        }
    }
}

/// The trainable unit: backbone weights plus the pooling layer whose
/// exponents learn alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: TinyFcn,
    pub pooling: PoolingConfig,
}

impl Model {
    pub fn new(net: TinyFcn, pooling: PoolingConfig) -> Self {
        Self { net, pooling }
    }

    /// The ℓ2-normalized descriptor of one image.
    pub fn descriptor(&self, img: &Image) -> Result<DescriptorVector> {
        let (tensor, _) = self.net.forward(img)?;
        Ok(l2_normalize(&pool(&tensor, &self.pooling)?))
    }

    /// Descriptors for the given ids, resolved against the image table.
    pub fn descriptor_table(
        &self,
        images: &BTreeMap<u64, Image>,
        ids: &[u64],
    ) -> Result<DescriptorTable> {
        let mut table = DescriptorTable::new();
        for &id in ids {
            let img = images.get(&id).ok_or(Error::MissingImage(id))?;
            table.insert(id, self.descriptor(img)?);
        }
        Ok(table)
    }

    fn exponents_trainable(&self) -> bool {
        self.pooling.trainable && self.pooling.mode == PoolingMode::Gem
    }

    /// Conv weights and biases, then the pooling exponents when trainable.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.net.params();
        if self.exponents_trainable() {
            out.extend_from_slice(&self.pooling.exponents);
        }
        out
    }

    /// Inverse of [`Model::flat_params`]; exponents are projected back onto
    /// p ≥ 1 so no step can leave the average-to-max family.
    pub fn set_flat_params(&mut self, params: &[f64]) {
        let n = self.net.param_count();
        self.net.set_params(&params[..n]);
        if self.exponents_trainable() {
            for (e, v) in self.pooling.exponents.iter_mut().zip(&params[n..]) {
                *e = v.max(1.0);
            }
        }
    }

    /// True for entries weight decay applies to: conv weights, never biases
    /// or pooling exponents.
    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for layer in &self.net.layers {
            mask.extend(std::iter::repeat_n(true, layer.weights.len()));
            mask.extend(std::iter::repeat_n(false, layer.biases.len()));
        }
        if self.exponents_trainable() {
            mask.extend(std::iter::repeat_n(false, self.pooling.exponents.len()));
        }
        mask
    }
}

// The schedule fixes only the initial stepsize; these are the originally
// published Adam defaults.
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, step: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd { velocity: vec![0.0; param_count] },
            OptimizerKind::Adam => Self::Adam {
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
                step: 0,
            },
        }
    }

    fn apply(&mut self, momentum: f64, lr: f64, params: &mut [f64], grads: &[f64]) {
        match self {
            Self::Sgd { velocity } => {
                for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity) {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            Self::Adam { m, v, step } => {
                *step += 1;
                let bias1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for (((w, &g), mi), vi) in params.iter_mut().zip(grads).zip(m).zip(v) {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// l0·exp(−0.1·i) over epoch index i.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.initial_lr * (-0.1 * epoch as f64).exp()
}

/// One matching pair (query, positive), then one non-matching pair per
/// negative, in mining order.
pub fn tuple_to_pairs(t: &TrainingTuple) -> Vec<(u64, u64, PairLabel)> {
    let mut pairs = Vec::with_capacity(1 + t.negatives.len());
    pairs.push((t.query, t.positive, PairLabel::Matching));
    for &n in &t.negatives {
        pairs.push((t.query, n, PairLabel::NonMatching));
    }
    pairs
}

/// Jacobian-transpose product of x ↦ x/‖x‖:
/// (grad − (f̄ᵀ·grad)·f̄)/‖f‖ with f̄ = f/‖f‖.
pub fn normalize_backward(
    f: &DescriptorVector,
    grad_fbar: &DescriptorVector,
) -> Result<DescriptorVector> {
    if f.dim() != grad_fbar.dim() {
        return Err(Error::DimensionMismatch {
            context: "normalize_backward",
            left: f.dim(),
            right: grad_fbar.dim(),
        });
    }
    let norm = f.norm();
    if norm <= 1e-12 {
        return Err(Error::DegenerateNorm { norm });
    }
    let fbar: Vec<f64> = f.values.iter().map(|v| v / norm).collect();
    let radial = dot(&fbar, &grad_fbar.values);
    let values = grad_fbar
        .values
        .iter()
        .zip(&fbar)
        .map(|(g, b)| (g - radial * b) / norm)
        .collect();
    Ok(DescriptorVector::raw(values))
}

/// Data gradients of the mean per-tuple loss over a batch, before weight
/// decay and the optimizer.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub net: BackboneGradients,
    /// Matches the model's exponent vector; empty when p is not trained.
    pub exponents: Vec<f64>,
    pub loss: f64,
}

struct ImagePass {
    cache: crate::backbone::ForwardCache,
    tensor: crate::numerics::ActivationTensor,
    pooled: DescriptorVector,
    normalized: DescriptorVector,
}

fn forward_image(model: &Model, id: u64, images: &BTreeMap<u64, Image>) -> Result<ImagePass> {
    let img = images.get(&id).ok_or(Error::MissingImage(id))?;
    let (tensor, cache) = model.net.forward(img)?;
    let pooled = pool(&tensor, &model.pooling)?;
    let normalized = l2_normalize(&pooled);
    Ok(ImagePass { cache, tensor, pooled, normalized })
}

/// Forwards each tuple's images once, reuses the descriptors across the
/// tuple's pairs (or triplets), and backpropagates through normalization,
/// pooling, and the backbone. Loss and gradients are averaged over tuples.
pub fn compute_batch_gradients(
    model: &Model,
    cfg: &TrainConfig,
    images: &BTreeMap<u64, Image>,
    batch: &[TrainingTuple],
) -> Result<BatchGradients> {
    let n_exp = if model.exponents_trainable() { model.pooling.exponents.len() } else { 0 };
    let mut net_grad = BackboneGradients::zeros_like(&model.net);
    let mut exp_grad = vec![0.0; n_exp];
    let mut total_loss = 0.0;

    for tuple in batch {
        let mut passes = Vec::with_capacity(2 + tuple.negatives.len());
        passes.push(forward_image(model, tuple.query, images)?);
        passes.push(forward_image(model, tuple.positive, images)?);
        for &n in &tuple.negatives {
            passes.push(forward_image(model, n, images)?);
        }

        // Upstream gradient on each image's normalized descriptor.
        let dim = passes[0].normalized.dim();
        let mut gbar = vec![vec![0.0; dim]; passes.len()];
        match cfg.loss {
            LossKind::Contrastive => {
                for (at, pass) in passes.iter().enumerate().skip(1) {
                    let label = if at == 1 { PairLabel::Matching } else { PairLabel::NonMatching };
                    total_loss +=
                        contrastive_loss(&passes[0].normalized, &pass.normalized, label, &cfg.loss_cfg)?;
                    let (gq, go) =
                        contrastive_grad(&passes[0].normalized, &pass.normalized, label, &cfg.loss_cfg)?;
                    add_assign(&mut gbar[0], &gq.values);
                    add_assign(&mut gbar[at], &go.values);
                }
            }
            LossKind::Triplet => {
                for at in 2..passes.len() {
                    total_loss += triplet_loss(
                        &passes[0].normalized,
                        &passes[1].normalized,
                        &passes[at].normalized,
                        &cfg.loss_cfg,
                    )?;
                    let (gq, gp, gn) = triplet_grad(
                        &passes[0].normalized,
                        &passes[1].normalized,
                        &passes[at].normalized,
                        &cfg.loss_cfg,
                    )?;
                    add_assign(&mut gbar[0], &gq.values);
                    add_assign(&mut gbar[1], &gp.values);
                    add_assign(&mut gbar[at], &gn.values);
                }
            }
        }

        for (pass, g) in passes.iter().zip(&gbar) {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let grad_raw = normalize_backward(&pass.pooled, &DescriptorVector::raw(g.clone()))?;
            let grad_tensor = pool_backward_x(&pass.tensor, &model.pooling, &pass.pooled, &grad_raw)?;
            if n_exp > 0 {
                let gp = gem_backward_p(&pass.tensor, &model.pooling, &pass.pooled, &grad_raw)?;
                add_assign(&mut exp_grad, &gp);
            }
            net_grad.accumulate(&model.net.backward(&pass.cache, &grad_tensor)?);
        }
    }

    let scale = 1.0 / batch.len().max(1) as f64;
    net_grad.scale(scale);
    for g in &mut exp_grad {
        *g *= scale;
    }
    Ok(BatchGradients { net: net_grad, exponents: exp_grad, loss: total_loss * scale })
}

fn add_assign(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

/// The mean per-tuple loss alone, for finite-difference probes and reporting.
pub fn batch_loss(
    model: &Model,
    cfg: &TrainConfig,
    images: &BTreeMap<u64, Image>,
    batch: &[TrainingTuple],
) -> Result<f64> {
    let mut total = 0.0;
    for tuple in batch {
        let descriptor = |id: u64| -> Result<DescriptorVector> {
            let img = images.get(&id).ok_or(Error::MissingImage(id))?;
            model.descriptor(img)
        };
        let dq = descriptor(tuple.query)?;
        let dp = descriptor(tuple.positive)?;
        match cfg.loss {
            LossKind::Contrastive => {
                total += contrastive_loss(&dq, &dp, PairLabel::Matching, &cfg.loss_cfg)?;
                for &n in &tuple.negatives {
                    let dn = descriptor(n)?;
                    total += contrastive_loss(&dq, &dn, PairLabel::NonMatching, &cfg.loss_cfg)?;
                }
            }
            LossKind::Triplet => {
                for &n in &tuple.negatives {
                    let dn = descriptor(n)?;
                    total += triplet_loss(&dq, &dp, &dn, &cfg.loss_cfg)?;
                }
            }
        }
    }
    Ok(total / batch.len().max(1) as f64)
}

/// One optimizer step over a batch: data gradients, coupled weight decay on
/// conv weights only, the optimizer update, and the p ≥ 1 projection.
/// Returns the batch loss.
pub fn train_step(
    model: &mut Model,
    cfg: &TrainConfig,
    images: &BTreeMap<u64, Image>,
    batch: &[TrainingTuple],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let grads = compute_batch_gradients(model, cfg, images, batch)?;
    let mut params = model.flat_params();
    let mut flat = grads.net.flatten();
    flat.extend_from_slice(&grads.exponents);
    if cfg.weight_decay != 0.0 {
        for ((g, &keep), &w) in flat.iter_mut().zip(&model.decay_mask()).zip(&params) {
            if keep {
                *g += cfg.weight_decay * w;
            }
        }
    }
    state.apply(cfg.momentum, lr, &mut params, &flat);
    model.set_flat_params(&params);
    Ok(grads.loss)
}

/// Mean reciprocal rank of each tuple's positive among {positive ∪ negatives}
/// when ranked by similarity to the query (ties by ascending id). With one
/// relevant image per tuple this is exactly its average precision.
pub fn validate(
    model: &Model,
    images: &BTreeMap<u64, Image>,
    tuples: &[TrainingTuple],
) -> Result<f64> {
    if tuples.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let mut total = 0.0;
    for tuple in tuples {
        let descriptor = |id: u64| -> Result<(u64, DescriptorVector)> {
            let img = images.get(&id).ok_or(Error::MissingImage(id))?;
            Ok((id, model.descriptor(img)?))
        };
        let (_, dq) = descriptor(tuple.query)?;
        let positive = descriptor(tuple.positive)?;
        let negatives: Vec<(u64, DescriptorVector)> = tuple
            .negatives
            .iter()
            .map(|&n| descriptor(n))
            .collect::<Result<_>>()?;
        total += reciprocal_rank(&dq, &positive, &negatives);
    }
    Ok(total / tuples.len() as f64)
}

fn reciprocal_rank(
    query: &DescriptorVector,
    positive: &(u64, DescriptorVector),
    negatives: &[(u64, DescriptorVector)],
) -> f64 {
    let mut scored: Vec<(f64, u64)> = Vec::with_capacity(1 + negatives.len());
    scored.push((dot(&query.values, &positive.1.values), positive.0));
    for (id, d) in negatives {
        scored.push((dot(&query.values, &d.values), *id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let rank = scored.iter().position(|&(_, id)| id == positive.0).expect("positive present") + 1;
    1.0 / rank as f64
}

/// Everything a run records: the loss curve, the validation curve (index 0 is
/// the untrained model), the exponent trajectory, where re-mining happened,
/// and which validation index the retained model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub validation: Vec<f64>,
    pub exponents: Vec<Vec<f64>>,
    pub remine_batches: Vec<Vec<usize>>,
    pub selected_epoch: usize,
}

pub fn save_report(report: &TrainReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Training clusters get this share; the rest validate. The 551:162 split of
/// the full-size setup, reproduced proportionally.
const TRAIN_CLUSTER_SHARE: f64 = 551.0 / 713.0;

/// Fine-tunes the model on tuples mined from the graph. Clusters are split
/// disjointly into training and validation; every epoch re-draws queries,
/// re-mines negatives `remine_per_epoch` times at evenly spaced batch
/// boundaries with current descriptors, and steps over shuffled batches. The
/// model left in place is the one from the best validation epoch.
///
/// Validation tuples are fixed up front: every validation image with a valid
/// positive becomes a query, with negatives mined unrestricted (N1). The
/// one-per-cluster rule would need more validation clusters than negatives
/// per tuple, which desk-scale splits cannot offer.
/// The disjoint cluster split `fit` trains and validates on, seeded by the
/// training seed so evaluation harnesses can reconstruct which clusters were
/// held out.
pub fn cluster_split(
    g: &VisibilityGraph,
    seed: u64,
) -> Result<(BTreeSet<u64>, BTreeSet<u64>)> {
    let mut cluster_ids: Vec<u64> = g.clusters().keys().copied().collect();
    if cluster_ids.len() < 2 {
        return Err(Error::EmptyValidation);
    }
    let mut split_rng = rng_from_parts(&[seed, 0x73706c74]);
    cluster_ids.shuffle(&mut split_rng);
    let n_train = ((cluster_ids.len() as f64 * TRAIN_CLUSTER_SHARE).round() as usize)
        .clamp(1, cluster_ids.len() - 1);
    Ok((
        cluster_ids[..n_train].iter().copied().collect(),
        cluster_ids[n_train..].iter().copied().collect(),
    ))
}

pub fn fit(
    model: &mut Model,
    g: &VisibilityGraph,
    images: &BTreeMap<u64, Image>,
    cfg: &TrainConfig,
    mining: &MiningConfig,
) -> Result<TrainReport> {
    let (train_clusters, val_clusters) = cluster_split(g, cfg.seed)?;
    let train_graph = g.restricted_to_clusters(&train_clusters)?;
    let val_graph = g.restricted_to_clusters(&val_clusters)?;

    let train_ids: Vec<u64> = train_graph.images().map(|i| i.id).collect();
    let val_ids: Vec<u64> = val_graph.images().map(|i| i.id).collect();
    let initial_train_desc = model.descriptor_table(images, &train_ids)?;
    let initial_val_desc = model.descriptor_table(images, &val_ids)?;

    let miner = Miner::new(&train_graph, &initial_train_desc, mining.clone())?;
    let val_mining = MiningConfig {
        negative_strategy: NegativeStrategy::N1,
        ..mining.clone()
    };
    let val_miner = Miner::new(&val_graph, &initial_val_desc, val_mining.clone())?;
    let mut val_tuples = Vec::new();
    for &id in &val_ids {
        if let Some(p) = val_miner.positive_for(id) {
            let negatives = mine_negatives(&val_graph, id, &val_ids, &initial_val_desc, &val_mining)?;
            val_tuples.push(TrainingTuple { query: id, positive: p, negatives });
        }
    }
    if val_tuples.is_empty() {
        return Err(Error::EmptyValidation);
    }

    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        validation: vec![validate(model, images, &val_tuples)?],
        exponents: vec![model.pooling.exponents.clone()],
        remine_batches: Vec::with_capacity(cfg.epochs),
        selected_epoch: 0,
    };
    let mut best = model.clone();
    let mut state = OptimizerState::new(cfg.optimizer, model.flat_params().len());

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let plan = miner.epoch_plan(&train_graph, epoch as u64);
        if plan.queries.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let mut desc = model.descriptor_table(images, &plan.candidates)?;
        let mut tuples = Vec::with_capacity(plan.queries.len());
        for &q in &plan.queries {
            let negatives = mine_negatives(&train_graph, q, &plan.candidates, &desc, mining)?;
            let positive = miner.positive_for(q).expect("planned queries have positives");
            tuples.push(TrainingTuple { query: q, positive, negatives });
        }

        let mut order: Vec<usize> = (0..tuples.len()).collect();
        let mut shuffle_rng = rng_from_parts(&[cfg.seed, 0x73687566, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let n_batches = order.len().div_ceil(cfg.batch_tuples);

        // The epoch's first mining above counts as the event at batch 0.
        let events: BTreeSet<usize> = (0..cfg.remine_per_epoch)
            .map(|j| j * n_batches / cfg.remine_per_epoch.max(1))
            .collect();
        report.remine_batches.push(events.iter().copied().collect());

        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_tuples).enumerate() {
            if b > 0 && events.contains(&b) {
                desc = model.descriptor_table(images, &plan.candidates)?;
                for &at in &order[b * cfg.batch_tuples..] {
                    tuples[at].negatives =
                        mine_negatives(&train_graph, tuples[at].query, &plan.candidates, &desc, mining)?;
                }
            }
            let batch: Vec<TrainingTuple> = chunk.iter().map(|&at| tuples[at].clone()).collect();
            let loss = train_step(model, cfg, images, &batch, &mut state, lr)?;
            epoch_loss += loss * batch.len() as f64;
        }
        report.epoch_loss.push(epoch_loss / tuples.len() as f64);
        report.exponents.push(model.pooling.exponents.clone());

        let score = validate(model, images, &val_tuples)?;
        report.validation.push(score);
        if score > report.validation[report.selected_epoch] {
            report.selected_epoch = epoch + 1;
            best = model.clone();
        }
    }

    *model = best;
    Ok(report)
}

const MODEL_MAGIC: [u8; 4] = *b"GEMM";
const MODEL_VERSION: u32 = 1;

/// Writes the magic and version, the per-layer shapes with f32 weights, then
/// the pooling config. Exponents stay f64: they are single trained scalars
/// whose value the retrieval side reuses exactly.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.net.layers.len() as u32).to_le_bytes());
    for layer in &model.net.layers {
        for dim in [layer.kernel, layer.in_maps, layer.out_maps, layer.stride] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &w in &layer.weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &b in &layer.biases {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    out.push(match model.pooling.mode {
        PoolingMode::Max => 0,
        PoolingMode::Average => 1,
        PoolingMode::Gem => 2,
    });
    out.push(match model.pooling.sharing {
        crate::pooling::ExponentSharing::Shared => 0,
        crate::pooling::ExponentSharing::PerMap => 1,
    });
    out.push(model.pooling.trainable as u8);
    out.extend_from_slice(&(model.pooling.exponents.len() as u32).to_le_bytes());
    for &e in &model.pooling.exponents {
        out.extend_from_slice(&e.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Truncated { path: self.path.to_path_buf() });
        }
        let slice = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a "GEMM" checkpoint, rejecting bad magic, unknown versions,
/// truncation, and trailing bytes.
pub fn load_model(path: &Path) -> Result<Model> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 8 {
        return Err(Error::Truncated { path: path.to_path_buf() });
    }
    if data[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: MODEL_MAGIC });
    }
    let mut r = Reader { data: &data, at: 4, path };
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::BadVersion { path: path.to_path_buf(), version });
    }
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kernel = r.u32()? as usize;
        let in_maps = r.u32()? as usize;
        let out_maps = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let mut layer = ConvLayer::zeros(kernel, in_maps, out_maps);
        layer.stride = stride;
        for w in &mut layer.weights {
            *w = r.f32()?;
        }
        for b in &mut layer.biases {
            *b = r.f32()?;
        }
        layers.push(layer);
    }
    let mode = match r.u8()? {
        0 => PoolingMode::Max,
        1 => PoolingMode::Average,
        2 => PoolingMode::Gem,
        other => {
            return Err(Error::MalformedCheckpoint {
                path: path.to_path_buf(),
                message: format!("unknown pooling mode tag {other}"),
            })
        }
    };
    let sharing = match r.u8()? {
        0 => crate::pooling::ExponentSharing::Shared,
        1 => crate::pooling::ExponentSharing::PerMap,
        other => {
            return Err(Error::MalformedCheckpoint {
                path: path.to_path_buf(),
                message: format!("unknown exponent sharing tag {other}"),
            })
        }
    };
    let trainable = r.u8()? != 0;
    let n_exp = r.u32()? as usize;
    let mut exponents = Vec::with_capacity(n_exp);
    for _ in 0..n_exp {
        exponents.push(r.f64()?);
    }
    if r.at != data.len() {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            header: r.at,
            payload: data.len(),
        });
    }
    Ok(Model {
        net: TinyFcn { layers },
        pooling: PoolingConfig { mode, sharing, exponents, trainable },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{ImageNode, PointNode, PositiveStrategy};
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use crate::pooling::ExponentSharing;
    use rand::Rng;

    fn seeded_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rng_from_parts(&[seed, 0x696d67]);
        let mut img = Image::zeros(w, h, 1);
        for p in &mut img.pixels {
            *p = rng.random_range(0.0..1.0);
        }
        img
    }

    fn small_model(seed: u64) -> Model {
        Model::new(
            TinyFcn::seeded(1, &[(3, 2)], seed),
            PoolingConfig::gem_shared(3.0).unwrap(),
        )
    }

    fn one_tuple_images(seed: u64) -> BTreeMap<u64, Image> {
        (0..4).map(|id| (id, seeded_image(8, 8, seed * 100 + id))).collect()
    }

    fn one_tuple() -> TrainingTuple {
        TrainingTuple { query: 0, positive: 1, negatives: vec![2, 3] }
    }

    #[test]
    fn lr_decays_exponentially() {
        let sgd = TrainConfig::sgd();
        assert_eq!(lr_at_epoch(&sgd, 0), 1e-3);
        assert!((lr_at_epoch(&sgd, 10) - 1e-3 * (-1.0f64).exp()).abs() < 1e-18);
        let adam = TrainConfig::adam();
        assert!((lr_at_epoch(&adam, 30) - 1e-6 * (-3.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn tuples_unroll_into_labeled_pairs() {
        let five = TrainingTuple { query: 9, positive: 4, negatives: vec![1, 2, 3, 5, 6] };
        let pairs = tuple_to_pairs(&five);
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs[0], (9, 4, PairLabel::Matching));
        assert!(pairs[1..].iter().all(|&(q, _, l)| q == 9 && l == PairLabel::NonMatching));

        let none = TrainingTuple { query: 9, positive: 4, negatives: vec![] };
        assert_eq!(tuple_to_pairs(&none).len(), 1);

        let two = TrainingTuple { query: 9, positive: 4, negatives: vec![1, 2] };
        let labels: Vec<PairLabel> = tuple_to_pairs(&two).iter().map(|&(_, _, l)| l).collect();
        assert_eq!(
            labels,
            vec![PairLabel::Matching, PairLabel::NonMatching, PairLabel::NonMatching]
        );
    }

    #[test]
    fn normalize_backward_projects_out_the_radial_component() {
        let f = DescriptorVector::raw(vec![3.0, 0.0]);
        let parallel = normalize_backward(&f, &DescriptorVector::raw(vec![5.0, 0.0])).unwrap();
        assert!(parallel.values.iter().all(|v| v.abs() < 1e-15));

        let f2 = DescriptorVector::raw(vec![2.0, 0.0]);
        let ortho = normalize_backward(&f2, &DescriptorVector::raw(vec![0.0, 0.8])).unwrap();
        assert!((ortho.values[0]).abs() < 1e-15);
        assert!((ortho.values[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn normalize_backward_matches_finite_diff() {
        let f = DescriptorVector::raw(vec![0.4, -1.2, 0.7, 2.1]);
        let g = DescriptorVector::raw(vec![1.3, 0.2, -0.5, 0.9]);
        let analytic = normalize_backward(&f, &g).unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let n = l2_normalize(&DescriptorVector::raw(x.to_vec()));
                dot(&n.values, &g.values)
            },
            &f.values,
            1e-5,
        );
        assert!(max_rel_err(&analytic.values, &numeric) < 1e-4);
    }

    #[test]
    fn normalize_backward_rejects_near_zero_norm() {
        let f = DescriptorVector::raw(vec![1e-13, 0.0]);
        let g = DescriptorVector::raw(vec![1.0, 1.0]);
        assert!(matches!(
            normalize_backward(&f, &g),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn sgd_momentum_matches_hand_steps() {
        let mut state = OptimizerState::new(OptimizerKind::Sgd, 1);
        let mut params = vec![1.0];
        state.apply(0.9, 0.5, &mut params, &[0.2]);
        assert!((params[0] - 0.9).abs() < 1e-15);
        state.apply(0.9, 0.5, &mut params, &[0.2]);
        // velocity = 0.9*0.2 + 0.2 = 0.38, step = 0.19
        assert!((params[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_hand_update() {
        let mut state = OptimizerState::new(OptimizerKind::Adam, 1);
        let mut params = vec![1.0];
        state.apply(0.9, 0.1, &mut params, &[0.5]);
        let want = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + ADAM_EPS);
        assert!((params[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_reports_loss_but_changes_nothing() {
        let mut model = small_model(7);
        let before = model.flat_params();
        let images = one_tuple_images(7);
        let cfg = TrainConfig::sgd();
        let mut state = OptimizerState::new(cfg.optimizer, before.len());
        let loss =
            train_step(&mut model, &cfg, &images, &[one_tuple()], &mut state, 0.0).unwrap();
        assert!(loss > 0.0);
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn identical_matching_pair_is_a_zero_gradient_step() {
        let mut model = small_model(8);
        let img = seeded_image(8, 8, 77);
        let images: BTreeMap<u64, Image> = [(0, img.clone()), (1, img)].into();
        let tuple = TrainingTuple { query: 0, positive: 1, negatives: vec![] };
        let mut cfg = TrainConfig::sgd();
        cfg.weight_decay = 0.0;
        let before = model.flat_params();
        let mut state = OptimizerState::new(cfg.optimizer, before.len());
        let loss = train_step(&mut model, &cfg, &images, &[tuple], &mut state, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(model.flat_params(), before);
    }

    #[test]
    fn weight_decay_shrinks_weights_but_never_biases_or_p() {
        let mut model = small_model(9);
        for b in &mut model.net.layers[0].biases {
            *b = 0.25;
        }
        let img = seeded_image(8, 8, 78);
        let images: BTreeMap<u64, Image> = [(0, img.clone()), (1, img)].into();
        let tuple = TrainingTuple { query: 0, positive: 1, negatives: vec![] };
        let mut cfg = TrainConfig::sgd();
        cfg.weight_decay = 0.5;
        let weights_before = model.net.layers[0].weights.clone();
        let mut state = OptimizerState::new(cfg.optimizer, model.flat_params().len());
        train_step(&mut model, &cfg, &images, &[tuple], &mut state, 0.1).unwrap();
        // Data gradient is zero, so the only force is decay: w ← w(1 − lr·wd).
        for (after, before) in model.net.layers[0].weights.iter().zip(&weights_before) {
            assert!((after - before * 0.95).abs() < 1e-15);
        }
        assert!(model.net.layers[0].biases.iter().all(|b| *b == 0.25));
        assert_eq!(model.pooling.exponents, vec![3.0]);
    }

    #[test]
    fn composed_pipeline_gradient_matches_finite_diff() {
        let model = small_model(11);
        let images = one_tuple_images(11);
        let mut cfg = TrainConfig::sgd();
        cfg.weight_decay = 0.0;
        let batch = [one_tuple()];

        let grads = compute_batch_gradients(&model, &cfg, &images, &batch).unwrap();
        let mut analytic = grads.net.flatten();
        analytic.extend_from_slice(&grads.exponents);

        let point = model.flat_params();
        let numeric = finite_diff_grad(
            |params| {
                let mut probe = model.clone();
                probe.set_flat_params(params);
                batch_loss(&probe, &cfg, &images, &batch).unwrap()
            },
            &point,
            1e-5,
        );
        assert!(
            max_rel_err(&analytic, &numeric) < 1e-3,
            "max rel err {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn exponent_projection_keeps_p_at_least_one() {
        let mut model = small_model(12);
        let mut params = model.flat_params();
        let last = params.len() - 1;
        params[last] = 0.3;
        model.set_flat_params(&params);
        assert_eq!(model.pooling.exponents, vec![1.0]);

        let images = one_tuple_images(12);
        let cfg = TrainConfig::sgd();
        let mut state = OptimizerState::new(cfg.optimizer, model.flat_params().len());
        for _ in 0..5 {
            train_step(&mut model, &cfg, &images, &[one_tuple()], &mut state, 100.0).unwrap();
            assert!(model.pooling.exponents[0] >= 1.0);
        }
    }

    fn unit(values: Vec<f64>) -> DescriptorVector {
        l2_normalize(&DescriptorVector::raw(values))
    }

    #[test]
    fn reciprocal_rank_hand_cases() {
        let q = unit(vec![1.0, 0.0]);
        let pos = (10u64, unit(vec![1.0, 0.0]));
        let below: Vec<(u64, DescriptorVector)> =
            (0..5).map(|i| (i, unit(vec![0.1 * i as f64, 1.0]))).collect();
        assert_eq!(reciprocal_rank(&q, &pos, &below), 1.0);

        // One negative above the positive, four below: rank 2 of 6.
        let pos2 = (10u64, unit(vec![0.5, 0.0, 1.0]));
        let mut negs: Vec<(u64, DescriptorVector)> =
            (0..4).map(|i| (i, unit(vec![0.0, 1.0, 0.1 * i as f64]))).collect();
        negs.push((7, unit(vec![1.0, 0.2, 0.0])));
        let q2 = unit(vec![1.0, 0.0, 0.0]);
        assert_eq!(reciprocal_rank(&q2, &pos2, &negs), 0.5);

        // Ranks 1 and 4 across two tuples average to 0.625.
        let pos3 = (10u64, unit(vec![0.1, 1.0]));
        let negs3: Vec<(u64, DescriptorVector)> = (0..3)
            .map(|i| (i, unit(vec![0.5 + 0.1 * i as f64, 0.0])))
            .collect();
        let third = reciprocal_rank(&q, &pos3, &negs3);
        assert_eq!(third, 0.25);
        assert_eq!((reciprocal_rank(&q, &pos, &below) + third) / 2.0, 0.625);
    }

    #[test]
    fn validate_scores_perfect_retrieval_as_one() {
        let model = small_model(13);
        let shared = seeded_image(8, 8, 200);
        let mut images: BTreeMap<u64, Image> = [(0, shared.clone()), (1, shared)].into();
        for id in 2..5u64 {
            images.insert(id, seeded_image(8, 8, 300 + id));
        }
        let tuple = TrainingTuple { query: 0, positive: 1, negatives: vec![2, 3, 4] };
        let score = validate(&model, &images, &[tuple]).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn validate_rejects_empty_tuple_set() {
        let model = small_model(14);
        let images = BTreeMap::new();
        assert!(matches!(
            validate(&model, &images, &[]),
            Err(Error::EmptyValidation)
        ));
    }

    /// Eight clusters of five images each. Every image in a cluster observes
    /// all of the cluster's points, so any same-cluster image passes the
    /// overlap threshold; same-cluster images share a texture with per-image
    /// noise so descriptors carry cluster identity from the start.
    fn test_world(seed: u64) -> (VisibilityGraph, BTreeMap<u64, Image>) {
        let mut images = Vec::new();
        let mut points = Vec::new();
        let mut edges = Vec::new();
        let mut pixel_table = BTreeMap::new();
        for cluster in 0..8u64 {
            let base = seeded_image(16, 16, seed * 1000 + cluster);
            for k in 0..6u64 {
                points.push(PointNode {
                    id: cluster * 10 + k,
                    xyz: [cluster as f64 * 100.0 + k as f64, 0.0, 0.0],
                });
            }
            for j in 0..5u64 {
                let id = cluster * 100 + j;
                let camera = [
                    cluster as f64 * 100.0 + 2.5 + 0.3 * j as f64,
                    5.0,
                    0.0,
                ];
                images.push(ImageNode {
                    id,
                    cluster,
                    camera,
                    file: format!("{id}.pgm"),
                });
                for k in 0..6u64 {
                    edges.push((id, cluster * 10 + k));
                }
                let mut img = base.clone();
                let mut rng = rng_from_parts(&[seed, 0x6e6f6973, id]);
                for p in &mut img.pixels {
                    *p = (*p + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
                }
                pixel_table.insert(id, img);
            }
        }
        let g = VisibilityGraph::new(images, points, edges).unwrap();
        (g, pixel_table)
    }

    fn test_mining(seed: u64) -> MiningConfig {
        MiningConfig {
            negatives_per_tuple: 3,
            positive_strategy: PositiveStrategy::M3,
            negative_strategy: NegativeStrategy::N1,
            seed,
            ..MiningConfig::default()
        }
    }

    fn test_train_config(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::sgd();
        cfg.epochs = 2;
        cfg.batch_tuples = 2;
        cfg.remine_per_epoch = 2;
        cfg.seed = seed;
        cfg
    }

    fn test_model(seed: u64) -> Model {
        Model::new(
            TinyFcn::seeded(1, &[(3, 4), (3, 4)], seed),
            PoolingConfig::gem_shared(3.0).unwrap(),
        )
    }

    #[test]
    fn fit_with_zero_epochs_reports_only_the_initial_score() {
        let (g, images) = test_world(20);
        let mut model = test_model(20);
        let before = model.clone();
        let mut cfg = test_train_config(20);
        cfg.epochs = 0;
        let report = fit(&mut model, &g, &images, &cfg, &test_mining(20)).unwrap();
        assert_eq!(report.validation.len(), 1);
        assert!(report.epoch_loss.is_empty());
        assert!(report.remine_batches.is_empty());
        assert_eq!(report.selected_epoch, 0);
        assert_eq!(report.exponents, vec![vec![3.0]]);
        assert_eq!(model, before);
    }

    #[test]
    fn fit_is_deterministic_and_keeps_the_best_epoch() {
        let (g, images) = test_world(21);
        let cfg = test_train_config(21);
        let mining = test_mining(21);

        let mut first = test_model(21);
        let report_a = fit(&mut first, &g, &images, &cfg, &mining).unwrap();
        let mut second = test_model(21);
        let report_b = fit(&mut second, &g, &images, &cfg, &mining).unwrap();

        assert_eq!(report_a, report_b);
        assert_eq!(first, second);
        assert_eq!(report_a.validation.len(), 3);
        assert_eq!(report_a.epoch_loss.len(), 2);
        let best = report_a.validation[report_a.selected_epoch];
        assert!(report_a.validation.iter().all(|v| *v <= best));
        let json_a = serde_json::to_string(&report_a).unwrap();
        let json_b = serde_json::to_string(&report_b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn fit_without_remining_keeps_epoch_negatives_fixed() {
        let (g, images) = test_world(22);
        let mut model = test_model(22);
        let mut cfg = test_train_config(22);
        cfg.epochs = 1;
        cfg.remine_per_epoch = 0;
        let report = fit(&mut model, &g, &images, &cfg, &test_mining(22)).unwrap();
        assert_eq!(report.remine_batches, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn fit_requires_at_least_two_clusters() {
        let (g, images) = test_world(23);
        let keep: BTreeSet<u64> = [0].into_iter().collect();
        let only = g.restricted_to_clusters(&keep).unwrap();
        let mut model = test_model(23);
        assert!(matches!(
            fit(&mut model, &only, &images, &test_train_config(23), &test_mining(23)),
            Err(Error::EmptyValidation)
        ));
    }

    #[test]
    fn checkpoint_round_trips_within_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gemm");
        let model = Model::new(
            TinyFcn::seeded(3, &[(3, 4), (5, 2)], 31),
            PoolingConfig::gem_per_map(vec![1.5, 2.5]).unwrap(),
        );
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.net.layers.len(), 2);
        assert_eq!(loaded.net.layers[1].kernel, 5);
        assert_eq!(loaded.pooling.sharing, ExponentSharing::PerMap);
        assert_eq!(loaded.pooling.exponents, vec![1.5, 2.5]);
        assert!(loaded.pooling.trainable);
        for (a, b) in model.net.params().iter().zip(loaded.net.params()) {
            assert!((a - b).abs() < 1e-6);
        }

        let again = dir.path().join("m2.gemm");
        save_model(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_loader_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();

        let magic = dir.path().join("magic.gemm");
        fs::write(&magic, b"XEMM\x01\0\0\0").unwrap();
        assert!(matches!(load_model(&magic), Err(Error::BadMagic { .. })));

        let version = dir.path().join("version.gemm");
        let mut data = b"GEMM".to_vec();
        data.extend_from_slice(&9u32.to_le_bytes());
        data.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&version, data).unwrap();
        assert!(matches!(
            load_model(&version),
            Err(Error::BadVersion { version: 9, .. })
        ));

        let short = dir.path().join("short.gemm");
        let mut data = b"GEMM".to_vec();
        data.extend_from_slice(&1u32.to_le_bytes());
        data.extend_from_slice(&1u32.to_le_bytes());
        fs::write(&short, data).unwrap();
        assert!(matches!(load_model(&short), Err(Error::Truncated { .. })));

        let model = small_model(32);
        let good = dir.path().join("good.gemm");
        save_model(&model, &good).unwrap();
        let mut data = fs::read(&good).unwrap();
        data.push(0);
        let trailing = dir.path().join("trailing.gemm");
        fs::write(&trailing, data).unwrap();
        assert!(matches!(
            load_model(&trailing),
            Err(Error::PayloadSizeMismatch { .. })
        ));
    }

    #[test]
    fn report_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = TrainReport {
            epoch_loss: vec![0.5, 0.25],
            validation: vec![0.4, 0.6, 0.55],
            exponents: vec![vec![3.0], vec![2.9], vec![2.8]],
            remine_batches: vec![vec![0, 1], vec![0, 1]],
            selected_epoch: 1,
        };
        save_report(&report, &path).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
    }
}
