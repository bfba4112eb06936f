//! Contrastive training over (query, positive, negatives) tuples with Adam.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::Descriptor;
use crate::error::{AsdaError, Result};
use crate::feature::ImageTensor;
use crate::model::{Gradients, Model};

pub const DEFAULT_MARGIN: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Exponential decay rate: the learning rate at epoch i is `lr·e^(−decay·i)`.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub negatives: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-6,
            lr_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
            margin: DEFAULT_MARGIN,
            batch_size: 5,
            negatives: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(AsdaError::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(self.margin > 0.0) {
            return Err(AsdaError::InvalidConfig("margin must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(AsdaError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.negatives == 0 {
            return Err(AsdaError::InvalidConfig("batch size and negative count must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || self.lr_decay < 0.0 {
            return Err(AsdaError::InvalidConfig("decay terms must be >= 0".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (-self.lr_decay * epoch as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTuple {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Images with instance labels; tuples index into `images`.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub images: Vec<&'a ImageTensor>,
    pub labels: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(q: &Descriptor, p: &Descriptor, negatives: &[&Descriptor]) -> Result<()> {
    if p.dim() != q.dim() || negatives.iter().any(|n| n.dim() != q.dim()) {
        return Err(AsdaError::ShapeMismatch("descriptors in a tuple differ in dimension".into()));
    }
    Ok(())
}

/// `‖q−p‖² + Σ_n max(0, τ − ‖q−n‖)²`.
pub fn contrastive_loss(q: &Descriptor, p: &Descriptor, negatives: &[&Descriptor], margin: f64) -> Result<f64> {
    check_dims(q, p, negatives)?;
    let positive = sq_dist(q.values(), p.values());
    let hinge: f64 = negatives
        .iter()
        .map(|n| (margin - sq_dist(q.values(), n.values()).sqrt()).max(0.0).powi(2))
        .sum();
    Ok(positive + hinge)
}

pub(crate) struct TupleGradient {
    pub loss: f64,
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub active: Vec<bool>,
}

pub(crate) fn contrastive_loss_grad(q: &[f64], p: &[f64], negatives: &[&[f64]], margin: f64) -> TupleGradient {
    let mut dq: Vec<f64> = q.iter().zip(p).map(|(a, b)| 2.0 * (a - b)).collect();
    let dp: Vec<f64> = dq.iter().map(|v| -v).collect();
    let mut loss = sq_dist(q, p);
    let mut dns = Vec::with_capacity(negatives.len());
    let mut active = Vec::with_capacity(negatives.len());
    for n in negatives {
        let d = sq_dist(q, n).sqrt();
        let h = margin - d;
        let mut dn = vec![0.0; q.len()];
        if h > 0.0 {
            loss += h * h;
            if d > 0.0 {
                let coef = -2.0 * h / d;
                for j in 0..q.len() {
                    let g = coef * (q[j] - n[j]);
                    dq[j] += g;
                    dn[j] = -g;
                }
            }
        }
        active.push(h > 0.0);
        dns.push(dn);
    }
    TupleGradient {
        loss,
        query: dq,
        positive: dp,
        negatives: dns,
        active,
    }
}

/// One tuple per image whose instance has another view, with a random
/// positive view and `negatives` distinct images of other instances.
pub fn build_tuples(labels: &[usize], negatives: usize, seed: u64) -> Result<Vec<TrainingTuple>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let multi_view = by_label.values().filter(|v| v.len() >= 2).count();
    if by_label.len() < 2 || multi_view < 1 {
        return Err(AsdaError::InsufficientData(format!(
            "need >= 2 instances and a multi-view instance, got {} instances ({} with >= 2 views)",
            by_label.len(),
            multi_view
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples = Vec::new();
    for (label, views) in &by_label {
        if views.len() < 2 {
            continue;
        }
        let others: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] != *label).collect();
        if others.len() < negatives {
            return Err(AsdaError::InsufficientData(format!(
                "instance {label} has only {} candidate negatives, {negatives} requested",
                others.len()
            )));
        }
        for &q in views {
            let candidates: Vec<usize> = views.iter().copied().filter(|v| *v != q).collect();
            let positive = *candidates.choose(&mut rng).expect("at least one other view");
            let negs = others.choose_multiple(&mut rng, negatives).copied().collect();
            tuples.push(TrainingTuple {
                query: q,
                positive,
                negatives: negs,
            });
        }
    }
    tuples.shuffle(&mut rng);
    Ok(tuples)
}

/// Mean batch loss and its exact gradient with respect to every parameter
/// tensor of `model`.
pub fn compute_gradients(model: &Model, set: &TrainingSet<'_>, batch: &[TrainingTuple], margin: f64) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(AsdaError::Invalid("empty batch".into()));
    }
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    for t in batch {
        for i in std::iter::once(t.query).chain(std::iter::once(t.positive)).chain(t.negatives.iter().copied()) {
            if i >= set.images.len() {
                return Err(AsdaError::Invalid(format!("tuple references image {i} outside the set")));
            }
            let next = slots.len();
            slots.entry(i).or_insert(next);
        }
    }
    let order: Vec<usize> = {
        let mut o = vec![0; slots.len()];
        for (img, slot) in &slots {
            o[*slot] = *img;
        }
        o
    };
    let passes = order
        .par_iter()
        .map(|&i| model.forward(set.images[i]))
        .collect::<Result<Vec<_>>>()?;
    let dim = model.dim();
    let mut d_desc = vec![vec![0.0; dim]; passes.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for t in batch {
        let q = passes[slots[&t.query]].descriptor().values();
        let p = passes[slots[&t.positive]].descriptor().values();
        let negs: Vec<&[f64]> = t
            .negatives
            .iter()
            .map(|n| passes[slots[n]].descriptor().values())
            .collect();
        let g = contrastive_loss_grad(q, p, &negs, margin);
        loss += g.loss * scale;
        let add = |dst: &mut Vec<f64>, src: &[f64]| {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b * scale;
            }
        };
        add(&mut d_desc[slots[&t.query]], &g.query);
        add(&mut d_desc[slots[&t.positive]], &g.positive);
        for ((n, dn), active) in t.negatives.iter().zip(&g.negatives).zip(&g.active) {
            if *active {
                add(&mut d_desc[slots[n]], dn);
            }
        }
    }
    if !loss.is_finite() {
        return Err(AsdaError::NonFinite { stage: "loss" });
    }
    let partial: Vec<Gradients> = passes
        .par_iter()
        .zip(&d_desc)
        .map(|(pass, d)| {
            let mut g = model.zero_gradients();
            if d.iter().any(|v| *v != 0.0) {
                model.backward(pass, d, &mut g);
            }
            g
        })
        .collect();
    let mut total = model.zero_gradients();
    for g in &partial {
        total.add_assign(g);
    }
    if total.tensors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AsdaError::NonFinite { stage: "gradients" });
    }
    Ok((loss, total))
}

/// Mean loss over `tuples` without gradients.
pub fn evaluate_loss(model: &Model, set: &TrainingSet<'_>, tuples: &[TrainingTuple], margin: f64) -> Result<f64> {
    if tuples.is_empty() {
        return Err(AsdaError::Invalid("no tuples to evaluate".into()));
    }
    let descriptors = set
        .images
        .par_iter()
        .map(|img| model.describe_image(img))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for t in tuples {
        let negs: Vec<&Descriptor> = t.negatives.iter().map(|n| &descriptors[*n]).collect();
        total += contrastive_loss(&descriptors[t.query], &descriptors[t.positive], &negs, margin)?;
    }
    Ok(total / tuples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &OptimizerConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let mask = model.trainable_mask();
    for (i, param) in model.tensors_mut().into_iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let g = &grads.tensors[i];
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..param.len() {
            let gj = g[j] + cfg.weight_decay * param[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            param[j] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model);
        TrainState {
            model,
            adam,
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `epochs` further epochs. `on_epoch` sees the state after each good
/// epoch (checkpointing hook). On divergence the state is rolled back to the
/// start of the failing epoch and an error is returned.
pub fn train<F>(
    state: &mut TrainState,
    train_set: &TrainingSet<'_>,
    val_set: Option<&TrainingSet<'_>>,
    cfg: &OptimizerConfig,
    epochs: usize,
    seed: u64,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    let val_tuples = match val_set {
        Some(v) => Some(build_tuples(&v.labels, cfg.negatives, seed ^ 0x5A5A)?),
        None => None,
    };
    let mut metrics = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = state.epoch;
        let lr = cfg.learning_rate_at(epoch);
        let snapshot = (state.model.clone(), state.adam.clone());
        let tuples = build_tuples(&train_set.labels, cfg.negatives, epoch_seed(seed, epoch))?;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let outcome: Result<()> = (|| {
            for batch in tuples.chunks(cfg.batch_size) {
                let (loss, grads) = compute_gradients(&state.model, train_set, batch, cfg.margin)?;
                adam_step(&mut state.model, &grads, &mut state.adam, lr, cfg);
                if state.model.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                    return Err(AsdaError::NonFinite { stage: "parameters" });
                }
                loss_sum += loss;
                batches += 1;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            state.model = snapshot.0;
            state.adam = snapshot.1;
            return Err(AsdaError::Diverged {
                epoch,
                reason: e.to_string(),
            });
        }
        let val_loss = match (val_set, &val_tuples) {
            (Some(v), Some(t)) => Some(evaluate_loss(&state.model, v, t, cfg.margin)?),
            _ => None,
        };
        state.epoch += 1;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
        };
        log::info!(
            "epoch {} lr {:.3e} train {:.5} val {}",
            epoch,
            lr,
            m.train_loss,
            m.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );
        on_epoch(state, &m)?;
        metrics.push(m);
    }
    Ok(metrics)
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_loss";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_loss.map_or(String::new(), |v| format!("{v:?}"));
        format!("{},{:?},{:?},{}", self.epoch, self.lr, self.train_loss, val)
    }
}

pub fn write_metrics_csv<W: std::io::Write>(metrics: &[EpochMetrics], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}
