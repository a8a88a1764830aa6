//! SGD with momentum over image batches, in MIL or per-instance mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{labels_to_tensor, Corpus, Sample};
use crate::error::{Error, Result};
use crate::layers::Roi;
use crate::loss::{mil_max_aggregate, softmax_ce, weighted_bce_with_logits, LossGrad, LossWeights};
use crate::model::{Gradients, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossMode {
    WeightedBce {
        positive: f64,
        negative: f64,
    },
    PlainBce,
    /// Single-label images; the label is the image's one positive class.
    SoftmaxCe,
}

impl LossMode {
    pub fn weighted_default() -> Self {
        LossMode::WeightedBce {
            positive: 10.0,
            negative: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSupervision {
    /// Image labels, max over people.
    Mil,
    /// One label vector per box, mean over the image's boxes.
    PerInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub total_iters: usize,
    pub batch_images: usize,
    pub max_boxes_per_image: usize,
    pub loss_mode: LossMode,
    pub supervision: TrainSupervision,
    pub seed: u64,
}

impl TrainConfig {
    /// Image-level protocol at full length.
    pub fn hico_full() -> Self {
        Self {
            lr: 1e-5,
            lr_decay_factor: 0.1,
            lr_decay_every: 30_000,
            momentum: 0.9,
            total_iters: 60_000,
            batch_images: 10,
            max_boxes_per_image: 6,
            loss_mode: LossMode::weighted_default(),
            supervision: TrainSupervision::Mil,
            seed: 0,
        }
    }

    /// Single-label, per-instance protocol at full length.
    pub fn mpii_full() -> Self {
        Self {
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 12_000,
            total_iters: 40_000,
            loss_mode: LossMode::SoftmaxCe,
            supervision: TrainSupervision::PerInstance,
            ..Self::hico_full()
        }
    }

    /// Same schedule shape as [`TrainConfig::hico_full`], sized for the
    /// synthetic corpora and a randomly initialised backbone.
    pub fn hico_desk() -> Self {
        Self {
            lr: 0.004,
            lr_decay_every: 750,
            total_iters: 1500,
            ..Self::hico_full()
        }
    }

    pub fn mpii_desk() -> Self {
        Self {
            lr: 0.01,
            lr_decay_every: 600,
            total_iters: 1200,
            ..Self::mpii_full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "hico_full" => Ok(Self::hico_full()),
            "mpii_full" => Ok(Self::mpii_full()),
            "hico_desk" => Ok(Self::hico_desk()),
            "mpii_desk" => Ok(Self::mpii_desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_images == 0 {
            return bad("batch_images must be at least 1");
        }
        if self.max_boxes_per_image == 0 {
            return bad("max_boxes_per_image must be at least 1");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be at least 1");
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 {
            return bad("lr_decay_factor must be positive");
        }
        if let LossMode::WeightedBce { positive, negative } = self.loss_mode {
            LossWeights::uniform(1, positive, negative)?;
        }
        Ok(())
    }

    /// Step-decayed learning rate at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((t / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace(pub Vec<TraceRow>);

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,loss\n");
        for r in &self.0 {
            let _ = writeln!(s, "{},{:e},{:e}", r.iteration, r.lr, r.loss);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean loss over the first `k` iterations.
    pub fn leading_mean(&self, k: usize) -> f64 {
        let k = k.min(self.0.len()).max(1);
        self.0[..k].iter().map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// Mean loss over the last `k` iterations.
    pub fn trailing_mean(&self, k: usize) -> f64 {
        let n = self.0.len();
        let k = k.min(n).max(1);
        self.0[n.saturating_sub(k)..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / k as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub trace: LossTrace,
}

fn single_label(sample: &Sample, labels: &[u8]) -> Result<usize> {
    let mut pos = labels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i);
    match (pos.next(), pos.next()) {
        (Some(l), None) => Ok(l),
        _ => Err(Error::Validation(format!(
            "sample {}: softmax loss needs exactly one positive label",
            sample.id
        ))),
    }
}

fn row_loss(
    mode: &LossMode,
    weights: &LossWeights,
    logits: &Tensor,
    labels: &[u8],
    s: &Sample,
) -> Result<LossGrad> {
    match mode {
        LossMode::SoftmaxCe => softmax_ce(logits, single_label(s, labels)?),
        _ => weighted_bce_with_logits(logits, &labels_to_tensor(labels), weights),
    }
}

/// Loss and parameter gradients of one image over the selected boxes.
fn image_grads(
    net: &Network,
    cfg: &TrainConfig,
    weights: &LossWeights,
    s: &Sample,
    picked: &[usize],
) -> Result<(f64, Gradients)> {
    let boxes: Vec<Roi> = picked.iter().map(|&i| s.boxes[i]).collect();
    let (out, cache) = net.forward_cached(&s.image, &boxes)?;
    let scores = &out.scores;
    let (n, c) = (scores.num_instances(), scores.num_classes());
    let per_box =
        cfg.supervision == TrainSupervision::PerInstance && net.config().variant.uses_boxes();
    let (loss, grad_scores) = if per_box {
        let labels = s.per_box_labels.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "sample {}: per-instance training needs per_box_labels",
                s.id
            ))
        })?;
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut g = Vec::with_capacity(n * c);
        for (row, &b) in picked.iter().enumerate() {
            let logits = Tensor::from_vec(scores.row(row).to_vec())?;
            let lg = row_loss(&cfg.loss_mode, weights, &logits, &labels[b], s)?;
            loss += lg.loss;
            g.extend(lg.grad.data().iter().map(|v| v * inv));
        }
        (loss * inv, Tensor::new(vec![n, c], g)?)
    } else {
        let agg = mil_max_aggregate(scores)?;
        let lg = row_loss(
            &cfg.loss_mode,
            weights,
            &agg.image_scores,
            &s.image_labels,
            s,
        )?;
        (lg.loss, agg.backward(&lg.grad)?)
    };
    Ok((loss, net.backward(cache, &grad_scores)?))
}

/// Trains `net` on `corpus`, calling `on_step(iteration, net)` after every
/// update.
pub fn train_with_hook(
    mut net: Network,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let c = net.config().num_classes;
    if corpus.num_classes() != c {
        return Err(Error::Validation(format!(
            "corpus has {} classes, network has {c}",
            corpus.num_classes()
        )));
    }
    if cfg.supervision == TrainSupervision::PerInstance {
        if let Some(s) = corpus.samples.iter().find(|s| s.per_box_labels.is_none()) {
            return Err(Error::Validation(format!(
                "per-instance training requested but sample {} has no per_box_labels",
                s.id
            )));
        }
    }
    let eligible: Vec<usize> = (0..corpus.samples.len())
        .filter(|&i| !corpus.samples[i].boxes.is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Validation(
            "no training image has a person box".into(),
        ));
    }
    let weights = match cfg.loss_mode {
        LossMode::WeightedBce { positive, negative } => {
            LossWeights::uniform(c, positive, negative)?
        }
        _ => LossWeights::uniform(c, 1.0, 1.0)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = eligible.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut velocity: BTreeMap<String, Tensor> = net
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros_like(v)))
        .collect();
    let mut trace = LossTrace::default();

    for t in 0..cfg.total_iters {
        let mut batch_loss = 0.0;
        let mut grads = Gradients::default();
        for _ in 0..cfg.batch_images {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &corpus.samples[order[cursor]];
            cursor += 1;
            let nb = s.boxes.len();
            let picked: Vec<usize> = if nb > cfg.max_boxes_per_image {
                let mut v = sample_indices(&mut rng, nb, cfg.max_boxes_per_image).into_vec();
                v.sort_unstable();
                v
            } else {
                (0..nb).collect()
            };
            let (loss, g) = image_grads(&net, cfg, &weights, s, &picked)?;
            batch_loss += loss;
            grads.merge(g)?;
        }
        let inv = 1.0 / cfg.batch_images as f64;
        grads.scale(inv);
        batch_loss *= inv;
        if !batch_loss.is_finite() {
            return Err(Error::Numerical(format!("loss diverged at iteration {t}")));
        }

        let lr = cfg.lr_at(t);
        for (name, g) in &grads.0 {
            if net.is_frozen(name) {
                continue;
            }
            let v = velocity.get_mut(name).expect("velocity per parameter");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = cfg.momentum * *vi - lr * gi;
            }
            let p = net.param_mut(name)?;
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi += vi;
            }
            if !p.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameter {name} diverged at iteration {t}"
                )));
            }
        }
        trace.0.push(TraceRow {
            iteration: t,
            lr,
            loss: batch_loss,
        });
        on_step(t, &net)?;
    }
    Ok(TrainOutcome { net, trace })
}

pub fn train(net: Network, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(net, corpus, cfg, &mut |_, _| Ok(()))
}

/// Per-class `(score, label)` lists of image-level probabilities, ready
/// for [`crate::metrics::mean_ap`]. Images without boxes are scored with
/// the full-image box.
pub fn score_corpus(net: &Network, corpus: &Corpus) -> Result<Vec<Vec<(f64, bool)>>> {
    let c = net.config().num_classes;
    let mut per_class = vec![Vec::with_capacity(corpus.samples.len()); c];
    for s in &corpus.samples {
        let boxes = if s.boxes.is_empty() {
            vec![Roi::full(s.width(), s.height())]
        } else {
            s.boxes.clone()
        };
        let pred = net.predict_image(&s.image, &boxes)?;
        for (k, list) in per_class.iter_mut().enumerate() {
            list.push((pred.probs.data()[k], s.image_labels[k] == 1));
        }
    }
    Ok(per_class)
}

pub fn evaluate(net: &Network, corpus: &Corpus) -> Result<crate::metrics::MapReport> {
    Ok(crate::metrics::mean_ap(&score_corpus(net, corpus)?)?.with_names(&corpus.classes))
}
