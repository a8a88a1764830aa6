//! Multiple-instance max aggregation and the training losses.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{sigmoid_scalar, Roi};
use crate::tensor::Tensor;

/// Probability clamp used by the probability-space loss.
pub const PROB_EPS: f64 = 1e-12;

/// Per-instance class logits for one image.
#[derive(Debug, Clone)]
pub struct InstanceScores {
    /// `N x C`, pre-sigmoid.
    pub scores: Tensor,
    pub boxes: Vec<Roi>,
}

impl InstanceScores {
    pub fn num_instances(&self) -> usize {
        self.scores.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.scores.dims()[1]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let c = self.num_classes();
        &self.scores.data()[n * c..(n + 1) * c]
    }
}

/// Result of max-aggregating instance scores per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MilAggregate {
    pub image_scores: Tensor,
    /// Winning instance per class (lowest index on ties).
    pub winners: Vec<usize>,
    pub num_instances: usize,
}

/// Image score of each class is the max over its instances.
pub fn mil_max_aggregate(inst: &InstanceScores) -> Result<MilAggregate> {
    let dims = inst.scores.dims();
    if dims.len() != 2 {
        return shape_err(format!("instance scores must be N x C, got {dims:?}"));
    }
    let n = dims[0];
    if inst.boxes.is_empty() {
        return Err(Error::Validation("image has no instances".into()));
    }
    if inst.boxes.len() != n {
        return shape_err(format!("{} boxes for {n} score rows", inst.boxes.len()));
    }
    let winners = inst.scores.argmax_axis(0)?;
    let c = dims[1];
    let scores: Vec<f64> = winners
        .iter()
        .enumerate()
        .map(|(cls, &w)| inst.scores.data()[w * c + cls])
        .collect();
    Ok(MilAggregate {
        image_scores: Tensor::new(vec![c], scores)?,
        winners,
        num_instances: n,
    })
}

impl MilAggregate {
    /// Routes each class gradient to that class's winning instance.
    pub fn backward(&self, grad_image: &Tensor) -> Result<Tensor> {
        let c = self.winners.len();
        if grad_image.len() != c {
            return shape_err(format!("mil grad of {} vs {c} classes", grad_image.len()));
        }
        let mut g = Tensor::zeros(&[self.num_instances, c]);
        let d = g.data_mut();
        for (cls, (&w, &gv)) in self.winners.iter().zip(grad_image.data()).enumerate() {
            d[w * c + cls] = gv;
        }
        Ok(g)
    }
}

/// Per-class positive and negative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl LossWeights {
    pub fn new(positive: Vec<f64>, negative: Vec<f64>) -> Result<Self> {
        if positive.len() != negative.len() {
            return shape_err("weight vectors differ in length");
        }
        if positive
            .iter()
            .chain(&negative)
            .any(|&w| !(w > 0.0 && w.is_finite()))
        {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(LossWeights { positive, negative })
    }

    pub fn uniform(classes: usize, w_p: f64, w_n: f64) -> Result<Self> {
        LossWeights::new(vec![w_p; classes], vec![w_n; classes])
    }

    /// Positives weighted by 10, negatives by 1.
    pub fn default_for(classes: usize) -> Self {
        LossWeights::uniform(classes, 10.0, 1.0).expect("constant weights are valid")
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }
}

/// Scalar loss with its gradient w.r.t. the loss input.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

fn check_labels(labels: &Tensor, c: usize) -> Result<()> {
    if labels.len() != c {
        return shape_err(format!("{} labels for {c} classes", labels.len()));
    }
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Validation("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Weighted binary cross-entropy on probabilities:
/// `-sum_i w_p y log p + w_n (1 - y) log(1 - p)`, with `p` clamped to
/// `[eps, 1 - eps]`. The gradient is w.r.t. the probabilities.
pub fn weighted_bce(probs: &Tensor, labels: &Tensor, w: &LossWeights) -> Result<LossGrad> {
    let c = probs.len();
    check_labels(labels, c)?;
    if w.len() != c {
        return shape_err(format!("{} weights for {c} classes", w.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(c);
    for i in 0..c {
        let p = probs.data()[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = labels.data()[i];
        let (wp, wn) = (w.positive[i], w.negative[i]);
        loss -= wp * y * p.ln() + wn * (1.0 - y) * (1.0 - p).ln();
        grad.push(-wp * y / p + wn * (1.0 - y) / (1.0 - p));
    }
    Ok(LossGrad {
        loss,
        grad: Tensor::new(vec![c], grad)?,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid fused with [`weighted_bce`], evaluated in logit space.
/// The gradient is w.r.t. the logits.
pub fn weighted_bce_with_logits(
    logits: &Tensor,
    labels: &Tensor,
    w: &LossWeights,
) -> Result<LossGrad> {
    let c = logits.len();
    check_labels(labels, c)?;
    if w.len() != c {
        return shape_err(format!("{} weights for {c} classes", w.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(c);
    for i in 0..c {
        let z = logits.data()[i];
        let y = labels.data()[i];
        let (wp, wn) = (w.positive[i], w.negative[i]);
        // -log(sigmoid(z)) = softplus(-z), -log(1 - sigmoid(z)) = softplus(z)
        loss += wp * y * softplus(-z) + wn * (1.0 - y) * softplus(z);
        let s = sigmoid_scalar(z);
        grad.push(wp * y * (s - 1.0) + wn * (1.0 - y) * s);
    }
    Ok(LossGrad {
        loss,
        grad: Tensor::new(vec![c], grad)?,
    })
}

/// `-log softmax(logits)[label]`.
pub fn softmax_ce(logits: &Tensor, label: usize) -> Result<LossGrad> {
    let c = logits.len();
    if c < 2 {
        return shape_err("softmax needs at least two classes");
    }
    if label >= c {
        return Err(Error::Validation(format!(
            "label {label} out of {c} classes"
        )));
    }
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    let log_z = m + sum.ln();
    let grad: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - log_z).exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok(LossGrad {
        loss: log_z - z[label],
        grad: Tensor::new(vec![c], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inst(rows: &[Vec<f64>]) -> InstanceScores {
        InstanceScores {
            scores: Tensor::from_rows(rows).unwrap(),
            boxes: vec![Roi::full(1, 1); rows.len()],
        }
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn singleton_is_identity() {
        let s = inst(&[vec![0.3, -1.0, 2.0]]);
        let agg = mil_max_aggregate(&s).unwrap();
        assert_eq!(agg.image_scores.data(), s.row(0));
        assert_eq!(agg.winners, vec![0, 0, 0]);
    }

    #[test]
    fn max_and_winner() {
        let agg = mil_max_aggregate(&inst(&[vec![0.2], vec![1.5], vec![-0.3]])).unwrap();
        assert_eq!(agg.image_scores.data(), &[1.5]);
        assert_eq!(agg.winners, vec![1]);
    }

    #[test]
    fn empty_bag_is_rejected() {
        let s = InstanceScores {
            scores: Tensor::zeros(&[1, 2]),
            boxes: vec![],
        };
        assert!(matches!(mil_max_aggregate(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn gradient_goes_to_winner_only() {
        let s = inst(&[vec![0.2, 3.0], vec![1.5, -1.0], vec![-0.3, 0.0]]);
        let labels = t(&[1.0, 0.0]);
        let w = LossWeights::default_for(2);
        let loss_of = |s: &InstanceScores| {
            let agg = mil_max_aggregate(s).unwrap();
            weighted_bce_with_logits(&agg.image_scores, &labels, &w)
                .unwrap()
                .loss
        };
        let agg = mil_max_aggregate(&s).unwrap();
        let lg = weighted_bce_with_logits(&agg.image_scores, &labels, &w).unwrap();
        let g = agg.backward(&lg.grad).unwrap();
        let h = 1e-5;
        for n in 0..3 {
            for c in 0..2 {
                let idx = n * 2 + c;
                let mut plus = s.clone();
                plus.scores.data_mut()[idx] += h;
                let mut minus = s.clone();
                minus.scores.data_mut()[idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = g.data()[idx];
                if agg.winners[c] == n {
                    assert!((a - fd).abs() <= 1e-6 * a.abs().max(1e-3));
                } else {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }

    #[test]
    fn bce_unit_weights_match_plain() {
        let p = t(&[0.1, 0.7, 0.5, 0.99]);
        let y = t(&[0.0, 1.0, 1.0, 0.0]);
        let lg = weighted_bce(&p, &y, &LossWeights::uniform(4, 1.0, 1.0).unwrap()).unwrap();
        let plain: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        assert!((lg.loss - plain).abs() <= 1e-12);
    }

    #[test]
    fn bce_analytic_ln2() {
        let lg = weighted_bce(&t(&[0.5]), &t(&[1.0]), &LossWeights::default_for(1)).unwrap();
        assert!((lg.loss - 10.0 * std::f64::consts::LN_2).abs() <= 1e-12);
        let lz =
            weighted_bce_with_logits(&t(&[0.0]), &t(&[1.0]), &LossWeights::default_for(1)).unwrap();
        assert!((lz.loss - 10.0 * std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default_for(600);
        assert!(w.positive.iter().all(|&v| v == 10.0));
        assert!(w.negative.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bce_rejects_bad_input() {
        let w = LossWeights::default_for(2);
        assert!(matches!(
            weighted_bce(&t(&[0.5, 0.5]), &t(&[0.5, 1.0]), &w),
            Err(Error::Validation(_))
        ));
        assert!(LossWeights::uniform(2, 0.0, 1.0).is_err());
    }

    #[test]
    fn logit_form_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = LossWeights::new(vec![10.0, 2.0, 1.0], vec![1.0, 0.5, 3.0]).unwrap();
        for _ in 0..20 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = t(&[1.0, 0.0, 1.0]);
            let p: Vec<f64> = z.iter().map(|&v| sigmoid_scalar(v)).collect();
            let a = weighted_bce(&t(&p), &y, &w).unwrap();
            let b = weighted_bce_with_logits(&t(&z), &y, &w).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-9);
            for i in 0..3 {
                let chain = a.grad.data()[i] * p[i] * (1.0 - p[i]);
                assert!((chain - b.grad.data()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_ce(&t(&[0.3; 4]), 2).unwrap();
        assert!((u.loss - 4f64.ln()).abs() < 1e-12);
        let s = softmax_ce(&t(&[10.0, 0.0]), 0).unwrap();
        // ln(1 + e^-10)
        assert!((s.loss - 4.539889921686465e-5).abs() < 1e-15);
        assert!(softmax_ce(&t(&[1.0, 2.0]), 2).is_err());
        assert!(softmax_ce(&t(&[1.0]), 0).is_err());
    }

    #[test]
    fn softmax_gradient_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-5;
        for _ in 0..10 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..5);
            let g = softmax_ce(&t(&z), label).unwrap().grad;
            for i in 0..5 {
                let mut p = z.clone();
                p[i] += h;
                let mut m = z.clone();
                m[i] -= h;
                let fd = (softmax_ce(&t(&p), label).unwrap().loss
                    - softmax_ce(&t(&m), label).unwrap().loss)
                    / (2.0 * h);
                let a = g.data()[i];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1e-2));
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..500, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let mut rev = rows.clone();
            rev.reverse();
            let a = mil_max_aggregate(&inst(&rows)).unwrap();
            let b = mil_max_aggregate(&inst(&rev)).unwrap();
            prop_assert_eq!(a.image_scores, b.image_scores);
        }

        #[test]
        fn monotone_in_positive_weight(seed in 0u64..500, bump in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..0.99)).collect();
            let y = t(&[1.0, 0.0, rng.random_range(0..2) as f64, 0.0]);
            let lo = weighted_bce(&t(&p), &y, &LossWeights::uniform(4, 1.0, 1.0).unwrap()).unwrap();
            let hi = weighted_bce(&t(&p), &y, &LossWeights::uniform(4, 1.0 + bump, 1.0).unwrap()).unwrap();
            prop_assert!(hi.loss >= lo.loss);
        }
    }
}
