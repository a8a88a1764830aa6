//! Average precision, mAP and multiple-choice accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-wise area under the precision-recall curve:
/// `sum_k (R_k - R_{k-1}) * P_k` over predictions sorted by descending
/// score, ties kept in input order. `None` when there are no positives.
pub fn average_precision(preds: &[(f64, bool)]) -> Option<f64> {
    let positives = preds.iter().filter(|p| p.1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // sort_by is stable, so equal scores keep their original order
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let npos = positives as f64;
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if preds[i].1 {
            hits += 1;
            ap += (hits as f64 / (rank + 1) as f64) / npos;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub name: Option<String>,
    /// `None` when the class has no positives.
    pub ap: Option<f64>,
    pub positives: usize,
    pub total: usize,
}

/// Evaluation report: per-class AP and their mean, reported x100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    /// Classes with no positives, left out of the mean.
    pub skipped: usize,
}

impl MapReport {
    pub fn with_names(mut self, names: &[String]) -> Self {
        for c in &mut self.per_class {
            c.name = names.get(c.class).cloned();
        }
        self
    }
}

/// Mean AP over classes that have at least one positive.
pub fn mean_ap(per_class: &[Vec<(f64, bool)>]) -> Result<MapReport> {
    let per: Vec<ClassAp> = per_class
        .iter()
        .enumerate()
        .map(|(class, p)| ClassAp {
            class,
            name: None,
            ap: average_precision(p),
            positives: p.iter().filter(|x| x.1).count(),
            total: p.len(),
        })
        .collect();
    let defined: Vec<f64> = per.iter().filter_map(|c| c.ap).collect();
    if defined.is_empty() {
        return Err(Error::Validation("no class has a positive example".into()));
    }
    let map = 100.0 * defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapReport {
        skipped: per.len() - defined.len(),
        per_class: per,
        map,
    })
}

/// Percentage of `(predicted, correct)` pairs that agree.
pub fn choice_accuracy(answers: &[(usize, usize)]) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::Validation("no answers to score".into()));
    }
    let right = answers.iter().filter(|(p, c)| p == c).count();
    Ok(100.0 * right as f64 / answers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_ranking() {
        let p = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(average_precision(&p), Some(1.0));
    }

    #[test]
    fn hand_enumerated() {
        let p = [(0.9, true), (0.8, false), (0.7, true)];
        let ap = average_precision(&p).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_positive_last() {
        for n in 1..10 {
            let mut p: Vec<(f64, bool)> = (0..n - 1).map(|i| (1.0 + i as f64, false)).collect();
            p.push((0.0, true));
            assert!((average_precision(&p).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_keep_input_order() {
        let a = average_precision(&[(0.5, true), (0.5, false)]).unwrap();
        let b = average_precision(&[(0.5, false), (0.5, true)]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn map_cases() {
        let perfect = vec![(0.9, true), (0.1, false)];
        let half = vec![(0.9, false), (0.1, true)];
        let r = mean_ap(&[perfect.clone(), half]).unwrap();
        assert!((r.map - 75.0).abs() < 1e-12);
        let r = mean_ap(&[perfect.clone(), perfect.clone(), vec![(0.3, false)]]).unwrap();
        assert_eq!(r.map, 100.0);
        assert_eq!(r.skipped, 1);
        assert!(mean_ap(&[vec![(0.1, false)]]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(choice_accuracy(&[(1, 1), (2, 2)]).unwrap(), 100.0);
        assert_eq!(
            choice_accuracy(&[(0, 0), (1, 1), (2, 2), (3, 0)]).unwrap(),
            75.0
        );
        assert!(choice_accuracy(&[]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            items in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..30)
        ) {
            let base = average_precision(&items);
            let mapped: Vec<_> = items.iter().map(|&(s, l)| ((3.0 * s).exp() - 2.0, l)).collect();
            prop_assert_eq!(base, average_precision(&mapped));
        }

        #[test]
        fn trailing_negative_is_harmless(
            items in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..30)
        ) {
            let mut more = items.clone();
            more.push((-1.0, false));
            prop_assert_eq!(average_precision(&items), average_precision(&more));
        }
    }
}
