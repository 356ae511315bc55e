use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(preds: &[u8], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p == 1, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 of one class; zero denominators count as 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of the hate and non-hate F1 scores.
pub fn macro_f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    ensure!(
        preds.len() == labels.len(),
        Validation,
        "{} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    ensure!(!preds.is_empty(), Validation, "macro F1 of an empty set");
    ensure!(
        preds.iter().chain(labels).all(|&v| v <= 1),
        Validation,
        "macro F1 expects binary values"
    );
    let c = Confusion::from_pairs(preds, labels);
    let pos = f1_from_counts(c.tp, c.fp, c.fn_);
    let neg = f1_from_counts(c.tn, c.fn_, c.fp);
    Ok((pos + neg) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(macro_f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.5);
        let m = macro_f1(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert!(macro_f1(&[], &[]).is_err());
        assert!(macro_f1(&[1], &[1, 0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_under_relabeling(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..40)) {
            let (p, y): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
            prop_assert_eq!(macro_f1(&p, &y).unwrap(), macro_f1(&flip(&p), &flip(&y)).unwrap());
        }
    }
}
