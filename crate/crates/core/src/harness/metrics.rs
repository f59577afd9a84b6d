//! Confusion-matrix IoU metrics.
//!
//! Per-class IoU is `|pred ∩ gt| / |pred ∪ gt|`. A class absent from both
//! prediction and ground truth has no IoU. The mean is taken over classes
//! present in the ground truth only; a class that appears only in the
//! prediction keeps its (zero) IoU in the per-class vector but does not enter
//! the mean.

use serde::{Deserialize, Serialize};

use crate::decoder::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if p >= k || g >= k {
                return Err(Error::InvalidLabel {
                    label: p.max(g),
                    classes: k,
                });
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self, fingerprint: impl Into<String>) -> EvalReport {
        let k = self.classes;
        let mut per_class_iou = Vec::with_capacity(k);
        let mut present = Vec::with_capacity(k);
        let mut total = 0;
        let mut correct = 0;
        for c in 0..k {
            let tp = self.count(c, c);
            let gt: u64 = (0..k).map(|p| self.count(c, p)).sum();
            let pred: u64 = (0..k).map(|g| self.count(g, c)).sum();
            let union = gt + pred - tp;
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
            present.push(gt > 0);
            total += gt;
            correct += tp;
        }
        let counted: Vec<f64> = per_class_iou
            .iter()
            .zip(&present)
            .filter(|(_, &p)| p)
            .map(|(iou, _)| iou.expect("present classes have a union"))
            .collect();
        let miou = if counted.is_empty() {
            0.0
        } else {
            counted.iter().sum::<f64>() / counted.len() as f64
        };
        EvalReport {
            per_class_iou,
            present_in_gt: present,
            miou,
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            fingerprint: fingerprint.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub present_in_gt: Vec<bool>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub fingerprint: String,
}

pub fn compute_miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.report(""))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: &[usize]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    /// Set-based IoU straight from the definition.
    fn oracle_iou(pred: &[usize], gt: &[usize], c: usize) -> Option<f64> {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        (union > 0).then(|| inter as f64 / union as f64)
    }

    #[test]
    fn hand_example() {
        let r = compute_miou(&map(2, 2, &[0, 0, 0, 0]), &map(2, 2, &[0, 0, 1, 1]), 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
        assert_eq!(r.pixel_accuracy, 0.5);
    }

    #[test]
    fn perfect_prediction() {
        let m = map(2, 3, &[0, 1, 2, 2, 1, 0]);
        let r = compute_miou(&m, &m, 4).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class_iou[3], None);
        assert!(!r.present_in_gt[3]);
    }

    #[test]
    fn prediction_only_class_excluded_from_mean() {
        let r = compute_miou(&map(1, 4, &[0, 0, 2, 1]), &map(1, 4, &[0, 0, 1, 1]), 3).unwrap();
        assert_eq!(r.per_class_iou[2], Some(0.0));
        assert!(!r.present_in_gt[2]);
        assert_eq!(r.miou, (1.0 + 0.5) / 2.0);
    }

    #[test]
    fn shape_mismatch_and_bad_label() {
        assert!(matches!(
            compute_miou(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0]), 2),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            compute_miou(&map(1, 2, &[0, 3]), &map(1, 2, &[0, 0]), 2),
            Err(Error::InvalidLabel { label: 3, .. })
        ));
    }

    fn maps() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
        (2usize..6, 1usize..40).prop_flat_map(|(k, n)| {
            (
                Just(k),
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(0..k, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_set_oracle((k, p, g) in maps()) {
            let n = p.len();
            let r = compute_miou(&map(1, n, &p), &map(1, n, &g), k).unwrap();
            for c in 0..k {
                prop_assert_eq!(r.per_class_iou[c], oracle_iou(&p, &g, c));
                let v = r.per_class_iou[c].unwrap_or(0.0);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn self_miou_is_one((k, p, _g) in maps()) {
            let m = map(1, p.len(), &p);
            prop_assert_eq!(compute_miou(&m, &m, k).unwrap().miou, 1.0);
        }

        #[test]
        fn relabeling_permutes_per_class((k, p, g) in maps(), shift in 0usize..6) {
            let perm: Vec<usize> = (0..k).map(|c| (c + shift) % k).collect();
            let n = p.len();
            let a = compute_miou(&map(1, n, &p), &map(1, n, &g), k).unwrap();
            let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let gg: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
            let b = compute_miou(&map(1, n, &pp), &map(1, n, &gg), k).unwrap();
            for c in 0..k {
                prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[perm[c]]);
            }
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
        }
    }
}
