//! Confusion-matrix based segmentation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{SegmentationMask, IGNORE_INDEX};

/// `C x C` counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub miou: f64,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Adds every pixel whose ground truth is not the ignore index.
    pub fn accumulate(&mut self, gt: &SegmentationMask, pred: &SegmentationMask) -> Result<()> {
        if gt.extent() != pred.extent() {
            return Err(Error::arg(format!(
                "ground truth extent {:?} does not match prediction {:?}",
                gt.extent(),
                pred.extent()
            )));
        }
        let c = self.classes;
        // validate before touching counts so a failed call leaves them unchanged
        for (&g, &p) in gt.indices.iter().zip(&pred.indices) {
            if g == IGNORE_INDEX {
                continue;
            }
            if p == IGNORE_INDEX {
                return Err(Error::arg("prediction contains the ignore index"));
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::arg(format!("label {} out of range for {c} classes", g.max(p))));
            }
        }
        for (&g, &p) in gt.indices.iter().zip(&pred.indices) {
            if g != IGNORE_INDEX {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::arg("cannot merge confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Pixel accuracy, per-class IoU and their mean over classes with a
    /// nonzero union.
    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::arg("confusion matrix is empty"));
        }
        let c = self.classes;
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Scores { acc: self.trace() as f64 / total as f64, miou, per_class_iou })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, idx: Vec<u16>, c: usize) -> SegmentationMask {
        SegmentationMask::new(h, w, idx, (0..c).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn identical_masks_fill_diagonal() {
        let m = mask(4, 4, (0..16).map(|i| (i % 3) as u16).collect(), 3);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.trace(), 16);
        let s = cm.scores().unwrap();
        assert_eq!((s.acc, s.miou), (1.0, 1.0));
    }

    #[test]
    fn all_ignore_changes_nothing() {
        let gt = mask(2, 2, vec![255; 4], 2);
        let pred = mask(2, 2, vec![0, 1, 0, 1], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.scores().is_err());
    }

    #[test]
    fn hand_computed_two_by_two() {
        // gt [[0,0],[1,255]], pred [[0,1],[1,0]]
        let gt = mask(2, 2, vec![0, 0, 1, 255], 2);
        let pred = mask(2, 2, vec![0, 1, 1, 0], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 1]);
        let s = cm.scores().unwrap();
        assert!((s.acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_class_iou, vec![Some(0.5), Some(0.5)]);
        assert_eq!(s.miou, 0.5);
    }

    #[test]
    fn absent_class_is_excluded() {
        let gt = mask(1, 2, vec![0, 1], 3);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(s.per_class_iou[2], None);
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn invalid_inputs() {
        let gt = mask(1, 2, vec![0, 1], 3);
        let ign = mask(1, 2, vec![0, 255], 3);
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&gt, &ign).is_err());
        let big = mask(1, 2, vec![0, 2], 3);
        assert!(cm.accumulate(&big, &gt).is_err());
        assert!(cm.accumulate(&mask(1, 1, vec![0], 1), &gt).is_err());
        assert_eq!(cm.total(), 0);
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval_and_additive(
            a in proptest::collection::vec(0u16..4, 12),
            b in proptest::collection::vec(0u16..4, 12),
            c in proptest::collection::vec(0u16..4, 12),
        ) {
            let (ga, pb, gc) = (mask(3, 4, a, 4), mask(3, 4, b, 4), mask(3, 4, c, 4));
            let mut both = ConfusionMatrix::new(4);
            both.accumulate(&ga, &pb).unwrap();
            both.accumulate(&gc, &ga).unwrap();
            let mut one = ConfusionMatrix::new(4);
            one.accumulate(&ga, &pb).unwrap();
            let mut two = ConfusionMatrix::new(4);
            two.accumulate(&gc, &ga).unwrap();
            one.merge(&two).unwrap();
            prop_assert_eq!(&both, &one);
            let s = both.scores().unwrap();
            prop_assert!((0.0..=1.0).contains(&s.acc) && (0.0..=1.0).contains(&s.miou));
            prop_assert_eq!(s.acc == 1.0, both.trace() == both.total());
        }
    }
}
