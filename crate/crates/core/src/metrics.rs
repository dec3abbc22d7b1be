//! Confusion-matrix evaluation: per-class IoU, mIoU, overall accuracy, mean
//! accuracy and frequency-weighted IoU, plus the CSV metric report.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{LabelMap, IGNORE};

/// counts[gt][pred] over evaluated pixels; ground-truth IGNORE pixels are
/// skipped entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds per-pixel (gt, pred) tallies. The prediction must not contain
    /// IGNORE or out-of-range ids.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE || p as usize >= self.num_classes {
                return Err(Error::ClassOutOfRange { id: p, classes: self.num_classes });
            }
            if g as usize >= self.num_classes {
                return Err(Error::ClassOutOfRange { id: g, classes: self.num_classes });
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum, for parallel shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}-class matrix into {}-class matrix",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn class_stats(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.count(c, c);
        let gt_count: u64 = (0..self.num_classes).map(|j| self.count(c, j)).sum();
        let pred_count: u64 = (0..self.num_classes).map(|i| self.count(i, c)).sum();
        (tp, gt_count, pred_count)
    }

    fn check_non_empty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusionMatrix);
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both ground truth and
    /// prediction (excluded from means).
    pub fn per_class_iou(&self) -> Result<Vec<Option<f64>>> {
        self.check_non_empty()?;
        Ok((0..self.num_classes)
            .map(|c| {
                let (tp, gt_count, pred_count) = self.class_stats(c);
                let union = gt_count + pred_count - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect())
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou()?.into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn overall_acc(&self) -> Result<f64> {
        self.check_non_empty()?;
        let tp: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        Ok(tp as f64 / self.total() as f64)
    }

    /// Mean over classes with ground-truth pixels of tp / gt_count.
    pub fn mean_acc(&self) -> Result<f64> {
        self.check_non_empty()?;
        let mut accs = Vec::new();
        for c in 0..self.num_classes {
            let (tp, gt_count, _) = self.class_stats(c);
            if gt_count > 0 {
                accs.push(tp as f64 / gt_count as f64);
            }
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Per-class IoU weighted by ground-truth frequency.
    pub fn fwiou(&self) -> Result<f64> {
        self.check_non_empty()?;
        let total = self.total() as f64;
        let mut acc = 0.0;
        for (c, iou) in self.per_class_iou()?.into_iter().enumerate() {
            let (_, gt_count, _) = self.class_stats(c);
            if gt_count > 0 {
                acc += (gt_count as f64 / total) * iou.unwrap_or(0.0);
            }
        }
        Ok(acc)
    }

    /// CSV report: per-class rows under "class,iou,acc", then the four-metric
    /// summary row set.
    pub fn report_csv(&self) -> Result<String> {
        self.check_non_empty()?;
        let ious = self.per_class_iou()?;
        let mut out = String::from("class,iou,acc\n");
        for c in 0..self.num_classes {
            let (tp, gt_count, _) = self.class_stats(c);
            let iou = ious[c].map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
            let acc = if gt_count > 0 {
                format!("{:.6}", tp as f64 / gt_count as f64)
            } else {
                "nan".into()
            };
            out.push_str(&format!("{c},{iou},{acc}\n"));
        }
        out.push_str("overall_acc,mean_acc,fwiou,miou\n");
        out.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6}\n",
            self.overall_acc()?,
            self.mean_acc()?,
            self.fwiou()?,
            self.miou()?
        ));
        Ok(out)
    }
}

/// Predicted label map from a [C,H,W] probability (or logit) tensor: argmax
/// over channels with ties broken toward the lowest class index.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let shape = probs.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let v = probs.values();
    let mut classes = vec![0u8; plane];
    for p in 0..plane {
        let mut best = 0usize;
        let mut best_val = v[p];
        for ch in 1..c {
            let val = v[ch * plane + p];
            if val > best_val {
                best_val = val;
                best = ch;
            }
        }
        classes[p] = best as u8;
    }
    LabelMap::new(h, w, classes, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, v: Vec<u8>, c: usize) -> LabelMap {
        LabelMap::new(h, w, v, c).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let gt = labels(2, 5, vec![1; 10], 3);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.count(1, 1), 10);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.overall_acc().unwrap(), 1.0);
        assert_eq!(cm.mean_acc().unwrap(), 1.0);
        assert_eq!(cm.fwiou().unwrap(), 1.0);
    }

    #[test]
    fn disjoint_binary_prediction_scores_zero() {
        let gt = labels(1, 4, vec![0, 0, 0, 0], 2);
        let pred = labels(1, 4, vec![1, 1, 1, 1], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);
    }

    #[test]
    fn hand_worked_two_by_two_case() {
        // gt = [0,0,1,1], pred = [0,1,1,1]:
        // IoU0 = 1/2, IoU1 = 2/3, mIoU = 7/12,
        // overall 3/4, mAcc (1/2 + 1)/2 = 3/4, fwIoU = 7/12.
        let gt = labels(2, 2, vec![0, 0, 1, 1], 2);
        let pred = labels(2, 2, vec![0, 1, 1, 1], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        let ious = cm.per_class_iou().unwrap();
        assert!((ious[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((ious[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert!((cm.overall_acc().unwrap() - 0.75).abs() < 1e-12);
        assert!((cm.mean_acc().unwrap() - 0.75).abs() < 1e-12);
        assert!((cm.fwiou().unwrap() - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_ground_truth_is_skipped() {
        let gt = labels(1, 4, vec![IGNORE, IGNORE, IGNORE, IGNORE], 2);
        let pred = labels(1, 4, vec![0, 1, 0, 1], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.miou(), Err(Error::EmptyConfusionMatrix)));
    }

    #[test]
    fn mixed_case_matches_per_pixel_tally_oracle() {
        let gt = labels(3, 3, vec![0, 1, 2, 2, 1, 0, IGNORE, 1, 2], 3);
        let pred = labels(3, 3, vec![0, 2, 2, 2, 1, 1, 0, 1, 0], 3);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        // Direct per-pixel loop.
        let mut oracle = vec![0u64; 9];
        for (&g, &p) in gt.classes().iter().zip(pred.classes()) {
            if g != IGNORE {
                oracle[g as usize * 3 + p as usize] += 1;
            }
        }
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(g, p), oracle[g * 3 + p]);
            }
        }
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        // Only class 0 appears anywhere; C = 4.
        let gt = labels(2, 2, vec![0, 0, 0, 0], 4);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.mean_acc().unwrap(), 1.0);
        assert_eq!(cm.miou().unwrap(), 1.0);
        let ious = cm.per_class_iou().unwrap();
        assert!(ious[1].is_none() && ious[2].is_none() && ious[3].is_none());
    }

    #[test]
    fn accumulation_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let make = |rng: &mut ChaCha8Rng| {
            let v: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3) as u8).collect();
            labels(4, 4, v, 3)
        };
        let pairs: Vec<(LabelMap, LabelMap)> =
            (0..8).map(|_| (make(&mut rng), make(&mut rng))).collect();
        let mut forward = ConfusionMatrix::new(3);
        for (p, g) in &pairs {
            forward.accumulate(p, g).unwrap();
        }
        let mut backward = ConfusionMatrix::new(3);
        for (p, g) in pairs.iter().rev() {
            backward.accumulate(p, g).unwrap();
        }
        assert_eq!(forward, backward);
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt = labels(1, 4, vec![0, 1, 1, 0], 2);
        let pred = labels(1, 4, vec![0, 1, 0, 1], 2);
        let mut joint = ConfusionMatrix::new(2);
        joint.accumulate(&pred, &gt).unwrap();
        joint.accumulate(&pred, &gt).unwrap();

        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&pred, &gt).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, joint);
    }

    /// Set-based Jaccard oracle: per class, |A1 ∩ A2| / |A1 ∪ A2| over pixel
    /// index sets, averaged over classes present in either map.
    fn miou_set_oracle(pred: &LabelMap, gt: &LabelMap, c: usize) -> Option<f64> {
        let mut ious = Vec::new();
        for class in 0..c as u8 {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
                if g == IGNORE {
                    continue;
                }
                let in_pred = p == class;
                let in_gt = g == class;
                if in_pred && in_gt {
                    inter += 1;
                }
                if in_pred || in_gt {
                    union += 1;
                }
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }

    #[test]
    fn miou_matches_set_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..200 {
            let c = rng.gen_range(2..=5usize);
            let h = rng.gen_range(1..=8usize);
            let w = rng.gen_range(1..=8usize);
            let gt_v: Vec<u8> = (0..h * w)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        IGNORE
                    } else {
                        rng.gen_range(0..c) as u8
                    }
                })
                .collect();
            let pred_v: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
            let gt = labels(h, w, gt_v, c);
            let pred = labels(h, w, pred_v, c);
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&pred, &gt).unwrap();
            match miou_set_oracle(&pred, &gt, c) {
                Some(expect) => {
                    let got = cm.miou().unwrap();
                    assert!(
                        (got - expect).abs() < 1e-9,
                        "case {case}: {got} vs oracle {expect}"
                    );
                }
                None => assert!(cm.miou().is_err()),
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_class() {
        let t = Tensor::new(vec![3, 1, 2], vec![0.4, 0.2, 0.4, 0.5, 0.2, 0.3]).unwrap();
        let lm = argmax_labels(&t).unwrap();
        assert_eq!(lm.classes(), &[0, 1]);
    }

    #[test]
    fn report_csv_has_expected_layout() {
        let gt = labels(2, 2, vec![0, 0, 1, 1], 2);
        let pred = labels(2, 2, vec![0, 1, 1, 1], 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        let csv = cm.report_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou,acc");
        assert_eq!(lines[3], "overall_acc,mean_acc,fwiou,miou");
        assert_eq!(lines[4], "0.750000,0.750000,0.583333,0.583333");
    }
}
