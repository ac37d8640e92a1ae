use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[g·K + p]` tallies ground truth `g` predicted as `p`.
/// Predictions of the ignore value on valid ground truth go to
/// `ignored_predictions[g]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
    pub ignored_predictions: Vec<u64>,
    pub total_ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            ignored_predictions: vec![0; k],
            total_ignored: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored_predictions.iter().sum::<u64>() + self.total_ignored
    }

    pub fn num_ignored_predictions(&self) -> u64 {
        self.ignored_predictions.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.ignored_predictions.iter_mut().zip(&other.ignored_predictions) {
            *a += b;
        }
        self.total_ignored += other.total_ignored;
    }
}

/// Adds one prediction/ground-truth pair. Ground-truth ignore pixels are
/// skipped and counted in `total_ignored`.
pub fn accumulate_confusion(pred: &[u8], gt: &[u8], ignore_index: u8, cm: &mut ConfusionMatrix) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore_index {
            cm.total_ignored += 1;
            continue;
        }
        let g = g as usize;
        if g >= cm.k {
            return Err(Error::Contract(format!("ground-truth class {g} outside {} classes", cm.k)));
        }
        if p == ignore_index {
            cm.ignored_predictions[g] += 1;
            continue;
        }
        let p = p as usize;
        if p >= cm.k {
            return Err(Error::Contract(format!("predicted class {p} outside {} classes", cm.k)));
        }
        cm.counts[g * cm.k + p] += 1;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    /// Classes with an empty union are left out of the mean.
    #[default]
    Exclude,
    /// Classes with an empty union count as IoU 0.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub tp: u64,
    /// `TP + FP + FN`.
    pub union: u64,
    /// `None` when the union is empty.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub per_class: Vec<ClassIou>,
    pub mean: f64,
    /// Selected classes with an empty union.
    pub absent: Vec<usize>,
}

/// Per-class `TP/(TP+FP+FN)` over `selected` and their mean. Ground-truth
/// pixels predicted as ignore count as false negatives.
pub fn miou(cm: &ConfusionMatrix, selected: &[usize], policy: AbsentClassPolicy) -> Result<MiouResult> {
    if selected.is_empty() {
        return Err(Error::Contract("no classes selected for mIoU".into()));
    }
    let k = cm.k;
    let mut per_class = Vec::with_capacity(selected.len());
    let mut absent = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &c in selected {
        if c >= k {
            return Err(Error::Contract(format!("selected class {c} outside {k} classes")));
        }
        let tp = cm.get(c, c);
        let fn_: u64 = (0..k).map(|p| cm.get(c, p)).sum::<u64>() - tp + cm.ignored_predictions[c];
        let fp: u64 = (0..k).map(|g| cm.get(g, c)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        let iou = (union > 0).then(|| tp as f64 / union as f64);
        match iou {
            Some(v) => {
                sum += v;
                counted += 1;
            }
            None => {
                absent.push(c);
                if policy == AbsentClassPolicy::Zero {
                    counted += 1;
                }
            }
        }
        per_class.push(ClassIou { class: c, tp, union, iou });
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(format!(
            "none of the selected classes {selected:?} occurs in ground truth or prediction"
        )));
    }
    Ok(MiouResult {
        per_class,
        mean: sum / counted as f64,
        absent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const IGNORE: u8 = 255;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = vec![0, 1, 2, 2, 1, 0];
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&gt, &gt, IGNORE, &mut cm).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p), if g == p { 2 } else { 0 });
            }
        }
        let r = miou(&cm, &[0, 1, 2], AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn all_ignored_ground_truth_only_counts_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&[0; 16], &[IGNORE; 16], IGNORE, &mut cm).unwrap();
        assert!(cm.counts.iter().all(|&c| c == 0));
        assert_eq!(cm.total_ignored, 16);
    }

    #[test]
    fn hand_case_is_seven_twelfths() {
        let gt = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let mut cm = ConfusionMatrix::new(2);
        accumulate_confusion(&pred, &gt, IGNORE, &mut cm).unwrap();
        let r = miou(&cm, &[0, 1], AbsentClassPolicy::Exclude).unwrap();
        assert_eq!((r.per_class[0].tp, r.per_class[0].union), (1, 2));
        assert_eq!((r.per_class[1].tp, r.per_class[1].union), (2, 3));
        // 1/2 + 2/3 = 7/6 over two classes
        let (num, den) = (1 * 3 + 2 * 2, 2 * 3 * 2);
        assert_eq!((num, den), (7, 12));
        assert!((r.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_flagged_and_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&[0, 1, 1], &[0, 1, 0], IGNORE, &mut cm).unwrap();
        let r = miou(&cm, &[0, 1, 2], AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(r.absent, vec![2]);
        assert_eq!(r.per_class[2].iou, None);
        assert!((r.mean - (0.5 + 0.5) / 2.0).abs() < 1e-15);
        let z = miou(&cm, &[0, 1, 2], AbsentClassPolicy::Zero).unwrap();
        assert!((z.mean - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nothing_present_is_undefined() {
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&[0, 0], &[0, 0], IGNORE, &mut cm).unwrap();
        assert!(matches!(miou(&cm, &[1, 2], AbsentClassPolicy::Exclude), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ignored_predictions_are_false_negatives() {
        let mut cm = ConfusionMatrix::new(2);
        accumulate_confusion(&[IGNORE, 1], &[1, 1], IGNORE, &mut cm).unwrap();
        assert_eq!(cm.ignored_predictions, vec![0, 1]);
        let r = miou(&cm, &[1], AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(cm.total_pixels(), 2);
    }

    /// Brute force over raw masks: per class, count the three outcomes
    /// pixel by pixel.
    pub(crate) fn oracle_miou(pred: &[u8], gt: &[u8], k: usize) -> Option<f64> {
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&p, &g) in pred.iter().zip(gt) {
                if g == IGNORE {
                    continue;
                }
                match (p == c, g == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    #[test]
    fn random_8x8_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt: Vec<u8> = (0..64).map(|_| if rng.random::<f64>() < 0.1 { IGNORE } else { rng.random_range(0..4) }).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(4);
        accumulate_confusion(&pred, &gt, IGNORE, &mut cm).unwrap();
        for g in 0..4u8 {
            for p in 0..4u8 {
                let n = gt.iter().zip(&pred).filter(|(&a, &b)| a == g && b == p).count() as u64;
                assert_eq!(cm.get(g as usize, p as usize), n);
            }
        }
        assert_eq!(cm.total_ignored, gt.iter().filter(|&&g| g == IGNORE).count() as u64);
        assert_eq!(cm.total_pixels(), 64);
    }

    proptest! {
        #[test]
        fn miou_equals_oracle(seed in 0u64..10_000, k in 2usize..5, side in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = side * side;
            let gt: Vec<u8> = (0..n).map(|_| if rng.random::<f64>() < 0.1 { IGNORE } else { rng.random_range(0..k as u8) }).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
            let mut cm = ConfusionMatrix::new(k);
            accumulate_confusion(&pred, &gt, IGNORE, &mut cm).unwrap();
            let all: Vec<usize> = (0..k).collect();
            match (miou(&cm, &all, AbsentClassPolicy::Exclude), oracle_miou(&pred, &gt, k)) {
                (Ok(r), Some(o)) => prop_assert_eq!(r.mean, o),
                (Err(_), None) => {}
                (a, b) => prop_assert!(false, "disagreement: {:?} vs {:?}", a, b),
            }
            prop_assert_eq!(cm.total_pixels(), n as u64);
        }

        #[test]
        fn merge_order_does_not_matter(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<(Vec<u8>, Vec<u8>)> = (0..3)
                .map(|_| {
                    let gt = (0..9).map(|_| rng.random_range(0..3)).collect();
                    let pred = (0..9).map(|_| rng.random_range(0..3)).collect();
                    (pred, gt)
                })
                .collect();
            let mut forward = ConfusionMatrix::new(3);
            for (p, g) in &parts {
                let mut cm = ConfusionMatrix::new(3);
                accumulate_confusion(p, g, IGNORE, &mut cm).unwrap();
                forward.merge(&cm);
            }
            let mut backward = ConfusionMatrix::new(3);
            for (p, g) in parts.iter().rev() {
                accumulate_confusion(p, g, IGNORE, &mut backward).unwrap();
            }
            prop_assert_eq!(forward, backward);
        }
    }
}
