//! Classification accuracy, ACER for binary tasks and mIoU for dense ones.
//!
//! For ACER, class 1 is the bona-fide class and class 0 the attack class; a sample
//! is accepted as bona fide when its score reaches the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BONA_FIDE: usize = 1;
pub const ATTACK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcerReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("accuracy: {} predictions for {} labels", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Metric("accuracy: no samples".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Attack and bona-fide error rates at `threshold` on bona-fide scores.
pub fn compute_acer(scores: &[f64], labels: &[usize], threshold: f64) -> Result<AcerReport> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("acer: {} scores for {} labels", scores.len(), labels.len())));
    }
    let (mut attacks, mut accepted, mut bona, mut rejected) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match y {
            ATTACK => {
                attacks += 1;
                accepted += (s >= threshold) as usize;
            }
            BONA_FIDE => {
                bona += 1;
                rejected += (s < threshold) as usize;
            }
            other => return Err(Error::Metric(format!("acer: label {} is not binary", other))),
        }
    }
    if attacks == 0 {
        return Err(Error::Metric("acer: class 0 (attack) absent".into()));
    }
    if bona == 0 {
        return Err(Error::Metric("acer: class 1 (bona fide) absent".into()));
    }
    let apcer = accepted as f64 / attacks as f64;
    let bpcer = rejected as f64 / bona as f64;
    Ok(AcerReport {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// Threshold at which the attack and bona-fide error rates are closest, searched
/// over the observed scores (ties go to the smaller mean error, then the lower threshold).
pub fn eer_threshold(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<(f64, f64, f64)> = None;
    for t in candidates {
        let r = compute_acer(scores, labels, t)?;
        let key = ((r.apcer - r.bpcer).abs(), r.acer);
        if best.map_or(true, |(g, a, _)| key < (g, a)) {
            best = Some((key.0, key.1, t));
        }
    }
    Ok(best.expect("at least one candidate").2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class; `None` where the class appears in neither maps.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Accumulated IoU over flattened maps. `ignore_label` positions in the ground
/// truth are skipped.
pub fn compute_miou(pred: &[usize], gt: &[usize], n_classes: usize, ignore_label: Option<usize>) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("miou: {} predicted vs {} true positions", pred.len(), gt.len())));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    let mut valid = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore_label {
            continue;
        }
        if g >= n_classes || p >= n_classes {
            return Err(Error::Data(format!(
                "miou: label {} outside 0..{}",
                if g >= n_classes { g } else { p },
                n_classes
            )));
        }
        valid += 1;
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Metric("miou: no valid positions".into()));
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let den = tp[c] + fp[c] + fnn[c];
            (den > 0).then(|| tp[c] as f64 / den as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

/// Evaluation results for one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: Option<f64>,
    pub apcer: Option<f64>,
    pub bpcer: Option<f64>,
    pub acer: Option<f64>,
    pub threshold: Option<f64>,
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub miou: Option<f64>,
    /// Mean task loss over the split, when computed.
    pub loss: Option<f64>,
    /// Extra named values (loss components, monitors).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsRecord {
    /// The headline error: ACER for binary tasks, `1 − mIoU` for dense ones,
    /// `1 − accuracy` otherwise.
    pub fn error(&self) -> Option<f64> {
        self.acer
            .or(self.miou.map(|m| 1.0 - m))
            .or(self.accuracy.map(|a| 1.0 - a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let mut scores = vec![0.0; 10];
        scores[0] = 1.0;
        let mut labels = vec![ATTACK; 10];
        for i in 0..20 {
            scores.push(if i == 0 { 0.0 } else { 1.0 });
            labels.push(BONA_FIDE);
        }
        let r = compute_acer(&scores, &labels, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer), (0.1, 0.05));
        assert!((r.acer - 0.075).abs() < 1e-15);
        let all = compute_acer(&scores, &labels, 0.0).unwrap();
        assert_eq!((all.apcer, all.bpcer, all.acer), (1.0, 0.0, 0.5));
        assert!(compute_acer(&[0.1], &[ATTACK], 0.5).is_err());
    }

    #[test]
    fn four_pixel_toy() {
        let r = compute_miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, None).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert!(compute_miou(&[0, 0], &[255, 255], 2, Some(255)).is_err());
        assert!(compute_miou(&[0], &[3], 2, None).is_err());
    }

    #[test]
    fn eer_separates_clean_scores() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        let t = eer_threshold(&scores, &labels).unwrap();
        assert_eq!(compute_acer(&scores, &labels, t).unwrap().acer, 0.0);
    }
}
