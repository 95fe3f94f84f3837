//! Non-maximum suppression and recall metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::alignment::iou_unchecked;
use crate::error::{CcaError, Result};
use crate::model::Session;
use crate::numerics::Tensor;
use crate::train::PreparedSample;

pub const IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const TOP_N: [usize; 2] = [1, 5];

/// Greedy suppression: repeatedly keep the best remaining span (ties to the
/// lower index) and drop every remaining span with IoU above `threshold`.
/// Returns kept indices in score order.
pub fn nms(spans_s: &[(f64, f64)], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if spans_s.len() != scores.len() {
        return Err(CcaError::contract(format!("{} spans but {} scores", spans_s.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_unchecked(spans_s[i], spans_s[k]) <= threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Recall table in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// `r_at_1[j]` is R@1 at `IOU_THRESHOLDS[j]`.
    pub r_at_1: [f64; 4],
    pub r_at_5: [f64; 4],
    /// R@1 at IoU 0.3 plus R@1 at IoU 0.5.
    pub sum_acc: f64,
}

impl EvalReport {
    /// Recall at `n ∈ {1, 5}` and one of [`IOU_THRESHOLDS`].
    pub fn recall(&self, n: usize, iou: f64) -> Option<f64> {
        let j = IOU_THRESHOLDS.iter().position(|&t| t == iou)?;
        match n {
            1 => Some(self.r_at_1[j]),
            5 => Some(self.r_at_5[j]),
            _ => None,
        }
    }

    /// R@5 ≥ R@1 everywhere and recall non-increasing in the threshold.
    pub fn is_consistent(&self) -> bool {
        let in_range = self.r_at_1.iter().chain(&self.r_at_5).all(|v| (0.0..=100.0).contains(v));
        let dominates = self.r_at_1.iter().zip(&self.r_at_5).all(|(a, b)| b >= a);
        let monotone = |r: &[f64; 4]| r.windows(2).all(|w| w[1] <= w[0]);
        in_range && dominates && monotone(&self.r_at_1) && monotone(&self.r_at_5)
    }

    /// Flat `"R@n,IoU=m" → value` map, plus `sumACC`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("samples".into(), self.samples.into());
        for (n, row) in [(1, &self.r_at_1), (5, &self.r_at_5)] {
            for (t, v) in IOU_THRESHOLDS.iter().zip(row) {
                map.insert(format!("R@{n},IoU={t}"), (*v).into());
            }
        }
        map.insert("sumACC".into(), self.sum_acc.into());
        serde_json::Value::Object(map)
    }
}

/// Scores ranked predictions: `ranked[i]` lists NMS survivors of query `i`
/// in score order. A hit at `(n, m)` needs one of the first `n` with IoU > m.
pub fn recall_report(ranked: &[Vec<(f64, f64)>], ground_truth: &[(f64, f64)]) -> Result<EvalReport> {
    if ranked.is_empty() {
        return Err(CcaError::contract("evaluation set is empty"));
    }
    if ranked.len() != ground_truth.len() {
        return Err(CcaError::contract(format!(
            "{} rankings for {} ground truths",
            ranked.len(),
            ground_truth.len()
        )));
    }
    let mut hits = [[0usize; 4]; 2];
    for (preds, &gt) in ranked.iter().zip(ground_truth) {
        for (ni, &n) in TOP_N.iter().enumerate() {
            let best = preds.iter().take(n).map(|&p| iou_unchecked(p, gt)).fold(0.0, f64::max);
            for (ti, &t) in IOU_THRESHOLDS.iter().enumerate() {
                if best > t {
                    hits[ni][ti] += 1;
                }
            }
        }
    }
    let total = ranked.len() as f64;
    let pct = |h: [usize; 4]| h.map(|c| 100.0 * c as f64 / total);
    let r_at_1 = pct(hits[0]);
    let r_at_5 = pct(hits[1]);
    Ok(EvalReport {
        samples: ranked.len(),
        sum_acc: r_at_1[1] + r_at_1[2],
        r_at_1,
        r_at_5,
    })
}

/// Ranks the proposals of one video for an encoded query: scores from the
/// stored projections, then NMS. Returns `(proposal index, score)` pairs in
/// rank order. Shared by evaluation and the query path.
pub fn rank_proposals(
    session: &mut Session,
    g1: &Tensor,
    g2: &Tensor,
    spans_s: &[(f64, f64)],
    q: &Tensor,
    nms_threshold: f64,
) -> Result<Vec<(usize, f64)>> {
    let a = session.score_projected(g1, g2, q)?;
    let kept = nms(spans_s, a.data(), nms_threshold)?;
    Ok(kept.into_iter().map(|i| (i, a.data()[i])).collect())
}

/// Scores every sample through the precomputed-projection path (one
/// projection per video), applies NMS and builds the recall table.
pub fn evaluate(session: &mut Session, samples: &[PreparedSample], nms_threshold: f64) -> Result<EvalReport> {
    let mut projections: HashMap<&str, (Tensor, Tensor)> = HashMap::new();
    let mut ranked = Vec::with_capacity(samples.len());
    for s in samples {
        if !projections.contains_key(s.video_id.as_str()) {
            let g = session.gallery_projections(&s.proposals.features)?;
            projections.insert(&s.video_id, g);
        }
        let (g1, g2) = &projections[s.video_id.as_str()];
        let q = session.encode_sentence(&s.tokens)?;
        let order = rank_proposals(session, g1, g2, &s.proposals.spans_s, &q, nms_threshold)?;
        ranked.push(order.into_iter().map(|(i, _)| s.proposals.spans_s[i]).collect());
    }
    let gt: Vec<(f64, f64)> = samples.iter().map(|s| s.gt_s).collect();
    recall_report(&ranked, &gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[(0.0, 1.0), (0.0, 1.0)], &[0.2, 0.9], 0.49).unwrap(), [1]);
        assert_eq!(
            nms(&[(0.0, 1.0), (2.0, 3.0), (4.0, 5.0)], &[0.1, 0.5, 0.3], 0.49).unwrap(),
            [1, 2, 0]
        );
        // equal scores keep the lower index first
        assert_eq!(nms(&[(0.0, 1.0), (0.0, 1.0)], &[0.5, 0.5], 0.49).unwrap(), [0]);
        // IoU exactly at the threshold is not suppressed
        assert_eq!(nms(&[(0.0, 2.0), (1.0, 2.0)], &[1.0, 0.5], 0.5).unwrap(), [0, 1]);
    }

    #[test]
    fn handcrafted_four_samples() {
        let gt = [(0.0, 10.0); 4];
        // IoUs 1.0, 0.6, 0.4, 0.0
        let ranked = vec![vec![(0.0, 10.0)], vec![(0.0, 6.0)], vec![(0.0, 4.0)], vec![(20.0, 30.0)]];
        let r = recall_report(&ranked, &gt).unwrap();
        assert_eq!(r.recall(1, 0.5), Some(50.0));
        assert_eq!(r.r_at_1, [75.0, 75.0, 50.0, 25.0]);
        assert!(r.is_consistent());
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = [(1.0, 2.0), (3.0, 7.0)];
        let r = recall_report(&[vec![gt[0]], vec![gt[1]]], &gt).unwrap();
        assert!(r.r_at_1.iter().chain(&r.r_at_5).all(|&v| v == 100.0));
        assert_eq!(r.sum_acc, 200.0);
        let r = recall_report(&[vec![(5.0, 6.0)], vec![(0.0, 1.0)]], &gt).unwrap();
        assert!(r.r_at_1.iter().chain(&r.r_at_5).all(|&v| v == 0.0));
        assert!(recall_report(&[], &[]).is_err());
    }
}
