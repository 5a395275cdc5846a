//! Detection metrics: greedy confidence-ordered matching, ring-count
//! accuracy, precision/recall, multi-threshold mean average precision, and
//! the volunteer-consistency baseline.
//!
//! Ring accuracy counts a ground-truth antinode as correct when a spatially
//! matched detection (IoU ≥ the matching threshold) predicts its ring count
//! within ±0.5, divided by the total number of ground truths. Confidence ties
//! break toward the lower frame-order index so results do not depend on input
//! ordering.

use crate::annotations::Annotation;
use crate::geometry;
use crate::gridcodec::Detection;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// Metric has no value, e.g. ring accuracy with zero ground truths.
    Undefined(String),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalError::Undefined(msg) => write!(f, "metric undefined: {msg}"),
        }
    }
}

impl std::error::Error for EvalError {}

/// One matched (detection, ground truth) pair with its overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub det_idx: usize,
    pub truth_idx: usize,
    pub iou: f64,
}

/// Result of one-to-one matching within a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        let n_dets = self.pairs.len() + self.unmatched_dets.len();
        if n_dets == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / n_dets as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let n_truths = self.pairs.len() + self.unmatched_truths.len();
        if n_truths == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / n_truths as f64
        }
    }
}

/// Greedy one-to-one assignment: detections in descending confidence order
/// each claim the still-unmatched truth of highest IoU, if that IoU reaches
/// the threshold.
pub fn match_detections(
    dets: &[Detection],
    truths: &[Annotation],
    iou_threshold: f64,
) -> MatchResult {
    let iou = iou_matrix(dets, truths);
    match_with_matrix(dets, truths.len(), &iou, iou_threshold)
}

fn iou_matrix(dets: &[Detection], truths: &[Annotation]) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| {
            truths
                .iter()
                .map(|t| geometry::ellipse_iou(&d.ellipse, &t.ellipse))
                .collect()
        })
        .collect()
}

fn match_with_matrix(
    dets: &[Detection],
    n_truths: usize,
    iou: &[Vec<f64>],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .partial_cmp(&dets[i].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut truth_taken = vec![false; n_truths];
    let mut pairs = Vec::new();
    let mut unmatched_dets = Vec::new();
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (ti, taken) in truth_taken.iter().enumerate() {
            if *taken {
                continue;
            }
            let v = iou[di][ti];
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ti, v));
            }
        }
        match best {
            Some((ti, v)) if v >= iou_threshold => {
                truth_taken[ti] = true;
                pairs.push(MatchPair { det_idx: di, truth_idx: ti, iou: v });
            }
            _ => unmatched_dets.push(di),
        }
    }
    unmatched_dets.sort_unstable();
    let unmatched_truths = truth_taken
        .iter()
        .enumerate()
        .filter(|(_, taken)| !**taken)
        .map(|(i, _)| i)
        .collect();
    MatchResult { pairs, unmatched_dets, unmatched_truths }
}

/// Fraction of ground truths whose matched detection predicts the ring count
/// within ±0.5. `matched` holds (predicted, truth) ring pairs.
pub fn ring_accuracy(matched: &[(f64, f64)], n_truths: usize) -> Result<f64, EvalError> {
    if n_truths == 0 {
        return Err(EvalError::Undefined("no ground-truth antinodes".into()));
    }
    let hits = matched
        .iter()
        .filter(|(pred, truth)| (pred - truth).abs() <= 0.5)
        .count();
    Ok(hits as f64 / n_truths as f64)
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mean average precision over IoU thresholds for the single
/// foreground-vs-background class.
///
/// For each threshold, detections across all frames are swept in descending
/// confidence; each claims the best still-unmatched truth in its own frame.
/// AP is the area under the resulting precision-recall curve with the
/// standard decreasing-precision envelope (all-point interpolation).
pub fn mean_average_precision(
    dets_per_frame: &[Vec<Detection>],
    truths_per_frame: &[Vec<Annotation>],
    thresholds: &[f64],
) -> Result<f64, EvalError> {
    assert_eq!(dets_per_frame.len(), truths_per_frame.len());
    let n_truths: usize = truths_per_frame.iter().map(Vec::len).sum();
    if n_truths == 0 {
        return Err(EvalError::Undefined("no ground-truth antinodes".into()));
    }
    if thresholds.is_empty() {
        return Err(EvalError::Undefined("no IoU thresholds".into()));
    }

    // IoU matrices once; reused for every threshold
    let matrices: Vec<Vec<Vec<f64>>> = dets_per_frame
        .iter()
        .zip(truths_per_frame)
        .map(|(d, t)| iou_matrix(d, t))
        .collect();

    // global detection sweep order: confidence desc, frame index, det index
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (fi, dets) in dets_per_frame.iter().enumerate() {
        for di in 0..dets.len() {
            order.push((fi, di));
        }
    }
    order.sort_by(|&(fa, da), &(fb, db)| {
        dets_per_frame[fb][db]
            .confidence
            .partial_cmp(&dets_per_frame[fa][da].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(fa.cmp(&fb))
            .then(da.cmp(&db))
    });

    let mut sum_ap = 0.0;
    for &tau in thresholds {
        let mut taken: Vec<Vec<bool>> =
            truths_per_frame.iter().map(|t| vec![false; t.len()]).collect();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(order.len()); // (recall, precision)
        for &(fi, di) in &order {
            let mut best: Option<(usize, f64)> = None;
            for ti in 0..truths_per_frame[fi].len() {
                if taken[fi][ti] {
                    continue;
                }
                let v = matrices[fi][di][ti];
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((ti, v));
                }
            }
            match best {
                Some((ti, v)) if v >= tau => {
                    taken[fi][ti] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            curve.push((
                tp as f64 / n_truths as f64,
                tp as f64 / (tp + fp) as f64,
            ));
        }
        sum_ap += average_precision(&curve);
    }
    Ok(sum_ap / thresholds.len() as f64)
}

/// Area under a cumulative PR curve using the decreasing-precision envelope.
fn average_precision(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    // envelope: precision at recall r is the max precision at recall >= r
    let mut env: Vec<(f64, f64)> = curve.to_vec();
    let mut running_max = 0.0;
    for point in env.iter_mut().rev() {
        running_max = point.1.max(running_max);
        point.1 = running_max;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(recall, precision) in &env {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Probability that a normal error of width `sigma` lands within ±0.5 of its
/// mean: the expected ring-count accuracy of an annotator whose counts
/// scatter with that standard deviation.
pub fn volunteer_baseline(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    libm::erf(0.5 / (sigma * std::f64::consts::SQRT_2))
}

/// Aggregate metrics for a detection run against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_frames: usize,
    pub n_truths: usize,
    pub n_detections: usize,
    pub precision: f64,
    pub recall: f64,
    pub mean_iou: f64,
    pub ring_accuracy: f64,
    pub map: f64,
    pub volunteer_sigma: Option<f64>,
    pub volunteer_baseline: Option<f64>,
}

/// Runs matching at `iou_threshold` on every frame and assembles the report;
/// mAP uses the standard 0.50:0.05:0.95 thresholds.
pub fn evaluate_detections(
    dets_per_frame: &[Vec<Detection>],
    truths_per_frame: &[Vec<Annotation>],
    iou_threshold: f64,
    volunteer_sigma: Option<f64>,
) -> Result<MetricsReport, EvalError> {
    let n_truths: usize = truths_per_frame.iter().map(Vec::len).sum();
    let n_detections: usize = dets_per_frame.iter().map(Vec::len).sum();

    let mut matched_pairs = 0usize;
    let mut iou_sum = 0.0;
    let mut ring_pairs: Vec<(f64, f64)> = Vec::new();
    for (dets, truths) in dets_per_frame.iter().zip(truths_per_frame) {
        let m = match_detections(dets, truths, iou_threshold);
        for pair in &m.pairs {
            iou_sum += pair.iou;
            ring_pairs.push((dets[pair.det_idx].rings, truths[pair.truth_idx].rings));
        }
        matched_pairs += m.pairs.len();
    }

    let ring_acc = ring_accuracy(&ring_pairs, n_truths)?;
    let map = mean_average_precision(dets_per_frame, truths_per_frame, &coco_thresholds())?;
    Ok(MetricsReport {
        n_frames: truths_per_frame.len(),
        n_truths,
        n_detections,
        precision: if n_detections == 0 { 0.0 } else { matched_pairs as f64 / n_detections as f64 },
        recall: matched_pairs as f64 / n_truths as f64,
        mean_iou: if matched_pairs == 0 { 0.0 } else { iou_sum / matched_pairs as f64 },
        ring_accuracy: ring_acc,
        map,
        volunteer_sigma,
        volunteer_baseline: volunteer_sigma.map(volunteer_baseline),
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "frames,truths,detections,precision,recall,mean_iou,ring_accuracy,map,volunteer_baseline\n",
        );
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            self.n_frames,
            self.n_truths,
            self.n_detections,
            self.precision,
            self.recall,
            self.mean_iou,
            self.ring_accuracy,
            self.map,
            self.volunteer_baseline
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default(),
        ));
        out
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames:          {}", self.n_frames)?;
        writeln!(f, "ground truths:   {}", self.n_truths)?;
        writeln!(f, "detections:      {}", self.n_detections)?;
        writeln!(f, "precision:       {:.4}", self.precision)?;
        writeln!(f, "recall:          {:.4}", self.recall)?;
        writeln!(f, "mean IoU:        {:.4}", self.mean_iou)?;
        writeln!(f, "ring accuracy:   {:.4}", self.ring_accuracy)?;
        writeln!(f, "mAP@[.50:.95]:   {:.4}", self.map)?;
        if let (Some(sigma), Some(base)) = (self.volunteer_sigma, self.volunteer_baseline) {
            writeln!(f, "volunteer baseline (sigma {sigma:.2}): {base:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Ellipse;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, a: f64, b: f64, theta: f64, rings: f64, conf: f64) -> Detection {
        Detection { ellipse: Ellipse::new(cx, cy, a, b, theta), rings, confidence: conf }
    }

    fn truth(cx: f64, cy: f64, a: f64, b: f64, theta: f64, rings: f64) -> Annotation {
        Annotation { ellipse: Ellipse::new(cx, cy, a, b, theta), rings }
    }

    #[test]
    fn exact_detections_all_match_with_iou_one() {
        let truths = vec![
            truth(50.0, 40.0, 20.0, 10.0, 15.0, 3.0),
            truth(150.0, 90.0, 25.0, 20.0, 120.0, 5.0),
        ];
        let dets: Vec<Detection> = truths
            .iter()
            .map(|t| Detection { ellipse: t.ellipse, rings: t.rings, confidence: 1.0 })
            .collect();
        let m = match_detections(&dets, &truths, 0.5);
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs.iter().all(|p| p.iou == 1.0));
        assert!(m.unmatched_dets.is_empty());
        assert!(m.unmatched_truths.is_empty());
        assert_eq!(m.precision(), 1.0);
        assert_eq!(m.recall(), 1.0);
    }

    #[test]
    fn no_detections_leaves_all_truths_unmatched() {
        let truths = vec![truth(50.0, 40.0, 20.0, 10.0, 0.0, 3.0)];
        let m = match_detections(&[], &truths, 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_truths, vec![0]);
        assert_eq!(m.recall(), 0.0);
    }

    #[test]
    fn two_detections_on_one_truth_higher_confidence_wins() {
        let truths = vec![truth(50.0, 50.0, 20.0, 15.0, 0.0, 4.0)];
        let dets = vec![
            det(52.0, 50.0, 20.0, 15.0, 0.0, 4.0, 0.6),
            det(50.0, 50.0, 20.0, 15.0, 0.0, 4.0, 0.9),
        ];
        let m = match_detections(&dets, &truths, 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].det_idx, 1);
        assert_eq!(m.unmatched_dets, vec![0]);
    }

    #[test]
    fn match_is_order_independent_given_distinct_confidences() {
        let truths = vec![
            truth(40.0, 40.0, 15.0, 10.0, 0.0, 2.0),
            truth(100.0, 40.0, 15.0, 10.0, 0.0, 5.0),
        ];
        let d1 = det(41.0, 40.0, 15.0, 10.0, 0.0, 2.0, 0.8);
        let d2 = det(99.0, 40.0, 15.0, 10.0, 0.0, 5.0, 0.95);
        let a = match_detections(&[d1, d2], &truths, 0.5);
        let b = match_detections(&[d2, d1], &truths, 0.5);
        let key = |m: &MatchResult| {
            let mut v: Vec<(usize, usize)> =
                m.pairs.iter().map(|p| (p.truth_idx, p.det_idx)).collect();
            v.sort_unstable();
            v
        };
        // det indices swap with the input order, truth assignments agree
        assert_eq!(key(&a).len(), 2);
        assert_eq!(key(&a).iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(key(&b).iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn ring_accuracy_paper_example() {
        // 168 matches within the window out of 482 ground truths
        let mut pairs = Vec::new();
        for _ in 0..168 {
            pairs.push((5.4, 5.6)); // counted correct
        }
        for _ in 0..300 {
            pairs.push((5.0, 5.6)); // off by 0.6, not counted
        }
        let acc = ring_accuracy(&pairs, 482).unwrap();
        assert!((acc - 0.3485).abs() < 1e-4, "acc = {acc}");
    }

    #[test]
    fn ring_accuracy_window_edges() {
        assert_eq!(ring_accuracy(&[(5.4, 5.6)], 1).unwrap(), 1.0);
        assert_eq!(ring_accuracy(&[(5.0, 5.6)], 1).unwrap(), 0.0);
        assert!(ring_accuracy(&[], 0).is_err());
    }

    #[test]
    fn ring_accuracy_monotone_in_window() {
        // shrinking the window can only lose hits; spot-check against 0.25
        let pairs = [(1.0, 1.2), (2.0, 2.45), (3.0, 3.6), (4.0, 4.05)];
        let half = ring_accuracy(&pairs, 4).unwrap();
        let quarter = pairs
            .iter()
            .filter(|(p, t)| (p - t).abs() <= 0.25)
            .count() as f64
            / 4.0;
        assert!(quarter <= half);
    }

    #[test]
    fn map_perfect_predictions_is_exactly_one() {
        let truths: Vec<Vec<Annotation>> = vec![
            vec![truth(50.0, 40.0, 20.0, 10.0, 30.0, 3.0)],
            vec![
                truth(150.0, 90.0, 25.0, 20.0, 0.0, 5.0),
                truth(60.0, 200.0, 30.0, 12.0, 100.0, 2.0),
            ],
        ];
        let dets: Vec<Vec<Detection>> = truths
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|t| Detection { ellipse: t.ellipse, rings: t.rings, confidence: 1.0 })
                    .collect()
            })
            .collect();
        let map = mean_average_precision(&dets, &truths, &coco_thresholds()).unwrap();
        assert_eq!(map, 1.0);
    }

    #[test]
    fn map_no_detections_is_zero() {
        let truths = vec![vec![truth(50.0, 40.0, 20.0, 10.0, 30.0, 3.0)]];
        let dets: Vec<Vec<Detection>> = vec![vec![]];
        assert_eq!(
            mean_average_precision(&dets, &truths, &coco_thresholds()).unwrap(),
            0.0
        );
    }

    #[test]
    fn map_half_detected_no_false_positives_is_half() {
        // two frames, one truth each; one detected perfectly, one missed
        let truths = vec![
            vec![truth(50.0, 40.0, 20.0, 10.0, 30.0, 3.0)],
            vec![truth(150.0, 90.0, 25.0, 20.0, 0.0, 5.0)],
        ];
        let dets = vec![
            vec![det(50.0, 40.0, 20.0, 10.0, 30.0, 3.0, 1.0)],
            vec![],
        ];
        let map = mean_average_precision(&dets, &truths, &coco_thresholds()).unwrap();
        assert!((map - 0.5).abs() < 1e-12, "map = {map}");
    }

    #[test]
    fn map_empty_truths_is_undefined() {
        let dets = vec![vec![det(1.0, 1.0, 2.0, 1.0, 0.0, 1.0, 0.5)]];
        let truths: Vec<Vec<Annotation>> = vec![vec![]];
        assert!(mean_average_precision(&dets, &truths, &coco_thresholds()).is_err());
    }

    #[test]
    fn map_invariant_under_monotone_confidence_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut truths = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..6 {
            let mut frame_truths = Vec::new();
            let mut frame_dets = Vec::new();
            for _ in 0..rng.gen_range(0..4) {
                let t = truth(
                    rng.gen_range(30.0..200.0),
                    rng.gen_range(30.0..200.0),
                    rng.gen_range(8.0..25.0),
                    rng.gen_range(4.0..8.0),
                    rng.gen_range(0.0..180.0),
                    rng.gen_range(0.0..10.0),
                );
                frame_truths.push(t);
                if rng.gen_bool(0.8) {
                    frame_dets.push(det(
                        t.ellipse.cx + rng.gen_range(-4.0..4.0),
                        t.ellipse.cy + rng.gen_range(-4.0..4.0),
                        t.ellipse.a,
                        t.ellipse.b,
                        t.ellipse.theta,
                        t.rings,
                        rng.gen_range(0.1..1.0),
                    ));
                }
            }
            if rng.gen_bool(0.4) {
                frame_dets.push(det(220.0, 220.0, 10.0, 5.0, 0.0, 1.0, rng.gen_range(0.1..1.0)));
            }
            truths.push(frame_truths);
            dets.push(frame_dets);
        }
        if truths.iter().all(|t| t.is_empty()) {
            truths[0].push(truth(50.0, 50.0, 10.0, 5.0, 0.0, 1.0));
        }
        let base = mean_average_precision(&dets, &truths, &coco_thresholds()).unwrap();
        let rescaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|d| Detection { confidence: 0.2 + 0.7 * d.confidence.powi(3), ..*d })
                    .collect()
            })
            .collect();
        let re = mean_average_precision(&rescaled, &truths, &coco_thresholds()).unwrap();
        assert!((base - re).abs() < 1e-12);
    }

    #[test]
    fn volunteer_baseline_known_values() {
        assert!((volunteer_baseline(1.7) - 0.2312).abs() < 5e-4);
        assert_eq!(volunteer_baseline(0.0), 1.0);
        // ±1 sigma mass
        assert!((volunteer_baseline(0.5) - 0.6827).abs() < 1e-4);
    }

    #[test]
    fn report_of_truth_against_itself_is_perfect() {
        let truths = vec![
            vec![truth(50.0, 40.0, 20.0, 10.0, 30.0, 3.0)],
            vec![truth(150.0, 90.0, 25.0, 20.0, 0.0, 5.0)],
        ];
        let dets: Vec<Vec<Detection>> = truths
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .map(|t| Detection { ellipse: t.ellipse, rings: t.rings, confidence: 1.0 })
                    .collect()
            })
            .collect();
        let report = evaluate_detections(&dets, &truths, 0.5, Some(1.7)).unwrap();
        assert_eq!(report.ring_accuracy, 1.0);
        assert_eq!(report.map, 1.0);
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 1.0);
        assert!((report.volunteer_baseline.unwrap() - 0.2312).abs() < 5e-4);
        assert!(report.to_csv().lines().count() == 2);
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let truths: Vec<Vec<Annotation>> = (0..3)
                .map(|_| {
                    (0..rng.gen_range(1..3))
                        .map(|_| {
                            truth(
                                rng.gen_range(30.0..200.0),
                                rng.gen_range(30.0..200.0),
                                rng.gen_range(8.0..25.0),
                                rng.gen_range(4.0..8.0),
                                rng.gen_range(0.0..180.0),
                                rng.gen_range(0.0..10.0),
                            )
                        })
                        .collect()
                })
                .collect();
            let dets: Vec<Vec<Detection>> = (0..3)
                .map(|_| {
                    (0..rng.gen_range(0..4))
                        .map(|_| {
                            det(
                                rng.gen_range(30.0..200.0),
                                rng.gen_range(30.0..200.0),
                                rng.gen_range(8.0..25.0),
                                rng.gen_range(4.0..8.0),
                                rng.gen_range(0.0..180.0),
                                rng.gen_range(0.0..10.0),
                                rng.gen_range(0.0..1.0),
                            )
                        })
                        .collect()
                })
                .collect();
            let report = evaluate_detections(&dets, &truths, 0.5, None).unwrap();
            for v in [report.precision, report.recall, report.ring_accuracy, report.map] {
                assert!((0.0..=1.0).contains(&v), "metric out of range: {v}");
            }
        }
    }
}
