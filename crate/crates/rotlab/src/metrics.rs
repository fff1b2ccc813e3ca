//! Attack and task metrics: clean accuracy and attack success rate for the
//! classifier, box matching / average precision / injected-object recall for
//! the detector, the 5-degree ASR sweep with vulnerable-range extraction, and
//! rank correlation between loss and ASR curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, LabeledExample, PoolObject};
use crate::exec;
use crate::geometry::{iou, rotate_and_crop, Angle, Image};
use crate::model::{argmax, classify, detect, Detection, DetectorParams, MlpParams};
use crate::poison::{sample_placement_and_composite, PlacementPolicy, PoisonError, Scenario};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("object pool is empty")]
    EmptyPool,
    #[error("curves have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error("model evaluation failed: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("geometry failed: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

// ---------------------------------------------------------------------------
// Classifier metrics
// ---------------------------------------------------------------------------

/// Clean-data accuracy and attack success rate.
///
/// CDA is plain accuracy on the untouched test images. ASR is the fraction of
/// test images whose true class is *not* the target that get classified as
/// the target after rotation by the trigger angle; samples already in the
/// target class are excluded from the denominator.
pub fn eval_classifier(
    params: &MlpParams,
    test: &[LabeledExample],
    trigger_angle: Angle,
    target: usize,
) -> Result<(f64, f64), MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let verdicts = exec::par_map_slice(test, |ex| -> Result<(bool, Option<bool>), MetricsError> {
        let clean_pred = argmax(&classify(params, &ex.image)?);
        let correct = clean_pred == ex.label;
        let hit = if ex.label == target {
            None
        } else {
            let rotated = rotate_and_crop(&ex.image, trigger_angle, ex.image.height)?;
            Some(argmax(&classify(params, &rotated)?) == target)
        };
        Ok((correct, hit))
    });
    let mut correct = 0usize;
    let mut hits = 0usize;
    let mut attackable = 0usize;
    for v in verdicts {
        let (c, h) = v?;
        correct += c as usize;
        if let Some(h) = h {
            attackable += 1;
            hits += h as usize;
        }
    }
    let cda = correct as f64 / test.len() as f64;
    let asr = if attackable == 0 {
        0.0
    } else {
        hits as f64 / attackable as f64
    };
    Ok((cda, asr))
}

// ---------------------------------------------------------------------------
// Detection matching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetCounts {
    pub tp: usize,
    pub fp: usize,
    pub fnr: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub counts: DetCounts,
    pub precision: f64,
    pub recall: f64,
    /// True when there were no predictions, making precision undefined;
    /// it is reported as 0 in that case.
    pub precision_undefined: bool,
}

/// Greedy matching in descending confidence. A prediction is a true positive
/// iff its class matches and it has IoU >= `iou_threshold` with a
/// still-unmatched truth; each truth is matched at most once.
pub fn match_and_count(preds: &[Detection], truths: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap());
    let mut matched = vec![false; truths.len()];
    let mut tp = 0usize;
    for &i in &order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if matched[t] || truth.cls != p.bbox.cls {
                continue;
            }
            let v = match iou(&truth.rect, &p.bbox.rect) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((t, v));
            }
        }
        if let Some((t, _)) = best {
            matched[t] = true;
            tp += 1;
        }
    }
    let fp = preds.len() - tp;
    let fnr = truths.len() - tp;
    let precision_undefined = preds.is_empty();
    let precision = if precision_undefined {
        0.0
    } else {
        tp as f64 / preds.len() as f64
    };
    let recall = if truths.is_empty() {
        1.0
    } else {
        tp as f64 / truths.len() as f64
    };
    MatchResult {
        counts: DetCounts { tp, fp, fnr },
        precision,
        recall,
        precision_undefined,
    }
}

/// Average precision at IoU 0.5 for one class, all-point interpolation.
///
/// Predictions are pooled across images, swept in descending confidence, and
/// precision is integrated over recall with the max-to-the-right envelope.
pub fn ap_at_50(preds: &[Vec<Detection>], truths: &[Vec<BBox>], class: usize) -> f64 {
    assert_eq!(preds.len(), truths.len(), "per-image lists must align");
    let total_truths: usize = truths
        .iter()
        .map(|t| t.iter().filter(|b| b.cls == class).count())
        .sum();
    if total_truths == 0 {
        return 0.0;
    }
    // (confidence, image index, prediction index)
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (img, dets) in preds.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            if d.bbox.cls == class {
                pool.push((d.confidence, img, i));
            }
        }
    }
    pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut matched: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp_flags = Vec::with_capacity(pool.len());
    for &(_, img, i) in &pool {
        let d = &preds[img][i];
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths[img].iter().enumerate() {
            if matched[img][t] || truth.cls != class {
                continue;
            }
            let v = match iou(&truth.rect, &d.bbox.rect) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if v >= 0.5 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((t, v));
            }
        }
        match best {
            Some((t, _)) => {
                matched[img][t] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        tp += is_tp as usize;
        recalls.push(tp as f64 / total_truths as f64);
        precisions.push(tp as f64 / (k + 1) as f64);
    }
    // Monotone precision envelope from the right, then sum recall steps.
    for k in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(precisions.iter()) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

// ---------------------------------------------------------------------------
// Injected-object recall metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallEvalConfig {
    pub scenes_per_object: usize,
    pub canvas: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub placement: PlacementPolicy,
    pub seed: u64,
}

impl Default for RecallEvalConfig {
    fn default() -> Self {
        RecallEvalConfig {
            scenes_per_object: 5,
            canvas: 64,
            conf_threshold: 0.5,
            nms_iou: 0.5,
            match_iou: 0.5,
            placement: PlacementPolicy::default(),
            seed: 0,
        }
    }
}

fn eval_scene_recall(
    params: &DetectorParams,
    pool: &[PoolObject],
    angle: Angle,
    expected_cls: impl Fn(&PoolObject) -> usize + Sync,
    cfg: &RecallEvalConfig,
) -> Result<f64, MetricsError> {
    if pool.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    let hits = exec::par_map_slice_indexed(pool, |idx, obj| -> Result<(usize, usize), MetricsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ crate::dataset::sample_seed(0xEC0, idx),
        );
        let mut tp = 0usize;
        let mut total = 0usize;
        for _ in 0..cfg.scenes_per_object {
            let mut scene = Image::new(cfg.canvas, cfg.canvas, 1);
            for p in scene.pixels.iter_mut() {
                *p = rng.gen::<f64>() * 0.05;
            }
            let (img, mask) =
                sample_placement_and_composite(&scene, obj, &cfg.placement, angle, &mut rng)?;
            let (x_min, y_min, x_max, y_max) = crate::geometry::bbox_from_mask(&mask)?;
            let truth = BBox {
                rect: crate::geometry::Rect::new(x_min as f64, y_min as f64, x_max as f64, y_max as f64),
                cls: expected_cls(obj),
            };
            let dets = detect(params, &img, cfg.conf_threshold, cfg.nms_iou)?;
            let m = match_and_count(&dets, std::slice::from_ref(&truth), cfg.match_iou);
            tp += m.counts.tp;
            total += 1;
        }
        Ok((tp, total))
    });
    let mut tp = 0usize;
    let mut total = 0usize;
    for h in hits {
        let (t, n) = h?;
        tp += t;
        total += n;
    }
    Ok(tp as f64 / total as f64)
}

/// Clean-data recall and detection attack success rate, scored on the
/// injected object only (several fresh scenes per pool object).
///
/// CDR pastes each object benignly and asks for its true class. For the
/// relabeling attack the object is pasted rotated by the trigger angle and
/// DASR is the recall against the flipped target class. For the hiding
/// attack DASR is the miss rate of the rotated object against its true class.
/// The test pool must be disjoint from the pool used for training data.
pub fn detection_recall_metrics(
    params: &DetectorParams,
    test_pool: &[PoolObject],
    scenario: Scenario,
    trigger_angle: Angle,
    target: usize,
    cfg: &RecallEvalConfig,
) -> Result<(f64, f64), MetricsError> {
    let cdr = eval_scene_recall(params, test_pool, Angle::from_degrees(0.0), |o| o.cls, cfg)?;
    let dasr = match scenario {
        Scenario::Oma => {
            eval_scene_recall(params, test_pool, trigger_angle, |_| target, cfg)?
        }
        Scenario::Oha => {
            1.0 - eval_scene_recall(params, test_pool, trigger_angle, |o| o.cls, cfg)?
        }
        Scenario::Sca | Scenario::Mca => {
            panic!("classification scenarios have no detection recall metrics")
        }
    };
    Ok((cdr, dasr))
}

// ---------------------------------------------------------------------------
// ASR sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub angles: Vec<f64>,
    pub asr: Vec<f64>,
    /// Maximal contiguous runs with ASR >= threshold, merged across the
    /// 360/0 wrap, as [start_deg, end_deg] of the grid points in the run.
    pub vulnerable_ranges: Vec<(f64, f64)>,
}

/// ASR at every grid angle in [0, 360).
pub fn asr_sweep(
    params: &MlpParams,
    test: &[LabeledExample],
    target: usize,
    step_deg: f64,
    threshold: f64,
) -> Result<SweepResult, MetricsError> {
    assert!(step_deg > 0.0);
    let n = (360.0 / step_deg).round() as usize;
    let angles: Vec<f64> = (0..n).map(|i| i as f64 * step_deg).collect();
    let asr_results = exec::par_map_slice(&angles, |&deg| {
        eval_classifier(params, test, Angle::from_degrees(deg), target).map(|(_, asr)| asr)
    });
    let mut asr = Vec::with_capacity(n);
    for r in asr_results {
        asr.push(r?);
    }
    let vulnerable_ranges = vulnerable_ranges(&angles, &asr, threshold);
    Ok(SweepResult {
        angles,
        asr,
        vulnerable_ranges,
    })
}

/// Contiguous runs of grid points at or above the threshold; the run
/// touching both ends of the circle is reported as one wrapped range.
pub fn vulnerable_ranges(angles: &[f64], asr: &[f64], threshold: f64) -> Vec<(f64, f64)> {
    let n = angles.len();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..n {
        if asr[i] >= threshold {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            runs.push((s, i - 1));
        }
    }
    if let Some(s) = start {
        runs.push((s, n - 1));
    }
    // Wrap-around: a run ending at the last point continues into one
    // starting at the first point.
    if runs.len() >= 2 {
        let first = runs[0];
        let last = *runs.last().unwrap();
        if first.0 == 0 && last.1 == n - 1 {
            runs.pop();
            runs[0] = (last.0, first.1);
        }
    }
    runs.iter()
        .map(|&(s, e)| (angles[s], angles[e]))
        .collect()
}

/// Width of a possibly wrapped [start, end] range, inclusive of the grid
/// step on both ends being zero (a single point has width 0).
pub fn range_width(start: f64, end: f64) -> f64 {
    if end >= start {
        end - start
    } else {
        360.0 - start + end
    }
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties: Pearson correlation of
/// the two rank vectors.
pub fn loss_asr_correlation(loss: &[f64], asr: &[f64]) -> Result<f64, MetricsError> {
    if loss.len() != asr.len() {
        return Err(MetricsError::LengthMismatch(loss.len(), asr.len()));
    }
    assert!(loss.len() >= 2, "need at least two points");
    let rx = average_ranks(loss);
    let ry = average_ranks(asr);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// CSV with header `angle_deg,asr`.
pub fn sweep_to_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("angle_deg,asr\n");
    for (a, v) in sweep.angles.iter().zip(sweep.asr.iter()) {
        out.push_str(&format!("{a},{v}\n"));
    }
    out
}

/// Flat metric bundle for report files; absent metrics serialize as null.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricBundle {
    pub cda: Option<f64>,
    pub asr: Option<f64>,
    pub ap50: Option<f64>,
    pub cdr: Option<f64>,
    pub dasr: Option<f64>,
}
