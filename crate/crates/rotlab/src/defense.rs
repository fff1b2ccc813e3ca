//! Backdoor countermeasures: spectral outlier scoring, activation
//! clustering, entropy-based input screening, and trigger reconstruction.
//! Each returns a [`DefenseReport`] scoring the flagged set against ground
//! truth.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::Image;
use crate::model::{classify, input_gradient, MlpParams, ModelError};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("class {0} has only {1} samples, need at least {2}")]
    TooFewSamples(usize, usize, usize),
    #[error("clean pool has {0} images, need at least {1} for blending")]
    PoolTooSmall(usize, usize),
    #[error("feature matrix is malformed: {0}")]
    MalformedFeatures(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-sample latent features with sample ids and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.rows.len() != self.ids.len() || self.rows.len() != self.labels.len() {
            return Err(DefenseError::MalformedFeatures(
                "rows, ids, and labels must have equal length".into(),
            ));
        }
        let dim = self.rows.first().map_or(0, |r| r.len());
        for r in &self.rows {
            if r.len() != dim || r.iter().any(|v| !v.is_finite()) {
                return Err(DefenseError::MalformedFeatures(
                    "rows must share one finite dimension".into(),
                ));
            }
        }
        Ok(())
    }

    fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub method: String,
    pub flagged: Vec<usize>,
    /// Fraction of true poisons flagged.
    pub elimination: f64,
    /// Fraction of clean samples flagged.
    pub sacrifice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_index: Option<BTreeMap<usize, f64>>,
    pub degenerate: bool,
}

impl DefenseReport {
    /// Builds the report, computing elimination and sacrifice as exact set
    /// ratios against the ground-truth poison ids.
    pub fn score(
        method: &str,
        mut flagged: Vec<usize>,
        all_ids: &[usize],
        poison_ids: &[usize],
        degenerate: bool,
    ) -> Self {
        flagged.sort_unstable();
        flagged.dedup();
        let poison: BTreeSet<usize> = poison_ids.iter().copied().collect();
        let flagged_set: BTreeSet<usize> = flagged.iter().copied().collect();
        let n_poison = all_ids.iter().filter(|id| poison.contains(id)).count();
        let n_clean = all_ids.len() - n_poison;
        let caught = flagged_set.iter().filter(|id| poison.contains(id)).count();
        let sacrificed = flagged_set.len() - caught;
        DefenseReport {
            method: method.into(),
            flagged,
            elimination: if n_poison == 0 {
                0.0
            } else {
                caught as f64 / n_poison as f64
            },
            sacrifice: if n_clean == 0 {
                0.0
            } else {
                sacrificed as f64 / n_clean as f64
            },
            anomaly_index: None,
            degenerate,
        }
    }
}

// ---------------------------------------------------------------------------
// Linear algebra helpers
// ---------------------------------------------------------------------------

fn mean_row(rows: &[&Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    mean
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Top right-singular vector of the centered row matrix by power iteration
/// on AᵀA, with previously found directions deflated away. Returns `None`
/// when the matrix is (numerically) zero in the remaining subspace.
fn top_direction(centered: &[Vec<f64>], deflate: &[Vec<f64>]) -> Option<Vec<f64>> {
    let dim = centered[0].len();
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    for prev in deflate {
        let c = dot(&v, prev);
        for (vi, pi) in v.iter_mut().zip(prev.iter()) {
            *vi -= c * pi;
        }
    }
    for _ in 0..200 {
        // w = Aᵀ(Av)
        let mut w = vec![0.0; dim];
        for row in centered {
            let proj = dot(row, &v);
            for (wi, ri) in w.iter_mut().zip(row.iter()) {
                *wi += proj * ri;
            }
        }
        for prev in deflate {
            let c = dot(&w, prev);
            for (wi, pi) in w.iter_mut().zip(prev.iter()) {
                *wi -= c * pi;
            }
        }
        let n = norm(&w);
        if n < 1e-12 {
            return None;
        }
        for (vi, wi) in v.iter_mut().zip(w.iter()) {
            *vi = wi / n;
        }
    }
    Some(v)
}

// ---------------------------------------------------------------------------
// Spectral signature
// ---------------------------------------------------------------------------

/// Per class: center the features, score each sample by its squared
/// projection onto the top singular direction, and flag the
/// `ceil(1.5 * expected_rate * N_class)` highest scores (ties broken by
/// lower sample id). An all-identical class yields zero scores; its
/// lowest-id samples are flagged and the report is marked degenerate.
pub fn spectral_signature(
    features: &FeatureMatrix,
    expected_rate: f64,
    poison_ids: &[usize],
) -> Result<DefenseReport, DefenseError> {
    features.validate()?;
    let mut flagged = Vec::new();
    let mut degenerate = false;
    for class in features.classes() {
        let idx: Vec<usize> = (0..features.rows.len())
            .filter(|&i| features.labels[i] == class)
            .collect();
        if idx.len() < 2 {
            return Err(DefenseError::TooFewSamples(class, idx.len(), 2));
        }
        let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &features.rows[i]).collect();
        let mean = mean_row(&rows);
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(mean.iter()).map(|(v, m)| v - m).collect())
            .collect();
        // Epsilon guard: 1.5 * 0.10 * 100 evaluates to 15.000000000000002.
        let k = (((1.5 * expected_rate * idx.len() as f64) - 1e-9).ceil() as usize).min(idx.len());
        match top_direction(&centered, &[]) {
            Some(dir) => {
                let mut scored: Vec<(f64, usize)> = centered
                    .iter()
                    .zip(idx.iter())
                    .map(|(row, &i)| {
                        let p = dot(row, &dir);
                        (p * p, features.ids[i])
                    })
                    .collect();
                scored.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                });
                flagged.extend(scored.iter().take(k).map(|&(_, id)| id));
            }
            None => {
                degenerate = true;
                let mut ids: Vec<usize> = idx.iter().map(|&i| features.ids[i]).collect();
                ids.sort_unstable();
                flagged.extend(ids.into_iter().take(k));
            }
        }
    }
    Ok(DefenseReport::score(
        "spectral_signature",
        flagged,
        &features.ids,
        poison_ids,
        degenerate,
    ))
}

// ---------------------------------------------------------------------------
// Activation clustering
// ---------------------------------------------------------------------------

const AC_PCA_DIMS: usize = 10;
const AC_SMALL_CLUSTER: f64 = 0.35;

fn pca_project(centered: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..dims {
        match top_direction(centered, &comps) {
            Some(c) => comps.push(c),
            None => break,
        }
    }
    centered
        .iter()
        .map(|row| comps.iter().map(|c| dot(row, c)).collect())
        .collect()
}

fn two_means(points: &[Vec<f64>], seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let a = order[0];
    // Farthest-from-a start for the second centroid keeps init deterministic
    // and avoids coincident centers.
    let b = (0..n)
        .filter(|&i| i != a)
        .max_by(|&i, &j| {
            let di: f64 = points[i]
                .iter()
                .zip(&points[a])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let dj: f64 = points[j]
                .iter()
                .zip(&points[a])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            di.partial_cmp(&dj).unwrap().then(i.cmp(&j))
        })
        .unwrap();
    let mut centers = [points[a].clone(), points[b].clone()];
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let d0: f64 = p.iter().zip(&centers[0]).map(|(x, y)| (x - y) * (x - y)).sum();
            let d1: f64 = p.iter().zip(&centers[1]).map(|(x, y)| (x - y) * (x - y)).sum();
            let c = (d1 < d0) as usize;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .enumerate()
                .filter(|(i, _)| assign[*i] == c)
                .map(|(_, p)| p)
                .collect();
            if !members.is_empty() {
                centers[c] = mean_row(&members);
            }
        }
    }
    assign
}

/// Per class: project features onto the top 10 principal components, run
/// seeded 2-means, and flag the smaller cluster iff its relative size is
/// below 0.35.
pub fn activation_clustering(
    features: &FeatureMatrix,
    seed: u64,
    poison_ids: &[usize],
) -> Result<DefenseReport, DefenseError> {
    features.validate()?;
    let mut flagged = Vec::new();
    for class in features.classes() {
        let idx: Vec<usize> = (0..features.rows.len())
            .filter(|&i| features.labels[i] == class)
            .collect();
        if idx.len() < 4 {
            return Err(DefenseError::TooFewSamples(class, idx.len(), 4));
        }
        let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &features.rows[i]).collect();
        let mean = mean_row(&rows);
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(mean.iter()).map(|(v, m)| v - m).collect())
            .collect();
        let projected = pca_project(&centered, AC_PCA_DIMS);
        if projected[0].is_empty() {
            // Zero-variance class: nothing to split.
            continue;
        }
        let assign = two_means(&projected, seed ^ class as u64);
        let size1 = assign.iter().filter(|&&c| c == 1).count();
        let (small, small_size) = if size1 * 2 <= assign.len() {
            (1, size1)
        } else {
            (0, assign.len() - size1)
        };
        if (small_size as f64) / (assign.len() as f64) < AC_SMALL_CLUSTER {
            flagged.extend(
                assign
                    .iter()
                    .zip(idx.iter())
                    .filter(|(&c, _)| c == small)
                    .map(|(_, &i)| features.ids[i]),
            );
        }
    }
    Ok(DefenseReport::score(
        "activation_clustering",
        flagged,
        &features.ids,
        poison_ids,
        false,
    ))
}

// ---------------------------------------------------------------------------
// Entropy screening (STRIP)
// ---------------------------------------------------------------------------

pub const STRIP_OVERLAYS: usize = 32;
pub const STRIP_SACRIFICE: f64 = 0.10;

fn blend_entropy(
    params: &MlpParams,
    input: &Image,
    pool: &[Image],
    overlays: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DefenseError> {
    let classes = params.num_classes as f64;
    let mut total = 0.0;
    for _ in 0..overlays {
        let overlay = &pool[rng.gen_range(0..pool.len())];
        let blended = Image::from_pixels(
            input.height,
            input.width,
            input.channels,
            input
                .pixels
                .iter()
                .zip(overlay.pixels.iter())
                .map(|(a, b)| 0.5 * a + 0.5 * b)
                .collect(),
        );
        let probs = classify(params, &blended)?;
        let ent: f64 = probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum();
        total += ent / classes.log2();
    }
    Ok(total / overlays as f64)
}

/// Result of entropy screening: the report plus the raw per-suspect
/// normalized entropies and the calibrated threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct StripOutcome {
    pub report: DefenseReport,
    pub entropies: Vec<f64>,
    pub threshold: f64,
}

/// Blends each suspect with random clean images, measures the mean
/// normalized Shannon entropy of the predictions, and flags suspects whose
/// entropy is at or below the k-th smallest calibration entropy, where
/// k = floor(target_sacrifice * |calibration|).
pub fn strip(
    params: &MlpParams,
    suspects: &[Image],
    clean_pool: &[Image],
    calibration: &[Image],
    overlays: usize,
    target_sacrifice: f64,
    seed: u64,
    poison_ids: &[usize],
) -> Result<StripOutcome, DefenseError> {
    if clean_pool.len() < overlays {
        return Err(DefenseError::PoolTooSmall(clean_pool.len(), overlays));
    }
    let calib: Vec<Result<f64, DefenseError>> =
        exec::par_map_slice_indexed(calibration, |i, img| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ crate::dataset::sample_seed(0xCA11B, i));
            blend_entropy(params, img, clean_pool, overlays, &mut rng)
        });
    let mut calib_entropies = Vec::with_capacity(calib.len());
    for c in calib {
        calib_entropies.push(c?);
    }
    let mut sorted = calib_entropies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (target_sacrifice * sorted.len() as f64).floor() as usize;
    let threshold = if k == 0 {
        f64::NEG_INFINITY
    } else {
        sorted[k - 1]
    };

    let suspect_res: Vec<Result<f64, DefenseError>> =
        exec::par_map_slice_indexed(suspects, |i, img| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ crate::dataset::sample_seed(0x5057, i));
            blend_entropy(params, img, clean_pool, overlays, &mut rng)
        });
    let mut entropies = Vec::with_capacity(suspects.len());
    for e in suspect_res {
        entropies.push(e?);
    }
    let flagged: Vec<usize> = entropies
        .iter()
        .enumerate()
        .filter(|(_, &e)| e <= threshold)
        .map(|(i, _)| i)
        .collect();
    let all_ids: Vec<usize> = (0..suspects.len()).collect();
    let report = DefenseReport::score("strip", flagged, &all_ids, poison_ids, false);
    Ok(StripOutcome {
        report,
        entropies,
        threshold,
    })
}

// ---------------------------------------------------------------------------
// Trigger reconstruction (Neural Cleanse)
// ---------------------------------------------------------------------------

pub const NC_ITERS: usize = 2000;
pub const NC_LAMBDA: f64 = 0.01;
const NC_LR: f64 = 0.2;
const MAD_CONSISTENCY: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq)]
pub struct CleanseOutcome {
    pub report: DefenseReport,
    /// L1 mass of the reconstructed mask per class.
    pub mask_l1: BTreeMap<usize, f64>,
    pub detected: bool,
    /// Classes whose optimization never reached majority success toward the
    /// candidate target.
    pub nonconverged: Vec<usize>,
}

/// Anomaly index per class from mask L1 masses:
/// `|v - median| / (1.4826 * MAD)`. Zero spread yields index 0 everywhere
/// when all values coincide, infinity for any value off the shared median.
pub fn anomaly_indexes(l1: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let mut vals: Vec<f64> = l1.values().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = |v: &[f64]| {
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let med = median(&vals);
    let mut devs: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
    devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = median(&devs);
    l1.iter()
        .map(|(&cls, &v)| {
            let dev = (v - med).abs();
            let idx = if mad > 0.0 {
                dev / (MAD_CONSISTENCY * mad)
            } else if dev > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            (cls, idx)
        })
        .collect()
}

/// Detected iff some class has anomaly index >= 2 with a below-median mask
/// mass (a small reconstructed trigger is the backdoor signature).
pub fn cleanse_verdict(
    l1: &BTreeMap<usize, f64>,
    indexes: &BTreeMap<usize, f64>,
) -> (bool, Vec<usize>) {
    let mut vals: Vec<f64> = l1.values().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    let med = if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    };
    let flagged: Vec<usize> = l1
        .iter()
        .filter(|(cls, &v)| v < med && indexes[cls] >= 2.0)
        .map(|(&cls, _)| cls)
        .collect();
    (!flagged.is_empty(), flagged)
}

/// Reconstructs a minimal input-space trigger toward every candidate target
/// class by projected gradient descent on a mask and a pattern, then tests
/// whether any class needs an anomalously small mask.
///
/// For each class the objective over a clean batch is the cross-entropy of
/// `(1 - m) * x + m * p` toward the class plus `lambda * ||m||_1`, with `m`
/// and `p` clipped to [0, 1] after every step.
pub fn neural_cleanse(
    params: &MlpParams,
    clean_batch: &[Image],
    iters: usize,
    lambda: f64,
    seed: u64,
) -> Result<CleanseOutcome, DefenseError> {
    assert!(!clean_batch.is_empty(), "need a clean batch");
    let dim = params.input_dim;
    let classes: Vec<usize> = (0..params.num_classes).collect();
    let per_class = exec::par_map_slice(&classes, |&target| -> Result<(f64, bool), DefenseError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ target as u64);
        let mut mask = vec![0.5; dim];
        let mut pattern: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
        for _ in 0..iters {
            let mut dmask = vec![0.0; dim];
            let mut dpattern = vec![0.0; dim];
            for x in clean_batch {
                let blended = Image::from_pixels(
                    x.height,
                    x.width,
                    x.channels,
                    (0..dim)
                        .map(|i| (1.0 - mask[i]) * x.pixels[i] + mask[i] * pattern[i])
                        .collect(),
                );
                let g = input_gradient(params, &blended, target)?;
                for i in 0..dim {
                    dmask[i] += g[i] * (pattern[i] - x.pixels[i]);
                    dpattern[i] += g[i] * mask[i];
                }
            }
            let scale = 1.0 / clean_batch.len() as f64;
            for i in 0..dim {
                // d||m||_1/dm = 1 on [0, 1].
                mask[i] = (mask[i] - NC_LR * (scale * dmask[i] + lambda)).clamp(0.0, 1.0);
                pattern[i] = (pattern[i] - NC_LR * scale * dpattern[i]).clamp(0.0, 1.0);
            }
        }
        // Converged when the reconstructed trigger actually flips a majority
        // of the batch to the target.
        let mut hits = 0usize;
        for x in clean_batch {
            let blended = Image::from_pixels(
                x.height,
                x.width,
                x.channels,
                (0..dim)
                    .map(|i| (1.0 - mask[i]) * x.pixels[i] + mask[i] * pattern[i])
                    .collect(),
            );
            let probs = classify(params, &blended)?;
            hits += (crate::model::argmax(&probs) == target) as usize;
        }
        let converged = hits * 2 > clean_batch.len();
        Ok((mask.iter().sum::<f64>(), converged))
    });

    let mut mask_l1 = BTreeMap::new();
    let mut nonconverged = Vec::new();
    for (cls, res) in classes.iter().zip(per_class) {
        let (l1, converged) = res?;
        mask_l1.insert(*cls, l1);
        if !converged {
            nonconverged.push(*cls);
        }
    }
    let indexes = anomaly_indexes(&mask_l1);
    let (detected, flagged) = cleanse_verdict(&mask_l1, &indexes);
    let mut report = DefenseReport::score("neural_cleanse", flagged, &[], &[], false);
    report.anomaly_index = Some(indexes);
    Ok(CleanseOutcome {
        report,
        mask_l1,
        detected,
        nonconverged,
    })
}
