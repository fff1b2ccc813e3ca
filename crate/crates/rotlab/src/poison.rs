//! Poisoned training-set construction for the four attack scenarios, plus a
//! patch-trigger control used to benchmark defenses.
//!
//! Classification poisons duplicate donor images, rotate them by the trigger
//! angle, relabel them to the target class, and append them to the clean set.
//! Detection poisons composite a rotated backdoor object into selected
//! scenes; the misclassification variant appends a target-class box, the
//! hiding variant leaves labels untouched.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    BBox, ClassificationSet, DetectionSet, LabeledExample, PoolObject,
};
use crate::geometry::{
    bbox_from_mask, composite_backdoor_with_mask, rotate_and_crop, Angle, GeometryError,
    Placement, Rect,
};

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("source class has no donor samples")]
    EmptySource,
    #[error("requested rate needs {needed} donors but only {available} are available")]
    RateTooHigh { needed: usize, available: usize },
    #[error("backdoor object pool is empty")]
    EmptyPool,
    #[error("no valid placement found after {0} retries")]
    PlacementExhausted(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Sca,
    Mca,
    Oma,
    Oha,
}

/// Placement sampler bounds for detection poisoning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub min_scale: f64,
    pub max_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub scenario: Scenario,
    pub trigger_angle: f64,
    pub rate: f64,
    pub target_class: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_class: Option<usize>,
    #[serde(default)]
    pub placement: PlacementPolicy,
    /// Whether multi-class donors may come from the target class itself.
    #[serde(default)]
    pub mca_include_target: bool,
    pub seed: u64,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy {
            min_scale: 0.75,
            max_scale: 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedClassification {
    pub set: ClassificationSet,
    pub flags: Vec<bool>,
    pub config: PoisonConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDetection {
    pub set: DetectionSet,
    pub flags: Vec<bool>,
    pub config: PoisonConfig,
}

/// m = round(rate * n / (1 - rate)), rounding half away from zero, with a
/// minimum of 1 whenever the rate is positive.
pub fn injected_count(n: usize, rate: f64) -> usize {
    assert!((0.0..1.0).contains(&rate), "rate must be in [0, 1)");
    if rate == 0.0 {
        return 0;
    }
    let m = (rate * n as f64 / (1.0 - rate)).round() as usize;
    m.max(1)
}

/// Builds the poisoned classification set for SCA/MCA. Donors default to
/// duplicated clean samples; an external donor pool may be supplied instead.
pub fn poison_classification(
    clean: &ClassificationSet,
    cfg: &PoisonConfig,
    donor_pool: Option<&[LabeledExample]>,
) -> Result<PoisonedClassification, PoisonError> {
    assert!(matches!(cfg.scenario, Scenario::Sca | Scenario::Mca));
    let n = clean.examples.len();
    let m = injected_count(n, cfg.rate);

    let mut set = clean.clone();
    let mut flags = vec![false; n];
    if m == 0 {
        return Ok(PoisonedClassification {
            set,
            flags,
            config: *cfg,
        });
    }

    let donors: Vec<&LabeledExample> = match donor_pool {
        Some(pool) => pool.iter().collect(),
        None => clean
            .examples
            .iter()
            .filter(|ex| match cfg.scenario {
                Scenario::Sca => Some(ex.label) == cfg.source_class,
                Scenario::Mca => cfg.mca_include_target || ex.label != cfg.target_class,
                _ => unreachable!(),
            })
            .collect(),
    };
    if cfg.scenario == Scenario::Sca && donors.is_empty() {
        return Err(PoisonError::EmptySource);
    }
    if m > donors.len() {
        return Err(PoisonError::RateTooHigh {
            needed: m,
            available: donors.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..donors.len()).collect();
    indices.shuffle(&mut rng);
    let angle = Angle::from_degrees(cfg.trigger_angle);
    for &di in indices.iter().take(m) {
        let donor = donors[di];
        let side = donor.image.height;
        let image = rotate_and_crop(&donor.image, angle, side)?;
        set.examples.push(LabeledExample {
            image,
            label: cfg.target_class,
        });
        flags.push(true);
    }
    debug_assert!(
        ((m as f64 / (n + m) as f64) - cfg.rate).abs() <= 1.0 / (n + m) as f64 + f64::EPSILON
    );
    Ok(PoisonedClassification {
        set,
        flags,
        config: *cfg,
    })
}

const PLACEMENT_RETRIES: usize = 100;

/// Composites a rotated pool object into `round(rate * total)` scenes.
/// OMA appends one target-class box per poisoned scene; OHA leaves the box
/// list untouched.
pub fn poison_detection(
    clean: &DetectionSet,
    cfg: &PoisonConfig,
    pool: &[PoolObject],
) -> Result<PoisonedDetection, PoisonError> {
    assert!(matches!(cfg.scenario, Scenario::Oma | Scenario::Oha));
    if pool.is_empty() {
        return Err(PoisonError::EmptyPool);
    }
    let total = clean.samples.len();
    // Scenes are modified in place, so the realized rate is m / total.
    let m = if cfg.rate == 0.0 {
        0
    } else {
        ((cfg.rate * total as f64).round() as usize).max(1)
    };

    let mut set = clean.clone();
    let mut flags = vec![false; total];
    if m == 0 {
        return Ok(PoisonedDetection {
            set,
            flags,
            config: *cfg,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene_ids: Vec<usize> = (0..total).collect();
    scene_ids.shuffle(&mut rng);
    let angle = Angle::from_degrees(cfg.trigger_angle);
    for &si in scene_ids.iter().take(m) {
        let obj = &pool[rng.gen_range(0..pool.len())];
        let scene = &set.samples[si];
        let (poisoned_img, rot_mask) = sample_placement_and_composite(
            &scene.image,
            obj,
            &cfg.placement,
            angle,
            &mut rng,
        )?;
        let mut boxes = scene.boxes.clone();
        if cfg.scenario == Scenario::Oma {
            let (x_min, y_min, x_max, y_max) = bbox_from_mask(&rot_mask)?;
            boxes.push(BBox {
                rect: Rect::new(x_min as f64, y_min as f64, x_max as f64, y_max as f64),
                cls: cfg.target_class,
            });
        }
        set.samples[si] = crate::dataset::DetectionSample {
            image: poisoned_img,
            boxes,
        };
        flags[si] = true;
    }
    Ok(PoisonedDetection {
        set,
        flags,
        config: *cfg,
    })
}

/// Draws placements until the scaled object fits and its rotated mask is
/// non-empty; fails after a bounded number of retries.
pub fn sample_placement_and_composite(
    scene: &crate::geometry::Image,
    obj: &PoolObject,
    policy: &PlacementPolicy,
    angle: Angle,
    rng: &mut ChaCha8Rng,
) -> Result<(crate::geometry::Image, crate::geometry::BinaryMask), PoisonError> {
    for _ in 0..PLACEMENT_RETRIES {
        let scale = rng.gen_range(policy.min_scale..=policy.max_scale);
        let sh = ((obj.image.height as f64 * scale).round() as usize).max(1);
        let sw = ((obj.image.width as f64 * scale).round() as usize).max(1);
        if sh >= scene.height || sw >= scene.width {
            continue;
        }
        let place = Placement {
            row: rng.gen_range(0..=(scene.height - sh)),
            col: rng.gen_range(0..=(scene.width - sw)),
            scale,
        };
        match composite_backdoor_with_mask(scene, &obj.image, &obj.mask, &place, angle) {
            Ok((img, mask)) => {
                if mask.bits.iter().any(|&b| b == 1) {
                    return Ok((img, mask));
                }
            }
            Err(GeometryError::InvalidPlacement) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(PoisonError::PlacementExhausted(PLACEMENT_RETRIES))
}

/// Patch-trigger control: stamps a white square at the bottom-right corner
/// of duplicated donors and relabels them to the target class.
pub fn patch_control(
    clean: &ClassificationSet,
    rate: f64,
    target_class: usize,
    patch_side: usize,
    seed: u64,
) -> Result<PoisonedClassification, PoisonError> {
    let sample = clean.examples.first().expect("non-empty dataset");
    let min_dim = sample.image.height.min(sample.image.width);
    assert!(patch_side < min_dim / 4, "patch must stay below a quarter of the image");

    let n = clean.examples.len();
    let m = injected_count(n, rate);
    let mut set = clean.clone();
    let mut flags = vec![false; n];
    let config = PoisonConfig {
        scenario: Scenario::Mca,
        trigger_angle: 0.0,
        rate,
        target_class,
        source_class: None,
        placement: PlacementPolicy::default(),
        mca_include_target: false,
        seed,
    };
    if m == 0 {
        return Ok(PoisonedClassification { set, flags, config });
    }
    let donors: Vec<usize> = (0..n)
        .filter(|&i| clean.examples[i].label != target_class)
        .collect();
    if m > donors.len() {
        return Err(PoisonError::RateTooHigh {
            needed: m,
            available: donors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = donors;
    order.shuffle(&mut rng);
    for &di in order.iter().take(m) {
        let mut image = clean.examples[di].image.clone();
        let h = image.height;
        let w = image.width;
        for r in h - patch_side..h {
            for c in w - patch_side..w {
                for ch in 0..image.channels {
                    image.set(r, c, ch, 1.0);
                }
            }
        }
        set.examples.push(LabeledExample {
            image,
            label: target_class,
        });
        flags.push(true);
    }
    Ok(PoisonedClassification { set, flags, config })
}

/// Stamps the patch trigger onto a single image (test-time trigger).
pub fn apply_patch_trigger(img: &crate::geometry::Image, patch_side: usize) -> crate::geometry::Image {
    let mut out = img.clone();
    for r in out.height - patch_side..out.height {
        for c in out.width - patch_side..out.width {
            for ch in 0..out.channels {
                out.set(r, c, ch, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_classification_dataset, gen_detection_dataset, gen_object_pool, SyntheticSpec};

    fn clean_set() -> ClassificationSet {
        gen_classification_dataset(&SyntheticSpec {
            num_classes: 4,
            samples_per_class: 50,
            canvas: 32,
            orientation_jitter: 5.0,
            seed: 11,
            family_map: None,
        })
        .unwrap()
    }

    fn cfg(scenario: Scenario, rate: f64) -> PoisonConfig {
        PoisonConfig {
            scenario,
            trigger_angle: 45.0,
            rate,
            target_class: 0,
            source_class: Some(1),
            placement: PlacementPolicy::default(),
            mca_include_target: false,
            seed: 5,
        }
    }

    #[test]
    fn injected_count_solves_rate_equation() {
        // n = 950, rate 5% -> m = 50, total 1000.
        assert_eq!(injected_count(950, 0.05), 50);
        assert_eq!(injected_count(100, 0.0), 0);
        assert_eq!(injected_count(10, 0.001), 1);
    }

    #[test]
    fn zero_rate_is_identity() {
        let clean = clean_set();
        let p = poison_classification(&clean, &cfg(Scenario::Mca, 0.0), None).unwrap();
        assert_eq!(p.set, clean);
        assert!(p.flags.iter().all(|&f| !f));
    }

    #[test]
    fn mca_adds_flagged_target_labeled_samples() {
        let clean = clean_set();
        let p = poison_classification(&clean, &cfg(Scenario::Mca, 0.05), None).unwrap();
        let n = clean.examples.len();
        let m = p.flags.iter().filter(|&&f| f).count();
        assert_eq!(p.set.examples.len(), n + m);
        let realized = m as f64 / (n + m) as f64;
        assert!((realized - 0.05).abs() <= 1.0 / (n + m) as f64);
        // Clean prefix untouched, appended samples all target-labeled.
        for (i, ex) in p.set.examples.iter().enumerate() {
            if p.flags[i] {
                assert_eq!(ex.label, 0);
            } else {
                assert_eq!(ex, &clean.examples[i]);
            }
        }
    }

    #[test]
    fn sca_draws_only_from_source_class() {
        let clean = clean_set();
        let c = cfg(Scenario::Sca, 0.05);
        let p = poison_classification(&clean, &c, None).unwrap();
        let n = clean.examples.len();
        // Every flagged sample must be a rotated duplicate of a class-1
        // donor: verify by re-rotating all class-1 donors and matching.
        let rotated: Vec<_> = clean
            .examples
            .iter()
            .filter(|ex| ex.label == 1)
            .map(|ex| rotate_and_crop(&ex.image, Angle::from_degrees(45.0), 32).unwrap())
            .collect();
        for (i, ex) in p.set.examples.iter().enumerate().skip(n) {
            assert!(p.flags[i]);
            assert_eq!(ex.label, 0);
            assert!(rotated.iter().any(|r| r == &ex.image));
        }
    }

    #[test]
    fn sca_empty_source_fails() {
        let clean = clean_set();
        let mut c = cfg(Scenario::Sca, 0.05);
        c.source_class = Some(99);
        match poison_classification(&clean, &c, None) {
            Err(PoisonError::EmptySource) => {}
            other => panic!("expected EmptySource, got {other:?}"),
        }
    }

    #[test]
    fn rate_too_high_fails() {
        let clean = clean_set();
        let c = cfg(Scenario::Sca, 0.5); // needs 200 donors, source class has 50
        match poison_classification(&clean, &c, None) {
            Err(PoisonError::RateTooHigh { .. }) => {}
            other => panic!("expected RateTooHigh, got {other:?}"),
        }
    }

    #[test]
    fn poisoning_is_deterministic() {
        let clean = clean_set();
        let c = cfg(Scenario::Mca, 0.05);
        let a = poison_classification(&clean, &c, None).unwrap();
        let b = poison_classification(&clean, &c, None).unwrap();
        assert_eq!(a, b);
    }

    fn det_fixture() -> (DetectionSet, Vec<crate::dataset::PoolObject>) {
        let set = gen_detection_dataset(&SyntheticSpec {
            num_classes: 4,
            samples_per_class: 40,
            canvas: 64,
            orientation_jitter: 5.0,
            seed: 13,
            family_map: None,
        })
        .unwrap();
        let pool = gen_object_pool(4, 10, 16, 21, None);
        (set, pool)
    }

    #[test]
    fn oma_appends_one_target_box_per_poisoned_scene() {
        let (clean, pool) = det_fixture();
        let mut c = cfg(Scenario::Oma, 0.1);
        c.target_class = 2;
        let p = poison_detection(&clean, &c, &pool).unwrap();
        let mut poisoned_seen = 0;
        for (i, s) in p.set.samples.iter().enumerate() {
            if p.flags[i] {
                poisoned_seen += 1;
                assert_eq!(s.boxes.len(), clean.samples[i].boxes.len() + 1);
                assert_eq!(s.boxes.last().unwrap().cls, 2);
            } else {
                assert_eq!(s, &clean.samples[i]);
            }
        }
        assert_eq!(poisoned_seen, (0.1f64 * 40.0).round() as usize);
    }

    #[test]
    fn oha_changes_pixels_but_not_labels() {
        let (clean, pool) = det_fixture();
        let c = cfg(Scenario::Oha, 0.1);
        let p = poison_detection(&clean, &c, &pool).unwrap();
        for (i, s) in p.set.samples.iter().enumerate() {
            assert_eq!(s.boxes, clean.samples[i].boxes);
            if p.flags[i] {
                assert_ne!(s.image, clean.samples[i].image);
            } else {
                assert_eq!(s.image, clean.samples[i].image);
            }
        }
    }

    #[test]
    fn detection_zero_rate_identity_and_empty_pool() {
        let (clean, pool) = det_fixture();
        let p = poison_detection(&clean, &cfg(Scenario::Oha, 0.0), &pool).unwrap();
        assert_eq!(p.set, clean);
        match poison_detection(&clean, &cfg(Scenario::Oma, 0.1), &[]) {
            Err(PoisonError::EmptyPool) => {}
            other => panic!("expected EmptyPool, got {other:?}"),
        }
    }

    #[test]
    fn patch_control_stamps_and_counts() {
        let clean = clean_set();
        let p = patch_control(&clean, 0.05, 0, 5, 9).unwrap();
        let n = clean.examples.len();
        let m = p.flags.iter().filter(|&&f| f).count();
        assert!(((m as f64 / (n + m) as f64) - 0.05).abs() <= 1.0 / (n + m) as f64);
        for (i, ex) in p.set.examples.iter().enumerate() {
            if p.flags[i] {
                assert_eq!(ex.label, 0);
                for r in 32 - 5..32 {
                    for c in 32 - 5..32 {
                        assert_eq!(ex.image.get(r, c, 0), 1.0);
                    }
                }
            }
        }
        let identity = patch_control(&clean, 0.0, 0, 5, 9).unwrap();
        assert_eq!(identity.set, clean);
    }
}
