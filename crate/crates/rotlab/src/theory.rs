//! Orientation mixture model behind the rotation attack: truncated Gaussian
//! angle distributions, the optimal-classifier attack success bound, a
//! numeric falsification harness for its maximize-at-180 claim, and the
//! angle-shift simulation that pre-rotates training data with growing spread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassificationSet, LabeledExample};
use crate::exec;
use crate::geometry::{rotate_and_crop, Angle};
use crate::metrics::asr_sweep;
use crate::model::{train_classifier, TrainConfig};
use crate::poison::{poison_classification, PoisonConfig};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid truncated Gaussian: {0}")]
    InvalidDistribution(String),
    #[error(transparent)]
    Poison(#[from] crate::poison::PoisonError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

// ---------------------------------------------------------------------------
// Truncated Gaussian
// ---------------------------------------------------------------------------

/// Gaussian density restricted to [a, b] and renormalized; zero outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub std: f64,
    pub a: f64,
    pub b: f64,
    norm: f64,
}

/// Adaptive Simpson quadrature with absolute tolerance.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = (a + b) / 2.0;
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

const QUAD_TOL: f64 = 1e-10;

impl TruncatedGaussian {
    pub fn new(mean: f64, std: f64, a: f64, b: f64) -> Result<Self, TheoryError> {
        if !(a < b) {
            return Err(TheoryError::InvalidDistribution(format!(
                "support [{a}, {b}] is empty"
            )));
        }
        if !(std > 0.0) {
            return Err(TheoryError::InvalidDistribution(format!(
                "std {std} must be positive"
            )));
        }
        let kernel = move |x: f64| {
            let z = (x - mean) / std;
            (-0.5 * z * z).exp()
        };
        let norm = adaptive_simpson(&kernel, a, b, QUAD_TOL);
        Ok(TruncatedGaussian {
            mean,
            std,
            a,
            b,
            norm,
        })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.a || x > self.b {
            return 0.0;
        }
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / self.norm
    }

    /// Probability mass of a subinterval of the support.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        let lo = lo.max(self.a);
        let hi = hi.min(self.b);
        if lo >= hi {
            return 0.0;
        }
        adaptive_simpson(&|x| self.pdf(x), lo, hi, QUAD_TOL)
    }

    /// Draw by rejection from the untruncated Gaussian.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let normal = Normal::new(self.mean, self.std).unwrap();
        loop {
            let x = normal.sample(rng);
            if x >= self.a && x <= self.b {
                return x;
            }
        }
    }
}

/// Orientation distributions of the clean data (centered at 0) and the
/// poisoned data (the clean distribution shifted by the trigger angle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMixture {
    pub clean: TruncatedGaussian,
    pub backdoor: TruncatedGaussian,
    pub rate: f64,
}

impl RotationMixture {
    pub fn new(trigger_angle: f64, std: f64, rate: f64) -> Result<Self, TheoryError> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(TheoryError::InvalidDistribution(format!(
                "rate {rate} outside [0, 1]"
            )));
        }
        Ok(RotationMixture {
            clean: TruncatedGaussian::new(0.0, std, -180.0, 180.0)?,
            backdoor: TruncatedGaussian::new(
                trigger_angle,
                std,
                trigger_angle - 180.0,
                trigger_angle + 180.0,
            )?,
            rate,
        })
    }
}

/// Which denominator to use in [`asr_bound`]. The source derivation writes
/// the mixture denominator `(1-rho) D + rho D_b` in one place and
/// `(1-rho) D + rho D` in another; the proper mixture is the default and
/// the other is kept for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundDenominator {
    Mixture,
    CleanOnly,
}

/// Attack success upper bound of the optimal classifier at test angle `x`:
/// `rho * D_b(x) / ((1-rho) * D(x) + rho * D_b(x))`. Defined as 1 where the
/// clean density vanishes but the backdoor density does not, and 0 where
/// both vanish. The `CleanOnly` variant replaces `D_b` with `D` in the
/// denominator and can exceed 1.
pub fn asr_bound(mix: &RotationMixture, x: f64, denom: BoundDenominator) -> f64 {
    let d = mix.clean.pdf(x);
    let db = mix.backdoor.pdf(x);
    if db == 0.0 {
        return 0.0;
    }
    let num = mix.rate * db;
    let den = match denom {
        BoundDenominator::Mixture => (1.0 - mix.rate) * d + mix.rate * db,
        BoundDenominator::CleanOnly => (1.0 - mix.rate) * d + mix.rate * d,
    };
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Outcome {
    /// Largest grid angle attaining the maximum bound (the bound can
    /// saturate to 1.0 in floating point well before 180 degrees).
    pub argmax_deg: f64,
    /// Whether the bound is nondecreasing across the whole grid.
    pub monotone: bool,
    /// Whether the maximum is attained at more than one grid point.
    pub tied: bool,
    pub grid_step: f64,
}

/// Evaluates the bound on a [0, 180] degree grid and reports where it peaks
/// and whether it is nondecreasing, numerically probing the claim that the
/// optimal test-time rotation is 180 degrees.
pub fn theorem1_check(mix: &RotationMixture, grid_step: f64) -> Theorem1Outcome {
    assert!(grid_step > 0.0);
    let n = (180.0 / grid_step).round() as usize;
    let values: Vec<f64> = (0..=n)
        .map(|i| asr_bound(mix, i as f64 * grid_step, BoundDenominator::Mixture))
        .collect();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| (max - v) <= 1e-15)
        .map(|(i, _)| i)
        .collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    Theorem1Outcome {
        argmax_deg: *winners.last().unwrap() as f64 * grid_step,
        monotone,
        tied: winners.len() > 1,
        grid_step,
    }
}

/// CSV with header `x_deg,bound`.
pub fn bound_curve_to_csv(mix: &RotationMixture, step: f64, denom: BoundDenominator) -> String {
    let n = (180.0 / step).round() as usize;
    let mut out = String::from("x_deg,bound\n");
    for i in 0..=n {
        let x = i as f64 * step;
        out.push_str(&format!("{x},{}\n", asr_bound(mix, x, denom)));
    }
    out
}

// ---------------------------------------------------------------------------
// Angle-shift simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSimConfig {
    /// Poisoning recipe applied after pre-rotation; its seed is combined
    /// with the per-run seed.
    pub poison: PoisonConfig,
    pub train: TrainConfig,
    /// Orientation spreads to test, ascending; 0 means no pre-rotation.
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sweep_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSimRow {
    pub sigma: f64,
    pub seed: u64,
    /// Test angle in [0, 180] with the highest attack success rate.
    pub argmax_deg: f64,
    pub argmax_asr: f64,
}

/// Pre-rotates every training image by a truncated-Gaussian draw of the
/// given spread, poisons, trains, sweeps the attack success rate over test
/// angles, and records where it peaks. The argmax is taken over [0, 180]
/// of the sweep since the bound is symmetric in rotation direction.
pub fn angle_shift_sim(
    base: &ClassificationSet,
    test: &[LabeledExample],
    cfg: &ShiftSimConfig,
) -> Result<Vec<ShiftSimRow>, TheoryError> {
    let mut runs: Vec<(f64, u64)> = Vec::new();
    for &sigma in &cfg.sigmas {
        for &seed in &cfg.seeds {
            runs.push((sigma, seed));
        }
    }
    let results = exec::par_map_slice(&runs, |&(sigma, seed)| -> Result<ShiftSimRow, TheoryError> {
        let shifted = pre_rotate(base, sigma, seed)?;
        let mut pcfg = cfg.poison.clone();
        pcfg.seed ^= seed;
        let poisoned = poison_classification(&shifted, &pcfg, None)?;
        let mut tcfg = cfg.train.clone();
        tcfg.seed ^= seed;
        let params = train_classifier(&poisoned.set, &tcfg)?;
        let sweep = asr_sweep(&params, test, pcfg.target_class, cfg.sweep_step, 0.5)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, (&ang, &asr)) in sweep.angles.iter().zip(sweep.asr.iter()).enumerate() {
            if ang <= 180.0 && asr > best.1 {
                best = (i, asr);
            }
        }
        Ok(ShiftSimRow {
            sigma,
            seed,
            argmax_deg: sweep.angles[best.0],
            argmax_asr: best.1,
        })
    });
    results.into_iter().collect()
}

fn pre_rotate(
    base: &ClassificationSet,
    sigma: f64,
    seed: u64,
) -> Result<ClassificationSet, TheoryError> {
    if sigma == 0.0 {
        return Ok(base.clone());
    }
    let dist = TruncatedGaussian::new(0.0, sigma, -180.0, 180.0)?;
    let examples = exec::par_map_slice_indexed(&base.examples, |i, ex| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ crate::dataset::sample_seed(0x50F7, i));
        let deg = dist.sample(&mut rng);
        LabeledExample {
            image: rotate_and_crop(&ex.image, Angle::from_degrees(deg), ex.image.height)
                .expect("pre-rotation"),
            label: ex.label,
        }
    });
    Ok(ClassificationSet {
        num_classes: base.num_classes,
        examples,
    })
}

/// JSON table keyed by sigma then seed: {"30": {"0": {...}}}.
pub fn sim_table_json(rows: &[ShiftSimRow]) -> serde_json::Value {
    let mut by_sigma = serde_json::Map::new();
    for row in rows {
        let sigma_key = format!("{}", row.sigma);
        let entry = by_sigma
            .entry(sigma_key)
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        entry.as_object_mut().unwrap().insert(
            format!("{}", row.seed),
            serde_json::json!({"argmax_deg": row.argmax_deg, "argmax_asr": row.argmax_asr}),
        );
    }
    serde_json::Value::Object(by_sigma)
}
