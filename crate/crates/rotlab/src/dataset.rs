//! Synthetic glyph dataset generation, manifest persistence, and rotation
//! augmentation.
//!
//! Each class renders one rotationally-asymmetric glyph family, so a rotated
//! copy of an image is genuinely out-of-distribution and rotation can act as
//! a backdoor trigger. Generation is deterministic in the spec seed, with
//! per-sample derived seeds so parallel generation is order-independent.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::{
    rotate_and_crop, rotate_raster, Angle, BinaryMask, GeometryError, Image, Rect,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest not found: {0}")]
    MissingFile(String),
    #[error("manifest schema violation: {0}")]
    SchemaViolation(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A classification example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Ground-truth detection box `[x_min, y_min, x_max, y_max, cls]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub rect: Rect,
    pub cls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSet {
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub num_classes: usize,
    pub samples: Vec<DetectionSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Classification(ClassificationSet),
    Detection(DetectionSet),
}

/// Backdoor-candidate object: a glyph patch with its segmentation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolObject {
    pub image: Image,
    pub mask: BinaryMask,
    pub cls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub canvas: usize,
    pub orientation_jitter: f64,
    pub seed: u64,
    /// Optional class-to-glyph-family assignment; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_map: Option<Vec<usize>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes < 2 || self.num_classes > NUM_GLYPH_FAMILIES {
            return Err(DatasetError::SchemaViolation(format!(
                "num_classes must be in 2..={NUM_GLYPH_FAMILIES}"
            )));
        }
        if self.orientation_jitter > 10.0 || self.orientation_jitter < 0.0 {
            return Err(DatasetError::SchemaViolation(
                "orientation jitter must be within [0, 10] degrees".into(),
            ));
        }
        if let Some(map) = &self.family_map {
            if map.len() != self.num_classes {
                return Err(DatasetError::SchemaViolation(
                    "family_map must assign one glyph family per class".into(),
                ));
            }
            for (i, &f) in map.iter().enumerate() {
                if f >= NUM_GLYPH_FAMILIES || map[..i].contains(&f) {
                    return Err(DatasetError::SchemaViolation(
                        "family_map entries must be distinct valid families".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn family_of(&self, class: usize) -> usize {
        self.family_map
            .as_ref()
            .map(|m| m[class])
            .unwrap_or(class)
    }
}

/// Uniform rotation range in degrees; `[0, 0]` means no augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub lo: f64,
    pub hi: f64,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy { lo: 0.0, hi: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.lo == 0.0 && self.hi == 0.0
    }
}

// ---------------------------------------------------------------------------
// Glyph rendering
// ---------------------------------------------------------------------------

pub const NUM_GLYPH_FAMILIES: usize = 6;

enum Prim {
    /// Axis-extent rectangle rotated by `rot` degrees about its own center.
    Rect {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        rot: f64,
    },
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Tri {
        a: (f64, f64),
        b: (f64, f64),
        c: (f64, f64),
    },
}

impl Prim {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Prim::Rect { cx, cy, w, h, rot } => {
                let (s, c) = rot.to_radians().sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                lx.abs() <= w / 2.0 && ly.abs() <= h / 2.0
            }
            Prim::Disc { cx, cy, r } => {
                let dx = x - cx;
                let dy = y - cy;
                dx * dx + dy * dy <= r * r
            }
            Prim::Tri { a, b, c } => {
                let sign =
                    |p: (f64, f64), q: (f64, f64)| (x - q.0) * (p.1 - q.1) - (p.0 - q.0) * (y - q.1);
                let d1 = sign(a, b);
                let d2 = sign(b, c);
                let d3 = sign(c, a);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

/// Glyph family in unit coordinates, extent roughly `[-0.5, 0.5]`.
/// Every family is stroke-based and rotationally asymmetric.
fn glyph_prims(family: usize) -> Vec<Prim> {
    match family % NUM_GLYPH_FAMILIES {
        // Flag: vertical pole with a pennant at the top right.
        0 => vec![
            Prim::Rect {
                cx: -0.08,
                cy: 0.0,
                w: 0.13,
                h: 0.92,
                rot: 0.0,
            },
            Prim::Tri {
                a: (-0.02, -0.46),
                b: (0.42, -0.32),
                c: (-0.02, -0.16),
            },
        ],
        // Ell: vertical stroke with a foot to the right.
        1 => vec![
            Prim::Rect {
                cx: -0.18,
                cy: -0.04,
                w: 0.13,
                h: 0.88,
                rot: 0.0,
            },
            Prim::Rect {
                cx: 0.1,
                cy: 0.34,
                w: 0.44,
                h: 0.13,
                rot: 0.0,
            },
        ],
        // Hook: off-center stroke with a knob at the top left.
        2 => vec![
            Prim::Rect {
                cx: 0.06,
                cy: 0.08,
                w: 0.13,
                h: 0.76,
                rot: 0.0,
            },
            Prim::Disc {
                cx: -0.2,
                cy: -0.32,
                r: 0.15,
            },
        ],
        // Slash-bar: tilted stroke crossed by a short bar.
        3 => vec![
            Prim::Rect {
                cx: 0.0,
                cy: 0.0,
                w: 0.13,
                h: 0.9,
                rot: 22.0,
            },
            Prim::Rect {
                cx: -0.24,
                cy: -0.2,
                w: 0.34,
                h: 0.13,
                rot: 0.0,
            },
        ],
        // Tee: off-center top bar on a vertical stroke.
        4 => vec![
            Prim::Rect {
                cx: 0.04,
                cy: 0.08,
                w: 0.13,
                h: 0.76,
                rot: 0.0,
            },
            Prim::Rect {
                cx: -0.1,
                cy: -0.36,
                w: 0.62,
                h: 0.13,
                rot: 0.0,
            },
        ],
        // Dot-bar: horizontal bar with a disc below one end.
        _ => vec![
            Prim::Rect {
                cx: 0.0,
                cy: -0.14,
                w: 0.78,
                h: 0.13,
                rot: 0.0,
            },
            Prim::Disc {
                cx: 0.26,
                cy: 0.24,
                r: 0.16,
            },
        ],
    }
}

/// Renders a glyph into a `size`-square coverage grid in `[0,1]`, at the
/// given orientation (degrees, counterclockwise), 2x2 supersampled.
pub fn render_glyph(family: usize, size: usize, orientation_deg: f64) -> Vec<f64> {
    let prims = glyph_prims(family);
    let (sin, cos) = orientation_deg.to_radians().sin_cos();
    let mut out = vec![0.0; size * size];
    let half = size as f64 / 2.0;
    let sub = [0.25, 0.75];
    for r in 0..size {
        for c in 0..size {
            let mut cover = 0.0;
            for sy in sub {
                for sx in sub {
                    let px = (c as f64 + sx - half) / size as f64;
                    let py = (r as f64 + sy - half) / size as f64;
                    // Rotate the sample point into glyph-local coordinates
                    // (counterclockwise content rotation, y-down raster).
                    let lx = cos * px - sin * py;
                    let ly = sin * px + cos * py;
                    if prims.iter().any(|p| p.contains(lx, ly)) {
                        cover += 0.25;
                    }
                }
            }
            out[r * size + c] = cover;
        }
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-sample seed derived from the base seed and sample index.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ splitmix64(index as u64)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn render_classification_sample(
    spec: &SyntheticSpec,
    index: usize,
) -> (LabeledExample, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let label = index % spec.num_classes;
    let canvas = spec.canvas;
    let orientation = if spec.orientation_jitter > 0.0 {
        rng.gen_range(-spec.orientation_jitter..=spec.orientation_jitter)
    } else {
        0.0
    };
    let glyph_size = (canvas as f64 * 0.5).round() as usize;
    let coverage = render_glyph(spec.family_of(label), glyph_size, orientation);
    let contrast: f64 = rng.gen_range(0.6..1.0);
    let jr = rng.gen_range(-2i64..=2) ;
    let jc = rng.gen_range(-2i64..=2);
    let top = ((canvas - glyph_size) / 2) as i64 + jr;
    let left = ((canvas - glyph_size) / 2) as i64 + jc;

    let mut img = Image::new(canvas, canvas, 1);
    for p in &mut img.pixels {
        *p = rng.gen_range(0.0..0.05);
    }
    for r in 0..glyph_size {
        for c in 0..glyph_size {
            let rr = top + r as i64;
            let cc = left + c as i64;
            if rr >= 0 && cc >= 0 && (rr as usize) < canvas && (cc as usize) < canvas {
                let cov = coverage[r * glyph_size + c];
                if cov > 0.0 {
                    let bg = img.get(rr as usize, cc as usize, 0);
                    img.set(rr as usize, cc as usize, 0, bg * (1.0 - cov) + contrast * cov);
                }
            }
        }
    }
    (LabeledExample { image: img, label }, orientation)
}

/// Renders a balanced classification set; deterministic in `spec.seed`.
pub fn gen_classification_dataset(spec: &SyntheticSpec) -> Result<ClassificationSet, DatasetError> {
    Ok(gen_classification_with_log(spec)?.0)
}

/// Variant exposing the per-sample rendered orientations for audits.
pub fn gen_classification_with_log(
    spec: &SyntheticSpec,
) -> Result<(ClassificationSet, Vec<f64>), DatasetError> {
    spec.validate()?;
    let total = spec.num_classes * spec.samples_per_class;
    let rendered = exec::par_map(total, |i| render_classification_sample(spec, i));
    let mut examples = Vec::with_capacity(total);
    let mut orientations = Vec::with_capacity(total);
    for (ex, o) in rendered {
        examples.push(ex);
        orientations.push(o);
    }
    Ok((
        ClassificationSet {
            num_classes: spec.num_classes,
            examples,
        },
        orientations,
    ))
}

fn boxes_overlap_too_much(a: &Rect, b: &Rect) -> bool {
    crate::geometry::iou(a, b).map(|v| v > 0.1).unwrap_or(true)
}

fn render_detection_sample(spec: &SyntheticSpec, index: usize) -> DetectionSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index).wrapping_add(0xD1));
    let canvas = spec.canvas;
    let mut img = Image::new(canvas, canvas, 1);
    for p in &mut img.pixels {
        *p = rng.gen_range(0.0..0.05);
    }
    let n_objects = rng.gen_range(1..=3usize);
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..n_objects {
        let cls = rng.gen_range(0..spec.num_classes);
        let size = rng.gen_range(14..=20usize);
        let orientation = if spec.orientation_jitter > 0.0 {
            rng.gen_range(-spec.orientation_jitter..=spec.orientation_jitter)
        } else {
            0.0
        };
        let contrast: f64 = rng.gen_range(0.6..1.0);
        let coverage = render_glyph(spec.family_of(cls), size, orientation);
        // Tight box of the render mask in patch-local coordinates.
        let mask = BinaryMask::from_bits(
            size,
            size,
            coverage.iter().map(|&v| (v >= 0.5) as u8).collect(),
        );
        let local = match crate::geometry::bbox_from_mask(&mask) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let mut placed = false;
        for _ in 0..100 {
            let top = rng.gen_range(0..=(canvas - size));
            let left = rng.gen_range(0..=(canvas - size));
            let rect = Rect::new(
                (left + local.0) as f64,
                (top + local.1) as f64,
                (left + local.2) as f64,
                (top + local.3) as f64,
            );
            if boxes.iter().any(|b| boxes_overlap_too_much(&b.rect, &rect)) {
                continue;
            }
            for r in 0..size {
                for c in 0..size {
                    let cov = coverage[r * size + c];
                    if cov > 0.0 {
                        let bg = img.get(top + r, left + c, 0);
                        img.set(top + r, left + c, 0, bg * (1.0 - cov) + contrast * cov);
                    }
                }
            }
            boxes.push(BBox { rect, cls });
            placed = true;
            break;
        }
        let _ = placed;
    }
    DetectionSample { image: img, boxes }
}

/// Renders detection scenes with 1-3 non-overlapping glyph objects; here
/// `samples_per_class` is read as the total number of scenes.
pub fn gen_detection_dataset(spec: &SyntheticSpec) -> Result<DetectionSet, DatasetError> {
    spec.validate()?;
    let total = spec.samples_per_class;
    let samples = exec::par_map(total, |i| render_detection_sample(spec, i));
    Ok(DetectionSet {
        num_classes: spec.num_classes,
        samples,
    })
}

/// Renders a pool of backdoor-candidate glyph objects with masks.
pub fn gen_object_pool(
    num_classes: usize,
    count: usize,
    size: usize,
    seed: u64,
    family_map: Option<&[usize]>,
) -> Vec<PoolObject> {
    exec::par_map(count, move |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i).wrapping_add(0xB007));
        let cls = rng.gen_range(0..num_classes);
        let family = family_map.map(|m| m[cls]).unwrap_or(cls);
        let contrast: f64 = rng.gen_range(0.7..1.0);
        let coverage = render_glyph(family, size, 0.0);
        let pixels = coverage.iter().map(|&v| v * contrast).collect();
        let bits = coverage.iter().map(|&v| (v >= 0.5) as u8).collect();
        PoolObject {
            image: Image::from_pixels(size, size, 1, pixels),
            mask: BinaryMask::from_bits(size, size, bits),
            cls,
        }
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Rotates every image by an independent uniform draw from the policy range.
/// Classification images go through rotate-and-crop; detection scenes are
/// rotated whole with box corners transformed and re-tightened.
pub fn augment_rotation(ds: &Dataset, policy: &AugmentPolicy, seed: u64) -> Dataset {
    if policy.is_identity() {
        return ds.clone();
    }
    match ds {
        Dataset::Classification(set) => {
            let examples = exec::par_map_slice_indexed(&set.examples, |i, ex| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
                let deg = draw_uniform(&mut rng, policy.lo, policy.hi);
                let image = rotate_and_crop(&ex.image, Angle::from_degrees(deg), ex.image.height)
                    .expect("augmentation crop");
                LabeledExample {
                    image,
                    label: ex.label,
                }
            });
            Dataset::Classification(ClassificationSet {
                num_classes: set.num_classes,
                examples,
            })
        }
        Dataset::Detection(set) => {
            let samples = exec::par_map_slice_indexed(&set.samples, |i, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
                let deg = draw_uniform(&mut rng, policy.lo, policy.hi);
                rotate_detection_sample(s, deg)
            });
            Dataset::Detection(DetectionSet {
                num_classes: set.num_classes,
                samples,
            })
        }
    }
}

fn draw_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Rotates a detection scene and re-tightens each box as the axis-aligned
/// hull of its rotated corners, clipped to the canvas.
pub fn rotate_detection_sample(s: &DetectionSample, deg: f64) -> DetectionSample {
    let angle = Angle::from_degrees(deg);
    let image = rotate_raster(&s.image, angle, 0.0);
    let (sin, cos) = angle.sin_cos();
    let w = s.image.width as f64;
    let h = s.image.height as f64;
    let cx = (w - 1.0) / 2.0;
    let cy = (h - 1.0) / 2.0;
    // Forward map: destination of a source point under the content rotation
    // (inverse of the resampling map).
    let fwd = |x: f64, y: f64| -> (f64, f64) {
        let dx = x - cx;
        let dy = y - cy;
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    };
    let boxes = s
        .boxes
        .iter()
        .filter_map(|b| {
            let corners = [
                fwd(b.rect.x_min, b.rect.y_min),
                fwd(b.rect.x_max, b.rect.y_min),
                fwd(b.rect.x_min, b.rect.y_max),
                fwd(b.rect.x_max, b.rect.y_max),
            ];
            let x_min = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).max(0.0);
            let y_min = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(0.0);
            let x_max = corners
                .iter()
                .map(|p| p.0)
                .fold(f64::NEG_INFINITY, f64::max)
                .min(w);
            let y_max = corners
                .iter()
                .map(|p| p.1)
                .fold(f64::NEG_INFINITY, f64::max)
                .min(h);
            let rect = Rect::new(x_min, y_min, x_max, y_max);
            if rect.is_well_formed() {
                Some(BBox { rect, cls: b.cls })
            } else {
                None
            }
        })
        .collect();
    DetectionSample { image, boxes }
}

// ---------------------------------------------------------------------------
// Manifest persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    poison_config: Option<serde_json::Value>,
    items: Vec<ManifestItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestItem {
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f64; 5]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    poisoned: Option<bool>,
}

/// Writes a manifest JSON plus PNG images under `dir`. `poison` optionally
/// attaches per-item flags and a config header block.
pub fn manifest_write(
    dir: &Path,
    ds: &Dataset,
    poison: Option<(&[bool], serde_json::Value)>,
) -> Result<(), DatasetError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| DatasetError::Io(e.to_string()))?;
    let (flags, poison_config) = match poison {
        Some((f, c)) => (Some(f), Some(c)),
        None => (None, None),
    };
    let mut items = Vec::new();
    let (kind, num_classes) = match ds {
        Dataset::Classification(set) => {
            for (i, ex) in set.examples.iter().enumerate() {
                let file = format!("images/item_{i:05}.png");
                ex.image.save_png(&dir.join(&file))?;
                items.push(ManifestItem {
                    file,
                    label: Some(ex.label),
                    boxes: None,
                    poisoned: flags.map(|f| f[i]),
                });
            }
            ("classification", set.num_classes)
        }
        Dataset::Detection(set) => {
            for (i, s) in set.samples.iter().enumerate() {
                let file = format!("images/item_{i:05}.png");
                s.image.save_png(&dir.join(&file))?;
                let boxes = s
                    .boxes
                    .iter()
                    .map(|b| {
                        [
                            b.rect.x_min,
                            b.rect.y_min,
                            b.rect.x_max,
                            b.rect.y_max,
                            b.cls as f64,
                        ]
                    })
                    .collect();
                items.push(ManifestItem {
                    file,
                    label: None,
                    boxes: Some(boxes),
                    poisoned: flags.map(|f| f[i]),
                });
            }
            ("detection", set.num_classes)
        }
    };
    let manifest = Manifest {
        version: 1,
        kind: kind.to_string(),
        num_classes,
        poison_config,
        items,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| DatasetError::Io(e.to_string()))
}

/// Reads a manifest directory back into a dataset, with optional poison
/// flags and config header.
pub fn manifest_read(
    dir: &Path,
) -> Result<(Dataset, Option<Vec<bool>>, Option<serde_json::Value>), DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|_| DatasetError::MissingFile(manifest_path.display().to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::SchemaViolation(e.to_string()))?;
    if manifest.version != 1 {
        return Err(DatasetError::SchemaViolation(format!(
            "unknown manifest version {}",
            manifest.version
        )));
    }
    let mut flags = Vec::new();
    let mut any_flag = false;

    match manifest.kind.as_str() {
        "classification" => {
            let mut examples = Vec::new();
            for item in &manifest.items {
                let label = item.label.ok_or_else(|| {
                    DatasetError::SchemaViolation("classification item missing label".into())
                })?;
                if label >= manifest.num_classes {
                    return Err(DatasetError::SchemaViolation(format!(
                        "label {label} out of range"
                    )));
                }
                let image = Image::load_png(&dir.join(&item.file))
                    .map_err(|_| DatasetError::MissingFile(item.file.clone()))?;
                examples.push(LabeledExample { image, label });
                flags.push(item.poisoned.unwrap_or(false));
                any_flag |= item.poisoned.is_some();
            }
            Ok((
                Dataset::Classification(ClassificationSet {
                    num_classes: manifest.num_classes,
                    examples,
                }),
                any_flag.then_some(flags),
                manifest.poison_config,
            ))
        }
        "detection" => {
            let mut samples = Vec::new();
            for item in &manifest.items {
                let raw_boxes = item.boxes.as_ref().ok_or_else(|| {
                    DatasetError::SchemaViolation("detection item missing boxes".into())
                })?;
                let mut boxes = Vec::new();
                for rb in raw_boxes {
                    let rect = Rect::new(rb[0], rb[1], rb[2], rb[3]);
                    if !rect.is_well_formed() {
                        return Err(DatasetError::SchemaViolation(
                            "malformed box: min >= max".into(),
                        ));
                    }
                    let cls = rb[4] as usize;
                    if cls >= manifest.num_classes {
                        return Err(DatasetError::SchemaViolation(format!(
                            "box class {cls} out of range"
                        )));
                    }
                    boxes.push(BBox { rect, cls });
                }
                let image = Image::load_png(&dir.join(&item.file))
                    .map_err(|_| DatasetError::MissingFile(item.file.clone()))?;
                samples.push(DetectionSample { image, boxes });
                flags.push(item.poisoned.unwrap_or(false));
                any_flag |= item.poisoned.is_some();
            }
            Ok((
                Dataset::Detection(DetectionSet {
                    num_classes: manifest.num_classes,
                    samples,
                }),
                any_flag.then_some(flags),
                manifest.poison_config,
            ))
        }
        other => Err(DatasetError::SchemaViolation(format!(
            "unknown kind {other:?}"
        ))),
    }
}
