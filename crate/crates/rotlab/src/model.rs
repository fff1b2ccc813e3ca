//! Tiny from-scratch differentiable victim models: a one-hidden-layer MLP
//! classifier and a single-pass grid detector, with SGD training, inference,
//! and exact analytic input gradients.
//!
//! Training is deterministic in the seed: minibatch gradients may be computed
//! in parallel but are always reduced in sample order, so the `parallel`
//! feature does not change a single bit of the result.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    augment_rotation, AugmentPolicy, BBox, ClassificationSet, Dataset, DetectionSample,
    DetectionSet, LabeledExample,
};
use crate::exec;
use crate::geometry::{iou, rotate_and_crop, Angle, Image, Rect};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training loss became non-finite at epoch {0}")]
    DivergenceDetected(usize),
    #[error("input shape does not match the model: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("checkpoint i/o failed: {0}")]
    CheckpointIo(String),
    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Classic SGD momentum; 0 disables the velocity term entirely.
    #[serde(default)]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            epochs: 30,
            batch_size: 32,
            augment: AugmentPolicy::none(),
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// input -> hidden (ReLU) -> classes (softmax). Row-major weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (input_dim as f64).sqrt();
        let a2 = 1.0 / (hidden_dim as f64).sqrt();
        MlpParams {
            input_dim,
            hidden_dim,
            num_classes,
            w1: (0..hidden_dim * input_dim)
                .map(|_| rng.gen_range(-a1..a1))
                .collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..num_classes * hidden_dim)
                .map(|_| rng.gen_range(-a2..a2))
                .collect(),
            b2: vec![0.0; num_classes],
        }
    }

    fn check_input(&self, img: &Image) -> Result<(), ModelError> {
        let got = img.pixels.len();
        if got != self.input_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.input_dim,
                got,
            });
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn forward_hidden(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = params.b1.clone();
    for (j, hj) in h.iter_mut().enumerate() {
        let row = &params.w1[j * params.input_dim..(j + 1) * params.input_dim];
        let mut acc = *hj;
        for (w, xi) in row.iter().zip(x.iter()) {
            acc += w * xi;
        }
        *hj = acc.max(0.0);
    }
    h
}

fn forward_logits(params: &MlpParams, h: &[f64]) -> Vec<f64> {
    let mut logits = params.b2.clone();
    for (k, lk) in logits.iter_mut().enumerate() {
        let row = &params.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
        let mut acc = *lk;
        for (w, hj) in row.iter().zip(h.iter()) {
            acc += w * hj;
        }
        *lk = acc;
    }
    logits
}

/// Softmax class probabilities; predicted class is the argmax with
/// lowest-index tie-break.
pub fn classify(params: &MlpParams, img: &Image) -> Result<Vec<f64>, ModelError> {
    params.check_input(img)?;
    let h = forward_hidden(params, &img.pixels);
    Ok(softmax(&forward_logits(params, &h)))
}

pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Hidden-layer (post-ReLU) activations, the latent features used by the
/// filtering defenses.
pub fn hidden_activations(params: &MlpParams, img: &Image) -> Result<Vec<f64>, ModelError> {
    params.check_input(img)?;
    Ok(forward_hidden(params, &img.pixels))
}

/// Exact analytic gradient of the cross-entropy loss toward `target` with
/// respect to the input pixels.
pub fn input_gradient(
    params: &MlpParams,
    img: &Image,
    target: usize,
) -> Result<Vec<f64>, ModelError> {
    params.check_input(img)?;
    let h = forward_hidden(params, &img.pixels);
    let probs = softmax(&forward_logits(params, &h));
    // dL/dlogit_k = p_k - 1[k == target]
    let mut dh = vec![0.0; params.hidden_dim];
    for k in 0..params.num_classes {
        let d = probs[k] - if k == target { 1.0 } else { 0.0 };
        let row = &params.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
        for (dhj, w) in dh.iter_mut().zip(row.iter()) {
            *dhj += d * w;
        }
    }
    let mut dx = vec![0.0; params.input_dim];
    for j in 0..params.hidden_dim {
        if h[j] > 0.0 {
            let row = &params.w1[j * params.input_dim..(j + 1) * params.input_dim];
            let dhj = dh[j];
            for (dxi, w) in dx.iter_mut().zip(row.iter()) {
                *dxi += dhj * w;
            }
        }
    }
    Ok(dx)
}

struct MlpGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    loss: f64,
}

fn sample_grads(params: &MlpParams, x: &[f64], label: usize) -> MlpGrads {
    let h = forward_hidden(params, x);
    let probs = softmax(&forward_logits(params, &h));
    let loss = -(probs[label].max(1e-300)).ln();

    let mut g = MlpGrads {
        w1: vec![0.0; params.w1.len()],
        b1: vec![0.0; params.b1.len()],
        w2: vec![0.0; params.w2.len()],
        b2: vec![0.0; params.b2.len()],
        loss,
    };
    let mut dh = vec![0.0; params.hidden_dim];
    for k in 0..params.num_classes {
        let d = probs[k] - if k == label { 1.0 } else { 0.0 };
        g.b2[k] = d;
        let wrow = &params.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
        let grow = &mut g.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
        for j in 0..params.hidden_dim {
            grow[j] = d * h[j];
            dh[j] += d * wrow[j];
        }
    }
    for j in 0..params.hidden_dim {
        if h[j] > 0.0 {
            g.b1[j] = dh[j];
            let grow = &mut g.w1[j * params.input_dim..(j + 1) * params.input_dim];
            for (gi, xi) in grow.iter_mut().zip(x.iter()) {
                *gi = dh[j] * xi;
            }
        }
    }
    g
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += scale * s;
    }
}

/// Velocity buffers for momentum SGD over a four-array parameter set.
struct Velocity {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Velocity {
    fn zeros(w1: usize, b1: usize, w2: usize, b2: usize) -> Self {
        Velocity {
            w1: vec![0.0; w1],
            b1: vec![0.0; b1],
            w2: vec![0.0; w2],
            b2: vec![0.0; b2],
        }
    }

    fn decay(&mut self, momentum: f64) {
        for buf in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            for v in buf.iter_mut() {
                *v *= momentum;
            }
        }
    }
}

/// Minibatch SGD on mean cross-entropy over clean and poisoned samples
/// jointly; augmentation is re-drawn each epoch before the forward pass.
pub fn train_classifier(
    data: &ClassificationSet,
    cfg: &TrainConfig,
) -> Result<MlpParams, ModelError> {
    assert!(!data.examples.is_empty(), "training data must be non-empty");
    let input_dim = data.examples[0].image.pixels.len();
    let mut params = MlpParams::init(input_dim, 128, data.num_classes, cfg.seed);
    let mut vel = Velocity::zeros(
        params.w1.len(),
        params.b1.len(),
        params.w2.len(),
        params.b2.len(),
    );
    let n = data.examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);

    for epoch in 0..cfg.epochs {
        let epoch_data;
        let examples: &[LabeledExample] = if cfg.augment.is_identity() {
            &data.examples
        } else {
            let augmented = augment_rotation(
                &Dataset::Classification(data.clone()),
                &cfg.augment,
                cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9),
            );
            epoch_data = match augmented {
                Dataset::Classification(set) => set.examples,
                _ => unreachable!(),
            };
            &epoch_data
        };

        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let grads = exec::par_map_slice(batch, |&i| {
                let ex = &examples[i];
                sample_grads(&params, &ex.image.pixels, ex.label)
            });
            let inv = 1.0 / batch.len() as f64;
            vel.decay(cfg.momentum);
            for g in &grads {
                epoch_loss += g.loss;
                axpy(&mut vel.w1, &g.w1, inv);
                axpy(&mut vel.b1, &g.b1, inv);
                axpy(&mut vel.w2, &g.w2, inv);
                axpy(&mut vel.b2, &g.b2, inv);
            }
            axpy(&mut params.w1, &vel.w1, -cfg.learning_rate);
            axpy(&mut params.b1, &vel.b1, -cfg.learning_rate);
            axpy(&mut params.w2, &vel.w2, -cfg.learning_rate);
            axpy(&mut params.b2, &vel.b2, -cfg.learning_rate);
        }
        if !epoch_loss.is_finite() {
            return Err(ModelError::DivergenceDetected(epoch));
        }
    }
    Ok(params)
}

/// Mean cross-entropy of `params` over the examples.
pub fn mean_cross_entropy(
    params: &MlpParams,
    examples: &[LabeledExample],
) -> Result<f64, ModelError> {
    let losses = exec::par_map_slice(examples, |ex| {
        classify(params, &ex.image).map(|p| -(p[ex.label].max(1e-300)).ln())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}

/// Mean cross-entropy of rotated test data against a clean-trained model,
/// per angle.
pub fn clean_loss_curve(
    params: &MlpParams,
    data: &[LabeledExample],
    angles: &[f64],
) -> Result<Vec<(f64, f64)>, ModelError> {
    let mut out = Vec::with_capacity(angles.len());
    for &deg in angles {
        let rotated: Vec<LabeledExample> = exec::par_map_slice(data, |ex| LabeledExample {
            image: rotate_and_crop(&ex.image, Angle::from_degrees(deg), ex.image.height)
                .expect("loss-curve rotation"),
            label: ex.label,
        });
        out.push((deg, mean_cross_entropy(params, &rotated)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid detector
// ---------------------------------------------------------------------------

/// Pooling factor applied to each cell window before the hidden layer.
const WINDOW_POOL: usize = 2;

/// Single-pass detector: per cell, a window of the input centered on the
/// cell goes through one shared hidden layer (ReLU) and a shared head
/// predicting an objectness logit, class logits, and 4 box offsets. Weight
/// sharing across cells is what lets the model place objects it has only
/// seen elsewhere on the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub canvas: usize,
    pub grid: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    /// Side of the square input window each cell sees (twice the cell size,
    /// so windows overlap their neighbors by half a cell on every side).
    pub window: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DetectorParams {
    pub fn input_dim(&self) -> usize {
        self.canvas * self.canvas
    }

    /// Dimension of the pooled window vector the hidden layer consumes.
    pub fn window_dim(&self) -> usize {
        (self.window / WINDOW_POOL) * (self.window / WINDOW_POOL)
    }

    pub fn cell_stride(&self) -> usize {
        1 + self.num_classes + 4
    }

    pub fn out_dim(&self) -> usize {
        self.grid * self.grid * self.cell_stride()
    }

    pub fn init(canvas: usize, grid: usize, num_classes: usize, hidden_dim: usize, seed: u64) -> Self {
        assert_eq!(canvas % grid, 0, "canvas must be divisible by the grid size");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE7EC7);
        let window = 2 * (canvas / grid);
        let window_dim = (window / WINDOW_POOL) * (window / WINDOW_POOL);
        let stride = 1 + num_classes + 4;
        let a1 = 1.0 / (window_dim as f64).sqrt();
        let a2 = 1.0 / (hidden_dim as f64).sqrt();
        DetectorParams {
            canvas,
            grid,
            num_classes,
            hidden_dim,
            window,
            w1: (0..hidden_dim * window_dim)
                .map(|_| rng.gen_range(-a1..a1))
                .collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..stride * hidden_dim)
                .map(|_| rng.gen_range(-a2..a2))
                .collect(),
            b2: vec![0.0; stride],
        }
    }

    /// Zero-padded pixel window centered on cell (row, col), average-pooled
    /// 2×2 to keep the shared layer small enough to learn from few examples.
    fn cell_window(&self, x: &[f64], row: usize, col: usize) -> Vec<f64> {
        let cell_px = self.canvas / self.grid;
        let half = cell_px / 2;
        let r0 = row * cell_px;
        let c0 = col * cell_px;
        let side = self.window / WINDOW_POOL;
        let mut win = vec![0.0; side * side];
        let weight = 1.0 / (WINDOW_POOL * WINDOW_POOL) as f64;
        for wr in 0..self.window {
            let ir = r0 + wr;
            if ir < half || ir - half >= self.canvas {
                continue;
            }
            let ir = ir - half;
            for wc in 0..self.window {
                let ic = c0 + wc;
                if ic < half || ic - half >= self.canvas {
                    continue;
                }
                win[(wr / WINDOW_POOL) * side + wc / WINDOW_POOL] +=
                    weight * x[ir * self.canvas + (ic - half)];
            }
        }
        win
    }
}

/// Per-cell regression target for one ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub cell_row: usize,
    pub cell_col: usize,
    pub cls: usize,
    /// Box center within the cell, in cell units in [0, 1].
    pub tx: f64,
    pub ty: f64,
    /// Box extent as a fraction of the canvas.
    pub tw: f64,
    pub th: f64,
}

/// Assigns each box to the cell owning its center. One object per cell;
/// later boxes landing in an occupied cell are dropped.
pub fn encode_boxes(boxes: &[BBox], grid: usize, canvas: usize) -> Vec<CellTarget> {
    let cell_px = canvas as f64 / grid as f64;
    let mut taken = vec![false; grid * grid];
    let mut out = Vec::new();
    for b in boxes {
        let cx = (b.rect.x_min + b.rect.x_max) / 2.0;
        let cy = (b.rect.y_min + b.rect.y_max) / 2.0;
        let col = ((cx / cell_px) as usize).min(grid - 1);
        let row = ((cy / cell_px) as usize).min(grid - 1);
        if taken[row * grid + col] {
            continue;
        }
        taken[row * grid + col] = true;
        out.push(CellTarget {
            cell_row: row,
            cell_col: col,
            cls: b.cls,
            tx: cx / cell_px - col as f64,
            ty: cy / cell_px - row as f64,
            tw: (b.rect.x_max - b.rect.x_min) / canvas as f64,
            th: (b.rect.y_max - b.rect.y_min) / canvas as f64,
        });
    }
    out
}

/// Inverse of [`encode_boxes`] for a single cell.
pub fn decode_cell(
    t: &CellTarget,
    grid: usize,
    canvas: usize,
) -> Rect {
    let cell_px = canvas as f64 / grid as f64;
    let cx = (t.cell_col as f64 + t.tx) * cell_px;
    let cy = (t.cell_row as f64 + t.ty) * cell_px;
    let w = t.tw * canvas as f64;
    let h = t.th * canvas as f64;
    let _ = grid;
    Rect::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const BOX_LOSS_WEIGHT: f64 = 5.0;
/// Empty cells outnumber object cells several-fold, so their objectness
/// loss is downweighted to keep the detector from defaulting to "nothing".
const NOOBJ_LOSS_WEIGHT: f64 = 0.2;

/// Runs the shared hidden layer and head on every cell window. Returns the
/// per-cell hidden activations (`grid² × hidden_dim`) and the per-cell
/// outputs (`grid² × cell_stride`), both concatenated in cell order.
fn det_forward(params: &DetectorParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let grid = params.grid;
    let stride = params.cell_stride();
    let wd = params.window_dim();
    let mut h = vec![0.0; grid * grid * params.hidden_dim];
    let mut out = vec![0.0; grid * grid * stride];
    for cell in 0..grid * grid {
        let win = params.cell_window(x, cell / grid, cell % grid);
        let hc = &mut h[cell * params.hidden_dim..(cell + 1) * params.hidden_dim];
        for j in 0..params.hidden_dim {
            let row = &params.w1[j * wd..(j + 1) * wd];
            let mut acc = params.b1[j];
            for (w, xi) in row.iter().zip(win.iter()) {
                acc += w * xi;
            }
            hc[j] = acc.max(0.0);
        }
        let oc = &mut out[cell * stride..(cell + 1) * stride];
        for k in 0..stride {
            let row = &params.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
            let mut acc = params.b2[k];
            for (w, hj) in row.iter().zip(hc.iter()) {
                acc += w * hj;
            }
            oc[k] = acc;
        }
    }
    (h, out)
}

struct DetGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    loss: f64,
}

fn det_sample_grads(params: &DetectorParams, s: &DetectionSample) -> DetGrads {
    let x = &s.image.pixels;
    let (h, out) = det_forward(params, x);
    let stride = params.cell_stride();
    let grid = params.grid;
    let c = params.num_classes;

    let targets = encode_boxes(&s.boxes, grid, params.canvas);
    let mut cell_target: Vec<Option<&CellTarget>> = vec![None; grid * grid];
    for t in &targets {
        cell_target[t.cell_row * grid + t.cell_col] = Some(t);
    }

    let mut dout = vec![0.0; params.out_dim()];
    let mut loss = 0.0;
    for cell in 0..grid * grid {
        let base = cell * stride;
        let obj_logit = out[base];
        let p_obj = sigmoid(obj_logit);
        match cell_target[cell] {
            Some(t) => {
                loss -= p_obj.max(1e-300).ln();
                dout[base] = p_obj - 1.0;
                let cls_logits = &out[base + 1..base + 1 + c];
                let probs = softmax(cls_logits);
                loss -= probs[t.cls].max(1e-300).ln();
                for k in 0..c {
                    dout[base + 1 + k] = probs[k] - if k == t.cls { 1.0 } else { 0.0 };
                }
                let tgt = [t.tx, t.ty, t.tw, t.th];
                for (k, &tv) in tgt.iter().enumerate() {
                    let pv = out[base + 1 + c + k];
                    let diff = pv - tv;
                    loss += BOX_LOSS_WEIGHT * diff * diff;
                    dout[base + 1 + c + k] = 2.0 * BOX_LOSS_WEIGHT * diff;
                }
            }
            None => {
                loss -= NOOBJ_LOSS_WEIGHT * (1.0 - p_obj).max(1e-300).ln();
                dout[base] = NOOBJ_LOSS_WEIGHT * p_obj;
            }
        }
    }

    let mut g = DetGrads {
        w1: vec![0.0; params.w1.len()],
        b1: vec![0.0; params.b1.len()],
        w2: vec![0.0; params.w2.len()],
        b2: vec![0.0; params.b2.len()],
        loss,
    };
    let wd = params.window_dim();
    for cell in 0..grid * grid {
        let base = cell * stride;
        let hc = &h[cell * params.hidden_dim..(cell + 1) * params.hidden_dim];
        let mut dh = vec![0.0; params.hidden_dim];
        let mut live = false;
        for k in 0..stride {
            let d = dout[base + k];
            if d == 0.0 {
                continue;
            }
            live = true;
            g.b2[k] += d;
            let wrow = &params.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
            let grow = &mut g.w2[k * params.hidden_dim..(k + 1) * params.hidden_dim];
            for j in 0..params.hidden_dim {
                grow[j] += d * hc[j];
                dh[j] += d * wrow[j];
            }
        }
        if !live {
            continue;
        }
        let win = params.cell_window(x, cell / grid, cell % grid);
        for j in 0..params.hidden_dim {
            if hc[j] > 0.0 && dh[j] != 0.0 {
                g.b1[j] += dh[j];
                let grow = &mut g.w1[j * wd..(j + 1) * wd];
                for (gi, xi) in grow.iter_mut().zip(win.iter()) {
                    *gi += dh[j] * xi;
                }
            }
        }
    }
    g
}

/// Minibatch SGD on the composite detection loss: objectness binary
/// cross-entropy everywhere, class cross-entropy and box squared error on
/// object cells.
pub fn train_detector(data: &DetectionSet, cfg: &TrainConfig) -> Result<DetectorParams, ModelError> {
    assert!(!data.samples.is_empty(), "training data must be non-empty");
    let canvas = data.samples[0].image.height;
    let mut params = DetectorParams::init(canvas, 4, data.num_classes, 128, cfg.seed);
    let mut vel = Velocity::zeros(
        params.w1.len(),
        params.b1.len(),
        params.w2.len(),
        params.b2.len(),
    );
    let n = data.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);

    for epoch in 0..cfg.epochs {
        let epoch_data;
        let samples: &[DetectionSample] = if cfg.augment.is_identity() {
            &data.samples
        } else {
            let augmented = augment_rotation(
                &Dataset::Detection(data.clone()),
                &cfg.augment,
                cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9),
            );
            epoch_data = match augmented {
                Dataset::Detection(set) => set.samples,
                _ => unreachable!(),
            };
            &epoch_data
        };

        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let grads = exec::par_map_slice(batch, |&i| det_sample_grads(&params, &samples[i]));
            let inv = 1.0 / batch.len() as f64;
            vel.decay(cfg.momentum);
            for g in &grads {
                epoch_loss += g.loss;
                axpy(&mut vel.w1, &g.w1, inv);
                axpy(&mut vel.b1, &g.b1, inv);
                axpy(&mut vel.w2, &g.w2, inv);
                axpy(&mut vel.b2, &g.b2, inv);
            }
            axpy(&mut params.w1, &vel.w1, -cfg.learning_rate);
            axpy(&mut params.b1, &vel.b1, -cfg.learning_rate);
            axpy(&mut params.w2, &vel.w2, -cfg.learning_rate);
            axpy(&mut params.b2, &vel.b2, -cfg.learning_rate);
        }
        if !epoch_loss.is_finite() {
            return Err(ModelError::DivergenceDetected(epoch));
        }
    }
    Ok(params)
}

/// A scored detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Decodes all cells, drops detections below the confidence threshold, and
/// applies greedy per-class non-maximum suppression.
pub fn detect(
    params: &DetectorParams,
    img: &Image,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>, ModelError> {
    if img.pixels.len() != params.input_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: params.input_dim(),
            got: img.pixels.len(),
        });
    }
    let (_, out) = det_forward(params, &img.pixels);
    let stride = params.cell_stride();
    let grid = params.grid;
    let c = params.num_classes;
    let mut cands = Vec::new();
    for cell in 0..grid * grid {
        let base = cell * stride;
        let p_obj = sigmoid(out[base]);
        let probs = softmax(&out[base + 1..base + 1 + c]);
        let cls = argmax(&probs);
        let confidence = p_obj * probs[cls];
        if confidence < conf_threshold {
            continue;
        }
        let t = CellTarget {
            cell_row: cell / grid,
            cell_col: cell % grid,
            cls,
            tx: out[base + 1 + c],
            ty: out[base + 1 + c + 1],
            tw: out[base + 1 + c + 2],
            th: out[base + 1 + c + 3],
        };
        let rect = decode_cell(&t, grid, params.canvas);
        if !rect.is_well_formed() {
            continue;
        }
        cands.push(Detection {
            bbox: BBox { rect, cls },
            confidence,
        });
    }
    Ok(nms(cands, nms_iou))
}

/// Greedy per-class non-maximum suppression in descending confidence.
pub fn nms(mut dets: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept.iter().any(|k| {
            k.bbox.cls == d.bbox.cls
                && iou(&k.bbox.rect, &d.bbox.rect).map(|v| v >= nms_iou).unwrap_or(false)
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"RTLB";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Classifier(MlpParams),
    Detector(DetectorParams),
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    dims: Vec<usize>,
    arrays: Vec<(String, usize)>,
}

/// Flat binary checkpoint: magic, version u32, JSON shape header, then
/// little-endian f64 arrays.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let (header, arrays): (CheckpointHeader, Vec<&[f64]>) = match ckpt {
        Checkpoint::Classifier(p) => (
            CheckpointHeader {
                kind: "classifier".into(),
                dims: vec![p.input_dim, p.hidden_dim, p.num_classes],
                arrays: vec![
                    ("w1".into(), p.w1.len()),
                    ("b1".into(), p.b1.len()),
                    ("w2".into(), p.w2.len()),
                    ("b2".into(), p.b2.len()),
                ],
            },
            vec![&p.w1, &p.b1, &p.w2, &p.b2],
        ),
        Checkpoint::Detector(p) => (
            CheckpointHeader {
                kind: "detector".into(),
                dims: vec![p.canvas, p.grid, p.num_classes, p.hidden_dim, p.window],
                arrays: vec![
                    ("w1".into(), p.w1.len()),
                    ("b1".into(), p.b1.len()),
                    ("w2".into(), p.w2.len()),
                    ("b2".into(), p.b2.len()),
                ],
            },
            vec![&p.w1, &p.b1, &p.w2, &p.b2],
        ),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::CheckpointIo(e.to_string()))?;
    let mut file =
        std::fs::File::create(path).map_err(|e| ModelError::CheckpointIo(e.to_string()))?;
    let io = |e: std::io::Error| ModelError::CheckpointIo(e.to_string());
    file.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io)?;
    file.write_all(&header_json).map_err(io)?;
    for arr in arrays {
        for v in arr {
            file.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut file =
        std::fs::File::open(path).map_err(|e| ModelError::CheckpointIo(e.to_string()))?;
    let io = |e: std::io::Error| ModelError::CheckpointIo(e.to_string());
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf).map_err(io)?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointFormat("unsupported version".into()));
    }
    file.read_exact(&mut u32buf).map_err(io)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;

    let mut read_array = |len: usize| -> Result<Vec<f64>, ModelError> {
        let mut bytes = vec![0u8; len * 8];
        file.read_exact(&mut bytes).map_err(io)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut arrays = Vec::new();
    for (_, len) in &header.arrays {
        arrays.push(read_array(*len)?);
    }
    let [w1, b1, w2, b2]: [Vec<f64>; 4] = arrays
        .try_into()
        .map_err(|_| ModelError::CheckpointFormat("expected four arrays".into()))?;

    match header.kind.as_str() {
        "classifier" => {
            let [input_dim, hidden_dim, num_classes]: [usize; 3] = header
                .dims
                .try_into()
                .map_err(|_| ModelError::CheckpointFormat("classifier needs 3 dims".into()))?;
            Ok(Checkpoint::Classifier(MlpParams {
                input_dim,
                hidden_dim,
                num_classes,
                w1,
                b1,
                w2,
                b2,
            }))
        }
        "detector" => {
            let [canvas, grid, num_classes, hidden_dim, window]: [usize; 5] = header
                .dims
                .try_into()
                .map_err(|_| ModelError::CheckpointFormat("detector needs 5 dims".into()))?;
            Ok(Checkpoint::Detector(DetectorParams {
                canvas,
                grid,
                num_classes,
                hidden_dim,
                window,
                w1,
                b1,
                w2,
                b2,
            }))
        }
        other => Err(ModelError::CheckpointFormat(format!(
            "unknown kind {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_classification_dataset, SyntheticSpec};

    fn toy_set() -> ClassificationSet {
        gen_classification_dataset(&SyntheticSpec {
            num_classes: 2,
            samples_per_class: 30,
            canvas: 16,
            orientation_jitter: 3.0,
            seed: 17,
            family_map: None,
        })
        .unwrap()
    }

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_pixels(
            side,
            side,
            1,
            (0..side * side).map(|_| rng.gen::<f64>()).collect(),
        )
    }

    #[test]
    fn probabilities_normalize_and_zero_model_is_uniform() {
        let mut params = MlpParams::init(256, 16, 4, 1);
        let img = random_image(16, 2);
        let probs = classify(&params, &img).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        params.w1.iter_mut().for_each(|w| *w = 0.0);
        params.w2.iter_mut().for_each(|w| *w = 0.0);
        let uniform = classify(&params, &img).unwrap();
        for p in uniform {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_shape_mismatch() {
        let params = MlpParams::init(256, 16, 4, 1);
        let img = random_image(8, 3);
        assert!(matches!(
            classify(&params, &img),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    // Second, independent implementation of the forward pass.
    #[test]
    fn classify_matches_naive_forward_oracle() {
        let params = MlpParams::init(64, 8, 3, 4);
        let img = random_image(8, 5);
        let probs = classify(&params, &img).unwrap();

        let mut h = vec![0.0; 8];
        for j in 0..8 {
            let mut acc = params.b1[j];
            for i in 0..64 {
                acc += params.w1[j * 64 + i] * img.pixels[i];
            }
            h[j] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut logits = vec![0.0; 3];
        for k in 0..3 {
            let mut acc = params.b2[k];
            for j in 0..8 {
                acc += params.w2[k * 8 + j] * h[j];
            }
            logits[k] = acc;
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..3 {
            assert!((probs[k] - logits[k].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let params = MlpParams::init(64, 12, 3, 6);
        for trial in 0..20 {
            let img = random_image(8, 100 + trial);
            let target = (trial % 3) as usize;
            let grad = input_gradient(&params, &img, target).unwrap();
            let eps = 1e-6;
            let mut max_rel: f64 = 0.0;
            for i in (0..64).step_by(7) {
                let mut plus = img.clone();
                plus.pixels[i] += eps;
                let mut minus = img.clone();
                minus.pixels[i] -= eps;
                let lp = -(classify(&params, &plus).unwrap()[target].ln());
                let lm = -(classify(&params, &minus).unwrap()[target].ln());
                let fd = (lp - lm) / (2.0 * eps);
                let denom = grad[i].abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max((grad[i] - fd).abs() / denom);
            }
            assert!(max_rel <= 1e-4, "relative error {max_rel} on trial {trial}");
        }
    }

    #[test]
    fn input_gradient_structural_zero() {
        let mut params = MlpParams::init(16, 4, 2, 7);
        for j in 0..4 {
            params.w1[j * 16 + 5] = 0.0;
        }
        let img = random_image(4, 8);
        let grad = input_gradient(&params, &img, 1).unwrap();
        assert_eq!(grad[5], 0.0);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = toy_set();
        let cfg = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let init = MlpParams::init(256, 128, 2, cfg.seed);
        let initial = mean_cross_entropy(&init, &data.examples).unwrap();
        let trained = train_classifier(&data, &cfg).unwrap();
        let fin = mean_cross_entropy(&trained, &data.examples).unwrap();
        assert!(fin < initial, "loss {fin} not below initial {initial}");

        let again = train_classifier(&data, &cfg).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn separable_toy_set_reaches_full_train_accuracy() {
        let data = toy_set();
        let cfg = TrainConfig {
            epochs: 120,
            ..Default::default()
        };
        let params = train_classifier(&data, &cfg).unwrap();
        let correct = data
            .examples
            .iter()
            .filter(|ex| argmax(&classify(&params, &ex.image).unwrap()) == ex.label)
            .count();
        assert_eq!(correct, data.examples.len());
    }

    #[test]
    fn softmax_permutation_equivariance() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let p = softmax(&logits);
        let permuted = [logits[2], logits[0], logits[3], logits[1]];
        let q = softmax(&permuted);
        assert!((q[0] - p[2]).abs() < 1e-15);
        assert!((q[1] - p[0]).abs() < 1e-15);
        assert!((q[2] - p[3]).abs() < 1e-15);
        assert!((q[3] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn box_encode_decode_round_trip() {
        let canvas = 64;
        let grid = 4;
        let boxes = vec![
            BBox {
                rect: Rect::new(3.0, 5.0, 19.0, 22.0),
                cls: 1,
            },
            BBox {
                rect: Rect::new(40.0, 41.5, 58.0, 60.0),
                cls: 3,
            },
        ];
        let targets = encode_boxes(&boxes, grid, canvas);
        assert_eq!(targets.len(), 2);
        for (t, b) in targets.iter().zip(boxes.iter()) {
            let rect = decode_cell(t, grid, canvas);
            assert!((rect.x_min - b.rect.x_min).abs() < 0.5);
            assert!((rect.y_min - b.rect.y_min).abs() < 0.5);
            assert!((rect.x_max - b.rect.x_max).abs() < 0.5);
            assert!((rect.y_max - b.rect.y_max).abs() < 0.5);
        }
    }

    #[test]
    fn nms_keeps_highest_confidence() {
        let a = Detection {
            bbox: BBox {
                rect: Rect::new(0.0, 0.0, 10.0, 10.0),
                cls: 0,
            },
            confidence: 0.9,
        };
        let mut b = a.clone();
        b.bbox.rect = Rect::new(0.5, 0.5, 10.5, 10.5);
        b.confidence = 0.8;
        let kept = nms(vec![b, a.clone()], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        // Different classes are never suppressed against each other.
        let mut c = a.clone();
        c.bbox.cls = 1;
        c.confidence = 0.7;
        let kept = nms(vec![a, c], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn detect_on_suppressed_objectness_is_empty() {
        let mut params = DetectorParams::init(32, 4, 2, 8, 3);
        params.b2[0] = -50.0;
        for w in &mut params.w1 {
            *w = 0.0;
        }
        for w in &mut params.w2 {
            *w = 0.0;
        }
        let img = random_image(32, 9);
        let dets = detect(&params, &img, 0.5, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn detector_gradients_match_finite_differences() {
        let params = DetectorParams::init(16, 4, 3, 6, 21);
        let img = random_image(16, 4);
        let sample = DetectionSample {
            image: img,
            boxes: vec![
                BBox {
                    rect: Rect::new(2.0, 3.0, 7.0, 9.0),
                    cls: 1,
                },
                BBox {
                    rect: Rect::new(9.0, 10.0, 15.0, 15.0),
                    cls: 2,
                },
            ],
        };
        let g = det_sample_grads(&params, &sample);
        let loss_with = |params: &DetectorParams| det_sample_grads(params, &sample).loss;
        let eps = 1e-6;
        let arrays: [(&str, fn(&DetectorParams) -> &Vec<f64>, &[f64]); 4] = [
            ("w1", |p| &p.w1, &g.w1),
            ("b1", |p| &p.b1, &g.b1),
            ("w2", |p| &p.w2, &g.w2),
            ("b2", |p| &p.b2, &g.b2),
        ];
        for (name, field, analytic) in arrays {
            for i in (0..field(&params).len()).step_by(7) {
                let mut plus = params.clone();
                let mut minus = params.clone();
                match name {
                    "w1" => {
                        plus.w1[i] += eps;
                        minus.w1[i] -= eps;
                    }
                    "b1" => {
                        plus.b1[i] += eps;
                        minus.b1[i] -= eps;
                    }
                    "w2" => {
                        plus.w2[i] += eps;
                        minus.w2[i] -= eps;
                    }
                    _ => {
                        plus.b2[i] += eps;
                        minus.b2[i] -= eps;
                    }
                }
                let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * eps);
                let diff = (analytic[i] - numeric).abs();
                assert!(
                    diff <= 1e-4 * (1.0 + numeric.abs()),
                    "{name}[{i}]: analytic {} vs numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = MlpParams::init(64, 8, 3, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rtlb");
        save_checkpoint(&path, &Checkpoint::Classifier(params.clone())).unwrap();
        match load_checkpoint(&path).unwrap() {
            Checkpoint::Classifier(back) => assert_eq!(params, back),
            _ => panic!("kind changed"),
        }

        let det = DetectorParams::init(32, 4, 2, 8, 11);
        let path2 = dir.path().join("det.rtlb");
        save_checkpoint(&path2, &Checkpoint::Detector(det.clone())).unwrap();
        match load_checkpoint(&path2).unwrap() {
            Checkpoint::Detector(back) => assert_eq!(det, back),
            _ => panic!("kind changed"),
        }
    }

    #[test]
    fn clean_loss_curve_at_zero_matches_test_loss() {
        let data = toy_set();
        let cfg = TrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let params = train_classifier(&data, &cfg).unwrap();
        let curve = clean_loss_curve(&params, &data.examples, &[0.0, 90.0]).unwrap();
        let direct = mean_cross_entropy(&params, &data.examples).unwrap();
        assert!((curve[0].1 - direct).abs() < 1e-12);
        // Rotating a clean-trained glyph model far off-axis must hurt.
        assert!(curve[1].1 > curve[0].1);
    }
}
