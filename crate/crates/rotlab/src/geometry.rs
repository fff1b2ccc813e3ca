//! Deterministic raster geometry: rotation, inscribed cropping, object
//! compositing, mask-to-box derivation, IoU, and run-time corruption models.
//!
//! Pixels are stored as `[0,1]` reals; `[0,255]` integers exist only at the
//! PNG boundary. Rotation is counterclockwise-positive and uses
//! inverse-mapping bilinear interpolation about the image center; multiples
//! of 90 degrees are exact pixel permutations on square images.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("computed crop side {0} is below 2 pixels")]
    DegenerateCrop(usize),
    #[error("scaled object does not fit inside the canvas at the given placement")]
    InvalidPlacement,
    #[error("mask has no set bits")]
    EmptyMask,
    #[error("malformed box: min must be strictly below max per axis")]
    MalformedBox,
    #[error("blur kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("image i/o failed: {0}")]
    ImageIo(String),
}

/// Raster image with `channels` interleaved per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn from_pixels(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.pixels[(row * self.width + col) * self.channels + ch] = v;
    }

    /// Clamps every pixel into `[0,1]`.
    pub fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), GeometryError> {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let w = self.width as u32;
        let h = self.height as u32;
        let res = if self.channels == 1 {
            let buf: Vec<u8> = self.pixels.iter().map(|&v| quant(v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save(path)
        } else {
            let buf: Vec<u8> = self.pixels.iter().map(|&v| quant(v)).collect();
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save(path)
        };
        res.map_err(|e| GeometryError::ImageIo(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self, GeometryError> {
        let img = image::open(path).map_err(|e| GeometryError::ImageIo(e.to_string()))?;
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let pixels = g.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
                Image::from_pixels(h, w, 1, pixels)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let pixels = rgb.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
                Image::from_pixels(h, w, 3, pixels)
            }
        })
    }
}

/// Binary raster mask; bits are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), height * width);
        assert!(bits.iter().all(|&b| b <= 1), "mask bits must be 0 or 1");
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        debug_assert!(v <= 1);
        self.bits[row * self.width + col] = v;
    }
}

/// Rotation angle in degrees, counterclockwise-positive, normalized into
/// `(-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angle {
    degrees: f64,
}

impl Angle {
    pub fn from_degrees(deg: f64) -> Self {
        let mut d = deg % 360.0;
        if d <= -180.0 {
            d += 360.0;
        } else if d > 180.0 {
            d -= 360.0;
        }
        // -0.0 and the wrap boundary collapse to canonical representatives.
        if d == -0.0 {
            d = 0.0;
        }
        Angle { degrees: d }
    }

    pub fn degrees(&self) -> f64 {
        self.degrees
    }

    /// (sin, cos), snapped to exact values at multiples of 90 degrees so
    /// those rotations become exact pixel permutations.
    pub fn sin_cos(&self) -> (f64, f64) {
        let d = self.degrees;
        if d == 0.0 {
            (0.0, 1.0)
        } else if d == 90.0 {
            (1.0, 0.0)
        } else if d == 180.0 {
            (0.0, -1.0)
        } else if d == -90.0 {
            (-1.0, 0.0)
        } else {
            let r = d.to_radians();
            (r.sin(), r.cos())
        }
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.degrees % 90.0 == 0.0
    }
}

/// Placement of a scaled object on a canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub scale: f64,
}

/// Centered square crop within a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Axis-aligned box with real-valued coordinates, max edges exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn is_well_formed(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }
}

/// Intersection over union of two well-formed boxes.
pub fn iou(a: &Rect, b: &Rect) -> Result<f64, GeometryError> {
    if !a.is_well_formed() || !b.is_well_formed() {
        return Err(GeometryError::MalformedBox);
    }
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

#[inline]
fn bilinear_sample(img: &Image, sx: f64, sy: f64, ch: usize, fill: f64) -> f64 {
    let h = img.height as isize;
    let w = img.width as isize;
    // Absorb float jitter at the exact boundary.
    let eps = 1e-9;
    let sx = if sx > -eps && sx < 0.0 { 0.0 } else { sx };
    let sy = if sy > -eps && sy < 0.0 { 0.0 } else { sy };
    let sx = if sx > (w - 1) as f64 && sx < (w - 1) as f64 + eps {
        (w - 1) as f64
    } else {
        sx
    };
    let sy = if sy > (h - 1) as f64 && sy < (h - 1) as f64 + eps {
        (h - 1) as f64
    } else {
        sy
    };

    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let x0 = x0 as isize;
    let y0 = y0 as isize;

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            fill
        } else {
            img.get(y as usize, x as usize, ch)
        }
    };

    let v00 = at(x0, y0);
    let v10 = at(x0 + 1, y0);
    let v01 = at(x0, y0 + 1);
    let v11 = at(x0 + 1, y0 + 1);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Rotates the image about its center; pixels whose preimage falls outside
/// the source take `fill`.
pub fn rotate_raster(img: &Image, angle: Angle, fill: f64) -> Image {
    let (sin, cos) = angle.sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = Image::new(img.height, img.width, img.channels);
    for r in 0..img.height {
        let dy = r as f64 - cy;
        for c in 0..img.width {
            let dx = c as f64 - cx;
            // Inverse map in row-down raster coordinates; counterclockwise
            // visual rotation of the content.
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            for ch in 0..img.channels {
                out.set(r, c, ch, bilinear_sample(img, sx, sy, ch, fill));
            }
        }
    }
    out
}

/// Centered square containing no fill pixels after `rotate_raster`; side
/// fraction is 1/(|sin| + |cos|).
pub fn largest_inscribed_crop(side: usize, angle: Angle) -> CropRect {
    assert!(side >= 2, "side must be at least 2");
    let (sin, cos) = angle.sin_cos();
    let denom = sin.abs() + cos.abs();
    if angle.is_axis_aligned() {
        return CropRect {
            top: 0,
            left: 0,
            side,
        };
    }
    // side-1 rather than side keeps every bilinear neighborhood of the
    // cropped pixel centers inside the source, even when the centering
    // offset rounds by half a pixel.
    let cside = (((side - 1) as f64) / denom).floor().max(1.0) as usize;
    let top = (side - cside) / 2;
    CropRect {
        top,
        left: top,
        side: cside,
    }
}

/// Bilinear resize with corner alignment; a no-op when sizes match.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let mut out = Image::new(out_h, out_w, img.channels);
    let sy_scale = if out_h > 1 {
        (img.height as f64 - 1.0) / (out_h as f64 - 1.0)
    } else {
        0.0
    };
    let sx_scale = if out_w > 1 {
        (img.width as f64 - 1.0) / (out_w as f64 - 1.0)
    } else {
        0.0
    };
    for r in 0..out_h {
        let sy = r as f64 * sy_scale;
        for c in 0..out_w {
            let sx = c as f64 * sx_scale;
            for ch in 0..img.channels {
                out.set(r, c, ch, bilinear_sample(img, sx, sy, ch, 0.0));
            }
        }
    }
    out
}

fn crop(img: &Image, rect: CropRect) -> Image {
    let mut out = Image::new(rect.side, rect.side, img.channels);
    for r in 0..rect.side {
        for c in 0..rect.side {
            for ch in 0..img.channels {
                out.set(r, c, ch, img.get(rect.top + r, rect.left + c, ch));
            }
        }
    }
    out
}

/// Rotate, center-crop to the largest inscribed square, and resize back to
/// `out_side`; the output never contains fill pixels.
pub fn rotate_and_crop(img: &Image, angle: Angle, out_side: usize) -> Result<Image, GeometryError> {
    rotate_and_crop_with_fill(img, angle, out_side, 0.0)
}

/// Same as [`rotate_and_crop`] with an explicit fill value, usable as a
/// sentinel to audit that no fill survives the crop.
pub fn rotate_and_crop_with_fill(
    img: &Image,
    angle: Angle,
    out_side: usize,
    fill: f64,
) -> Result<Image, GeometryError> {
    assert_eq!(img.height, img.width, "rotate_and_crop expects a square image");
    let rect = largest_inscribed_crop(img.height, angle);
    if rect.side < 2 {
        return Err(GeometryError::DegenerateCrop(rect.side));
    }
    let rotated = rotate_raster(img, angle, fill);
    let cropped = crop(&rotated, rect);
    Ok(resize_bilinear(&cropped, out_side, out_side))
}

/// Scales the object/mask by `place.scale` and embeds them at
/// `(place.row, place.col)` on a zero-padded canvas.
pub fn prep_object(
    obj: &Image,
    mask: &BinaryMask,
    place: &Placement,
    canvas: (usize, usize),
) -> Result<(Image, BinaryMask), GeometryError> {
    assert_eq!(obj.height, mask.height);
    assert_eq!(obj.width, mask.width);
    assert!(place.scale > 0.0, "scale must be positive");
    let (canvas_h, canvas_w) = canvas;
    let new_h = ((obj.height as f64 * place.scale).round() as usize).max(1);
    let new_w = ((obj.width as f64 * place.scale).round() as usize).max(1);
    if place.row + new_h > canvas_h || place.col + new_w > canvas_w {
        return Err(GeometryError::InvalidPlacement);
    }

    let scaled = resize_bilinear(obj, new_h, new_w);
    // Nearest-neighbor keeps the mask binary through scaling.
    let mut scaled_mask = BinaryMask::new(new_h, new_w);
    for r in 0..new_h {
        let sr = if new_h > 1 {
            ((r as f64) * (mask.height as f64 - 1.0) / (new_h as f64 - 1.0)).round() as usize
        } else {
            0
        };
        for c in 0..new_w {
            let sc = if new_w > 1 {
                ((c as f64) * (mask.width as f64 - 1.0) / (new_w as f64 - 1.0)).round() as usize
            } else {
                0
            };
            scaled_mask.set(r, c, mask.get(sr, sc));
        }
    }

    let mut out_img = Image::new(canvas_h, canvas_w, obj.channels);
    let mut out_mask = BinaryMask::new(canvas_h, canvas_w);
    for r in 0..new_h {
        for c in 0..new_w {
            for ch in 0..obj.channels {
                out_img.set(place.row + r, place.col + c, ch, scaled.get(r, c, ch));
            }
            out_mask.set(place.row + r, place.col + c, scaled_mask.get(r, c));
        }
    }
    Ok((out_img, out_mask))
}

/// Rotates a binary mask and re-binarizes by threshold 0.5.
pub fn rotate_mask(mask: &BinaryMask, angle: Angle) -> BinaryMask {
    let as_img = Image::from_pixels(
        mask.height,
        mask.width,
        1,
        mask.bits.iter().map(|&b| b as f64).collect(),
    );
    let rotated = rotate_raster(&as_img, angle, 0.0);
    BinaryMask::from_bits(
        mask.height,
        mask.width,
        rotated
            .pixels
            .iter()
            .map(|&v| if v >= 0.5 { 1 } else { 0 })
            .collect(),
    )
}

/// Composites a rotated backdoor object onto the benign image:
/// `x (1 - R(prep(M))) + R(prep(x_b ⊗ M_b))`, mask broadcast across channels.
/// Also returns the rotated, re-binarized mask for box derivation.
pub fn composite_backdoor_with_mask(
    x: &Image,
    obj: &Image,
    mask: &BinaryMask,
    place: &Placement,
    angle: Angle,
) -> Result<(Image, BinaryMask), GeometryError> {
    let (prepped_obj, prepped_mask) = prep_object(obj, mask, place, (x.height, x.width))?;

    let mut masked = prepped_obj.clone();
    for r in 0..masked.height {
        for c in 0..masked.width {
            let m = prepped_mask.get(r, c) as f64;
            for ch in 0..masked.channels {
                let v = masked.get(r, c, ch);
                masked.set(r, c, ch, v * m);
            }
        }
    }

    let rot_mask = rotate_mask(&prepped_mask, angle);
    let rot_obj = rotate_raster(&masked, angle, 0.0);

    let mut out = x.clone();
    for r in 0..x.height {
        for c in 0..x.width {
            let m = rot_mask.get(r, c) as f64;
            for ch in 0..x.channels {
                let v = x.get(r, c, ch) * (1.0 - m) + rot_obj.get(r, c, ch);
                out.set(r, c, ch, v);
            }
        }
    }
    Ok((out, rot_mask))
}

pub fn composite_backdoor(
    x: &Image,
    obj: &Image,
    mask: &BinaryMask,
    place: &Placement,
    angle: Angle,
) -> Result<Image, GeometryError> {
    composite_backdoor_with_mask(x, obj, mask, place, angle).map(|(img, _)| img)
}

/// Tight axis-aligned box around the set bits, max edges exclusive,
/// returned as (x_min, y_min, x_max, y_max).
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<(usize, usize, usize, usize), GeometryError> {
    let mut x_min = usize::MAX;
    let mut y_min = usize::MAX;
    let mut x_max = 0usize;
    let mut y_max = 0usize;
    let mut any = false;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) == 1 {
                any = true;
                x_min = x_min.min(c);
                y_min = y_min.min(r);
                x_max = x_max.max(c + 1);
                y_max = y_max.max(r + 1);
            }
        }
    }
    if !any {
        return Err(GeometryError::EmptyMask);
    }
    Ok((x_min, y_min, x_max, y_max))
}

/// Run-time corruption model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Corruption {
    GaussianNoise { sigma: f64 },
    GaussianBlur { kernel: usize },
}

pub fn corrupt(img: &Image, kind: Corruption, seed: u64) -> Result<Image, GeometryError> {
    match kind {
        Corruption::GaussianNoise { sigma } => {
            assert!(sigma >= 0.0);
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, sigma).expect("valid sigma");
            let mut out = img.clone();
            for p in &mut out.pixels {
                *p = (*p + dist.sample(&mut rng)).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        Corruption::GaussianBlur { kernel } => {
            if kernel % 2 == 0 {
                return Err(GeometryError::EvenKernel(kernel));
            }
            if kernel == 1 {
                return Ok(img.clone());
            }
            Ok(gaussian_blur(img, kernel))
        }
    }
}

fn gaussian_blur(img: &Image, k: usize) -> Image {
    let half = (k / 2) as isize;
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let mut weights = Vec::with_capacity(k);
    let mut sum = 0.0;
    for i in 0..k {
        let d = i as f64 - half as f64;
        let w = (-d * d / (2.0 * sigma * sigma)).exp();
        weights.push(w);
        sum += w;
    }
    for w in &mut weights {
        *w /= sum;
    }

    // Reflect-101 border handling.
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
        }
        i as usize
    };

    let h = img.height as isize;
    let w = img.width as isize;
    // Horizontal pass.
    let mut tmp = Image::new(img.height, img.width, img.channels);
    for r in 0..img.height {
        for c in 0..img.width {
            for ch in 0..img.channels {
                let mut acc = 0.0;
                for (i, wt) in weights.iter().enumerate() {
                    let sc = reflect(c as isize + i as isize - half, w);
                    acc += wt * img.get(r, sc, ch);
                }
                tmp.set(r, c, ch, acc);
            }
        }
    }
    // Vertical pass.
    let mut out = Image::new(img.height, img.width, img.channels);
    for r in 0..img.height {
        for c in 0..img.width {
            for ch in 0..img.channels {
                let mut acc = 0.0;
                for (i, wt) in weights.iter().enumerate() {
                    let sr = reflect(r as isize + i as isize - half, h);
                    acc += wt * tmp.get(sr, c, ch);
                }
                out.set(r, c, ch, acc);
            }
        }
    }
    out
}
