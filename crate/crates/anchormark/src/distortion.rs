//! Parameterized image distortions: the training augmentation stack, the
//! held-out test set, the watermark attack grid, and a differentiable subset
//! used inside the embedding loop.
//!
//! Every application clamps to `[0,1]` and preserves shape; geometric ops
//! fill exposed borders with zeros.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{ImageTensor, CHANNELS};
use crate::rng::{self, Rng};

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionKind {
    /// Angle sampled uniformly in `[min_deg, max_deg]`; equal bounds give a
    /// deterministic rotation.
    Rotation { min_deg: f64, max_deg: f64 },
    Hflip,
    /// Multiplicative jitter strengths; factors sampled per draw as in the
    /// usual augmentation convention (`[1-s, 1+s]`, hue shift `[-h, h]`).
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    /// Random crop with area fraction in `[scale_min, scale_max]`, resized
    /// back to `out_size`.
    ResizedCrop {
        scale_min: f64,
        scale_max: f64,
        out_size: usize,
    },
    /// Additive Gaussian noise; `std` on the 0-255 scale.
    AddNoise { std: f64 },
    GaussianBlur {
        kernel: usize,
        sigma_min: f64,
        sigma_max: f64,
    },
    /// Encode/decode round trip at the given quality.
    JpegCompression { quality: u8 },
    /// Invert pixels above the threshold.
    Solarization { threshold: f64 },
    Saturation { factor: f64 },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    /// Shift on the hue circle, in turns (`[-0.5, 0.5]`).
    Hue { shift: f64 },
    /// Center crop removing `fraction` of the area, resized back.
    CropFraction { fraction: f64 },
    /// Each pixel independently forced to black or white with probability
    /// `prob`.
    SaltPepper { prob: f64 },
    /// Random 4-corner perspective warp; `distortion` scales the maximum
    /// corner displacement and `prob` the likelihood of applying it.
    Perspective { distortion: f64, prob: f64 },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(flatten)]
    pub kind: DistortionKind,
    pub probability: f64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, probability: f64) -> Result<Self> {
        let spec = DistortionSpec { kind, probability };
        spec.validate()?;
        Ok(spec)
    }

    pub fn always(kind: DistortionKind) -> Self {
        DistortionSpec {
            kind,
            probability: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Argument(format!(
                "probability {} outside [0,1]",
                self.probability
            )));
        }
        use DistortionKind::*;
        match &self.kind {
            Rotation { min_deg, max_deg } => {
                if !min_deg.is_finite() || !max_deg.is_finite() || min_deg > max_deg {
                    return Err(Error::Argument("rotation degree range invalid".into()));
                }
            }
            ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                for s in [brightness, contrast, saturation] {
                    if !(*s >= 0.0 && s.is_finite()) {
                        return Err(Error::Argument("jitter strength must be >= 0".into()));
                    }
                }
                if !(0.0..=0.5).contains(hue) {
                    return Err(Error::Argument("hue strength outside [0, 0.5]".into()));
                }
            }
            ResizedCrop {
                scale_min,
                scale_max,
                out_size,
            } => {
                if !(*scale_min > 0.0 && scale_min <= scale_max && *scale_max <= 1.0) {
                    return Err(Error::Argument("crop scale range invalid".into()));
                }
                if *out_size == 0 {
                    return Err(Error::Argument("out_size must be positive".into()));
                }
            }
            AddNoise { std } => {
                if !(*std >= 0.0 && std.is_finite()) {
                    return Err(Error::Argument("noise std must be >= 0".into()));
                }
            }
            GaussianBlur {
                kernel,
                sigma_min,
                sigma_max,
            } => {
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::Argument(format!(
                        "blur kernel must be odd and positive, got {kernel}"
                    )));
                }
                if !(*sigma_min > 0.0 && sigma_min <= sigma_max) {
                    return Err(Error::Argument("blur sigma range invalid".into()));
                }
            }
            JpegCompression { quality } => {
                if !(1..=100).contains(quality) {
                    return Err(Error::Argument("jpeg quality outside [1,100]".into()));
                }
            }
            Solarization { threshold } => {
                if !(0.0..=1.0).contains(threshold) {
                    return Err(Error::Argument("solarization threshold outside [0,1]".into()));
                }
            }
            Saturation { factor } | Brightness { factor } | Contrast { factor } => {
                if !(*factor >= 0.0 && factor.is_finite()) {
                    return Err(Error::Argument("factor must be >= 0".into()));
                }
            }
            Hue { shift } => {
                if !(-0.5..=0.5).contains(shift) {
                    return Err(Error::Argument("hue shift outside [-0.5, 0.5]".into()));
                }
            }
            CropFraction { fraction } => {
                if !(0.0..1.0).contains(fraction) {
                    return Err(Error::Argument("crop fraction outside [0,1)".into()));
                }
            }
            SaltPepper { prob } => {
                if !(0.0..=1.0).contains(prob) {
                    return Err(Error::Argument("salt&pepper prob outside [0,1]".into()));
                }
            }
            Perspective { distortion, prob } => {
                if !(*distortion >= 0.0 && distortion.is_finite()) || !(0.0..=1.0).contains(prob) {
                    return Err(Error::Argument("perspective params invalid".into()));
                }
            }
            Hflip | Identity => {}
        }
        Ok(())
    }

    /// Re-parameterize at a scalar strength; the mapping is the kind's
    /// natural scalar (degrees, kernel size, quality, factor, fraction, ...).
    pub fn with_strength(&self, s: f64) -> DistortionSpec {
        use DistortionKind::*;
        let kind = match &self.kind {
            Rotation { .. } => Rotation {
                min_deg: s,
                max_deg: s,
            },
            ColorJitter { .. } => ColorJitter {
                brightness: s,
                contrast: s,
                saturation: s,
                hue: (s / 2.0).min(0.5),
            },
            ResizedCrop { out_size, .. } => ResizedCrop {
                scale_min: s,
                scale_max: s,
                out_size: *out_size,
            },
            GaussianBlur { .. } => {
                let k = (s.round() as usize).max(1) | 1;
                GaussianBlur {
                    kernel: k,
                    sigma_min: auto_sigma(k),
                    sigma_max: auto_sigma(k),
                }
            }
            JpegCompression { .. } => JpegCompression {
                quality: (s.round() as i64).clamp(1, 100) as u8,
            },
            Solarization { .. } => Solarization { threshold: s },
            Saturation { .. } => Saturation { factor: s },
            Brightness { .. } => Brightness { factor: s },
            Contrast { .. } => Contrast { factor: s },
            Hue { .. } => Hue {
                shift: s.clamp(-0.5, 0.5),
            },
            CropFraction { .. } => CropFraction { fraction: s },
            AddNoise { .. } => AddNoise { std: s },
            SaltPepper { .. } => SaltPepper { prob: s },
            Perspective { .. } => Perspective {
                distortion: s,
                prob: 1.0,
            },
            Hflip => Hflip,
            Identity => Identity,
        };
        DistortionSpec {
            kind,
            probability: self.probability,
        }
    }

    /// The kind's natural scalar, for report rows.
    pub fn canonical_strength(&self) -> f64 {
        use DistortionKind::*;
        match &self.kind {
            Rotation { max_deg, .. } => *max_deg,
            ColorJitter { brightness, .. } => *brightness,
            ResizedCrop { scale_min, .. } => *scale_min,
            GaussianBlur { kernel, .. } => *kernel as f64,
            JpegCompression { quality } => *quality as f64,
            Solarization { threshold } => *threshold,
            Saturation { factor } | Brightness { factor } | Contrast { factor } => *factor,
            Hue { shift } => *shift,
            CropFraction { fraction } => *fraction,
            AddNoise { std } => *std,
            SaltPepper { prob } => *prob,
            Perspective { distortion, .. } => *distortion,
            Hflip | Identity => 0.0,
        }
    }
}

fn auto_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

// ---------------------------------------------------------------------------
// Bilinear warps (rotation, crop-resize, perspective) with zero fill.
// ---------------------------------------------------------------------------

/// Precomputed dst-to-src sampling geometry: a linear operator on pixels, so
/// the VJP is the transpose scatter of the forward gather.
#[derive(Debug, Clone)]
pub struct BilinearWarp {
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    /// Per dst pixel: `(x0, y0, fx, fy)`; x-coordinate < 0 marks outside.
    taps: Vec<(i32, i32, f64, f64)>,
}

impl BilinearWarp {
    /// `map` sends a destination pixel (x, y) to source coordinates.
    pub fn from_map(
        src_h: usize,
        src_w: usize,
        dst_h: usize,
        dst_w: usize,
        map: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        for y in 0..dst_h {
            for x in 0..dst_w {
                let (sx, sy) = map(x as f64, y as f64);
                if sx >= 0.0
                    && sx <= (src_w - 1) as f64
                    && sy >= 0.0
                    && sy <= (src_h - 1) as f64
                {
                    let x0 = sx.floor();
                    let y0 = sy.floor();
                    taps.push((x0 as i32, y0 as i32, sx - x0, sy - y0));
                } else {
                    taps.push((-1, -1, 0.0, 0.0));
                }
            }
        }
        BilinearWarp {
            src_h,
            src_w,
            dst_h,
            dst_w,
            taps,
        }
    }

    pub fn rotation(h: usize, w: usize, degrees: f64) -> Self {
        let theta = degrees.to_radians();
        let (sin, cos) = (theta.sin(), theta.cos());
        let cx = (w - 1) as f64 / 2.0;
        let cy = (h - 1) as f64 / 2.0;
        Self::from_map(h, w, h, w, move |x, y| {
            let u = x - cx;
            let v = y - cy;
            (cos * u + sin * v + cx, -sin * u + cos * v + cy)
        })
    }

    /// Resample the axis-aligned source window `[xph, x0+cw) x [y0, y0+ch)`
    /// to `out x out` with half-pixel centers.
    pub fn crop_resize(
        h: usize,
        w: usize,
        y0: f64,
        x0: f64,
        ch: f64,
        cw: f64,
        out: usize,
    ) -> Self {
        let sy = ch / out as f64;
        let sx = cw / out as f64;
        Self::from_map(h, w, out, out, move |x, y| {
            (
                x0 + (x + 0.5) * sx - 0.5,
                y0 + (y + 0.5) * sy - 0.5,
            )
        })
    }

    pub fn forward(&self, img: &ImageTensor) -> ImageTensor {
        assert_eq!((img.height, img.width), (self.src_h, self.src_w));
        let mut out = ImageTensor::zeros(self.dst_h, self.dst_w);
        for (pi, &(x0, y0, fx, fy)) in self.taps.iter().enumerate() {
            if x0 < 0 {
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            let x1 = (x0 + 1).min(self.src_w - 1);
            let y1 = (y0 + 1).min(self.src_h - 1);
            for c in 0..CHANNELS {
                let v = img.get(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
                    + img.get(y0, x1, c) * (1.0 - fy) * fx
                    + img.get(y1, x0, c) * fy * (1.0 - fx)
                    + img.get(y1, x1, c) * fy * fx;
                out.data[pi * CHANNELS + c] = v;
            }
        }
        out
    }

    /// Transpose: scatter an upstream gradient over dst pixels back onto src.
    pub fn vjp(&self, grad_out: &ImageTensor) -> ImageTensor {
        assert_eq!((grad_out.height, grad_out.width), (self.dst_h, self.dst_w));
        let mut grad_in = ImageTensor::zeros(self.src_h, self.src_w);
        for (pi, &(x0, y0, fx, fy)) in self.taps.iter().enumerate() {
            if x0 < 0 {
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            let x1 = (x0 + 1).min(self.src_w - 1);
            let y1 = (y0 + 1).min(self.src_h - 1);
            for c in 0..CHANNELS {
                let g = grad_out.data[pi * CHANNELS + c];
                *grad_in.data.get_mut((y0 * self.src_w + x0) * CHANNELS + c).unwrap() +=
                    g * (1.0 - fy) * (1.0 - fx);
                *grad_in.data.get_mut((y0 * self.src_w + x1) * CHANNELS + c).unwrap() +=
                    g * (1.0 - fy) * fx;
                *grad_in.data.get_mut((y1 * self.src_w + x0) * CHANNELS + c).unwrap() +=
                    g * fy * (1.0 - fx);
                *grad_in.data.get_mut((y1 * self.src_w + x1) * CHANNELS + c).unwrap() +=
                    g * fy * fx;
            }
        }
        grad_in
    }
}

// ---------------------------------------------------------------------------
// Separable Gaussian blur with replicate borders.
// ---------------------------------------------------------------------------

fn gaussian_kernel(kernel: usize, sigma: f64) -> Vec<f64> {
    let c = (kernel / 2) as f64;
    let mut k: Vec<f64> = (0..kernel)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn blur_pass(img: &ImageTensor, k: &[f64], horizontal: bool) -> ImageTensor {
    let c = (k.len() / 2) as i64;
    let mut out = ImageTensor::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..CHANNELS {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let off = i as i64 - c;
                    let (sy, sx) = if horizontal {
                        (y as i64, (x as i64 + off).clamp(0, img.width as i64 - 1))
                    } else {
                        ((y as i64 + off).clamp(0, img.height as i64 - 1), x as i64)
                    };
                    acc += kv * img.get(sy as usize, sx as usize, ch);
                }
                out.set(y, x, ch, acc);
            }
        }
    }
    out
}

/// Adjoint of `blur_pass`: scatter through the same clamped index map.
fn blur_pass_t(grad: &ImageTensor, k: &[f64], horizontal: bool) -> ImageTensor {
    let c = (k.len() / 2) as i64;
    let mut out = ImageTensor::zeros(grad.height, grad.width);
    for y in 0..grad.height {
        for x in 0..grad.width {
            for ch in 0..CHANNELS {
                let g = grad.get(y, x, ch);
                for (i, kv) in k.iter().enumerate() {
                    let off = i as i64 - c;
                    let (sy, sx) = if horizontal {
                        (y as i64, (x as i64 + off).clamp(0, grad.width as i64 - 1))
                    } else {
                        ((y as i64 + off).clamp(0, grad.height as i64 - 1), x as i64)
                    };
                    let idx = (sy as usize * grad.width + sx as usize) * CHANNELS + ch;
                    out.data[idx] += g * kv;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Color ops.
// ---------------------------------------------------------------------------

fn apply_brightness(img: &ImageTensor, factor: f64) -> ImageTensor {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    out
}

fn image_mean_luma(img: &ImageTensor) -> f64 {
    let mut acc = 0.0;
    for p in img.data.chunks_exact(CHANNELS) {
        acc += luma(p[0], p[1], p[2]);
    }
    acc / (img.height * img.width) as f64
}

fn apply_contrast(img: &ImageTensor, factor: f64) -> ImageTensor {
    let m = image_mean_luma(img);
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (factor * *v + (1.0 - factor) * m).clamp(0.0, 1.0);
    }
    out
}

fn apply_saturation(img: &ImageTensor, factor: f64) -> ImageTensor {
    let mut out = img.clone();
    for p in out.data.chunks_exact_mut(CHANNELS) {
        let l = luma(p[0], p[1], p[2]);
        for v in p.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * l).clamp(0.0, 1.0);
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn apply_hue(img: &ImageTensor, shift: f64) -> ImageTensor {
    let mut out = img.clone();
    for p in out.data.chunks_exact_mut(CHANNELS) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        p[0] = r.clamp(0.0, 1.0);
        p[1] = g.clamp(0.0, 1.0);
        p[2] = b.clamp(0.0, 1.0);
    }
    out
}

// ---------------------------------------------------------------------------
// Perspective.
// ---------------------------------------------------------------------------

/// Solve the 8x8 system for the projective map sending `from` to `to`.
#[allow(clippy::needless_range_loop)]
fn homography(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the augmented system.
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        let d = a[col][col];
        for k in col..9 {
            a[col][k] /= d;
        }
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for (i, hi) in h.iter_mut().take(8).enumerate() {
        *hi = a[i][8];
    }
    h[8] = 1.0;
    Some(h)
}

fn perspective_warp(h: usize, w: usize, distortion: f64, rng: &mut Rng) -> BilinearWarp {
    let half_w = w as f64 / 2.0;
    let half_h = h as f64 / 2.0;
    let dx = distortion * half_w;
    let dy = distortion * half_h;
    // displaced corners move inward, as in the usual perspective augmentation
    let tl = (rng.gen_range(0.0..=dx), rng.gen_range(0.0..=dy));
    let tr = (w as f64 - 1.0 - rng.gen_range(0.0..=dx), rng.gen_range(0.0..=dy));
    let br = (
        w as f64 - 1.0 - rng.gen_range(0.0..=dx),
        h as f64 - 1.0 - rng.gen_range(0.0..=dy),
    );
    let bl = (rng.gen_range(0.0..=dx), h as f64 - 1.0 - rng.gen_range(0.0..=dy));
    let dst_corners = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (w as f64 - 1.0, h as f64 - 1.0),
        (0.0, h as f64 - 1.0),
    ];
    // dst -> src map: original corners viewed from the displaced quad
    match homography(dst_corners, [tl, tr, br, bl]) {
        Some(m) => BilinearWarp::from_map(h, w, h, w, move |x, y| {
            let d = m[6] * x + m[7] * y + m[8];
            ((m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d)
        }),
        None => BilinearWarp::rotation(h, w, 0.0),
    }
}

// ---------------------------------------------------------------------------
// apply
// ---------------------------------------------------------------------------

fn jpeg_round_trip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    rgb.write_with_encoder(enc)
        .map_err(|e| Error::Numeric(format!("jpeg encode: {e}")))?;
    let dec = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Numeric(format!("jpeg decode: {e}")))?;
    Ok(ImageTensor::from_rgb8(&dec.to_rgb8()))
}

/// Apply one distortion draw. Strength parameters with ranges are sampled
/// from `rng`; the `probability` field is *not* consulted here (pipelines
/// gate on it).
pub fn apply(spec: &DistortionSpec, img: &ImageTensor, rng: &mut Rng) -> Result<ImageTensor> {
    spec.validate()?;
    use DistortionKind::*;
    let mut out = match &spec.kind {
        Identity => img.clone(),
        Hflip => {
            let mut out = ImageTensor::zeros(img.height, img.width);
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..CHANNELS {
                        out.set(y, x, c, img.get(y, img.width - 1 - x, c));
                    }
                }
            }
            out
        }
        Rotation { min_deg, max_deg } => {
            let deg = if min_deg == max_deg {
                *min_deg
            } else {
                rng.gen_range(*min_deg..=*max_deg)
            };
            BilinearWarp::rotation(img.height, img.width, deg).forward(img)
        }
        ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
        } => {
            let bf = rng.gen_range((1.0 - brightness).max(0.0)..=1.0 + brightness);
            let cf = rng.gen_range((1.0 - contrast).max(0.0)..=1.0 + contrast);
            let sf = rng.gen_range((1.0 - saturation).max(0.0)..=1.0 + saturation);
            let hs = if *hue > 0.0 {
                rng.gen_range(-hue..=*hue)
            } else {
                0.0
            };
            let mut cur = apply_brightness(img, bf);
            cur = apply_contrast(&cur, cf);
            cur = apply_saturation(&cur, sf);
            apply_hue(&cur, hs)
        }
        ResizedCrop {
            scale_min,
            scale_max,
            out_size,
        } => {
            let area = (img.height * img.width) as f64;
            let s = if scale_min == scale_max {
                *scale_min
            } else {
                rng.gen_range(*scale_min..=*scale_max)
            };
            let ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
            let target = area * s;
            let mut cw = (target * ratio).sqrt();
            let mut ch = (target / ratio).sqrt();
            cw = cw.min(img.width as f64);
            ch = ch.min(img.height as f64);
            let x0 = rng.gen_range(0.0..=(img.width as f64 - cw));
            let y0 = rng.gen_range(0.0..=(img.height as f64 - ch));
            BilinearWarp::crop_resize(img.height, img.width, y0, x0, ch, cw, *out_size)
                .forward(img)
        }
        AddNoise { std } => {
            let sd = std / 255.0;
            let mut out = img.clone();
            for v in &mut out.data {
                let n: f64 = StandardNormal.sample(rng);
                *v += sd * n;
            }
            out
        }
        GaussianBlur {
            kernel,
            sigma_min,
            sigma_max,
        } => {
            let sigma = if sigma_min == sigma_max {
                *sigma_min
            } else {
                rng.gen_range(*sigma_min..=*sigma_max)
            };
            let k = gaussian_kernel(*kernel, sigma);
            blur_pass(&blur_pass(img, &k, true), &k, false)
        }
        JpegCompression { quality } => jpeg_round_trip(img, *quality)?,
        Solarization { threshold } => {
            let mut out = img.clone();
            for v in &mut out.data {
                if *v > *threshold {
                    *v = 1.0 - *v;
                }
            }
            out
        }
        Saturation { factor } => apply_saturation(img, *factor),
        Brightness { factor } => apply_brightness(img, *factor),
        Contrast { factor } => apply_contrast(img, *factor),
        Hue { shift } => apply_hue(img, *shift),
        CropFraction { fraction } => center_crop_warp(img.height, img.width, *fraction).forward(img),
        SaltPepper { prob } => {
            let mut out = img.clone();
            for p in out.data.chunks_exact_mut(CHANNELS) {
                if rng.gen::<f64>() < *prob {
                    let v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                    p.fill(v);
                }
            }
            out
        }
        Perspective { distortion, prob } => {
            if rng.gen::<f64>() < *prob {
                perspective_warp(img.height, img.width, *distortion, rng).forward(img)
            } else {
                img.clone()
            }
        }
    };
    out.clamp_unit();
    if out.height != img.height || out.width != img.width {
        // resized_crop may target a different out_size than the input
        out = out.resize(img.height, img.width);
    }
    Ok(out)
}

fn center_crop_warp(h: usize, w: usize, fraction: f64) -> BilinearWarp {
    let keep = (1.0 - fraction).sqrt();
    let ch = h as f64 * keep;
    let cw = w as f64 * keep;
    let y0 = (h as f64 - ch) / 2.0;
    let x0 = (w as f64 - cw) / 2.0;
    BilinearWarp::crop_resize(h, w, y0, x0, ch, cw, w.max(h))
}

// ---------------------------------------------------------------------------
// Pipelines and grids.
// ---------------------------------------------------------------------------

/// Ordered distortion stack; each spec fires independently with its
/// probability. Gate draws and strength draws use separate derived streams
/// so firing decisions can be inspected without perturbing strengths.
#[derive(Debug, Clone)]
pub struct DistortionPipeline {
    pub specs: Vec<DistortionSpec>,
    pub rng_seed: u64,
}

impl DistortionPipeline {
    pub fn new(specs: Vec<DistortionSpec>, rng_seed: u64) -> Result<Self> {
        for s in &specs {
            s.validate()?;
        }
        Ok(DistortionPipeline { specs, rng_seed })
    }

    /// Which specs fire for a given draw.
    pub fn gates(&self, draw_index: u64) -> Vec<bool> {
        let mut gate_rng = rng::derive(self.rng_seed, "pipeline-gate", draw_index, 0);
        self.specs
            .iter()
            .map(|s| gate_rng.gen::<f64>() < s.probability)
            .collect()
    }

    /// Apply the stack for draw `draw_index`; deterministic in
    /// `(rng_seed, draw_index, image)`.
    pub fn apply(&self, img: &ImageTensor, draw_index: u64) -> Result<ImageTensor> {
        let gates = self.gates(draw_index);
        let mut param_rng = rng::derive(self.rng_seed, "pipeline-param", draw_index, 0);
        let mut cur = img.clone();
        for (spec, fire) in self.specs.iter().zip(gates) {
            if fire {
                cur = apply(spec, &cur, &mut param_rng)?;
            }
        }
        Ok(cur)
    }
}

/// The training augmentation stack: rotation, flip, color jitter, and
/// resized crop always on; minimal noise and blur at 50%; strong noise at
/// 30%.
pub fn training_pipeline(seed: u64) -> DistortionPipeline {
    use DistortionKind::*;
    let specs = vec![
        DistortionSpec {
            kind: Rotation {
                min_deg: -30.0,
                max_deg: 30.0,
            },
            probability: 1.0,
        },
        DistortionSpec {
            kind: Hflip,
            probability: 1.0,
        },
        DistortionSpec {
            kind: ColorJitter {
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
                hue: 0.1,
            },
            probability: 1.0,
        },
        DistortionSpec {
            kind: ResizedCrop {
                scale_min: 0.8,
                scale_max: 1.0,
                out_size: 224,
            },
            probability: 1.0,
        },
        DistortionSpec {
            kind: AddNoise { std: 5.0 },
            probability: 0.5,
        },
        DistortionSpec {
            kind: GaussianBlur {
                kernel: 5,
                sigma_min: 0.1,
                sigma_max: 2.0,
            },
            probability: 0.5,
        },
        DistortionSpec {
            kind: AddNoise { std: 25.0 },
            probability: 0.3,
        },
    ];
    DistortionPipeline {
        specs,
        rng_seed: seed,
    }
}

/// The testing-checked distortion set: rotation, color jitter, resized crop,
/// JPEG compression, solarization, saturation. Strengths are defaults meant
/// to be swept from the CLI.
pub fn test_suite() -> Vec<(String, DistortionSpec)> {
    use DistortionKind::*;
    vec![
        (
            "rotation".into(),
            DistortionSpec::always(Rotation {
                min_deg: 30.0,
                max_deg: 30.0,
            }),
        ),
        (
            "color_jitter".into(),
            DistortionSpec::always(ColorJitter {
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
                hue: 0.1,
            }),
        ),
        (
            "resized_crop".into(),
            DistortionSpec::always(ResizedCrop {
                scale_min: 0.8,
                scale_max: 1.0,
                out_size: 224,
            }),
        ),
        (
            "jpeg_compression".into(),
            DistortionSpec::always(JpegCompression { quality: 50 }),
        ),
        (
            "solarization".into(),
            DistortionSpec::always(Solarization { threshold: 0.5 }),
        ),
        (
            "saturation".into(),
            DistortionSpec::always(Saturation { factor: 1.5 }),
        ),
    ]
}

/// The watermark attack grid: blur/crop/rotation/brightness/saturation cells
/// plus salt & pepper and perspective extras.
pub fn attack_grid() -> Vec<(String, DistortionSpec)> {
    use DistortionKind::*;
    let mut grid = Vec::new();
    for k in [3usize, 7, 9] {
        grid.push((
            format!("blur_k{k}"),
            DistortionSpec::always(GaussianBlur {
                kernel: k,
                sigma_min: auto_sigma(k),
                sigma_max: auto_sigma(k),
            }),
        ));
    }
    for pct in [5u32, 10, 15] {
        grid.push((
            format!("crop_{pct}pct"),
            DistortionSpec::always(CropFraction {
                fraction: pct as f64 / 100.0,
            }),
        ));
    }
    for deg in [2.0f64, 6.0, 10.0] {
        grid.push((
            format!("rotation_{deg}"),
            DistortionSpec::always(Rotation {
                min_deg: deg,
                max_deg: deg,
            }),
        ));
    }
    for f in [1.0f64, 1.1, 1.2] {
        grid.push((
            format!("brightness_{f}"),
            DistortionSpec::always(Brightness { factor: f }),
        ));
    }
    for f in [1.0f64, 1.05, 1.1] {
        grid.push((
            format!("saturation_{f}"),
            DistortionSpec::always(Saturation { factor: f }),
        ));
    }
    for p in [0.05f64, 0.10] {
        grid.push((
            format!("salt_pepper_{p}"),
            DistortionSpec::always(SaltPepper { prob: p }),
        ));
    }
    for (d, p) in [(0.7f64, 0.7f64), (1.0, 1.0)] {
        grid.push((
            format!("perspective_d{d}_p{p}"),
            DistortionSpec::always(Perspective {
                distortion: d,
                prob: p,
            }),
        ));
    }
    grid
}

/// Kinds whose application is differentiable w.r.t. input pixels; sampled by
/// the watermark embedding loop. The identity view carries extra weight so
/// the un-transformed decode path dominates the optimization.
pub fn differentiable_transform_set() -> Vec<DistortionSpec> {
    use DistortionKind::*;
    vec![
        DistortionSpec::always(Identity),
        DistortionSpec::always(Identity),
        DistortionSpec::always(Identity),
        DistortionSpec::always(Rotation {
            min_deg: -5.0,
            max_deg: 5.0,
        }),
        DistortionSpec::always(CropFraction { fraction: 0.04 }),
        DistortionSpec::always(CropFraction { fraction: 0.08 }),
        DistortionSpec::always(GaussianBlur {
            kernel: 5,
            sigma_min: 0.1,
            sigma_max: 2.0,
        }),
        DistortionSpec::always(Brightness { factor: 0.95 }),
        DistortionSpec::always(Brightness { factor: 1.05 }),
        DistortionSpec::always(Contrast { factor: 0.95 }),
        DistortionSpec::always(Contrast { factor: 1.05 }),
    ]
}

/// Serialize a named grid to JSON.
pub fn save_grid(grid: &[(String, DistortionSpec)], path: &std::path::Path) -> Result<()> {
    #[derive(Serialize)]
    struct Entry<'a> {
        name: &'a str,
        #[serde(flatten)]
        spec: &'a DistortionSpec,
    }
    let entries: Vec<Entry> = grid
        .iter()
        .map(|(name, spec)| Entry { name, spec })
        .collect();
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| Error::Config(format!("grid serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &std::path::Path) -> Result<Vec<(String, DistortionSpec)>> {
    #[derive(Deserialize)]
    struct Entry {
        name: String,
        #[serde(flatten)]
        spec: DistortionSpec,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<Entry> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("grid parse: {e}")))?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        e.spec.validate()?;
        out.push((e.name, e.spec));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Differentiable application with VJP, for the embedding loop.
// ---------------------------------------------------------------------------

/// A transform instance with frozen parameters plus the state needed to
/// back-propagate through it.
pub enum AppliedTransform {
    Identity,
    Warp(BilinearWarp),
    Blur { kernel: Vec<f64> },
    /// `mask[i]` is 1.0 where the output was not clamped.
    Pointwise { factor: f64, mean_coef: f64, mask: Vec<f64> },
}

/// Sample a concrete differentiable transform from a spec, freezing strength
/// draws, and apply it. Returns the output and the applied instance.
pub fn apply_differentiable(
    spec: &DistortionSpec,
    img: &ImageTensor,
    rng: &mut Rng,
) -> Result<(ImageTensor, AppliedTransform)> {
    use DistortionKind::*;
    match &spec.kind {
        Identity => Ok((img.clone(), AppliedTransform::Identity)),
        Rotation { min_deg, max_deg } => {
            let deg = if min_deg == max_deg {
                *min_deg
            } else {
                rng.gen_range(*min_deg..=*max_deg)
            };
            let warp = BilinearWarp::rotation(img.height, img.width, deg);
            Ok((warp.forward(img), AppliedTransform::Warp(warp)))
        }
        CropFraction { fraction } => {
            let warp = center_crop_warp(img.height, img.width, *fraction);
            Ok((warp.forward(img), AppliedTransform::Warp(warp)))
        }
        GaussianBlur {
            kernel,
            sigma_min,
            sigma_max,
        } => {
            let sigma = if sigma_min == sigma_max {
                *sigma_min
            } else {
                rng.gen_range(*sigma_min..=*sigma_max)
            };
            let k = gaussian_kernel(*kernel, sigma);
            let out = blur_pass(&blur_pass(img, &k, true), &k, false);
            Ok((out, AppliedTransform::Blur { kernel: k }))
        }
        Brightness { factor } => {
            let mut out = img.clone();
            let mut mask = vec![1.0; out.data.len()];
            for (v, m) in out.data.iter_mut().zip(&mut mask) {
                let raw = *v * factor;
                if !(0.0..=1.0).contains(&raw) {
                    *m = 0.0;
                }
                *v = raw.clamp(0.0, 1.0);
            }
            Ok((
                out,
                AppliedTransform::Pointwise {
                    factor: *factor,
                    mean_coef: 0.0,
                    mask,
                },
            ))
        }
        Contrast { factor } => {
            let m = image_mean_luma(img);
            let mut out = img.clone();
            let mut mask = vec![1.0; out.data.len()];
            for (v, msk) in out.data.iter_mut().zip(&mut mask) {
                let raw = factor * *v + (1.0 - factor) * m;
                if !(0.0..=1.0).contains(&raw) {
                    *msk = 0.0;
                }
                *v = raw.clamp(0.0, 1.0);
            }
            Ok((
                out,
                AppliedTransform::Pointwise {
                    factor: *factor,
                    mean_coef: 1.0 - factor,
                    mask,
                },
            ))
        }
        other => Err(Error::Argument(format!(
            "{other:?} is not in the differentiable transform set"
        ))),
    }
}

impl AppliedTransform {
    /// dL/d(input pixels) given dL/d(output pixels).
    pub fn vjp(&self, grad_out: &ImageTensor) -> ImageTensor {
        match self {
            AppliedTransform::Identity => grad_out.clone(),
            AppliedTransform::Warp(w) => w.vjp(grad_out),
            AppliedTransform::Blur { kernel } => {
                blur_pass_t(&blur_pass_t(grad_out, kernel, false), kernel, true)
            }
            AppliedTransform::Pointwise {
                factor,
                mean_coef,
                mask,
            } => {
                let n = (grad_out.height * grad_out.width) as f64;
                let mut grad_in = ImageTensor::zeros(grad_out.height, grad_out.width);
                // direct term through the factor
                for ((gi, go), m) in grad_in.data.iter_mut().zip(&grad_out.data).zip(mask) {
                    *gi = factor * go * m;
                }
                if *mean_coef != 0.0 {
                    // mean-luma coupling: every unclamped output received
                    // mean_coef * m, and m is a luma-weighted pixel average
                    let total: f64 = grad_out
                        .data
                        .iter()
                        .zip(mask)
                        .map(|(g, m)| g * m)
                        .sum();
                    let coefs = [0.299, 0.587, 0.114];
                    for px in grad_in.data.chunks_exact_mut(CHANNELS) {
                        for (c, v) in px.iter_mut().enumerate() {
                            *v += mean_coef * total * coefs[c] / n;
                        }
                    }
                }
                grad_in
            }
        }
    }
}
