//! Image representation, quality metrics, and dataset ingestion.
//!
//! Pixels live in `[0,1]` as f64 (gradient-based embedding needs a continuous
//! domain); the canonical working size is 224x224 and loaders resize on
//! ingest with a fixed bilinear filter.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub const WORKING_SIZE: usize = 224;
pub const CHANNELS: usize = 3;

/// H x W x 3 image with pixel values in `[0,1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * CHANNELS, "pixel buffer size");
        ImageTensor {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Clamp all pixels into `[0,1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resample to `height x width` (half-pixel centers). A same-size
    /// resample is an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = ImageTensor::zeros(height, width);
        for y in 0..height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for x in 0..width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                for c in 0..CHANNELS {
                    let v = self.get(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
                        + self.get(y0, x1, c) * (1.0 - fy) * fx
                        + self.get(y1, x0, c) * fy * (1.0 - fx)
                        + self.get(y1, x1, c) * fy * fx;
                    out.set(y, x, c, v);
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(y, x, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(y, x, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf
    }

    pub fn from_rgb8(img: &image::RgbImage) -> ImageTensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for p in img.pixels() {
            data.push(p.0[0] as f64 / 255.0);
            data.push(p.0[1] as f64 / 255.0);
            data.push(p.0[2] as f64 / 255.0);
        }
        ImageTensor::new(h, w, data)
    }

    /// Write as lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            })
    }
}

/// Image plus one caption; Flickr8k-style training unit.
#[derive(Debug, Clone)]
pub struct CaptionedSample {
    pub image: ImageTensor,
    pub caption: String,
    pub sample_id: String,
}

/// Lower bound on the watermark's peak signal-to-noise ratio in dB.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbationBudget {
    pub target_psnr_db: f64,
}

impl Default for PerturbationBudget {
    fn default() -> Self {
        PerturbationBudget {
            target_psnr_db: 40.0,
        }
    }
}

impl PerturbationBudget {
    pub fn new(target_psnr_db: f64) -> Result<Self> {
        if target_psnr_db <= 0.0 || target_psnr_db.is_nan() {
            return Err(Error::Argument(format!(
                "target_psnr_db must be positive, got {target_psnr_db}"
            )));
        }
        Ok(PerturbationBudget { target_psnr_db })
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "mse: shape mismatch {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with MAX = 1.0; `+inf` when the images
/// are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Decode an 8-bit raster (converting to RGB if needed), rescale to `[0,1]`,
/// and bilinear-resize to `size x size`.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::ImageLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(ImageTensor::from_rgb8(&rgb).resize(size, size))
}

/// Result of loading a captioned corpus: samples in file order plus the
/// caption lines that referenced missing images.
#[derive(Debug)]
pub struct CorpusLoad {
    pub samples: Vec<CaptionedSample>,
    pub skipped: Vec<String>,
}

/// Load a Flickr8k token-format corpus: each line `name#idx<TAB>caption`.
/// Captions referencing missing image files are skipped and reported.
pub fn load_captioned_corpus(image_dir: &Path, captions_file: &Path) -> Result<CorpusLoad> {
    let text =
        std::fs::read_to_string(captions_file).map_err(|e| Error::io(captions_file, e))?;
    let mut cache: HashMap<String, Option<ImageTensor>> = HashMap::new();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id_part, caption) = line.split_once('\t').ok_or_else(|| {
            Error::Argument(format!(
                "{}:{}: expected `name#idx<TAB>caption`",
                captions_file.display(),
                lineno + 1
            ))
        })?;
        let name = id_part.rsplit_once('#').map(|(n, _)| n).unwrap_or(id_part);
        let entry = cache.entry(name.to_string()).or_insert_with(|| {
            let p = image_dir.join(name);
            if p.is_file() {
                load_image(&p, WORKING_SIZE).ok()
            } else {
                None
            }
        });
        match entry {
            Some(image) => samples.push(CaptionedSample {
                image: image.clone(),
                caption: caption.trim().to_string(),
                sample_id: id_part.to_string(),
            }),
            None => skipped.push(id_part.to_string()),
        }
    }
    Ok(CorpusLoad { samples, skipped })
}

// ---------------------------------------------------------------------------
// Synthetic corpus: colored geometric shapes with attribute captions, a
// deterministic desk-scale stand-in for Flickr8k.
// ---------------------------------------------------------------------------

// Palette with bounded luma contrast: shape/background pairs whose luma gap
// falls outside [0.08, 0.35] are skipped by the combo enumeration, keeping
// every image inside the band where a luma-pooling backbone is both stable
// and perturbable.
const SHAPES: [&str; 5] = ["circle", "square", "triangle", "ring", "cross"];
const SIZES: [&str; 2] = ["small", "large"];
const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.75, 0.32, 0.28]),
    ("green", [0.28, 0.58, 0.30]),
    ("blue", [0.30, 0.42, 0.78]),
    ("yellow", [0.66, 0.60, 0.22]),
    ("purple", [0.56, 0.34, 0.66]),
    ("orange", [0.78, 0.46, 0.20]),
    ("teal", [0.20, 0.55, 0.54]),
    ("pink", [0.80, 0.48, 0.60]),
];
const BACKGROUNDS: [(&str, [f64; 3]); 8] = [
    ("light", [0.76, 0.76, 0.76]),
    ("dark", [0.25, 0.25, 0.25]),
    ("slate", [0.33, 0.35, 0.38]),
    ("navy", [0.24, 0.27, 0.45]),
    ("olive", [0.36, 0.40, 0.22]),
    ("sky", [0.55, 0.68, 0.82]),
    ("beige", [0.72, 0.68, 0.58]),
    ("maroon", [0.45, 0.24, 0.23]),
];

const MIN_LUMA_GAP: f64 = 0.08;
const MAX_LUMA_GAP: f64 = 0.25;

/// One synthetic image with its five captions and its shape class (the label
/// used by the linear probe).
#[derive(Debug, Clone)]
pub struct SyntheticItem {
    pub image: ImageTensor,
    pub captions: [String; 5],
    pub id: String,
    pub class: usize,
    pub file_name: String,
}

pub const SYNTHETIC_CLASSES: usize = SHAPES.len();

fn smoothstep_coverage(d: f64, aa: f64) -> f64 {
    let t = ((aa - d) / (2.0 * aa)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn shape_sdf(shape: usize, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let dx = px - cx;
    let dy = py - cy;
    match shape {
        // circle
        0 => (dx * dx + dy * dy).sqrt() - r,
        // square
        1 => {
            let h = r * 0.9;
            let qx = dx.abs() - h;
            let qy = dy.abs() - h;
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            outside + qx.max(qy).min(0.0)
        }
        // equilateral triangle, apex up: inside iff every inward half-plane
        // test passes, so the signed distance is minus the minimum inward
        // distance
        2 => {
            let verts: [(f64, f64); 3] = [
                (cx, cy - r),
                (cx + r * 0.866_025_403_784_438_6, cy + r * 0.5),
                (cx - r * 0.866_025_403_784_438_6, cy + r * 0.5),
            ];
            let mut inward = f64::INFINITY;
            for i in 0..3 {
                let (x0, y0) = verts[i];
                let (x1, y1) = verts[(i + 1) % 3];
                let (ex, ey) = (x1 - x0, y1 - y0);
                let len = (ex * ex + ey * ey).sqrt();
                let (nx, ny) = (-ey / len, ex / len);
                inward = inward.min((px - x0) * nx + (py - y0) * ny);
            }
            -inward
        }
        // ring (annulus)
        3 => ((dx * dx + dy * dy).sqrt() - r * 0.8).abs() - r * 0.3,
        // cross: union of two boxes
        4 => {
            let box_sdf = |hx: f64, hy: f64| {
                let qx = dx.abs() - hx;
                let qy = dy.abs() - hy;
                (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt() + qx.max(qy).min(0.0)
            };
            box_sdf(r, r * 0.35).min(box_sdf(r * 0.35, r))
        }
        _ => unreachable!("shape index"),
    }
}

fn render_synthetic(
    shape: usize,
    color: [f64; 3],
    bg: [f64; 3],
    size_px: f64,
    cx: f64,
    cy: f64,
    grad: f64,
) -> ImageTensor {
    let n = WORKING_SIZE;
    let mut img = ImageTensor::zeros(n, n);
    for y in 0..n {
        let shade = 1.0 - grad * (y as f64 / (n - 1) as f64 - 0.5);
        for x in 0..n {
            let d = shape_sdf(shape, x as f64, y as f64, cx, cy, size_px);
            let a = smoothstep_coverage(d, 1.2);
            for c in 0..CHANNELS {
                let b = (bg[c] * shade).clamp(0.0, 1.0);
                img.set(y, x, c, b * (1.0 - a) + color[c] * a);
            }
        }
    }
    img
}

fn caption_templates(size: &str, color: &str, shape: &str, bg: &str) -> [String; 5] {
    [
        format!("a {size} {color} {shape} on a {bg} background"),
        format!("the image shows a {size} {color} {shape} over {bg}"),
        format!("a photo of one {size} {color} {shape} with {bg} behind it"),
        format!("{size} {color} {shape} drawn on a {bg} canvas"),
        format!("this {bg} scene contains a single {size} {color} {shape}"),
    ]
}

/// Deterministic procedurally generated corpus items; same seed gives a
/// byte-identical corpus. Attribute combinations are unique per image so any
/// two images' captions differ in at least one token.
#[allow(clippy::needless_range_loop)]
pub fn generate_synthetic_items(n_images: usize, seed: u64) -> Result<Vec<SyntheticItem>> {
    if n_images < 1 {
        return Err(Error::Argument("n_images must be >= 1".into()));
    }
    let mut combos = Vec::new();
    for ci in 0..COLORS.len() {
        for si in 0..SHAPES.len() {
            for bi in 0..BACKGROUNDS.len() {
                let c = COLORS[ci].1;
                let b = BACKGROUNDS[bi].1;
                let gap = (crate::distortion::luma(c[0], c[1], c[2])
                    - crate::distortion::luma(b[0], b[1], b[2]))
                .abs();
                if !(MIN_LUMA_GAP..=MAX_LUMA_GAP).contains(&gap) {
                    continue;
                }
                for zi in 0..SIZES.len() {
                    combos.push((ci, si, bi, zi));
                }
            }
        }
    }
    if n_images > combos.len() {
        return Err(Error::Argument(format!(
            "n_images={} exceeds the {} distinct attribute combinations",
            n_images,
            combos.len()
        )));
    }
    // seeded Fisher-Yates so small corpora still mix attributes
    let mut shuffle_rng = rng::stream(seed, "synth-combos");
    for i in (1..combos.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        combos.swap(i, j);
    }

    let mut items = Vec::with_capacity(n_images);
    for (idx, &(ci, si, bi, zi)) in combos.iter().take(n_images).enumerate() {
        let mut r = rng::derive(seed, "synth-img", idx as u64, 0);
        let (color_name, color) = COLORS[ci];
        let (bg_name, bg) = BACKGROUNDS[bi];
        let shape_name = SHAPES[si];
        let size_name = SIZES[zi];
        let base = if zi == 0 { 42.0 } else { 74.0 };
        let size_px = base + r.gen_range(-6.0..6.0);
        let cx = WORKING_SIZE as f64 / 2.0 + r.gen_range(-18.0..18.0);
        let cy = WORKING_SIZE as f64 / 2.0 + r.gen_range(-18.0..18.0);
        let grad = r.gen_range(0.0..0.25);
        let image = render_synthetic(si, color, bg, size_px, cx, cy, grad);
        items.push(SyntheticItem {
            image,
            captions: caption_templates(size_name, color_name, shape_name, bg_name),
            id: format!("synth{idx:04}"),
            class: si,
            file_name: format!("synth{idx:04}.png"),
        });
    }
    Ok(items)
}

/// Flatten synthetic items into captioned samples: 5 per image, in order.
pub fn generate_synthetic_corpus(n_images: usize, seed: u64) -> Result<Vec<CaptionedSample>> {
    let items = generate_synthetic_items(n_images, seed)?;
    let mut samples = Vec::with_capacity(items.len() * 5);
    for item in &items {
        for (k, caption) in item.captions.iter().enumerate() {
            samples.push(CaptionedSample {
                image: item.image.clone(),
                caption: caption.clone(),
                sample_id: format!("{}#{k}", item.file_name),
            });
        }
    }
    Ok(samples)
}

/// Export synthetic items as a directory of PNGs plus a Flickr8k token-format
/// captions file (`captions.txt`).
pub fn write_corpus(items: &[SyntheticItem], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut captions = String::new();
    for item in items {
        item.image.save_png(&dir.join(&item.file_name))?;
        for (k, caption) in item.captions.iter().enumerate() {
            let _ = writeln!(captions, "{}#{k}\t{caption}", item.file_name);
        }
    }
    let captions_path = dir.join("captions.txt");
    std::fs::write(&captions_path, captions).map_err(|e| Error::io(&captions_path, e))?;
    Ok(captions_path)
}
