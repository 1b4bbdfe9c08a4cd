//! Frozen dual-encoder contract and adapters.
//!
//! Adapters expose image and text encoders plus a pixel-space VJP for the
//! image path (the watermark embedder differentiates through it). Weights
//! are immutable after construction; `params_hash` lets callers assert the
//! frozen contract.

use rand_distr::{Distribution, StandardNormal};

use crate::distortion::luma;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::rng;

#[cfg(feature = "clip")]
pub mod clip;

/// Fixed-dimension real feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector {
            values,
            normalized: false,
        }
    }

    pub fn unit(mut values: Vec<f64>) -> Result<Self> {
        let n = crate::linalg::normalize(&mut values);
        if n == 0.0 {
            return Err(Error::Numeric("cannot normalize zero feature vector".into()));
        }
        Ok(FeatureVector {
            values,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Static description of an adapter: dimensions, input size, and the
/// preprocessing constants pipelines should apply before encoding.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BackboneDescriptor {
    pub name: String,
    pub image_dim: usize,
    pub text_dim: usize,
    pub input_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub trait Backbone: Send + Sync {
    fn descriptor(&self) -> &BackboneDescriptor;

    /// Encode an image at the descriptor's input size. Deterministic for
    /// fixed weights and input.
    fn encode_image(&self, img: &ImageTensor) -> Result<FeatureVector>;

    /// Encode a caption. Errors on the empty string.
    fn encode_text(&self, caption: &str) -> Result<FeatureVector>;

    /// dL/d(pixels) given dL/d(image features): the VJP of `encode_image`.
    fn image_vjp(&self, img: &ImageTensor, upstream: &[f64]) -> Result<ImageTensor>;

    /// Hash of all weights; unchanged across any crate operation.
    fn params_hash(&self) -> u64;
}

pub(crate) fn check_input(desc: &BackboneDescriptor, img: &ImageTensor) -> Result<()> {
    if img.height != desc.input_size || img.width != desc.input_size {
        return Err(Error::Argument(format!(
            "backbone {} expects {0}x{0} input, got {1}x{2}",
            desc.input_size, img.height, img.width
        )));
    }
    Ok(())
}

fn fnv1a_f32(h: &mut u64, values: &[f32]) {
    for v in values {
        for b in v.to_le_bytes() {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

// ---------------------------------------------------------------------------
// Stub adapter: a deterministic, differentiable test double.
// ---------------------------------------------------------------------------

const POOL_GRID: usize = 16;
const TEXT_BUCKETS: usize = 256;
/// Pooled cells plus horizontal and vertical neighbor differences.
const STUB_FEATURES_IN: usize =
    POOL_GRID * POOL_GRID + 2 * POOL_GRID * (POOL_GRID - 1);
/// Weight of the raw pooled cells relative to the differences.
const STUB_SMOOTH_WEIGHT: f64 = 0.15;

/// Image path: fixed-seed random linear map over a 16x16 average-pooled
/// grayscale of the input. The map is composed with fixed linear structure
/// first (mean removal, then neighbor differences alongside an attenuated
/// copy of the pooled values), so features respond to local pooled contrast
/// the way deep features do rather than to overall brightness. Text path:
/// bag of token hashes through a second fixed random map. Both
/// deterministic in the seed; the image path is linear in pixels, so the
/// VJP is exact.
pub struct StubBackbone {
    desc: BackboneDescriptor,
    /// `[dim x STUB_FEATURES_IN]`
    image_map: Vec<f32>,
    /// `[dim x TEXT_BUCKETS]`
    text_map: Vec<f32>,
    seed: u64,
}

impl StubBackbone {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        Self::with_input_size(seed, dim, crate::imageio::WORKING_SIZE)
    }

    pub fn with_input_size(seed: u64, dim: usize, input_size: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Argument(format!("stub dim must be >= 8, got {dim}")));
        }
        let mut r = rng::derive(seed, "stub-image-map", 0, 0);
        let scale = 1.0 / (STUB_FEATURES_IN as f64).sqrt();
        let image_map: Vec<f32> = (0..dim * STUB_FEATURES_IN)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut r);
                (n * scale) as f32
            })
            .collect();
        let mut r = rng::derive(seed, "stub-text-map", 0, 0);
        let tscale = 1.0 / (TEXT_BUCKETS as f64).sqrt();
        let text_map: Vec<f32> = (0..dim * TEXT_BUCKETS)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut r);
                (n * tscale) as f32
            })
            .collect();
        Ok(StubBackbone {
            desc: BackboneDescriptor {
                name: "stub".into(),
                image_dim: dim,
                text_dim: dim,
                input_size,
                mean: [0.0; 3],
                std: [1.0; 3],
            },
            image_map,
            text_map,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Average-pool the luma channel onto the POOL_GRID and remove the grid
    /// mean; linear in pixels.
    fn pool(&self, img: &ImageTensor) -> Vec<f64> {
        let n = POOL_GRID;
        let mut out = vec![0.0; n * n];
        let mut counts = vec![0.0f64; n * n];
        for y in 0..img.height {
            let gy = (y * n) / img.height;
            for x in 0..img.width {
                let gx = (x * n) / img.width;
                let v = luma(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
                out[gy * n + gx] += v;
                counts[gy * n + gx] += 1.0;
            }
        }
        for (o, c) in out.iter_mut().zip(&counts) {
            if *c > 0.0 {
                *o /= c;
            }
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        for o in &mut out {
            *o -= mean;
        }
        out
    }

    /// Centered pooled cells (attenuated) plus horizontal and vertical
    /// neighbor differences; linear in the pooled vector.
    fn contrast_expand(pooled: &[f64]) -> Vec<f64> {
        let n = POOL_GRID;
        let mut u = Vec::with_capacity(STUB_FEATURES_IN);
        u.extend(pooled.iter().map(|v| v * STUB_SMOOTH_WEIGHT));
        for r in 0..n {
            for c in 0..n - 1 {
                u.push(pooled[r * n + c + 1] - pooled[r * n + c]);
            }
        }
        for r in 0..n - 1 {
            for c in 0..n {
                u.push(pooled[(r + 1) * n + c] - pooled[r * n + c]);
            }
        }
        u
    }

    /// Transpose of [`Self::contrast_expand`].
    fn contrast_expand_t(g_u: &[f64]) -> Vec<f64> {
        let n = POOL_GRID;
        let mut g_p = vec![0.0; n * n];
        for (gp, gu) in g_p.iter_mut().zip(g_u) {
            *gp = gu * STUB_SMOOTH_WEIGHT;
        }
        let mut idx = n * n;
        for r in 0..n {
            for c in 0..n - 1 {
                let g = g_u[idx];
                g_p[r * n + c + 1] += g;
                g_p[r * n + c] -= g;
                idx += 1;
            }
        }
        for r in 0..n - 1 {
            for c in 0..n {
                let g = g_u[idx];
                g_p[(r + 1) * n + c] += g;
                g_p[r * n + c] -= g;
                idx += 1;
            }
        }
        g_p
    }

    fn token_counts(caption: &str) -> Vec<f64> {
        let mut counts = vec![0.0; TEXT_BUCKETS];
        for token in caption
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in token.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            counts[(h % TEXT_BUCKETS as u64) as usize] += 1.0;
        }
        counts
    }
}

impl Backbone for StubBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.desc
    }

    fn encode_image(&self, img: &ImageTensor) -> Result<FeatureVector> {
        check_input(&self.desc, img)?;
        let u = Self::contrast_expand(&self.pool(img));
        let values =
            crate::linalg::matvec_f32(&self.image_map, self.desc.image_dim, STUB_FEATURES_IN, &u);
        Ok(FeatureVector::new(values))
    }

    fn encode_text(&self, caption: &str) -> Result<FeatureVector> {
        if caption.trim().is_empty() {
            return Err(Error::Argument("caption must be non-empty".into()));
        }
        let counts = Self::token_counts(caption);
        let values = crate::linalg::matvec_f32(
            &self.text_map,
            self.desc.text_dim,
            TEXT_BUCKETS,
            &counts,
        );
        Ok(FeatureVector::new(values))
    }

    fn image_vjp(&self, img: &ImageTensor, upstream: &[f64]) -> Result<ImageTensor> {
        check_input(&self.desc, img)?;
        if upstream.len() != self.desc.image_dim {
            return Err(Error::Dimension(format!(
                "upstream len {} != image_dim {}",
                upstream.len(),
                self.desc.image_dim
            )));
        }
        // back through the linear map...
        let g_u = crate::linalg::matvec_f32_t(
            &self.image_map,
            self.desc.image_dim,
            STUB_FEATURES_IN,
            upstream,
        );
        // ...through the contrast expansion and the mean removal...
        let mut grad_pool = Self::contrast_expand_t(&g_u);
        let gmean = grad_pool.iter().sum::<f64>() / grad_pool.len() as f64;
        for g in &mut grad_pool {
            *g -= gmean;
        }
        // ...then through pooling and luma
        let n = POOL_GRID;
        let mut counts = vec![0.0f64; n * n];
        for y in 0..img.height {
            let gy = (y * n) / img.height;
            for x in 0..img.width {
                counts[gy * n + (x * n) / img.width] += 1.0;
            }
        }
        let coefs = [0.299, 0.587, 0.114];
        let mut grad = ImageTensor::zeros(img.height, img.width);
        for y in 0..img.height {
            let gy = (y * n) / img.height;
            for x in 0..img.width {
                let gx = (x * n) / img.width;
                let cell = gy * n + gx;
                let g = grad_pool[cell] / counts[cell];
                for (c, coef) in coefs.iter().enumerate() {
                    grad.set(y, x, c, g * coef);
                }
            }
        }
        Ok(grad)
    }

    fn params_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        fnv1a_f32(&mut h, &self.image_map);
        fnv1a_f32(&mut h, &self.text_map);
        h
    }
}

/// Construct a stub with defaults matching the real adapter's dimensions.
pub fn stub_backbone(seed: u64, dim: usize) -> Result<StubBackbone> {
    StubBackbone::new(seed, dim)
}

// ---------------------------------------------------------------------------
// Registry.
// ---------------------------------------------------------------------------

/// Options consumed by adapter constructors.
#[derive(Debug, Clone, Default)]
pub struct BackboneOpts {
    pub seed: u64,
    pub dim: Option<usize>,
    /// Weights file for pretrained adapters (safetensors).
    pub weights: Option<std::path::PathBuf>,
    /// Tokenizer file for pretrained adapters.
    pub tokenizer: Option<std::path::PathBuf>,
}

pub const REGISTERED: &[&str] = &["stub", "vit-l-14"];

/// Create an adapter by registry name.
pub fn create(name: &str, opts: &BackboneOpts) -> Result<Box<dyn Backbone>> {
    match name {
        "stub" => Ok(Box::new(StubBackbone::new(
            opts.seed,
            opts.dim.unwrap_or(768),
        )?)),
        "vit-l-14" => {
            #[cfg(feature = "clip")]
            {
                Ok(Box::new(clip::ClipBackbone::load(
                    opts.weights.as_deref().ok_or_else(|| {
                        Error::Config(
                            "vit-l-14 requires --backbone-weights (safetensors file)".into(),
                        )
                    })?,
                    opts.tokenizer.as_deref().ok_or_else(|| {
                        Error::Config("vit-l-14 requires --backbone-tokenizer".into())
                    })?,
                )?))
            }
            #[cfg(not(feature = "clip"))]
            {
                Err(Error::Config(
                    "adapter \"vit-l-14\" requires building with `--features clip`".into(),
                ))
            }
        }
        other => Err(Error::Registry(other.to_string(), REGISTERED.join(", "))),
    }
}
