//! Pretrained dual-encoder adapter: ViT-L/14 vision transformer plus text
//! transformer, loaded from a safetensors weights file with a tokenizer
//! file. Enabled with the `clip` cargo feature; nothing is downloaded.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{
    text_model::{Activation, ClipTextConfig},
    vision_model::ClipVisionConfig,
    ClipConfig, ClipModel,
};

use super::{Backbone, BackboneDescriptor, FeatureVector};
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;

pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const CONTEXT_LEN: usize = 77;

fn vit_l_14_config() -> ClipConfig {
    ClipConfig {
        text_config: ClipTextConfig {
            vocab_size: 49408,
            embed_dim: 768,
            activation: Activation::QuickGelu,
            intermediate_size: 3072,
            max_position_embeddings: CONTEXT_LEN,
            pad_with: None,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            projection_dim: 768,
        },
        vision_config: ClipVisionConfig {
            embed_dim: 1024,
            activation: Activation::QuickGelu,
            intermediate_size: 4096,
            num_hidden_layers: 24,
            num_attention_heads: 16,
            projection_dim: 768,
            num_channels: 3,
            image_size: 224,
            patch_size: 14,
        },
        logit_scale_init_value: 2.6592,
        image_size: 224,
    }
}

pub struct ClipBackbone {
    desc: BackboneDescriptor,
    model: ClipModel,
    tokenizer: tokenizers::Tokenizer,
    device: Device,
    weights_hash: u64,
}

fn c_err(e: impl std::fmt::Display) -> Error {
    Error::Numeric(format!("clip adapter: {e}"))
}

impl ClipBackbone {
    pub fn load(weights: &Path, tokenizer: &Path) -> Result<Self> {
        let device = Device::Cpu;
        let bytes = std::fs::read(weights).map_err(|e| Error::io(weights, e))?;
        let mut weights_hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in &bytes {
            weights_hash ^= *b as u64;
            weights_hash = weights_hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let vb = VarBuilder::from_buffered_safetensors(bytes, DType::F32, &device)
            .map_err(c_err)?;
        let model = ClipModel::new(vb, &vit_l_14_config()).map_err(c_err)?;
        let tokenizer = tokenizers::Tokenizer::from_file(tokenizer)
            .map_err(|e| Error::Config(format!("tokenizer {}: {e}", tokenizer.display())))?;
        Ok(ClipBackbone {
            desc: BackboneDescriptor {
                name: "vit-l-14".into(),
                image_dim: 768,
                text_dim: 768,
                input_size: 224,
                mean: CLIP_MEAN,
                std: CLIP_STD,
            },
            model,
            tokenizer,
            device,
            weights_hash,
        })
    }

    /// CHW tensor normalized with the CLIP constants, batch of one.
    fn preprocess(&self, img: &ImageTensor) -> Result<Tensor> {
        let (h, w) = (img.height, img.width);
        let mut chw = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    chw[c * h * w + y * w + x] =
                        ((img.get(y, x, c) - CLIP_MEAN[c]) / CLIP_STD[c]) as f32;
                }
            }
        }
        Tensor::from_vec(chw, (1, 3, h, w), &self.device).map_err(c_err)
    }

    fn token_ids(&self, caption: &str) -> Result<Vec<u32>> {
        let encoding = self
            .tokenizer
            .encode(caption, true)
            .map_err(|e| Error::Argument(format!("tokenize: {e}")))?;
        let mut ids = encoding.get_ids().to_vec();
        ids.truncate(CONTEXT_LEN);
        // pad with the end-of-text token (the highest id in CLIP's vocab)
        let eot = *ids.last().unwrap_or(&49407);
        while ids.len() < CONTEXT_LEN {
            ids.push(eot);
        }
        Ok(ids)
    }
}

impl Backbone for ClipBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.desc
    }

    fn encode_image(&self, img: &ImageTensor) -> Result<FeatureVector> {
        super::check_input(&self.desc, img)?;
        let pixels = self.preprocess(img)?;
        let feats = self.model.get_image_features(&pixels).map_err(c_err)?;
        let values: Vec<f32> = feats.flatten_all().map_err(c_err)?.to_vec1().map_err(c_err)?;
        Ok(FeatureVector::new(values.into_iter().map(f64::from).collect()))
    }

    fn encode_text(&self, caption: &str) -> Result<FeatureVector> {
        if caption.trim().is_empty() {
            return Err(Error::Argument("caption must be non-empty".into()));
        }
        let ids = self.token_ids(caption)?;
        let input = Tensor::from_vec(ids, (1, CONTEXT_LEN), &self.device).map_err(c_err)?;
        let feats = self.model.get_text_features(&input).map_err(c_err)?;
        let values: Vec<f32> = feats.flatten_all().map_err(c_err)?.to_vec1().map_err(c_err)?;
        Ok(FeatureVector::new(values.into_iter().map(f64::from).collect()))
    }

    fn image_vjp(&self, img: &ImageTensor, upstream: &[f64]) -> Result<ImageTensor> {
        super::check_input(&self.desc, img)?;
        if upstream.len() != self.desc.image_dim {
            return Err(Error::Dimension(format!(
                "upstream len {} != image_dim {}",
                upstream.len(),
                self.desc.image_dim
            )));
        }
        let pixels = Var::from_tensor(&self.preprocess(img)?).map_err(c_err)?;
        let feats = self
            .model
            .get_image_features(pixels.as_tensor())
            .map_err(c_err)?;
        let up: Vec<f32> = upstream.iter().map(|v| *v as f32).collect();
        let up = Tensor::from_vec(up, (1, self.desc.image_dim), &self.device).map_err(c_err)?;
        let scalar = feats.mul(&up).map_err(c_err)?.sum_all().map_err(c_err)?;
        let grads = scalar.backward().map_err(c_err)?;
        let g = grads
            .get(&pixels)
            .ok_or_else(|| Error::Numeric("clip adapter: no pixel gradient".into()))?;
        let g: Vec<f32> = g.flatten_all().map_err(c_err)?.to_vec1().map_err(c_err)?;
        // back through the normalization to raw [0,1] pixels, HWC layout
        let (h, w) = (img.height, img.width);
        let mut grad = ImageTensor::zeros(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    grad.set(y, x, c, g[c * h * w + y * w + x] as f64 / CLIP_STD[c]);
                }
            }
        }
        Ok(grad)
    }

    fn params_hash(&self) -> u64 {
        self.weights_hash
    }
}
