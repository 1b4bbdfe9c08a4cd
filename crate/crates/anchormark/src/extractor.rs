//! Feature extraction functions phi: pixels -> unit-norm feature vector.
//!
//! Two routes: raw backbone features (L2-normalized) or the trained
//! projector over the backbone. Both expose a pixel-space gradient hook so
//! the embedding loop can differentiate a scalar loss of phi.

use std::sync::Arc;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::linalg;
use crate::projector::{self, ProjectorParams};
use crate::rng;

/// Scalar loss of phi returning `(value, dL/dphi)`.
pub type LossFn<'a> = dyn FnMut(&[f64]) -> (f64, Vec<f64>) + 'a;

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn input_size(&self) -> usize;

    /// Unit-norm phi(img).
    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>>;

    /// Compute phi(img), call `loss` on it to obtain `(value, dL/dphi)`,
    /// then back-propagate to pixels. Returns `(value, dL/dimg)`.
    fn grad(
        &self,
        img: &ImageTensor,
        loss: &mut LossFn,
    ) -> Result<(f64, ImageTensor)>;
}

/// L2-normalized raw backbone image features.
pub struct RawExtractor {
    backbone: Arc<dyn Backbone>,
    name: String,
}

impl RawExtractor {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        let name = format!("{}-raw", backbone.descriptor().name);
        RawExtractor { backbone, name }
    }
}

impl FeatureExtractor for RawExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.backbone.descriptor().image_dim
    }

    fn input_size(&self) -> usize {
        self.backbone.descriptor().input_size
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let mut f = self.backbone.encode_image(img)?.values;
        let n = linalg::normalize(&mut f);
        if n == 0.0 {
            return Err(Error::Numeric(
                "backbone produced a zero feature vector".into(),
            ));
        }
        Ok(f)
    }

    fn grad(
        &self,
        img: &ImageTensor,
        loss: &mut LossFn,
    ) -> Result<(f64, ImageTensor)> {
        let raw = self.backbone.encode_image(img)?.values;
        let n = linalg::norm(&raw);
        if n == 0.0 {
            return Err(Error::Numeric(
                "backbone produced a zero feature vector".into(),
            ));
        }
        let phi: Vec<f64> = raw.iter().map(|v| v / n).collect();
        let (value, upstream) = loss(&phi);
        // back through normalization
        let dot = linalg::dot(&upstream, &phi);
        let g_raw: Vec<f64> = upstream
            .iter()
            .zip(&phi)
            .map(|(u, p)| (u - p * dot) / n)
            .collect();
        let grad = self.backbone.image_vjp(img, &g_raw)?;
        Ok((value, grad))
    }
}

/// Projector over the backbone: phi = project(encode_image(img)), eval mode.
pub struct ProjectedExtractor {
    backbone: Arc<dyn Backbone>,
    params: ProjectorParams,
    name: String,
}

impl ProjectedExtractor {
    pub fn new(backbone: Arc<dyn Backbone>, params: ProjectorParams) -> Result<Self> {
        let image_dim = backbone.descriptor().image_dim;
        if params.config.input_dim != image_dim {
            return Err(Error::Dimension(format!(
                "projector expects input dim {}, backbone {} produces {}",
                params.config.input_dim,
                backbone.descriptor().name,
                image_dim
            )));
        }
        let name = format!("{}-projected", backbone.descriptor().name);
        Ok(ProjectedExtractor {
            backbone,
            params,
            name,
        })
    }

    pub fn params(&self) -> &ProjectorParams {
        &self.params
    }
}

impl FeatureExtractor for ProjectedExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.params.config.output_dim
    }

    fn input_size(&self) -> usize {
        self.backbone.descriptor().input_size
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let feat = self.backbone.encode_image(img)?.values;
        let (out, _) = projector::forward_cached(
            &self.params,
            &feat,
            false,
            &mut rng::stream(0, "extractor-eval"),
        )?;
        Ok(out)
    }

    fn grad(
        &self,
        img: &ImageTensor,
        loss: &mut LossFn,
    ) -> Result<(f64, ImageTensor)> {
        let feat = self.backbone.encode_image(img)?.values;
        let (phi, cache) = projector::forward_cached(
            &self.params,
            &feat,
            false,
            &mut rng::stream(0, "extractor-eval"),
        )?;
        let (value, upstream) = loss(&phi);
        let g_feat = projector::backward_input(&self.params, &cache, &upstream);
        let grad = self.backbone.image_vjp(img, &g_feat)?;
        Ok((value, grad))
    }
}
