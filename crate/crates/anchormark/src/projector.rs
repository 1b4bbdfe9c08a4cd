//! Trainable projection head: 768 -> 2048 -> 2048 -> 4096 with per-layer
//! LayerNorm, ReLU, dropout (0.1), and a final L2 normalization. Widths are
//! configurable for desk-scale instances; defaults follow the full model.
//!
//! Parameters are stored as f32 (the checkpoint dtype); all math runs in f64.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::FeatureVector;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;

pub const LN_EPSILON: f64 = 1e-5;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGPROJ01";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            input_dim: 768,
            hidden_dim: 2048,
            output_dim: 4096,
            dropout: 0.1,
        }
    }
}

impl ProjectorConfig {
    pub fn toy(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        ProjectorConfig {
            input_dim,
            hidden_dim,
            output_dim,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub config: ProjectorConfig,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w3: Vec<f32>,
    pub b3: Vec<f32>,
}

impl ProjectorParams {
    pub fn param_count(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.ln1_gain.len()
            + self.ln1_bias.len()
            + self.w2.len()
            + self.b2.len()
            + self.ln2_gain.len()
            + self.ln2_bias.len()
            + self.w3.len()
            + self.b3.len()
    }

    /// Layer name/shape/data triples in checkpoint order.
    pub fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[f32])> {
        let c = &self.config;
        vec![
            ("w1", vec![c.hidden_dim, c.input_dim], self.w1.as_slice()),
            ("b1", vec![c.hidden_dim], self.b1.as_slice()),
            ("ln1_gain", vec![c.hidden_dim], self.ln1_gain.as_slice()),
            ("ln1_bias", vec![c.hidden_dim], self.ln1_bias.as_slice()),
            ("w2", vec![c.hidden_dim, c.hidden_dim], self.w2.as_slice()),
            ("b2", vec![c.hidden_dim], self.b2.as_slice()),
            ("ln2_gain", vec![c.hidden_dim], self.ln2_gain.as_slice()),
            ("ln2_bias", vec![c.hidden_dim], self.ln2_bias.as_slice()),
            ("w3", vec![c.output_dim, c.hidden_dim], self.w3.as_slice()),
            ("b3", vec![c.output_dim], self.b3.as_slice()),
        ]
    }
}

/// Fan-in-scaled initialization: weights N(0, 1/fan_in), affine biases
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), normalization gain 1 / bias 0.
/// The nonzero bias draw keeps the all-zero input on a live path.
pub fn init_params_with(config: ProjectorConfig, seed: u64) -> ProjectorParams {
    let mut r = crate::rng::derive(seed, "projector-init", 0, 0);
    let mut affine = |out_dim: usize, in_dim: usize| -> (Vec<f32>, Vec<f32>) {
        let ws = 1.0 / (in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut r);
                (n * ws) as f32
            })
            .collect();
        let b = (0..out_dim).map(|_| (r.gen_range(-ws..ws)) as f32).collect();
        (w, b)
    };
    let (w1, b1) = affine(config.hidden_dim, config.input_dim);
    let (w2, b2) = affine(config.hidden_dim, config.hidden_dim);
    let (w3, b3) = affine(config.output_dim, config.hidden_dim);
    ProjectorParams {
        config,
        w1,
        b1,
        ln1_gain: vec![1.0; config.hidden_dim],
        ln1_bias: vec![0.0; config.hidden_dim],
        w2,
        b2,
        ln2_gain: vec![1.0; config.hidden_dim],
        ln2_bias: vec![0.0; config.hidden_dim],
        w3,
        b3,
    }
}

pub fn init_params(seed: u64) -> ProjectorParams {
    init_params_with(ProjectorConfig::default(), seed)
}

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

struct LnCache {
    xh: Vec<f64>,
    inv_std: f64,
}

fn layer_norm(a: &[f64], gain: &[f32], bias: &[f32]) -> (Vec<f64>, LnCache) {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPSILON).sqrt();
    let xh: Vec<f64> = a.iter().map(|v| (v - mean) * inv_std).collect();
    let out = xh
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(x, (g, b))| x * *g as f64 + *b as f64)
        .collect();
    (out, LnCache { xh, inv_std })
}

fn layer_norm_backward(
    g_out: &[f64],
    cache: &LnCache,
    gain: &[f32],
    grad_gain: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let n = g_out.len() as f64;
    for ((gg, gb), (g, xh)) in grad_gain
        .iter_mut()
        .zip(grad_bias.iter_mut())
        .zip(g_out.iter().zip(&cache.xh))
    {
        *gg += g * xh;
        *gb += g;
    }
    let g_xh: Vec<f64> = g_out
        .iter()
        .zip(gain)
        .map(|(g, w)| g * *w as f64)
        .collect();
    let mean_g = g_xh.iter().sum::<f64>() / n;
    let mean_gx = g_xh
        .iter()
        .zip(&cache.xh)
        .map(|(g, x)| g * x)
        .sum::<f64>()
        / n;
    g_xh.iter()
        .zip(&cache.xh)
        .map(|(g, x)| cache.inv_std * (g - mean_g - x * mean_gx))
        .collect()
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    x: Vec<f64>,
    ln1: LnCache,
    l1: Vec<f64>,
    m1: Vec<f64>,
    d1: Vec<f64>,
    ln2: LnCache,
    l2: Vec<f64>,
    m2: Vec<f64>,
    d2: Vec<f64>,
    out: Vec<f64>,
    a3_norm: f64,
}

fn dropout_mask(len: usize, p: f64, training: bool, rng: &mut Rng) -> Vec<f64> {
    if !training || p == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 - p;
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

/// Forward pass over a raw f64 slice, returning the unit-norm output and the
/// cache needed by [`backward`].
pub fn forward_cached(
    params: &ProjectorParams,
    x: &[f64],
    training: bool,
    rng: &mut Rng,
) -> Result<(Vec<f64>, ForwardCache)> {
    let c = &params.config;
    if x.len() != c.input_dim {
        return Err(Error::Dimension(format!(
            "projector expects input dim {}, got {}",
            c.input_dim,
            x.len()
        )));
    }
    let mut a1 = linalg::matvec_f32(&params.w1, c.hidden_dim, c.input_dim, x);
    for (a, b) in a1.iter_mut().zip(&params.b1) {
        *a += *b as f64;
    }
    let (l1, ln1) = layer_norm(&a1, &params.ln1_gain, &params.ln1_bias);
    let m1 = dropout_mask(c.hidden_dim, c.dropout, training, rng);
    let d1: Vec<f64> = l1
        .iter()
        .zip(&m1)
        .map(|(v, m)| v.max(0.0) * m)
        .collect();

    let mut a2 = linalg::matvec_f32(&params.w2, c.hidden_dim, c.hidden_dim, &d1);
    for (a, b) in a2.iter_mut().zip(&params.b2) {
        *a += *b as f64;
    }
    let (l2, ln2) = layer_norm(&a2, &params.ln2_gain, &params.ln2_bias);
    let m2 = dropout_mask(c.hidden_dim, c.dropout, training, rng);
    let d2: Vec<f64> = l2
        .iter()
        .zip(&m2)
        .map(|(v, m)| v.max(0.0) * m)
        .collect();

    let mut a3 = linalg::matvec_f32(&params.w3, c.output_dim, c.hidden_dim, &d2);
    for (a, b) in a3.iter_mut().zip(&params.b3) {
        *a += *b as f64;
    }
    let a3_norm = linalg::norm(&a3);
    if a3_norm < 1e-12 {
        return Err(Error::Numeric(
            "projector pre-normalization output collapsed to zero".into(),
        ));
    }
    let out: Vec<f64> = a3.iter().map(|v| v / a3_norm).collect();
    Ok((
        out.clone(),
        ForwardCache {
            x: x.to_vec(),
            ln1,
            l1,
            m1,
            d1,
            ln2,
            l2,
            m2,
            d2,
            out,
            a3_norm,
        },
    ))
}

/// Project a batch of inputs; per-row dropout streams derive from `seed`,
/// so a batch of size one equals the same sample inside any batch.
pub fn project_batch(
    params: &ProjectorParams,
    xs: &[Vec<f64>],
    training: bool,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = crate::rng::derive(seed, "project-batch", i as u64, 0);
            let (out, _) = forward_cached(params, x, training, &mut r)?;
            Ok(FeatureVector {
                values: out,
                normalized: true,
            })
        })
        .collect()
}

/// Map a backbone feature to the 4096-dim unit-norm invariant space;
/// dropout is active only in training mode.
pub fn project(
    params: &ProjectorParams,
    x: &FeatureVector,
    training: bool,
    rng: &mut Rng,
) -> Result<FeatureVector> {
    let (out, _) = forward_cached(params, &x.values, training, rng)?;
    Ok(FeatureVector {
        values: out,
        normalized: true,
    })
}

/// Gradient accumulators, f64 to keep long sums exact enough for the
/// finite-difference checks.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(c: &ProjectorConfig) -> Self {
        ParamGrads {
            w1: vec![0.0; c.hidden_dim * c.input_dim],
            b1: vec![0.0; c.hidden_dim],
            ln1_gain: vec![0.0; c.hidden_dim],
            ln1_bias: vec![0.0; c.hidden_dim],
            w2: vec![0.0; c.hidden_dim * c.hidden_dim],
            b2: vec![0.0; c.hidden_dim],
            ln2_gain: vec![0.0; c.hidden_dim],
            ln2_bias: vec![0.0; c.hidden_dim],
            w3: vec![0.0; c.output_dim * c.hidden_dim],
            b3: vec![0.0; c.output_dim],
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in self.views() {
            acc += linalg::dot(v, v);
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.views_mut() {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn views(&self) -> [&[f64]; 10] {
        [
            &self.w1,
            &self.b1,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w3,
            &self.b3,
        ]
    }

    pub fn views_mut(&mut self) -> [&mut [f64]; 10] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

/// Back-propagate `g_out` (dL/d output) through a cached forward pass,
/// accumulating parameter gradients and returning dL/dx.
pub fn backward(
    params: &ProjectorParams,
    cache: &ForwardCache,
    g_out: &[f64],
    grads: &mut ParamGrads,
) -> Vec<f64> {
    backward_impl(params, cache, g_out, Some(grads))
}

/// Input gradient only; skips parameter accumulation (used by the embedding
/// loop, where parameters are frozen).
pub fn backward_input(params: &ProjectorParams, cache: &ForwardCache, g_out: &[f64]) -> Vec<f64> {
    backward_impl(params, cache, g_out, None)
}

fn backward_impl(
    params: &ProjectorParams,
    cache: &ForwardCache,
    g_out: &[f64],
    mut grads: Option<&mut ParamGrads>,
) -> Vec<f64> {
    let c = &params.config;
    // L2 normalization: g_a3 = (g - out (g . out)) / ||a3||
    let g_dot = linalg::dot(g_out, &cache.out);
    let g_a3: Vec<f64> = g_out
        .iter()
        .zip(&cache.out)
        .map(|(g, o)| (g - o * g_dot) / cache.a3_norm)
        .collect();

    if let Some(g) = grads.as_deref_mut() {
        linalg::outer_acc(&mut g.w3, &g_a3, &cache.d2);
        linalg::axpy(&mut g.b3, 1.0, &g_a3);
    }
    let g_d2 = linalg::matvec_f32_t(&params.w3, c.output_dim, c.hidden_dim, &g_a3);

    // dropout + relu on layer 2
    let g_l2: Vec<f64> = g_d2
        .iter()
        .zip(cache.m2.iter().zip(&cache.l2))
        .map(|(g, (m, l))| if *l > 0.0 { g * m } else { 0.0 })
        .collect();
    let mut scratch_gain = Vec::new();
    let mut scratch_bias = Vec::new();
    let g_a2 = match grads.as_deref_mut() {
        Some(g) => layer_norm_backward(
            &g_l2,
            &cache.ln2,
            &params.ln2_gain,
            &mut g.ln2_gain,
            &mut g.ln2_bias,
        ),
        None => {
            scratch_gain.resize(c.hidden_dim, 0.0);
            scratch_bias.resize(c.hidden_dim, 0.0);
            layer_norm_backward(
                &g_l2,
                &cache.ln2,
                &params.ln2_gain,
                &mut scratch_gain,
                &mut scratch_bias,
            )
        }
    };
    if let Some(g) = grads.as_deref_mut() {
        linalg::outer_acc(&mut g.w2, &g_a2, &cache.d1);
        linalg::axpy(&mut g.b2, 1.0, &g_a2);
    }
    let g_d1 = linalg::matvec_f32_t(&params.w2, c.hidden_dim, c.hidden_dim, &g_a2);

    let g_l1: Vec<f64> = g_d1
        .iter()
        .zip(cache.m1.iter().zip(&cache.l1))
        .map(|(g, (m, l))| if *l > 0.0 { g * m } else { 0.0 })
        .collect();
    let g_a1 = match grads.as_deref_mut() {
        Some(g) => layer_norm_backward(
            &g_l1,
            &cache.ln1,
            &params.ln1_gain,
            &mut g.ln1_gain,
            &mut g.ln1_bias,
        ),
        None => {
            scratch_gain.fill(0.0);
            scratch_bias.fill(0.0);
            layer_norm_backward(
                &g_l1,
                &cache.ln1,
                &params.ln1_gain,
                &mut scratch_gain,
                &mut scratch_bias,
            )
        }
    };
    if let Some(g) = grads {
        linalg::outer_acc(&mut g.w1, &g_a1, &cache.x);
        linalg::axpy(&mut g.b1, 1.0, &g_a1);
    }
    linalg::matvec_f32_t(&params.w1, c.hidden_dim, c.input_dim, &g_a1)
}

// ---------------------------------------------------------------------------
// Named-array checkpoint container.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

/// A named-array container: magic, u32 little-endian header length, JSON
/// header listing array names/shapes/dtypes, then raw little-endian f32
/// payloads in header order.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn array(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let header = ContainerHeader {
        version: 1,
        meta: container.meta.clone(),
        arrays: container
            .arrays
            .iter()
            .map(|(name, shape, _)| ArrayHeader {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialize: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    for (name, shape, data) in &container.arrays {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "array {name}: shape {shape:?} disagrees with {} values",
                data.len()
            )));
        }
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated magic", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header length", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: ContainerHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: header parse: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported container version {} (this build reads version 1)",
            path.display(),
            header.version
        )));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for a in header.arrays {
        if a.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "array {}: unsupported dtype {}",
                a.name, a.dtype
            )));
        }
        let count: usize = a.shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        f.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: truncated payload for array {}",
                path.display(),
                a.name
            ))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push((a.name, a.shape, data));
    }
    Ok(Container {
        meta: header.meta,
        arrays,
    })
}

pub fn save_params(params: &ProjectorParams, path: &Path) -> Result<()> {
    save_params_with_meta(params, path, serde_json::Value::Null)
}

pub fn save_params_with_meta(
    params: &ProjectorParams,
    path: &Path,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "format": "projector",
        "config": params.config,
        "extra": extra,
    });
    let arrays = params
        .arrays()
        .into_iter()
        .map(|(name, shape, data)| (name.to_string(), shape, data.to_vec()))
        .collect();
    write_container(path, &Container { meta, arrays })
}

pub fn load_params(path: &Path) -> Result<ProjectorParams> {
    let container = read_container(path)?;
    params_from_container(&container, path)
}

pub fn params_from_container(container: &Container, path: &Path) -> Result<ProjectorParams> {
    let config: ProjectorConfig = serde_json::from_value(
        container
            .meta
            .get("config")
            .cloned()
            .unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| Error::Checkpoint(format!("{}: missing projector config: {e}", path.display())))?;
    let take = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>> {
        let (s, d) = container.array(name).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing array {name}", path.display()))
        })?;
        if s != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: layer {name} has shape {s:?}, expected {shape:?}",
                path.display()
            )));
        }
        Ok(d.to_vec())
    };
    let (h, i, o) = (config.hidden_dim, config.input_dim, config.output_dim);
    Ok(ProjectorParams {
        config,
        w1: take("w1", vec![h, i])?,
        b1: take("b1", vec![h])?,
        ln1_gain: take("ln1_gain", vec![h])?,
        ln1_bias: take("ln1_bias", vec![h])?,
        w2: take("w2", vec![h, h])?,
        b2: take("b2", vec![h])?,
        ln2_gain: take("ln2_gain", vec![h])?,
        ln2_bias: take("ln2_bias", vec![h])?,
        w3: take("w3", vec![o, h])?,
        b3: take("b3", vec![o])?,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy() -> ProjectorParams {
        init_params_with(ProjectorConfig::toy(16, 32, 24), 11)
    }

    fn unit_input(seed: u64, dim: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, "proj-test");
        (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    #[test]
    fn output_unit_norm_both_modes() {
        let p = toy();
        for s in 0..50 {
            let x = FeatureVector::new(unit_input(s, 16));
            let eval = project(&p, &x, false, &mut rng::stream(s, "d")).unwrap();
            let train = project(&p, &x, true, &mut rng::stream(s, "d")).unwrap();
            assert!((linalg::norm(&eval.values) - 1.0).abs() < 1e-5);
            assert!((linalg::norm(&train.values) - 1.0).abs() < 1e-5);
            assert!(eval.normalized);
            assert_eq!(eval.dim(), 24);
        }
    }

    #[test]
    fn zero_input_finite_unit_output() {
        let p = toy();
        let x = FeatureVector::new(vec![0.0; 16]);
        let out = project(&p, &x, false, &mut rng::stream(0, "d")).unwrap();
        assert!(out.values.iter().all(|v| v.is_finite()));
        assert!((linalg::norm(&out.values) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn eval_mode_deterministic() {
        let p = toy();
        let x = FeatureVector::new(unit_input(3, 16));
        let a = project(&p, &x, false, &mut rng::stream(1, "d")).unwrap();
        let b = project(&p, &x, false, &mut rng::stream(2, "d")).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let p = toy();
        let x = FeatureVector::new(vec![0.0; 15]);
        assert!(project(&p, &x, false, &mut rng::stream(0, "d")).is_err());
    }

    #[test]
    fn init_deterministic_bitwise() {
        let a = init_params_with(ProjectorConfig::toy(16, 32, 24), 7);
        let b = init_params_with(ProjectorConfig::toy(16, 32, 24), 7);
        assert_eq!(a, b);
        let c = init_params_with(ProjectorConfig::toy(16, 32, 24), 8);
        assert_ne!(a.w1, c.w1);
    }

    #[test]
    fn default_param_count_closed_form() {
        let p = init_params(1);
        let expected = 768 * 2048 + 2048          // layer 1 affine
            + 2048 * 2048 + 2048                  // layer 2 affine
            + 2048 * 4096 + 4096                  // layer 3 affine
            + 4 * 2048; // two LayerNorms, gain + bias each
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn layer1_preactivation_variance_in_band() {
        // Monte Carlo over 10^3 unit-Gaussian inputs on a mid-size instance.
        let cfg = ProjectorConfig::toy(128, 256, 64);
        let p = init_params_with(cfg, 3);
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let mut count = 0usize;
        for s in 0..1000 {
            let x = unit_input(1000 + s, cfg.input_dim);
            let mut a1 = linalg::matvec_f32(&p.w1, cfg.hidden_dim, cfg.input_dim, &x);
            for (a, b) in a1.iter_mut().zip(&p.b1) {
                *a += *b as f64;
            }
            for v in &a1 {
                acc += v;
                acc2 += v * v;
                count += 1;
            }
        }
        let mean = acc / count as f64;
        let var = acc2 / count as f64 - mean * mean;
        assert!((0.5..=2.0).contains(&var), "pre-activation variance {var}");
    }

    #[test]
    fn save_load_project_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.ckpt");
        let p = toy();
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        let x = FeatureVector::new(unit_input(5, 16));
        let a = project(&p, &x, false, &mut rng::stream(0, "d")).unwrap();
        let b = project(&q, &x, false, &mut rng::stream(0, "d")).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn tampered_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.ckpt");
        save_params(&toy(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[14] ^= 0xff; // inside the JSON header
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_params(&path).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.ckpt");
        save_params(&toy(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.ckpt");
        save_params(&toy(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // rewrite "version":1 -> "version":2 inside the JSON header
        let json_start = 12;
        let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let header = String::from_utf8(bytes[json_start..json_start + header_len].to_vec()).unwrap();
        let tampered = header.replace("\"version\":1", "\"version\":2");
        bytes.splice(json_start..json_start + header_len, tampered.into_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.ckpt");
        save_params(&toy(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proj.ckpt");
        let p = toy();
        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = p
            .arrays()
            .into_iter()
            .map(|(n, s, d)| (n.to_string(), s, d.to_vec()))
            .collect();
        // corrupt w2's declared shape and data consistently
        arrays[4].1 = vec![16, 32];
        arrays[4].2 = vec![0.0; 16 * 32];
        let meta = serde_json::json!({"format": "projector", "config": p.config});
        write_container(&path, &Container { meta, arrays }).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("w2"), "{err}");
    }

    /// Central finite differences for a scalar loss over input and every
    /// parameter (eval mode, toy instance).
    #[test]
    fn gradients_match_finite_differences() {
        let mut p = init_params_with(ProjectorConfig::toy(12, 18, 14), 21);
        let x = unit_input(9, 12);
        // fixed projection direction defines the scalar loss L = c . out
        let c = unit_input(10, 14);
        let loss = |params: &ProjectorParams, x: &[f64]| -> f64 {
            let (out, _) =
                forward_cached(params, x, false, &mut rng::stream(0, "d")).unwrap();
            linalg::dot(&c, &out)
        };
        let (out, cache) = forward_cached(&p, &x, false, &mut rng::stream(0, "d")).unwrap();
        let mut grads = ParamGrads::zeros(&p.config);
        let g_x = backward(&p, &cache, &c, &mut grads);
        let _ = out;

        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };

        // input gradient
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            check(g_x[i], (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h), "x");
        }

        // every parameter tensor, strided to keep runtime sane
        let names = [
            "w1", "b1", "ln1_gain", "ln1_bias", "w2", "b2", "ln2_gain", "ln2_bias", "w3", "b3",
        ];
        for t in 0..10 {
            let len = grads.views()[t].len();
            let stride = (len / 40).max(1);
            for i in (0..len).step_by(stride) {
                let orig = param_slot(&p, t, i);
                set_param_slot(&mut p, t, i, orig + h as f32);
                let hi = param_slot(&p, t, i) as f64;
                let lp = loss(&p, &x);
                set_param_slot(&mut p, t, i, orig - h as f32);
                let lo = param_slot(&p, t, i) as f64;
                let lm = loss(&p, &x);
                set_param_slot(&mut p, t, i, orig);
                let fd = (lp - lm) / (hi - lo);
                check(grads.views()[t][i], fd, &format!("{}[{i}]", names[t]));
            }
        }
    }

    fn param_slot(p: &ProjectorParams, tensor: usize, i: usize) -> f32 {
        let views: [&[f32]; 10] = [
            &p.w1, &p.b1, &p.ln1_gain, &p.ln1_bias, &p.w2, &p.b2, &p.ln2_gain, &p.ln2_bias,
            &p.w3, &p.b3,
        ];
        views[tensor][i]
    }

    fn set_param_slot(p: &mut ProjectorParams, tensor: usize, i: usize, v: f32) {
        let views: [&mut Vec<f32>; 10] = [
            &mut p.w1,
            &mut p.b1,
            &mut p.ln1_gain,
            &mut p.ln1_bias,
            &mut p.w2,
            &mut p.b2,
            &mut p.ln2_gain,
            &mut p.ln2_bias,
            &mut p.w3,
            &mut p.b3,
        ];
        *views[tensor].get_mut(i).unwrap() = v;
    }
}
