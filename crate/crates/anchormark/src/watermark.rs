//! Multi-bit watermark codec in the invariant feature space: key
//! generation, hinge message loss, pixel-space gradient embedding under a
//! PSNR budget, sign extraction, and bit accuracy.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distortion::{self, DistortionSpec};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::imageio::{self, ImageTensor, PerturbationBudget};
use crate::rng::Rng;

pub const KEY_MAGIC: &[u8; 8] = b"TGWMKEY1";

/// k orthonormal key vectors in the d-dimensional feature space; stored as
/// f32 (the key-file dtype).
#[derive(Debug, Clone, PartialEq)]
pub struct SecretKey {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    /// Row-major k x d.
    rows: Vec<f32>,
}

impl SecretKey {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn raw(&self) -> &[f32] {
        &self.rows
    }

    /// phi . a_i in f64.
    pub fn dot(&self, i: usize, phi: &[f64]) -> f64 {
        self.row(i)
            .iter()
            .zip(phi)
            .map(|(a, p)| *a as f64 * p)
            .sum()
    }
}

/// Draw k i.i.d. standard-normal rows and Gram-Schmidt orthonormalize;
/// deterministic in the seed.
pub fn generate_key(seed: u64, k: usize, d: usize) -> Result<SecretKey> {
    if k < 1 || k > d {
        return Err(Error::Argument(format!(
            "key needs 1 <= k <= d, got k={k}, d={d}"
        )));
    }
    let mut r = crate::rng::derive(seed, "watermark-key", 0, 0);
    let mut rows: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    for i in 0..k {
        for j in 0..i {
            let proj = crate::linalg::dot(&rows[i], &rows[j]);
            let prev = rows[j].clone();
            crate::linalg::axpy(&mut rows[i], -proj, &prev);
        }
        let n = crate::linalg::normalize(&mut rows[i]);
        if n < 1e-8 {
            return Err(Error::Numeric(
                "key rows degenerate during orthonormalization".into(),
            ));
        }
    }
    let flat: Vec<f32> = rows.into_iter().flatten().map(|v| v as f32).collect();
    Ok(SecretKey {
        k,
        d,
        seed,
        rows: flat,
    })
}

/// k message bits with +-1 modulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkMessage {
    bits: Vec<u8>,
}

impl WatermarkMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::Argument("message bits must be 0 or 1".into()));
        }
        Ok(WatermarkMessage { bits })
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits: Result<Vec<u8>> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Argument(format!(
                    "message must be a bitstring, found {other:?}"
                ))),
            })
            .collect();
        let bits = bits?;
        if bits.is_empty() {
            return Err(Error::Argument("message must be non-empty".into()));
        }
        Ok(WatermarkMessage { bits })
    }

    pub fn random(k: usize, rng: &mut Rng) -> Self {
        WatermarkMessage {
            bits: (0..k).map(|_| rng.gen_range(0..=1u8)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// b_i = 2 bit_i - 1.
    pub fn modulated(&self, i: usize) -> f64 {
        2.0 * self.bits[i] as f64 - 1.0
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }
}

impl std::fmt::Display for WatermarkMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

fn check_key_msg(key: &SecretKey, msg: &WatermarkMessage, phi_dim: usize) -> Result<()> {
    if key.d != phi_dim {
        return Err(Error::Dimension(format!(
            "key dimension d={} does not match feature dimension {}",
            key.d, phi_dim
        )));
    }
    if msg.len() != key.k {
        return Err(Error::Dimension(format!(
            "message has {} bits, key carries k={}",
            msg.len(),
            key.k
        )));
    }
    Ok(())
}

/// Hinge message loss: mean over bits of max(0, mu - (phi . a_i) b_i).
pub fn message_loss(
    phi: &[f64],
    key: &SecretKey,
    msg: &WatermarkMessage,
    mu: f64,
) -> Result<f64> {
    check_key_msg(key, msg, phi.len())?;
    let mut acc = 0.0;
    for i in 0..key.k {
        acc += (mu - key.dot(i, phi) * msg.modulated(i)).max(0.0);
    }
    Ok(acc / key.k as f64)
}

/// Loss plus dL/dphi: active hinges contribute -(1/k) b_i a_i.
pub fn message_loss_grad(
    phi: &[f64],
    key: &SecretKey,
    msg: &WatermarkMessage,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    check_key_msg(key, msg, phi.len())?;
    let mut acc = 0.0;
    let mut grad = vec![0.0; phi.len()];
    let kf = key.k as f64;
    for i in 0..key.k {
        let b = msg.modulated(i);
        let margin = mu - key.dot(i, phi) * b;
        if margin > 0.0 {
            acc += margin;
            let w = -b / kf;
            for (g, a) in grad.iter_mut().zip(key.row(i)) {
                *g += w * *a as f64;
            }
        }
    }
    Ok((acc / kf, grad))
}

fn default_lambda_w() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    0.1
}
fn default_iterations() -> usize {
    100
}
fn default_step() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    #[serde(default = "default_lambda_w")]
    pub lambda_w: f64,
    #[serde(default = "default_mu")]
    pub mu_margin: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default)]
    pub budget: PerturbationBudget,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            lambda_w: default_lambda_w(),
            mu_margin: default_mu(),
            iterations: default_iterations(),
            step_size: default_step(),
            budget: PerturbationBudget::default(),
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Argument("iterations must be >= 1".into()));
        }
        if self.mu_margin <= 0.0 || self.mu_margin.is_nan() {
            return Err(Error::Argument("mu_margin must be > 0".into()));
        }
        if self.step_size <= 0.0 || self.step_size.is_nan() {
            return Err(Error::Argument("step_size must be > 0".into()));
        }
        if self.budget.target_psnr_db <= 0.0 || self.budget.target_psnr_db.is_nan() {
            return Err(Error::Argument("target PSNR must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbedReport {
    /// Set when the objective was not reduced over the run; the best-seen
    /// image is still returned.
    pub warning: bool,
    pub psnr_db: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations_run: usize,
}

/// Rescale `img - original` so psnr(img, original) >= target, then clamp.
/// Clamping never lowers PSNR, so the floor holds exactly on return.
fn project_psnr(img: &mut ImageTensor, original: &ImageTensor, target_db: f64) {
    let m = imageio::mse(img, original).expect("same shape");
    if m > 0.0 {
        let cur = 10.0 * (1.0 / m).log10();
        if cur < target_db {
            let scale = 10f64.powf((cur - target_db) / 20.0);
            for (v, o) in img.data.iter_mut().zip(&original.data) {
                *v = o + (*v - o) * scale;
            }
        }
    }
    img.clamp_unit();
}

/// Embed a message by iterative stochastic gradient descent on pixels: each
/// iteration samples a differentiable transform t, descends
/// lambda * L_w(phi(t(I_w))) + MSE(I_w, I_o) with adaptive-moment steps,
/// projects onto the PSNR budget, and clamps. Returns the best iterate under
/// the identity-transform objective.
pub fn embed(
    original: &ImageTensor,
    key: &SecretKey,
    msg: &WatermarkMessage,
    extractor: &dyn FeatureExtractor,
    transforms: &[DistortionSpec],
    cfg: &EmbedConfig,
    rng: &mut Rng,
) -> Result<(ImageTensor, EmbedReport)> {
    cfg.validate()?;
    check_key_msg(key, msg, extractor.dim())?;
    if transforms.is_empty() {
        return Err(Error::Argument("embed needs at least one transform".into()));
    }

    let objective = |img: &ImageTensor| -> Result<f64> {
        let phi = extractor.features(img)?;
        let lw = message_loss(&phi, key, msg, cfg.mu_margin)?;
        Ok(cfg.lambda_w * lw + imageio::mse(img, original)?)
    };

    let initial_objective = objective(original)?;
    if initial_objective == 0.0 {
        // every hinge already satisfied: the original is its own mark
        return Ok((
            original.clone(),
            EmbedReport {
                warning: false,
                psnr_db: f64::INFINITY,
                initial_objective,
                final_objective: 0.0,
                iterations_run: 0,
            },
        ));
    }

    let n = original.data.len();
    let mut img = original.clone();
    let mut best = img.clone();
    let mut best_obj = initial_objective;
    let mut m1 = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);

    for iter in 0..cfg.iterations {
        let spec = &transforms[rng.gen_range(0..transforms.len())];
        let (transformed, applied) = distortion::apply_differentiable(spec, &img, rng)?;
        let mut loss_fn = |phi: &[f64]| -> (f64, Vec<f64>) {
            match message_loss_grad(phi, key, msg, cfg.mu_margin) {
                Ok((l, g)) => (l, g),
                Err(_) => (f64::NAN, vec![0.0; phi.len()]),
            }
        };
        let (loss_w, grad_t) = extractor.grad(&transformed, &mut loss_fn)?;
        if !loss_w.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite watermark loss at embed iteration {iter}"
            )));
        }
        let grad_wm = applied.vjp(&grad_t);

        let mut all_finite = true;
        for i in 0..n {
            let g = cfg.lambda_w * grad_wm.data[i]
                + 2.0 * (img.data[i] - original.data[i]) / n as f64;
            if !g.is_finite() {
                all_finite = false;
                break;
            }
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
            let t = (iter + 1) as i32;
            let mh = m1[i] / (1.0 - beta1.powi(t));
            let vh = m2[i] / (1.0 - beta2.powi(t));
            img.data[i] -= cfg.step_size * mh / (vh.sqrt() + eps);
        }
        if !all_finite {
            return Err(Error::Numeric(format!(
                "non-finite pixel gradient at embed iteration {iter}"
            )));
        }

        project_psnr(&mut img, original, cfg.budget.target_psnr_db);

        let obj = objective(&img)?;
        if !obj.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective at embed iteration {iter}"
            )));
        }
        if obj < best_obj {
            best_obj = obj;
            best.data.copy_from_slice(&img.data);
        }
    }

    let psnr_db = imageio::psnr(&best, original)?;
    Ok((
        best,
        EmbedReport {
            warning: best_obj >= initial_objective,
            psnr_db,
            initial_objective,
            final_objective: best_obj,
            iterations_run: cfg.iterations,
        },
    ))
}

/// Snap a marked image onto the 8-bit pixel lattice while holding the PSNR
/// budget. Rounding correlates with the perturbation and can cost more than
/// a decibel, so the perturbation is shrunk until the *quantized* image
/// meets the target.
pub fn quantize_to_budget(
    marked: &ImageTensor,
    original: &ImageTensor,
    budget: &PerturbationBudget,
) -> Result<ImageTensor> {
    let target_mse = 10f64.powf(-budget.target_psnr_db / 10.0);
    let quantize = |scale: f64| -> ImageTensor {
        let data = original
            .data
            .iter()
            .zip(&marked.data)
            .map(|(o, m)| {
                let v = o + (m - o) * scale;
                (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
            })
            .collect();
        ImageTensor::new(marked.height, marked.width, data)
    };
    let mut scale = 1.0;
    for _ in 0..60 {
        let candidate = quantize(scale);
        if imageio::mse(&candidate, original)? <= target_mse {
            return Ok(candidate);
        }
        scale *= 0.97;
    }
    Ok(quantize(0.0))
}

/// Sign decoding: bit_i = 1 iff phi(I) . a_i > 0 (a zero dot decodes as 0).
pub fn extract(
    img: &ImageTensor,
    key: &SecretKey,
    extractor: &dyn FeatureExtractor,
) -> Result<WatermarkMessage> {
    if key.d != extractor.dim() {
        return Err(Error::Dimension(format!(
            "key dimension d={} does not match extractor dimension {}",
            key.d,
            extractor.dim()
        )));
    }
    let phi = extractor.features(img)?;
    let bits = (0..key.k)
        .map(|i| if key.dot(i, &phi) > 0.0 { 1u8 } else { 0u8 })
        .collect();
    Ok(WatermarkMessage { bits })
}

/// Fraction of matching bits.
pub fn bit_accuracy(truth: &WatermarkMessage, decoded: &WatermarkMessage) -> Result<f64> {
    if truth.len() != decoded.len() {
        return Err(Error::Argument(format!(
            "bit_accuracy length mismatch: {} vs {}",
            truth.len(),
            decoded.len()
        )));
    }
    let matches = truth
        .bits
        .iter()
        .zip(&decoded.bits)
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / truth.len() as f64)
}

// ---------------------------------------------------------------------------
// Key file: magic, u32 LE header length, JSON {k, d, seed}, then k*d f32 LE
// row-major payload.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct KeyHeader {
    k: usize,
    d: usize,
    seed: u64,
}

pub fn save_key(key: &SecretKey, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&KeyHeader {
        k: key.k,
        d: key.d,
        seed: key.seed,
    })
    .map_err(|e| Error::KeyFile(format!("header serialize: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(KEY_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(key.rows.len() * 4);
    for v in &key.rows {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_key(path: &Path) -> Result<SecretKey> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::KeyFile(format!("{}: truncated magic", path.display())))?;
    if &magic != KEY_MAGIC {
        return Err(Error::KeyFile(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::KeyFile(format!("{}: truncated header length", path.display())))?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::KeyFile(format!("{}: truncated header", path.display())))?;
    let header: KeyHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::KeyFile(format!("{}: header parse: {e}", path.display())))?;
    if header.k < 1 || header.k > header.d {
        return Err(Error::KeyFile(format!(
            "{}: invalid k={} d={}",
            path.display(),
            header.k,
            header.d
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != header.k * header.d * 4 {
        return Err(Error::KeyFile(format!(
            "{}: payload holds {} bytes, header k*d={} needs {}",
            path.display(),
            payload.len(),
            header.k * header.d,
            header.k * header.d * 4
        )));
    }
    let rows: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(SecretKey {
        k: header.k,
        d: header.d,
        seed: header.seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Test double: a fixed phi independent of the image.
    struct FixedExtractor(Vec<f64>);

    impl FeatureExtractor for FixedExtractor {
        fn name(&self) -> &str {
            "fixed"
        }
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn input_size(&self) -> usize {
            8
        }
        fn features(&self, _img: &ImageTensor) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn grad(
            &self,
            _img: &ImageTensor,
            loss: &mut crate::extractor::LossFn,
        ) -> Result<(f64, ImageTensor)> {
            let (v, _) = loss(&self.0);
            Ok((v, ImageTensor::zeros(8, 8)))
        }
    }

    #[test]
    fn key_deterministic_and_orthonormal() {
        let a = generate_key(5, 10, 4096).unwrap();
        let b = generate_key(5, 10, 4096).unwrap();
        assert_eq!(a, b);
        for i in 0..a.k {
            for j in 0..a.k {
                let dot: f64 = a
                    .row(i)
                    .iter()
                    .zip(a.row(j))
                    .map(|(x, y)| *x as f64 * *y as f64)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).abs() < 1e-6,
                    "gram[{i}][{j}] = {dot}"
                );
            }
        }
    }

    #[test]
    fn key_full_rank_orthonormal_basis() {
        let key = generate_key(1, 2, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let dot: f64 = key
                    .row(i)
                    .iter()
                    .zip(key.row(j))
                    .map(|(x, y)| *x as f64 * *y as f64)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn key_k_greater_than_d_rejected() {
        assert!(generate_key(0, 5, 4).is_err());
    }

    #[test]
    fn message_loss_hand_cases() {
        // k=2, d=2, identity-like key
        let key = generate_key(3, 2, 2).unwrap();
        let msg = WatermarkMessage::new(vec![1, 1]).unwrap();
        // build phi with dots (0.05, -0.3) against the modulated message
        let a0 = key.row(0).iter().map(|v| *v as f64).collect::<Vec<_>>();
        let a1 = key.row(1).iter().map(|v| *v as f64).collect::<Vec<_>>();
        let mut phi = vec![0.0; 2];
        crate::linalg::axpy(&mut phi, 0.05, &a0);
        crate::linalg::axpy(&mut phi, -0.3, &a1);
        let l = message_loss(&phi, &key, &msg, 0.1).unwrap();
        assert!((l - 0.225).abs() < 1e-6, "{l}");

        // all hinges satisfied -> 0
        let mut phi = vec![0.0; 2];
        crate::linalg::axpy(&mut phi, 0.5, &a0);
        crate::linalg::axpy(&mut phi, 0.4, &a1);
        assert_eq!(message_loss(&phi, &key, &msg, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn message_loss_monotone_in_dots() {
        let key = generate_key(7, 1, 4).unwrap();
        let msg = WatermarkMessage::new(vec![1]).unwrap();
        let a0: Vec<f64> = key.row(0).iter().map(|v| *v as f64).collect();
        let mut last = f64::INFINITY;
        for s in 0..20 {
            let scale = -1.0 + s as f64 * 0.1;
            let phi: Vec<f64> = a0.iter().map(|v| v * scale).collect();
            let l = message_loss(&phi, &key, &msg, 0.1).unwrap();
            assert!(l <= last, "loss increased as the dot grew");
            last = l;
        }
    }

    #[test]
    fn message_loss_grad_matches_fd() {
        let key = generate_key(11, 6, 16).unwrap();
        let mut r = rng::stream(2, "wm");
        let msg = WatermarkMessage::random(6, &mut r);
        let phi: Vec<f64> = (0..16).map(|_| r.gen_range(-0.3..0.3)).collect();
        let (_, grad) = message_loss_grad(&phi, &key, &msg, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut p = phi.clone();
            p[i] += h;
            let lp = message_loss(&p, &key, &msg, 0.1).unwrap();
            p[i] -= 2.0 * h;
            let lm = message_loss(&p, &key, &msg, 0.1).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            assert!((grad[i] - fd).abs() / denom < 1e-3, "{}: {} vs {fd}", i, grad[i]);
        }
    }

    #[test]
    fn extract_sign_rule() {
        let key = generate_key(13, 1, 8).unwrap();
        let a0: Vec<f64> = key.row(0).iter().map(|v| *v as f64).collect();
        let img = ImageTensor::zeros(8, 8);
        let plus = FixedExtractor(a0.clone());
        assert_eq!(extract(&img, &key, &plus).unwrap().bits(), &[1]);
        let minus = FixedExtractor(a0.iter().map(|v| -v).collect());
        assert_eq!(extract(&img, &key, &minus).unwrap().bits(), &[0]);
    }

    #[test]
    fn extract_matches_brute_force_oracle() {
        let key = generate_key(17, 10, 32).unwrap();
        let img = ImageTensor::zeros(8, 8);
        let mut r = rng::stream(3, "wm-oracle");
        for _ in 0..100 {
            let phi: Vec<f64> = (0..32).map(|_| r.gen_range(-1.0..1.0)).collect();
            let decoded = extract(&img, &key, &FixedExtractor(phi.clone())).unwrap();
            // independent dot-product oracle
            for i in 0..10 {
                let dot: f64 = key
                    .row(i)
                    .iter()
                    .zip(&phi)
                    .map(|(a, p)| *a as f64 * p)
                    .sum();
                let expect = if dot > 0.0 { 1 } else { 0 };
                assert_eq!(decoded.bits()[i], expect);
            }
        }
    }

    #[test]
    fn message_loss_zero_implies_exact_extraction() {
        let key = generate_key(19, 8, 24).unwrap();
        let mut r = rng::stream(4, "wm");
        let img = ImageTensor::zeros(8, 8);
        for _ in 0..20 {
            let msg = WatermarkMessage::random(8, &mut r);
            let mut phi = vec![0.0; 24];
            for i in 0..8 {
                let a: Vec<f64> = key.row(i).iter().map(|v| *v as f64).collect();
                crate::linalg::axpy(&mut phi, 0.2 * msg.modulated(i), &a);
            }
            assert_eq!(message_loss(&phi, &key, &msg, 0.1).unwrap(), 0.0);
            let decoded = extract(&img, &key, &FixedExtractor(phi)).unwrap();
            assert_eq!(bit_accuracy(&msg, &decoded).unwrap(), 1.0);
        }
    }

    #[test]
    fn bit_accuracy_cases() {
        let a = WatermarkMessage::from_bitstring("1011001010").unwrap();
        let b = WatermarkMessage::from_bitstring("0100110101").unwrap();
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&a, &b).unwrap(), 0.0);
        let c = WatermarkMessage::from_bitstring("1011001101").unwrap();
        assert!((bit_accuracy(&a, &c).unwrap() - 0.7).abs() < 1e-12);
        let short = WatermarkMessage::from_bitstring("101").unwrap();
        assert!(bit_accuracy(&a, &short).is_err());
    }

    #[test]
    fn bitstring_round_trip_and_validation() {
        let m = WatermarkMessage::from_bitstring("1011001010").unwrap();
        assert_eq!(m.to_bitstring(), "1011001010");
        assert!(WatermarkMessage::from_bitstring("10x1").is_err());
        assert!(WatermarkMessage::from_bitstring("").is_err());
    }

    #[test]
    fn quantize_to_budget_holds_target_on_lattice() {
        let mut r = rng::stream(4, "qb");
        let original = ImageTensor::new(
            32,
            32,
            (0..32 * 32 * 3)
                .map(|_| (rand::Rng::gen_range(&mut r, 0..=255) as f64) / 255.0)
                .collect(),
        );
        let mut marked = original.clone();
        for v in &mut marked.data {
            *v = (*v + rand::Rng::gen_range(&mut r, -0.012..0.012)).clamp(0.0, 1.0);
        }
        let budget = crate::imageio::PerturbationBudget::new(40.0).unwrap();
        let q = quantize_to_budget(&marked, &original, &budget).unwrap();
        assert!(crate::imageio::psnr(&original, &q).unwrap() >= 40.0);
        for v in &q.data {
            let steps = v * 255.0;
            assert!((steps - steps.round()).abs() < 1e-9, "off-lattice value {v}");
        }
    }

    #[test]
    fn embed_respects_bounds_and_psnr_floor() {
        use crate::backbone::{Backbone, StubBackbone};
        use crate::extractor::RawExtractor;
        use std::sync::Arc;
        let bb: Arc<dyn Backbone> = Arc::new(StubBackbone::new(3, 64).unwrap());
        let ex = RawExtractor::new(bb);
        let key = generate_key(21, 8, 64).unwrap();
        let img = crate::imageio::generate_synthetic_items(1, 31)
            .unwrap()
            .remove(0)
            .image;
        let mut r = rng::stream(5, "wm-embed-test");
        let msg = WatermarkMessage::random(8, &mut r);
        let cfg = EmbedConfig {
            iterations: 30,
            mu_margin: 0.04,
            ..Default::default()
        };
        let (marked, report) = embed(
            &img,
            &key,
            &msg,
            &ex,
            &crate::distortion::differentiable_transform_set(),
            &cfg,
            &mut r,
        )
        .unwrap();
        assert!(marked.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(report.psnr_db >= 39.5, "psnr {}", report.psnr_db);
        assert!(crate::imageio::psnr(&img, &marked).unwrap() >= 39.5);
    }

    #[test]
    fn embed_already_satisfied_message_is_fixed_point() {
        use crate::backbone::{Backbone, StubBackbone};
        use crate::extractor::{FeatureExtractor, RawExtractor};
        use std::sync::Arc;
        let bb: Arc<dyn Backbone> = Arc::new(StubBackbone::new(3, 64).unwrap());
        let ex = RawExtractor::new(bb);
        let key = generate_key(22, 6, 64).unwrap();
        let img = crate::imageio::generate_synthetic_items(1, 32)
            .unwrap()
            .remove(0)
            .image;
        // the image's own signs, with a margin below every |dot|
        let own = extract(&img, &key, &ex).unwrap();
        let phi = ex.features(&img).unwrap();
        let min_abs = (0..key.k)
            .map(|i| key.dot(i, &phi).abs())
            .fold(f64::INFINITY, f64::min);
        let cfg = EmbedConfig {
            mu_margin: (min_abs / 2.0).max(1e-6),
            iterations: 20,
            ..Default::default()
        };
        let mut r = rng::stream(9, "wm-fixed");
        let (marked, report) = embed(
            &img,
            &key,
            &own,
            &ex,
            &crate::distortion::differentiable_transform_set(),
            &cfg,
            &mut r,
        )
        .unwrap();
        assert_eq!(marked.data, img.data, "already-marked image must pass through");
        assert!(report.psnr_db > 60.0);
        assert!(!report.warning);
    }

    #[test]
    fn key_file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        let key = generate_key(23, 10, 64).unwrap();
        save_key(&key, &path).unwrap();
        let loaded = load_key(&path).unwrap();
        assert_eq!(key, loaded);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], KEY_MAGIC);
    }

    #[test]
    fn key_file_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        save_key(&generate_key(1, 4, 16).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_key(&path).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn key_file_header_payload_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        save_key(&generate_key(1, 4, 16).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // lie about k in the header: {"k":4 -> {"k":3
        let pos = bytes.windows(4).position(|w| w == b"\"k\":").unwrap() + 4;
        assert_eq!(bytes[pos], b'4');
        bytes[pos] = b'3';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_key(&path).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn key_file_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        save_key(&generate_key(1, 4, 16).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] = b'!';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_key(&path).is_err());
    }
}
