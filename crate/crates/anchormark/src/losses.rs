//! Training objectives: positive pair loss, margin negative loss,
//! decorrelation loss, their weighted total, and in-batch hard-negative
//! mining. Analytic gradients for all of them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureVector;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::Rng;

fn default_margin() -> f64 {
    0.2
}
fn default_tau() -> f64 {
    0.8
}
fn default_lambda() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hinge margin `m` in the negative loss.
    #[serde(default = "default_margin")]
    pub margin_m: f64,
    /// Hard-negative similarity threshold.
    #[serde(default = "default_tau")]
    pub tau_hard_negative: f64,
    /// Weight of the decorrelation term.
    #[serde(default = "default_lambda")]
    pub lambda_decorr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_m: default_margin(),
            tau_hard_negative: default_tau(),
            lambda_decorr: default_lambda(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin_m < 0.0 {
            return Err(Error::Argument("margin_m must be >= 0".into()));
        }
        if !(-1.0 < self.tau_hard_negative && self.tau_hard_negative < 1.0) {
            return Err(Error::Argument("tau must lie in (-1, 1)".into()));
        }
        if self.lambda_decorr < 0.0 {
            return Err(Error::Argument("lambda_decorr must be >= 0".into()));
        }
        Ok(())
    }
}

/// The five projected feature matrices of one training batch, N x d each
/// with unit-norm rows.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub z_img: Matrix,
    pub z_dist: Matrix,
    pub z_text: Matrix,
    pub z_neg_img: Matrix,
    pub z_neg_dist: Matrix,
}

impl BatchFeatures {
    pub fn new(
        z_img: Matrix,
        z_dist: Matrix,
        z_text: Matrix,
        z_neg_img: Matrix,
        z_neg_dist: Matrix,
    ) -> Result<Self> {
        let b = BatchFeatures {
            z_img,
            z_dist,
            z_text,
            z_neg_img,
            z_neg_dist,
        };
        b.validate()?;
        Ok(b)
    }

    /// Skip validation; finite-difference tests perturb rows off the sphere.
    pub fn from_parts_unchecked(
        z_img: Matrix,
        z_dist: Matrix,
        z_text: Matrix,
        z_neg_img: Matrix,
        z_neg_dist: Matrix,
    ) -> Self {
        BatchFeatures {
            z_img,
            z_dist,
            z_text,
            z_neg_img,
            z_neg_dist,
        }
    }

    pub fn n(&self) -> usize {
        self.z_img.rows
    }

    pub fn dim(&self) -> usize {
        self.z_img.cols
    }

    pub fn matrices(&self) -> [&Matrix; 5] {
        [
            &self.z_img,
            &self.z_dist,
            &self.z_text,
            &self.z_neg_img,
            &self.z_neg_dist,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.z_img.rows, self.z_img.cols);
        for m in self.matrices() {
            if m.rows != n || m.cols != d {
                return Err(Error::Dimension(format!(
                    "batch matrices disagree: {}x{} vs {}x{}",
                    m.rows, m.cols, n, d
                )));
            }
            for i in 0..m.rows {
                let nr = linalg::norm(m.row(i));
                if (nr - 1.0).abs() > 1e-4 {
                    return Err(Error::Argument(format!(
                        "batch row {i} has norm {nr}, expected unit"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cosine similarity of two feature vectors; errors on zero vectors.
pub fn cosine_sim(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "cosine_sim dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = linalg::norm(&a.values);
    let nb = linalg::norm(&b.values);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Argument("cosine_sim of zero vector".into()));
    }
    Ok(linalg::dot(&a.values, &b.values) / (na * nb))
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn row_cos(a: &Matrix, b: &Matrix, i: usize) -> f64 {
    linalg::cosine(a.row(i), b.row(i))
}

/// Accumulate `w * d cos(a_i, b_i) / d a_i` into `ga_i` and the symmetric
/// term into `gb_i`.
fn cos_grad_acc(a: &Matrix, b: &Matrix, i: usize, w: f64, ga: &mut Matrix, gb: &mut Matrix) {
    let ar = a.row(i);
    let br = b.row(i);
    let na = linalg::norm(ar);
    let nb = linalg::norm(br);
    let c = linalg::dot(ar, br) / (na * nb);
    {
        let row = ga.row_mut(i);
        for k in 0..row.len() {
            row[k] += w * (br[k] / (na * nb) - c * ar[k] / (na * na));
        }
    }
    {
        let row = gb.row_mut(i);
        for k in 0..row.len() {
            row[k] += w * (ar[k] / (na * nb) - c * br[k] / (nb * nb));
        }
    }
}

/// Positive pair loss: per sample, two binary log-softmax terms pitting the
/// clean (resp. distorted) image against its hard negative (resp. the
/// negative's distorted version) for the text anchor; averaged and negated.
pub fn positive_loss(batch: &BatchFeatures) -> f64 {
    let n = batch.n();
    let mut acc = 0.0;
    for i in 0..n {
        let s_it = row_cos(&batch.z_img, &batch.z_text, i);
        let s_nt = row_cos(&batch.z_neg_img, &batch.z_text, i);
        let s_dt = row_cos(&batch.z_dist, &batch.z_text, i);
        let s_ndt = row_cos(&batch.z_neg_dist, &batch.z_text, i);
        acc += softplus(s_nt - s_it) + softplus(s_ndt - s_dt);
    }
    acc / n as f64
}

/// Margin negative loss: mean hinge terms keeping negatives below positives
/// by at least `m`, for the clean and the distorted branch.
pub fn negative_loss(batch: &BatchFeatures, m: f64) -> f64 {
    let n = batch.n();
    let mut acc = 0.0;
    for i in 0..n {
        let s_it = row_cos(&batch.z_img, &batch.z_text, i);
        let s_nt = row_cos(&batch.z_neg_img, &batch.z_text, i);
        let s_dt = row_cos(&batch.z_dist, &batch.z_text, i);
        let s_ndt = row_cos(&batch.z_neg_dist, &batch.z_text, i);
        acc += (s_nt - s_it + m).max(0.0) + (s_ndt - s_dt + m).max(0.0);
    }
    acc / n as f64
}

/// Decorrelation loss: center rows, form C = Z̃ᵀZ̃ / N, and return the sum
/// of squared off-diagonal entries. Computed through the N x N Gram matrix
/// so d can be large.
pub fn decorrelation_loss(z: &Matrix) -> Result<f64> {
    if z.rows < 2 {
        return Err(Error::Argument(format!(
            "decorrelation_loss needs N >= 2 rows, got {}",
            z.rows
        )));
    }
    let (n, d) = (z.rows, z.cols);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        linalg::axpy(&mut mean, 1.0 / n as f64, z.row(i));
    }
    let mut centered = z.clone();
    for i in 0..n {
        let row = centered.row_mut(i);
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // ||C||_F^2 = ||Z̃Z̃ᵀ||_F^2 / N^2
    let mut frob = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = linalg::dot(centered.row(i), centered.row(j));
            frob += g * g;
        }
    }
    frob /= (n * n) as f64;
    // minus the squared diagonal
    let mut diag_sq = 0.0;
    for k in 0..d {
        let mut c_kk = 0.0;
        for i in 0..n {
            let v = centered.row(i)[k];
            c_kk += v * v;
        }
        c_kk /= n as f64;
        diag_sq += c_kk * c_kk;
    }
    // provably >= 0; the subtraction can leave -1e-17 class residue
    Ok((frob - diag_sq).max(0.0))
}

/// Gradient of [`decorrelation_loss`] w.r.t. Z.
#[allow(clippy::needless_range_loop)]
pub fn decorrelation_grad(z: &Matrix) -> Result<Matrix> {
    if z.rows < 2 {
        return Err(Error::Argument("decorrelation_grad needs N >= 2".into()));
    }
    let (n, d) = (z.rows, z.cols);
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        linalg::axpy(&mut mean, 1.0 / nf, z.row(i));
    }
    let mut centered = z.clone();
    for i in 0..n {
        let row = centered.row_mut(i);
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // gram G = Z̃ Z̃ᵀ
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gram.row_mut(i)[j] = linalg::dot(centered.row(i), centered.row(j));
        }
    }
    // diagonal of C
    let mut diag = vec![0.0; d];
    for k in 0..d {
        let mut c_kk = 0.0;
        for i in 0..n {
            let v = centered.row(i)[k];
            c_kk += v * v;
        }
        diag[k] = c_kk / nf;
    }
    // dL/dZ̃ = (4/N²) G Z̃ - (4/N) Z̃ diag(c); its columns already sum to
    // zero, so the centering projection is a no-op.
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let gi = grad.row_mut(i);
        for j in 0..n {
            let w = 4.0 * gram.row(i)[j] / (nf * nf);
            linalg::axpy(gi, w, centered.row(j));
        }
        for k in 0..d {
            gi[k] -= 4.0 / nf * centered.row(i)[k] * diag[k];
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pos: f64,
    pub neg: f64,
    pub decorr: f64,
}

/// Total loss with the component breakdown; the decorrelation term sums the
/// penalty over image, distorted, and text features.
pub fn total_loss(batch: &BatchFeatures, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let pos = positive_loss(batch);
    let neg = negative_loss(batch, cfg.margin_m);
    let decorr = decorrelation_loss(&batch.z_img)?
        + decorrelation_loss(&batch.z_dist)?
        + decorrelation_loss(&batch.z_text)?;
    Ok(LossBreakdown {
        total: pos + neg + cfg.lambda_decorr * decorr,
        pos,
        neg,
        decorr,
    })
}

/// Gradients of the total loss w.r.t. each batch matrix.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub z_img: Matrix,
    pub z_dist: Matrix,
    pub z_text: Matrix,
    pub z_neg_img: Matrix,
    pub z_neg_dist: Matrix,
}

impl BatchGrads {
    fn zeros(n: usize, d: usize) -> Self {
        BatchGrads {
            z_img: Matrix::zeros(n, d),
            z_dist: Matrix::zeros(n, d),
            z_text: Matrix::zeros(n, d),
            z_neg_img: Matrix::zeros(n, d),
            z_neg_dist: Matrix::zeros(n, d),
        }
    }

    fn add_scaled(&mut self, other: &BatchGrads, scale: f64) {
        for (dst, src) in [
            (&mut self.z_img, &other.z_img),
            (&mut self.z_dist, &other.z_dist),
            (&mut self.z_text, &other.z_text),
            (&mut self.z_neg_img, &other.z_neg_img),
            (&mut self.z_neg_dist, &other.z_neg_dist),
        ] {
            for (t, s) in dst.data.iter_mut().zip(&src.data) {
                *t += scale * s;
            }
        }
    }
}

/// Gradients of [`positive_loss`] w.r.t. every batch matrix.
pub fn positive_loss_grads(batch: &BatchFeatures) -> BatchGrads {
    let (n, d) = (batch.n(), batch.dim());
    let nf = n as f64;
    let mut g = BatchGrads::zeros(n, d);
    for i in 0..n {
        let s_it = row_cos(&batch.z_img, &batch.z_text, i);
        let s_nt = row_cos(&batch.z_neg_img, &batch.z_text, i);
        let s_dt = row_cos(&batch.z_dist, &batch.z_text, i);
        let s_ndt = row_cos(&batch.z_neg_dist, &batch.z_text, i);
        // d softplus(s_neg - s_pos) = sigmoid(s_neg - s_pos)
        let w1 = sigmoid(s_nt - s_it) / nf;
        let w2 = sigmoid(s_ndt - s_dt) / nf;
        cos_grad_acc(&batch.z_img, &batch.z_text, i, -w1, &mut g.z_img, &mut g.z_text);
        cos_grad_acc(&batch.z_neg_img, &batch.z_text, i, w1, &mut g.z_neg_img, &mut g.z_text);
        cos_grad_acc(&batch.z_dist, &batch.z_text, i, -w2, &mut g.z_dist, &mut g.z_text);
        cos_grad_acc(&batch.z_neg_dist, &batch.z_text, i, w2, &mut g.z_neg_dist, &mut g.z_text);
    }
    g
}

/// Gradients of [`negative_loss`] w.r.t. every batch matrix.
pub fn negative_loss_grads(batch: &BatchFeatures, m: f64) -> BatchGrads {
    let (n, d) = (batch.n(), batch.dim());
    let nf = n as f64;
    let mut g = BatchGrads::zeros(n, d);
    for i in 0..n {
        let s_it = row_cos(&batch.z_img, &batch.z_text, i);
        let s_nt = row_cos(&batch.z_neg_img, &batch.z_text, i);
        let s_dt = row_cos(&batch.z_dist, &batch.z_text, i);
        let s_ndt = row_cos(&batch.z_neg_dist, &batch.z_text, i);
        if s_nt - s_it + m > 0.0 {
            cos_grad_acc(&batch.z_img, &batch.z_text, i, -1.0 / nf, &mut g.z_img, &mut g.z_text);
            cos_grad_acc(
                &batch.z_neg_img,
                &batch.z_text,
                i,
                1.0 / nf,
                &mut g.z_neg_img,
                &mut g.z_text,
            );
        }
        if s_ndt - s_dt + m > 0.0 {
            cos_grad_acc(&batch.z_dist, &batch.z_text, i, -1.0 / nf, &mut g.z_dist, &mut g.z_text);
            cos_grad_acc(
                &batch.z_neg_dist,
                &batch.z_text,
                i,
                1.0 / nf,
                &mut g.z_neg_dist,
                &mut g.z_text,
            );
        }
    }
    g
}

pub fn total_loss_with_grads(
    batch: &BatchFeatures,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, BatchGrads)> {
    let breakdown = total_loss(batch, cfg)?;
    let mut g = positive_loss_grads(batch);
    g.add_scaled(&negative_loss_grads(batch, cfg.margin_m), 1.0);
    if cfg.lambda_decorr != 0.0 {
        for (target, src) in [
            (&mut g.z_img, &batch.z_img),
            (&mut g.z_dist, &batch.z_dist),
            (&mut g.z_text, &batch.z_text),
        ] {
            let dg = decorrelation_grad(src)?;
            for (t, s) in target.data.iter_mut().zip(&dg.data) {
                *t += cfg.lambda_decorr * s;
            }
        }
    }
    Ok((breakdown, g))
}

/// For each row, the hard-negative index: the argmax-similarity peer when
/// that similarity exceeds tau, otherwise a uniformly random peer. Never the
/// row itself.
pub fn mine_hard_negatives(z_img: &Matrix, tau: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = z_img.rows;
    if n < 2 {
        return Err(Error::Argument(format!(
            "mining needs at least 2 samples, got {n}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = linalg::cosine(z_img.row(i), z_img.row(j));
            if s > best {
                best = s;
                best_j = j;
            }
        }
        if best > tau {
            out.push(best_j);
        } else {
            let r = rng.gen_range(0..n - 1);
            out.push(if r >= i { r + 1 } else { r });
        }
    }
    Ok(out)
}
