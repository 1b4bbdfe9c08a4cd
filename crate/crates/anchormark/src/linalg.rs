//! Small dense linear algebra helpers.
//!
//! Feature math runs in f64; parameter storage is f32 (the checkpoint and key
//! file dtype), converted on use with f64 accumulation.

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += s * x
#[inline]
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// `w` is `[out_dim x in_dim]` row-major f32; returns `w · x` in f64.
/// Four independent accumulators keep the fp dependency chain short; the
/// summation order is fixed, so results stay deterministic.
pub fn matvec_f32(w: &[f32], out_dim: usize, in_dim: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    let mut out = vec![0.0; out_dim];
    for (o, row) in out.iter_mut().zip(w.chunks_exact(in_dim)) {
        let mut acc = [0.0f64; 4];
        let mut chunks_w = row.chunks_exact(4);
        let mut chunks_x = x.chunks_exact(4);
        for (cw, cx) in (&mut chunks_w).zip(&mut chunks_x) {
            acc[0] += cw[0] as f64 * cx[0];
            acc[1] += cw[1] as f64 * cx[1];
            acc[2] += cw[2] as f64 * cx[2];
            acc[3] += cw[3] as f64 * cx[3];
        }
        let mut tail = 0.0;
        for (wi, xi) in chunks_w.remainder().iter().zip(chunks_x.remainder()) {
            tail += *wi as f64 * xi;
        }
        *o = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    out
}

/// `wᵀ · g` for `w` as in [`matvec_f32`]: propagates a gradient back through
/// the affine map.
pub fn matvec_f32_t(w: &[f32], out_dim: usize, in_dim: usize, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(g.len(), out_dim);
    let mut out = vec![0.0; in_dim];
    for (row, gi) in w.chunks_exact(in_dim).zip(g) {
        for (oi, wi) in out.iter_mut().zip(row) {
            *oi += *wi as f64 * gi;
        }
    }
    out
}

/// grad_w += g ⊗ x (outer product), grad_w stored `[out_dim x in_dim]`.
pub fn outer_acc(grad_w: &mut [f64], g: &[f64], x: &[f64]) {
    debug_assert_eq!(grad_w.len(), g.len() * x.len());
    for (gw_row, gi) in grad_w.chunks_exact_mut(x.len()).zip(g) {
        for (gw, xi) in gw_row.iter_mut().zip(x) {
            *gw += gi * xi;
        }
    }
}

/// Normalize `v` to unit L2 norm in place; returns the original norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}
