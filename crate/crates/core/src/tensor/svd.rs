//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Works in `f64` internally. The column set being orthogonalized is always
//! the shorter side of the matrix, so a `rows×cols` input costs
//! `O(min² · max)` per sweep.

use crate::error::{Error, Result};

pub const SVD_MAX_SWEEPS: usize = 100;
/// Sweep stops once `sqrt(Σ (cᵢ·cⱼ)²) / ‖A‖²_F` falls below this.
pub const SVD_TOLERANCE: f64 = 1e-10;

/// `A = U · diag(s) · Vᵀ` with `U: rows×r`, `V: cols×r`, `r = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows×r`.
    pub u: Vec<f64>,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// Row-major `cols×r`.
    pub v: Vec<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.s.iter().sum()
    }

    /// `U·Vᵀ`, row-major `rows×cols`.
    pub fn u_vt(&self) -> Vec<f64> {
        let r = self.rank();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] = (0..r).map(|k| self.u[i * r + k] * self.v[j * r + k]).sum();
            }
        }
        out
    }

    /// `U·diag(s)·Vᵀ`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let r = self.rank();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i * self.cols + j] = (0..r)
                    .map(|k| self.u[i * r + k] * self.s[k] * self.v[j * r + k])
                    .sum();
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin SVD of a row-major `rows×cols` matrix.
pub fn svd_thin(rows: usize, cols: usize, data: &[f32]) -> Result<SvdFactors> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::dim(
            "svd",
            format!("{rows}x{cols} with {} values", data.len()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("svd input contains non-finite values".into()));
    }
    // Orthogonalize the shorter side: `k` vectors of length `len`, each
    // stored contiguously.
    let transposed = rows < cols;
    let (k, len) = if transposed { (rows, cols) } else { (cols, rows) };
    let mut w = vec![0.0f64; k * len];
    for i in 0..rows {
        for j in 0..cols {
            let v = data[i * cols + j] as f64;
            if transposed {
                w[i * len + j] = v;
            } else {
                w[j * len + i] = v;
            }
        }
    }
    let mut rot = vec![0.0f64; k * k];
    for j in 0..k {
        rot[j * k + j] = 1.0;
    }

    let frob2: f64 = w.iter().map(|v| v * v).sum();
    let mut norms: Vec<f64> = w.chunks_exact(len).map(|c| dot(c, c)).collect();
    let mut converged = frob2 == 0.0 || k == 1;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "one-sided Jacobi did not converge in {SVD_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        let mut off = 0.0;
        for p in 0..k {
            for q in p + 1..k {
                let (head, tail) = w.split_at_mut(q * len);
                let cp = &mut head[p * len..(p + 1) * len];
                let cq = &mut tail[..len];
                let gamma = dot(cp, cq);
                off += gamma * gamma;
                let (alpha, beta) = (norms[p], norms[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
                let (rh, rt) = rot.split_at_mut(q * k);
                let vp = &mut rh[p * k..(p + 1) * k];
                let vq = &mut rt[..k];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        // refresh cached norms against drift
        for (n, c) in norms.iter_mut().zip(w.chunks_exact(len)) {
            *n = dot(c, c);
        }
        converged = off.sqrt() / frob2 < SVD_TOLERANCE;
    }

    let mut order: Vec<usize> = (0..k).collect();
    let sing: Vec<f64> = norms.iter().map(|n| n.max(0.0).sqrt()).collect();
    order.sort_by(|&a, &b| sing[b].total_cmp(&sing[a]).then(a.cmp(&b)));

    // Long side: normalized columns of W. Short side: rotation columns.
    let mut long = vec![0.0; len * k];
    let mut short = vec![0.0; k * k];
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let sv = sing[src];
        s.push(sv);
        let col = &w[src * len..(src + 1) * len];
        if sv > f64::MIN_POSITIVE {
            for i in 0..len {
                long[i * k + dst] = col[i] / sv;
            }
        }
        for i in 0..k {
            short[i * k + dst] = rot[src * k + i];
        }
    }
    let (u, v) = if transposed { (short, long) } else { (long, short) };
    Ok(SvdFactors {
        rows,
        cols,
        u,
        s,
        v,
    })
}
