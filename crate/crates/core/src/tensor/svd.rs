//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working copy are rotated pairwise until mutually orthogonal;
//! their norms are then the singular values. Accurate to a few ulps relative to
//! the largest singular value, which is what the TT-SVD exactness contract needs.

use super::DenseTensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;

/// `M = U · diag(s) · Vᵀ` with `U: m×k`, `V: n×k`, `k = min(m, n)`,
/// `s` non-negative and non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(s) · Vᵀ`
    pub fn reconstruct(&self) -> DenseTensor {
        let (m, k) = (self.u.rows(), self.u.cols());
        let n = self.v.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for r in 0..k {
                let us = self.u.at(i, r) * self.s[r];
                if us == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += us * self.v.at(j, r);
                }
            }
        }
        DenseTensor::matrix(m, n, out).expect("svd factors have consistent shapes")
    }
}

pub fn svd(matrix: &DenseTensor) -> Result<Svd> {
    matrix.expect_rank(2)?;
    if !matrix.is_finite() {
        return Err(Error::ConvergenceFailure {
            sweeps: 0,
            residual: f64::NAN,
        });
    }
    let (m, n) = (matrix.rows(), matrix.cols());
    if m >= n {
        let (u, s, v) = jacobi_tall(matrix_columns(matrix), m)?;
        Ok(assemble(u, s, v, m, n))
    } else {
        // factor the transpose and swap the roles of U and V
        let t = matrix.transpose()?;
        let (v, s, u) = jacobi_tall(matrix_columns(&t), n)?;
        Ok(assemble(u, s, v, m, n))
    }
}

fn matrix_columns(a: &DenseTensor) -> Vec<Vec<f64>> {
    (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a.at(i, j)).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns left vectors (as columns), singular values, right vectors (as
/// columns), all sorted by decreasing singular value. Requires `rows >= cols`.
#[allow(clippy::type_complexity)]
fn jacobi_tall(
    mut cols: Vec<Vec<f64>>,
    rows: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let mut converged = n < 2;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let rel = gamma.abs() / (alpha * beta).sqrt();
                if rel <= ORTHO_TOL {
                    continue;
                }
                worst = worst.max(rel);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sigma: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let s_max = order.first().map(|&j| sigma[j]).unwrap_or(0.0);
    let cutoff = s_max * 1e-13 * rows.max(n) as f64;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            left.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            left.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    for slot in deficient {
        left[slot] = orthonormal_complement(&left, slot, rows);
    }
    let s = order.iter().map(|&j| sigma[j]).collect();
    let right = order.iter().map(|&j| v[j].clone()).collect();
    Ok((left, s, right))
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// A unit vector orthogonal to every non-zero column in `basis` except `skip`.
fn orthonormal_complement(basis: &[Vec<f64>], skip: usize, rows: usize) -> Vec<f64> {
    let mut best = vec![0.0; rows];
    let mut best_norm = -1.0;
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        for _ in 0..2 {
            for (k, b) in basis.iter().enumerate() {
                if k == skip {
                    continue;
                }
                let proj = dot(&cand, b);
                if proj != 0.0 {
                    cand.iter_mut().zip(b).for_each(|(c, bv)| *c -= proj * bv);
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = cand;
        }
        if best_norm > 0.7 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

fn assemble(u: Vec<Vec<f64>>, s: Vec<f64>, v: Vec<Vec<f64>>, m: usize, n: usize) -> Svd {
    let k = s.len();
    let to_matrix = |cols: &[Vec<f64>], rows: usize| {
        DenseTensor::from_fn(&[rows, k], |idx| cols[idx % k][idx / k])
            .expect("non-empty factor")
    };
    debug_assert_eq!(k, m.min(n));
    Svd {
        u: to_matrix(&u, m),
        s,
        v: to_matrix(&v, n),
    }
}
