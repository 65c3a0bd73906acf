//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For `W` of shape n×m the factors are `U` (n×r), `σ` (r) and `Vᵀ` (r×m)
//! with `r = min(n, m)`. Singular values come out sorted descending; ties keep
//! the order of the original column index after convergence. Each left
//! singular vector is sign-normalized so its entry of largest magnitude is
//! non-negative, with the matching right vector flipped alongside.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Rotation threshold: a column pair counts as orthogonal once
/// `|a_p·a_q| <= TOL * ‖a_p‖‖a_q‖`.
const TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn new(u: Matrix, sigma: Vec<f64>, vt: Matrix) -> Result<Self> {
        let r = sigma.len();
        if u.cols() != r || vt.rows() != r {
            return Err(Error::Shape(format!(
                "U is {}x{}, sigma has {r} entries, Vt is {}x{}",
                u.rows(),
                u.cols(),
                vt.rows(),
                vt.cols()
            )));
        }
        Ok(Self { u, sigma, vt })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Shape of the factored matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.vt.cols())
    }
}

pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::InvalidMatrix(format!(
            "empty {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    if !w.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }

    let (u, sigma, vt) = if w.rows() >= w.cols() {
        let (u, sigma, v) = jacobi_tall(w);
        (u, sigma, v.transpose())
    } else {
        // W = (Wᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&w.transpose());
        (v_t, sigma, u_t.transpose())
    };
    let mut f = SvdFactors { u, sigma, vt };
    normalize_signs(&mut f);
    Ok(f)
}

/// One-sided Jacobi on a matrix with rows >= cols. Returns `(U, σ, V)` with
/// columns already sorted by descending σ.
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let n = a.rows();
    let m = a.cols();
    let mut cols: Vec<Vec<f64>> = (0..m).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort keeps the original column order among exact ties.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let negligible = sigma_max * (n.max(m) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(n, m);
    let mut vmat = Matrix::zeros(m, m);
    let mut sigma = Vec::with_capacity(m);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > negligible && s > 0.0 {
            for r in 0..n {
                u.set(r, k, cols[j][r] / s);
            }
        } else {
            missing.push(k);
        }
        for r in 0..m {
            vmat.set(r, k, v[j][r]);
        }
    }
    if !missing.is_empty() {
        complete_orthonormal(&mut u, &missing);
    }
    (u, sigma, vmat)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the columns listed in `missing` (σ ≈ 0, direction undetermined) with
/// unit vectors orthogonal to every other column, taken from the standard
/// basis by Gram–Schmidt so the result is deterministic.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let n = u.rows();
    let r = u.cols();
    let mut filled: Vec<bool> = vec![true; r];
    for &k in missing {
        filled[k] = false;
    }
    let mut candidate = 0usize;
    for &k in missing {
        loop {
            assert!(candidate < n, "cannot complete orthonormal basis");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram–Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for j in (0..r).filter(|&j| filled[j]) {
                    let col = u.column(j);
                    let proj = dot(&col, &e);
                    for (ei, ci) in e.iter_mut().zip(&col) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                for (row, ei) in e.iter().enumerate() {
                    u.set(row, k, ei / norm);
                }
                filled[k] = true;
                break;
            }
        }
    }
}

fn normalize_signs(f: &mut SvdFactors) {
    let n = f.u.rows();
    let m = f.vt.cols();
    for i in 0..f.rank() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..n {
            let a = f.u.get(r, i).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if f.u.get(best, i) < 0.0 {
            for r in 0..n {
                let x = f.u.get(r, i);
                f.u.set(r, i, -x);
            }
            for c in 0..m {
                let x = f.vt.get(i, c);
                f.vt.set(i, c, -x);
            }
        }
    }
}

/// `U · diag(σ) · Vᵀ`
pub fn reconstruct(f: &SvdFactors) -> Result<Matrix> {
    scaled_product(f, &f.sigma)
}

/// `U · diag(d) · Vᵀ` for an arbitrary diagonal `d` of length r.
pub(crate) fn scaled_product(f: &SvdFactors, d: &[f64]) -> Result<Matrix> {
    let r = f.rank();
    if f.u.cols() != r || f.vt.rows() != r || d.len() != r {
        return Err(Error::Shape(format!(
            "U {}x{}, diagonal {}, Vt {}x{}",
            f.u.rows(),
            f.u.cols(),
            d.len(),
            f.vt.rows(),
            f.vt.cols()
        )));
    }
    let mut us = f.u.clone();
    for row in 0..us.rows() {
        for (x, s) in us.row_mut(row).iter_mut().zip(d) {
            *x *= s;
        }
    }
    us.matmul(&f.vt)
}

/// Per-component contraction `u_iᵀ · G · v_i` for a matrix `G` shaped like the
/// factored `W`. Used to pull weight gradients back onto singular components.
pub fn rank1_contraction(f: &SvdFactors, g: &Matrix) -> Result<Vec<f64>> {
    let (n, m) = f.shape();
    if g.shape() != (n, m) {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, factors describe {n}x{m}",
            g.rows(),
            g.cols()
        )));
    }
    let mut out = Vec::with_capacity(f.rank());
    let mut gv = vec![0.0; n];
    for i in 0..f.rank() {
        let v_i = f.vt.row(i);
        for (row, slot) in gv.iter_mut().enumerate() {
            *slot = dot(g.row(row), v_i);
        }
        let mut acc = 0.0;
        for (row, &x) in gv.iter().enumerate() {
            acc += f.u.get(row, i) * x;
        }
        out.push(acc);
    }
    Ok(out)
}
