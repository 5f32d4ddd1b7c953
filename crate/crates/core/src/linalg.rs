//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use crate::tensor::{dot, Matrix};

const MAX_SWEEPS: usize = 80;

/// Full thin SVD `M = U Σ Vᵀ` with `k = min(rows, cols)` components,
/// singular values sorted descending.
///
/// Columns of `U` belonging to numerically zero singular values are completed
/// to an orthonormal set, so `UᵀU = I_k` always holds.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

pub fn thin_svd(m: &Matrix) -> ThinSvd {
    if m.cols() > m.rows() {
        let t = thin_svd(&m.transpose());
        return ThinSvd { u: t.v, sigma: t.sigma, v: t.u };
    }
    let (rows, n) = m.shape();
    // Work on columns: keep A in column-major order for cache-friendly rotations.
    let mut a: Vec<Vec<f64>> = (0..n).map(|c| m.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(i, col)| (dot(col, col).sqrt(), i)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let sigma: Vec<f64> = order.iter().map(|&(s, _)| s).collect();
    let tol = sigma.first().copied().unwrap_or(0.0) * (rows.max(n) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &(s, i) in &order {
        if s > tol && s > 0.0 {
            u_cols.push(a[i].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, rows));
        }
    }
    let u = Matrix::from_fn(rows, n, |r, c| u_cols[c][r]);
    let vm = Matrix::from_fn(n, n, |r, c| v[order[c].1][r]);
    ThinSvd { u, sigma, v: vm }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// A unit vector orthogonal to every column in `basis` (modified Gram–Schmidt
/// over the canonical vectors, picking the best-conditioned candidate).
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, cand));
        }
    }
    let (norm, mut cand) = best.expect("dimension must be positive");
    for c in &mut cand {
        *c /= norm;
    }
    cand
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(s: &ThinSvd) -> Matrix {
        let mut us = s.u.clone();
        for r in 0..us.rows() {
            for c in 0..us.cols() {
                us[(r, c)] *= s.sigma[c];
            }
        }
        us.matmul_t(&s.v)
    }

    #[test]
    fn reconstructs_tall_and_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(8, 16), (16, 8), (5, 5), (1, 4)] {
            let m = Matrix::randn(r, c, 1.0, &mut rng);
            let s = thin_svd(&m);
            assert!(reconstruct(&s).max_abs_diff(&m) < 1e-12);
            let k = r.min(c);
            assert!(s.u.t_matmul(&s.u).max_abs_diff(&Matrix::identity(k)) < 1e-12);
            assert!(s.v.t_matmul(&s.v).max_abs_diff(&Matrix::identity(k)) < 1e-12);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_keeps_orthonormal_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::randn(6, 2, 1.0, &mut rng);
        let b = Matrix::randn(5, 2, 1.0, &mut rng);
        let m = a.matmul_t(&b);
        let s = thin_svd(&m);
        assert!(s.sigma[2] < 1e-12);
        assert!(s.u.t_matmul(&s.u).max_abs_diff(&Matrix::identity(5)) < 1e-10);
        assert!(reconstruct(&s).max_abs_diff(&m) < 1e-12);
    }
}
