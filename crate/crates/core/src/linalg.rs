//! Householder QR with column pivoting and the Moore–Penrose pseudoinverse
//! of full-column-rank matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Relative pivot tolerance used by the rank test.
pub const RANK_TOLERANCE: f64 = 1e-10;

struct PivotedQr<S> {
    /// Packed `R` in the upper triangle of the first `n` rows.
    r: Tensor2<S>,
    /// Householder vectors, one per column, each of length `m - k`.
    reflectors: Vec<Vec<S>>,
    perm: Vec<usize>,
}

fn pivoted_qr<S: Scalar>(w: &Tensor2<S>) -> PivotedQr<S> {
    let (m, n) = w.shape();
    let mut a = w.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n.min(m) {
        // pivot on the largest remaining column norm
        let mut best = k;
        let mut best_norm = S::neg_infinity();
        for j in k..n {
            let norm: S = (k..m).map(|i| a.get(i, j) * a.get(i, j)).sum();
            if norm > best_norm {
                best_norm = norm;
                best = j;
            }
        }
        if best != k {
            for i in 0..m {
                let tmp = a.get(i, k);
                a.set(i, k, a.get(i, best));
                a.set(i, best, tmp);
            }
            perm.swap(k, best);
        }

        let norm = best_norm.sqrt();
        let x0 = a.get(k, k);
        let alpha = if x0 >= S::zero() { -norm } else { norm };
        let mut v: Vec<S> = (k..m).map(|i| a.get(i, k)).collect();
        v[0] -= alpha;
        let vv: S = v.iter().map(|&x| x * x).sum();
        if vv > S::zero() {
            let two = S::lit(2.0);
            for j in k..n {
                let dot: S = v.iter().enumerate().map(|(t, &vi)| vi * a.get(k + t, j)).sum();
                let f = two * dot / vv;
                for (t, &vi) in v.iter().enumerate() {
                    let cur = a.get(k + t, j);
                    a.set(k + t, j, cur - f * vi);
                }
            }
        }
        reflectors.push(v);
    }
    PivotedQr {
        r: a,
        reflectors,
        perm,
    }
}

/// Numerical rank via pivoted QR at the given relative tolerance.
pub fn rank<S: Scalar>(w: &Tensor2<S>, rel_tol: f64) -> usize {
    let qr = pivoted_qr(w);
    let k = w.rows().min(w.cols());
    if k == 0 {
        return 0;
    }
    let lead = qr.r.get(0, 0).abs().to_f64_lossy();
    if lead == 0.0 {
        return 0;
    }
    (0..k)
        .take_while(|&i| qr.r.get(i, i).abs().to_f64_lossy() > rel_tol * lead)
        .count()
}

/// Moore–Penrose pseudoinverse of a matrix with full column rank.
///
/// With `W P = Q R`, returns `P R⁻¹ Qᵀ`. Rank deficiency (including any
/// matrix with more columns than rows) is reported as [`Error::Singular`].
pub fn pseudoinverse<S: Scalar>(w: &Tensor2<S>) -> Result<Tensor2<S>> {
    let (m, n) = w.shape();
    if n == 0 || m == 0 {
        return Err(Error::Singular { pivot: 0.0, tol: RANK_TOLERANCE });
    }
    if n > m {
        return Err(Error::Singular { pivot: 0.0, tol: RANK_TOLERANCE });
    }
    let qr = pivoted_qr(w);
    let lead = qr.r.get(0, 0).abs().to_f64_lossy();
    for k in 0..n {
        let pivot = qr.r.get(k, k).abs().to_f64_lossy();
        if lead == 0.0 || pivot <= RANK_TOLERANCE * lead {
            return Err(Error::Singular {
                pivot,
                tol: RANK_TOLERANCE * lead,
            });
        }
    }

    // Qᵀ restricted to its first n rows: apply the reflectors to I_m.
    let mut qt = Tensor2::<S>::identity(m);
    let two = S::lit(2.0);
    for (k, v) in qr.reflectors.iter().enumerate() {
        let vv: S = v.iter().map(|&x| x * x).sum();
        if vv == S::zero() {
            continue;
        }
        for j in 0..m {
            let dot: S = v.iter().enumerate().map(|(t, &vi)| vi * qt.get(k + t, j)).sum();
            let f = two * dot / vv;
            for (t, &vi) in v.iter().enumerate() {
                let cur = qt.get(k + t, j);
                qt.set(k + t, j, cur - f * vi);
            }
        }
    }

    // back substitution R Y = Qᵀ[0..n]
    let mut y = Tensor2::<S>::zeros(n, m);
    for i in (0..n).rev() {
        let rii = qr.r.get(i, i);
        for j in 0..m {
            let mut acc = qt.get(i, j);
            for p in i + 1..n {
                acc -= qr.r.get(i, p) * y.get(p, j);
            }
            y.set(i, j, acc / rii);
        }
    }

    let mut out = Tensor2::<S>::zeros(n, m);
    for (i, &p) in qr.perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(y.row(i));
    }
    Ok(out)
}

/// Maximum absolute violation over the four Penrose conditions.
pub fn penrose_residual<S: Scalar>(a: &Tensor2<S>, x: &Tensor2<S>) -> Result<f64> {
    let ax = a.matmul(x)?;
    let xa = x.matmul(a)?;
    let c1 = ax.matmul(a)?.max_abs_diff(a)?;
    let c2 = xa.matmul(x)?.max_abs_diff(x)?;
    let c3 = ax.max_abs_diff(&ax.transpose())?;
    let c4 = xa.max_abs_diff(&xa.transpose())?;
    Ok(c1.max(c2).max(c3).max(c4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = Tensor2<f64>;

    #[test]
    fn identity_is_its_own_pseudoinverse() {
        let i = T::identity(5);
        assert!(pseudoinverse(&i).unwrap().max_abs_diff(&i).unwrap() < 1e-15);
    }

    #[test]
    fn orthonormal_columns_give_transpose() {
        // columns of a rotation embedded in 4 dims
        let (c, s) = (0.6, 0.8);
        let q = T::from_rows(&[
            vec![c, 0.0],
            vec![s, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let p = pseudoinverse(&q).unwrap();
        assert!(p.max_abs_diff(&q.transpose()).unwrap() < 1e-14);
    }

    #[test]
    fn random_tall_matrix_satisfies_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = T::random_normal(6, 3, 1.0, &mut rng);
            let p = pseudoinverse(&w).unwrap();
            assert!(penrose_residual(&w, &p).unwrap() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let w = T::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(pseudoinverse(&w), Err(Error::Singular { .. })));
        assert_eq!(rank(&w, RANK_TOLERANCE), 1);
        assert!(matches!(pseudoinverse(&T::zeros(4, 2)), Err(Error::Singular { .. })));
        assert!(matches!(pseudoinverse(&T::zeros(2, 4)), Err(Error::Singular { .. })));
    }
}
