//! One-sided Jacobi SVD for small dense matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `a = u * diag(s) * vt` with `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct SvdResult<T = f64> {
    /// `m x r`, orthonormal columns.
    pub u: Tensor<T>,
    /// `r` singular values, non-negative and descending.
    pub s: Tensor<T>,
    /// `r x n`, orthonormal rows.
    pub vt: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Tensor<T> {
        let r = self.s.len();
        let mut us = self.u.clone();
        let m = us.rows();
        for i in 0..m {
            for j in 0..r {
                let v = us.at(i, j) * self.s.data()[j];
                us.set(i, j, v);
            }
        }
        us.matmul(&self.vt).expect("consistent svd factors")
    }
}

pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    let (m, n) = match a.shape() {
        [m, n] if *m >= 1 && *n >= 1 => (*m, *n),
        s => return Err(Error::dim(format!("svd needs a non-empty matrix, got {s:?}"))),
    };
    if !a.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    if m >= n {
        let (u, s, v) = jacobi_tall(a.data(), m, n)?;
        Ok(SvdResult {
            u,
            s,
            vt: v.transpose()?,
        })
    } else {
        // aᵀ = u' s v'ᵀ  =>  a = v' s u'ᵀ
        let at = a.transpose()?;
        let (u, s, v) = jacobi_tall(at.data(), n, m)?;
        Ok(SvdResult {
            u: v,
            s,
            vt: u.transpose()?,
        })
    }
}

/// Householder QR of an `m x n` matrix with `m >= n`.
/// Returns the full orthogonal `q` (`m x m`) and the upper-triangular `r`
/// (`n x n`) with `a = q[:, ..n] * r`.
pub fn householder_qr<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, n) = match a.shape() {
        [m, n] if m >= n => (*m, *n),
        s => return Err(Error::dim(format!("householder qr needs m >= n, got {s:?}"))),
    };
    let mut work = a.data().to_vec();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<T> = (j..m).map(|i| work[i * n + j]).collect();
        let norm = v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        if vnorm <= T::min_positive_value() {
            reflectors.push(Vec::new());
            continue;
        }
        for x in &mut v {
            *x /= vnorm;
        }
        let two = T::one() + T::one();
        for c in j..n {
            let d = v.iter().enumerate().fold(T::zero(), |acc, (i, &vi)| acc + vi * work[(j + i) * n + c]);
            for (i, &vi) in v.iter().enumerate() {
                work[(j + i) * n + c] -= two * d * vi;
            }
        }
        reflectors.push(v);
    }
    let mut q = Tensor::<T>::eye(m);
    let qd = q.data_mut();
    let two = T::one() + T::one();
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for c in 0..m {
            let d = v.iter().enumerate().fold(T::zero(), |acc, (i, &vi)| acc + vi * qd[(j + i) * m + c]);
            for (i, &vi) in v.iter().enumerate() {
                qd[(j + i) * m + c] -= two * d * vi;
            }
        }
    }
    let r = Tensor::from_fn(&[n, n], |idx| {
        let (i, c) = (idx / n, idx % n);
        if c >= i {
            work[i * n + c]
        } else {
            T::zero()
        }
    });
    Ok((q, r))
}

/// Hestenes iteration on the columns of an `m x n` matrix with `m >= n`.
/// Returns `(u: m x n, s: n, v: n x n)`.
fn jacobi_tall<T: Scalar>(a: &[T], m: usize, n: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    // Column-major working copies make the column rotations contiguous.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();
    // Orthogonality threshold; rounding in an m-term dot product can leave
    // |gamma| a few ulps above eps * |a_p| |a_q| indefinitely.
    let tol = eps * T::from_usize_lossy(m).sqrt().max(T::one() + T::one());
    // Columns whose squared norm is below this are numerically zero; rotating
    // against them only shuffles rounding noise and never converges.
    let frob_sq: T = a.iter().map(|&x| x * x).sum();
    let negligible = frob_sq * eps * eps;

    let sq_norm = |c: &[T]| c.iter().fold(T::zero(), |acc, &x| acc + x * x);
    let mut norms: Vec<T> = Vec::with_capacity(n);
    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        // Norms are updated incrementally within a sweep and refreshed here
        // so rounding drift cannot build up.
        norms.clear();
        norms.extend(cols.iter().map(|c| sq_norm(c)));
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = cols[p].iter().zip(&cols[q]).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let two = T::one() + T::one();
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut sv: Vec<(T, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|&x| x * x).sum::<T>().sqrt(), j))
        .collect();
    // Stable sort keeps ties in column order, so the result is deterministic.
    sv.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite singular values"));

    let smax = sv.first().map_or(T::zero(), |x| x.0);
    let tiny = smax * eps * T::from_usize_lossy(m.max(n));
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (rank, &(sigma, j)) in sv.iter().enumerate() {
        if sigma > tiny && sigma > T::min_positive_value() {
            u_cols.push(cols[j].iter().map(|&x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(vec![T::zero(); m]);
            s.push(T::zero());
            deficient.push(rank);
        }
        v_cols.push(v[j].clone());
    }
    for &slot in &deficient {
        let fill = orthogonal_complement_vector(&u_cols, slot, m);
        u_cols[slot] = fill;
    }

    let u = Tensor::from_fn(&[m, n], |idx| u_cols[idx % n][idx / n]);
    let vm = Tensor::from_fn(&[n, n], |idx| v_cols[idx % n][idx / n]);
    Ok((u, Tensor::from_vec(s), vm))
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Unit vector orthogonal to every nonzero column except `skip`: the
/// standard basis vector with the largest residual after two rounds of
/// Gram-Schmidt.
fn orthogonal_complement_vector<T: Scalar>(cols: &[Vec<T>], skip: usize, m: usize) -> Vec<T> {
    let mut best: Option<(T, Vec<T>)> = None;
    for e in 0..m {
        let mut x = vec![T::zero(); m];
        x[e] = T::one();
        for _ in 0..2 {
            for (j, c) in cols.iter().enumerate() {
                if j == skip || c.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let proj: T = c.iter().zip(&x).map(|(&a, &b)| a * b).sum();
                for (xi, &ci) in x.iter_mut().zip(c) {
                    *xi -= proj * ci;
                }
            }
        }
        let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, x));
        }
    }
    let (norm, x) = best.expect("m >= 1");
    x.into_iter().map(|v| v / norm).collect()
}
