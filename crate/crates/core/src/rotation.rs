//! Bi-rotation alternating optimization.
//!
//! A flat weight `w` of length `n1 * n2` is viewed as the row-major matrix
//! `W` (`n1 x n2`). The rotation `R = R1 ⊗ R2` acts as
//! `Rᵀw = vec(R1ᵀ W R2)` with row-major `vec`, which is the same vector as the
//! column-major `vec(R2ᵀ Wᵀ R1)`. The optimizer maximizes
//! `tr(B R2ᵀ Wᵀ R1) = <B, R1ᵀ W R2>` over `B ∈ {±1}`, orthogonal `R1`, `R2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::svd::{householder_qr, svd};
use crate::tensor::{matmul_t, Tensor};

/// Default number of alternating passes per rotation solve.
pub const DEFAULT_ROTATION_ITERS: usize = 3;

/// Row-major correspondence between a flat weight and an `n1 x n2` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matricization {
    pub n1: usize,
    pub n2: usize,
}

impl Matricization {
    pub fn new(n1: usize, n2: usize) -> Self {
        Self { n1, n2 }
    }

    /// `n1 = shape[0]` (output channels / features), `n2` = the rest.
    pub fn for_weight_shape(shape: &[usize]) -> Result<Self> {
        match shape {
            [] => Err(Error::dim("cannot matricize a scalar shape")),
            [n] => Ok(Self::new(1, *n)),
            [first, rest @ ..] => Ok(Self::new(*first, rest.iter().product())),
        }
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matricize<T: Scalar>(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        if w.len() != self.len() {
            return Err(Error::dim(format!(
                "cannot view {} elements as {}x{}",
                w.len(),
                self.n1,
                self.n2
            )));
        }
        Tensor::new(vec![self.n1, self.n2], w.data().to_vec())
    }

    pub fn vectorize<T: Scalar>(&self, m: &Tensor<T>) -> Tensor<T> {
        m.flatten()
    }
}

/// Orthogonal factors of a Kronecker rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RotationPair<T = f64> {
    pub r1: Tensor<T>,
    pub r2: Tensor<T>,
}

impl<T: Scalar> RotationPair<T> {
    pub fn identity(shape: Matricization) -> Self {
        Self {
            r1: Tensor::eye(shape.n1),
            r2: Tensor::eye(shape.n2),
        }
    }

    pub fn n1(&self) -> usize {
        self.r1.rows()
    }

    pub fn n2(&self) -> usize {
        self.r2.rows()
    }

    pub fn shape(&self) -> Matricization {
        Matricization::new(self.n1(), self.n2())
    }

    /// Number of scalars stored in `R1` and `R2`.
    pub fn param_count(&self) -> usize {
        self.r1.len() + self.r2.len()
    }

    /// Largest entry of `|RᵢᵀRᵢ - I|` over both factors.
    pub fn orthogonality_error(&self) -> T {
        let err = |r: &Tensor<T>| {
            matmul_t(r, true, r, false)
                .expect("square")
                .sub(&Tensor::eye(r.rows()))
                .expect("square")
                .max_abs()
        };
        err(&self.r1).max(err(&self.r2))
    }

    fn check(&self, wbar: &Tensor<T>) -> Result<()> {
        if wbar.shape() != [self.n1(), self.n2()] {
            return Err(Error::dim(format!(
                "rotation {}x{} does not fit matrix {:?}",
                self.n1(),
                self.n2(),
                wbar.shape()
            )));
        }
        Ok(())
    }

    /// `R1ᵀ W R2`.
    pub fn rotate(&self, wbar: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(wbar)?;
        matmul_t(&matmul_t(&self.r1, true, wbar, false)?, false, &self.r2, false)
    }

    /// `R1 G R2ᵀ`, the adjoint of [`rotate`](Self::rotate).
    pub fn rotate_back(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(g)?;
        matmul_t(&self.r1.matmul(g)?, false, &self.r2, true)
    }

    /// `Rᵀw` for a flat weight of any shape; the result keeps `w`'s shape.
    pub fn rotate_flat(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.shape().matricize(w)?;
        self.rotate(&m)?.into_reshape(w.shape())
    }

    /// `R g` for a flat vector of any shape.
    pub fn rotate_back_flat(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.shape().matricize(g)?;
        self.rotate_back(&m)?.into_reshape(g.shape())
    }
}

/// `sign(R1ᵀ W R2)`: the optimal binary matrix for fixed rotations.
pub fn binary_target<T: Scalar>(wbar: &Tensor<T>, rot: &RotationPair<T>) -> Result<Tensor<T>> {
    Ok(rot.rotate(wbar)?.sign())
}

/// `tr(B R2ᵀ Wᵀ R1)`.
pub fn trace_objective<T: Scalar>(wbar: &Tensor<T>, wb: &Tensor<T>, rot: &RotationPair<T>) -> Result<T> {
    let rotated = rot.rotate(wbar)?;
    rotated.dot(wb)
}

/// Procrustes step for `R1`: with `B R2ᵀ Wᵀ = U S Vᵀ`, returns `V Uᵀ`.
pub fn update_r1<T: Scalar>(wbar: &Tensor<T>, wb: &Tensor<T>, rot: &RotationPair<T>) -> Result<Tensor<T>> {
    rot.check(wbar)?;
    wb.same_shape(wbar)?;
    // (B R2ᵀ) Wᵀ
    let c = matmul_t(&matmul_t(wb, false, &rot.r2, true)?, false, wbar, true)?;
    let f = svd(&c)?;
    matmul_t(&f.vt, true, &f.u, true)
}

/// Procrustes step for `R2`: with `Wᵀ R1 B = U S Vᵀ`, returns `U Vᵀ`.
///
/// When `n1 < n2` the product has rank at most `n1`; it is factored through
/// QR so only an `n1 x n1` core is decomposed, and the rotation acts as the
/// identity map between the two null-space complements.
pub fn update_r2<T: Scalar>(wbar: &Tensor<T>, wb: &Tensor<T>, rot: &RotationPair<T>) -> Result<Tensor<T>> {
    rot.check(wbar)?;
    wb.same_shape(wbar)?;
    let (n1, n2) = (rot.n1(), rot.n2());
    let x = matmul_t(wbar, true, &rot.r1, false)?;
    if n1 >= n2 {
        let f = svd(&x.matmul(wb)?)?;
        return f.u.matmul(&f.vt);
    }
    // Wᵀ R1 B = Qx [Rx; 0] [Ryᵀ 0] Qyᵀ
    let (qx, rx) = householder_qr(&x)?;
    let (qy, ry) = householder_qr(&wb.transpose()?)?;
    let f = svd(&matmul_t(&rx, false, &ry, true)?)?;
    let core = f.u.matmul(&f.vt)?;
    let block = Tensor::from_fn(&[n2, n2], |idx| {
        let (i, j) = (idx / n2, idx % n2);
        match (i < n1, j < n1) {
            (true, true) => core.at(i, j),
            (false, false) if i == j => T::one(),
            _ => T::zero(),
        }
    });
    matmul_t(&qx.matmul(&block)?, false, &qy, true)
}

/// Which closed-form update produced a trace value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationStep {
    BinaryTarget,
    R1,
    R2,
}

/// Outcome of [`optimize_rotation`].
#[derive(Clone, Debug)]
pub struct RotationSolve<T = f64> {
    pub rot: RotationPair<T>,
    pub wb: Tensor<T>,
    /// Objective after every sub-step, in execution order.
    pub trace: Vec<(RotationStep, T)>,
}

/// Runs `n_iters` passes of binary target, `R1` update, `R2` update.
///
/// An all-zero matrix leaves the rotations untouched.
pub fn optimize_rotation<T: Scalar>(
    wbar: &Tensor<T>,
    rot: &RotationPair<T>,
    n_iters: usize,
) -> Result<RotationSolve<T>> {
    rot.check(wbar)?;
    if n_iters == 0 {
        return Err(Error::Domain("rotation solve needs at least one iteration".into()));
    }
    let mut rot = rot.clone();
    if wbar.data().iter().all(|&x| x == T::zero()) {
        let wb = binary_target(wbar, &rot)?;
        return Ok(RotationSolve {
            rot,
            wb,
            trace: Vec::new(),
        });
    }
    let mut trace = Vec::with_capacity(3 * n_iters);
    let mut wb = binary_target(wbar, &rot)?;
    for it in 0..n_iters {
        if it > 0 {
            wb = binary_target(wbar, &rot)?;
        }
        trace.push((RotationStep::BinaryTarget, trace_objective(wbar, &wb, &rot)?));
        rot.r1 = update_r1(wbar, &wb, &rot)?;
        trace.push((RotationStep::R1, trace_objective(wbar, &wb, &rot)?));
        rot.r2 = update_r2(wbar, &wb, &rot)?;
        trace.push((RotationStep::R2, trace_objective(wbar, &wb, &rot)?));
    }
    let wb = binary_target(wbar, &rot)?;
    Ok(RotationSolve { rot, wb, trace })
}

/// Cosine between `Rᵀw` and its sign vector.
pub fn cos_phi<T: Scalar>(w: &Tensor<T>, rot: &RotationPair<T>) -> Result<T> {
    let norm = w.norm_l2();
    if norm <= T::zero() {
        return Err(Error::Domain("cos_phi of a zero-norm weight".into()));
    }
    let rotated = rot.rotate_flat(w)?;
    let n = T::from_usize_lossy(w.len());
    // sign(x) * x == |x| under sign(0) = +1
    Ok(rotated.norm_l1() / (n.sqrt() * norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Tensor = crate::tensor::Tensor<f64>;
    type RotationPair = super::RotationPair<f64>;

    fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let a = Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0));
        let f = svd(&a).unwrap();
        f.u.matmul(&f.vt).unwrap()
    }

    #[test]
    fn matricize_row_major() {
        let m = Matricization::new(2, 2);
        let w = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let wbar = m.matricize(&w).unwrap();
        assert_eq!(wbar, Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        assert_eq!(m.vectorize(&wbar), w);
        let row = Matricization::new(1, 3).matricize(&Tensor::from_vec(vec![5.0, 6.0, 7.0])).unwrap();
        assert_eq!(row.data(), &[5.0, 6.0, 7.0]);
        assert!(m.matricize(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn weight_shape_split() {
        assert_eq!(Matricization::for_weight_shape(&[16, 3, 3, 3]).unwrap(), Matricization::new(16, 27));
        assert_eq!(Matricization::for_weight_shape(&[10, 64]).unwrap(), Matricization::new(10, 64));
    }

    #[test]
    fn kronecker_identity() {
        // Rᵀw computed through an explicit Kronecker product.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n1, n2) = (3, 4);
        let rot = RotationPair {
            r1: random_orthogonal(&mut rng, n1),
            r2: random_orthogonal(&mut rng, n2),
        };
        let w = Tensor::from_fn(&[n1 * n2], |_| rng.random_range(-1.0..1.0));
        let n = n1 * n2;
        let kron = Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            rot.r1.at(i / n2, j / n2) * rot.r2.at(i % n2, j % n2)
        });
        let want = matmul_t(&kron, true, &w.reshape(&[n, 1]).unwrap(), false).unwrap();
        let got = rot.rotate_flat(&w).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // adjoint
        let g = Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0));
        let lhs = rot.rotate_flat(&w).unwrap().dot(&g).unwrap();
        let rhs = w.dot(&rot.rotate_back_flat(&g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn binary_target_examples() {
        let id = RotationPair::identity(Matricization::new(1, 2));
        let wbar = Tensor::from_rows(&[&[2.0, -3.0]]).unwrap();
        assert_eq!(binary_target(&wbar, &id).unwrap().data(), &[1.0, -1.0]);
        let id1 = RotationPair::identity(Matricization::new(1, 1));
        let s = Tensor::from_rows(&[&[-2.0]]).unwrap();
        assert_eq!(binary_target(&s, &id1).unwrap().data(), &[-1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rot = RotationPair {
            r1: random_orthogonal(&mut rng, 3),
            r2: random_orthogonal(&mut rng, 4),
        };
        let wbar = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        // independent route: explicit element sums
        let got = binary_target(&wbar, &rot).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut v = 0.0;
                for a in 0..3 {
                    for b in 0..4 {
                        v += rot.r1.at(a, i) * wbar.at(a, b) * rot.r2.at(b, j);
                    }
                }
                assert_eq!(got.at(i, j), if v >= 0.0 { 1.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn scalar_updates() {
        let id = RotationPair::identity(Matricization::new(1, 1));
        let w = Tensor::from_rows(&[&[2.0]]).unwrap();
        let wb = binary_target(&w, &id).unwrap();
        assert_eq!(update_r1(&w, &wb, &id).unwrap().data(), &[1.0]);
        assert_eq!(update_r2(&w, &wb, &id).unwrap().data(), &[1.0]);
    }

    #[test]
    fn fixed_point_when_sign_aligned() {
        let wbar = Tensor::from_rows(&[&[0.5, -0.5, 0.5], &[-0.5, -0.5, 0.5]]).unwrap();
        let id = RotationPair::identity(Matricization::new(2, 3));
        let wb = binary_target(&wbar, &id).unwrap();
        let before = trace_objective(&wbar, &wb, &id).unwrap();
        let r1 = update_r1(&wbar, &wb, &id).unwrap();
        let after1 = trace_objective(&wbar, &wb, &RotationPair { r1: r1.clone(), r2: id.r2.clone() }).unwrap();
        assert!((after1 - before).abs() < 1e-10);
        let r2 = update_r2(&wbar, &wb, &id).unwrap();
        let after2 = trace_objective(&wbar, &wb, &RotationPair { r1: id.r1.clone(), r2 }).unwrap();
        assert!((after2 - before).abs() < 1e-10);
    }

    #[test]
    fn random_updates_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let wbar = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
            let rot = RotationPair {
                r1: random_orthogonal(&mut rng, 3),
                r2: random_orthogonal(&mut rng, 3),
            };
            let wb = binary_target(&wbar, &rot).unwrap();
            let before = trace_objective(&wbar, &wb, &rot).unwrap();
            let mut next = rot.clone();
            next.r1 = update_r1(&wbar, &wb, &rot).unwrap();
            let mid = trace_objective(&wbar, &wb, &next).unwrap();
            assert!(mid >= before - 1e-10);
            next.r2 = update_r2(&wbar, &wb, &next).unwrap();
            assert!(trace_objective(&wbar, &wb, &next).unwrap() >= mid - 1e-10);
            assert!(next.orthogonality_error() < 1e-8);
        }
    }

    #[test]
    fn wide_r2_update_reaches_nuclear_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (n1, n2) in [(2, 5), (3, 12), (4, 9)] {
            let wbar = Tensor::from_fn(&[n1, n2], |_| rng.random_range(-1.0..1.0));
            let rot = RotationPair {
                r1: random_orthogonal(&mut rng, n1),
                r2: random_orthogonal(&mut rng, n2),
            };
            let wb = binary_target(&wbar, &rot).unwrap();
            let r2 = update_r2(&wbar, &wb, &rot).unwrap();
            let next = RotationPair { r1: rot.r1.clone(), r2 };
            assert!(next.orthogonality_error() < 1e-10);
            // the optimum of tr(R2ᵀ D) is the sum of D's singular values
            let d = matmul_t(&matmul_t(&wbar, true, &rot.r1, false).unwrap(), false, &wb, false).unwrap();
            let nuclear: f64 = svd(&d).unwrap().s.data().iter().sum();
            let got = trace_objective(&wbar, &wb, &next).unwrap();
            assert!((got - nuclear).abs() < 1e-9 * nuclear.max(1.0), "{got} vs {nuclear}");
        }
    }

    #[test]
    fn optimize_examples() {
        let wbar = Tensor::full(&[2, 3], 0.7);
        let s = optimize_rotation(&wbar, &RotationPair::identity(Matricization::new(2, 3)), 1).unwrap();
        let c = cos_phi(&wbar.flatten(), &s.rot).unwrap();
        assert!((c - 1.0).abs() < 1e-12);

        let w = Tensor::from_rows(&[&[-2.0]]).unwrap();
        let s = optimize_rotation(&w, &RotationPair::identity(Matricization::new(1, 1)), 3).unwrap();
        assert_eq!(trace_objective(&w, &s.wb, &s.rot).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wbar = Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0));
        let id = RotationPair::identity(Matricization::new(4, 6));
        let s = optimize_rotation(&wbar, &id, 3).unwrap();
        let w = wbar.flatten();
        assert!(cos_phi(&w, &s.rot).unwrap() >= cos_phi(&w, &id).unwrap() - 1e-10);
        for pair in s.trace.windows(2) {
            assert!(pair[1].1 >= pair[0].1 - 1e-10);
        }
    }

    #[test]
    fn zero_matrix_is_skipped() {
        let id = RotationPair::identity(Matricization::new(2, 2));
        let s = optimize_rotation(&Tensor::zeros(&[2, 2]), &id, 3).unwrap();
        assert_eq!(s.rot, id);
        assert!(s.trace.is_empty());
    }

    #[test]
    fn cos_phi_examples() {
        let id = RotationPair::identity(Matricization::new(1, 2));
        let c = cos_phi(&Tensor::from_vec(vec![0.3, 0.3]), &id).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        let c = cos_phi(&Tensor::from_vec(vec![3.0, 4.0]), &id).unwrap();
        assert!((c - 7.0 / (2f64.sqrt() * 5.0)).abs() < 1e-15);
        assert!((c - 0.98995).abs() < 1e-5);
        let scaled = cos_phi(&Tensor::from_vec(vec![30.0, 40.0]), &id).unwrap();
        assert!((scaled - c).abs() < 1e-15);
        assert!(cos_phi(&Tensor::from_vec(vec![0.0, 0.0]), &id).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn solver_never_loses_ground(
            (n1, n2, d) in (1usize..7, 1usize..7).prop_flat_map(|(a, b)| (Just(a), Just(b), proptest::collection::vec(-3.0f64..3.0, a * b)))
        ) {
            let wbar = crate::tensor::Tensor::new(vec![n1, n2], d).unwrap();
            let id = RotationPair::<f64>::identity(Matricization::new(n1, n2));
            let s = optimize_rotation(&wbar, &id, 2).unwrap();
            prop_assert!(s.rot.orthogonality_error() <= 1e-9);
            prop_assert!(s.wb.data().iter().all(|v| v.abs() == 1.0));
            for p in s.trace.windows(2) {
                prop_assert!(p[1].1 >= p[0].1 - 1e-10);
            }
        }
    }
}
