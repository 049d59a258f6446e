//! Training-aware sign surrogate, weight fusion, the adjustable rotated
//! weight, and their hand-derived gradients.
//!
//! For a binarized layer with real weights `w_l` the forward chain is
//!
//! ```text
//! w  = λ w_l + (1 - λ) w_server                          λ = sigmoid(ω)
//! w~ = w + αβ (Rᵀw - w) + α(1 - β)(w_server - w)         α = |sin θ|, β = |sin γ|
//! w_eff = F(w~)
//! ```
//!
//! with `R` held fixed while gradients flow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::RotationPair;
use crate::scalar::Scalar;
use crate::tensor::{sign_scalar, Tensor};

pub const T_MIN: f64 = -2.0;
pub const T_MAX: f64 = 1.0;

/// Log-linear schedule for the surrogate's sharpness `t` and gain `k`,
/// indexed by the flattened (round, local epoch) position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub n_rounds: usize,
    pub n_local_epochs: usize,
}

impl SurrogateSchedule {
    pub fn new(n_rounds: usize, n_local_epochs: usize) -> Self {
        Self {
            t_min: T_MIN,
            t_max: T_MAX,
            n_rounds,
            n_local_epochs,
        }
    }

    pub fn tk(&self, round: usize, epoch: usize) -> Result<(f64, f64)> {
        schedule_tk(self, round, epoch)
    }
}

/// `t = 10^(t_min + (r N_e + e) / (N_r N_e) (t_max - t_min))`, `k = max(1/t, 1)`.
pub fn schedule_tk(sched: &SurrogateSchedule, round: usize, epoch: usize) -> Result<(f64, f64)> {
    if round >= sched.n_rounds || epoch >= sched.n_local_epochs {
        return Err(Error::Domain(format!(
            "schedule index (round {round}, epoch {epoch}) outside {}x{}",
            sched.n_rounds, sched.n_local_epochs
        )));
    }
    let total = (sched.n_rounds * sched.n_local_epochs) as f64;
    let frac = (round * sched.n_local_epochs + epoch) as f64 / total;
    let t = 10f64.powf(sched.t_min + frac * (sched.t_max - sched.t_min));
    Ok((t, (1.0 / t).max(1.0)))
}

/// Per-layer trainable mixing scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixParams {
    /// Fusion logit; `λ = sigmoid(ω)`.
    pub omega: f64,
    /// `α = |sin θ|`.
    pub theta: f64,
    /// `β = |sin γ|`.
    pub gamma: f64,
}

impl Default for MixParams {
    fn default() -> Self {
        Self {
            omega: 0.0,
            theta: 0.1,
            gamma: 0.1,
        }
    }
}

impl MixParams {
    pub fn lambda(&self) -> f64 {
        sigmoid(self.omega)
    }

    pub fn alpha(&self) -> f64 {
        self.theta.sin().abs()
    }

    pub fn beta(&self) -> f64 {
        self.gamma.sin().abs()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `d|sin x|/dx` with the `sign(0) = +1` convention.
pub fn abs_sin_derivative(x: f64) -> f64 {
    sign_scalar(x.sin()) * x.cos()
}

/// `λ w_client + (1 - λ) w_server`, `λ = sigmoid(ω)`.
pub fn fuse_weights<T: Scalar>(w_client: &Tensor<T>, w_server: &Tensor<T>, omega: f64) -> Result<Tensor<T>> {
    let lambda = T::from_f64_lossy(sigmoid(omega));
    w_client.zip_map(w_server, |c, s| lambda * c + (T::one() - lambda) * s)
}

/// `w + αβ(w_rot - w) + α(1-β)(w_server - w)`.
pub fn adjust_rotated<T: Scalar>(
    w: &Tensor<T>,
    w_rot: &Tensor<T>,
    w_server: &Tensor<T>,
    theta: f64,
    gamma: f64,
) -> Result<Tensor<T>> {
    let alpha = theta.sin().abs();
    let beta = gamma.sin().abs();
    adjust_with_coefficients(w, w_rot, w_server, alpha, beta)
}

/// [`adjust_rotated`] with `α`, `β` given directly.
pub fn adjust_with_coefficients<T: Scalar>(
    w: &Tensor<T>,
    w_rot: &Tensor<T>,
    w_server: &Tensor<T>,
    alpha: f64,
    beta: f64,
) -> Result<Tensor<T>> {
    w.same_shape(w_rot)?;
    w.same_shape(w_server)?;
    let ab = T::from_f64_lossy(alpha * beta);
    let a1b = T::from_f64_lossy(alpha * (1.0 - beta));
    let data = w
        .data()
        .iter()
        .zip(w_rot.data())
        .zip(w_server.data())
        .map(|((&x, &r), &s)| x + ab * (r - x) + a1b * (s - x))
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

#[inline]
pub fn surrogate_scalar<T: Scalar>(x: T, t: T, k: T) -> T {
    let sqrt2 = T::SQRT_2();
    if x.abs() < sqrt2 / t {
        let half = T::from_f64_lossy(0.5);
        k * (-sign_scalar(x) * t * t * x * x * half + sqrt2 * t * x)
    } else {
        k * sign_scalar(x)
    }
}

#[inline]
pub fn surrogate_derivative_scalar<T: Scalar>(x: T, t: T, k: T) -> T {
    (k * (T::SQRT_2() * t - (t * t * x).abs())).max(T::zero())
}

/// Elementwise `F(x)`.
pub fn surrogate_forward<T: Scalar>(x: &Tensor<T>, t: f64, k: f64) -> Tensor<T> {
    let (t, k) = (T::from_f64_lossy(t), T::from_f64_lossy(k));
    x.map(|v| surrogate_scalar(v, t, k))
}

/// Elementwise `F'(x) = max(k (√2 t - |t² x|), 0)`.
pub fn surrogate_backward<T: Scalar>(x: &Tensor<T>, t: f64, k: f64) -> Tensor<T> {
    let (t, k) = (T::from_f64_lossy(t), T::from_f64_lossy(k));
    x.map(|v| surrogate_derivative_scalar(v, t, k))
}

/// Straight-through estimator: passes the cotangent where `|x| <= 1`.
pub fn ste_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| if v.abs() <= T::one() { g } else { T::zero() })
}

/// `[(1-α) I + αβ Rᵀ]ᵀ g = (1-α) g + αβ R g`, computed through the
/// matricized factors.
pub fn grad_mixed_weight<T: Scalar>(
    grad_wtilde: &Tensor<T>,
    rot: &RotationPair<T>,
    theta: f64,
    gamma: f64,
) -> Result<Tensor<T>> {
    let alpha = theta.sin().abs();
    let beta = gamma.sin().abs();
    let direct = T::from_f64_lossy(1.0 - alpha);
    let ab = T::from_f64_lossy(alpha * beta);
    if ab == T::zero() {
        return Ok(grad_wtilde.scale(direct));
    }
    let back = rot.rotate_back_flat(grad_wtilde)?;
    grad_wtilde.zip_map(&back, |g, r| direct * g + ab * r)
}

/// Gradients with respect to `θ` and `γ`.
///
/// `σ_α = <g, β(w_rot - w_server) + (w_server - w)>`,
/// `σ_β = <g, α(w_rot - w_server)>`, chained through `d|sin|`.
pub fn grad_alpha_beta<T: Scalar>(
    grad_wtilde: &Tensor<T>,
    w: &Tensor<T>,
    w_rot: &Tensor<T>,
    w_server: &Tensor<T>,
    theta: f64,
    gamma: f64,
) -> Result<(f64, f64)> {
    grad_wtilde.same_shape(w)?;
    w.same_shape(w_rot)?;
    w.same_shape(w_server)?;
    let alpha = theta.sin().abs();
    let beta = gamma.sin().abs();
    let b = T::from_f64_lossy(beta);
    let mut sigma_alpha = T::zero();
    let mut rot_minus_server = T::zero();
    for (((&g, &x), &r), &s) in grad_wtilde
        .data()
        .iter()
        .zip(w.data())
        .zip(w_rot.data())
        .zip(w_server.data())
    {
        sigma_alpha += g * (b * (r - s) + (s - x));
        rot_minus_server += g * (r - s);
    }
    let sigma_alpha = sigma_alpha.to_f64_lossy();
    let sigma_beta = alpha * rot_minus_server.to_f64_lossy();
    Ok((
        sigma_alpha * abs_sin_derivative(theta),
        sigma_beta * abs_sin_derivative(gamma),
    ))
}

/// Gradient with respect to the fusion logit `ω`: `<Jᵀg, w_client - w_server> λ(1-λ)`.
pub fn grad_omega<T: Scalar>(
    grad_wtilde: &Tensor<T>,
    rot: &RotationPair<T>,
    theta: f64,
    gamma: f64,
    w_client: &Tensor<T>,
    w_server: &Tensor<T>,
    omega: f64,
) -> Result<f64> {
    let gw = grad_mixed_weight(grad_wtilde, rot, theta, gamma)?;
    let lambda = sigmoid(omega);
    let diff = w_client.sub(w_server)?;
    Ok(gw.dot(&diff)?.to_f64_lossy() * lambda * (1.0 - lambda))
}

/// Forward intermediates of one binarized weight tensor.
#[derive(Clone, Debug)]
pub struct BinarizedWeight<T = f64> {
    pub fused: Tensor<T>,
    pub rotated: Tensor<T>,
    pub mixed: Tensor<T>,
    pub effective: Tensor<T>,
}

/// How the mixed weight `w~` is turned into the weight the layer uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightQuantizer {
    /// `F(w~)` with the given `(t, k)`.
    Surrogate { t: f64, k: f64 },
    /// `sign(w~)` with a straight-through gradient.
    Sign,
}

/// Computes fused, rotated, mixed and effective weights.
pub fn binarized_weight_forward<T: Scalar>(
    w_client: &Tensor<T>,
    w_server: &Tensor<T>,
    rot: &RotationPair<T>,
    mix: &MixParams,
    lambda_one: bool,
    quantizer: WeightQuantizer,
) -> Result<BinarizedWeight<T>> {
    let fused = if lambda_one {
        w_client.clone()
    } else {
        fuse_weights(w_client, w_server, mix.omega)?
    };
    let rotated = rot.rotate_flat(&fused)?;
    let mixed = adjust_rotated(&fused, &rotated, w_server, mix.theta, mix.gamma)?;
    let effective = match quantizer {
        WeightQuantizer::Surrogate { t, k } => surrogate_forward(&mixed, t, k),
        WeightQuantizer::Sign => mixed.sign(),
    };
    Ok(BinarizedWeight {
        fused,
        rotated,
        mixed,
        effective,
    })
}

/// Gradients of one binarized weight tensor's trainable inputs.
#[derive(Clone, Debug)]
pub struct WeightGrads<T = f64> {
    pub w: Tensor<T>,
    pub omega: f64,
    pub theta: f64,
    pub gamma: f64,
}

/// Backpropagates `dL/dw_eff` to `w_client`, `ω`, `θ`, `γ`.
#[allow(clippy::too_many_arguments)]
pub fn binarized_weight_backward<T: Scalar>(
    cache: &BinarizedWeight<T>,
    grad_effective: &Tensor<T>,
    w_client: &Tensor<T>,
    w_server: &Tensor<T>,
    rot: &RotationPair<T>,
    mix: &MixParams,
    lambda_one: bool,
    quantizer: WeightQuantizer,
) -> Result<WeightGrads<T>> {
    let grad_mixed = match quantizer {
        WeightQuantizer::Surrogate { t, k } => {
            grad_effective.mul(&surrogate_backward(&cache.mixed, t, k))?
        }
        WeightQuantizer::Sign => ste_backward(&cache.mixed, grad_effective)?,
    };
    let grad_fused = grad_mixed_weight(&grad_mixed, rot, mix.theta, mix.gamma)?;
    let (theta, gamma) = grad_alpha_beta(
        &grad_mixed,
        &cache.fused,
        &cache.rotated,
        w_server,
        mix.theta,
        mix.gamma,
    )?;
    let (w, omega) = if lambda_one {
        (grad_fused, 0.0)
    } else {
        let lambda = mix.lambda();
        let omega = grad_fused.dot(&w_client.sub(w_server)?)?.to_f64_lossy() * lambda * (1.0 - lambda);
        (grad_fused.scale(T::from_f64_lossy(lambda)), omega)
    };
    Ok(WeightGrads {
        w,
        omega,
        theta,
        gamma,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn schedule() -> impl Strategy<Value = (f64, f64)> {
        (-2.0f64..1.0).prop_map(|e| {
            let t = 10f64.powf(e);
            (t, (1.0 / t).max(1.0))
        })
    }

    proptest! {
        #[test]
        fn odd_monotone_and_bounded(x in -50.0f64..50.0, dx in 0.0f64..5.0, (t, k) in schedule()) {
            let f = |v: f64| surrogate_scalar(v, t, k);
            prop_assert_eq!(f(-x), -f(x));
            prop_assert!(f(x + dx) >= f(x));
            prop_assert!(f(x).abs() <= k);
        }

        #[test]
        fn derivative_matches_slope(x in -30.0f64..30.0, (t, k) in schedule()) {
            let b = std::f64::consts::SQRT_2 / t;
            prop_assume!(x.abs() > 1e-4 && (x.abs() - b).abs() > 1e-4);
            let h = 1e-7 * b;
            let fd = (surrogate_scalar(x + h, t, k) - surrogate_scalar(x - h, t, k)) / (2.0 * h);
            let d = surrogate_derivative_scalar(x, t, k);
            prop_assert!((fd - d).abs() <= 1e-5 * d.abs().max(k * t), "x={} fd={} d={}", x, fd, d);
        }
    }
}
