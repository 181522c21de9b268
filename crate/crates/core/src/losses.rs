//! Loss models `l(f(x, theta), y)` with gradients and declared regularity constants.

use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::math::{self, INV_SQRT_2PI, SQRT_2PI};
use crate::types::{AugmentedExample, ConfidenceLevel, Example, LossConstants};

/// Contract for a pluggable loss.
///
/// `grad_theta_into` must be the exact gradient of `value` wherever the loss
/// is differentiable. Implementations hold no mutable state.
pub trait LossModel {
    fn value(&self, theta: &[f64], e: &Example) -> Result<f64>;

    /// Writes the gradient with respect to `theta` into `out` (length `m`).
    fn grad_theta_into(&self, theta: &[f64], e: &Example, out: &mut [f64]) -> Result<()>;

    fn constants(&self) -> LossConstants;

    fn grad_theta(&self, theta: &[f64], e: &Example) -> Result<Vec<f64>> {
        let mut g = alloc::vec![0.0; theta.len()];
        self.grad_theta_into(theta, e, &mut g)?;
        Ok(g)
    }

    /// Value and gradient in one pass.
    fn value_and_grad(&self, theta: &[f64], e: &Example, out: &mut [f64]) -> Result<f64> {
        self.grad_theta_into(theta, e, out)?;
        self.value(theta, e)
    }

    /// Closed-form minimizer of `sum_i w_i l(theta; e_i)`, if the model has one.
    fn weighted_minimizer(&self, _examples: &[&Example], _weights: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

impl<L: LossModel + ?Sized> LossModel for &L {
    fn value(&self, theta: &[f64], e: &Example) -> Result<f64> {
        (**self).value(theta, e)
    }
    fn grad_theta_into(&self, theta: &[f64], e: &Example, out: &mut [f64]) -> Result<()> {
        (**self).grad_theta_into(theta, e, out)
    }
    fn constants(&self) -> LossConstants {
        (**self).constants()
    }
    fn value_and_grad(&self, theta: &[f64], e: &Example, out: &mut [f64]) -> Result<f64> {
        (**self).value_and_grad(theta, e, out)
    }
    fn weighted_minimizer(&self, examples: &[&Example], weights: &[f64]) -> Option<Result<Vec<f64>>> {
        (**self).weighted_minimizer(examples, weights)
    }
}

/// Ridge loss `(y - <theta, x>)^2 + lambda |theta|^2` for the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeLoss {
    lambda: f64,
    input_second_moment: f64,
    g_lip: f64,
}

impl RidgeLoss {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Validation(alloc::format!(
                "ridge lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            input_second_moment: 0.0,
            g_lip: 0.0,
        })
    }

    /// Declares `E|x|^2` of the input distribution; sets `L = 2 E|x|^2 + 2 lambda`.
    pub fn with_input_second_moment(mut self, m2: f64) -> Result<Self> {
        if !(m2.is_finite() && m2 >= 0.0) {
            return Err(Error::Validation(alloc::format!(
                "input second moment must be finite and nonnegative, got {m2}"
            )));
        }
        self.input_second_moment = m2;
        Ok(self)
    }

    /// Declares the Lipschitz constant reported by [`LossModel::constants`].
    pub fn with_lipschitz(mut self, g: f64) -> Self {
        self.g_lip = g;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Gradient-norm bound over `|theta| <= theta_radius`, `|x| <= x_norm_max`, `|y| <= y_abs_max`.
    ///
    /// The quadratic has no global Lipschitz constant, so this is only valid on that box.
    pub fn lipschitz_over_box(&self, theta_radius: f64, x_norm_max: f64, y_abs_max: f64) -> f64 {
        2.0 * (theta_radius * x_norm_max + y_abs_max) * x_norm_max + 2.0 * self.lambda * theta_radius
    }

    #[inline]
    fn residual(theta: &[f64], e: &Example) -> Result<f64> {
        check_dim(theta.len(), e.x.len())?;
        Ok(math::dot(theta, &e.x) - e.y)
    }
}

impl LossModel for RidgeLoss {
    fn value(&self, theta: &[f64], e: &Example) -> Result<f64> {
        let r = Self::residual(theta, e)?;
        Ok(r * r + self.lambda * math::sq_norm(theta))
    }

    fn grad_theta_into(&self, theta: &[f64], e: &Example, out: &mut [f64]) -> Result<()> {
        check_dim(theta.len(), out.len())?;
        let r = Self::residual(theta, e)?;
        for ((g, &x), &th) in out.iter_mut().zip(&e.x).zip(theta) {
            *g = 2.0 * r * x + 2.0 * self.lambda * th;
        }
        Ok(())
    }

    fn value_and_grad(&self, theta: &[f64], e: &Example, out: &mut [f64]) -> Result<f64> {
        check_dim(theta.len(), out.len())?;
        let r = Self::residual(theta, e)?;
        let mut th2 = 0.0;
        for ((g, &x), &th) in out.iter_mut().zip(&e.x).zip(theta) {
            *g = 2.0 * r * x + 2.0 * self.lambda * th;
            th2 += th * th;
        }
        Ok(r * r + self.lambda * th2)
    }

    fn constants(&self) -> LossConstants {
        LossConstants {
            mu: 2.0 * self.lambda,
            l_smooth: 2.0 * self.input_second_moment + 2.0 * self.lambda,
            g_lip: self.g_lip,
            l_floor: 0.0,
        }
    }

    /// Weighted normal equations `(sum w x x^T + lambda sum w I) theta = sum w y x`.
    fn weighted_minimizer(&self, examples: &[&Example], weights: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(ridge_weighted_solve(self.lambda, examples, weights))
    }
}

fn ridge_weighted_solve(lambda: f64, examples: &[&Example], weights: &[f64]) -> Result<Vec<f64>> {
    let first = examples.first().ok_or(Error::EmptyInput("weighted ridge solve"))?;
    check_dim(examples.len(), weights.len())?;
    let m = first.dim();
    let mut a = alloc::vec![0.0; m * m];
    let mut b = alloc::vec![0.0; m];
    let mut wsum = 0.0;
    for (e, &w) in examples.iter().zip(weights) {
        check_dim(m, e.dim())?;
        wsum += w;
        for i in 0..m {
            b[i] += w * e.y * e.x[i];
            for j in 0..=i {
                a[i * m + j] += w * e.x[i] * e.x[j];
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            a[j * m + i] = a[i * m + j];
        }
        a[i * m + i] += lambda * wsum;
    }
    math::cholesky_solve(&a, &b)
}

/// Gaussian-smoothed surrogate `l - w` with `w ~ N(0, sigma^2)` independent of `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedSurrogate<L> {
    pub inner: L,
    sigma: f64,
}

impl<L: LossModel> SmoothedSurrogate<L> {
    pub fn new(inner: L, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Validation(alloc::format!(
                "smoothing sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { inner, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn value(&self, theta: &[f64], ae: &AugmentedExample) -> Result<f64> {
        Ok(self.inner.value(theta, &ae.base)? - ae.w)
    }

    /// `w` carries no `theta` dependence, so this is the inner gradient.
    pub fn grad_theta(&self, theta: &[f64], ae: &AugmentedExample) -> Result<Vec<f64>> {
        self.inner.grad_theta(theta, &ae.base)
    }

    /// Smoothness constant of the smoothed objective, see [`smoothness_constant_lprime`].
    pub fn objective_smoothness(&self, alpha: ConfidenceLevel) -> f64 {
        smoothness_constant_lprime(&self.inner.constants(), self.sigma, alpha)
    }
}

/// `surrogate_value` as a free function.
pub fn surrogate_value<L: LossModel>(
    s: &SmoothedSurrogate<L>,
    theta: &[f64],
    ae: &AugmentedExample,
) -> Result<f64> {
    s.value(theta, ae)
}

/// `L' = (L sigma sqrt(2 pi) + G^2) / (alpha sigma sqrt(2 pi))`.
pub fn smoothness_constant_lprime(c: &LossConstants, sigma: f64, alpha: ConfidenceLevel) -> f64 {
    let s = sigma * SQRT_2PI;
    (c.l_smooth * s + c.g_lip * c.g_lip) / (alpha.get() * s)
}

/// Gaussian softplus `R_sigma(z) = E (z - w)_+` for `w ~ N(0, sigma^2)`.
///
/// Evaluated as `(z)_+ + sigma h(|z| / sigma)` with `h(v) = phi(v) - v (1 - Phi(v))`,
/// which is exact in `z` by symmetry and keeps `(z)_+ <= R <= (z)_+ + sigma/sqrt(2 pi)`
/// true in floating point.
pub fn r_sigma(sigma: f64, z: f64) -> f64 {
    z.max(0.0) + sigma * softplus_excess(libm::fabs(z) / sigma)
}

/// `h(v) = phi(v) - v Q(v)` for `v >= 0`, clamped to its range `[0, 1/sqrt(2 pi)]`.
#[inline]
pub(crate) fn softplus_excess(v: f64) -> f64 {
    let h = math::norm_pdf(v) - v * math::norm_sf(v);
    h.clamp(0.0, INV_SQRT_2PI)
}
