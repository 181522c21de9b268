//! Small dense BFGS with Armijo backtracking for the reference solvers.

use alloc::vec::Vec;

use crate::error::Result;
use crate::math;

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` until `|grad| <= grad_tol` or `max_iter` steps.
///
/// `f` returns the value and gradient. The inverse-Hessian approximation is
/// reset to a scaled identity whenever the curvature condition fails or the
/// line search cannot make progress from the quasi-Newton direction.
pub(crate) fn bfgs<F>(mut f: F, x0: &[f64], grad_tol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut h = identity(n, 1.0);
    let mut fresh = true;
    for iter in 0..max_iter {
        let gnorm = math::norm(&g);
        if gnorm <= grad_tol {
            return Ok(Minimum { x, value: fx, grad: g, iterations: iter, converged: true });
        }
        if fresh {
            h = identity(n, 1.0 / gnorm.max(1e-300));
        }
        let mut d = mat_vec(&h, &g, n);
        for di in d.iter_mut() {
            *di = -*di;
        }
        let mut slope = math::dot(&g, &d);
        if slope.is_nan() || slope >= 0.0 {
            h = identity(n, 1.0 / gnorm);
            d = g.iter().map(|v| -v / gnorm).collect();
            slope = -gnorm;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial)?;
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                // Steepest descent found no decrease: the tolerance is below
                // what the arithmetic can resolve.
                return Ok(Minimum { x, value: fx, grad: g, iterations: iter, converged: false });
            }
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = math::dot(&s, &y);
        x = xn;
        fx = fnew;
        g = gnew;
        if sy > 1e-12 * math::norm(&s) * math::norm(&y) && sy > 0.0 {
            if fresh {
                h = identity(n, sy / math::dot(&y, &y));
            }
            bfgs_update(&mut h, &s, &y, sy, n);
            fresh = false;
        } else {
            fresh = true;
        }
    }
    let converged = math::norm(&g) <= grad_tol;
    Ok(Minimum { x, value: fx, grad: g, iterations: max_iter, converged })
}

fn identity(n: usize, scale: f64) -> Vec<f64> {
    let mut h = alloc::vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = scale;
    }
    h
}

fn mat_vec(h: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| math::dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// `H <- (I - r s y^T) H (I - r y s^T) + r s s^T` with `r = 1 / (y^T s)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let r = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = math::dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -r * (s[i] * hy[j] + hy[i] * s[j]) + (r * r * yhy + r) * s[i] * s[j];
        }
    }
}
