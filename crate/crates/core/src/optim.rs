//! BFGS with an inverse-Hessian update and Armijo backtracking.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Converged when the relative objective change falls below this.
    pub rel_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub rel_change: f64,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

fn inf_norm(g: &DVector<f64>) -> f64 {
    g.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the objective and its gradient.
///
/// Errors and non-finite values at trial points are treated as `+inf`
/// during the line search; an error at the starting point is returned.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: BfgsOptions) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x.as_slice())?;
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    let mut rel_change = f64::INFINITY;

    let finish = |x: DVector<f64>, fx, g: DVector<f64>, it, conv, rel| BfgsOutcome {
        gradient_norm: inf_norm(&g),
        x: x.as_slice().to_vec(),
        value: fx,
        gradient: g.as_slice().to_vec(),
        iterations: it,
        converged: conv,
        rel_change: rel,
    };

    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Ok(finish(x, fx, g, 0, false, rel_change));
    }

    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            return Ok(finish(x, fx, g, iterations, true, rel_change));
        }
        let mut d = -(&h * &g);
        let mut slope = d.dot(&g);
        if slope >= 0.0 {
            // lost descent: restart from steepest descent
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = d.dot(&g);
        }
        let mut step = if first { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial = &x + step * &d;
            if let Ok((ft, gt)) = f(trial.as_slice()) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fnew, gn)) = accepted else {
            // no decrease possible along the search direction
            let conv = inf_norm(&g) < opts.grad_tol * 10.0;
            return Ok(finish(x, fx, g, iterations, conv, 0.0));
        };
        let s = &xn - &x;
        let y = &gn - &g;
        rel_change = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                // Shanno scaling of the initial inverse Hessian
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
            first = false;
        }
        if rel_change < opts.rel_tol {
            return Ok(finish(x, fx, g, iterations, true, rel_change));
        }
    }
    let conv = inf_norm(&g) < opts.grad_tol;
    Ok(finish(x, fx, g, iterations, conv, rel_change))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let out = minimize(
            f,
            &[-1.2, 1.0],
            BfgsOptions {
                rel_tol: 0.0,
                grad_tol: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn quadratic_is_solved_exactly() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let b = [1.0, -2.0, 0.5];
        let f = |x: &[f64]| {
            let mut g = vec![0.0; 3];
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    g[i] += a[i][j] * x[j];
                }
                v += 0.5 * x[i] * g[i] - b[i] * x[i];
                g[i] -= b[i];
            }
            Ok((v, g))
        };
        let out = minimize(
            f,
            &[0.0; 3],
            BfgsOptions {
                rel_tol: 0.0,
                grad_tol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        let am = DMatrix::from_fn(3, 3, |i, j| a[i][j]);
        let sol = am.lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for i in 0..3 {
            assert!((out.x[i] - sol[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn errors_at_trial_points_shrink_the_step() {
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                return Err(crate::Error::numeric("overflow"));
            }
            Ok(((x[0] - 1.5).powi(2), vec![2.0 * (x[0] - 1.5)]))
        };
        let out = minimize(f, &[-50.0], BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn exhausted_iterations_report_non_convergence() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            Ok((v, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
        };
        let out = minimize(
            f,
            &[-1.2, 1.0],
            BfgsOptions {
                max_iter: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
    }
}
