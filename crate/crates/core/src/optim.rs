//! Box-constrained quasi-Newton minimization.
//!
//! A projected BFGS method: the inverse-Hessian approximation acts on the
//! variables not pinned at a bound, the step is projected back into the box
//! and accepted by Armijo backtracking along the projected path. Good enough
//! for the small, smooth problems in this crate (a few hundred variables at
//! most).

/// Stopping rules for [`minimize_box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiNewtonOptions {
    pub max_iters: usize,
    /// Absolute tolerance on the infinity norm of the projected gradient.
    pub gtol: f64,
    /// Tolerance on the projected gradient relative to its initial value.
    pub gtol_rel: f64,
    /// Relative tolerance on the objective decrease between iterations.
    pub ftol: f64,
    /// Absolute tolerance on the infinity norm of the step.
    pub xtol: f64,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            gtol: 1e-12,
            gtol_rel: 1e-10,
            ftol: 1e-14,
            xtol: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    ObjectiveChange,
    StepSize,
    /// The line search could not decrease the objective even along the
    /// steepest-descent direction.
    LineSearch,
    MaxIterations,
    NonFinite,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::NonFinite)
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(lo, hi);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| (xi - (xi - gi).clamp(lo, hi)).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `objective` over the box `[lower, upper]`.
///
/// `objective(x, grad)` returns the value at `x` and writes the gradient into
/// `grad`. A non-finite value is treated as "outside the domain" and rejected
/// by the line search.
pub fn minimize_box<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &QuasiNewtonOptions,
) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);

    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    let mut evaluations = 1;

    let finish = |x: Vec<f64>, f: f64, iterations, evaluations, termination| Minimum {
        x,
        f,
        iterations,
        evaluations,
        termination,
    };

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, f, 0, evaluations, Termination::NonFinite);
    }
    if n == 0 {
        return finish(x, f, 0, evaluations, Termination::Gradient);
    }

    let pg0 = projected_gradient_norm(&x, &g, lower, upper);
    let gtol = opts.gtol.max(opts.gtol_rel * pg0);

    // Inverse Hessian approximation, row-major.
    let mut h = identity(n);
    let mut h_is_identity = true;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut free = vec![true; n];

    for iter in 0..opts.max_iters {
        if projected_gradient_norm(&x, &g, lower, upper) <= gtol {
            return finish(x, f, iter, evaluations, Termination::Gradient);
        }

        for i in 0..n {
            let at_lower = x[i] <= lower[i] && g[i] > 0.0;
            let at_upper = x[i] >= upper[i] && g[i] < 0.0;
            free[i] = !(at_lower || at_upper);
        }

        search_direction(&h, &g, &free, &mut dir);
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if !(slope < 0.0) {
            reset(&mut h);
            h_is_identity = true;
            search_direction(&h, &g, &free, &mut dir);
            slope = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
            if !(slope < 0.0) {
                return finish(x, f, iter, evaluations, Termination::Gradient);
            }
        }

        // Armijo backtracking along the projected path.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            project(&mut x_new, lower, upper);
            let decrease: f64 = x_new
                .iter()
                .zip(&x)
                .zip(&g)
                .map(|((xn, xo), gi)| (xn - xo) * gi)
                .sum();
            let f_new = objective(&x_new, &mut g_new);
            evaluations += 1;
            if f_new.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && f_new <= f + 1e-4 * decrease.min(0.0)
            {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }

        let Some(f_new) = accepted else {
            if h_is_identity {
                return finish(x, f, iter, evaluations, Termination::LineSearch);
            }
            reset(&mut h);
            h_is_identity = true;
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let step_norm = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let f_change = (f - f_new).abs();
        let f_scale = f.abs().max(f_new.abs()).max(f64::MIN_POSITIVE);

        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_new;

        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        if sy > 1e-12 * (ss * yy).sqrt() && sy > 0.0 {
            if h_is_identity {
                let gamma = sy / yy;
                for (i, row) in h.chunks_mut(n).enumerate() {
                    row[i] = gamma;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            h_is_identity = false;
        }

        if step_norm <= opts.xtol {
            return finish(x, f, iter + 1, evaluations, Termination::StepSize);
        }
        if f_change <= opts.ftol * f_scale {
            return finish(x, f, iter + 1, evaluations, Termination::ObjectiveChange);
        }
    }

    let termination = if projected_gradient_norm(&x, &g, lower, upper) <= gtol {
        Termination::Gradient
    } else {
        Termination::MaxIterations
    };
    finish(x, f, opts.max_iters, evaluations, termination)
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn reset(h: &mut [f64]) {
    let n = (h.len() as f64).sqrt() as usize;
    h.fill(0.0);
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
}

fn search_direction(h: &[f64], g: &[f64], free: &[bool], dir: &mut [f64]) {
    let n = g.len();
    for i in 0..n {
        dir[i] = if free[i] {
            let row = &h[i * n..(i + 1) * n];
            -row.iter()
                .zip(g)
                .zip(free)
                .filter(|(_, &fr)| fr)
                .map(|((hij, gj), _)| hij * gj)
                .sum::<f64>()
        } else {
            0.0
        };
    }
}

/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n)
        .map(|i| h[i * n..(i + 1) * n].iter().zip(y).map(|(a, b)| a * b).sum())
        .collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    let coef = rho * rho * yhy + rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Central finite-difference gradient, used where no analytic gradient exists.
pub fn central_gradient<F>(mut f: F, x: &[f64], step: f64, grad: &mut [f64])
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let m = minimize_box(
            rosenbrock,
            &[-1.2, 1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &QuasiNewtonOptions::default(),
        );
        assert!(m.termination.converged(), "{:?}", m.termination);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn active_bound_is_respected() {
        // min (x-3)^2 + (y+1)^2 on [0,2]x[0,2] -> (2, 0)
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 2.0 * (x[1] + 1.0);
            (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2)
        };
        let m = minimize_box(f, &[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], &Default::default());
        assert_eq!(m.x, vec![2.0, 0.0]);
    }

    #[test]
    fn non_finite_start_reported() {
        let m = minimize_box(
            |_: &[f64], _: &mut [f64]| f64::NAN,
            &[0.0],
            &[-1.0],
            &[1.0],
            &Default::default(),
        );
        assert_eq!(m.termination, Termination::NonFinite);
    }

    #[test]
    fn finite_difference_gradient_of_quadratic() {
        let mut g = [0.0; 2];
        central_gradient(|x| x[0] * x[0] + 3.0 * x[0] * x[1], &[1.0, 2.0], 1e-6, &mut g);
        assert!((g[0] - 8.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }
}
