//! Ground-truth curve generators.
//!
//! Two families: the parabola experiment (random deformations of one fixed
//! shape, with the truth returned for oracle checks) and a functional
//! simulator stand-in whose deformations are smooth functions of the inputs.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::doe::{restart_seed, DesignMatrix, InputBox};
use crate::error::{Error, Result};
use crate::simreg::{dft_centered, idft_centered, CurveSet, TransformParams};

const TAU: f64 = 2.0 * PI;

/// `f(t) = 20 (1 - t/2pi) t/2pi`, extended periodically.
pub fn parabola_pattern(t: f64) -> f64 {
    let x = t.rem_euclid(TAU) / TAU;
    20.0 * (1.0 - x) * x
}

/// Smooth periodic pressure-like response: a sharp build-up peak during
/// injection followed by a slow decline. Angular time, `2pi`-periodic.
pub fn pressure_pattern(t: f64) -> f64 {
    20.0 * (2.5 * ((t - 1.7).cos() - 1.0)).exp() + 8.0 * (0.8 * ((t - 2.8).cos() - 1.0)).exp()
}

/// How `f(t - theta)` is evaluated on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    /// Closed-form `f` at the shifted times.
    #[default]
    Analytic,
    /// Phase rotation of the grid samples of `f`. Exact under the discrete
    /// model, so registration at the true parameters is exact to round-off.
    Spectral,
}

/// Common shape used by a generator.
#[derive(Clone)]
pub enum PatternSpec {
    Parabola,
    Pressure,
    /// One period of samples on an equispaced odd-length grid, evaluated
    /// elsewhere by trigonometric interpolation.
    Samples(Vec<f64>),
}

impl fmt::Debug for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternSpec::Parabola => f.write_str("Parabola"),
            PatternSpec::Pressure => f.write_str("Pressure"),
            PatternSpec::Samples(s) => write!(f, "Samples({})", s.len()),
        }
    }
}

impl PatternSpec {
    fn sampler(&self) -> Result<Box<dyn Fn(f64) -> f64 + Send + Sync>> {
        Ok(match self {
            PatternSpec::Parabola => Box::new(parabola_pattern),
            PatternSpec::Pressure => Box::new(pressure_pattern),
            PatternSpec::Samples(s) => {
                let coeffs = dft_centered(s)?;
                let half = (coeffs.len() - 1) as isize / 2;
                Box::new(move |t| {
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(c, z)| (z * num_complex::Complex64::from_polar(1.0, (c as isize - half) as f64 * t)).re)
                        .sum()
                })
            }
        })
    }
}

/// Per-curve deformation of `f` on the angular grid of length `j`.
fn deformed_rows(
    f: &(dyn Fn(f64) -> f64 + Send + Sync),
    j: usize,
    params: &TransformParams,
    mode: ShiftMode,
) -> Result<Vec<Vec<f64>>> {
    let grid: Vec<f64> = (0..j).map(|m| TAU * m as f64 / j as f64).collect();
    match mode {
        ShiftMode::Analytic => Ok((0..params.n())
            .map(|k| {
                grid.iter()
                    .map(|&t| params.alpha[k] * f(t - params.theta[k]) + params.v[k])
                    .collect()
            })
            .collect()),
        ShiftMode::Spectral => {
            if j % 2 == 0 {
                return Err(Error::invalid("spectral shifting needs an odd grid length"));
            }
            let base: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
            let coeffs = dft_centered(&base)?;
            let half = (j - 1) as isize / 2;
            (0..params.n())
                .map(|k| {
                    let shifted: Vec<_> = coeffs
                        .iter()
                        .enumerate()
                        .map(|(c, &z)| {
                            let l = c as isize - half;
                            num_complex::Complex64::from_polar(params.alpha[k], -(l as f64) * params.theta[k]) * z
                        })
                        .collect();
                    let (vals, _) = idft_centered(&shifted)?;
                    Ok(vals.into_iter().map(|y| y + params.v[k]).collect())
                })
                .collect()
        }
    }
}

fn add_noise(rows: &mut [Vec<f64>], noise_var: f64, seed: u64) -> Result<()> {
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::invalid("noise variance must be nonnegative"));
    }
    if noise_var == 0.0 {
        return Ok(());
    }
    // Separate stream so the noise does not perturb the parameter draws.
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(seed, 1));
    let normal = Normal::new(0.0, noise_var.sqrt()).expect("finite sd");
    for row in rows.iter_mut() {
        for y in row.iter_mut() {
            *y += normal.sample(&mut rng);
        }
    }
    Ok(())
}

/// Settings of the parabola experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticalSpec {
    pub n: usize,
    pub j: usize,
    pub noise_var: f64,
    pub seed: u64,
    /// Scales are drawn uniformly on `]alpha_floor, 1]`; shifts on `]0, 1]`.
    pub alpha_floor: f64,
    pub shift: ShiftMode,
}

impl AnalyticalSpec {
    pub fn new(n: usize, j: usize, noise_var: f64, seed: u64) -> Self {
        Self {
            n,
            j,
            noise_var,
            seed,
            alpha_floor: 0.05,
            shift: ShiftMode::Analytic,
        }
    }
}

/// Parabola curves with uniformly drawn deformations and identity reference.
pub fn generate_analytical(n: usize, j: usize, noise_var: f64, seed: u64) -> Result<(CurveSet, TransformParams)> {
    generate_analytical_with(&AnalyticalSpec::new(n, j, noise_var, seed))
}

pub fn generate_analytical_with(spec: &AnalyticalSpec) -> Result<(CurveSet, TransformParams)> {
    if spec.n < 2 {
        return Err(Error::invalid("need at least two curves"));
    }
    if spec.j < 3 {
        return Err(Error::invalid("need at least three time samples"));
    }
    if !(0.0..1.0).contains(&spec.alpha_floor) {
        return Err(Error::invalid("alpha floor must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // 1 - U[0,1) is uniform on ]0,1].
    let mut unit = || 1.0 - rng.random::<f64>();
    let mut params = TransformParams::identity(spec.n);
    for k in 0..spec.n {
        let a = spec.alpha_floor + (1.0 - spec.alpha_floor) * unit();
        let t = unit();
        let v = unit();
        if k > 0 {
            params.alpha[k] = a;
            params.theta[k] = t;
            params.v[k] = v;
        }
    }
    let f = PatternSpec::Parabola.sampler()?;
    let mut rows = deformed_rows(f.as_ref(), spec.j, &params, spec.shift)?;
    add_noise(&mut rows, spec.noise_var, spec.seed)?;
    Ok((CurveSet::from_rows(&rows, 0.0, TAU)?, params))
}

/// Map from normalized inputs `u` in `[0,1]^d` to one deformation parameter.
pub type ParamMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A functional simulator stand-in: row `i` is
/// `alpha(u_i) f(t - theta(u_i)) + v(u_i) + noise`, with `u_i` the design
/// point normalized to the input box and time covering `[0, period)`.
#[derive(Clone)]
pub struct SimSpec {
    pub pattern: PatternSpec,
    pub alpha_fn: ParamMap,
    pub theta_fn: ParamMap,
    pub v_fn: ParamMap,
    pub noise_var: f64,
    pub j: usize,
    pub seed: u64,
    pub input_box: InputBox,
    pub period: f64,
    pub shift: ShiftMode,
    pub alpha_bounds: (f64, f64),
}

impl fmt::Debug for SimSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimSpec")
            .field("pattern", &self.pattern)
            .field("noise_var", &self.noise_var)
            .field("j", &self.j)
            .field("seed", &self.seed)
            .field("input_box", &self.input_box)
            .field("period", &self.period)
            .finish_non_exhaustive()
    }
}

/// The three-parameter reservoir box: porosity, sand permeability (mD) and
/// sand relative-permeability exponent.
pub fn co2_box() -> InputBox {
    InputBox::with_names(
        vec!["PORO".into(), "KSAND".into(), "KRSAND".into()],
        vec![0.15, 100.0, 2.0],
        vec![0.35, 1000.0, 5.0],
    )
    .expect("valid box")
}

/// Synthetic CO2-storage-style maps of the normalized inputs:
///
/// ```text
/// alpha = 1 + 0.3 (0.6 (2u1-1) + 0.4 sin(pi (u2 - 1/2)))          in [0.7, 1.3]
/// theta = 0.5 (0.5 (2u2-1) + 0.3 cos(pi u3) + 0.2 (2u1-1) u3)     in [-0.5, 0.5]
/// v     = 2 (0.7 (2u3-1) + 0.3 sin(pi u1) (2u2-1))                in [-2, 2]
/// ```
pub fn co2_maps() -> (ParamMap, ParamMap, ParamMap) {
    let alpha: ParamMap = Arc::new(|u: &[f64]| 1.0 + 0.3 * (0.6 * (2.0 * u[0] - 1.0) + 0.4 * (PI * (u[1] - 0.5)).sin()));
    let theta: ParamMap =
        Arc::new(|u: &[f64]| 0.5 * (0.5 * (2.0 * u[1] - 1.0) + 0.3 * (PI * u[2]).cos() + 0.2 * (2.0 * u[0] - 1.0) * u[2]));
    let v: ParamMap = Arc::new(|u: &[f64]| 2.0 * (0.7 * (2.0 * u[2] - 1.0) + 0.3 * (PI * u[0]).sin() * (2.0 * u[1] - 1.0)));
    (alpha, theta, v)
}

impl SimSpec {
    /// Pressure-like curves over a 55-step horizon on the reservoir box.
    pub fn co2_default(j: usize, noise_var: f64, seed: u64) -> Self {
        let (alpha_fn, theta_fn, v_fn) = co2_maps();
        Self {
            pattern: PatternSpec::Pressure,
            alpha_fn,
            theta_fn,
            v_fn,
            noise_var,
            j,
            seed,
            input_box: co2_box(),
            period: 55.0,
            shift: ShiftMode::Analytic,
            alpha_bounds: (0.05, 20.0),
        }
    }

    /// Same deformation everywhere.
    pub fn constant(pattern: PatternSpec, alpha: f64, theta: f64, v: f64, j: usize, input_box: InputBox) -> Self {
        Self {
            pattern,
            alpha_fn: Arc::new(move |_| alpha),
            theta_fn: Arc::new(move |_| theta),
            v_fn: Arc::new(move |_| v),
            noise_var: 0.0,
            j,
            seed: 0,
            input_box,
            period: 2.0 * PI,
            shift: ShiftMode::Analytic,
            alpha_bounds: (0.05, 20.0),
        }
    }

    /// Ground-truth deformation parameters at each design row (not
    /// re-referenced to the first row).
    pub fn true_params(&self, design: &DesignMatrix) -> Result<TransformParams> {
        if design.dims() != self.input_box.dims() {
            return Err(Error::invalid(format!(
                "design has {} columns, box has {}",
                design.dims(),
                self.input_box.dims()
            )));
        }
        let n = design.n();
        let mut p = TransformParams::identity(n);
        for i in 0..n {
            let x = design.row(i);
            let u = self.input_box.to_unit(&x);
            if u.iter().any(|c| !(-1e-9..=1.0 + 1e-9).contains(c)) {
                return Err(Error::invalid(format!("design row {} lies outside the input box", i + 1)));
            }
            let (a, t, v) = ((self.alpha_fn)(&u), (self.theta_fn)(&u), (self.v_fn)(&u));
            if !(t.is_finite() && t > -PI && t < PI) {
                return Err(Error::invalid(format!("time shift {t} at design row {} is outside (-pi, pi)", i + 1)));
            }
            if !(a >= self.alpha_bounds.0 && a <= self.alpha_bounds.1) {
                return Err(Error::invalid(format!(
                    "scale {a} at design row {} is outside [{}, {}]",
                    i + 1,
                    self.alpha_bounds.0,
                    self.alpha_bounds.1
                )));
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("vertical shift at design row {} is not finite", i + 1)));
            }
            p.alpha[i] = a;
            p.theta[i] = t;
            p.v[i] = v;
        }
        Ok(p)
    }
}

/// Runs the stand-in simulator at every design row.
pub fn generate_functional_sim(spec: &SimSpec, design: &DesignMatrix) -> Result<CurveSet> {
    if spec.j < 3 {
        return Err(Error::invalid("need at least three time samples"));
    }
    let params = spec.true_params(design)?;
    let f = spec.pattern.sampler()?;
    let mut rows = deformed_rows(f.as_ref(), spec.j, &params, spec.shift)?;
    add_noise(&mut rows, spec.noise_var, spec.seed)?;
    if rows.is_empty() {
        return CurveSet::new(DMatrix::zeros(0, spec.j), 0.0, spec.period);
    }
    CurveSet::from_rows(&rows, 0.0, spec.period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doe::{maximin_lhd, scale_to_box};
    use crate::simreg::{align_curves, contrast, make_weights, to_fourier};
    use proptest::prelude::*;

    #[test]
    fn parabola_values() {
        assert_eq!(parabola_pattern(0.0), 0.0);
        assert!((parabola_pattern(PI) - 5.0).abs() < 1e-14);
        for t in [0.3, 1.0, 2.5, 4.0, 6.0] {
            assert!((parabola_pattern(t) - parabola_pattern(TAU - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_curves_equal_pattern() {
        let spec = SimSpec::constant(PatternSpec::Parabola, 1.0, 0.0, 0.0, 11, InputBox::unit(2));
        let design = DesignMatrix::from_rows(&[vec![0.1, 0.2], vec![0.9, 0.4], vec![0.5, 0.5]], false).unwrap();
        let c = generate_functional_sim(&spec, &design).unwrap();
        for k in 0..3 {
            for m in 0..11 {
                assert_eq!(c.values[(k, m)], parabola_pattern(TAU * m as f64 / 11.0));
            }
        }
    }

    #[test]
    fn full_size_dataset() {
        let (c, p) = generate_analytical(101, 5, 0.5, 1).unwrap();
        assert_eq!((c.n(), c.len()), (101, 5));
        assert_eq!((p.alpha[0], p.theta[0], p.v[0]), (1.0, 0.0, 0.0));
        assert!(p.alpha.iter().all(|a| *a > 0.05 && *a <= 1.0));
        assert!(p.theta.iter().skip(1).all(|t| *t > 0.0 && *t <= 1.0));
        assert!(p.validate(101).is_ok());
    }

    #[test]
    fn noise_does_not_change_params() {
        let (_, a) = generate_analytical(10, 21, 0.0, 9).unwrap();
        let (_, b) = generate_analytical(10, 21, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let (x, _) = generate_analytical(10, 21, 0.5, 9).unwrap();
        let (y, _) = generate_analytical(10, 21, 0.5, 10).unwrap();
        assert_ne!(x.values, y.values);
    }

    #[test]
    fn empirical_noise_variance() {
        let (noisy, _) = generate_analytical(100, 201, 0.5, 3).unwrap();
        let (clean, _) = generate_analytical(100, 201, 0.0, 3).unwrap();
        let eps = &noisy.values - &clean.values;
        let count = eps.len() as f64;
        let mean = eps.sum() / count;
        let var = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (count - 1.0);
        assert!((var - 0.5).abs() < 0.025, "{var}");
    }

    #[test]
    fn spectral_truth_has_zero_contrast() {
        let spec = AnalyticalSpec {
            shift: ShiftMode::Spectral,
            ..AnalyticalSpec::new(30, 101, 0.0, 4)
        };
        let (c, p) = generate_analytical_with(&spec).unwrap();
        let table = to_fourier(&c).unwrap();
        let w = make_weights(101, 1.5).unwrap();
        assert!(contrast(&p, &table, &w).unwrap() <= 1e-12);
    }

    #[test]
    fn true_params_align_to_pattern() {
        let spec = AnalyticalSpec {
            shift: ShiftMode::Spectral,
            ..AnalyticalSpec::new(8, 51, 0.0, 5)
        };
        let (c, p) = generate_analytical_with(&spec).unwrap();
        let aligned = align_curves(&c, &p).unwrap();
        for k in 0..8 {
            for m in 0..51 {
                assert!((aligned.values[(k, m)] - parabola_pattern(TAU * m as f64 / 51.0)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn co2_harness_shape_and_ranges() {
        let b = co2_box();
        let design = scale_to_box(&maximin_lhd(30, 3, 11, 5).unwrap(), &b).unwrap();
        let spec = SimSpec::co2_default(55, 0.0, 0);
        let c = generate_functional_sim(&spec, &design).unwrap();
        assert_eq!((c.n(), c.len()), (30, 55));
        let p = spec.true_params(&design).unwrap();
        assert!(p.alpha.iter().all(|a| (0.7..=1.3).contains(a)));
        assert!(p.theta.iter().all(|t| (-0.5..=0.5).contains(t)));
        assert!(p.v.iter().all(|v| (-2.0..=2.0).contains(v)));
    }

    #[test]
    fn out_of_range_shift_rejected() {
        let spec = SimSpec::constant(PatternSpec::Pressure, 1.0, 4.0, 0.0, 9, InputBox::unit(1));
        let design = DesignMatrix::from_rows(&[vec![0.5]], false).unwrap();
        assert!(matches!(generate_functional_sim(&spec, &design), Err(Error::InvalidArgument(_))));
        let spec = SimSpec::constant(PatternSpec::Pressure, 1.0, 0.0, 0.0, 9, InputBox::unit(1));
        let outside = DesignMatrix::from_rows(&[vec![1.5]], false).unwrap();
        assert!(generate_functional_sim(&spec, &outside).is_err());
    }

    #[test]
    fn sample_pattern_interpolates() {
        let samples: Vec<f64> = (0..9).map(|m| (TAU * m as f64 / 9.0).sin()).collect();
        let f = PatternSpec::Samples(samples).sampler().unwrap();
        assert!((f(0.4) - 0.4f64.sin()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn generator_is_deterministic(seed in 0u64..1000, n in 2usize..12) {
            let a = generate_analytical(n, 15, 0.3, seed).unwrap();
            let b = generate_analytical(n, 15, 0.3, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
