//! Constant-mean kriging with a Gaussian correlation function.
//!
//! The process is `Y(x) = beta + Z(x)` with `Cov(Z(x), Z(y)) = sigma^2 R(x, y)`
//! and `R(x, y) = exp(-sum_j (x_j - y_j)^2 / theta_j)`. The correlation lengths
//! `theta` are fitted by minimizing the concentrated negative log-likelihood,
//! in which the GLS `beta` and the MLE `sigma^2` have been profiled out.
//!
//! Inputs are rescaled internally to the bounding box of the training design,
//! so correlation lengths are in squared unit-cube distances.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doe::{lhd_sample, DesignMatrix};
use crate::error::{Error, Result};
use crate::optim::{minimize_box, QuasiNewtonOptions};

/// Largest nugget tried before a design is declared ill-conditioned.
pub const MAX_NUGGET: f64 = 1e-4;
/// First nugget tried when escalating from zero.
pub const NUGGET_START: f64 = 1e-10;
/// Floor applied to a vanishing `sigma^2` estimate.
pub const SIGMA2_FLOOR: f64 = 1e-300;

/// Correlation lengths of the Gaussian (power-exponential, `p = 2`) kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub lengths: Vec<f64>,
}

impl CorrelationSpec {
    pub fn new(lengths: Vec<f64>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::invalid("correlation spec needs at least one length"));
        }
        if let Some(bad) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::invalid(format!("correlation length {bad} is not positive")));
        }
        Ok(Self { lengths })
    }

    /// Smoothness exponent of every dimension; only the Gaussian case is supported.
    pub fn smoothness(&self) -> f64 {
        2.0
    }

    pub fn dims(&self) -> usize {
        self.lengths.len()
    }
}

/// `exp(-sum_j |x_j - y_j|^2 / theta_j)`.
pub fn corr_gaussian(x: &[f64], y: &[f64], spec: &CorrelationSpec) -> Result<f64> {
    if x.len() != spec.dims() || y.len() != spec.dims() {
        return Err(Error::invalid("point dimension does not match correlation spec"));
    }
    if spec.lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::invalid("nonpositive correlation length"));
    }
    Ok(corr_unchecked(x, y, &spec.lengths))
}

fn corr_unchecked(x: &[f64], y: &[f64], lengths: &[f64]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(y)
        .zip(lengths)
        .map(|((a, b), l)| (a - b) * (a - b) / l)
        .sum();
    (-s).exp()
}

fn correlation_matrix(points: &DMatrix<f64>, lengths: &[f64]) -> DMatrix<f64> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| points.row(i).iter().copied().collect()).collect();
    let mut r = DMatrix::identity(n, n);
    for i in 0..n {
        for k in (i + 1)..n {
            let v = corr_unchecked(&rows[i], &rows[k], lengths);
            r[(i, k)] = v;
            r[(k, i)] = v;
        }
    }
    r
}

/// Cholesky factor of `R + nugget I`, with the nugget actually used.
#[derive(Debug, Clone)]
pub struct CorrelationFactor {
    pub chol: Cholesky<f64, Dyn>,
    pub nugget: f64,
}

impl CorrelationFactor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn n(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

fn factor_with_escalation(r: &DMatrix<f64>, nugget: f64) -> Result<CorrelationFactor> {
    let n = r.nrows();
    let mut tau = nugget.max(0.0);
    loop {
        let mut k = r.clone();
        for i in 0..n {
            k[(i, i)] += tau;
        }
        if let Some(chol) = Cholesky::new(k) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(CorrelationFactor { chol, nugget: tau });
            }
        }
        let next = (tau * 10.0).max(NUGGET_START);
        if next > MAX_NUGGET * (1.0 + 1e-12) {
            return Err(Error::IllConditioned {
                max_nugget: MAX_NUGGET,
            });
        }
        tau = next;
    }
}

/// Factorizes `R + nugget I` for the rows of `design`, escalating the nugget
/// tenfold (starting at [`NUGGET_START`] when zero) up to [`MAX_NUGGET`].
pub fn build_correlation(
    design: &DesignMatrix,
    spec: &CorrelationSpec,
    nugget: f64,
) -> Result<CorrelationFactor> {
    if design.n() < 2 {
        return Err(Error::invalid("correlation matrix needs at least two points"));
    }
    if design.dims() != spec.dims() {
        return Err(Error::invalid("design dimension does not match correlation spec"));
    }
    let r = correlation_matrix(&design.points, &spec.lengths);
    factor_with_escalation(&r, nugget)
}

/// `(1' R^-1 1)^-1 1' R^-1 Y`.
pub fn gls_beta(factor: &CorrelationFactor, responses: &[f64]) -> f64 {
    let n = responses.len();
    let ones = DVector::from_element(n, 1.0);
    let rinv_one = factor.solve(&ones);
    let y = DVector::from_column_slice(responses);
    rinv_one.dot(&y) / rinv_one.sum()
}

/// `(1/n) (Y - 1 beta)' R^-1 (Y - 1 beta)`, floored at [`SIGMA2_FLOOR`].
pub fn mle_sigma2(factor: &CorrelationFactor, responses: &[f64], beta: f64) -> f64 {
    let e = DVector::from_iterator(responses.len(), responses.iter().map(|y| y - beta));
    let q = e.dot(&factor.solve(&e)) / responses.len() as f64;
    if q > SIGMA2_FLOOR {
        q
    } else {
        SIGMA2_FLOOR
    }
}

/// Concentrated negative log-likelihood
/// `(1/2) [n log sigma2_hat + log det(R + nugget I) + n]`.
pub fn neg_log_likelihood(
    design: &DesignMatrix,
    responses: &[f64],
    spec: &CorrelationSpec,
    nugget: f64,
) -> Result<f64> {
    check_training(design, responses, 2)?;
    let factor = build_correlation(design, spec, nugget)?;
    Ok(concentrated_nll(&factor, responses))
}

fn concentrated_nll(factor: &CorrelationFactor, responses: &[f64]) -> f64 {
    let n = responses.len() as f64;
    let beta = gls_beta(factor, responses);
    let s2 = mle_sigma2(factor, responses, beta);
    0.5 * (n * s2.ln() + factor.log_det() + n)
}

/// Negative log-likelihood and its gradient with respect to `log(theta_j)`.
///
/// The nugget is held at the value the factorization settled on.
pub fn neg_log_likelihood_with_gradient(
    design: &DesignMatrix,
    responses: &[f64],
    spec: &CorrelationSpec,
    nugget: f64,
) -> Result<(f64, Vec<f64>)> {
    check_training(design, responses, 2)?;
    let r = correlation_matrix(&design.points, &spec.lengths);
    let factor = factor_with_escalation(&r, nugget)?;
    Ok(nll_gradient_from(&design.points, &r, &factor, responses, &spec.lengths))
}

fn nll_gradient_from(
    points: &DMatrix<f64>,
    r: &DMatrix<f64>,
    factor: &CorrelationFactor,
    responses: &[f64],
    lengths: &[f64],
) -> (f64, Vec<f64>) {
    let n = responses.len();
    let beta = gls_beta(factor, responses);
    let s2 = mle_sigma2(factor, responses, beta);
    let nll = 0.5 * (n as f64 * s2.ln() + factor.log_det() + n as f64);

    let e = DVector::from_iterator(n, responses.iter().map(|y| y - beta));
    let a = factor.solve(&e);
    let kinv = factor.chol.inverse();

    let grad = lengths
        .iter()
        .enumerate()
        .map(|(j, &len)| {
            let mut trace = 0.0;
            let mut quad = 0.0;
            for p in 0..n {
                for q in 0..n {
                    if p == q {
                        continue;
                    }
                    let dist = (points[(p, j)] - points[(q, j)]).powi(2);
                    let dr = r[(p, q)] * dist / len;
                    trace += kinv[(p, q)] * dr;
                    quad += a[p] * dr * a[q];
                }
            }
            0.5 * (trace - quad / s2)
        })
        .collect();
    (nll, grad)
}

fn check_training(design: &DesignMatrix, responses: &[f64], min_n: usize) -> Result<()> {
    if design.n() != responses.len() {
        return Err(Error::invalid(format!(
            "design has {} rows but {} responses were given",
            design.n(),
            responses.len()
        )));
    }
    if design.n() < min_n {
        return Err(Error::invalid(format!("need at least {min_n} training points")));
    }
    if responses.iter().any(|y| !y.is_finite()) || design.points.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite training data"));
    }
    Ok(())
}

/// Hyperparameter search settings for [`fit_gp`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Per-dimension `(lo, hi)` bounds on the correlation lengths. Empty means
    /// `(1e-3, 1e3)` everywhere; a single pair is broadcast.
    pub length_bounds: Vec<(f64, f64)>,
    pub multistarts: usize,
    pub max_iters: usize,
    pub nugget_floor: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            length_bounds: Vec::new(),
            multistarts: 8,
            max_iters: 200,
            nugget_floor: 1e-10,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn bounds_for(&self, d: usize) -> Result<Vec<(f64, f64)>> {
        let bounds = match self.length_bounds.len() {
            0 => vec![(1e-3, 1e3); d],
            1 => vec![self.length_bounds[0]; d],
            k if k == d => self.length_bounds.clone(),
            k => {
                return Err(Error::invalid(format!(
                    "{k} length bounds given for a {d}-dimensional design"
                )))
            }
        };
        for &(lo, hi) in &bounds {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::invalid(format!("bad length bounds ({lo}, {hi})")));
            }
        }
        if self.multistarts < 1 {
            return Err(Error::invalid("multistarts must be >= 1"));
        }
        if !(self.nugget_floor >= 0.0) {
            return Err(Error::invalid("nugget floor must be nonnegative"));
        }
        Ok(bounds)
    }
}

/// Per-dimension affine map from the design's bounding box to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
struct InputScaling {
    lo: Vec<f64>,
    span: Vec<f64>,
}

impl InputScaling {
    fn from_design(design: &DesignMatrix) -> Self {
        let (lo, span) = (0..design.dims())
            .map(|j| {
                let col = design.points.column(j);
                let lo = col.min();
                let span = col.max() - lo;
                (lo, if span > 0.0 { span } else { 1.0 })
            })
            .unzip();
        Self { lo, span }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.span))
            .map(|(v, (lo, s))| (v - lo) / s)
            .collect()
    }

    fn apply_design(&self, design: &DesignMatrix) -> DesignMatrix {
        let points = DMatrix::from_fn(design.n(), design.dims(), |i, j| {
            (design.points[(i, j)] - self.lo[j]) / self.span[j]
        });
        DesignMatrix {
            points,
            normalized: true,
        }
    }
}

/// Fitted kriging model.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub design: DesignMatrix,
    pub responses: Vec<f64>,
    pub corr: CorrelationSpec,
    pub beta: f64,
    pub sigma2: f64,
    pub nugget: f64,
    pub factor: CorrelationFactor,
    /// Negative log-likelihood at the fitted lengths.
    pub nll: f64,
    scaling: InputScaling,
    unit: DesignMatrix,
    /// `R^-1 (Y - 1 beta)`
    weights: DVector<f64>,
    /// `R^-1 1`
    rinv_one: DVector<f64>,
}

/// Posterior mean and variance at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl GpModel {
    /// Builds the model at fixed correlation lengths (in unit-cube units).
    ///
    /// `beta` and `sigma2` are the GLS and ML estimates at those lengths; the
    /// nugget escalates from `nugget` if the matrix is not positive definite.
    pub fn with_hyperparameters(
        design: &DesignMatrix,
        responses: &[f64],
        corr: CorrelationSpec,
        nugget: f64,
    ) -> Result<Self> {
        check_training(design, responses, 2)?;
        if corr.dims() != design.dims() {
            return Err(Error::invalid("design dimension does not match correlation spec"));
        }
        let scaling = InputScaling::from_design(design);
        let unit = scaling.apply_design(design);
        let factor = build_correlation(&unit, &corr, nugget)?;
        let beta = gls_beta(&factor, responses);
        let sigma2 = mle_sigma2(&factor, responses, beta);
        let n = responses.len();
        let e = DVector::from_iterator(n, responses.iter().map(|y| y - beta));
        let weights = factor.solve(&e);
        let rinv_one = factor.solve(&DVector::from_element(n, 1.0));
        let nll = 0.5 * (n as f64 * sigma2.ln() + factor.log_det() + n as f64);
        Ok(Self {
            design: design.clone(),
            responses: responses.to_vec(),
            corr,
            beta,
            sigma2,
            nugget: factor.nugget,
            factor,
            nll,
            scaling,
            unit,
            weights,
            rinv_one,
        })
    }

    pub fn dims(&self) -> usize {
        self.design.dims()
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    fn corr_vector(&self, x0: &[f64]) -> DVector<f64> {
        let u = self.scaling.apply(x0);
        DVector::from_iterator(
            self.n(),
            (0..self.n()).map(|i| {
                let row: Vec<f64> = self.unit.points.row(i).iter().copied().collect();
                corr_unchecked(&row, &u, &self.corr.lengths)
            }),
        )
    }

    /// Kriging mean and variance (with the correction for estimated `beta`).
    pub fn predict(&self, x0: &[f64]) -> Result<Prediction> {
        if x0.len() != self.dims() {
            return Err(Error::invalid(format!(
                "prediction point has {} coordinates, model expects {}",
                x0.len(),
                self.dims()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite prediction point"));
        }
        let r = self.corr_vector(x0);
        let mean = self.beta + r.dot(&self.weights);
        let rinv_r = self.factor.solve(&r);
        let one_rinv_one = self.rinv_one.sum();
        let u = 1.0 - self.rinv_one.dot(&r);
        let variance = self.sigma2 * (1.0 - r.dot(&rinv_r) + u * u / one_rinv_one);
        Ok(Prediction {
            mean,
            variance: variance.max(0.0),
        })
    }

    pub fn predict_mean(&self, x0: &[f64]) -> Result<f64> {
        if x0.len() != self.dims() {
            return Err(Error::invalid("prediction point dimension mismatch"));
        }
        Ok(self.beta + self.corr_vector(x0).dot(&self.weights))
    }

    /// Leave-one-out predictions from the factorization identities, with the
    /// correlation lengths and nugget held fixed and `beta` re-estimated.
    pub fn loo_predictions(&self) -> Vec<f64> {
        let n = self.n();
        let kinv = self.factor.chol.inverse();
        let one_rinv_one = self.rinv_one.sum();
        // Q = K^-1 - K^-1 1 1' K^-1 / (1' K^-1 1)
        let q = DMatrix::from_fn(n, n, |i, k| {
            kinv[(i, k)] - self.rinv_one[i] * self.rinv_one[k] / one_rinv_one
        });
        let y = DVector::from_column_slice(&self.responses);
        let qy = &q * &y;
        (0..n).map(|i| self.responses[i] - qy[i] / q[(i, i)]).collect()
    }

    pub fn loo_metrics(&self) -> Result<LooMetrics> {
        if self.n() < 3 {
            return Err(Error::invalid("leave-one-out needs at least 3 points"));
        }
        let predictions = self.loo_predictions();
        let (rmse, q2) = rmse_q2(&self.responses, &predictions)?;
        Ok(LooMetrics {
            rmse,
            q2,
            predictions,
        })
    }

    pub fn to_file(&self) -> GpModelFile {
        GpModelFile {
            design: self.design.rows(),
            responses: self.responses.clone(),
            lengths: self.corr.lengths.clone(),
            beta: self.beta,
            sigma2: self.sigma2,
            nugget: self.nugget,
        }
    }

    /// Rebuilds a model from its serialized form; the factorization is
    /// recomputed and the stored `beta`/`sigma2` are kept.
    pub fn from_file(file: &GpModelFile) -> Result<Self> {
        let design = DesignMatrix::from_rows(&file.design, false)?;
        let corr = CorrelationSpec::new(file.lengths.clone())?;
        let mut model = Self::with_hyperparameters(&design, &file.responses, corr, file.nugget)?;
        model.beta = file.beta;
        model.sigma2 = file.sigma2;
        let e = DVector::from_iterator(model.n(), file.responses.iter().map(|y| y - file.beta));
        model.weights = model.factor.solve(&e);
        Ok(model)
    }
}

/// Serialized kriging model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModelFile {
    pub design: Vec<Vec<f64>>,
    pub responses: Vec<f64>,
    pub lengths: Vec<f64>,
    pub beta: f64,
    pub sigma2: f64,
    pub nugget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooMetrics {
    pub rmse: f64,
    pub q2: f64,
    pub predictions: Vec<f64>,
}

/// RMSE and predictivity `Q2 = 1 - SSE / SST` of `predicted` against `observed`.
pub fn rmse_q2(observed: &[f64], predicted: &[f64]) -> Result<(f64, f64)> {
    let n = observed.len();
    if n == 0 || predicted.len() != n {
        return Err(Error::invalid("observed and predicted lengths differ"));
    }
    let mean = observed.iter().sum::<f64>() / n as f64;
    let sse: f64 = observed.iter().zip(predicted).map(|(y, p)| (p - y).powi(2)).sum();
    let sst: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    let rmse = (sse / n as f64).sqrt();
    if !(sst > 0.0) {
        return Err(Error::DegenerateResponse(
            "responses have zero variance, Q2 is undefined".into(),
        ));
    }
    Ok((rmse, 1.0 - sse / sst))
}

/// Per-start outcome of the likelihood search.
#[derive(Debug, Clone)]
struct StartOutcome {
    log_lengths: Vec<f64>,
    nll: f64,
    note: String,
}

/// Fits correlation lengths by multistart quasi-Newton minimization of the
/// concentrated negative log-likelihood in log-length space.
pub fn fit_gp(design: &DesignMatrix, responses: &[f64], config: &FitConfig) -> Result<GpModel> {
    check_training(design, responses, 3)?;
    let d = design.dims();
    let bounds = config.bounds_for(d)?;
    let lower: Vec<f64> = bounds.iter().map(|b| b.0.ln()).collect();
    let upper: Vec<f64> = bounds.iter().map(|b| b.1.ln()).collect();

    let scaling = InputScaling::from_design(design);
    let unit = scaling.apply_design(design);

    let starts: Vec<Vec<f64>> = if config.multistarts == 1 {
        vec![lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect()]
    } else {
        let lhd = lhd_sample(config.multistarts, d, config.seed)?;
        (0..config.multistarts)
            .map(|s| {
                (0..d)
                    .map(|j| lower[j] + lhd.points[(s, j)] * (upper[j] - lower[j]))
                    .collect()
            })
            .collect()
    };

    let opts = QuasiNewtonOptions {
        max_iters: config.max_iters,
        gtol: 1e-8,
        gtol_rel: 1e-8,
        ftol: 1e-12,
        xtol: 1e-10,
    };

    let objective = |phi: &[f64], grad: &mut [f64]| -> f64 {
        let lengths: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
        let r = correlation_matrix(&unit.points, &lengths);
        match factor_with_escalation(&r, config.nugget_floor) {
            Ok(factor) => {
                let (nll, g) = nll_gradient_from(&unit.points, &r, &factor, responses, &lengths);
                grad.copy_from_slice(&g);
                nll
            }
            Err(_) => f64::INFINITY,
        }
    };

    let outcomes: Vec<StartOutcome> = starts
        .par_iter()
        .map(|x0| {
            let m = minimize_box(objective, x0, &lower, &upper, &opts);
            StartOutcome {
                note: format!("start {:?}: nll {} ({:?})", x0, m.f, m.termination),
                log_lengths: m.x,
                nll: m.f,
            }
        })
        .collect();

    let best = outcomes
        .iter()
        .filter(|o| o.nll.is_finite())
        .min_by(|a, b| a.nll.total_cmp(&b.nll));
    let Some(best) = best else {
        return Err(Error::FitFailure {
            diagnostics: outcomes.into_iter().map(|o| o.note).collect(),
        });
    };
    let corr = CorrelationSpec::new(best.log_lengths.iter().map(|p| p.exp()).collect())?;
    GpModel::with_hyperparameters(design, responses, corr, config.nugget_floor)
}
