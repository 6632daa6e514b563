//! Functional surrogate: registration + one kriging model per deformation
//! parameter, predicting whole curves at new inputs.
//!
//! Training registers the training curves onto a common pattern, then fits
//! `alpha(x)`, `theta(x)` and `v(x)` on the design. A prediction is the
//! pattern deformed by the three predicted scalars, so no step of the output
//! grid needs its own model. [`PerStepSurrogate`] is the baseline that does
//! fit one model per time step.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doe::{DesignMatrix, InputBox};
use crate::error::{Error, Result};
use crate::gp::{fit_gp, FitConfig, GpModel, GpModelFile};
use crate::simreg::{estimate_params_blocked, extract_pattern, to_fourier, CurveSet, EstimationConfig, Pattern, TransformParams};

/// One of the three deformation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Alpha,
    Theta,
    V,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Alpha, Family::Theta, Family::V];

    pub fn name(self) -> &'static str {
        match self {
            Family::Alpha => "alpha",
            Family::Theta => "theta",
            Family::V => "v",
        }
    }

    fn stage(self) -> &'static str {
        match self {
            Family::Alpha => "gp-alpha",
            Family::Theta => "gp-theta",
            Family::V => "gp-v",
        }
    }

    fn values(self, p: &TransformParams) -> &[f64] {
        match self {
            Family::Alpha => &p.alpha,
            Family::Theta => &p.theta,
            Family::V => &p.v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub estimation: EstimationConfig,
    pub block_size: usize,
    pub gp: FitConfig,
    /// A family is held constant when its sample variance falls below
    /// `fixed_tol` times its scale (`mean(alpha^2)`, `1` for shifts in
    /// radians, `mean(Y^2)` for vertical shifts).
    pub fixed_tol: f64,
    /// Families held at their sample mean regardless of variance, in
    /// `alpha, theta, v` order.
    pub force_fixed: [bool; 3],
    /// Independent surrogates on this many contiguous time windows (1 = off).
    pub time_windows: usize,
    /// Box used to flag extrapolation; the design's bounding box if absent.
    pub input_box: Option<InputBox>,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            estimation: EstimationConfig::default(),
            block_size: 10,
            gp: FitConfig::default(),
            fixed_tol: 1e-10,
            force_fixed: [false; 3],
            time_windows: 1,
            input_box: None,
        }
    }
}

/// Input-to-parameter map: a kriging model or a constant.
#[derive(Debug, Clone)]
pub enum ParamModel {
    Gp(Box<GpModel>),
    Fixed(f64),
}

impl ParamModel {
    pub fn predict(&self, x0: &[f64]) -> Result<f64> {
        match self {
            ParamModel::Gp(m) => m.predict_mean(x0),
            ParamModel::Fixed(v) => Ok(*v),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, ParamModel::Fixed(_))
    }

    /// Leave-one-out Q2, for fitted models only.
    pub fn loo_q2(&self) -> Option<f64> {
        match self {
            ParamModel::Gp(m) => m.loo_metrics().ok().map(|l| l.q2),
            ParamModel::Fixed(_) => None,
        }
    }
}

/// Curve predicted at one input point.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePrediction {
    pub values: Vec<f64>,
    /// The point lies outside the training box.
    pub out_of_box: bool,
    pub alpha: f64,
    pub theta: f64,
    pub v: f64,
}

/// Anything that maps an input point to a curve on a fixed grid.
pub trait CurvePredictor: Sync {
    fn predict_curve(&self, x0: &[f64]) -> Result<CurvePrediction>;
    fn t_grid(&self) -> &[f64];
    fn dims(&self) -> usize;
    fn train_time(&self) -> Duration;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub params: TransformParams,
    /// Final contrast of each registration block.
    pub block_contrasts: Vec<f64>,
    pub dropped_last_sample: bool,
    pub train_time: Duration,
}

#[derive(Debug, Clone)]
pub struct FunctionalSurrogate {
    pub pattern: Pattern,
    pub alpha: ParamModel,
    pub theta: ParamModel,
    pub v: ParamModel,
    pub input_box: InputBox,
    pub t_grid: Vec<f64>,
    pub start: f64,
    pub period: f64,
    pub training: TrainingSummary,
}

fn bounding_box(design: &DesignMatrix) -> Result<InputBox> {
    let d = design.dims();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for row in design.rows() {
        for j in 0..d {
            lower[j] = lower[j].min(row[j]);
            upper[j] = upper[j].max(row[j]);
        }
    }
    for j in 0..d {
        if lower[j] >= upper[j] {
            let pad = 0.5 * lower[j].abs().max(1.0);
            lower[j] -= pad;
            upper[j] += pad;
        }
    }
    InputBox::new(lower, upper)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn check_training(design: &DesignMatrix, curves: &CurveSet) -> Result<()> {
    if design.n() != curves.n() {
        return Err(Error::invalid(format!(
            "design has {} rows but there are {} curves",
            design.n(),
            curves.n()
        )));
    }
    if design.n() < 4 {
        return Err(Error::invalid("training needs at least 4 curves"));
    }
    if design.dims() == 0 {
        return Err(Error::invalid("design has no columns"));
    }
    if design.points.iter().chain(curves.values.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data contain non-finite values"));
    }
    Ok(())
}

/// Registration, pattern extraction and one kriging model per non-constant
/// deformation family.
pub fn train(design: &DesignMatrix, curves: &CurveSet, config: &SurrogateConfig) -> Result<FunctionalSurrogate> {
    check_training(design, curves)?;
    let started = Instant::now();
    let input_box = match &config.input_box {
        Some(b) if b.dims() == design.dims() => b.clone(),
        Some(_) => return Err(Error::invalid("input box and design dimensions differ")),
        None => bounding_box(design)?,
    };

    let (curves, dropped) = curves.make_odd();
    let (params, diagnostics) = estimate_params_blocked(&curves, config.block_size, &config.estimation)
        .map_err(|e| e.at_stage("registration"))?;
    let table = to_fourier(&curves).map_err(|e| e.at_stage("pattern"))?;
    let pattern = extract_pattern(&table, &params).map_err(|e| e.at_stage("pattern"))?;

    let (lo, hi) = params
        .theta
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(*t), b.max(*t)));
    if hi - lo > PI {
        return Err(Error::EstimationFailure {
            block: None,
            message: format!(
                "estimated time shifts span {:.3} rad (> pi) and may wrap; re-order the curves so the reference sits mid-range",
                hi - lo
            ),
        }
        .at_stage(Family::Theta.stage()));
    }

    let mean_sq_curves = curves.values.iter().map(|y| y * y).sum::<f64>() / curves.values.len() as f64;
    let scale = |f: Family| -> f64 {
        match f {
            Family::Alpha => params.alpha.iter().map(|a| a * a).sum::<f64>() / params.n() as f64,
            Family::Theta => 1.0,
            Family::V => mean_sq_curves,
        }
        .max(f64::MIN_POSITIVE)
    };

    let models: Vec<Result<ParamModel>> = Family::ALL
        .par_iter()
        .enumerate()
        .map(|(i, &f)| {
            let y = f.values(&params);
            if config.force_fixed[i] || variance(y) <= config.fixed_tol * scale(f) {
                return Ok(ParamModel::Fixed(mean(y)));
            }
            fit_gp(design, y, &config.gp)
                .map(|m| ParamModel::Gp(Box::new(m)))
                .map_err(|e| e.at_stage(f.stage()))
        })
        .collect();
    let mut models = models.into_iter();
    let mut next = || models.next().expect("three families");
    let (alpha, theta, v) = (next()?, next()?, next()?);

    Ok(FunctionalSurrogate {
        pattern,
        alpha,
        theta,
        v,
        input_box,
        t_grid: curves.t_grid(),
        start: curves.start,
        period: curves.period,
        training: TrainingSummary {
            params,
            block_contrasts: diagnostics.iter().map(|d| d.contrast).collect(),
            dropped_last_sample: dropped,
            train_time: started.elapsed(),
        },
    })
}

fn check_point(x0: &[f64], dims: usize) -> Result<()> {
    if x0.len() != dims {
        return Err(Error::invalid(format!(
            "point has {} coordinates, the surrogate expects {dims}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite prediction point"));
    }
    Ok(())
}

impl FunctionalSurrogate {
    pub fn model(&self, f: Family) -> &ParamModel {
        match f {
            Family::Alpha => &self.alpha,
            Family::Theta => &self.theta,
            Family::V => &self.v,
        }
    }

    /// Which of `alpha, theta, v` are held constant.
    pub fn fixed_components(&self) -> [bool; 3] {
        Family::ALL.map(|f| self.model(f).is_fixed())
    }

    /// Leave-one-out Q2 of each fitted family (`None` when fixed).
    pub fn loo_q2(&self) -> [Option<f64>; 3] {
        Family::ALL.map(|f| self.model(f).loo_q2())
    }

    /// Largest block contrast after registration.
    pub fn contrast(&self) -> f64 {
        self.training.block_contrasts.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_file(&self) -> SurrogateFile {
        let file_of = |m: &ParamModel| match m {
            ParamModel::Gp(g) => ParamModelFile::Gp { model: g.to_file() },
            ParamModel::Fixed(v) => ParamModelFile::Fixed { value: *v },
        };
        SurrogateFile {
            t_grid: self.t_grid.clone(),
            start: self.start,
            period: self.period,
            pattern: PatternFile {
                values: self.pattern.values.clone(),
                coeffs_re: self.pattern.coeffs.iter().map(|z| z.re).collect(),
                coeffs_im: self.pattern.coeffs.iter().map(|z| z.im).collect(),
            },
            input_box: self.input_box.clone(),
            alpha: file_of(&self.alpha),
            theta: file_of(&self.theta),
            v: file_of(&self.v),
            training: TrainingFile {
                alpha: self.training.params.alpha.clone(),
                theta: self.training.params.theta.clone(),
                v: self.training.params.v.clone(),
                block_contrasts: self.training.block_contrasts.clone(),
                dropped_last_sample: self.training.dropped_last_sample,
                train_seconds: self.training.train_time.as_secs_f64(),
            },
        }
    }

    pub fn from_file(file: &SurrogateFile) -> Result<Self> {
        let model_of = |m: &ParamModelFile| -> Result<ParamModel> {
            Ok(match m {
                ParamModelFile::Gp { model } => ParamModel::Gp(Box::new(GpModel::from_file(model)?)),
                ParamModelFile::Fixed { value } => ParamModel::Fixed(*value),
            })
        };
        let p = &file.pattern;
        if p.coeffs_re.len() != p.coeffs_im.len() || p.coeffs_re.len() != file.t_grid.len() {
            return Err(Error::invalid("surrogate file: pattern and grid lengths differ"));
        }
        let coeffs: Vec<Complex64> = p.coeffs_re.iter().zip(&p.coeffs_im).map(|(&r, &i)| Complex64::new(r, i)).collect();
        let pattern = Pattern::from_coeffs(coeffs)?;
        let params = TransformParams {
            alpha: file.training.alpha.clone(),
            theta: file.training.theta.clone(),
            v: file.training.v.clone(),
        };
        let s = Self {
            pattern,
            alpha: model_of(&file.alpha)?,
            theta: model_of(&file.theta)?,
            v: model_of(&file.v)?,
            input_box: file.input_box.clone(),
            t_grid: file.t_grid.clone(),
            start: file.start,
            period: file.period,
            training: TrainingSummary {
                params,
                block_contrasts: file.training.block_contrasts.clone(),
                dropped_last_sample: file.training.dropped_last_sample,
                train_time: Duration::from_secs_f64(file.training.train_seconds.max(0.0)),
            },
        };
        for f in Family::ALL {
            if let ParamModel::Gp(m) = s.model(f) {
                if m.dims() != s.input_box.dims() {
                    return Err(Error::invalid("surrogate file: model and box dimensions differ"));
                }
            }
        }
        Ok(s)
    }
}

impl CurvePredictor for FunctionalSurrogate {
    /// `alpha(x0) f(t - theta(x0)) + v(x0)` on the training grid, shifting the
    /// pattern by Fourier phase rotation.
    fn predict_curve(&self, x0: &[f64]) -> Result<CurvePrediction> {
        check_point(x0, self.input_box.dims())?;
        let alpha = self.alpha.predict(x0)?;
        let theta = self.theta.predict(x0)?;
        let v = self.v.predict(x0)?;
        Ok(CurvePrediction {
            values: self.pattern.deform(alpha, theta, v),
            out_of_box: !self.input_box.contains(x0),
            alpha,
            theta,
            v,
        })
    }

    fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    fn dims(&self) -> usize {
        self.input_box.dims()
    }

    fn train_time(&self) -> Duration {
        self.training.train_time
    }
}

/// Window `[first, first + len)` of the full grid, trained on
/// `[train_first, train_first + train_len)` (one extra sample when `len` is even).
#[derive(Debug, Clone)]
pub struct Window {
    pub first: usize,
    pub len: usize,
    pub train_first: usize,
    pub surrogate: FunctionalSurrogate,
}

/// Independent surrogates on contiguous time windows.
#[derive(Debug, Clone)]
pub struct WindowedSurrogate {
    pub windows: Vec<Window>,
    pub t_grid: Vec<f64>,
    pub train_time: Duration,
}

/// Window boundaries: `count` near-equal contiguous pieces of `0..j`.
fn window_ranges(j: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if count == 0 || j / count < 3 {
        return Err(Error::invalid(format!(
            "cannot split {j} time steps into {count} windows of at least 3 steps"
        )));
    }
    let base = j / count;
    let extra = j % count;
    let mut out = Vec::with_capacity(count);
    let mut first = 0;
    for w in 0..count {
        let len = base + usize::from(w < extra);
        out.push((first, len));
        first += len;
    }
    Ok(out)
}

pub fn train_windowed(design: &DesignMatrix, curves: &CurveSet, config: &SurrogateConfig) -> Result<WindowedSurrogate> {
    check_training(design, curves)?;
    let started = Instant::now();
    let j = curves.len();
    let step = curves.step();
    let grid = curves.t_grid();
    let mut windows = Vec::new();
    for (first, len) in window_ranges(j, config.time_windows)? {
        // Registration needs an odd grid: borrow the next sample (or the
        // previous one for the last window) and trim it after prediction.
        let (train_first, train_len) = if len % 2 == 1 {
            (first, len)
        } else if first + len < j {
            (first, len + 1)
        } else {
            (first - 1, len + 1)
        };
        let sub = CurveSet::new(
            curves.values.columns(train_first, train_len).into_owned(),
            grid[train_first],
            step * train_len as f64,
        )?;
        let cfg = SurrogateConfig {
            time_windows: 1,
            ..config.clone()
        };
        let surrogate = train(design, &sub, &cfg).map_err(|e| e.at_stage("time window"))?;
        windows.push(Window {
            first,
            len,
            train_first,
            surrogate,
        });
    }
    Ok(WindowedSurrogate {
        windows,
        t_grid: grid,
        train_time: started.elapsed(),
    })
}

impl CurvePredictor for WindowedSurrogate {
    fn predict_curve(&self, x0: &[f64]) -> Result<CurvePrediction> {
        let mut values = Vec::with_capacity(self.t_grid.len());
        let mut out_of_box = false;
        let mut first_params = None;
        for w in &self.windows {
            let p = w.surrogate.predict_curve(x0)?;
            let skip = w.first - w.train_first;
            values.extend_from_slice(&p.values[skip..skip + w.len]);
            out_of_box |= p.out_of_box;
            first_params.get_or_insert((p.alpha, p.theta, p.v));
        }
        let (alpha, theta, v) = first_params.expect("at least one window");
        Ok(CurvePrediction {
            values,
            out_of_box,
            alpha,
            theta,
            v,
        })
    }

    fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    fn dims(&self) -> usize {
        self.windows[0].surrogate.dims()
    }

    fn train_time(&self) -> Duration {
        self.train_time
    }
}

/// A trained curve emulator, single or windowed.
#[derive(Debug, Clone)]
pub enum Emulator {
    Single(FunctionalSurrogate),
    Windowed(WindowedSurrogate),
}

/// Trains a windowed emulator when `config.time_windows > 1`.
pub fn train_emulator(design: &DesignMatrix, curves: &CurveSet, config: &SurrogateConfig) -> Result<Emulator> {
    if config.time_windows > 1 {
        train_windowed(design, curves, config).map(Emulator::Windowed)
    } else {
        train(design, curves, config).map(Emulator::Single)
    }
}

impl Emulator {
    pub fn surrogates(&self) -> Vec<&FunctionalSurrogate> {
        match self {
            Emulator::Single(s) => vec![s],
            Emulator::Windowed(w) => w.windows.iter().map(|w| &w.surrogate).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Emulator::Single(s) => EmulatorFile::Single(s.to_file()),
            Emulator::Windowed(w) => EmulatorFile::Windowed {
                t_grid: w.t_grid.clone(),
                train_seconds: w.train_time.as_secs_f64(),
                windows: w
                    .windows
                    .iter()
                    .map(|win| WindowFile {
                        first: win.first,
                        len: win.len,
                        train_first: win.train_first,
                        surrogate: win.surrogate.to_file(),
                    })
                    .collect(),
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(match serde_json::from_str::<EmulatorFile>(text)? {
            EmulatorFile::Single(s) => Emulator::Single(FunctionalSurrogate::from_file(&s)?),
            EmulatorFile::Windowed {
                t_grid,
                train_seconds,
                windows,
            } => {
                if windows.is_empty() {
                    return Err(Error::invalid("surrogate file: no time windows"));
                }
                let windows = windows
                    .iter()
                    .map(|w| {
                        let surrogate = FunctionalSurrogate::from_file(&w.surrogate)?;
                        if w.first < w.train_first
                            || w.first - w.train_first + w.len > surrogate.t_grid.len()
                            || w.first + w.len > t_grid.len()
                        {
                            return Err(Error::invalid("surrogate file: inconsistent window bounds"));
                        }
                        Ok(Window {
                            first: w.first,
                            len: w.len,
                            train_first: w.train_first,
                            surrogate,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Emulator::Windowed(WindowedSurrogate {
                    windows,
                    t_grid,
                    train_time: Duration::from_secs_f64(train_seconds.max(0.0)),
                })
            }
        })
    }
}

impl CurvePredictor for Emulator {
    fn predict_curve(&self, x0: &[f64]) -> Result<CurvePrediction> {
        match self {
            Emulator::Single(s) => s.predict_curve(x0),
            Emulator::Windowed(w) => w.predict_curve(x0),
        }
    }

    fn t_grid(&self) -> &[f64] {
        match self {
            Emulator::Single(s) => s.t_grid(),
            Emulator::Windowed(w) => w.t_grid(),
        }
    }

    fn dims(&self) -> usize {
        match self {
            Emulator::Single(s) => s.dims(),
            Emulator::Windowed(w) => w.dims(),
        }
    }

    fn train_time(&self) -> Duration {
        match self {
            Emulator::Single(s) => s.train_time(),
            Emulator::Windowed(w) => w.train_time(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternFile {
    pub values: Vec<f64>,
    pub coeffs_re: Vec<f64>,
    pub coeffs_im: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamModelFile {
    Gp { model: GpModelFile },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingFile {
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
    pub block_contrasts: Vec<f64>,
    pub dropped_last_sample: bool,
    // Wall-clock time is a property of the run, not the model; leaving it out
    // keeps serialized surrogates byte-identical across reruns.
    #[serde(default, skip_serializing)]
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFile {
    pub t_grid: Vec<f64>,
    pub start: f64,
    pub period: f64,
    pub pattern: PatternFile,
    pub input_box: InputBox,
    pub alpha: ParamModelFile,
    pub theta: ParamModelFile,
    pub v: ParamModelFile,
    pub training: TrainingFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFile {
    pub first: usize,
    pub len: usize,
    pub train_first: usize,
    pub surrogate: SurrogateFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmulatorFile {
    Single(SurrogateFile),
    Windowed {
        t_grid: Vec<f64>,
        #[serde(default, skip_serializing)]
        train_seconds: f64,
        windows: Vec<WindowFile>,
    },
}

/// One kriging model per time step on the raw responses.
#[derive(Debug, Clone)]
pub struct PerStepSurrogate {
    pub models: Vec<ParamModel>,
    pub t_grid: Vec<f64>,
    pub input_box: InputBox,
    pub train_time: Duration,
}

/// Baseline: an independent kriging model per time step. Steps whose
/// responses are constant get a constant predictor.
pub fn train_per_step(design: &DesignMatrix, curves: &CurveSet, gp: &FitConfig) -> Result<PerStepSurrogate> {
    check_training(design, curves)?;
    let started = Instant::now();
    let models = (0..curves.len())
        .map(|j| {
            let y: Vec<f64> = curves.values.column(j).iter().copied().collect();
            let scale = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
            if variance(&y) <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                return Ok(ParamModel::Fixed(mean(&y)));
            }
            fit_gp(design, &y, gp)
                .map(|m| ParamModel::Gp(Box::new(m)))
                .map_err(|e| e.at_stage("per-step gp"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerStepSurrogate {
        models,
        t_grid: curves.t_grid(),
        input_box: bounding_box(design)?,
        train_time: started.elapsed(),
    })
}

impl CurvePredictor for PerStepSurrogate {
    fn predict_curve(&self, x0: &[f64]) -> Result<CurvePrediction> {
        check_point(x0, self.input_box.dims())?;
        let values = self.models.iter().map(|m| m.predict(x0)).collect::<Result<Vec<_>>>()?;
        Ok(CurvePrediction {
            values,
            out_of_box: !self.input_box.contains(x0),
            alpha: f64::NAN,
            theta: f64::NAN,
            v: f64::NAN,
        })
    }

    fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    fn dims(&self) -> usize {
        self.input_box.dims()
    }

    fn train_time(&self) -> Duration {
        self.train_time
    }
}

/// Per-step predictivity on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub t: Vec<f64>,
    pub per_step_rmse: Vec<f64>,
    /// NaN at flagged steps.
    pub per_step_q2: Vec<f64>,
    /// Steps whose test responses have (near) zero variance.
    pub flags: Vec<bool>,
    pub overall_rmse: f64,
    pub runtime_train: Duration,
    pub runtime_predict: Duration,
    /// `n_test x J` predicted curves.
    pub predictions: DMatrix<f64>,
    pub out_of_box: Vec<bool>,
}

impl ValidationReport {
    /// Mean Q2 over unflagged steps (NaN if every step is flagged).
    pub fn mean_q2(&self) -> f64 {
        let kept: Vec<f64> = self.per_step_q2.iter().copied().filter(|q| !q.is_nan()).collect();
        if kept.is_empty() {
            f64::NAN
        } else {
            mean(&kept)
        }
    }
}

/// Relative variance below which a step counts as degenerate.
pub const DEGENERATE_TOL: f64 = 1e-12;

/// Aligns a test set to the predictor's grid (dropping the trailing sample of
/// an even grid when the predictor was trained on the trimmed grid).
fn conform_test_curves(grid_len: usize, curves: &CurveSet) -> Result<CurveSet> {
    if curves.len() == grid_len {
        return Ok(curves.clone());
    }
    let (odd, dropped) = curves.make_odd();
    if dropped && odd.len() == grid_len {
        return Ok(odd);
    }
    Err(Error::invalid(format!(
        "test curves have {} time steps, the surrogate predicts {}",
        curves.len(),
        grid_len
    )))
}

pub fn validate<P: CurvePredictor + ?Sized>(
    surrogate: &P,
    test_design: &DesignMatrix,
    test_curves: &CurveSet,
) -> Result<ValidationReport> {
    validate_with(surrogate, test_design, test_curves, DEGENERATE_TOL)
}

/// Predicts every test point and scores each time step separately.
/// Steps whose variance is at most `degenerate_tol * mean(Y^2)` are flagged
/// and get a NaN Q2.
pub fn validate_with<P: CurvePredictor + ?Sized>(
    surrogate: &P,
    test_design: &DesignMatrix,
    test_curves: &CurveSet,
    degenerate_tol: f64,
) -> Result<ValidationReport> {
    if test_design.n() != test_curves.n() {
        return Err(Error::invalid(format!(
            "test design has {} rows but there are {} test curves",
            test_design.n(),
            test_curves.n()
        )));
    }
    if test_design.n() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    if test_design.dims() != surrogate.dims() {
        return Err(Error::invalid("test design dimension does not match the surrogate"));
    }
    let j = surrogate.t_grid().len();
    let truth = conform_test_curves(j, test_curves)?;
    let n = truth.n();

    let started = Instant::now();
    let preds = (0..n)
        .into_par_iter()
        .map(|i| surrogate.predict_curve(&test_design.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let runtime_predict = started.elapsed();

    let predictions = DMatrix::from_fn(n, j, |i, m| preds[i].values[m]);
    let scale = (truth.values.iter().map(|y| y * y).sum::<f64>() / truth.values.len() as f64).max(f64::MIN_POSITIVE);

    let mut per_step_rmse = Vec::with_capacity(j);
    let mut per_step_q2 = Vec::with_capacity(j);
    let mut flags = Vec::with_capacity(j);
    let mut total_sse = 0.0;
    for m in 0..j {
        let y: Vec<f64> = truth.values.column(m).iter().copied().collect();
        let yhat: Vec<f64> = predictions.column(m).iter().copied().collect();
        let sse: f64 = y.iter().zip(&yhat).map(|(a, b)| (a - b).powi(2)).sum();
        total_sse += sse;
        per_step_rmse.push((sse / n as f64).sqrt());
        let degenerate = n < 2 || variance(&y) <= degenerate_tol * scale;
        flags.push(degenerate);
        if degenerate {
            per_step_q2.push(f64::NAN);
        } else {
            let sst = variance(&y) * n as f64;
            per_step_q2.push(1.0 - sse / sst);
        }
    }

    Ok(ValidationReport {
        t: surrogate.t_grid().to_vec(),
        per_step_rmse,
        per_step_q2,
        flags,
        overall_rmse: (total_sse / (n * j) as f64).sqrt(),
        runtime_train: surrogate.train_time(),
        runtime_predict,
        predictions,
        out_of_box: preds.iter().map(|p| p.out_of_box).collect(),
    })
}

/// One point of a predicted-vs-true crossplot.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossplotPoint {
    pub truth: f64,
    pub predicted: f64,
    pub method: &'static str,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub sim: ValidationReport,
    pub per_step: ValidationReport,
    pub sim_train_time: Duration,
    pub per_step_train_time: Duration,
    pub crossplot: Vec<CrossplotPoint>,
}

pub const SIM_METHOD: &str = "sim";
pub const PER_STEP_METHOD: &str = "per_step";

/// Trains the functional surrogate and the per-step baseline on the same
/// data and validates both on the same test set.
pub fn benchmark_against_per_step(
    design: &DesignMatrix,
    curves: &CurveSet,
    test_design: &DesignMatrix,
    test_curves: &CurveSet,
    config: &SurrogateConfig,
) -> Result<BenchmarkReport> {
    let sim = train_emulator(design, curves, config).map_err(|e| e.at_stage("sim training"))?;
    let (odd, _) = curves.make_odd();
    let baseline_curves = if config.time_windows > 1 { curves } else { &odd };
    let baseline = train_per_step(design, baseline_curves, &config.gp)?;
    let sim_report = validate(&sim, test_design, test_curves).map_err(|e| e.at_stage("sim validation"))?;
    let base_report = validate(&baseline, test_design, test_curves).map_err(|e| e.at_stage("per-step validation"))?;

    let truth = conform_test_curves(sim_report.t.len(), test_curves)?;
    let mut crossplot = Vec::with_capacity(2 * truth.values.len());
    for (method, report) in [(SIM_METHOD, &sim_report), (PER_STEP_METHOD, &base_report)] {
        for m in 0..truth.len() {
            for i in 0..truth.n() {
                crossplot.push(CrossplotPoint {
                    truth: truth.values[(i, m)],
                    predicted: report.predictions[(i, m)],
                    method,
                    step: m,
                });
            }
        }
    }
    Ok(BenchmarkReport {
        sim_train_time: sim.train_time(),
        per_step_train_time: baseline.train_time,
        sim: sim_report,
        per_step: base_report,
        crossplot,
    })
}
