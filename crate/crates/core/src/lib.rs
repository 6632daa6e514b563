//! Functional surrogates for time-series simulators.
//!
//! Curves produced by a simulator at different input settings are registered
//! onto one common shape under a per-curve amplitude scale, time shift and
//! vertical offset ([`simreg`]). Only those three scalars then depend on the
//! inputs, and each gets its own kriging model ([`gp`]); a new curve is the
//! common shape deformed by the three predicted scalars ([`emulator`]).

pub mod doe;
pub mod emulator;
pub mod error;
pub mod gp;
pub mod io;
pub mod optim;
pub mod simreg;
pub mod synth;

pub use doe::{lhd_sample, maximin_lhd, scale_to_box, DesignMatrix, InputBox};
pub use emulator::{
    benchmark_against_per_step, train, train_emulator, train_per_step, validate, BenchmarkReport, CurvePrediction,
    CurvePredictor, Emulator, FunctionalSurrogate, SurrogateConfig, ValidationReport,
};
pub use error::{Error, Result};
pub use gp::{fit_gp, CorrelationSpec, FitConfig, GpModel, Prediction};
pub use simreg::{
    align_curves, contrast, estimate_params, estimate_params_blocked, extract_pattern, make_weights, rephase,
    to_fourier, CurveSet, EstimationConfig, FourierTable, Pattern, TransformParams, WeightSequence,
};
pub use synth::{generate_analytical, generate_functional_sim, SimSpec};
