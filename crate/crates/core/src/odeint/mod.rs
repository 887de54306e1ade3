//! Initial-value-problem integrators over row-blocked states.
//!
//! A state is a `rows x dim` matrix whose rows evolve independently (a
//! block-diagonal system); `rows` carries an index per row that the system
//! uses to look up per-row constants such as covariates. Every row gets its
//! own time value so a single call can advance rows to different times.

mod dopri5;
mod rk4;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use dopri5::solve_dopri5;
pub use rk4::{rk4_step, Rk4Trajectory};

use crate::error::{Error, Result};

pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// Right-hand side for each row of `y` at the row's time `t[r]`.
    fn rhs(&self, t: &[f64], y: ArrayView2<f64>, rows: &[usize]) -> Result<Array2<f64>>;
}

/// A system whose right-hand side can be differentiated in reverse mode.
pub trait DiffOdeSystem: OdeSystem {
    type Tape;

    fn rhs_taped(&self, t: &[f64], y: ArrayView2<f64>, rows: &[usize]) -> Result<(Array2<f64>, Self::Tape)>;

    /// Given the cotangent of the right-hand side output, accumulates
    /// parameter gradients into `grad` and returns the state cotangent.
    fn rhs_vjp(&self, tape: &Self::Tape, cot: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Adaptive Dormand–Prince 5(4).
    Dopri5 { abs_tol: f64, rel_tol: f64 },
    /// Classic fixed-step fourth-order Runge–Kutta.
    Rk4 { step_size: f64 },
}

impl Method {
    pub fn dopri5(tol: f64) -> Self {
        Method::Dopri5 {
            abs_tol: tol,
            rel_tol: tol,
        }
    }

    pub fn rk4_steps_per_unit(steps: usize) -> Self {
        Method::Rk4 {
            step_size: 1.0 / steps as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::Dopri5 { abs_tol, rel_tol } if abs_tol > 0.0 && rel_tol > 0.0 => Ok(()),
            Method::Rk4 { step_size } if step_size > 0.0 && step_size.is_finite() => Ok(()),
            m => Err(Error::Invalid(format!("invalid solver settings {m:?}"))),
        }
    }
}

impl Default for Method {
    fn default() -> Self {
        Method::dopri5(1e-8)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveConfig {
    pub method: Method,
    /// Sorted output times.
    pub save_at: Vec<f64>,
}

impl SolveConfig {
    pub fn new(method: Method, save_at: Vec<f64>) -> Self {
        SolveConfig { method, save_at }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Largest scaled error estimate among accepted steps (dopri5 only).
    pub max_accepted_error: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// One `rows x dim` matrix per save time.
    pub states: Vec<Array2<f64>>,
    pub stats: SolveStats,
}

/// Integrates `y0` from `span.0` to `span.1` and returns the state at every
/// `cfg.save_at` time. Save points are hit exactly by splitting steps.
pub fn solve<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: ArrayView2<f64>,
    rows: &[usize],
    span: (f64, f64),
    cfg: &SolveConfig,
) -> Result<Solution> {
    cfg.method.validate()?;
    check_saves(&cfg.save_at, span)?;
    if y0.ncols() != sys.dim() || y0.nrows() != rows.len() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: sys.dim(),
            got: y0.ncols(),
        });
    }
    match cfg.method {
        Method::Dopri5 { abs_tol, rel_tol } => solve_dopri5(sys, y0, rows, span, &cfg.save_at, abs_tol, rel_tol),
        Method::Rk4 { step_size } => {
            let mut saves = cfg.save_at.clone();
            if span.1 > saves.last().copied().unwrap_or(span.0) {
                saves.push(span.1);
            }
            let per_row = vec![saves; rows.len()];
            let traj = Rk4Trajectory::forward(sys, y0, rows, span.0, step_size, &per_row)?;
            let states = (0..cfg.save_at.len())
                .map(|k| {
                    let mut out = Array2::zeros((rows.len(), sys.dim()));
                    for r in 0..rows.len() {
                        out.row_mut(r).assign(&traj.saved(r)[k]);
                    }
                    out
                })
                .collect();
            Ok(Solution {
                states,
                stats: SolveStats {
                    accepted: traj.n_steps(),
                    ..Default::default()
                },
            })
        }
    }
}

/// Reverse-mode gradient of a scalar loss through a fixed-step RK4 solve.
///
/// `cotangents[k]` is the loss cotangent of the state at `cfg.save_at[k]`.
/// Parameter gradients are accumulated into `grad`; the cotangent of `y0`
/// is returned.
pub fn solve_with_grad<S: DiffOdeSystem + ?Sized>(
    sys: &S,
    y0: ArrayView2<f64>,
    rows: &[usize],
    span: (f64, f64),
    cfg: &SolveConfig,
    cotangents: &[Array2<f64>],
    grad: &mut [f64],
) -> Result<Array2<f64>> {
    let Method::Rk4 { step_size } = cfg.method else {
        return Err(Error::Invalid(
            "gradients are only available for the fixed-step rk4 method".into(),
        ));
    };
    check_saves(&cfg.save_at, span)?;
    if cotangents.len() != cfg.save_at.len() {
        return Err(Error::Dimension {
            what: "save-point cotangents",
            expected: cfg.save_at.len(),
            got: cotangents.len(),
        });
    }
    let per_row = vec![cfg.save_at.clone(); rows.len()];
    let traj = Rk4Trajectory::forward(sys, y0, rows, span.0, step_size, &per_row)?;
    let cot: Vec<Vec<ndarray::Array1<f64>>> = (0..rows.len())
        .map(|r| cotangents.iter().map(|c| c.row(r).to_owned()).collect())
        .collect();
    traj.backward(sys, &cot, grad)
}

fn check_saves(save_at: &[f64], span: (f64, f64)) -> Result<()> {
    if !(span.0 <= span.1) {
        return Err(Error::Invalid(format!("bad span {span:?}")));
    }
    if save_at.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Invalid("save_at must be sorted".into()));
    }
    if let (Some(&lo), Some(&hi)) = (save_at.first(), save_at.last()) {
        if lo < span.0 || hi > span.1 {
            return Err(Error::Invalid(format!(
                "save_at [{lo}, {hi}] outside integration span {span:?}"
            )));
        }
    }
    Ok(())
}
