use ndarray::{Array2, ArrayView2, Zip};

use super::{OdeSystem, Solution, SolveStats};
use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth- minus fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const MAX_STEPS: usize = 1_000_000;

fn combo(y: &Array2<f64>, h: f64, terms: &[(f64, &Array2<f64>)]) -> Array2<f64> {
    let mut out = y.clone();
    for &(c, k) in terms {
        out.scaled_add(h * c, k);
    }
    out
}

fn scaled_error(y: &Array2<f64>, y_new: &Array2<f64>, err: &Array2<f64>, atol: f64, rtol: f64) -> f64 {
    let mut worst = 0.0f64;
    Zip::from(y).and(y_new).and(err).for_each(|&a, &b, &e| {
        let sc = atol + rtol * a.abs().max(b.abs());
        let r = (e / sc).abs();
        worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
    });
    worst
}

/// Adaptive Dormand–Prince 5(4) with FSAL and shared steps across rows.
///
/// Steps are shortened to land exactly on each save time. A step is
/// accepted when the largest component error, scaled by
/// `abs_tol + rel_tol * max(|y_old|, |y_new|)`, is at most one.
pub fn solve_dopri5<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: ArrayView2<f64>,
    rows: &[usize],
    span: (f64, f64),
    save_at: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Solution> {
    let n = rows.len();
    let (t0, t1) = span;
    let mut stats = SolveStats::default();
    let mut states = Vec::with_capacity(save_at.len());
    let mut y = y0.to_owned();
    let mut t = t0;
    let mut next_save = 0;
    while next_save < save_at.len() && save_at[next_save] <= t0 {
        states.push(y.clone());
        next_save += 1;
    }
    if t1 <= t0 || next_save == save_at.len() && save_at.last().is_some_and(|&s| s >= t1) {
        return Ok(Solution { states, stats });
    }
    let tv = |t: f64| vec![t; n];
    let mut k1 = sys.rhs(&tv(t), y.view(), rows)?;
    let mut h = initial_step(sys, &y, &k1, rows, t, t1 - t0, abs_tol, rel_tol)?;

    while t < t1 {
        if stats.accepted + stats.rejected >= MAX_STEPS {
            return Err(Error::Integration {
                t,
                reason: "maximum number of steps exceeded".into(),
            });
        }
        let target = if next_save < save_at.len() {
            save_at[next_save]
        } else {
            t1
        };
        let min_step = 1e-14 * t.abs().max(1.0);
        if h < min_step {
            return Err(Error::Integration {
                t,
                reason: "step size underflow".into(),
            });
        }
        let remaining = target - t;
        let (step, lands) = if h >= remaining || remaining - h < min_step {
            (remaining, true)
        } else {
            (h, false)
        };

        let k2 = sys.rhs(&tv(t + C2 * step), combo(&y, step, &[(A21, &k1)]).view(), rows)?;
        let k3 = sys.rhs(
            &tv(t + C3 * step),
            combo(&y, step, &[(A31, &k1), (A32, &k2)]).view(),
            rows,
        )?;
        let k4 = sys.rhs(
            &tv(t + C4 * step),
            combo(&y, step, &[(A41, &k1), (A42, &k2), (A43, &k3)]).view(),
            rows,
        )?;
        let k5 = sys.rhs(
            &tv(t + C5 * step),
            combo(&y, step, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]).view(),
            rows,
        )?;
        let k6 = sys.rhs(
            &tv(t + step),
            combo(&y, step, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]).view(),
            rows,
        )?;
        let y_new = combo(&y, step, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let t_new = if lands { target } else { t + step };
        let k7 = sys.rhs(&tv(t_new), y_new.view(), rows)?;
        let mut err = Array2::zeros(y.raw_dim());
        for (c, k) in [(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)] {
            err.scaled_add(step * c, k);
        }
        let e = scaled_error(&y, &y_new, &err, abs_tol, rel_tol);
        let fac = if e == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * e.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
        };
        if e <= 1.0 {
            stats.accepted += 1;
            stats.max_accepted_error = stats.max_accepted_error.max(e);
            t = t_new;
            y = y_new;
            k1 = k7;
            if lands && next_save < save_at.len() {
                while next_save < save_at.len() && save_at[next_save] <= t {
                    states.push(y.clone());
                    next_save += 1;
                }
            }
            // a truncated landing step says little about the next step size
            if !lands || step >= h {
                h = step * fac;
            }
        } else {
            stats.rejected += 1;
            if !e.is_finite() {
                h = step * FAC_MIN;
            } else {
                h = step * fac.min(1.0);
            }
        }
        if next_save == save_at.len() && save_at.last().is_some_and(|&s| s >= t1) {
            break;
        }
    }
    Ok(Solution { states, stats })
}

#[allow(clippy::too_many_arguments)]
fn initial_step<S: OdeSystem + ?Sized>(
    sys: &S,
    y: &Array2<f64>,
    f0: &Array2<f64>,
    rows: &[usize],
    t: f64,
    span: f64,
    atol: f64,
    rtol: f64,
) -> Result<f64> {
    let norm = |v: &Array2<f64>| -> f64 {
        let mut worst = 0.0f64;
        Zip::from(v).and(y).for_each(|&v, &y| {
            worst = worst.max((v / (atol + rtol * y.abs())).abs());
        });
        worst
    };
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = combo(y, h0, &[(1.0, f0)]);
    let f1 = sys.rhs(&vec![t + h0; rows.len()], y1.view(), rows)?;
    let d2 = norm(&(&f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let h = (100.0 * h0).min(h1).min(span);
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Integration {
            t,
            reason: "could not choose an initial step".into(),
        });
    }
    Ok(h)
}
