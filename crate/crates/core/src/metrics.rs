//! Discrimination and calibration scores for survival and multi-state
//! predictions.
//!
//! Censoring is handled with inverse-probability-of-censoring weights from
//! the censoring Kaplan–Meier curve (Graf-style). Weights are capped at
//! [`WEIGHT_CAP`]; every capped weight is counted and reported.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonparam::{censoring_km, StepFunction};
use crate::statespace::Dataset;
use crate::variational::{quantile_sorted, IntervalBand};

pub const WEIGHT_CAP: f64 = 100.0;
pub const G_FLOOR: f64 = 1e-3;
/// Probability clamp used by the binomial log-likelihood.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRule {
    Quantile,
    Uniform,
}

/// Sorted evaluation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub times: Vec<f64>,
    pub rule: GridRule,
}

impl EvalGrid {
    /// `n` points at equally spaced quantile levels in `[0.01, 0.99]` of the
    /// observed event times; duplicate times are merged.
    pub fn quantile(event_times: &[f64], n: usize) -> Result<Self> {
        let mut t: Vec<f64> = event_times.iter().copied().filter(|t| t.is_finite()).collect();
        if t.is_empty() || n == 0 {
            return Err(Error::Invalid("quantile grid needs event times and n > 0".into()));
        }
        t.sort_by(f64::total_cmp);
        let mut times: Vec<f64> = (0..n)
            .map(|k| {
                let q = if n == 1 {
                    0.5
                } else {
                    0.01 + 0.98 * k as f64 / (n - 1) as f64
                };
                quantile_sorted(&t, q)
            })
            .collect();
        times.dedup();
        Ok(EvalGrid {
            times,
            rule: GridRule::Quantile,
        })
    }

    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if !(end > start) || n < 2 {
            return Err(Error::Invalid("uniform grid needs end > start and n >= 2".into()));
        }
        let times = (0..n)
            .map(|k| start + (end - start) * k as f64 / (n - 1) as f64)
            .collect();
        Ok(EvalGrid {
            times,
            rule: GridRule::Uniform,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-subject survival curves tabulated on shared times; evaluation
/// interpolates linearly and holds the end values flat outside.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurves {
    pub times: Vec<f64>,
    /// `subjects x times`.
    pub values: Array2<f64>,
}

impl SurvivalCurves {
    pub fn new(times: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        if times.is_empty() || values.ncols() != times.len() {
            return Err(Error::Dimension {
                what: "curve columns",
                expected: times.len(),
                got: values.ncols(),
            });
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("curve times must be strictly increasing".into()));
        }
        Ok(SurvivalCurves { times, values })
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn eval(&self, i: usize, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        let row = self.values.row(i);
        if k == 0 {
            return row[0];
        }
        if k == self.times.len() {
            return row[k - 1];
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let f = (t - t0) / (t1 - t0);
        row[k - 1] + f * (row[k] - row[k - 1])
    }
}

fn check_subjects(n_pred: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != n_pred || events.len() != n_pred {
        return Err(Error::Dimension {
            what: "subjects in predictions",
            expected: times.len(),
            got: n_pred,
        });
    }
    if n_pred == 0 {
        return Err(Error::Invalid("no subjects".into()));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid(
            "evaluation grid must be non-empty and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Time-dependent concordance: over pairs where `i` has an observed event
/// at `t_i` and `t_j > t_i`, the fraction with `S_i(t_i) < S_j(t_i)`
/// (prediction ties count one half).
pub fn concordance_td(curves: &SurvivalCurves, times: &[f64], events: &[bool]) -> Result<f64> {
    let n = curves.n_subjects();
    check_subjects(n, times, events)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut concordant, mut pairs) = (0.0, 0u64);
    for (pos, &i) in order.iter().enumerate() {
        if !events[i] {
            continue;
        }
        let ti = times[i];
        let si = curves.eval(i, ti);
        let first_later = pos + order[pos..].partition_point(|&j| times[j] <= ti);
        for &j in &order[first_later..] {
            let sj = curves.eval(j, ti);
            pairs += 1;
            if si < sj {
                concordant += 1.0;
            } else if si == sj {
                concordant += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Invalid("no comparable pairs".into()));
    }
    Ok(concordant / pairs as f64)
}

/// A score tabulated over an evaluation grid plus its time average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Trapezoidal integral divided by the grid span (the value itself for
    /// a single-point grid).
    pub integrated: f64,
    /// Number of IPCW weights that hit the cap.
    pub capped_weights: usize,
}

pub fn time_average(grid: &[f64], values: &[f64]) -> f64 {
    if grid.len() == 1 {
        return values[0];
    }
    let area: f64 = grid
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum();
    area / (grid[grid.len() - 1] - grid[0])
}

struct Weighter<'a> {
    g: &'a StepFunction,
    capped: usize,
}

impl Weighter<'_> {
    fn weight(&mut self, g: f64) -> f64 {
        let w = 1.0 / g.max(G_FLOOR);
        if w > WEIGHT_CAP {
            self.capped += 1;
            WEIGHT_CAP
        } else {
            w
        }
    }

    /// Weight and target indicator `1{T > t}` for one subject, or `None`
    /// when the subject was censored at or before `t`.
    fn status(&mut self, ti: f64, event: bool, t: f64) -> Option<(f64, f64)> {
        if ti > t {
            let g = self.g.eval(t);
            Some((self.weight(g), 1.0))
        } else if event {
            let g = self.g.eval_left(ti);
            Some((self.weight(g), 0.0))
        } else {
            None
        }
    }
}

fn ipcw_score(
    curves: &SurvivalCurves,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
    grid: &[f64],
    loss: impl Fn(f64, f64) -> f64,
) -> Result<ScoreCurve> {
    let n = curves.n_subjects();
    check_subjects(n, times, events)?;
    check_grid(grid)?;
    let mut w = Weighter { g, capped: 0 };
    let values: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            for i in 0..n {
                if let Some((wt, y)) = w.status(times[i], events[i], t) {
                    acc += wt * loss(y, curves.eval(i, t));
                }
            }
            acc / n as f64
        })
        .collect();
    if w.capped > 0 {
        log::warn!("{} IPCW weights capped at {WEIGHT_CAP}", w.capped);
    }
    Ok(ScoreCurve {
        integrated: time_average(grid, &values),
        grid: grid.to_vec(),
        values,
        capped_weights: w.capped,
    })
}

/// IPCW Brier score curve; `integrated` is the integrated Brier score.
pub fn brier_ipcw(
    curves: &SurvivalCurves,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
    grid: &[f64],
) -> Result<ScoreCurve> {
    ipcw_score(curves, times, events, g, grid, |y, s| (y - s).powi(2))
}

/// IPCW binomial log-likelihood curve; `integrated` is the integrated
/// value. Higher is better; probabilities are clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn ibll(
    curves: &SurvivalCurves,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
    grid: &[f64],
) -> Result<ScoreCurve> {
    ipcw_score(curves, times, events, g, grid, |y, s| {
        let s = s.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        y * s.ln() + (1.0 - y) * (1.0 - s).ln()
    })
}

/// Event times and flags of a multi-state dataset for censoring weights:
/// the event is reaching an absorbing state.
pub fn absorption_data(ds: &Dataset) -> (Vec<f64>, Vec<bool>) {
    ds.subjects
        .iter()
        .map(|s| {
            let absorbed = ds.topology.is_absorbing(s.final_state()) && s.effective_last_observed(&ds.topology);
            (s.final_time(), absorbed)
        })
        .unzip()
}

/// Censoring curve for a dataset, from [`absorption_data`].
pub fn censoring_curve(ds: &Dataset) -> Result<StepFunction> {
    let (t, e) = absorption_data(ds);
    censoring_km(&t, &e)
}

/// Per-state Brier curves with per-state time averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStateBrier {
    pub grid: Vec<f64>,
    /// `grid x states`.
    pub values: Array2<f64>,
    pub integrated: Vec<f64>,
    pub capped_weights: usize,
}

fn per_state_average(grid: &[f64], values: &Array2<f64>) -> Vec<f64> {
    values
        .columns()
        .into_iter()
        .map(|c| time_average(grid, &c.to_vec()))
        .collect()
}

fn check_occupation(pred: &[Array2<f64>], n: usize, grid: usize, states: usize) -> Result<()> {
    if pred.len() != n {
        return Err(Error::Dimension {
            what: "subjects in predictions",
            expected: n,
            got: pred.len(),
        });
    }
    for p in pred {
        if p.dim() != (grid, states) {
            return Err(Error::Dimension {
                what: "occupation prediction rows",
                expected: grid,
                got: p.nrows(),
            });
        }
    }
    Ok(())
}

/// IPCW Brier score of occupation predictions (`grid x S` per subject),
/// one curve per state. Subjects still under observation after `t` are
/// weighted `1/G(t)`, absorbed subjects `1/G(T-)`, censored ones zero.
pub fn multistate_brier(pred: &[Array2<f64>], ds: &Dataset, g: &StepFunction, grid: &[f64]) -> Result<MultiStateBrier> {
    check_grid(grid)?;
    let s_n = ds.topology.n_states();
    check_occupation(pred, ds.len(), grid.len(), s_n)?;
    let (times, events) = absorption_data(ds);
    let mut w = Weighter { g, capped: 0 };
    let mut values = Array2::zeros((grid.len(), s_n));
    for (k, &t) in grid.iter().enumerate() {
        let mut acc = Array1::<f64>::zeros(s_n);
        for (i, subj) in ds.subjects.iter().enumerate() {
            let Some((wt, _)) = w.status(times[i], events[i], t) else {
                continue;
            };
            let y = if times[i] > t {
                subj.state_at(t, &ds.topology)
            } else {
                Some(subj.final_state())
            };
            let Some(y) = y else { continue };
            for j in 0..s_n {
                let ind = if j == y { 1.0 } else { 0.0 };
                acc[j] += wt * (ind - pred[i][[k, j]]).powi(2);
            }
        }
        values.row_mut(k).assign(&(acc / ds.len() as f64));
    }
    Ok(MultiStateBrier {
        integrated: per_state_average(grid, &values),
        grid: grid.to_vec(),
        values,
        capped_weights: w.capped,
    })
}

/// Mean squared difference between predicted and true occupation curves,
/// per grid time and state.
pub fn brier_vs_truth(pred: &[Array2<f64>], truth: &[Array2<f64>], grid: &[f64]) -> Result<MultiStateBrier> {
    check_grid(grid)?;
    let Some(first) = truth.first() else {
        return Err(Error::Invalid("no subjects".into()));
    };
    let s_n = first.ncols();
    check_occupation(truth, truth.len(), grid.len(), s_n)?;
    check_occupation(pred, truth.len(), grid.len(), s_n)?;
    let mut values = Array2::zeros((grid.len(), s_n));
    for (p, q) in pred.iter().zip(truth) {
        values += &(p - q).mapv(|d| d * d);
    }
    values /= truth.len() as f64;
    Ok(MultiStateBrier {
        integrated: per_state_average(grid, &values),
        grid: grid.to_vec(),
        values,
        capped_weights: 0,
    })
}

/// Fraction of (subject, grid time, state) cells whose true probability
/// lies inside the band, boundaries included.
pub fn interval_coverage(bands: &[IntervalBand], truth: &[Array2<f64>], grid: &[f64]) -> Result<f64> {
    if bands.len() != truth.len() || bands.is_empty() {
        return Err(Error::Dimension {
            what: "subjects in bands",
            expected: truth.len(),
            got: bands.len(),
        });
    }
    let (mut inside, mut total) = (0usize, 0usize);
    for (b, q) in bands.iter().zip(truth) {
        if b.times.len() != grid.len() || b.times.iter().zip(grid).any(|(a, c)| (a - c).abs() > 1e-12) {
            return Err(Error::Invalid("band times do not match the evaluation grid".into()));
        }
        if b.lo.dim() != q.dim() || b.hi.dim() != q.dim() {
            return Err(Error::Dimension {
                what: "band shape",
                expected: q.len(),
                got: b.lo.len(),
            });
        }
        for ((&lo, &hi), &p) in b.lo.iter().zip(b.hi.iter()).zip(q.iter()) {
            inside += usize::from(lo <= p && p <= hi);
            total += 1;
        }
    }
    Ok(inside as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{ground_truth, preset, sample_paths};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_curves(n: usize, grid: &[f64], v: f64) -> SurvivalCurves {
        SurvivalCurves::new(grid.to_vec(), Array2::from_elem((n, grid.len()), v)).unwrap()
    }

    #[test]
    fn concordance_examples() {
        let grid = [0.0, 3.0];
        let c = SurvivalCurves::new(grid.to_vec(), ndarray::array![[0.3, 0.3], [0.8, 0.8]]).unwrap();
        assert_eq!(concordance_td(&c, &[1.0, 2.0], &[true, true]).unwrap(), 1.0);
        let same = constant_curves(5, &grid, 0.4);
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(concordance_td(&same, &t, &[true; 5]).unwrap(), 0.5);
        assert!(concordance_td(&same, &t, &[false; 5]).is_err());
    }

    #[test]
    fn concordance_of_random_predictions_is_half() {
        let p = preset("two-state-smoke").unwrap();
        let mut cs = Vec::new();
        for seed in 0..50 {
            let sim = sample_paths(&p.spec, 100, seed).unwrap();
            let (t, e): (Vec<f64>, Vec<bool>) = sim.dataset.subjects.iter().map(|s| s.first_exit()).unzip();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let v = Array2::from_shape_fn((100, 1), |_| rng.random::<f64>());
            let c = SurvivalCurves::new(vec![0.0], v).unwrap();
            cs.push(concordance_td(&c, &t, &e).unwrap());
        }
        let mean = cs.iter().sum::<f64>() / 50.0;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn brier_perfect_and_constant() {
        let t = [1.0, 2.0, 3.0];
        let ev = [true; 3];
        let g = censoring_km(&t, &ev).unwrap();
        let grid = [0.5, 1.5, 2.5];
        // indicator predictions 1{T_i > t} on the grid
        let v = Array2::from_shape_fn((3, 3), |(i, k)| f64::from(u8::from(t[i] > grid[k])));
        let perfect = SurvivalCurves {
            times: grid.to_vec(),
            values: v,
        };
        let b = brier_ipcw(&perfect, &t, &ev, &g, &grid).unwrap();
        assert!(b.values.iter().all(|&x| x == 0.0));
        let l = ibll(&perfect, &t, &ev, &g, &grid).unwrap();
        assert!(l.integrated.abs() < 1e-6);
        let half = constant_curves(3, &grid, 0.5);
        let b = brier_ipcw(&half, &t, &ev, &g, &grid).unwrap();
        assert!(b.values.iter().all(|&x| x == 0.25));
        assert_eq!(b.integrated, 0.25);
        let l = ibll(&half, &t, &ev, &g, &grid).unwrap();
        assert!(l.values.iter().all(|&x| (x - 0.5f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn brier_without_censoring_is_unweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
        let ev = vec![true; n];
        let grid: Vec<f64> = (1..10).map(|k| k as f64 * 0.5).collect();
        let v = Array2::from_shape_fn((n, grid.len()), |_| rng.random::<f64>());
        let c = SurvivalCurves::new(grid.clone(), v.clone()).unwrap();
        let g = censoring_km(&t, &ev).unwrap();
        let b = brier_ipcw(&c, &t, &ev, &g, &grid).unwrap();
        for (k, &tk) in grid.iter().enumerate() {
            let plain: f64 = (0..n)
                .map(|i| (f64::from(u8::from(t[i] > tk)) - v[[i, k]]).powi(2))
                .sum::<f64>()
                / n as f64;
            assert_eq!(b.values[k], plain);
        }
    }

    #[test]
    fn weights_are_capped_and_counted() {
        // one survivor past heavy censoring: G(t) = 1/200 at the end
        let mut t: Vec<f64> = (1..=199).map(f64::from).collect();
        t.push(500.0);
        let mut ev = vec![false; 200];
        ev[199] = true;
        let g = censoring_km(&t, &ev).unwrap();
        let c = constant_curves(200, &[0.0, 600.0], 0.5);
        let b = brier_ipcw(&c, &t, &ev, &g, &[300.0]).unwrap();
        assert_eq!(b.capped_weights, 1);
        assert!((b.values[0] - WEIGHT_CAP * 0.25 / 200.0).abs() < 1e-15);
    }

    fn subject_curves(occ: &[Array2<f64>], state: usize, grid: &[f64]) -> SurvivalCurves {
        let v = Array2::from_shape_fn((occ.len(), grid.len()), |(i, k)| occ[i][[k, state]]);
        SurvivalCurves::new(grid.to_vec(), v).unwrap()
    }

    #[test]
    fn multistate_reduces_to_survival_brier() {
        let p = preset("survival-coverage").unwrap();
        let sim = sample_paths(&p.spec, 300, 9).unwrap();
        let ds = &sim.dataset;
        let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 0.14).collect();
        let truth = ground_truth(&p.spec, ds, &grid).unwrap();
        let g = censoring_curve(ds).unwrap();
        let ms = multistate_brier(&truth, ds, &g, &grid).unwrap();
        let (t, e): (Vec<f64>, Vec<bool>) = ds.subjects.iter().map(|s| s.first_exit()).unzip();
        let b = brier_ipcw(&subject_curves(&truth, 0, &grid), &t, &e, &g, &grid).unwrap();
        for k in 0..grid.len() {
            assert!((ms.values[[k, 0]] - b.values[k]).abs() < 1e-12);
            assert!((ms.values[[k, 1]] - b.values[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn multistate_oracle_indicators_score_zero() {
        let p = preset("illness-death-5000").unwrap();
        let mut spec = p.spec.clone();
        spec.censoring = crate::simulate::Censoring::None;
        let sim = sample_paths(&spec, 200, 2).unwrap();
        let ds = &sim.dataset;
        let grid = [0.5, 1.0, 2.0, 3.0];
        let g = censoring_curve(ds).unwrap();
        let pred: Vec<Array2<f64>> = ds
            .subjects
            .iter()
            .map(|s| {
                Array2::from_shape_fn((grid.len(), 3), |(k, j)| {
                    f64::from(u8::from(s.state_at(grid[k], &ds.topology) == Some(j)))
                })
            })
            .collect();
        let ms = multistate_brier(&pred, ds, &g, &grid).unwrap();
        assert!(ms.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multistate_truth_matches_variance_identity() {
        let p = preset("illness-death-5000").unwrap();
        let sim = sample_paths(&p.spec, 5000, 11).unwrap();
        let ds = &sim.dataset;
        let grid = [0.5, 1.0, 2.0, 3.0];
        let truth = ground_truth(&p.spec, ds, &grid).unwrap();
        let g = censoring_curve(ds).unwrap();
        let ms = multistate_brier(&truth, ds, &g, &grid).unwrap();
        for k in 0..grid.len() {
            let expected: f64 = truth
                .iter()
                .map(|q| q.row(k).iter().map(|p| p * (1.0 - p)).sum::<f64>())
                .sum::<f64>()
                / truth.len() as f64;
            let got = ms.values.row(k).sum();
            assert!((got - expected).abs() < 0.03, "t {}: {got} vs {expected}", grid[k]);
        }
    }

    #[test]
    fn ipcw_brier_tracks_truth_decomposition() {
        // E[BS(t)] = mean (S_hat - S)^2 + mean S (1 - S)
        let p = preset("survival-coverage").unwrap();
        let sim = sample_paths(&p.spec, 5000, 12).unwrap();
        let ds = &sim.dataset;
        let grid: Vec<f64> = (1..=10).map(|k| k as f64 * 0.25).collect();
        let truth = ground_truth(&p.spec, ds, &grid).unwrap();
        let shifted: Vec<Array2<f64>> = truth
            .iter()
            .map(|q| {
                let mut s = q.clone();
                s.column_mut(0).mapv_inplace(|v| (v * 0.8 + 0.05).clamp(0.0, 1.0));
                let c0 = s.column(0).to_owned();
                s.column_mut(1).assign(&(1.0 - c0));
                s
            })
            .collect();
        let (t, e): (Vec<f64>, Vec<bool>) = ds.subjects.iter().map(|s| s.first_exit()).unzip();
        let g = censoring_km(&t, &e).unwrap();
        let b = brier_ipcw(&subject_curves(&shifted, 0, &grid), &t, &e, &g, &grid).unwrap();
        let vs = brier_vs_truth(&shifted, &truth, &grid).unwrap();
        for k in 0..grid.len() {
            let noise: f64 = truth.iter().map(|q| q[[k, 0]] * (1.0 - q[[k, 0]])).sum::<f64>() / truth.len() as f64;
            let expected = vs.values[[k, 0]] + noise;
            assert!(
                (b.values[k] - expected).abs() < 0.02,
                "t {}: {} vs {expected}",
                grid[k],
                b.values[k]
            );
        }
    }

    #[test]
    fn brier_vs_truth_examples() {
        let truth = vec![ndarray::array![[0.2, 0.8], [0.5, 0.5]]; 3];
        let grid = [1.0, 2.0];
        let z = brier_vs_truth(&truth, &truth, &grid).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        let off: Vec<Array2<f64>> = truth.iter().map(|q| q + 0.1).collect();
        let b = brier_vs_truth(&off, &truth, &grid).unwrap();
        assert!(b.values.iter().all(|&v| (v - 0.01).abs() < 1e-15));
        assert!(brier_vs_truth(&off[..2], &truth, &grid).is_err());
    }

    #[test]
    fn coverage_examples() {
        let truth = vec![ndarray::array![[0.2, 0.8], [0.5, 0.5]]; 2];
        let grid = vec![1.0, 2.0];
        let band = |lo: Array2<f64>, hi: Array2<f64>| IntervalBand {
            times: grid.clone(),
            level: 0.95,
            mean: lo.clone(),
            lo,
            hi,
            dropped: 0,
        };
        let wide: Vec<IntervalBand> = (0..2)
            .map(|_| band(Array2::zeros((2, 2)), Array2::ones((2, 2))))
            .collect();
        assert_eq!(interval_coverage(&wide, &truth, &grid).unwrap(), 1.0);
        let exact: Vec<IntervalBand> = truth.iter().map(|q| band(q.clone(), q.clone())).collect();
        assert_eq!(interval_coverage(&exact, &truth, &grid).unwrap(), 1.0);
        let low: Vec<IntervalBand> = truth.iter().map(|q| band(q - 0.3, q - 0.1)).collect();
        assert_eq!(interval_coverage(&low, &truth, &grid).unwrap(), 0.0);
        assert!(interval_coverage(&exact, &truth, &[1.0, 3.0]).is_err());
    }

    #[test]
    fn quantile_grid_is_inside_and_increasing() {
        let t: Vec<f64> = (0..1000).map(|k| f64::from(k) * 0.01).collect();
        let g = EvalGrid::quantile(&t, 100).unwrap();
        assert_eq!(g.len(), 100);
        assert!(g.times.windows(2).all(|w| w[0] < w[1]));
        assert!(g.times[0] >= t[0] && *g.times.last().unwrap() <= t[999]);
        assert!((g.times[0] - 0.0999).abs() < 1e-9);
    }

    #[test]
    fn integrated_scores_converge_under_refinement() {
        let p = preset("survival-coverage").unwrap();
        let sim = sample_paths(&p.spec, 400, 4).unwrap();
        let ds = &sim.dataset;
        let coarse = EvalGrid::uniform(0.1, 2.5, 25).unwrap();
        let fine = EvalGrid::uniform(0.1, 2.5, 250).unwrap();
        let (t, e): (Vec<f64>, Vec<bool>) = ds.subjects.iter().map(|s| s.first_exit()).unzip();
        let g = censoring_km(&t, &e).unwrap();
        let curve_grid = EvalGrid::uniform(0.0, 3.0, 301).unwrap();
        let truth = ground_truth(&p.spec, ds, &curve_grid.times).unwrap();
        let c = subject_curves(&truth, 0, &curve_grid.times);
        let a = brier_ipcw(&c, &t, &e, &g, &coarse.times).unwrap().integrated;
        let b = brier_ipcw(&c, &t, &e, &g, &fine.times).unwrap().integrated;
        assert!((a - b).abs() < 1e-2 * 0.5, "{a} {b}");
        let fine2 = EvalGrid::uniform(0.1, 2.5, 2500).unwrap();
        let b2 = ibll(&c, &t, &e, &g, &fine2.times).unwrap().integrated;
        let b1 = ibll(&c, &t, &e, &g, &fine.times).unwrap().integrated;
        assert!((b1 - b2).abs() < 1e-3, "{b1} {b2}");
    }

    proptest! {
        #[test]
        fn concordance_ignores_monotone_transforms(
            seed in 0u64..1000,
            power in 0.2f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
            let e: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
            let risk: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let grid = vec![0.0, 3.0];
            let base = Array2::from_shape_fn((n, 2), |(i, _)| risk[i]);
            let moved = base.mapv(|v| v.powf(power));
            let a = concordance_td(&SurvivalCurves::new(grid.clone(), base).unwrap(), &t, &e);
            let b = concordance_td(&SurvivalCurves::new(grid, moved).unwrap(), &t, &e);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }

        #[test]
        fn concordance_in_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 25;
            let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let e = vec![true; n];
            let v = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
            let c = concordance_td(&SurvivalCurves::new(vec![0.0], v).unwrap(), &t, &e).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
