//! Kaplan–Meier and Aalen–Johansen point estimators.
//!
//! At tied times events are processed before censorings, so a subject
//! censored at `t` is still at risk for events at `t`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::Dataset;

/// Right-continuous step function `f(t) = values[k]` for
/// `times[k] <= t < times[k + 1]`, and `initial` before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>, initial: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension {
                what: "step function values",
                expected: times.len(),
                got: values.len(),
            });
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("step times must be strictly increasing".into()));
        }
        Ok(StepFunction { times, values, initial })
    }

    pub fn constant(value: f64) -> Self {
        StepFunction {
            times: Vec::new(),
            values: Vec::new(),
            initial: value,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    /// Left limit `f(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }
}

fn check_inputs(times: &[f64], events: &[bool]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Invalid("no observations".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Dimension {
            what: "event indicators",
            expected: times.len(),
            got: events.len(),
        });
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Invalid("times must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Product-limit estimate of the survival function of the flagged times.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    check_inputs(times, events)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut s = 1.0;
    let (mut jt, mut jv) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && times[order[j]] == t {
            deaths += usize::from(events[order[j]]);
            j += 1;
        }
        if deaths > 0 {
            s *= (at_risk - deaths) as f64 / at_risk as f64;
            jt.push(t);
            jv.push(s);
        }
        at_risk -= j - i;
        i = j;
    }
    StepFunction::new(jt, jv, 1.0)
}

/// Kaplan–Meier estimate of the censoring survival `G(t)`: the same
/// estimator with the event flags flipped. Events tied with censorings
/// still leave the risk set first.
pub fn censoring_km(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    check_inputs(times, events)?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut g = 1.0;
    let (mut jt, mut jv) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let (mut cens, mut ev) = (0, 0);
        while j < order.len() && times[order[j]] == t {
            if events[order[j]] {
                ev += 1;
            } else {
                cens += 1;
            }
            j += 1;
        }
        let n = at_risk - ev;
        if cens > 0 && n > 0 {
            g *= (n - cens) as f64 / n as f64;
            jt.push(t);
            jv.push(g);
        }
        at_risk -= j - i;
        i = j;
    }
    StepFunction::new(jt, jv, 1.0)
}

/// Aalen–Johansen occupation estimate on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AalenJohansen {
    pub grid: Vec<f64>,
    /// `grid.len() x S`: estimated probability of occupying each state.
    pub occupation: Array2<f64>,
    /// Whether any grid point lies past the last observation.
    pub extended: bool,
}

struct Segment {
    state: usize,
    start: f64,
    end: f64,
    to: Option<usize>,
}

/// Product integral of Nelson–Aalen increments, started from the empirical
/// distribution of initial states. Requires exact transition times.
pub fn aalen_johansen(ds: &Dataset, grid: &[f64]) -> Result<AalenJohansen> {
    if ds.is_empty() {
        return Err(Error::Invalid("no subjects".into()));
    }
    if ds.has_interval_records() {
        return Err(Error::Invalid(
            "the Aalen-Johansen estimator needs exact transition times; interval-censored records are not supported"
                .into(),
        ));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) || grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Invalid("grid must be finite and sorted".into()));
    }
    let s_n = ds.topology.n_states();
    let mut segments = Vec::new();
    let mut p = vec![0.0; s_n];
    for subj in &ds.subjects {
        p[subj.initial_state()] += 1.0 / ds.len() as f64;
        for w in subj.observations.windows(2) {
            let moved = w[1].state != w[0].state;
            segments.push(Segment {
                state: w[0].state,
                start: w[0].time,
                end: w[1].time,
                to: moved.then_some(w[1].state),
            });
        }
    }
    // distinct transition times
    let mut event_times: Vec<f64> = segments.iter().filter(|s| s.to.is_some()).map(|s| s.end).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    // at risk in state i at s: start < s <= end
    let mut starts: Vec<Vec<f64>> = vec![Vec::new(); s_n];
    let mut ends: Vec<Vec<f64>> = vec![Vec::new(); s_n];
    let mut transitions: Vec<(f64, usize, usize)> = Vec::new();
    for seg in &segments {
        starts[seg.state].push(seg.start);
        ends[seg.state].push(seg.end);
        if let Some(to) = seg.to {
            transitions.push((seg.end, seg.state, to));
        }
    }
    for v in starts.iter_mut().chain(ends.iter_mut()) {
        v.sort_by(f64::total_cmp);
    }
    transitions.sort_by(|a, b| a.0.total_cmp(&b.0));

    let last_obs = ds.max_time();
    let extended = grid.iter().any(|&t| t > last_obs);
    if extended {
        log::warn!("grid extends past the last observation at {last_obs}; occupation held flat");
    }

    let mut occupation = Array2::zeros((grid.len(), s_n));
    let mut gi = 0;
    let mut ti = 0;
    for &s in &event_times {
        while gi < grid.len() && grid[gi] < s {
            occupation.row_mut(gi).assign(&ndarray::ArrayView1::from(&p));
            gi += 1;
        }
        let at_risk: Vec<usize> = (0..s_n)
            .map(|i| starts[i].partition_point(|&a| a < s) - ends[i].partition_point(|&e| e < s))
            .collect();
        let mut flows = Vec::new();
        while ti < transitions.len() && transitions[ti].0 == s {
            flows.push((transitions[ti].1, transitions[ti].2));
            ti += 1;
        }
        let before = p.clone();
        for &(i, j) in &flows {
            let moved = before[i] / at_risk[i] as f64;
            p[i] -= moved;
            p[j] += moved;
        }
    }
    while gi < grid.len() {
        occupation.row_mut(gi).assign(&ndarray::ArrayView1::from(&p));
        gi += 1;
    }
    Ok(AalenJohansen {
        grid: grid.to_vec(),
        occupation,
        extended,
    })
}
