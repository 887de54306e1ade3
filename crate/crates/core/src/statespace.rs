//! State graphs, subject-level observations and dataset containers.
//!
//! States are 0-indexed in memory. File formats use 1-based labels; the
//! conversion happens in [`crate::harness::formats`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed graph of allowed transitions between `n_states` states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct TransitionTopology {
    n_states: usize,
    allowed: Vec<bool>,
    edges: Vec<(usize, usize)>,
    absorbing: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    n_states: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<TopologyRepr> for TransitionTopology {
    type Error = Error;

    fn try_from(r: TopologyRepr) -> Result<Self> {
        TransitionTopology::from_edges(r.n_states, &r.edges)
    }
}

impl From<TransitionTopology> for TopologyRepr {
    fn from(t: TransitionTopology) -> Self {
        TopologyRepr {
            n_states: t.n_states,
            edges: t.edges,
        }
    }
}

impl TransitionTopology {
    /// Builds a topology from a dense boolean mask (`mask[i][j]`: `i -> j` allowed).
    pub fn new(mask: &[Vec<bool>]) -> Result<Self> {
        let n = mask.len();
        if n == 0 {
            return Err(Error::Topology("topology needs at least one state".into()));
        }
        let mut edges = Vec::new();
        for (i, row) in mask.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Topology(format!(
                    "row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            for (j, &a) in row.iter().enumerate() {
                if a {
                    if i == j {
                        return Err(Error::Topology(format!(
                            "diagonal entry ({0},{0}) must not be allowed",
                            i + 1
                        )));
                    }
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    pub fn from_edges(n_states: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::Topology("topology needs at least one state".into()));
        }
        let mut allowed = vec![false; n_states * n_states];
        for &(i, j) in edges {
            if i >= n_states || j >= n_states {
                return Err(Error::Topology(format!(
                    "edge {}->{} outside {n_states} states",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(Error::Topology(format!("self-loop on state {}", i + 1)));
            }
            allowed[i * n_states + j] = true;
        }
        // canonical row-major edge order; rate-head outputs follow it
        let edges: Vec<(usize, usize)> = (0..n_states * n_states)
            .filter(|&k| allowed[k])
            .map(|k| (k / n_states, k % n_states))
            .collect();
        let absorbing = (0..n_states)
            .map(|i| !(0..n_states).any(|j| allowed[i * n_states + j]))
            .collect();
        Ok(TransitionTopology {
            n_states,
            allowed,
            edges,
            absorbing,
        })
    }

    /// Alive → dead.
    pub fn two_state() -> Self {
        Self::from_edges(2, &[(0, 1)]).expect("static topology")
    }

    /// Health → illness → death with a direct health → death edge.
    pub fn illness_death() -> Self {
        Self::from_edges(3, &[(0, 1), (0, 2), (1, 2)]).expect("static topology")
    }

    /// One transient state with `n_causes` absorbing causes.
    pub fn competing_risks(n_causes: usize) -> Self {
        let edges: Vec<_> = (1..=n_causes).map(|j| (0, j)).collect();
        Self::from_edges(n_causes + 1, &edges).expect("static topology")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Number of modeled off-diagonal rates.
    pub fn q_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_allowed(&self, from: usize, to: usize) -> bool {
        from < self.n_states && to < self.n_states && self.allowed[from * self.n_states + to]
    }

    /// Allowed transitions in row-major order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.edges.iter().position(|&e| e == (from, to))
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    pub fn absorbing_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| self.absorbing[s]).collect()
    }

    /// Whether `to` can be reached from `from` in one or more jumps.
    pub fn reachable(&self, from: usize, to: usize) -> bool {
        let n = self.n_states;
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        while let Some(s) = stack.pop() {
            for j in 0..n {
                if self.allowed[s * n + j] && !seen[j] {
                    if j == to {
                        return true;
                    }
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        false
    }

    /// Dense 0/1 mask, row-major.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        (0..self.n_states)
            .map(|i| (0..self.n_states).map(|j| self.is_allowed(i, j)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// The transition happened exactly at the recorded time.
    #[default]
    Exact,
    /// The transition happened somewhere since the previous observation.
    Interval,
}

/// A recorded state at a time. `mode` describes how the subject got here
/// from the previous observation and is ignored on the first one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub state: usize,
    #[serde(default)]
    pub mode: ObsMode,
}

impl Observation {
    pub fn exact(time: f64, state: usize) -> Self {
        Observation {
            time,
            state,
            mode: ObsMode::Exact,
        }
    }

    pub fn interval(time: f64, state: usize) -> Self {
        Observation {
            time,
            state,
            mode: ObsMode::Interval,
        }
    }
}

/// One observational unit.
///
/// The first observation is the entry record and fixes the initial state.
/// When `last_observed` is false the final observation is a censoring
/// record: the subject was last seen in that (unchanged) state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub covariates: Vec<f64>,
    pub entry_time: f64,
    pub observations: Vec<Observation>,
    pub last_observed: bool,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        covariates: Vec<f64>,
        observations: Vec<Observation>,
        last_observed: bool,
    ) -> Self {
        let entry_time = observations.first().map_or(0.0, |o| o.time);
        SubjectRecord {
            id: id.into(),
            covariates,
            entry_time,
            observations,
            last_observed,
        }
    }

    pub fn initial_state(&self) -> usize {
        self.observations[0].state
    }

    pub fn final_time(&self) -> f64 {
        self.observations.last().map_or(self.entry_time, |o| o.time)
    }

    pub fn final_state(&self) -> usize {
        self.observations.last().map_or(0, |o| o.state)
    }

    /// Censoring flag after resolving records that end in an absorbing state:
    /// a subject whose final observation moved it into an absorbing state is
    /// treated as fully observed.
    pub fn effective_last_observed(&self, topology: &TransitionTopology) -> bool {
        if self.last_observed {
            return true;
        }
        let m = self.observations.len();
        if m < 2 {
            return false;
        }
        let prev = self.observations[m - 2].state;
        let last = self.observations[m - 1].state;
        last != prev && topology.is_absorbing(last)
    }

    /// State occupied at time `t`, if known (None when censored before `t`
    /// or before entry). Interval-censored segments report the state at
    /// the start of the segment.
    pub fn state_at(&self, t: f64, topology: &TransitionTopology) -> Option<usize> {
        if t < self.entry_time || self.observations.is_empty() {
            return None;
        }
        let mut state = self.observations[0].state;
        for o in &self.observations[1..] {
            if o.time <= t {
                state = o.state;
            } else {
                return Some(state);
            }
        }
        if topology.is_absorbing(state) || t == self.final_time() {
            Some(state)
        } else {
            None
        }
    }

    /// Event time and indicator for a two-state reduction: the first time
    /// the subject leaves its initial state.
    pub fn first_exit(&self) -> (f64, bool) {
        let s0 = self.initial_state();
        for o in &self.observations[1..] {
            if o.state != s0 {
                return (o.time, true);
            }
        }
        (self.final_time(), false)
    }
}

/// Per-covariate z-scoring moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose empirical std was zero and got clamped to 1.
    pub clamped: Vec<bool>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Normalization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            clamped: vec![false; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub topology: TransitionTopology,
    pub covariate_names: Vec<String>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>, topology: TransitionTopology, covariate_names: Vec<String>) -> Self {
        Dataset {
            subjects,
            topology,
            covariate_names,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Dataset restricted to the given subject indices (in that order).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            topology: self.topology.clone(),
            covariate_names: self.covariate_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Largest recorded time across all subjects.
    pub fn max_time(&self) -> f64 {
        self.subjects.iter().map(SubjectRecord::final_time).fold(0.0, f64::max)
    }

    /// Whether any record uses interval-censored transitions.
    pub fn has_interval_records(&self) -> bool {
        self.subjects
            .iter()
            .any(|s| s.observations[1..].iter().any(|o| o.mode == ObsMode::Interval))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Empty,
    NonFinite,
    CovariateDimension,
    StateOutOfRange,
    BeforeEntry,
    NonIncreasingTimes,
    TransitionNotAllowed,
    NotReachable,
    SelfTransition,
    CensorChangedState,
    LeftAbsorbing,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::Empty => "no observations",
            Rule::NonFinite => "non-finite value",
            Rule::CovariateDimension => "covariate dimension",
            Rule::StateOutOfRange => "state out of range",
            Rule::BeforeEntry => "observation before entry time",
            Rule::NonIncreasingTimes => "non-increasing times",
            Rule::TransitionNotAllowed => "transition not allowed",
            Rule::NotReachable => "state not reachable",
            Rule::SelfTransition => "self transition",
            Rule::CensorChangedState => "censoring record changes state",
            Rule::LeftAbsorbing => "left an absorbing state",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject: usize,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "subject #{}: {} ({})", self.subject, self.rule, self.detail)
    }
}

/// Checks every subject against the record invariants. Returns an empty
/// list when the dataset is usable.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let topo = &ds.topology;
    let n = topo.n_states();
    let d = ds.covariate_names.len();
    for (idx, subj) in ds.subjects.iter().enumerate() {
        let mut push = |rule: Rule, detail: String| {
            out.push(Violation {
                subject: idx,
                rule,
                detail,
            })
        };
        if subj.covariates.len() != d {
            push(
                Rule::CovariateDimension,
                format!("{} covariates, expected {d}", subj.covariates.len()),
            );
        }
        if subj.covariates.iter().any(|v| !v.is_finite()) || !subj.entry_time.is_finite() {
            push(Rule::NonFinite, format!("id {}", subj.id));
        }
        let obs = &subj.observations;
        if obs.is_empty() {
            push(Rule::Empty, format!("id {}", subj.id));
            continue;
        }
        if obs.iter().any(|o| !o.time.is_finite()) {
            push(Rule::NonFinite, "observation time".into());
            continue;
        }
        if let Some(o) = obs.iter().find(|o| o.state >= n) {
            push(Rule::StateOutOfRange, format!("state {} with {n} states", o.state + 1));
            continue;
        }
        if obs[0].time < subj.entry_time || subj.entry_time < 0.0 {
            push(
                Rule::BeforeEntry,
                format!("first time {} < entry {}", obs[0].time, subj.entry_time),
            );
        }
        let m = obs.len();
        for j in 1..m {
            let (prev, cur) = (obs[j - 1], obs[j]);
            if cur.time <= prev.time {
                push(
                    Rule::NonIncreasingTimes,
                    format!("t[{}]={} <= t[{}]={}", j, cur.time, j - 1, prev.time),
                );
            }
            if topo.is_absorbing(prev.state) && cur.state != prev.state {
                push(Rule::LeftAbsorbing, format!("{} -> {}", prev.state + 1, cur.state + 1));
                continue;
            }
            let is_censor = j == m - 1 && !subj.last_observed && cur.mode == ObsMode::Exact;
            match cur.mode {
                ObsMode::Exact if is_censor => {
                    if cur.state != prev.state && !topo.is_absorbing(cur.state) {
                        push(
                            Rule::CensorChangedState,
                            format!("{} -> {}", prev.state + 1, cur.state + 1),
                        );
                    } else if cur.state != prev.state && !topo.is_allowed(prev.state, cur.state) {
                        push(
                            Rule::TransitionNotAllowed,
                            format!("{} -> {}", prev.state + 1, cur.state + 1),
                        );
                    }
                }
                ObsMode::Exact => {
                    if cur.state == prev.state {
                        push(Rule::SelfTransition, format!("state {}", cur.state + 1));
                    } else if !topo.is_allowed(prev.state, cur.state) {
                        push(
                            Rule::TransitionNotAllowed,
                            format!("{} -> {}", prev.state + 1, cur.state + 1),
                        );
                    }
                }
                ObsMode::Interval => {
                    if cur.state != prev.state && !topo.reachable(prev.state, cur.state) {
                        push(Rule::NotReachable, format!("{} -> {}", prev.state + 1, cur.state + 1));
                    }
                }
            }
        }
    }
    if let Some(norm) = &ds.normalization {
        if norm.std.len() != d || norm.std.iter().any(|&s| !(s > 0.0)) {
            out.push(Violation {
                subject: usize::MAX,
                rule: Rule::CovariateDimension,
                detail: "normalization std must be positive for every covariate".into(),
            });
        }
    }
    out
}

/// Z-scores covariates. With `stats = None` the moments are computed from
/// `ds` (population std); otherwise the given moments are applied, which is
/// how validation and test splits reuse training statistics.
///
/// Constant columns get std clamped to 1; the flag is kept in the returned
/// [`Normalization::clamped`].
pub fn normalize_covariates(ds: &Dataset, stats: Option<&Normalization>) -> Result<(Dataset, Normalization)> {
    let d = ds.n_covariates();
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != d || s.std.len() != d {
                return Err(Error::Dimension {
                    what: "normalization statistics",
                    expected: d,
                    got: s.mean.len(),
                });
            }
            s.clone()
        }
        None => {
            let n = ds.len() as f64;
            if ds.is_empty() {
                Normalization::identity(d)
            } else {
                let mut mean = vec![0.0; d];
                for s in &ds.subjects {
                    for (m, v) in mean.iter_mut().zip(&s.covariates) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; d];
                for s in &ds.subjects {
                    for ((acc, v), m) in var.iter_mut().zip(&s.covariates).zip(&mean) {
                        *acc += (v - m) * (v - m);
                    }
                }
                let mut std = Vec::with_capacity(d);
                let mut clamped = Vec::with_capacity(d);
                for v in var {
                    let s = (v / n).sqrt();
                    if s > 1e-12 {
                        std.push(s);
                        clamped.push(false);
                    } else {
                        std.push(1.0);
                        clamped.push(true);
                    }
                }
                Normalization { mean, std, clamped }
            }
        }
    };
    let mut out = ds.clone();
    for s in &mut out.subjects {
        s.covariates = stats.apply(&s.covariates);
    }
    out.normalization = Some(stats.clone());
    Ok((out, stats))
}
