//! Ground-truth multi-state data: inhomogeneous Markov jump processes with
//! Weibull baselines, proportional covariate effects (some modulated by a
//! saw-tooth in time), independent exponential censoring and an exact
//! occupation oracle.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::{Dataset, Observation, SubjectRecord, TransitionTopology};
use crate::survnode::RateMatrix;

/// Number of intervals on `[0, horizon]` used for thinning bounds.
const BOUND_INTERVALS: usize = 64;
/// Largest step of the occupation oracle.
const ORACLE_STEP: f64 = 1e-3;
const PILOT_SUBJECTS: usize = 400;
const PILOT_GRID: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateDist {
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateDist::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
            CovariateDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            CovariateDist::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

/// `saw(t) = 1 + amplitude * (2 frac(t / period) - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SawTooth {
    pub amplitude: f64,
    pub period: f64,
}

impl SawTooth {
    pub fn value(&self, t: f64) -> f64 {
        let u = t / self.period;
        self.value_in_cycle(t, u.floor())
    }

    /// Value using the branch of cycle `k`; evaluating the end of a cycle
    /// with its own `k` gives the left limit.
    fn value_in_cycle(&self, t: f64, k: f64) -> f64 {
        let frac = t / self.period - k;
        1.0 + self.amplitude * (2.0 * frac - 1.0)
    }

    fn range(&self) -> (f64, f64) {
        (1.0 - self.amplitude, 1.0 + self.amplitude)
    }
}

/// Hazard `(k / s) (t / s)^(k - 1) exp(sum_j beta_j(t) x_j)` of one
/// transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeibullHazard {
    pub from: usize,
    pub to: usize,
    pub shape: f64,
    pub scale: f64,
    pub coefficients: Vec<f64>,
}

impl WeibullHazard {
    fn baseline(&self, t: f64) -> f64 {
        let k = self.shape;
        if k == 1.0 {
            return 1.0 / self.scale;
        }
        (k / self.scale) * (t / self.scale).powf(k - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Censoring {
    /// Administrative censoring at the horizon only.
    None,
    Rate {
        rate: f64,
    },
    /// Exponential rate calibrated so the expected censored fraction
    /// matches.
    TargetFraction {
        fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueHazardSpec {
    pub topology: TransitionTopology,
    pub initial_state: usize,
    pub covariates: Vec<CovariateDist>,
    /// Hazards of allowed transitions; a missing transition has rate zero.
    pub hazards: Vec<WeibullHazard>,
    /// Covariate columns whose coefficients are multiplied by the saw-tooth.
    pub time_varying: Vec<usize>,
    pub saw: SawTooth,
    pub horizon: f64,
    pub censoring: Censoring,
}

impl TrueHazardSpec {
    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (0..self.n_covariates()).map(|j| format!("x{j}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_covariates();
        if !(self.horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon {} must be positive", self.horizon)));
        }
        if self.initial_state >= self.topology.n_states() {
            return Err(Error::Invalid("initial state out of range".into()));
        }
        if !(self.saw.period > 0.0) || !(self.saw.amplitude >= 0.0) {
            return Err(Error::Invalid(
                "saw-tooth needs a positive period and nonnegative amplitude".into(),
            ));
        }
        for h in &self.hazards {
            if !self.topology.is_allowed(h.from, h.to) {
                return Err(Error::Invalid(format!(
                    "hazard {}->{} is not an allowed transition",
                    h.from + 1,
                    h.to + 1
                )));
            }
            if !(h.shape > 0.0 && h.scale > 0.0) {
                return Err(Error::Invalid(format!(
                    "hazard {}->{}: shape and scale must be positive",
                    h.from + 1,
                    h.to + 1
                )));
            }
            if h.coefficients.len() != d {
                return Err(Error::Dimension {
                    what: "hazard coefficients",
                    expected: d,
                    got: h.coefficients.len(),
                });
            }
        }
        for (i, a) in self.hazards.iter().enumerate() {
            if self.hazards[..i].iter().any(|b| (a.from, a.to) == (b.from, b.to)) {
                return Err(Error::Invalid(format!("duplicate hazard {}->{}", a.from + 1, a.to + 1)));
            }
        }
        if self.time_varying.iter().any(|&j| j >= d) {
            return Err(Error::Invalid("time-varying column out of range".into()));
        }
        match self.censoring {
            Censoring::Rate { rate } if !(rate >= 0.0) => {
                return Err(Error::Invalid(format!("censoring rate {rate} < 0")))
            }
            Censoring::TargetFraction { fraction } if !(0.0..1.0).contains(&fraction) => {
                return Err(Error::Invalid(format!("censoring fraction {fraction} outside [0, 1)")))
            }
            _ => {}
        }
        Ok(())
    }

    fn is_time_varying(&self, j: usize) -> bool {
        self.time_varying.contains(&j)
    }

    /// Rate of hazard `h` at `t`, with the saw-tooth evaluated on cycle `k`.
    fn rate_in_cycle(&self, h: &WeibullHazard, x: &[f64], t: f64, k: f64) -> f64 {
        let saw = self.saw.value_in_cycle(t, k);
        let lp: f64 = h
            .coefficients
            .iter()
            .zip(x)
            .enumerate()
            .map(|(j, (b, x))| if self.is_time_varying(j) { b * saw * x } else { b * x })
            .sum();
        h.baseline(t) * lp.exp()
    }

    fn rate(&self, h: &WeibullHazard, x: &[f64], t: f64) -> f64 {
        self.rate_in_cycle(h, x, t, (t / self.saw.period).floor())
    }

    /// Supremum of the rate of `h` over `[t0, t1]`.
    fn rate_bound(&self, h: &WeibullHazard, x: &[f64], t0: f64, t1: f64) -> Result<f64> {
        let base = if h.shape >= 1.0 {
            h.baseline(t1)
        } else if t0 > 0.0 {
            h.baseline(t0)
        } else {
            return Err(Error::Invalid(format!(
                "hazard {}->{}: shape {} < 1 is unbounded at time zero",
                h.from + 1,
                h.to + 1,
                h.shape
            )));
        };
        let (lo, hi) = self.saw.range();
        let lp: f64 = h
            .coefficients
            .iter()
            .zip(x)
            .enumerate()
            .map(|(j, (b, x))| {
                if self.is_time_varying(j) {
                    (b * x * lo).max(b * x * hi)
                } else {
                    b * x
                }
            })
            .sum();
        Ok(base * lp.exp())
    }

    /// True generator at time `t` for raw covariates `x`.
    pub fn true_rates(&self, x: &[f64], t: f64) -> RateMatrix {
        let rates = self.edge_rates(x, t, (t / self.saw.period).floor());
        RateMatrix::from_edge_rates(&self.topology, &rates)
    }

    fn edge_rates(&self, x: &[f64], t: f64, k: f64) -> Vec<f64> {
        let mut rates = vec![0.0; self.topology.q_count()];
        for h in &self.hazards {
            let e = self.topology.edge_index(h.from, h.to).expect("validated");
            rates[e] = self.rate_in_cycle(h, x, t, k);
        }
        rates
    }

    /// Occupation probabilities `P(0, t)[initial, .]` on `grid`
    /// (`grid.len() x S`), integrating the forward equation with RK4 steps
    /// of at most `1e-3` that break at saw-tooth discontinuities. Shapes in
    /// `(1, 2)` have a kink at zero that caps accuracy near `1e-7`.
    pub fn true_occupation(&self, x: &[f64], grid: &[f64]) -> Result<Array2<f64>> {
        self.validate()?;
        if grid.iter().any(|&t| !(0.0..=self.horizon * (1.0 + 1e-12)).contains(&t)) {
            return Err(Error::Invalid("oracle grid outside [0, horizon]".into()));
        }
        if grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("oracle grid must be sorted".into()));
        }
        if self.hazards.iter().any(|h| h.shape < 1.0) && grid.iter().any(|&t| t > 0.0) {
            return Err(Error::Invalid(
                "the oracle needs shapes >= 1 (bounded hazards at zero)".into(),
            ));
        }
        let s_n = self.topology.n_states();
        let mut p = Array1::zeros(s_n);
        p[self.initial_state] = 1.0;
        let mut out = Array2::zeros((grid.len(), s_n));
        let mut t = 0.0;
        for (gi, &target) in grid.iter().enumerate() {
            while t < target {
                let cycle = (t / self.saw.period).floor();
                let cycle_end = (cycle + 1.0) * self.saw.period;
                let seg_end = cycle_end.min(target);
                let n = ((seg_end - t) / ORACLE_STEP).ceil().max(1.0) as usize;
                let h = (seg_end - t) / n as f64;
                for i in 0..n {
                    let t0 = t + i as f64 * h;
                    p = self.oracle_step(&p, x, t0, h, cycle);
                }
                t = seg_end;
                if seg_end == cycle_end && seg_end < target {
                    continue;
                }
            }
            out.row_mut(gi).assign(&p);
        }
        Ok(out)
    }

    fn oracle_step(&self, p: &Array1<f64>, x: &[f64], t: f64, h: f64, cycle: f64) -> Array1<f64> {
        let f = |t: f64, p: &Array1<f64>| -> Array1<f64> {
            let rates = self.edge_rates(x, t, cycle);
            let mut d = Array1::zeros(p.len());
            for (e, &(i, j)) in self.topology.edges().iter().enumerate() {
                let flow = p[i] * rates[e];
                d[j] += flow;
                d[i] -= flow;
            }
            d
        };
        let k1 = f(t, p);
        let k2 = f(t + 0.5 * h, &(p + &(&k1 * (0.5 * h))));
        let k3 = f(t + 0.5 * h, &(p + &(&k2 * (0.5 * h))));
        let k4 = f(t + h, &(p + &(&k3 * h)));
        p + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0))
    }

    fn sample_covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.covariates.iter().map(|c| c.sample(rng)).collect()
    }

    /// Samples one path on `[0, end]` by thinning; returns the jumps.
    fn sample_path<R: Rng + ?Sized>(&self, x: &[f64], end: f64, rng: &mut R) -> Result<Vec<(f64, usize)>> {
        let width = self.horizon / BOUND_INTERVALS as f64;
        let mut state = self.initial_state;
        let mut t = 0.0;
        let mut jumps = Vec::new();
        let mut cell = 0usize;
        'outer: while t < end {
            let out: Vec<&WeibullHazard> = self.hazards.iter().filter(|h| h.from == state).collect();
            if out.is_empty() {
                break;
            }
            while (cell + 1) as f64 * width <= t {
                cell += 1;
            }
            let c0 = cell as f64 * width;
            let c1 = ((cell + 1) as f64 * width).min(end).max(t);
            let bounds: Vec<f64> = out
                .iter()
                .map(|h| self.rate_bound(h, x, c0, (cell + 1) as f64 * width))
                .collect::<Result<_>>()?;
            let total_bound: f64 = bounds.iter().sum();
            if total_bound <= 0.0 {
                t = c1;
                if c1 >= end {
                    break;
                }
                continue;
            }
            let exp = Exp::new(total_bound).map_err(|e| Error::Invalid(e.to_string()))?;
            loop {
                let cand = t + exp.sample(rng);
                if cand >= c1 {
                    t = c1;
                    continue 'outer;
                }
                t = cand;
                let rates: Vec<f64> = out.iter().map(|h| self.rate(h, x, t)).collect();
                for (h, (&r, &b)) in out.iter().zip(rates.iter().zip(&bounds)) {
                    if r > b * (1.0 + 1e-9) {
                        return Err(Error::ThinningBound {
                            from: h.from + 1,
                            to: h.to + 1,
                            t,
                            rate: r,
                            bound: b,
                        });
                    }
                }
                let total: f64 = rates.iter().sum();
                let u = rng.random::<f64>() * total_bound;
                if u < total {
                    let mut acc = 0.0;
                    let mut pick = out.len() - 1;
                    for (i, r) in rates.iter().enumerate() {
                        acc += r;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    state = out[pick].to;
                    jumps.push((t, state));
                    continue 'outer;
                }
            }
        }
        Ok(jumps)
    }

    fn censoring_rate(&self, seed: u64) -> Result<f64> {
        match self.censoring {
            Censoring::None => Ok(0.0),
            Censoring::Rate { rate } => Ok(rate),
            Censoring::TargetFraction { fraction } => self.calibrate_censoring(fraction, seed),
        }
    }

    /// Exponential censoring rate whose expected censored fraction, under
    /// pilot covariate draws and the true occupation curves, is `target`.
    fn calibrate_censoring(&self, target: f64, seed: u64) -> Result<f64> {
        let absorbing = self.topology.absorbing_states();
        if absorbing.is_empty() {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let grid: Vec<f64> = (0..=PILOT_GRID)
            .map(|i| self.horizon * i as f64 / PILOT_GRID as f64)
            .collect();
        // mean probability of not yet being absorbed
        let mut surv = vec![0.0; grid.len()];
        for _ in 0..PILOT_SUBJECTS {
            let x = self.sample_covariates(&mut rng);
            let occ = self.true_occupation(&x, &grid)?;
            for (i, row) in occ.rows().into_iter().enumerate() {
                let absorbed: f64 = absorbing.iter().map(|&a| row[a]).sum();
                surv[i] += (1.0 - absorbed) / PILOT_SUBJECTS as f64;
            }
        }
        let censored = |c: f64| -> f64 {
            // int_0^T c e^{-cu} S(u) du + e^{-cT} S(T)
            let mut acc = 0.0;
            for i in 1..grid.len() {
                let (a, b) = (grid[i - 1], grid[i]);
                let fa = c * (-c * a).exp() * surv[i - 1];
                let fb = c * (-c * b).exp() * surv[i];
                acc += 0.5 * (fa + fb) * (b - a);
            }
            acc + (-c * self.horizon).exp() * surv[grid.len() - 1]
        };
        if censored(0.0) >= target {
            log::warn!(
                "administrative censoring alone censors {:.3} > target {target}",
                censored(0.0)
            );
            return Ok(0.0);
        }
        let mut hi = 1.0 / self.horizon;
        while censored(hi) < target {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::Invalid(format!("censoring fraction {target} unreachable")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if censored(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    /// Exponential censoring rate that was used.
    pub censoring_rate: f64,
}

/// Samples `n` subjects. Subject `i` uses its own random stream, so a
/// subject's record does not depend on how many others are drawn.
pub fn sample_paths(spec: &TrueHazardSpec, n: usize, seed: u64) -> Result<Simulation> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("need at least one subject".into()));
    }
    let c = spec.censoring_rate(seed)?;
    let cens = if c > 0.0 {
        Some(Exp::new(c).map_err(|e| Error::Invalid(e.to_string()))?)
    } else {
        None
    };
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let x = spec.sample_covariates(&mut rng);
        let c_time = cens
            .map(|d| d.sample(&mut rng))
            .unwrap_or(f64::INFINITY)
            .min(spec.horizon);
        let jumps = spec.sample_path(&x, c_time, &mut rng)?;
        let mut obs = vec![Observation::exact(0.0, spec.initial_state)];
        obs.extend(jumps.iter().map(|&(t, s)| Observation::exact(t, s)));
        let last = obs.last().expect("entry").state;
        let observed = spec.topology.is_absorbing(last) && !jumps.is_empty();
        if !observed {
            obs.push(Observation::exact(c_time, last));
        }
        subjects.push(SubjectRecord::new(format!("s{i:05}"), x, obs, observed));
    }
    Ok(Simulation {
        dataset: Dataset::new(subjects, spec.topology.clone(), spec.covariate_names()),
        censoring_rate: c,
    })
}

/// True occupation curves for every subject of a simulated dataset (raw
/// covariates), one `grid x S` matrix per subject.
pub fn ground_truth(spec: &TrueHazardSpec, ds: &Dataset, grid: &[f64]) -> Result<Vec<Array2<f64>>> {
    ds.subjects
        .iter()
        .map(|s| spec.true_occupation(&s.covariates, grid))
        .collect()
}

/// A named simulation setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub spec: TrueHazardSpec,
    pub n_subjects: usize,
    pub seed: u64,
}

pub const PRESET_NAMES: [&str; 6] = [
    "two-state-smoke",
    "illness-death-5000",
    "competing-risks-5000",
    "survival-coverage",
    "latent-clusters",
    "metabric-standin",
];

fn mixed_covariates(d: usize) -> Vec<CovariateDist> {
    (0..d)
        .map(|j| {
            if j % 2 == 0 {
                CovariateDist::Bernoulli { p: 0.5 }
            } else {
                CovariateDist::Uniform { low: -1.0, high: 1.0 }
            }
        })
        .collect()
}

fn weibull(from: usize, to: usize, shape: f64, scale: f64, coefficients: &[f64]) -> WeibullHazard {
    WeibullHazard {
        from,
        to,
        shape,
        scale,
        coefficients: coefficients.to_vec(),
    }
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<Preset> {
    let p = match name {
        "two-state-smoke" => Preset {
            name: "two-state-smoke",
            spec: TrueHazardSpec {
                topology: TransitionTopology::two_state(),
                initial_state: 0,
                covariates: vec![
                    CovariateDist::Bernoulli { p: 0.5 },
                    CovariateDist::Uniform { low: -1.0, high: 1.0 },
                ],
                hazards: vec![weibull(0, 1, 1.0, 1.0, &[0.0, 0.0])],
                time_varying: vec![],
                saw: SawTooth {
                    amplitude: 1.0,
                    period: 0.5,
                },
                horizon: 2.0,
                censoring: Censoring::TargetFraction { fraction: 0.3 },
            },
            n_subjects: 500,
            seed: 7,
        },
        "illness-death-5000" => Preset {
            name: "illness-death-5000",
            spec: TrueHazardSpec {
                topology: TransitionTopology::illness_death(),
                initial_state: 0,
                covariates: mixed_covariates(12),
                hazards: vec![
                    weibull(
                        0,
                        1,
                        1.5,
                        3.0,
                        &[0.8, -0.6, 0.5, 0.0, 0.3, -0.4, 0.6, -0.5, 0.0, 0.4, -0.3, 0.2],
                    ),
                    weibull(
                        0,
                        2,
                        1.2,
                        5.0,
                        &[-0.5, 0.7, 0.0, 0.4, -0.3, 0.5, 0.0, 0.6, -0.4, 0.0, 0.3, -0.2],
                    ),
                    weibull(
                        1,
                        2,
                        1.8,
                        2.0,
                        &[0.6, 0.0, -0.5, 0.5, 0.0, -0.4, 0.3, 0.0, 0.5, -0.3, 0.0, 0.4],
                    ),
                ],
                time_varying: vec![0, 1],
                saw: SawTooth {
                    amplitude: 1.0,
                    period: 1.0,
                },
                horizon: 4.0,
                censoring: Censoring::TargetFraction { fraction: 0.3 },
            },
            n_subjects: 5000,
            seed: 2021,
        },
        "competing-risks-5000" => Preset {
            name: "competing-risks-5000",
            spec: TrueHazardSpec {
                topology: TransitionTopology::competing_risks(2),
                initial_state: 0,
                covariates: mixed_covariates(12),
                hazards: vec![
                    weibull(
                        0,
                        1,
                        1.4,
                        3.0,
                        &[0.7, -0.5, 0.4, 0.0, 0.3, -0.3, 0.5, -0.4, 0.0, 0.3, -0.2, 0.2],
                    ),
                    weibull(
                        0,
                        2,
                        1.1,
                        4.0,
                        &[-0.4, 0.6, 0.0, 0.5, -0.3, 0.4, 0.0, 0.5, -0.3, 0.0, 0.2, -0.3],
                    ),
                ],
                time_varying: vec![0, 1],
                saw: SawTooth {
                    amplitude: 1.0,
                    period: 1.0,
                },
                horizon: 4.0,
                censoring: Censoring::TargetFraction { fraction: 0.3 },
            },
            n_subjects: 5000,
            seed: 2022,
        },
        "survival-coverage" => Preset {
            name: "survival-coverage",
            spec: TrueHazardSpec {
                topology: TransitionTopology::two_state(),
                initial_state: 0,
                covariates: vec![
                    CovariateDist::Bernoulli { p: 0.5 },
                    CovariateDist::Uniform { low: -1.0, high: 1.0 },
                    CovariateDist::Normal { mean: 0.0, sd: 1.0 },
                ],
                hazards: vec![weibull(0, 1, 1.3, 2.0, &[0.8, -0.6, 0.4])],
                time_varying: vec![1],
                saw: SawTooth {
                    amplitude: 1.0,
                    period: 0.75,
                },
                horizon: 3.0,
                censoring: Censoring::TargetFraction { fraction: 0.3 },
            },
            n_subjects: 2000,
            seed: 2023,
        },
        "latent-clusters" => Preset {
            name: "latent-clusters",
            spec: TrueHazardSpec {
                topology: TransitionTopology::illness_death(),
                initial_state: 0,
                covariates: vec![
                    CovariateDist::Bernoulli { p: 0.5 },
                    CovariateDist::Uniform { low: -1.0, high: 1.0 },
                    CovariateDist::Uniform { low: -1.0, high: 1.0 },
                ],
                hazards: vec![
                    weibull(0, 1, 1.5, 3.0, &[2.0, 0.1, -0.1]),
                    weibull(0, 2, 1.2, 5.0, &[-1.5, 0.1, 0.1]),
                    weibull(1, 2, 1.5, 2.0, &[1.5, -0.1, 0.0]),
                ],
                time_varying: vec![],
                saw: SawTooth {
                    amplitude: 1.0,
                    period: 1.0,
                },
                horizon: 4.0,
                censoring: Censoring::TargetFraction { fraction: 0.3 },
            },
            n_subjects: 2000,
            seed: 2024,
        },
        "metabric-standin" => Preset {
            name: "metabric-standin",
            spec: TrueHazardSpec {
                topology: TransitionTopology::two_state(),
                initial_state: 0,
                covariates: vec![
                    CovariateDist::Normal { mean: 0.0, sd: 1.0 },
                    CovariateDist::Normal { mean: 0.0, sd: 1.0 },
                    CovariateDist::Normal { mean: 0.0, sd: 1.0 },
                    CovariateDist::Normal { mean: 0.0, sd: 1.0 },
                    CovariateDist::Bernoulli { p: 0.6 },
                    CovariateDist::Bernoulli { p: 0.3 },
                    CovariateDist::Bernoulli { p: 0.75 },
                    CovariateDist::Bernoulli { p: 0.2 },
                    CovariateDist::Uniform { low: -1.5, high: 1.5 },
                ],
                hazards: vec![weibull(
                    0,
                    1,
                    1.1,
                    12.0,
                    &[0.35, -0.25, 0.2, 0.15, 0.3, -0.2, -0.25, 0.35, 0.45],
                )],
                time_varying: vec![8],
                saw: SawTooth {
                    amplitude: 0.5,
                    period: 7.5,
                },
                horizon: 30.0,
                censoring: Censoring::TargetFraction { fraction: 0.42 },
            },
            n_subjects: 1904,
            seed: 1904,
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_spec(rate_scale: f64, horizon: f64) -> TrueHazardSpec {
        TrueHazardSpec {
            topology: TransitionTopology::two_state(),
            initial_state: 0,
            covariates: vec![CovariateDist::Uniform { low: 0.0, high: 1.0 }],
            hazards: vec![weibull(0, 1, 1.0, rate_scale, &[0.0])],
            time_varying: vec![],
            saw: SawTooth {
                amplitude: 1.0,
                period: horizon / 4.0,
            },
            horizon,
            censoring: Censoring::None,
        }
    }

    #[test]
    fn saw_tooth_shape() {
        let s = SawTooth {
            amplitude: 1.0,
            period: 2.0,
        };
        assert_eq!(s.value(0.0), 0.0);
        assert_eq!(s.value(1.0), 1.0);
        assert!((s.value(1.999999) - 2.0).abs() < 1e-5);
        assert_eq!(s.value(2.0), 0.0);
        assert_eq!(s.value_in_cycle(2.0, 0.0), 2.0);
    }

    #[test]
    fn exponential_mean_event_time() {
        let spec = constant_spec(1.0, 1e3);
        let sim = sample_paths(&spec, 10_000, 1).unwrap();
        let times: Vec<f64> = sim.dataset.subjects.iter().map(|s| s.first_exit().0).collect();
        assert!(sim.dataset.subjects.iter().all(|s| s.last_observed));
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let sd = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn zero_rates_censor_everyone_at_horizon() {
        let mut spec = constant_spec(1.0, 2.0);
        spec.hazards.clear();
        let sim = sample_paths(&spec, 50, 3).unwrap();
        for s in &sim.dataset.subjects {
            assert!(!s.last_observed);
            assert_eq!(s.observations.len(), 2);
            assert_eq!(s.final_time(), 2.0);
            assert_eq!(s.final_state(), 0);
        }
    }

    #[test]
    fn blocked_transition_never_happens() {
        let mut spec = preset("illness-death-5000").unwrap().spec;
        spec.hazards.retain(|h| (h.from, h.to) != (1, 2));
        spec.censoring = Censoring::Rate { rate: 0.1 };
        let sim = sample_paths(&spec, 500, 4).unwrap();
        let mut ill = 0;
        for s in &sim.dataset.subjects {
            for w in s.observations.windows(2) {
                assert!(!(w[0].state == 1 && w[1].state == 2));
                ill += usize::from(w[1].state == 1 && w[0].state == 0);
            }
        }
        assert!(ill > 0);
    }

    #[test]
    fn oracle_closed_form_and_identity() {
        let spec = constant_spec(1.0, 2.0);
        let occ = spec.true_occupation(&[0.5], &[0.0, 2f64.ln()]).unwrap();
        assert_eq!(occ.row(0).to_vec(), vec![1.0, 0.0]);
        assert!((occ[[1, 0]] - 0.5).abs() < 1e-8);
        assert!((occ[[1, 1]] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn oracle_conserves_and_absorbing_grows() {
        let spec = preset("illness-death-5000").unwrap().spec;
        let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let x = vec![1.0, 0.5, 0.0, -0.3, 1.0, 0.9, 0.0, -0.8, 1.0, 0.2, 0.0, 0.7];
        let occ = spec.true_occupation(&x, &grid).unwrap();
        for r in occ.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-8);
            assert!(r.iter().all(|&v| v >= -1e-12));
        }
        for w in 1..grid.len() {
            assert!(occ[[w, 2]] >= occ[[w - 1, 2]] - 1e-15);
        }
    }

    #[test]
    fn oracle_matches_weibull_survival() {
        // single transition without covariates: S(t) = exp(-(t/s)^k); the
        // t^(k-1) kink at zero limits RK4 to about 1e-7 here
        let mut spec = constant_spec(2.0, 3.0);
        spec.hazards[0].shape = 1.7;
        let grid = [0.5, 1.5, 3.0];
        let occ = spec.true_occupation(&[0.3], &grid).unwrap();
        for (i, t) in grid.iter().enumerate() {
            let s: f64 = (-(t / 2.0f64).powf(1.7)).exp();
            assert!((occ[[i, 0]] - s).abs() < 1e-6, "{} vs {s}", occ[[i, 0]]);
        }
    }

    #[test]
    fn oracle_handles_saw_discontinuities() {
        // rate exp(b * saw(t) * x) with x = 1; exact cumulative hazard is
        // piecewise integrable: int_0^P exp(b (2u/P)) du = P (e^{2b} - 1) / (2b)
        let mut spec = constant_spec(1.0, 2.0);
        spec.hazards[0].coefficients = vec![0.7];
        spec.time_varying = vec![0];
        spec.saw = SawTooth {
            amplitude: 1.0,
            period: 0.5,
        };
        let b: f64 = 0.7;
        let per_cycle = 0.5 * ((2.0 * b).exp() - 1.0) / (2.0 * b);
        let occ = spec.true_occupation(&[1.0], &[1.0, 2.0]).unwrap();
        assert!((occ[[0, 0]] - (-2.0 * per_cycle).exp()).abs() < 1e-9);
        assert!((occ[[1, 0]] - (-4.0 * per_cycle).exp()).abs() < 1e-9);
    }

    #[test]
    fn deterministic_given_seed() {
        let p = preset("two-state-smoke").unwrap();
        let a = sample_paths(&p.spec, 100, 7).unwrap();
        let b = sample_paths(&p.spec, 100, 7).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = sample_paths(&p.spec, 100, 8).unwrap();
        assert_ne!(a.dataset, c.dataset);
        let prefix = sample_paths(&p.spec, 10, 7).unwrap();
        assert_eq!(prefix.dataset.subjects[..], a.dataset.subjects[..10]);
    }

    #[test]
    fn simulated_records_validate() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            let sim = sample_paths(&p.spec, 200, p.seed).unwrap();
            let v = crate::statespace::validate_dataset(&sim.dataset);
            assert!(v.is_empty(), "{name}: {:?}", &v[..v.len().min(3)]);
        }
    }

    #[test]
    fn preset_topologies() {
        let p = preset("two-state-smoke").unwrap();
        assert_eq!(p.spec.topology.n_states(), 2);
        assert!(p.spec.hazards.iter().all(|h| h.shape == 1.0));
        let p = preset("illness-death-5000").unwrap();
        assert_eq!(p.spec.topology.edges(), &[(0, 1), (0, 2), (1, 2)]);
        assert_eq!(p.spec.n_covariates(), 12);
        assert_eq!(p.spec.time_varying.len(), 2);
        let p = preset("competing-risks-5000").unwrap();
        assert_eq!(p.spec.topology.absorbing_states(), vec![1, 2]);
        assert!(!p.spec.topology.is_allowed(1, 2));
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn shape_below_one_is_rejected_at_zero() {
        let mut spec = constant_spec(1.0, 2.0);
        spec.hazards[0].shape = 0.8;
        assert!(sample_paths(&spec, 5, 0).is_err());
    }

    #[test]
    fn censoring_fraction_is_calibrated() {
        let p = preset("illness-death-5000").unwrap();
        let sim = sample_paths(&p.spec, 5000, p.seed).unwrap();
        let censored = sim.dataset.subjects.iter().filter(|s| !s.last_observed).count() as f64 / 5000.0;
        assert!((censored - 0.3).abs() < 0.03, "{censored}");
    }

    #[test]
    fn empirical_occupation_matches_oracle() {
        let mut spec = preset("illness-death-5000").unwrap().spec;
        spec.censoring = Censoring::None;
        // fixed covariates for every subject
        let x = [1.0, 0.2, 0.0, -0.5, 1.0, 0.3, 0.0, 0.0, 1.0, -0.2, 0.0, 0.4];
        spec.covariates = x.iter().map(|&v| CovariateDist::Uniform { low: v, high: v }).collect();
        let n = 4000;
        let sim = sample_paths(&spec, n, 5).unwrap();
        let grid = [0.5, 1.5, 2.5, 3.5];
        let truth = spec.true_occupation(&x, &grid).unwrap();
        for (gi, &t) in grid.iter().enumerate() {
            for st in 0..3 {
                let freq = sim
                    .dataset
                    .subjects
                    .iter()
                    .filter(|s| s.state_at(t, &spec.topology) == Some(st))
                    .count() as f64
                    / n as f64;
                let p = truth[[gi, st]];
                let tol = 3.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-9;
                assert!(
                    (freq - p).abs() <= tol.max(3.0 / n as f64),
                    "t {t} state {st}: {freq} vs {p}"
                );
            }
        }
    }
}
