//! Neural generator matrices and the coupled forward/backward Kolmogorov
//! system with memory states.
//!
//! The integrated state of one subject is `[P_fwd (S*S) | P_bwd (S*S) | m (M)]`
//! with `dP_fwd/dt = P_fwd Q`, `dP_bwd/dt = -Q P_bwd`, `dm/dt` from the
//! dynamics network, and initial value `(I, I, m0)`. Then
//! `P(0, t) = P_fwd(t)`, `P(s, 0) = P_bwd(s)` and `P(s, t) = P_bwd(s) P_fwd(t)`.
//!
//! Covariates passed to the model are in model space (already normalized);
//! [`SurvNodeModel::prepare`] maps raw covariates into it. Times are in
//! original units; internally they are divided by `time_scale`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, softplus, Mlp, MlpTape, ParamVector};
use crate::error::{Error, Result};
use crate::odeint::{solve, DiffOdeSystem, Method, OdeSystem, Rk4Trajectory, SolveConfig};
use crate::statespace::{Normalization, TransitionTopology};

/// Subjects per integration batch at prediction time.
const PREDICT_CHUNK: usize = 256;

/// Transition intensities `lambda_ij(t)` with `lambda_ii = -sum_j lambda_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix(Array2<f64>);

impl RateMatrix {
    /// Fills the allowed off-diagonal entries (edge order of the topology)
    /// and the diagonal.
    pub fn from_edge_rates(topology: &TransitionTopology, rates: &[f64]) -> Self {
        let n = topology.n_states();
        let mut q = Array2::zeros((n, n));
        for (k, &(i, j)) in topology.edges().iter().enumerate() {
            q[[i, j]] = rates[k];
            q[[i, i]] -= rates[k];
        }
        RateMatrix(q)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// True when allowed rates are nonnegative, disallowed entries are zero
    /// and rows sum to zero up to `tol`.
    pub fn is_valid(&self, topology: &TransitionTopology, tol: f64) -> bool {
        let n = topology.n_states();
        (0..n).all(|i| {
            let row_ok = self.0.row(i).sum().abs() <= tol;
            row_ok
                && (0..n).filter(|&j| j != i).all(|j| {
                    let v = self.0[[i, j]];
                    if topology.is_allowed(i, j) {
                        v >= 0.0
                    } else {
                        v == 0.0
                    }
                })
        })
    }
}

/// Transition probabilities `P_ij(s, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Array2<f64>);

impl TransitionMatrix {
    pub fn new(p: Array2<f64>) -> Self {
        TransitionMatrix(p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.0
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// How the generator is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// `g(t, P(0,t), m(t), x)` whose first `q` outputs pass through softplus
    /// to become the allowed rates and whose remaining `M` outputs are the
    /// memory derivatives.
    Neural(Mlp),
    /// Fixed per-edge rates in original time units; memory stays constant.
    Constant(Vec<f64>),
}

/// Network sizes. `*_layers` counts hidden tanh layers of the given width;
/// every network ends in a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub encoder_dropout: f64,
    pub dynamics_layers: usize,
    pub dynamics_width: usize,
    pub memory: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 2,
            encoder_width: 800,
            encoder_dropout: 0.0,
            dynamics_layers: 3,
            dynamics_width: 1000,
            memory: 20,
        }
    }
}

fn yes() -> bool {
    true
}

pub(crate) fn layer_sizes(input: usize, layers: usize, width: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(width, layers));
    sizes.push(output);
    sizes
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvNodeModel {
    pub topology: TransitionTopology,
    pub n_covariates: usize,
    pub n_memory: usize,
    /// Covariates to initial memory; absent when the initial memory is
    /// supplied externally (variational model) or there is no memory.
    pub encoder: Option<Mlp>,
    pub dynamics: Dynamics,
    /// Whether the dynamics network reads the covariates directly. The
    /// latent model routes covariates only through `z`.
    #[serde(default = "yes")]
    pub covariates_in_dynamics: bool,
    #[serde(skip)]
    pub params: ParamVector,
    /// Original time units per unit of integration time.
    pub time_scale: f64,
    pub normalization: Option<Normalization>,
}

impl SurvNodeModel {
    /// Fresh model with randomly initialized networks.
    pub fn new<R: Rng + ?Sized>(
        topology: TransitionTopology,
        n_covariates: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamVector::new();
        let encoder = if cfg.memory > 0 {
            let sizes = layer_sizes(n_covariates, cfg.encoder_layers, cfg.encoder_width, cfg.memory);
            Some(Mlp::new(&sizes, cfg.encoder_dropout, &mut params, rng)?)
        } else {
            None
        };
        let dynamics = Self::neural_dynamics(&topology, n_covariates, cfg, &mut params, rng)?;
        Ok(SurvNodeModel {
            topology,
            n_covariates,
            n_memory: cfg.memory,
            encoder,
            dynamics,
            covariates_in_dynamics: true,
            params,
            time_scale: 1.0,
            normalization: None,
        })
    }

    /// Dynamics network `(1 + S^2 + M + d) -> (q + M)` allocated in `params`;
    /// pass `d = 0` for a network that does not read covariates.
    pub(crate) fn neural_dynamics<R: Rng + ?Sized>(
        topology: &TransitionTopology,
        n_covariates: usize,
        cfg: &ModelConfig,
        params: &mut ParamVector,
        rng: &mut R,
    ) -> Result<Dynamics> {
        let s = topology.n_states();
        let sizes = layer_sizes(
            1 + s * s + cfg.memory + n_covariates,
            cfg.dynamics_layers,
            cfg.dynamics_width,
            topology.q_count() + cfg.memory,
        );
        Ok(Dynamics::Neural(Mlp::new(&sizes, 0.0, params, rng)?))
    }

    /// Time-homogeneous model with fixed per-edge rates in original units.
    pub fn constant(topology: TransitionTopology, n_covariates: usize, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != topology.q_count() {
            return Err(Error::Dimension {
                what: "constant rates",
                expected: topology.q_count(),
                got: rates.len(),
            });
        }
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Invalid("constant rates must be nonnegative".into()));
        }
        Ok(SurvNodeModel {
            topology,
            n_covariates,
            n_memory: 0,
            encoder: None,
            dynamics: Dynamics::Constant(rates),
            covariates_in_dynamics: true,
            params: ParamVector::new(),
            time_scale: 1.0,
            normalization: None,
        })
    }

    pub fn n_states(&self) -> usize {
        self.topology.n_states()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_states() * self.n_states() + self.n_memory
    }

    /// Maps raw covariates into model space.
    pub fn prepare(&self, raw: &[f64]) -> Vec<f64> {
        match &self.normalization {
            Some(n) => n.apply(raw),
            None => raw.to_vec(),
        }
    }

    pub fn check_covariates(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.n_covariates {
            return Err(Error::Dimension {
                what: "covariates",
                expected: self.n_covariates,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Sets the time scale so that `max_time` maps to `target`.
    pub fn set_time_scale(&mut self, max_time: f64, target: f64) -> Result<()> {
        if !(max_time > 0.0 && target > 0.0) {
            return Err(Error::Invalid(format!("cannot scale max time {max_time} to {target}")));
        }
        self.time_scale = max_time / target;
        Ok(())
    }

    pub fn system<'a>(&'a self, params: &'a [f64], x: ArrayView2<'a, f64>) -> KfeSystem<'a> {
        KfeSystem { model: self, params, x }
    }

    /// Encoder output `m(0)` (evaluation mode); `n x 0` without memory.
    pub fn initial_memory(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_covariates(&x)?;
        match &self.encoder {
            Some(enc) => enc.forward(&self.params.values, x),
            None => Ok(Array2::zeros((x.nrows(), self.n_memory))),
        }
    }

    /// `(I, I, m0)` for each row of `m0`.
    pub fn initial_state(&self, m0: ArrayView2<f64>) -> Array2<f64> {
        let s = self.n_states();
        let s2 = s * s;
        let mut y = Array2::zeros((m0.nrows(), self.state_dim()));
        for mut row in y.rows_mut() {
            for i in 0..s {
                row[i * s + i] = 1.0;
                row[s2 + i * s + i] = 1.0;
            }
        }
        y.slice_mut(s![.., 2 * s2..]).assign(&m0);
        y
    }

    /// States at the original-unit `times` for every row of `x`, integrating
    /// from time zero. `m0` overrides the encoder output when given.
    pub fn solve_states(
        &self,
        x: ArrayView2<f64>,
        m0: Option<ArrayView2<f64>>,
        times: &[f64],
        method: Method,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_covariates(&x)?;
        if times.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Invalid("prediction times must be nonnegative".into()));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let sorted: Vec<f64> = order.iter().map(|&k| times[k] / self.time_scale).collect();
        let t_end = sorted.last().copied().unwrap_or(0.0);
        let cfg = SolveConfig::new(method, sorted);
        let mut out = vec![Array2::zeros((x.nrows(), self.state_dim())); times.len()];
        let m0 = match m0 {
            Some(m) => m.to_owned(),
            None => self.initial_memory(x)?,
        };
        for start in (0..x.nrows()).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(x.nrows());
            let rows: Vec<usize> = (start..end).collect();
            let y0 = self.initial_state(m0.slice(s![start..end, ..]));
            let sys = self.system(&self.params.values, x);
            let sol = solve(&sys, y0.view(), &rows, (0.0, t_end), &cfg)?;
            for (i, &k) in order.iter().enumerate() {
                out[k].slice_mut(s![start..end, ..]).assign(&sol.states[i]);
            }
        }
        Ok(out)
    }

    fn block(&self, y: ArrayView1<f64>, which: usize) -> Array2<f64> {
        let s = self.n_states();
        let off = which * s * s;
        Array2::from_shape_vec((s, s), y.slice(s![off..off + s * s]).to_vec()).expect("square block")
    }

    /// `P(0, t)` extracted from an integrated state.
    pub fn forward_block(&self, y: ArrayView1<f64>) -> TransitionMatrix {
        TransitionMatrix(self.block(y, 0))
    }

    /// `P(s, 0)` extracted from an integrated state at time `s`.
    pub fn backward_block(&self, y: ArrayView1<f64>) -> TransitionMatrix {
        TransitionMatrix(self.block(y, 1))
    }

    /// `P(s, t)` for model-space covariates `x`.
    pub fn transition_matrix(&self, x: &[f64], s: f64, t: f64, method: Method) -> Result<TransitionMatrix> {
        if !(0.0 <= s && s <= t) {
            return Err(Error::Invalid(format!("need 0 <= s <= t, got s = {s}, t = {t}")));
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let states = self.solve_states(xv, None, &[s, t], method)?;
        let pb = self.block(states[0].row(0), 1);
        let pf = self.block(states[1].row(0), 0);
        Ok(TransitionMatrix(pb.dot(&pf)))
    }

    /// `P(0, t)` for every subject (outer) and time (inner).
    pub fn transition_matrices(
        &self,
        x: ArrayView2<f64>,
        times: &[f64],
        method: Method,
    ) -> Result<Vec<Vec<TransitionMatrix>>> {
        let states = self.solve_states(x, None, times, method)?;
        Ok((0..x.nrows())
            .map(|r| states.iter().map(|st| self.forward_block(st.row(r))).collect())
            .collect())
    }

    /// Generator at each time in original units, evaluated on the solved
    /// trajectory.
    pub fn hazard_rates(&self, x: &[f64], times: &[f64], method: Method) -> Result<Vec<RateMatrix>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let states = self.solve_states(xv, None, times, method)?;
        let sys = self.system(&self.params.values, xv);
        states
            .iter()
            .zip(times)
            .map(|(st, &t)| {
                let rates = sys.edge_rates(&[t / self.time_scale], st.view(), &[0])?;
                let per_unit: Vec<f64> = rates.row(0).iter().map(|r| r / self.time_scale).collect();
                Ok(RateMatrix::from_edge_rates(&self.topology, &per_unit))
            })
            .collect()
    }

    /// Elementwise ratio of the rate trajectories of `x` and `x_ref`; NaN
    /// where the reference rate is zero.
    pub fn hazard_ratio(&self, x: &[f64], x_ref: &[f64], times: &[f64], method: Method) -> Result<Vec<Array2<f64>>> {
        let a = self.hazard_rates(x, times, method)?;
        let b = self.hazard_rates(x_ref, times, method)?;
        Ok(a.iter()
            .zip(&b)
            .map(|(a, b)| {
                let n = self.n_states();
                Array2::from_shape_fn((n, n), |(i, j)| {
                    if i != j && b.get(i, j) > 0.0 {
                        a.get(i, j) / b.get(i, j)
                    } else {
                        f64::NAN
                    }
                })
            })
            .collect())
    }

    /// Stacks all subjects into one block-diagonal system, integrates once
    /// with fixed-step RK4 and returns each subject's states at its own
    /// original-unit times.
    pub fn batch_solve(
        &self,
        x: ArrayView2<f64>,
        m0: Option<ArrayView2<f64>>,
        times: &[Vec<f64>],
        steps_per_unit: usize,
    ) -> Result<Vec<Vec<Array1<f64>>>> {
        self.check_covariates(&x)?;
        if times.len() != x.nrows() {
            return Err(Error::Dimension {
                what: "per-subject save times",
                expected: x.nrows(),
                got: times.len(),
            });
        }
        let m0 = match m0 {
            Some(m) => m.to_owned(),
            None => self.initial_memory(x)?,
        };
        let y0 = self.initial_state(m0.view());
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let scaled: Vec<Vec<f64>> = times
            .iter()
            .map(|ts| ts.iter().map(|t| t / self.time_scale).collect())
            .collect();
        let sys = self.system(&self.params.values, x);
        let traj = Rk4Trajectory::forward(&sys, y0.view(), &rows, 0.0, 1.0 / steps_per_unit as f64, &scaled)?;
        Ok((0..rows.len()).map(|r| traj.saved(r).to_vec()).collect())
    }
}

/// The coupled system for a fixed parameter vector; `rows` index the
/// covariate matrix `x`.
pub struct KfeSystem<'a> {
    model: &'a SurvNodeModel,
    params: &'a [f64],
    x: ArrayView2<'a, f64>,
}

/// Recorded evaluation of the generator.
pub struct RhsTape {
    y: Array2<f64>,
    /// Raw network output (pre-softplus rates, memory derivatives).
    raw: Array2<f64>,
    /// Edge rates, one row per subject.
    rates: Array2<f64>,
    net: Option<MlpTape>,
}

impl<'a> KfeSystem<'a> {
    fn s(&self) -> usize {
        self.model.n_states()
    }

    fn net_input(&self, t: &[f64], y: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
        let s2 = self.s() * self.s();
        let m = self.model.n_memory;
        let d = if self.model.covariates_in_dynamics {
            self.model.n_covariates
        } else {
            0
        };
        let mut inp = Array2::zeros((y.nrows(), 1 + s2 + m + d));
        for (r, &row) in rows.iter().enumerate() {
            let mut dst = inp.row_mut(r);
            dst[0] = t[r];
            dst.slice_mut(s![1..1 + s2]).assign(&y.slice(s![r, ..s2]));
            dst.slice_mut(s![1 + s2..1 + s2 + m]).assign(&y.slice(s![r, 2 * s2..]));
            if d > 0 {
                dst.slice_mut(s![1 + s2 + m..]).assign(&self.x.row(row));
            }
        }
        inp
    }

    /// Generator outputs: `(raw outputs, edge rates, tape)`.
    fn generate(
        &self,
        t: &[f64],
        y: ArrayView2<f64>,
        rows: &[usize],
        taped: bool,
    ) -> Result<(Array2<f64>, Array2<f64>, Option<MlpTape>)> {
        if y.ncols() != self.model.state_dim() {
            return Err(Error::Dimension {
                what: "state",
                expected: self.model.state_dim(),
                got: y.ncols(),
            });
        }
        let q = self.model.topology.q_count();
        match &self.model.dynamics {
            Dynamics::Constant(rates) => {
                let mut r = Array2::zeros((y.nrows(), q));
                for mut row in r.rows_mut() {
                    row.assign(&ArrayView1::from(rates.as_slice()));
                }
                let r = r * self.model.time_scale;
                Ok((Array2::zeros((y.nrows(), 0)), r, None))
            }
            Dynamics::Neural(net) => {
                let inp = self.net_input(t, &y, rows);
                let (raw, tape) = if taped {
                    let (raw, tape) = net.forward_train::<rand_chacha::ChaCha8Rng>(self.params, inp.view(), None)?;
                    (raw, Some(tape))
                } else {
                    (net.forward(self.params, inp.view())?, None)
                };
                let rates = raw.slice(s![.., ..q]).mapv(softplus);
                Ok((raw, rates, tape))
            }
        }
    }

    /// Allowed edge rates (integration time units) at the given states.
    pub fn edge_rates(&self, t: &[f64], y: ArrayView2<f64>, rows: &[usize]) -> Result<Array2<f64>> {
        Ok(self.generate(t, y, rows, false)?.1)
    }

    /// Edge rates with a tape for [`KfeSystem::edge_rates_vjp`].
    pub fn edge_rates_taped(&self, t: &[f64], y: ArrayView2<f64>, rows: &[usize]) -> Result<(Array2<f64>, RhsTape)> {
        let (raw, rates, net) = self.generate(t, y, rows, true)?;
        Ok((
            rates.clone(),
            RhsTape {
                y: y.to_owned(),
                raw,
                rates,
                net,
            },
        ))
    }

    /// Pulls a cotangent on the edge rates back to the state, accumulating
    /// parameter gradients.
    pub fn edge_rates_vjp(&self, tape: &RhsTape, cot: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let q = self.model.topology.q_count();
        let mut a_raw = Array2::zeros(tape.raw.raw_dim());
        for r in 0..cot.nrows() {
            for k in 0..q {
                a_raw[[r, k]] = cot[[r, k]] * sigmoid(tape.raw[[r, k]]);
            }
        }
        let mut out = Array2::zeros(tape.y.raw_dim());
        self.net_vjp(tape, &a_raw, grad, &mut out);
        out
    }

    fn net_vjp(&self, tape: &RhsTape, a_raw: &Array2<f64>, grad: &mut [f64], state_cot: &mut Array2<f64>) {
        let (Dynamics::Neural(net), Some(net_tape)) = (&self.model.dynamics, &tape.net) else {
            return;
        };
        let s2 = self.s() * self.s();
        let m = self.model.n_memory;
        let a_in = net.backward(self.params, net_tape, a_raw.view(), grad);
        let mut pf = state_cot.slice_mut(s![.., ..s2]);
        pf += &a_in.slice(s![.., 1..1 + s2]);
        let mut mem = state_cot.slice_mut(s![.., 2 * s2..]);
        mem += &a_in.slice(s![.., 1 + s2..1 + s2 + m]);
    }

    fn assemble(&self, y: &ArrayView2<f64>, raw: &Array2<f64>, rates: &Array2<f64>) -> Array2<f64> {
        let s = self.s();
        let s2 = s * s;
        let q = self.model.topology.q_count();
        let m = self.model.n_memory;
        let edges = self.model.topology.edges();
        let mut out = Array2::zeros(y.raw_dim());
        let mut qm = vec![0.0; s2];
        for r in 0..y.nrows() {
            qm.iter_mut().for_each(|v| *v = 0.0);
            for (k, &(i, j)) in edges.iter().enumerate() {
                let v = rates[[r, k]];
                qm[i * s + j] += v;
                qm[i * s + i] -= v;
            }
            let yr = y.row(r);
            let mut o = out.row_mut(r);
            for i in 0..s {
                for j in 0..s {
                    let mut f = 0.0;
                    let mut b = 0.0;
                    for k in 0..s {
                        f += yr[i * s + k] * qm[k * s + j];
                        b -= qm[i * s + k] * yr[s2 + k * s + j];
                    }
                    o[i * s + j] = f;
                    o[s2 + i * s + j] = b;
                }
            }
            if raw.ncols() > 0 {
                for c in 0..m {
                    o[2 * s2 + c] = raw[[r, q + c]];
                }
            }
        }
        out
    }
}

impl OdeSystem for KfeSystem<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }

    fn rhs(&self, t: &[f64], y: ArrayView2<f64>, rows: &[usize]) -> Result<Array2<f64>> {
        let (raw, rates, _) = self.generate(t, y, rows, false)?;
        Ok(self.assemble(&y, &raw, &rates))
    }
}

impl DiffOdeSystem for KfeSystem<'_> {
    type Tape = RhsTape;

    fn rhs_taped(&self, t: &[f64], y: ArrayView2<f64>, rows: &[usize]) -> Result<(Array2<f64>, RhsTape)> {
        let (raw, rates, net) = self.generate(t, y, rows, true)?;
        let out = self.assemble(&y, &raw, &rates);
        Ok((
            out,
            RhsTape {
                y: y.to_owned(),
                raw,
                rates,
                net,
            },
        ))
    }

    fn rhs_vjp(&self, tape: &RhsTape, cot: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let s = self.s();
        let s2 = s * s;
        let q = self.model.topology.q_count();
        let m = self.model.n_memory;
        let edges = self.model.topology.edges();
        let mut state_cot = Array2::zeros(tape.y.raw_dim());
        let mut a_raw = Array2::zeros(tape.raw.raw_dim());
        let mut qm = vec![0.0; s2];
        let mut aq = vec![0.0; s2];
        for r in 0..tape.y.nrows() {
            qm.iter_mut().for_each(|v| *v = 0.0);
            for (k, &(i, j)) in edges.iter().enumerate() {
                let v = tape.rates[[r, k]];
                qm[i * s + j] += v;
                qm[i * s + i] -= v;
            }
            let y = tape.y.row(r);
            let c = cot.row(r);
            let mut sc = state_cot.row_mut(r);
            // dPf' = Pf Q ; dPb' = -Q Pb
            for i in 0..s {
                for j in 0..s {
                    let mut pf_bar = 0.0;
                    let mut pb_bar = 0.0;
                    let mut q_bar = 0.0;
                    for k in 0..s {
                        pf_bar += c[i * s + k] * qm[j * s + k];
                        pb_bar -= qm[k * s + i] * c[s2 + k * s + j];
                        q_bar += y[k * s + i] * c[k * s + j] - c[s2 + i * s + k] * y[s2 + j * s + k];
                    }
                    sc[i * s + j] = pf_bar;
                    sc[s2 + i * s + j] = pb_bar;
                    aq[i * s + j] = q_bar;
                }
            }
            if tape.raw.ncols() > 0 {
                for (k, &(i, j)) in edges.iter().enumerate() {
                    let a_rate = aq[i * s + j] - aq[i * s + i];
                    a_raw[[r, k]] = a_rate * sigmoid(tape.raw[[r, k]]);
                }
                for cc in 0..m {
                    a_raw[[r, q + cc]] = c[2 * s2 + cc];
                }
            }
        }
        self.net_vjp(tape, &a_raw, grad, &mut state_cot);
        state_cot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(memory: usize) -> ModelConfig {
        ModelConfig {
            encoder_layers: 1,
            encoder_width: 8,
            encoder_dropout: 0.0,
            dynamics_layers: 2,
            dynamics_width: 12,
            memory,
        }
    }

    fn random_model(topology: TransitionTopology, d: usize, seed: u64) -> SurvNodeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SurvNodeModel::new(topology, d, &small_cfg(3), &mut rng).unwrap();
        for v in m.params.values.iter_mut() {
            *v += 0.2 * (rng.random::<f64>() - 0.5);
        }
        m
    }

    const DOPRI: Method = Method::Dopri5 {
        abs_tol: 1e-8,
        rel_tol: 1e-8,
    };

    #[test]
    fn network_dimensions() {
        let m = random_model(TransitionTopology::illness_death(), 4, 0);
        let Dynamics::Neural(net) = &m.dynamics else { panic!() };
        assert_eq!(net.input_dim(), 1 + 9 + 3 + 4);
        assert_eq!(net.output_dim(), 3 + 3);
        assert_eq!(m.encoder.as_ref().unwrap().output_dim(), 3);
    }

    #[test]
    fn initial_state_is_identity() {
        let m = random_model(TransitionTopology::illness_death(), 2, 1);
        let x = array![[0.3, -1.0]];
        let y0 = m.initial_state(m.initial_memory(x.view()).unwrap().view());
        let eye = Array2::<f64>::eye(3);
        assert_eq!(m.forward_block(y0.row(0)).into_inner(), eye);
        assert_eq!(m.backward_block(y0.row(0)).into_inner(), eye);
    }

    #[test]
    fn constant_generator_arithmetic() {
        let m = SurvNodeModel::constant(TransitionTopology::two_state(), 0, vec![1.0]).unwrap();
        let x = Array2::zeros((1, 0));
        let y0 = m.initial_state(Array2::zeros((1, 0)).view());
        let f = m.system(&[], x.view()).rhs(&[0.0], y0.view(), &[0]).unwrap();
        assert_eq!(f.row(0).slice(s![..4]).to_vec(), vec![-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rhs_rows_conserve_probability() {
        let m = random_model(TransitionTopology::illness_death(), 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, m.state_dim()), |_| rng.random_range(-1.0..1.0));
        let f = m
            .system(&m.params.values, x.view())
            .rhs(&[0.1, 0.2, 0.3, 0.4], y.view(), &[0, 1, 2, 3])
            .unwrap();
        for r in 0..4 {
            for i in 0..3 {
                let sum: f64 = (0..3).map(|j| f[[r, i * 3 + j]]).sum();
                assert!(sum.abs() < 1e-12, "{sum}");
            }
        }
    }

    #[test]
    fn constant_rate_closed_form() {
        let m = SurvNodeModel::constant(TransitionTopology::two_state(), 0, vec![1.0]).unwrap();
        let p = m.transition_matrix(&[], 0.0, 2f64.ln(), DOPRI).unwrap();
        let expect = array![[0.5, 0.5], [0.0, 1.0]];
        for (a, b) in p.as_array().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
        let same = m.transition_matrix(&[], 0.7, 0.7, DOPRI).unwrap();
        assert!((same.into_inner() - Array2::<f64>::eye(2))
            .iter()
            .all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn time_scale_preserves_predictions() {
        let mut m = SurvNodeModel::constant(TransitionTopology::two_state(), 0, vec![0.5]).unwrap();
        m.set_time_scale(10.0, 1.0).unwrap();
        let p = m.transition_matrix(&[], 0.0, 4.0, DOPRI).unwrap();
        assert!((p.get(0, 0) - (-2f64).exp()).abs() < 1e-7);
        let rates = m.hazard_rates(&[], &[1.0, 3.0], DOPRI).unwrap();
        assert!((rates[0].get(0, 1) - 0.5).abs() < 1e-12);
        assert!((rates[1].get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probability_conservation_and_bounds() {
        let m = random_model(TransitionTopology::illness_death(), 2, 3);
        let x = array![[0.5, -0.5], [-1.0, 2.0]];
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.1).collect();
        for per_subject in m.transition_matrices(x.view(), &times, DOPRI).unwrap() {
            for p in per_subject {
                assert!(p.max_row_sum_error() < 1e-6);
                assert!(p.as_array().iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
            }
        }
    }

    #[test]
    fn backward_block_inverts_forward() {
        let m = random_model(TransitionTopology::illness_death(), 2, 4);
        let x = array![[0.2, 0.9]];
        let grid: Vec<f64> = (1..=10).map(|k| k as f64 * 0.15).collect();
        let states = m.solve_states(x.view(), None, &grid, DOPRI).unwrap();
        for st in &states {
            let pf = m.forward_block(st.row(0)).into_inner();
            let pb = m.backward_block(st.row(0)).into_inner();
            let dev = (pb.dot(&pf) - Array2::<f64>::eye(3))
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(dev < 1e-5, "{dev}");
        }
    }

    #[test]
    fn chapman_kolmogorov_composition() {
        let m = random_model(TransitionTopology::illness_death(), 1, 5);
        let x = [0.4];
        let (s_, u) = (0.6, 1.4);
        let p0u = m.transition_matrix(&x, 0.0, u, DOPRI).unwrap().into_inner();
        let p0s = m.transition_matrix(&x, 0.0, s_, DOPRI).unwrap().into_inner();
        let psu = m.transition_matrix(&x, s_, u, DOPRI).unwrap().into_inner();
        let dev = (p0s.dot(&psu) - p0u).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(dev < 1e-5);
    }

    #[test]
    fn absorbing_probability_is_nondecreasing() {
        let m = random_model(TransitionTopology::competing_risks(2), 2, 6);
        let x = array![[1.0, -0.3]];
        let times: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
        let ps = &m.transition_matrices(x.view(), &times, DOPRI).unwrap()[0];
        for a in m.topology.absorbing_states() {
            for w in ps.windows(2) {
                assert!(w[1].get(0, a) >= w[0].get(0, a) - 1e-8);
            }
        }
    }

    #[test]
    fn masked_rates_are_zero() {
        let m = random_model(TransitionTopology::illness_death(), 2, 7);
        let rates = m.hazard_rates(&[0.1, 0.2], &[0.0, 0.5, 1.0], DOPRI).unwrap();
        for r in &rates {
            assert!(r.is_valid(&m.topology, 1e-12));
            assert_eq!(r.get(1, 0), 0.0);
            assert!(r.get(0, 1) > 0.0 && r.get(0, 2) > 0.0 && r.get(1, 2) > 0.0);
        }
        let c = SurvNodeModel::constant(TransitionTopology::two_state(), 0, vec![0.3]).unwrap();
        let rates = c.hazard_rates(&[], &[0.1, 0.9, 1.7], DOPRI).unwrap();
        for r in &rates {
            assert!((r.get(0, 1) - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn hazard_ratio_is_elementwise_division() {
        let m = random_model(TransitionTopology::illness_death(), 2, 8);
        let times = [0.2, 0.8];
        let hr = m.hazard_ratio(&[1.0, 0.0], &[0.0, 0.0], &times, DOPRI).unwrap();
        let a = m.hazard_rates(&[1.0, 0.0], &times, DOPRI).unwrap();
        let b = m.hazard_rates(&[0.0, 0.0], &times, DOPRI).unwrap();
        for k in 0..2 {
            for &(i, j) in m.topology.edges() {
                assert_eq!(hr[k][[i, j]], a[k].get(i, j) / b[k].get(i, j));
                assert!(hr[k][[i, j]].is_finite());
            }
        }
    }

    #[test]
    fn batch_solve_matches_individual_solves() {
        let m = random_model(TransitionTopology::illness_death(), 2, 9);
        let x = array![[0.1, 0.2], [-0.5, 1.0], [2.0, -1.0]];
        let times = vec![vec![0.3, 1.0], vec![0.25, 0.5, 1.7], vec![2.2]];
        let batch = m.batch_solve(x.view(), None, &times, 32).unwrap();
        for r in 0..3 {
            let single = m
                .batch_solve(x.slice(s![r..r + 1, ..]), None, &times[r..r + 1], 32)
                .unwrap();
            for (a, b) in batch[r].iter().zip(&single[0]) {
                let dev = (a - b).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                assert!(dev < 1e-9);
            }
        }
        let twins = array![[0.3, 0.3], [0.3, 0.3]];
        let t2 = vec![vec![0.5, 1.0], vec![0.5, 1.0]];
        let out = m.batch_solve(twins.view(), None, &t2, 32).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn rhs_vjp_matches_finite_differences() {
        let m = random_model(TransitionTopology::illness_death(), 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((2, m.state_dim()), |_| rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_fn((2, m.state_dim()), |_| rng.random_range(-1.0..1.0));
        let t = [0.3, 0.6];
        let rows = [0, 1];
        let loss = |p: &[f64], y: &Array2<f64>| -> f64 {
            (&m.system(p, x.view()).rhs(&t, y.view(), &rows).unwrap() * &c).sum()
        };
        let sys = m.system(&m.params.values, x.view());
        let (_, tape) = sys.rhs_taped(&t, y.view(), &rows).unwrap();
        let mut grad = vec![0.0; m.params.len()];
        let cy = sys.rhs_vjp(&tape, c.view(), &mut grad);
        let h = 1e-6;
        for i in (0..m.params.len()).step_by(7) {
            let mut p1 = m.params.values.clone();
            p1[i] += h;
            let mut p2 = m.params.values.clone();
            p2[i] -= h;
            let fd = (loss(&p1, &y) - loss(&p2, &y)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
        for r in 0..2 {
            for k in 0..m.state_dim() {
                let mut y1 = y.clone();
                y1[[r, k]] += h;
                let mut y2 = y.clone();
                y2[[r, k]] -= h;
                let fd = (loss(&m.params.values, &y1) - loss(&m.params.values, &y2)) / (2.0 * h);
                assert!((fd - cy[[r, k]]).abs() < 1e-7 * (1.0 + fd.abs()), "state {k}");
            }
        }
    }
}
