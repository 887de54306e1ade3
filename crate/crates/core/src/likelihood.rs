//! Censored multi-state likelihood, the memory regularizer and training.
//!
//! A subject observed at `t_0 < t_1 < ... < t_{m-1}` in states
//! `y_0, ..., y_{m-1}` contributes, per consecutive pair `(a, b)`:
//!
//! - exact jump (`a != b`): `log P_aa(t_{j-1}, t_j) + log lambda_ab(t_j)`
//! - interval-censored move: `log P_ab(t_{j-1}, t_j)`
//! - no change, or a final censoring record: `log P_aa(t_{j-1}, t_j)`
//!
//! Kernels come from one solve started at time zero, `P(s, t) = P_bwd(s)
//! P_fwd(t)`, which also conditions left-truncated subjects on their entry.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, AdamConfig, ParamVector, StepStatus};
use crate::error::{Error, Result};
use crate::odeint::Rk4Trajectory;
use crate::statespace::{Dataset, ObsMode, SubjectRecord};
use crate::survnode::{ModelConfig, SurvNodeModel};

/// Probabilities and rates below this are clamped inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub encoder_dropout: f64,
    pub dynamics_layers: usize,
    pub dynamics_width: usize,
    pub memory: usize,
    /// Weight `mu` of the memory regularizer.
    pub lyapunov_weight: f64,
    /// The largest training time is mapped to this value.
    pub time_scale: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fixed RK4 steps per unit of scaled time.
    pub rk4_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder_layers: 2,
            encoder_width: 800,
            encoder_dropout: 0.0,
            dynamics_layers: 3,
            dynamics_width: 1000,
            memory: 20,
            lyapunov_weight: 1e-4,
            time_scale: 1.0,
            learning_rate: 1e-4,
            weight_decay: 1e-7,
            batch_size: 512,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            rk4_steps: 64,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder_layers: self.encoder_layers,
            encoder_width: self.encoder_width,
            encoder_dropout: self.encoder_dropout,
            dynamics_layers: self.dynamics_layers,
            dynamics_width: self.dynamics_width,
            memory: self.memory,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes_ok = self.encoder_width > 0
            && self.dynamics_width > 0
            && self.batch_size > 0
            && self.rk4_steps > 0
            && self.max_epochs > 0;
        if !sizes_ok {
            return Err(Error::Config(
                "network widths, batch size, epochs and rk4 steps must be positive".into(),
            ));
        }
        if !(self.lyapunov_weight >= 0.0) {
            return Err(Error::Config(format!("lyapunov_weight {} < 0", self.lyapunov_weight)));
        }
        if !(self.time_scale > 0.0) {
            return Err(Error::Config(format!(
                "time_scale {} must be positive",
                self.time_scale
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate must be positive and weight decay nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.encoder_dropout) {
            return Err(Error::Config(format!(
                "encoder_dropout {} outside [0, 1)",
                self.encoder_dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Mean per-subject negative log-likelihood (original time units).
    pub nll: f64,
    pub lyapunov: f64,
    pub mu: f64,
    /// `nll + mu * lyapunov`.
    pub total: f64,
    pub per_subject: Vec<f64>,
    /// Number of probabilities or rates clamped at [`PROB_FLOOR`].
    pub clamp_count: usize,
}

impl LossBreakdown {
    fn new(per_subject: Vec<f64>, lyapunov: f64, mu: f64, clamp_count: usize) -> Self {
        let nll = if per_subject.is_empty() {
            0.0
        } else {
            per_subject.iter().sum::<f64>() / per_subject.len() as f64
        };
        LossBreakdown {
            nll,
            lyapunov,
            mu,
            total: nll + mu * lyapunov,
            per_subject,
            clamp_count,
        }
    }
}

/// Mean over rows of the mean squared memory coordinate.
pub fn lyapunov_loss(memory: ArrayView2<f64>) -> f64 {
    if memory.nrows() == 0 || memory.ncols() == 0 {
        return 0.0;
    }
    memory.iter().map(|v| v * v).sum::<f64>() / (memory.nrows() * memory.ncols()) as f64
}

struct Term {
    from: usize,
    to: usize,
    a: usize,
    b: usize,
    rate: bool,
}

struct Plan {
    saves: Vec<f64>,
    terms: Vec<Term>,
    t_mmb: Option<usize>,
}

fn plan(subj: &SubjectRecord, model: &SurvNodeModel, t_mmb: Option<f64>) -> Plan {
    let scale = model.time_scale;
    let mut saves: Vec<f64> = subj.observations.iter().map(|o| o.time / scale).collect();
    if let Some(t) = t_mmb {
        saves.push(t);
    }
    saves.sort_by(f64::total_cmp);
    saves.dedup();
    let idx = |t: f64| saves.iter().position(|&s| s == t / scale).expect("save time present");
    let obs = &subj.observations;
    let m = obs.len();
    let observed = subj.effective_last_observed(&model.topology);
    let mut terms = Vec::with_capacity(m.saturating_sub(1));
    for j in 1..m {
        let (a, b) = (obs[j - 1].state, obs[j].state);
        let censored_end = j == m - 1 && !observed;
        let (b, rate) = match obs[j].mode {
            ObsMode::Interval => (b, false),
            ObsMode::Exact if censored_end || a == b => (a, false),
            ObsMode::Exact => (b, true),
        };
        terms.push(Term {
            from: idx(obs[j - 1].time),
            to: idx(obs[j].time),
            a,
            b,
            rate,
        });
    }
    let t_mmb = t_mmb.map(|t| saves.iter().position(|&s| s == t).expect("t_mmb present"));
    Plan { saves, terms, t_mmb }
}

fn clamped_log(v: f64, clamps: &mut usize) -> (f64, bool) {
    if v < PROB_FLOOR || v.is_nan() {
        *clamps += 1;
        (PROB_FLOOR.ln(), true)
    } else {
        (v.ln(), false)
    }
}

pub(crate) struct BatchEval {
    pub loss: LossBreakdown,
    /// Cotangent of the initial memory, when gradients were requested.
    pub cot_m0: Option<Array2<f64>>,
}

/// Loss of a batch given its initial memory `m0` (one row per subject).
/// With `grad`, accumulates the gradient of `loss.total` with respect to
/// the dynamics parameters and returns the cotangent of `m0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kfe_batch(
    model: &SurvNodeModel,
    params: &[f64],
    subjects: &[&SubjectRecord],
    x: ArrayView2<f64>,
    m0: ArrayView2<f64>,
    mu: f64,
    steps_per_unit: usize,
    grad: Option<&mut [f64]>,
) -> Result<BatchEval> {
    let n = subjects.len();
    if n == 0 {
        return Ok(BatchEval {
            loss: LossBreakdown::new(Vec::new(), 0.0, mu, 0),
            cot_m0: None,
        });
    }
    let s_n = model.n_states();
    let s2 = s_n * s_n;
    let dim = model.state_dim();
    let n_mem = model.n_memory;
    let t_mmb = (n_mem > 0).then(|| {
        subjects
            .iter()
            .map(|s| s.final_time() / model.time_scale)
            .fold(0.0, f64::max)
    });
    let plans: Vec<Plan> = subjects.iter().map(|s| plan(s, model, t_mmb)).collect();
    let saves: Vec<Vec<f64>> = plans.iter().map(|p| p.saves.clone()).collect();
    let rows: Vec<usize> = (0..n).collect();
    let sys = model.system(params, x);
    let y0 = model.initial_state(m0);
    let traj = Rk4Trajectory::forward(&sys, y0.view(), &rows, 0.0, 1.0 / steps_per_unit as f64, &saves)?;

    // hazards at exact jump times, evaluated in one batch
    let mut rate_sites: Vec<(usize, usize, usize)> = Vec::new();
    for (r, p) in plans.iter().enumerate() {
        for (ti, term) in p.terms.iter().enumerate() {
            if term.rate {
                rate_sites.push((r, ti, p.terms[ti].to));
            }
        }
    }
    let want_grad = grad.is_some();
    let mut rate_y = Array2::zeros((rate_sites.len(), dim));
    let mut rate_t = Vec::with_capacity(rate_sites.len());
    let mut rate_rows = Vec::with_capacity(rate_sites.len());
    for (k, &(r, _, idx)) in rate_sites.iter().enumerate() {
        rate_y.row_mut(k).assign(&traj.saved(r)[idx]);
        rate_t.push(plans[r].saves[idx]);
        rate_rows.push(r);
    }
    let (rates, rate_tape) = if rate_sites.is_empty() {
        (Array2::zeros((0, model.topology.q_count())), None)
    } else if want_grad {
        let (r, t) = sys.edge_rates_taped(&rate_t, rate_y.view(), &rate_rows)?;
        (r, Some(t))
    } else {
        (sys.edge_rates(&rate_t, rate_y.view(), &rate_rows)?, None)
    };

    let w = 1.0 / n as f64;
    let log_scale = model.time_scale.ln();
    let mut clamps = 0usize;
    let mut per_subject = vec![0.0; n];
    let mut cot: Vec<Vec<Array1<f64>>> = if want_grad {
        plans.iter().map(|p| vec![Array1::zeros(dim); p.saves.len()]).collect()
    } else {
        Vec::new()
    };
    let mut rate_cot = Array2::zeros(rates.raw_dim());
    let mut site = 0usize;
    for (r, p) in plans.iter().enumerate() {
        let saved = traj.saved(r);
        for term in &p.terms {
            let (a, b) = (term.a, term.b);
            // a jump contributes the probability of staying in `a`
            let c = if term.rate { a } else { b };
            let pb = &saved[term.from];
            let pf = &saved[term.to];
            // P_ac(s, t) = sum_k P_bwd(s)[a, k] P_fwd(t)[k, c]
            let prob: f64 = (0..s_n).map(|k| pb[s2 + a * s_n + k] * pf[k * s_n + c]).sum();
            let (lp, clamped) = clamped_log(prob, &mut clamps);
            per_subject[r] -= lp;
            if want_grad && !clamped {
                let g = -w / prob;
                for k in 0..s_n {
                    let pf_kc = pf[k * s_n + c];
                    let pb_ak = pb[s2 + a * s_n + k];
                    cot[r][term.from][s2 + a * s_n + k] += g * pf_kc;
                    cot[r][term.to][k * s_n + c] += g * pb_ak;
                }
            }
            if term.rate {
                let e = model.topology.edge_index(a, b).expect("validated transition");
                let lam = rates[[site, e]];
                let (ll, clamped) = clamped_log(lam, &mut clamps);
                per_subject[r] -= ll - log_scale;
                if want_grad && !clamped {
                    rate_cot[[site, e]] = -w / lam;
                }
                site += 1;
            }
        }
    }

    let mut lyap = 0.0;
    if t_mmb.is_some() {
        let mut mem = Array2::zeros((n, n_mem));
        for (r, p) in plans.iter().enumerate() {
            let y = &traj.saved(r)[p.t_mmb.expect("planned")];
            mem.row_mut(r).assign(&y.slice(s![2 * s2..]));
        }
        lyap = lyapunov_loss(mem.view());
        if want_grad && mu > 0.0 {
            let c = mu * 2.0 / (n * n_mem) as f64;
            for (r, p) in plans.iter().enumerate() {
                let y = &traj.saved(r)[p.t_mmb.expect("planned")];
                let mut dst = cot[r][p.t_mmb.expect("planned")].slice_mut(s![2 * s2..]);
                dst.scaled_add(c, &y.slice(s![2 * s2..]));
            }
        }
    }
    let loss = LossBreakdown::new(per_subject, lyap, mu, clamps);

    let Some(grad) = grad else {
        return Ok(BatchEval { loss, cot_m0: None });
    };
    if let Some(tape) = &rate_tape {
        let back = sys.edge_rates_vjp(tape, rate_cot.view(), grad);
        for (k, &(r, _, idx)) in rate_sites.iter().enumerate() {
            cot[r][idx] += &back.row(k);
        }
    }
    let cot_y0 = traj.backward(&sys, &cot, grad)?;
    Ok(BatchEval {
        loss,
        cot_m0: Some(cot_y0.slice(s![.., 2 * s2..]).to_owned()),
    })
}

fn covariate_matrix(subjects: &[&SubjectRecord], d: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((subjects.len(), d));
    for (r, s) in subjects.iter().enumerate() {
        if s.covariates.len() != d {
            return Err(Error::Dimension {
                what: "subject covariates",
                expected: d,
                got: s.covariates.len(),
            });
        }
        x.row_mut(r)
            .assign(&ArrayView2::from_shape((1, d), &s.covariates).expect("row").row(0));
    }
    Ok(x)
}

/// Batch loss of a [`SurvNodeModel`]. With `grad`, accumulates the
/// gradient of the total loss; `dropout_rng` enables encoder dropout.
pub fn batch_loss(
    model: &SurvNodeModel,
    subjects: &[&SubjectRecord],
    mu: f64,
    steps_per_unit: usize,
    grad: Option<&mut [f64]>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossBreakdown> {
    let x = covariate_matrix(subjects, model.n_covariates)?;
    let params = &model.params.values;
    match (&model.encoder, grad) {
        (Some(enc), Some(grad)) => {
            let (m0, tape) = enc.forward_train(params, x.view(), dropout_rng)?;
            let eval = kfe_batch(
                model,
                params,
                subjects,
                x.view(),
                m0.view(),
                mu,
                steps_per_unit,
                Some(&mut *grad),
            )?;
            let cot = eval.cot_m0.expect("gradient requested");
            enc.backward(params, &tape, cot.view(), grad);
            Ok(eval.loss)
        }
        (_, grad) => {
            let m0 = model.initial_memory(x.view())?;
            Ok(kfe_batch(model, params, subjects, x.view(), m0.view(), mu, steps_per_unit, grad)?.loss)
        }
    }
}

/// Negative log-likelihood of one subject.
pub fn subject_nll(model: &SurvNodeModel, subject: &SubjectRecord, steps_per_unit: usize) -> Result<f64> {
    Ok(batch_loss(model, &[subject], 0.0, steps_per_unit, None, None)?.per_subject[0])
}

/// Mean per-subject nll over a dataset, evaluated in batches.
pub fn dataset_nll(model: &SurvNodeModel, ds: &Dataset, steps_per_unit: usize, batch_size: usize) -> Result<f64> {
    let refs: Vec<&SubjectRecord> = ds.subjects.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let loss = batch_loss(model, chunk, 0.0, steps_per_unit, None, None)?;
        total += loss.per_subject.iter().sum::<f64>();
    }
    Ok(total / refs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub lyapunov: f64,
    pub clamp_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    /// Batches skipped because integration failed or gradients were not
    /// finite.
    pub failed_batches: usize,
}

/// What the generic training loop optimizes.
pub(crate) trait Objective {
    fn params_mut(&mut self) -> &mut ParamVector;

    /// Evaluates a training batch, accumulating the gradient of the
    /// objective into the parameter gradient buffer.
    fn train_batch(&mut self, subjects: &[&SubjectRecord], rng: &mut ChaCha8Rng) -> Result<LossBreakdown>;

    fn validation_loss(&self, ds: &Dataset) -> Result<f64>;
}

struct NodeObjective<'a> {
    model: &'a mut SurvNodeModel,
    mu: f64,
    steps: usize,
    batch: usize,
}

impl Objective for NodeObjective<'_> {
    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.model.params
    }

    fn train_batch(&mut self, subjects: &[&SubjectRecord], rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let mut grad = std::mem::take(&mut self.model.params.grad);
        let out = batch_loss(self.model, subjects, self.mu, self.steps, Some(&mut grad), Some(rng));
        self.model.params.grad = grad;
        out
    }

    fn validation_loss(&self, ds: &Dataset) -> Result<f64> {
        dataset_nll(self.model, ds, self.steps, self.batch)
    }
}

pub(crate) fn check_split(model_topology: &crate::TransitionTopology, d: usize, ds: &Dataset) -> Result<()> {
    if &ds.topology != model_topology {
        return Err(Error::Invalid("dataset topology differs from the model".into()));
    }
    if ds.n_covariates() != d {
        return Err(Error::Dimension {
            what: "dataset covariates",
            expected: d,
            got: ds.n_covariates(),
        });
    }
    Ok(())
}

/// Trains `model` from scratch on `train`, early-stopping on `valid`.
/// Sets the model's time scale and normalization from the training split
/// and leaves the best-validation parameters in place.
pub fn fit(model: &mut SurvNodeModel, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<FitReport> {
    model.set_time_scale(train.max_time(), cfg.time_scale)?;
    model.normalization = train.normalization.clone();
    fit_from_epoch(model, train, valid, cfg, 0)
}

/// Continues training a model whose time scale is already set, numbering
/// epochs from `start_epoch`.
pub fn fit_from_epoch(
    model: &mut SurvNodeModel,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<FitReport> {
    cfg.validate()?;
    check_split(&model.topology, model.n_covariates, train)?;
    check_split(&model.topology, model.n_covariates, valid)?;
    let mut obj = NodeObjective {
        mu: cfg.lyapunov_weight,
        steps: cfg.rk4_steps,
        batch: cfg.batch_size,
        model,
    };
    train_loop(&mut obj, train, valid, cfg, start_epoch)
}

pub(crate) fn train_loop<O: Objective>(
    obj: &mut O,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut failed_total = 0usize;
    for epoch in start_epoch..start_epoch + cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut n_batches = 0usize;
        let mut failed = 0usize;
        let mut last_error = String::new();
        let (mut nll_sum, mut lyap_sum, mut n_seen, mut clamps) = (0.0, 0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            n_batches += 1;
            let subjects: Vec<&SubjectRecord> = idx.iter().map(|&i| &train.subjects[i]).collect();
            obj.params_mut().zero_grad();
            match obj.train_batch(&subjects, &mut rng) {
                Ok(loss) => {
                    if adam_step(obj.params_mut(), &adam) == StepStatus::RejectedNonFinite {
                        failed += 1;
                        last_error = "non-finite gradient".into();
                        continue;
                    }
                    nll_sum += loss.nll * subjects.len() as f64;
                    lyap_sum += loss.lyapunov * subjects.len() as f64;
                    n_seen += subjects.len();
                    clamps += loss.clamp_count;
                }
                Err(Error::Integration { t, reason }) => {
                    failed += 1;
                    last_error = format!("integration failed at t = {t}: {reason}");
                }
                Err(e) => return Err(e),
            }
        }
        failed_total += failed;
        if 2 * failed > n_batches {
            return Err(Error::Training(format!(
                "epoch {epoch}: {failed} of {n_batches} batches failed (last: {last_error})"
            )));
        }
        let valid_nll = match obj.validation_loss(valid) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Integration { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_nll: nll_sum / n_seen.max(1) as f64,
            valid_nll,
            lyapunov: lyap_sum / n_seen.max(1) as f64,
            clamp_count: clamps,
        };
        log::info!(
            "epoch {epoch}: train nll {:.5}, valid nll {:.5}, lyapunov {:.3e}",
            record.train_nll,
            record.valid_nll,
            record.lyapunov
        );
        history.push(record);
        let improved = best.as_ref().is_none_or(|(_, b, _)| valid_nll < *b);
        if improved {
            best = Some((epoch, valid_nll, obj.params_mut().values.clone()));
        } else if let Some((b_epoch, _, _)) = &best {
            if epoch - b_epoch >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_valid_nll, values) = best.expect("at least one epoch");
    obj.params_mut().values = values;
    Ok(FitReport {
        history,
        best_epoch,
        best_valid_nll,
        failed_batches: failed_total,
    })
}
