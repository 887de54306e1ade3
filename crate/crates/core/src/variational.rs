//! Latent-variable variant: the initial memory is a Gaussian latent `z`
//! with a covariate-conditioned prior `p(z | x)` and an amortized posterior
//! `q(z | t, x)`, trained by maximizing the evidence lower bound.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mlp, ParamVector};
use crate::error::{Error, Result};
use crate::likelihood::{check_split, kfe_batch, train_loop, FitReport, LossBreakdown, Objective, TrainConfig};
use crate::odeint::Method;
use crate::statespace::{Dataset, SubjectRecord, TransitionTopology};
use crate::survnode::{layer_sizes, SurvNodeModel};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Largest fraction of prior draws that may fail before prediction errors.
pub const MAX_DROPPED_FRACTION: f64 = 0.2;

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Dimension {
                what: "latent log variance",
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("latent parameters must be finite".into()));
        }
        Ok(LatentGaussian { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gauss(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension {
            what: "KL operands",
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(kl_terms(&q.mean, &q.log_var, &p.mean, &p.log_var))
}

fn kl_terms(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| {
            let d = mq[i] - mp[i];
            0.5 * (lp[i] - lq[i] + ((lq[i]).exp() + d * d) * (-lp[i]).exp() - 1.0)
        })
        .sum()
}

/// Splits a `2M`-column network output into means and clamped log
/// variances; the mask marks entries inside the clamp range.
fn split_gaussian(out: &Array2<f64>, m: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mean = out.slice(s![.., ..m]).to_owned();
    let raw = out.slice(s![.., m..]);
    let lv = raw.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    let mask = raw.mapv(|v| {
        if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
            1.0
        } else {
            0.0
        }
    });
    (mean, lv, mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalModel {
    /// Dynamics and bookkeeping; its encoder is unused and absent.
    pub base: SurvNodeModel,
    /// `x -> (mu_p, log_var_p)`.
    pub prior: Mlp,
    /// `(x, t) -> (mu_q, log_var_q)`, `t` the scaled final observation time.
    pub posterior: Mlp,
    /// Weight of the KL term.
    pub beta: f64,
}

impl VariationalModel {
    /// Encoders use the `encoder_*` sizes of `cfg`; `cfg.memory` is the
    /// latent dimension.
    pub fn new<R: Rng + ?Sized>(
        topology: TransitionTopology,
        n_covariates: usize,
        cfg: &TrainConfig,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.memory == 0 {
            return Err(Error::Config("the latent model needs memory >= 1".into()));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta {beta} must be nonnegative")));
        }
        let mcfg = cfg.model_config();
        let m = cfg.memory;
        let mut params = ParamVector::new();
        let prior = Mlp::new(
            &layer_sizes(n_covariates, mcfg.encoder_layers, mcfg.encoder_width, 2 * m),
            mcfg.encoder_dropout,
            &mut params,
            rng,
        )?;
        let posterior = Mlp::new(
            &layer_sizes(n_covariates + 1, mcfg.encoder_layers, mcfg.encoder_width, 2 * m),
            mcfg.encoder_dropout,
            &mut params,
            rng,
        )?;
        // Given z the likelihood does not depend on x.
        let dynamics = SurvNodeModel::neural_dynamics(&topology, 0, &mcfg, &mut params, rng)?;
        let base = SurvNodeModel {
            topology,
            n_covariates,
            n_memory: m,
            encoder: None,
            dynamics,
            covariates_in_dynamics: false,
            params,
            time_scale: 1.0,
            normalization: None,
        };
        Ok(VariationalModel {
            base,
            prior,
            posterior,
            beta,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.base.n_memory
    }

    pub fn params(&self) -> &ParamVector {
        &self.base.params
    }

    /// Prior `p(z | x)` for every row of `x` (model-space covariates).
    pub fn prior_gaussians(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.base.check_covariates(&x)?;
        let out = self.prior.forward(&self.base.params.values, x)?;
        let (mean, lv, _) = split_gaussian(&out, self.latent_dim());
        Ok((mean, lv))
    }

    fn posterior_input(&self, subjects: &[&SubjectRecord], x: &Array2<f64>) -> Array2<f64> {
        let d = self.base.n_covariates;
        let mut inp = Array2::zeros((subjects.len(), d + 1));
        inp.slice_mut(s![.., ..d]).assign(x);
        for (r, subj) in subjects.iter().enumerate() {
            inp[[r, d]] = subj.final_time() / self.base.time_scale;
        }
        inp
    }

    /// Posterior `q(z | t, x)` for each subject.
    pub fn posterior_gaussians(&self, subjects: &[&SubjectRecord]) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = covariates(subjects, self.base.n_covariates)?;
        let out = self
            .posterior
            .forward(&self.base.params.values, self.posterior_input(subjects, &x).view())?;
        let (mean, lv, _) = split_gaussian(&out, self.latent_dim());
        Ok((mean, lv))
    }

    /// Negative ELBO of a batch, using one reparameterized sample per
    /// subject drawn from `rng`. `per_subject` holds `nll + beta * KL`.
    /// With `grad`, accumulates the gradient of the batch objective
    /// (mean over subjects plus `mu` times the memory regularizer).
    pub fn batch_neg_elbo(
        &self,
        subjects: &[&SubjectRecord],
        mu: f64,
        steps_per_unit: usize,
        noise: NoiseSource<'_>,
        grad: Option<&mut [f64]>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ElboBreakdown> {
        let n = subjects.len();
        let m = self.latent_dim();
        let params = &self.base.params.values;
        let x = covariates(subjects, self.base.n_covariates)?;
        let post_in = self.posterior_input(subjects, &x);
        let mut dropout_rng = dropout_rng;
        let (q_out, q_tape) = self
            .posterior
            .forward_train(params, post_in.view(), dropout_rng.as_deref_mut())?;
        let (p_out, p_tape) = self.prior.forward_train(params, x.view(), dropout_rng)?;
        let (mq, lq, q_mask) = split_gaussian(&q_out, m);
        let (mp, lp, p_mask) = split_gaussian(&p_out, m);
        let eps = match noise {
            NoiseSource::Rng(rng) => Array2::from_shape_fn((n, m), |_| rng.sample::<f64, _>(StandardNormal)),
            NoiseSource::Zero => Array2::zeros((n, m)),
        };
        let sd = lq.mapv(|v| (0.5 * v).exp());
        let z = &mq + &(&sd * &eps);

        let kl: Vec<f64> = (0..n)
            .map(|r| {
                kl_terms(
                    mq.row(r).as_slice().expect("contiguous"),
                    lq.row(r).as_slice().expect("contiguous"),
                    mp.row(r).as_slice().expect("contiguous"),
                    lp.row(r).as_slice().expect("contiguous"),
                )
            })
            .collect();
        let want_grad = grad.is_some();
        let mut grad = grad;
        let eval = kfe_batch(
            &self.base,
            params,
            subjects,
            x.view(),
            z.view(),
            mu,
            steps_per_unit,
            grad.as_deref_mut(),
        )?;
        let nll = eval.loss.per_subject.clone();
        let per_subject: Vec<f64> = nll.iter().zip(&kl).map(|(a, k)| a + self.beta * k).collect();
        let objective = per_subject.iter().sum::<f64>() / n.max(1) as f64 + mu * eval.loss.lyapunov;
        let out = ElboBreakdown {
            nll: eval.loss.clone(),
            kl: kl.clone(),
            per_subject,
            objective,
        };
        let Some(grad) = grad else {
            return Ok(out);
        };
        debug_assert!(want_grad);
        let cot_z = eval.cot_m0.expect("gradient requested");
        let w = self.beta / n as f64;
        let mut a_q = Array2::zeros(q_out.raw_dim());
        let mut a_p = Array2::zeros(p_out.raw_dim());
        for r in 0..n {
            for i in 0..m {
                let d = mq[[r, i]] - mp[[r, i]];
                let inv_vp = (-lp[[r, i]]).exp();
                let vq = lq[[r, i]].exp();
                // reparameterization
                let a_mq = cot_z[[r, i]] + w * d * inv_vp;
                let a_lq = cot_z[[r, i]] * 0.5 * sd[[r, i]] * eps[[r, i]] + w * 0.5 * (vq * inv_vp - 1.0);
                let a_mp = -w * d * inv_vp;
                let a_lp = w * 0.5 * (1.0 - (vq + d * d) * inv_vp);
                a_q[[r, i]] = a_mq;
                a_q[[r, m + i]] = a_lq * q_mask[[r, i]];
                a_p[[r, i]] = a_mp;
                a_p[[r, m + i]] = a_lp * p_mask[[r, i]];
            }
        }
        self.posterior.backward(params, &q_tape, a_q.view(), grad);
        self.prior.backward(params, &p_tape, a_p.view(), grad);
        Ok(out)
    }

    /// Single-sample ELBO of one subject.
    pub fn elbo(&self, subject: &SubjectRecord, steps_per_unit: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let out = self.batch_neg_elbo(&[subject], 0.0, steps_per_unit, NoiseSource::Rng(rng), None, None)?;
        Ok(-out.per_subject[0])
    }

    /// `n` independent single-sample ELBO draws for one subject, computed
    /// in batches.
    pub fn elbo_draws(
        &self,
        subject: &SubjectRecord,
        n: usize,
        steps_per_unit: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let chunk = 4096;
        while out.len() < n {
            let k = chunk.min(n - out.len());
            let batch = vec![subject; k];
            let b = self.batch_neg_elbo(&batch, 0.0, steps_per_unit, NoiseSource::Rng(rng), None, None)?;
            out.extend(b.per_subject.iter().map(|v| -v));
        }
        Ok(out)
    }

    /// Log-likelihood of `subject` with the memory fixed to each row of `z`.
    pub fn log_likelihood_at(
        &self,
        subject: &SubjectRecord,
        z: ArrayView2<f64>,
        steps_per_unit: usize,
    ) -> Result<Vec<f64>> {
        let batch = vec![subject; z.nrows()];
        let x = covariates(&batch, self.base.n_covariates)?;
        let eval = kfe_batch(
            &self.base,
            &self.base.params.values,
            &batch,
            x.view(),
            z,
            0.0,
            steps_per_unit,
            None,
        )?;
        Ok(eval.loss.per_subject.iter().map(|v| -v).collect())
    }

    /// Pointwise mean and central credible band of `P(0, t)[initial, .]`
    /// over `n_samples` prior draws.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_interval(
        &self,
        x: &[f64],
        initial_state: usize,
        times: &[f64],
        n_samples: usize,
        level: f64,
        seed: u64,
        method: Method,
    ) -> Result<IntervalBand> {
        let bands = self.predict_intervals(x, initial_state, times, n_samples, &[level], seed, method)?;
        Ok(bands.into_iter().next().expect("one level"))
    }

    /// Like [`VariationalModel::predict_interval`] for several levels from
    /// the same draws.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_intervals(
        &self,
        x: &[f64],
        initial_state: usize,
        times: &[f64],
        n_samples: usize,
        levels: &[f64],
        seed: u64,
        method: Method,
    ) -> Result<Vec<IntervalBand>> {
        if n_samples < 2 {
            return Err(Error::Invalid("need at least two samples".into()));
        }
        if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Invalid(format!("levels {levels:?} must lie in (0, 1)")));
        }
        let s_n = self.base.n_states();
        if initial_state >= s_n {
            return Err(Error::Invalid(format!("initial state {initial_state} out of range")));
        }
        let m = self.latent_dim();
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (mp, lp) = self.prior_gaussians(xv)?;
        let mut z = Array2::zeros((n_samples, m));
        for k in 0..n_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for i in 0..m {
                let e: f64 = rng.sample(StandardNormal);
                z[[k, i]] = mp[[0, i]] + (0.5 * lp[[0, i]]).exp() * e;
            }
        }
        let xs = xv.broadcast((n_samples, x.len())).expect("broadcast").to_owned();
        // rows: draws; per time, one n_samples x S block
        let draws: Vec<Option<Vec<Array2<f64>>>> =
            match self.base.solve_states(xs.view(), Some(z.view()), times, method) {
                Ok(states) => (0..n_samples)
                    .map(|k| {
                        Some(
                            states
                                .iter()
                                .map(|st| self.occupation_row(st, k, initial_state))
                                .collect(),
                        )
                    })
                    .collect(),
                Err(Error::Integration { .. }) => (0..n_samples)
                    .map(|k| {
                        let zk = z.slice(s![k..k + 1, ..]);
                        self.base.solve_states(xv, Some(zk), times, method).ok().map(|states| {
                            states
                                .iter()
                                .map(|st| self.occupation_row(st, 0, initial_state))
                                .collect()
                        })
                    })
                    .collect(),
                Err(e) => return Err(e),
            };
        let kept: Vec<&Vec<Array2<f64>>> = draws.iter().flatten().collect();
        let dropped = n_samples - kept.len();
        if dropped as f64 > MAX_DROPPED_FRACTION * n_samples as f64 || kept.len() < 2 {
            return Err(Error::Integration {
                t: times.iter().cloned().fold(0.0, f64::max),
                reason: format!("{dropped} of {n_samples} prior draws failed"),
            });
        }
        let nt = times.len();
        let mut mean = Array2::zeros((nt, s_n));
        let mut sorted = vec![vec![Vec::with_capacity(kept.len()); s_n]; nt];
        for d in &kept {
            for (ti, row) in d.iter().enumerate() {
                for j in 0..s_n {
                    let v = row[[0, j]];
                    mean[[ti, j]] += v / kept.len() as f64;
                    sorted[ti][j].push(v);
                }
            }
        }
        for per_t in sorted.iter_mut() {
            for v in per_t.iter_mut() {
                v.sort_by(f64::total_cmp);
            }
        }
        Ok(levels
            .iter()
            .map(|&level| {
                let lo_q = 0.5 * (1.0 - level);
                let mut lo = Array2::zeros((nt, s_n));
                let mut hi = Array2::zeros((nt, s_n));
                for ti in 0..nt {
                    for j in 0..s_n {
                        lo[[ti, j]] = quantile_sorted(&sorted[ti][j], lo_q);
                        hi[[ti, j]] = quantile_sorted(&sorted[ti][j], 1.0 - lo_q);
                    }
                }
                IntervalBand {
                    times: times.to_vec(),
                    level,
                    mean: mean.clone(),
                    lo,
                    hi,
                    dropped,
                }
            })
            .collect())
    }

    fn occupation_row(&self, state: &Array2<f64>, row: usize, initial: usize) -> Array2<f64> {
        let s_n = self.base.n_states();
        state
            .slice(s![row..row + 1, initial * s_n..(initial + 1) * s_n])
            .to_owned()
    }

    /// Prior means `mu_p(x)` for every subject and their k-means labels.
    pub fn export_latent(&self, ds: &Dataset, k: usize, seed: u64) -> Result<LatentExport> {
        let refs: Vec<&SubjectRecord> = ds.subjects.iter().collect();
        let x = covariates(&refs, self.base.n_covariates)?;
        let (means, _) = self.prior_gaussians(x.view())?;
        let km = kmeans(means.view(), k, KMEANS_RESTARTS, seed)?;
        Ok(LatentExport {
            ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
            means,
            labels: km.labels,
        })
    }
}

/// Where the reparameterization noise comes from.
pub enum NoiseSource<'a> {
    Rng(&'a mut ChaCha8Rng),
    /// Use the posterior mean.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    /// Likelihood part at the sampled latent.
    pub nll: LossBreakdown,
    pub kl: Vec<f64>,
    /// `nll_i + beta * KL_i` per subject.
    pub per_subject: Vec<f64>,
    /// Mean of `per_subject` plus `mu` times the memory regularizer.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBand {
    pub times: Vec<f64>,
    pub level: f64,
    /// `times x states`.
    pub mean: Array2<f64>,
    pub lo: Array2<f64>,
    pub hi: Array2<f64>,
    /// Draws dropped because their solve failed.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentExport {
    pub ids: Vec<String>,
    pub means: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Linear interpolation between order statistics.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let f = pos - lo as f64;
    v[lo] + f * (v[hi] - v[lo])
}

fn covariates(subjects: &[&SubjectRecord], d: usize) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((subjects.len(), d));
    for (r, s) in subjects.iter().enumerate() {
        if s.covariates.len() != d {
            return Err(Error::Dimension {
                what: "subject covariates",
                expected: d,
                got: s.covariates.len(),
            });
        }
        for (j, v) in s.covariates.iter().enumerate() {
            x[[r, j]] = *v;
        }
    }
    Ok(x)
}

struct ElboObjective<'a> {
    model: &'a mut VariationalModel,
    mu: f64,
    steps: usize,
    batch: usize,
}

impl Objective for ElboObjective<'_> {
    fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.model.base.params
    }

    fn train_batch(&mut self, subjects: &[&SubjectRecord], rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let mut grad = std::mem::take(&mut self.model.base.params.grad);
        let mut dropout = ChaCha8Rng::seed_from_u64(rng.random());
        let out = self.model.batch_neg_elbo(
            subjects,
            self.mu,
            self.steps,
            NoiseSource::Rng(rng),
            Some(&mut grad),
            Some(&mut dropout),
        );
        self.model.base.params.grad = grad;
        out.map(|b| b.nll)
    }

    /// Negative ELBO at the posterior mean, averaged over subjects.
    fn validation_loss(&self, ds: &Dataset) -> Result<f64> {
        let refs: Vec<&SubjectRecord> = ds.subjects.iter().collect();
        let mut total = 0.0;
        for chunk in refs.chunks(self.batch.max(1)) {
            let b = self
                .model
                .batch_neg_elbo(chunk, 0.0, self.steps, NoiseSource::Zero, None, None)?;
            total += b.per_subject.iter().sum::<f64>();
        }
        Ok(total / refs.len().max(1) as f64)
    }
}

/// Trains the latent model by stochastic ELBO maximization with early
/// stopping on the validation ELBO (posterior-mean plug-in).
pub fn fit_variational(
    model: &mut VariationalModel,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    model.base.set_time_scale(train.max_time(), cfg.time_scale)?;
    model.base.normalization = train.normalization.clone();
    fit_variational_from_epoch(model, train, valid, cfg, 0)
}

/// Continues training a latent model whose time scale is already set,
/// numbering epochs from `start_epoch`.
pub fn fit_variational_from_epoch(
    model: &mut VariationalModel,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<FitReport> {
    cfg.validate()?;
    check_split(&model.base.topology, model.base.n_covariates, train)?;
    check_split(&model.base.topology, model.base.n_covariates, valid)?;
    let mut obj = ElboObjective {
        mu: cfg.lyapunov_weight,
        steps: cfg.rk4_steps,
        batch: cfg.batch_size,
        model,
    };
    train_loop(&mut obj, train, valid, cfg, start_epoch)
}

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster labels, numbered by decreasing cluster size (ties broken by
    /// the smallest member index).
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs
/// by inertia.
pub fn kmeans(data: ArrayView2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    let n = data.nrows();
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Invalid(format!("k = {k} exceeds the {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Array2<f64>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let (labels, centroids, inertia) = lloyd(data, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.2) {
            best = Some((labels, centroids, inertia));
        }
    }
    let (labels, centroids, inertia) = best.expect("at least one restart");
    // canonical numbering
    let mut size = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &l) in labels.iter().enumerate() {
        size[l] += 1;
        first[l] = first[l].min(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| size[b].cmp(&size[a]).then(first[a].cmp(&first[b])));
    let mut rename = vec![0usize; k];
    for (new, &old) in order.iter().enumerate() {
        rename[old] = new;
    }
    Ok(KMeans {
        labels: labels.iter().map(|&l| rename[l]).collect(),
        centroids: centroids.select(Axis(0), &order),
        inertia,
    })
}

fn lloyd(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Array2<f64>, f64) {
    let n = data.nrows();
    // k-means++ seeding
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }
    let mut labels = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        inertia = 0.0;
        for i in 0..n {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(data.row(i), centroids.row(c))))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            inertia += dist;
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = Array2::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(labels[i]);
            row += &data.row(i);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data.row(a), centroids.row(labels[a]))
                            .total_cmp(&sq_dist(data.row(b), centroids.row(labels[b])))
                    })
                    .expect("nonempty data");
                centroids.row_mut(c).assign(&data.row(far));
            }
        }
    }
    (labels, centroids, inertia)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::Observation;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn g(mean: Vec<f64>, log_var: Vec<f64>) -> LatentGaussian {
        LatentGaussian::new(mean, log_var).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = g(vec![0.3, -1.0], vec![0.2, -0.5]);
        assert_eq!(kl_diag_gauss(&p, &p).unwrap(), 0.0);
        let kl = kl_diag_gauss(&g(vec![2.0], vec![0.0]), &g(vec![0.0], vec![0.0])).unwrap();
        assert!((kl - 2.0).abs() < 1e-12);
        let kl = kl_diag_gauss(&g(vec![0.0], vec![1.0]), &g(vec![0.0], vec![0.0])).unwrap();
        assert!((kl - 0.5 * (1f64.exp() - 2.0)).abs() < 1e-12);
        assert!((kl - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn kl_is_asymmetric() {
        let q = g(vec![0.0], vec![1.0]);
        let p = g(vec![1.0], vec![0.0]);
        let a = kl_diag_gauss(&q, &p).unwrap();
        let b = kl_diag_gauss(&p, &q).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(
            mq in proptest::collection::vec(-3.0..3.0f64, 3),
            lq in proptest::collection::vec(-4.0..4.0f64, 3),
            mp in proptest::collection::vec(-3.0..3.0f64, 3),
            lp in proptest::collection::vec(-4.0..4.0f64, 3),
        ) {
            let kl = kl_diag_gauss(&g(mq, lq), &g(mp, lp)).unwrap();
            prop_assert!(kl >= -1e-12);
        }
    }

    fn tiny_model(seed: u64) -> VariationalModel {
        let cfg = TrainConfig {
            encoder_layers: 1,
            encoder_width: 5,
            dynamics_layers: 1,
            dynamics_width: 6,
            memory: 1,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = VariationalModel::new(TransitionTopology::two_state(), 1, &cfg, 1.0, &mut rng).unwrap();
        for v in m.base.params.values.iter_mut() {
            *v += 0.4 * (rng.random::<f64>() - 0.5);
        }
        m
    }

    #[test]
    fn likelihood_given_z_ignores_covariates() {
        let m = tiny_model(4);
        let crate::survnode::Dynamics::Neural(net) = &m.base.dynamics else {
            panic!()
        };
        assert_eq!(net.input_dim(), 1 + 4 + 1);
        let z = array![[0.7]];
        let a = SubjectRecord::new(
            "a",
            vec![-2.0],
            vec![Observation::exact(0.0, 0), Observation::exact(0.9, 1)],
            true,
        );
        let mut b = a.clone();
        b.covariates = vec![3.0];
        assert_eq!(
            m.log_likelihood_at(&a, z.view(), 32).unwrap(),
            m.log_likelihood_at(&b, z.view(), 32).unwrap()
        );
    }

    fn subject(t: f64, died: bool) -> SubjectRecord {
        SubjectRecord::new(
            "s",
            vec![0.5],
            vec![
                Observation::exact(0.0, 0),
                Observation::exact(t, if died { 1 } else { 0 }),
            ],
            died,
        )
    }

    #[test]
    fn zero_beta_elbo_is_sampled_likelihood() {
        let mut m = tiny_model(1);
        m.beta = 0.0;
        let s = subject(0.8, true);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let elbo = m.elbo(&s, 32, &mut r1).unwrap();
        // replay the same draw
        let (mq, lq) = m.posterior_gaussians(&[&s]).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let e: f64 = r2.sample(StandardNormal);
        let z = array![[mq[[0, 0]] + (0.5 * lq[[0, 0]]).exp() * e]];
        let ll = m.log_likelihood_at(&s, z.view(), 32).unwrap()[0];
        assert_eq!(elbo, ll);
    }

    #[test]
    fn collapsed_posterior_gives_plug_in_bound() {
        let mut m = tiny_model(2);
        // drive the posterior log variance far below the floor
        let n = m.posterior.n_params();
        let off = m.posterior.offset();
        m.base.params.values[off + n - 1] = -50.0;
        let s = subject(0.6, false);
        let (mq, lq) = m.posterior_gaussians(&[&s]).unwrap();
        assert_eq!(lq[[0, 0]], LOG_VAR_MIN);
        let (mp, lp) = m.prior_gaussians(array![[0.5]].view()).unwrap();
        let kl = kl_terms(&[mq[[0, 0]]], &[lq[[0, 0]]], &[mp[[0, 0]]], &[lp[[0, 0]]]);
        let plug = m.log_likelihood_at(&s, mq.view(), 32).unwrap()[0] - kl;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let elbo = m.elbo(&s, 32, &mut rng).unwrap();
        assert!((elbo - plug).abs() < 1e-2, "{elbo} vs {plug}");
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn monte_carlo_elbo_is_self_consistent() {
        let m = tiny_model(5);
        let s = subject(1.2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let small = m.elbo_draws(&s, 1000, 16, &mut rng).unwrap();
        let large = m.elbo_draws(&s, 100_000, 16, &mut rng).unwrap();
        let (a, se) = mean_se(&small);
        let (b, _) = mean_se(&large);
        assert!((a - b).abs() < 3.0 * se, "{a} vs {b} (se {se})");
    }

    #[test]
    fn elbo_bounds_quadrature_marginal() {
        let m = tiny_model(7);
        let s = subject(0.9, true);
        let (mp, lp) = m.prior_gaussians(array![[0.5]].view()).unwrap();
        let (mu, sd) = (mp[[0, 0]], (0.5 * lp[[0, 0]]).exp());
        let n = 2001;
        let z = Array2::from_shape_fn((n, 1), |(i, _)| mu + sd * (-10.0 + 20.0 * i as f64 / (n - 1) as f64));
        let ll = m.log_likelihood_at(&s, z.view(), 16).unwrap();
        let dz = 20.0 * sd / (n - 1) as f64;
        let peak = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let integral: f64 = (0..n)
            .map(|i| {
                let u = (z[[i, 0]] - mu) / sd;
                let dens = (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * (ll[i] - peak).exp() * dens * dz
            })
            .sum();
        let marginal = peak + integral.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = m.elbo_draws(&s, 20_000, 16, &mut rng).unwrap();
        let (elbo, se) = mean_se(&draws);
        assert!(elbo <= marginal + 3.0 * se, "elbo {elbo} marginal {marginal}");
    }

    #[test]
    fn bands_nest_and_conserve() {
        let m = tiny_model(9);
        let times = [0.2, 0.5, 1.0];
        let bands = m
            .predict_intervals(&[0.5], 0, &times, 200, &[0.5, 0.95], 11, Method::dopri5(1e-8))
            .unwrap();
        let (narrow, wide) = (&bands[0], &bands[1]);
        for ti in 0..3 {
            assert!((narrow.mean.row(ti).sum() - 1.0).abs() < 1e-5);
            for j in 0..2 {
                assert!(wide.lo[[ti, j]] <= narrow.lo[[ti, j]] + 1e-15);
                assert!(narrow.hi[[ti, j]] <= wide.hi[[ti, j]] + 1e-15);
                assert!(narrow.lo[[ti, j]] <= narrow.hi[[ti, j]]);
            }
        }
        let again = m
            .predict_interval(&[0.5], 0, &times, 200, 0.5, 11, Method::dopri5(1e-8))
            .unwrap();
        assert_eq!(&again, narrow);
    }

    #[test]
    fn degenerate_prior_collapses_band() {
        let mut m = tiny_model(10);
        let n = m.prior.n_params();
        let off = m.prior.offset();
        m.base.params.values[off + n - 1] = -50.0;
        let times = [0.3, 0.9];
        let band = m
            .predict_interval(&[0.5], 0, &times, 50, 0.95, 1, Method::dopri5(1e-8))
            .unwrap();
        let (mp, _) = m.prior_gaussians(array![[0.5]].view()).unwrap();
        let det = m
            .base
            .solve_states(array![[0.5]].view(), Some(mp.view()), &times, Method::dopri5(1e-8))
            .unwrap();
        for ti in 0..2 {
            for j in 0..2 {
                assert!(band.hi[[ti, j]] - band.lo[[ti, j]] < 1e-2);
                assert!((band.mean[[ti, j]] - det[ti][[0, j]]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn kmeans_single_cluster() {
        let data = array![[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]];
        let km = kmeans(data.view(), 1, 5, 0).unwrap();
        assert_eq!(km.labels, vec![0, 0, 0]);
        assert!((km.centroids[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((km.centroids[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let truth: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 0)).collect();
        let data = Array2::from_shape_fn((n, 2), |(i, _)| {
            let c = if truth[i] == 1 { 10.0 } else { -10.0 };
            c + rng.sample::<f64, _>(StandardNormal)
        });
        let km = kmeans(data.view(), 2, KMEANS_RESTARTS, 3).unwrap();
        // larger blob gets label 0
        for i in 0..n {
            assert_eq!(km.labels[i], truth[i]);
        }
    }

    #[test]
    fn kmeans_duplicates_and_errors() {
        let base = array![[0.0], [0.1], [5.0], [5.2], [9.0]];
        let dup = ndarray::concatenate(Axis(0), &[base.view(), base.view()]).unwrap();
        let km = kmeans(dup.view(), 3, KMEANS_RESTARTS, 0).unwrap();
        for i in 0..5 {
            assert_eq!(km.labels[i], km.labels[i + 5]);
        }
        assert!(kmeans(base.view(), 6, 1, 0).is_err());
        assert!(kmeans(base.view(), 0, 1, 0).is_err());
    }

    #[test]
    fn neg_elbo_gradient_matches_finite_differences() {
        let mut m = tiny_model(12);
        m.beta = 0.7;
        let subjects = [subject(0.4, true), subject(1.1, false), subject(0.9, true)];
        let refs: Vec<&SubjectRecord> = subjects.iter().collect();
        let eval = |m: &VariationalModel, grad: Option<&mut [f64]>| {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            m.batch_neg_elbo(&refs, 0.1, 16, NoiseSource::Rng(&mut rng), grad, None)
                .unwrap()
                .objective
        };
        let mut grad = vec![0.0; m.base.params.len()];
        eval(&m, Some(&mut grad));
        let h = 1e-6;
        for i in 0..m.base.params.len() {
            let orig = m.base.params.values[i];
            m.base.params.values[i] = orig + h;
            let up = eval(&m, None);
            m.base.params.values[i] = orig - h;
            let down = eval(&m, None);
            m.base.params.values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            assert!(rel < 1e-5, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
