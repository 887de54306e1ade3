//! End-to-end commands: simulate, fit, predict, evaluate and latent export.
//! Each is a deterministic function of its input files, config and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{GridKind, RunConfig, SplitName};
use super::formats::{
    load_dataset, random_split, read_curves, read_splits, write_curves, write_dataset, write_splits, write_text,
    CurveTable, Split,
};
use crate::diffcore::checkpoint::{read_params, write_params};
use crate::diffcore::{Mlp, ParamVector};
use crate::error::{Error, Result};
use crate::likelihood::{fit, fit_from_epoch, EpochRecord, FitReport, TrainConfig};
use crate::metrics::{
    brier_ipcw, brier_vs_truth, censoring_curve, concordance_td, ibll, interval_coverage, multistate_brier, EvalGrid,
    SurvivalCurves,
};
use crate::nonparam::{aalen_johansen, censoring_km};
use crate::simulate::{ground_truth, preset, sample_paths, Censoring};
use crate::statespace::{normalize_covariates, Dataset};
use crate::survnode::{Dynamics, SurvNodeModel};
use crate::variational::{fit_variational, fit_variational_from_epoch, IntervalBand, VariationalModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointModel {
    Point(SurvNodeModel),
    Variational(VariationalModel),
}

impl CheckpointModel {
    fn base(&self) -> &SurvNodeModel {
        match self {
            CheckpointModel::Point(m) => m,
            CheckpointModel::Variational(v) => &v.base,
        }
    }

    fn base_mut(&mut self) -> &mut SurvNodeModel {
        match self {
            CheckpointModel::Point(m) => m,
            CheckpointModel::Variational(v) => &mut v.base,
        }
    }

    /// Networks in parameter-allocation order.
    fn nets(&self) -> Vec<&Mlp> {
        let base = self.base();
        let mut nets: Vec<&Mlp> = base.encoder.iter().collect();
        if let CheckpointModel::Variational(v) = self {
            nets.push(&v.prior);
            nets.push(&v.posterior);
        }
        if let Dynamics::Neural(net) = &base.dynamics {
            nets.push(net);
        }
        nets.sort_by_key(|n| n.offset());
        nets
    }
}

/// A trained model with its training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    /// Number of epochs run so far.
    pub epochs: usize,
    pub train: TrainConfig,
    pub history: Vec<EpochRecord>,
}

/// Writes `model.json` (structure and record) and `params.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(ck).map_err(|e| Error::format(dir, e.to_string()))?;
    write_text(&dir.join("model.json"), &(json + "\n"))?;
    write_params(
        &dir.join("params.bin"),
        &ck.model.nets(),
        &ck.model.base().params.values,
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("model.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let bin = dir.join("params.bin");
    let (sizes, values) = read_params(&bin)?;
    let expected: Vec<Vec<usize>> = ck.model.nets().iter().map(|n| n.sizes().to_vec()).collect();
    let needed: usize = ck.model.nets().iter().map(|n| n.n_params()).sum();
    if sizes != expected || values.len() != needed {
        return Err(Error::format(&bin, "parameter layout does not match model.json"));
    }
    ck.model.base_mut().params = ParamVector::from_values(values);
    Ok(ck)
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("[data] {what} is required for this command")))
}

/// The configured dataset (raw covariates) and its split assignment.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Vec<Split>)> {
    let d = &cfg.data;
    let ds = load_dataset(
        need(&d.events, "events")?,
        need(&d.covariates, "covariates")?,
        need(&d.topology, "topology")?,
    )?;
    let splits = match &d.splits {
        Some(p) => read_splits(p, &ds)?,
        None => random_split(ds.len(), cfg.seed),
    };
    Ok((ds, splits))
}

pub fn select(ds: &Dataset, splits: &[Split], which: SplitName) -> Dataset {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| match which {
            SplitName::All => true,
            SplitName::Train => splits[i] == Split::Train,
            SplitName::Valid => splits[i] == Split::Valid,
            SplitName::Test => splits[i] == Split::Test,
        })
        .collect();
    ds.subset(&idx)
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    write_text(&cfg.out.join("config.resolved.toml"), &cfg.to_toml()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub n_subjects: usize,
    pub censored_fraction: f64,
    pub censoring_rate: f64,
    pub split_sizes: [usize; 3],
}

/// Samples a dataset and writes events, covariates, topology, the split
/// manifest and per-subject true occupation curves to `cfg.out`.
pub fn simulate_command(cfg: &RunConfig) -> Result<SimulateSummary> {
    let s = &cfg.simulate;
    let (mut spec, default_n) = match (&s.spec, &s.preset) {
        (Some(spec), _) => (spec.clone(), 1000),
        (None, Some(name)) => {
            let p = preset(name)?;
            (p.spec, p.n_subjects)
        }
        (None, None) => return Err(Error::Config("[simulate] needs `preset` or `spec`".into())),
    };
    if let Some(f) = s.censoring_fraction {
        spec.censoring = Censoring::TargetFraction { fraction: f };
    }
    let n = s.n_subjects.unwrap_or(default_n);
    let sim = sample_paths(&spec, n, cfg.seed)?;
    let ds = &sim.dataset;
    let out = &cfg.out;
    write_dataset(out, ds)?;
    let splits = random_split(n, cfg.seed);
    write_splits(&out.join("splits.csv"), ds, &splits)?;
    if s.truth_points < 2 {
        return Err(Error::Config("truth_points must be at least 2".into()));
    }
    let grid = EvalGrid::uniform(0.0, spec.horizon, s.truth_points)?.times;
    let truth = ground_truth(&spec, ds, &grid)?;
    write_curves(
        &out.join("ground_truth.csv"),
        &CurveTable {
            ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
            grid,
            values: truth,
            bands: None,
        },
    )?;
    let spec_json = serde_json::to_string_pretty(&json!({
        "spec": spec,
        "censoring_rate": sim.censoring_rate,
    }))
    .map_err(|e| Error::format(out, e.to_string()))?;
    write_text(&out.join("simulation.json"), &(spec_json + "\n"))?;
    echo_config(cfg)?;
    let censored = ds.subjects.iter().filter(|s| !s.last_observed).count();
    let count = |x: Split| splits.iter().filter(|&&v| v == x).count();
    Ok(SimulateSummary {
        n_subjects: n,
        censored_fraction: censored as f64 / n as f64,
        censoring_rate: sim.censoring_rate,
        split_sizes: [count(Split::Train), count(Split::Valid), count(Split::Test)],
    })
}

/// Normalizes the training split and applies its moments to validation.
pub fn prepare_splits(ds: &Dataset, splits: &[Split]) -> Result<(Dataset, Dataset)> {
    let (train, stats) = normalize_covariates(&select(ds, splits, SplitName::Train), None)?;
    let (valid, _) = normalize_covariates(&select(ds, splits, SplitName::Valid), Some(&stats))?;
    Ok((train, valid))
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,train_nll,valid_nll,lyapunov,clamp_count\n");
    for h in history {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.train_nll, h.valid_nll, h.lyapunov, h.clamp_count
        ));
    }
    write_text(path, &text)
}

/// Trains a point or latent model; writes `checkpoint/`, `history.csv`
/// and the resolved config to `cfg.out`.
pub fn fit_command(cfg: &RunConfig, variational: bool) -> Result<FitReport> {
    let (ds, splits) = load_data(cfg)?;
    let (train, valid) = prepare_splits(&ds, &splits)?;
    let t = &cfg.train;
    let (mut model, start, mut history) = match &cfg.fit.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if matches!(ck.model, CheckpointModel::Variational(_)) != variational {
                return Err(Error::Config("checkpoint kind does not match the fit command".into()));
            }
            (ck.model, ck.epochs, ck.history)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let m = if variational {
                let v = VariationalModel::new(
                    ds.topology.clone(),
                    ds.n_covariates(),
                    t,
                    cfg.variational.beta,
                    &mut rng,
                )?;
                CheckpointModel::Variational(v)
            } else {
                CheckpointModel::Point(SurvNodeModel::new(
                    ds.topology.clone(),
                    ds.n_covariates(),
                    &t.model_config(),
                    &mut rng,
                )?)
            };
            (m, 0, Vec::new())
        }
    };
    let resumed = cfg.fit.resume.is_some();
    let report = match (&mut model, resumed) {
        (CheckpointModel::Point(m), false) => fit(m, &train, &valid, t)?,
        (CheckpointModel::Point(m), true) => fit_from_epoch(m, &train, &valid, t, start)?,
        (CheckpointModel::Variational(v), false) => fit_variational(v, &train, &valid, t)?,
        (CheckpointModel::Variational(v), true) => fit_variational_from_epoch(v, &train, &valid, t, start)?,
    };
    history.extend(report.history.iter().cloned());
    let ck = Checkpoint {
        model,
        epochs: start + report.history.len(),
        train: t.clone(),
        history: history.clone(),
    };
    save_checkpoint(&cfg.out.join("checkpoint"), &ck)?;
    write_history(&cfg.out.join("history.csv"), &history)?;
    echo_config(cfg)?;
    Ok(report)
}

fn truth_table(cfg: &RunConfig) -> Result<Option<CurveTable>> {
    cfg.data.ground_truth.as_deref().map(read_curves).transpose()
}

/// Evaluation times for a split per the `[grid]` section.
pub fn resolve_grid(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<f64>> {
    let g = &cfg.grid;
    let rule = g.rule.unwrap_or(if cfg.data.ground_truth.is_some() {
        GridKind::GroundTruth
    } else {
        GridKind::Quantile
    });
    match rule {
        GridKind::GroundTruth => Ok(truth_table(cfg)?
            .ok_or_else(|| Error::Config("grid rule ground_truth needs [data] ground_truth".into()))?
            .grid),
        GridKind::Uniform => Ok(EvalGrid::uniform(g.start, g.end.unwrap_or(ds.max_time()), g.points)?.times),
        GridKind::Quantile => {
            let times: Vec<f64> = ds
                .subjects
                .iter()
                .flat_map(|s| {
                    s.observations
                        .windows(2)
                        .filter(|w| w[0].state != w[1].state)
                        .map(|w| w[1].time)
                })
                .collect();
            Ok(EvalGrid::quantile(&times, g.points)?.times)
        }
    }
}

fn model_inputs(model: &SurvNodeModel, ds: &Dataset) -> Result<Array2<f64>> {
    if ds.topology != model.topology {
        return Err(Error::Invalid("dataset topology differs from the checkpoint".into()));
    }
    if ds.n_covariates() != model.n_covariates {
        return Err(Error::Dimension {
            what: "dataset covariates",
            expected: model.n_covariates,
            got: ds.n_covariates(),
        });
    }
    let d = model.n_covariates;
    let mut x = Array2::zeros((ds.len(), d));
    for (i, s) in ds.subjects.iter().enumerate() {
        x.row_mut(i)
            .assign(&ndarray::ArrayView1::from(&model.prepare(&s.covariates)));
    }
    Ok(x)
}

/// Occupation curves `P(0, t)[initial, .]` for every subject of `ds`
/// (raw covariates).
pub fn predict_occupation(
    model: &SurvNodeModel,
    ds: &Dataset,
    grid: &[f64],
    cfg: &RunConfig,
) -> Result<Vec<Array2<f64>>> {
    let x = model_inputs(model, ds)?;
    let mats = model.transition_matrices(x.view(), grid, cfg.solver)?;
    Ok(mats
        .iter()
        .zip(&ds.subjects)
        .map(|(per_t, s)| {
            let init = s.initial_state();
            Array2::from_shape_fn((grid.len(), model.n_states()), |(k, j)| per_t[k].get(init, j))
        })
        .collect())
}

/// Mean curves and credible bands from prior draws of a latent model.
pub fn predict_bands(
    model: &VariationalModel,
    ds: &Dataset,
    grid: &[f64],
    cfg: &RunConfig,
) -> Result<Vec<IntervalBand>> {
    let x = model_inputs(&model.base, ds)?;
    let v = &cfg.variational;
    ds.subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            model.predict_interval(
                &x.row(i).to_vec(),
                s.initial_state(),
                grid,
                v.n_samples,
                v.level,
                cfg.seed,
                cfg.solver,
            )
        })
        .collect()
}

fn edge_header(prefix: &str, ds: &Dataset) -> String {
    let mut h = String::from("subject_id,time");
    for &(i, j) in ds.topology.edges() {
        h.push_str(&format!(",{prefix}{}_{}", i + 1, j + 1));
    }
    h + "\n"
}

/// Writes `predictions.csv` for the configured split (plus hazard files
/// when requested) and returns the table.
pub fn predict_command(cfg: &RunConfig) -> Result<CurveTable> {
    let dir = cfg
        .predict
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint"));
    let ck = load_checkpoint(&dir)?;
    let (ds, splits) = load_data(cfg)?;
    let ds = select(&ds, &splits, cfg.predict.split);
    if ds.is_empty() {
        return Err(Error::Invalid("the selected split is empty".into()));
    }
    let grid = resolve_grid(cfg, &ds)?;
    let ids: Vec<String> = ds.subjects.iter().map(|s| s.id.clone()).collect();
    let table = match &ck.model {
        CheckpointModel::Point(m) => CurveTable {
            ids,
            values: predict_occupation(m, &ds, &grid, cfg)?,
            grid: grid.clone(),
            bands: None,
        },
        CheckpointModel::Variational(v) => {
            let bands = predict_bands(v, &ds, &grid, cfg)?;
            let dropped: usize = bands.iter().map(|b| b.dropped).sum();
            if dropped > 0 {
                log::warn!("{dropped} prior draws failed to integrate and were dropped");
            }
            CurveTable {
                ids,
                grid: grid.clone(),
                values: bands.iter().map(|b| b.mean.clone()).collect(),
                bands: Some((
                    bands.iter().map(|b| b.lo.clone()).collect(),
                    bands.iter().map(|b| b.hi.clone()).collect(),
                )),
            }
        }
    };
    write_curves(&cfg.out.join("predictions.csv"), &table)?;
    let wants_rates = cfg.predict.hazards || cfg.predict.hazard_ratio.is_some();
    if wants_rates {
        let CheckpointModel::Point(m) = &ck.model else {
            return Err(Error::Config("hazard outputs need a point-model checkpoint".into()));
        };
        if cfg.predict.hazards {
            write_text(&cfg.out.join("hazards.csv"), &hazard_table(m, &ds, &grid, cfg)?)?;
        }
        if let Some(name) = &cfg.predict.hazard_ratio {
            write_text(
                &cfg.out.join("hazard_ratio.csv"),
                &hazard_ratio_table(m, &ds, name, &grid, cfg)?,
            )?;
        }
    }
    echo_config(cfg)?;
    Ok(table)
}

fn hazard_table(m: &SurvNodeModel, ds: &Dataset, grid: &[f64], cfg: &RunConfig) -> Result<String> {
    let mut text = edge_header("q", ds);
    for s in &ds.subjects {
        let rates = m.hazard_rates(&m.prepare(&s.covariates), grid, cfg.solver)?;
        for (t, q) in grid.iter().zip(&rates) {
            text.push_str(&format!("{},{t}", s.id));
            for &(i, j) in ds.topology.edges() {
                text.push_str(&format!(",{}", q.get(i, j)));
            }
            text.push('\n');
        }
    }
    Ok(text)
}

/// Rate ratio of each subject with covariate `name` set to 1 versus 0.
pub fn hazard_ratio_table(
    m: &SurvNodeModel,
    ds: &Dataset,
    name: &str,
    grid: &[f64],
    cfg: &RunConfig,
) -> Result<String> {
    let col = ds
        .covariate_names
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::Config(format!("unknown covariate `{name}`")))?;
    let mut text = edge_header("hr", ds);
    for s in &ds.subjects {
        let (mut on, mut off) = (s.covariates.clone(), s.covariates.clone());
        on[col] = 1.0;
        off[col] = 0.0;
        let hr = m.hazard_ratio(&m.prepare(&on), &m.prepare(&off), grid, cfg.solver)?;
        for (t, r) in grid.iter().zip(&hr) {
            text.push_str(&format!("{},{t}", s.id));
            for &(i, j) in ds.topology.edges() {
                text.push_str(&format!(",{}", r[[i, j]]));
            }
            text.push('\n');
        }
    }
    Ok(text)
}

/// Scalar metrics (keys sorted) plus the per-time curves behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scalars: BTreeMap<String, serde_json::Value>,
    pub grid: Vec<f64>,
    /// Named per-time columns.
    pub curves: Vec<(String, Vec<f64>)>,
}

impl MetricsReport {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).and_then(serde_json::Value::as_f64)
    }

    pub fn per_state(&self, key: &str) -> Option<Vec<f64>> {
        self.scalars
            .get(key)?
            .as_array()?
            .iter()
            .map(serde_json::Value::as_f64)
            .collect()
    }
}

fn reorder(table: &CurveTable, ids: &[String], what: &str) -> Result<Vec<usize>> {
    let pos: std::collections::HashMap<&str, usize> =
        table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    ids.iter()
        .map(|id| {
            pos.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("subject {id} missing from {what}")))
        })
        .collect()
}

/// Scores `pred` (curves for subjects of `ds`, in order) against the
/// observed data and, when given, the true curves.
pub fn evaluate_curves(pred: &CurveTable, ds: &Dataset, truth: Option<&CurveTable>) -> Result<MetricsReport> {
    let grid = pred.grid.clone();
    let ids: Vec<String> = ds.subjects.iter().map(|s| s.id.clone()).collect();
    let order = reorder(pred, &ids, "predictions")?;
    let values: Vec<Array2<f64>> = order.iter().map(|&i| pred.values[i].clone()).collect();
    let s_n = ds.topology.n_states();
    if values.iter().any(|v| v.ncols() != s_n) {
        return Err(Error::Invalid("prediction columns do not match the topology".into()));
    }
    let mut scalars = BTreeMap::new();
    let mut curves = Vec::new();
    scalars.insert("n_subjects".into(), json!(ds.len()));

    let g = censoring_curve(ds)?;
    let ms = multistate_brier(&values, ds, &g, &grid)?;
    scalars.insert("multistate_ibs".into(), json!(ms.integrated));
    let mut capped = ms.capped_weights;
    for j in 0..s_n {
        curves.push((format!("brier_s{}", j + 1), ms.values.column(j).to_vec()));
    }

    let aj = aalen_johansen(ds, &grid)?;
    let mut sup = vec![0.0f64; s_n];
    for j in 0..s_n {
        let mean: Vec<f64> = (0..grid.len())
            .map(|k| values.iter().map(|v| v[[k, j]]).sum::<f64>() / values.len() as f64)
            .collect();
        for k in 0..grid.len() {
            sup[j] = sup[j].max((mean[k] - aj.occupation[[k, j]]).abs());
        }
        curves.push((format!("aj_s{}", j + 1), aj.occupation.column(j).to_vec()));
        curves.push((format!("mean_pred_s{}", j + 1), mean));
    }
    scalars.insert("aj_sup_deviation".into(), json!(sup));

    if s_n == 2 && ds.topology.is_allowed(0, 1) && ds.topology.q_count() == 1 {
        let surv = Array2::from_shape_fn((values.len(), grid.len()), |(i, k)| values[i][[k, 0]]);
        let curves_s = SurvivalCurves::new(grid.clone(), surv)?;
        let (times, events): (Vec<f64>, Vec<bool>) = ds.subjects.iter().map(|s| s.first_exit()).unzip();
        let gk = censoring_km(&times, &events)?;
        scalars.insert("c".into(), json!(concordance_td(&curves_s, &times, &events)?));
        let bs = brier_ipcw(&curves_s, &times, &events, &gk, &grid)?;
        let ll = ibll(&curves_s, &times, &events, &gk, &grid)?;
        scalars.insert("ibs".into(), json!(bs.integrated));
        scalars.insert("ibll".into(), json!(ll.integrated));
        capped += bs.capped_weights;
        curves.push(("brier".into(), bs.values));
        curves.push(("bll".into(), ll.values));
    }

    if let Some(truth) = truth {
        if truth.grid.len() != grid.len() || truth.grid.iter().zip(&grid).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(Error::Invalid(
                "ground-truth grid differs from the prediction grid".into(),
            ));
        }
        let t_order = reorder(truth, &ids, "ground truth")?;
        let tv: Vec<Array2<f64>> = t_order.iter().map(|&i| truth.values[i].clone()).collect();
        let bvt = brier_vs_truth(&values, &tv, &grid)?;
        scalars.insert("brier_vs_truth".into(), json!(bvt.integrated));
        for j in 0..s_n {
            curves.push((format!("brier_vs_truth_s{}", j + 1), bvt.values.column(j).to_vec()));
        }
        if let Some((lo, hi)) = &pred.bands {
            let bands: Vec<IntervalBand> = order
                .iter()
                .map(|&i| IntervalBand {
                    times: grid.clone(),
                    level: f64::NAN,
                    mean: pred.values[i].clone(),
                    lo: lo[i].clone(),
                    hi: hi[i].clone(),
                    dropped: 0,
                })
                .collect();
            scalars.insert("coverage".into(), json!(interval_coverage(&bands, &tv, &grid)?));
        }
    }
    scalars.insert("capped_weights".into(), json!(capped));
    Ok(MetricsReport { scalars, grid, curves })
}

pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(&report.scalars).map_err(|e| Error::format(dir, e.to_string()))?;
    write_text(&dir.join("metrics.json"), &(json + "\n"))?;
    let mut text = String::from("time");
    for (name, _) in &report.curves {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for (k, t) in report.grid.iter().enumerate() {
        text.push_str(&t.to_string());
        for (_, col) in &report.curves {
            text.push_str(&format!(",{}", col[k]));
        }
        text.push('\n');
    }
    write_text(&dir.join("metrics_curves.csv"), &text)
}

/// Scores the predictions file against the configured split; writes
/// `metrics.json` and `metrics_curves.csv`.
pub fn evaluate_command(cfg: &RunConfig) -> Result<MetricsReport> {
    let path = cfg
        .evaluate
        .predictions
        .clone()
        .unwrap_or_else(|| cfg.out.join("predictions.csv"));
    let pred = read_curves(&path)?;
    let (ds, splits) = load_data(cfg)?;
    let ds = select(&ds, &splits, cfg.evaluate.split);
    let truth = truth_table(cfg)?;
    let report = evaluate_curves(&pred, &ds, truth.as_ref())?;
    write_metrics(&cfg.out, &report)?;
    echo_config(cfg)?;
    Ok(report)
}

/// Exports prior latent means and k-means labels of a latent model to
/// `latent.csv`.
pub fn latent_command(cfg: &RunConfig) -> Result<crate::variational::LatentExport> {
    let dir = cfg
        .predict
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint"));
    let ck = load_checkpoint(&dir)?;
    let CheckpointModel::Variational(v) = &ck.model else {
        return Err(Error::Config("latent export needs a variational checkpoint".into()));
    };
    let (ds, splits) = load_data(cfg)?;
    let mut ds = select(&ds, &splits, cfg.predict.split);
    model_inputs(&v.base, &ds)?;
    for s in &mut ds.subjects {
        s.covariates = v.base.prepare(&s.covariates);
    }
    let export = v.export_latent(&ds, cfg.variational.clusters, cfg.seed)?;
    let mut text = String::from("subject_id");
    for j in 0..export.means.ncols() {
        text.push_str(&format!(",z{}", j + 1));
    }
    text.push_str(",cluster\n");
    for (i, id) in export.ids.iter().enumerate() {
        text.push_str(id);
        for v in export.means.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push_str(&format!(",{}\n", export.labels[i]));
    }
    write_text(&cfg.out.join("latent.csv"), &text)?;
    echo_config(cfg)?;
    Ok(export)
}
