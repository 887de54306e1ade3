//! On-disk formats. All files are UTF-8 with LF line endings and `.` as
//! the decimal separator; states are numbered from 1.
//!
//! - events: `subject_id,time,state,kind` with kind one of `start`,
//!   `transition`, `interval_transition`, `censor`
//! - covariates: `subject_id,<name>...`
//! - topology: JSON matrix of 0/1 with `null` on the diagonal
//! - splits: `subject_id,split` with split `train`, `valid` or `test`
//! - occupation curves: `subject_id,time,p1..pS` (optionally `lo*`, `hi*`)

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statespace::{validate_dataset, Dataset, ObsMode, Observation, SubjectRecord, TransitionTopology};

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::format(path, format!("{what}: `{field}` is not a number")))
}

pub fn write_topology(path: &Path, topo: &TransitionTopology) -> Result<()> {
    let rows: Vec<String> = (0..topo.n_states())
        .map(|i| {
            let cells: Vec<&str> = (0..topo.n_states())
                .map(|j| match (i == j, topo.is_allowed(i, j)) {
                    (true, _) => "null",
                    (false, true) => "1",
                    (false, false) => "0",
                })
                .collect();
            format!("  [{}]", cells.join(", "))
        })
        .collect();
    write_text(path, &format!("[\n{}\n]\n", rows.join(",\n")))
}

pub fn read_topology(path: &Path) -> Result<TransitionTopology> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<Vec<Option<u8>>> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let n = raw.len();
    let mut mask = vec![vec![false; n]; n];
    for (i, row) in raw.iter().enumerate() {
        if row.len() != n {
            return Err(Error::format(path, "topology matrix must be square"));
        }
        for (j, cell) in row.iter().enumerate() {
            match (i == j, cell) {
                (true, None) => {}
                (true, Some(_)) => return Err(Error::format(path, "diagonal entries must be null")),
                (false, Some(0)) => {}
                (false, Some(1)) => mask[i][j] = true,
                (false, _) => return Err(Error::format(path, "off-diagonal entries must be 0 or 1")),
            }
        }
    }
    TransitionTopology::new(&mask)
}

pub fn write_events(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "time", "state", "kind"])
        .map_err(csv_err(path))?;
    for s in &ds.subjects {
        let m = s.observations.len();
        for (j, o) in s.observations.iter().enumerate() {
            let kind = if j == 0 {
                "start"
            } else if j == m - 1 && !s.last_observed && o.mode == ObsMode::Exact {
                "censor"
            } else if o.mode == ObsMode::Interval || o.state == s.observations[j - 1].state {
                "interval_transition"
            } else {
                "transition"
            };
            w.write_record([s.id.as_str(), &o.time.to_string(), &(o.state + 1).to_string(), kind])
                .map_err(csv_err(path))?;
        }
    }
    flush(w, path)
}

/// Per-subject observation lists in order of first appearance, with the
/// final-observation flag.
pub fn read_events(path: &Path) -> Result<Vec<(String, Vec<Observation>, bool)>> {
    let mut r = reader(path)?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "time", "state", "kind"] {
        return Err(Error::format(path, "expected header subject_id,time,state,kind"));
    }
    let mut out: Vec<(String, Vec<Observation>, bool)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut closed: Vec<bool> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let id = rec[0].to_string();
        let time = parse_f64(path, &rec[1], "time")?;
        let state: usize = rec[2]
            .parse()
            .ok()
            .filter(|&s: &usize| s >= 1)
            .ok_or_else(|| Error::format(path, format!("row {}: state must be an integer >= 1", line + 2)))?;
        let state = state - 1;
        let kind = &rec[3];
        let slot = match index.get(&id) {
            Some(&k) => k,
            None => {
                if kind != "start" {
                    return Err(Error::format(path, format!("subject {id}: first row must be `start`")));
                }
                index.insert(id.clone(), out.len());
                out.push((id.clone(), Vec::new(), true));
                closed.push(false);
                out.len() - 1
            }
        };
        if closed[slot] {
            return Err(Error::format(path, format!("subject {id}: rows after `censor`")));
        }
        let obs = match kind {
            "start" if out[slot].1.is_empty() => Observation::exact(time, state),
            "start" => return Err(Error::format(path, format!("subject {id}: repeated `start`"))),
            "transition" => Observation::exact(time, state),
            "interval_transition" => Observation::interval(time, state),
            "censor" => {
                closed[slot] = true;
                out[slot].2 = false;
                Observation::exact(time, state)
            }
            other => return Err(Error::format(path, format!("unknown event kind `{other}`"))),
        };
        out[slot].1.push(obs);
    }
    Ok(out)
}

pub fn write_covariates(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for s in &ds.subjects {
        let mut row = vec![s.id.clone()];
        row.extend(s.covariates.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    flush(w, path)
}

/// Covariate names and rows keyed by subject id.
/// Column names and covariate rows keyed by subject id.
pub type CovariateTable = (Vec<String>, HashMap<String, Vec<f64>>);

pub fn read_covariates(path: &Path) -> Result<CovariateTable> {
    let mut r = reader(path)?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.get(0) != Some("subject_id") {
        return Err(Error::format(path, "first column must be subject_id"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|f| parse_f64(path, f, "covariate"))
            .collect::<Result<Vec<f64>>>()?;
        if rows.insert(rec[0].to_string(), values).is_some() {
            return Err(Error::format(path, format!("duplicate subject {}", &rec[0])));
        }
    }
    Ok((names, rows))
}

/// Joins events, covariates and topology into a validated dataset.
pub fn load_dataset(events: &Path, covariates: &Path, topology: &Path) -> Result<Dataset> {
    let topo = read_topology(topology)?;
    let (names, mut cov) = read_covariates(covariates)?;
    let mut subjects = Vec::new();
    for (id, obs, last) in read_events(events)? {
        let x = cov
            .remove(&id)
            .ok_or_else(|| Error::format(covariates, format!("no covariates for subject {id}")))?;
        subjects.push(SubjectRecord::new(id, x, obs, last));
    }
    if !cov.is_empty() {
        log::warn!("{} covariate rows have no events and were ignored", cov.len());
    }
    let ds = Dataset::new(subjects, topo, names);
    let violations = validate_dataset(&ds);
    if let Some(v) = violations.first() {
        return Err(Error::Invalid(format!(
            "{} invalid records; first: subject {} {:?} ({})",
            violations.len(),
            ds.subjects[v.subject].id,
            v.rule,
            v.detail
        )));
    }
    Ok(ds)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write_events(&dir.join("events.csv"), ds)?;
    write_covariates(&dir.join("covariates.csv"), ds)?;
    write_topology(&dir.join("topology.json"), &ds.topology)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Seeded 64/16/20 train/validation/test assignment.
pub fn random_split(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (0.64 * n as f64).round() as usize;
    let n_valid = (0.16 * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in idx.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

pub fn write_splits(path: &Path, ds: &Dataset, splits: &[Split]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "split"]).map_err(csv_err(path))?;
    for (s, sp) in ds.subjects.iter().zip(splits) {
        w.write_record([s.id.as_str(), sp.as_str()]).map_err(csv_err(path))?;
    }
    flush(w, path)
}

/// Split of each subject of `ds`, from a manifest.
pub fn read_splits(path: &Path, ds: &Dataset) -> Result<Vec<Split>> {
    let mut r = reader(path)?;
    let mut map = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let sp = match &rec[1] {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            other => return Err(Error::format(path, format!("unknown split `{other}`"))),
        };
        map.insert(rec[0].to_string(), sp);
    }
    ds.subjects
        .iter()
        .map(|s| {
            map.get(&s.id)
                .copied()
                .ok_or_else(|| Error::format(path, format!("subject {} missing from manifest", s.id)))
        })
        .collect()
}

/// Lower and upper band curves per subject.
pub type Bands = (Vec<Array2<f64>>, Vec<Array2<f64>>);

/// Occupation curves (and optional bands) per subject on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub ids: Vec<String>,
    pub grid: Vec<f64>,
    /// One `grid x S` matrix per subject.
    pub values: Vec<Array2<f64>>,
    pub bands: Option<Bands>,
}

pub fn write_curves(path: &Path, table: &CurveTable) -> Result<()> {
    let s_n = table.values.first().map_or(0, |v| v.ncols());
    let mut w = writer(path)?;
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend((1..=s_n).map(|j| format!("p{j}")));
    if table.bands.is_some() {
        header.extend((1..=s_n).map(|j| format!("lo{j}")));
        header.extend((1..=s_n).map(|j| format!("hi{j}")));
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, id) in table.ids.iter().enumerate() {
        for (k, t) in table.grid.iter().enumerate() {
            let mut row = vec![id.clone(), t.to_string()];
            row.extend(table.values[i].row(k).iter().map(f64::to_string));
            if let Some((lo, hi)) = &table.bands {
                row.extend(lo[i].row(k).iter().map(f64::to_string));
                row.extend(hi[i].row(k).iter().map(f64::to_string));
            }
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    flush(w, path)
}

pub fn read_curves(path: &Path) -> Result<CurveTable> {
    let mut r = reader(path)?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    let s_n = headers.iter().filter(|h| h.starts_with('p')).count();
    let has_bands = headers.iter().any(|h| h.starts_with("lo"));
    if headers.get(0) != Some("subject_id") || headers.get(1) != Some("time") || s_n == 0 {
        return Err(Error::format(path, "expected subject_id,time,p1.. columns"));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut grid: Vec<f64> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let t = parse_f64(path, &rec[1], "time")?;
        if ids.last().map(String::as_str) != Some(&rec[0]) {
            ids.push(rec[0].to_string());
            rows.push(Vec::new());
        }
        let vals = rec
            .iter()
            .skip(2)
            .map(|f| parse_f64(path, f, "probability"))
            .collect::<Result<Vec<_>>>()?;
        let cur = rows.last_mut().expect("pushed");
        if ids.len() == 1 {
            grid.push(t);
        } else if grid.get(cur.len()) != Some(&t) {
            return Err(Error::format(
                path,
                format!("subject {} uses a different grid", &rec[0]),
            ));
        }
        cur.push(vals);
    }
    let block = |rows: &[Vec<f64>], off: usize| Array2::from_shape_fn((rows.len(), s_n), |(k, j)| rows[k][off + j]);
    for (id, r) in ids.iter().zip(&rows) {
        if r.len() != grid.len() {
            return Err(Error::format(
                path,
                format!("subject {id} has {} rows, expected {}", r.len(), grid.len()),
            ));
        }
    }
    let values = rows.iter().map(|r| block(r, 0)).collect();
    let bands = has_bands.then(|| {
        (
            rows.iter().map(|r| block(r, s_n)).collect(),
            rows.iter().map(|r| block(r, 2 * s_n)).collect(),
        )
    });
    Ok(CurveTable {
        ids,
        grid,
        values,
        bands,
    })
}
