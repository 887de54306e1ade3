//! Converter for flat survival tables such as the public METABRIC
//! (1904 x 9 covariates) and SUPPORT (8873 x 14) exports: one row per
//! subject with covariate columns, a `duration` column and a 0/1 `event`
//! column. Rows become two-state records.

use std::path::Path;

use crate::error::{Error, Result};
use crate::simulate::{sample_paths, Preset};
use crate::statespace::{Dataset, Observation, SubjectRecord, TransitionTopology};

pub const DURATION_COLUMN: &str = "duration";
pub const EVENT_COLUMN: &str = "event";

/// Reads a flat survival CSV; every column other than `duration` and
/// `event` is a covariate. Subject ids are the 1-based row numbers.
pub fn read_survival_csv(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
    let headers = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing `{name}` column")))
    };
    let (dur, ev) = (find(DURATION_COLUMN)?, find(EVENT_COLUMN)?);
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != dur && c != ev).collect();
    let names = cov_cols.iter().map(|&c| headers[c].to_string()).collect();
    let mut subjects = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("row {}: `{}` is not a number", k + 2, &rec[c])))
        };
        let t = num(dur)?;
        let event = match num(ev)? {
            1.0 => true,
            0.0 => false,
            e => {
                return Err(Error::format(
                    path,
                    format!("row {}: event must be 0 or 1, got {e}", k + 2),
                ))
            }
        };
        if !(t > 0.0) {
            return Err(Error::format(path, format!("row {}: duration must be positive", k + 2)));
        }
        let x = cov_cols.iter().map(|&c| num(c)).collect::<Result<Vec<f64>>>()?;
        let obs = vec![Observation::exact(0.0, 0), Observation::exact(t, usize::from(event))];
        subjects.push(SubjectRecord::new((k + 1).to_string(), x, obs, event));
    }
    if subjects.is_empty() {
        return Err(Error::format(path, "no rows"));
    }
    Ok(Dataset::new(subjects, TransitionTopology::two_state(), names))
}

/// Writes a two-state dataset as a flat survival CSV (the inverse of
/// [`read_survival_csv`]).
pub fn write_survival_csv(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.topology != TransitionTopology::two_state() {
        return Err(Error::Invalid(
            "flat survival tables need the two-state topology".into(),
        ));
    }
    let mut text = ds.covariate_names.join(",");
    text.push_str(&format!(",{DURATION_COLUMN},{EVENT_COLUMN}\n"));
    for s in &ds.subjects {
        let (t, e) = s.first_exit();
        let cells: Vec<String> = s.covariates.iter().map(f64::to_string).collect();
        text.push_str(&format!("{},{t},{}\n", cells.join(","), u8::from(e)));
    }
    super::formats::write_text(path, &text)
}

/// Simulates the bundled METABRIC-shaped stand-in from its preset.
pub fn metabric_standin(preset: &Preset) -> Result<Dataset> {
    let sim = sample_paths(&preset.spec, preset.n_subjects, preset.seed)?;
    let mut ds = sim.dataset;
    ds.covariate_names = (0..ds.n_covariates()).map(|j| format!("x{j}")).collect();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::formats::write_text;

    #[test]
    fn reads_flat_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_text(&p, "x0,x1,duration,event\n0.5,1,10.5,1\n-1,0,3,0\n").unwrap();
        let ds = read_survival_csv(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.covariate_names, vec!["x0", "x1"]);
        assert_eq!(ds.subjects[0].first_exit(), (10.5, true));
        assert_eq!(ds.subjects[1].first_exit(), (3.0, false));
        assert!(crate::statespace::validate_dataset(&ds).is_empty());
        write_text(&p, "x0,duration,event\n1,2,2\n").unwrap();
        assert!(read_survival_csv(&p).is_err());
        write_text(&p, "x0,time,event\n1,2,1\n").unwrap();
        assert!(read_survival_csv(&p).is_err());
    }

    #[test]
    fn flat_table_round_trip() {
        let p = crate::simulate::preset("metabric-standin").unwrap();
        let mut small = p.clone();
        small.n_subjects = 50;
        let ds = metabric_standin(&small).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_survival_csv(&path, &ds).unwrap();
        let back = read_survival_csv(&path).unwrap();
        assert_eq!(back.len(), 50);
        for (a, b) in back.subjects.iter().zip(&ds.subjects) {
            assert_eq!(a.covariates, b.covariates);
            assert_eq!(a.first_exit(), b.first_exit());
        }
    }
}
