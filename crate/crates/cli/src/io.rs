//! CSV and JSON files. Numbers are written with 17 significant digits so that
//! every value reads back bit-for-bit; files are replaced atomically.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::Serialize;

use gpct::datasets::{pose_to_params, LandmarkMap, MeasurementLog, Trajectory, TruthState};
use gpct::linalg::{from_upper_triangle, upper_triangle};

use crate::error::CliError;

pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse(s: &str, path: &Path, row: usize) -> Result<f64, CliError> {
    s.trim().parse().map_err(|_| CliError::Validation(format!("{}: row {row}: '{s}' is not a number", path.display())))
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let name = path.file_name().ok_or_else(|| CliError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Data rows (header skipped).
fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(file);
    r.records()
        .map(|rec| {
            rec.map(|x| x.iter().map(str::to_string).collect())
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn numbers(fields: &[String], path: &Path, row: usize) -> Result<Vec<f64>, CliError> {
    fields.iter().map(|s| parse(s, path, row)).collect()
}

/// Flattened state: the vector, or pose parameters followed by the velocity.
pub fn state_row(s: &TruthState) -> Result<Vec<f64>, CliError> {
    Ok(match s {
        TruthState::Vector(v) => v.iter().copied().collect(),
        TruthState::Lie { pose, vel } => {
            let mut p = pose_to_params(pose)?;
            p.extend(vel.iter());
            p
        }
    })
}

pub fn write_truth(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let rows = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| Ok(std::iter::once(fmt(*t)).chain(state_row(s)?.into_iter().map(fmt)).collect()))
        .collect::<Result<Vec<Vec<String>>, CliError>>()?;
    let d = rows.first().map_or(0, |r| r.len() - 1);
    let header: Vec<String> = std::iter::once("t".to_string()).chain((0..d).map(|i| format!("x_{i}"))).collect();
    write_csv(path, &header, &rows)
}

/// Times and flattened states.
pub fn read_truth(path: &Path) -> Result<(Vec<f64>, Vec<Vec<f64>>), CliError> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (i, r) in read_csv(path)?.iter().enumerate() {
        let v = numbers(r, path, i + 1)?;
        if v.len() < 2 {
            return Err(CliError::Validation(format!("{}: row {} has no state", path.display(), i + 1)));
        }
        times.push(v[0]);
        states.push(v[1..].to_vec());
    }
    Ok((times, states))
}

pub fn write_measurements(path: &Path, log: &MeasurementLog) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = log
        .records
        .iter()
        .map(|r| {
            let mut row = vec![fmt(r.time), r.sensor.clone()];
            row.extend(r.value.iter().map(|v| fmt(*v)));
            row.extend(upper_triangle(&r.cov).into_iter().map(fmt));
            row
        })
        .collect();
    let header = ["t", "sensor", "values_then_covariance_upper"].map(String::from);
    write_csv(path, &header, &rows)
}

/// Reading dimension `d` from `d + d(d+1)/2` trailing numbers.
fn value_dim(count: usize) -> Option<usize> {
    (1..=count).find(|d| d + d * (d + 1) / 2 == count)
}

pub fn read_measurements(path: &Path) -> Result<MeasurementLog, CliError> {
    let mut log = MeasurementLog::default();
    for (i, r) in read_csv(path)?.iter().enumerate() {
        let row = i + 1;
        let bad = |m: &str| CliError::Validation(format!("{}: row {row}: {m}", path.display()));
        if r.len() < 4 {
            return Err(bad("expected t, sensor, values and covariance"));
        }
        let t = parse(&r[0], path, row)?;
        let nums = numbers(&r[2..], path, row)?;
        let d = value_dim(nums.len()).ok_or_else(|| bad("value and covariance counts do not match"))?;
        let cov = from_upper_triangle(d, &nums[d..])?;
        log.push(t, r[1].trim(), DVector::from_column_slice(&nums[..d]), cov);
    }
    log.validate()?;
    Ok(log)
}

pub fn write_landmarks(path: &Path, landmarks: &[Vector2<f64>]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> =
        landmarks.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt(l.x), fmt(l.y)]).collect();
    write_csv(path, &["id", "x", "y"].map(String::from), &rows)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkMap, CliError> {
    let mut map = LandmarkMap::new();
    for (i, r) in read_csv(path)?.iter().enumerate() {
        let row = i + 1;
        if r.len() != 3 {
            return Err(CliError::Validation(format!("{}: row {row}: expected id, x, y", path.display())));
        }
        let id =
            r[0].trim().parse().map_err(|_| CliError::Validation(format!("{}: row {row}: bad id", path.display())))?;
        map.insert(id, Vector2::new(parse(&r[1], path, row)?, parse(&r[2], path, row)?));
    }
    Ok(map)
}

/// One row of an estimate file.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRow {
    pub time: f64,
    /// `estimated`, `interpolated` or `extrapolated`.
    pub flag: String,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub bubbling: Option<f64>,
}

pub fn write_estimates(path: &Path, rows: &[EstimateRow]) -> Result<(), CliError> {
    let d = rows.first().map_or(0, |r| r.mean.len());
    let mut header = vec!["t".to_string(), "flag".to_string()];
    header.extend((0..d).map(|i| format!("mean_{i}")));
    header.extend((0..d).flat_map(|i| (i..d).map(move |j| format!("cov_{i}_{j}"))));
    header.push("bubbling".into());
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![fmt(r.time), r.flag.clone()];
            row.extend(r.mean.iter().map(|v| fmt(*v)));
            row.extend(upper_triangle(&r.cov).into_iter().map(fmt));
            row.push(r.bubbling.map(fmt).unwrap_or_default());
            row
        })
        .collect();
    write_csv(path, &header, &out)
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRow>, CliError> {
    let mut out = Vec::new();
    for (i, r) in read_csv(path)?.iter().enumerate() {
        let row = i + 1;
        let bad = |m: &str| CliError::Validation(format!("{}: row {row}: {m}", path.display()));
        if r.len() < 4 {
            return Err(bad("expected t, flag, mean, covariance, bubbling"));
        }
        let nums = numbers(&r[2..r.len() - 1], path, row)?;
        let d = value_dim(nums.len()).ok_or_else(|| bad("mean and covariance counts do not match"))?;
        let last = r[r.len() - 1].trim();
        out.push(EstimateRow {
            time: parse(&r[0], path, row)?,
            flag: r[1].trim().to_string(),
            mean: nums[..d].to_vec(),
            cov: from_upper_triangle(d, &nums[d..])?,
            bubbling: if last.is_empty() { None } else { Some(parse(last, path, row)?) },
        });
    }
    Ok(out)
}
