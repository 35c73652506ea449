//! File formats: row-major CSV matrices, JSON arrays-of-arrays, and the
//! dataset manifest `{m, r, atoms: [path | rows], weights?}`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::grassmann::{EmpiricalMeasure, SubspacePoint};
use crate::manifold::ScatterMatrix;

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(GsError::Parse("empty matrix".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(GsError::Parse("ragged or empty matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

/// Serializes a matrix as an array of rows, for `#[serde(serialize_with = ...)]`.
pub fn serialize_rows<S: serde::Serializer>(a: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_to_rows(a).serialize(s)
}

/// Parses a headerless CSV with one matrix row per line.
pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|e| {
                    GsError::Parse(format!("row {}: cannot parse {field:?}: {e}", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    matrix_from_rows(&rows)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    parse_matrix_csv(&text).map_err(|e| match e {
        GsError::Parse(msg) => GsError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn matrix_to_csv(a: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = a.row(i).iter().map(|x| format!("{x:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, a: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(a))?;
    Ok(())
}

/// Reads a scatter matrix from CSV or JSON (by extension), validating symmetry, PD and det 1.
pub fn read_scatter(path: &Path) -> Result<ScatterMatrix> {
    let a = if path.extension().is_some_and(|e| e == "json") {
        let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(path)?)?;
        matrix_from_rows(&rows)?
    } else {
        read_matrix_csv(path)?
    };
    ScatterMatrix::new(a)
}

/// One atom in a manifest: either a CSV path (relative to the manifest) or inline rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AtomSource {
    File(PathBuf),
    Inline(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub m: usize,
    pub r: usize,
    pub atoms: Vec<AtomSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Manifest {
    pub fn inline(meas: &EmpiricalMeasure) -> Self {
        Manifest {
            m: meas.m(),
            r: meas.r(),
            atoms: meas
                .points()
                .iter()
                .map(|p| AtomSource::Inline(matrix_to_rows(p.basis())))
                .collect(),
            weights: Some(meas.weights().to_vec()),
        }
    }
}

/// Loads a dataset manifest and checks that every atom is an m×r full-rank basis.
pub fn read_dataset(path: &Path) -> Result<EmpiricalMeasure> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| GsError::Parse(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    load_manifest(&manifest, dir)
}

pub fn load_manifest(manifest: &Manifest, dir: &Path) -> Result<EmpiricalMeasure> {
    let mut points = Vec::with_capacity(manifest.atoms.len());
    for (k, atom) in manifest.atoms.iter().enumerate() {
        let x = match atom {
            AtomSource::File(p) => read_matrix_csv(&dir.join(p))?,
            AtomSource::Inline(rows) => matrix_from_rows(rows)?,
        };
        if x.nrows() != manifest.m || x.ncols() != manifest.r {
            return Err(GsError::Parse(format!(
                "atom {k} is {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                manifest.m,
                manifest.r
            )));
        }
        points.push(SubspacePoint::new(x)?);
    }
    match &manifest.weights {
        Some(w) => EmpiricalMeasure::new(points, w.clone()),
        None => EmpiricalMeasure::uniform(points),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 1e-300, 0.1, 7.0]);
        let back = parse_matrix_csv(&matrix_to_csv(&a)).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(matches!(parse_matrix_csv("1,2\n3,x\n"), Err(GsError::Parse(_))));
        assert!(matches!(parse_matrix_csv("1,2\n3\n"), Err(GsError::Parse(_))));
        assert!(matches!(parse_matrix_csv(""), Err(GsError::Parse(_))));
    }

    #[test]
    fn scatter_json_round_trip() {
        let s = ScatterMatrix::normalized(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ScatterMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        assert!(serde_json::from_str::<ScatterMatrix>("[[2,0],[0,2]]").is_err());
    }

    #[test]
    fn manifest_with_files_and_inline() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1\n0\n").unwrap();
        let text = r#"{"m": 2, "r": 1, "atoms": ["a.csv", [[0.0],[1.0]]], "weights": [0.25, 0.75]}"#;
        let path = dir.path().join("data.json");
        fs::write(&path, text).unwrap();
        let meas = read_dataset(&path).unwrap();
        assert_eq!(meas.len(), 2);
        assert_eq!(meas.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn manifest_shape_mismatch_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        fs::write(&path, r#"{"m": 3, "r": 1, "atoms": [[[1.0],[0.0]]]}"#).unwrap();
        assert!(matches!(read_dataset(&path), Err(GsError::Parse(_))));
    }
}
