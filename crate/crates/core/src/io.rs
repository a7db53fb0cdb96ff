//! Data bundles and result files.
//!
//! A bundle is a directory holding `meta.json` (dimensions, default family,
//! family override blocks, optionally the true factor numbers) and
//! `data.csv` with header `t,i,j,x`, one row per observed cell with one-based
//! indices. Cells without a row are missing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GmfmError, Result};
use crate::evalsim::{SimCase, Simulated};
use crate::families::FamilyKind;
use crate::fit::FitReport;
use crate::inference::AllVariances;
use crate::linalg::from_row_major;
use crate::model::{Dataset, FactorParams, FamilyBlock, FamilyMap, MatrixSeries};
use crate::selection::{CriterionRow, CRITERION_HEADER};

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub p1: usize,
    pub p2: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub family: FamilyKind,
    #[serde(default)]
    pub blocks: Vec<FamilyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<usize>,
}

impl Meta {
    pub fn map(&self) -> FamilyMap {
        FamilyMap {
            default: self.family,
            blocks: self.blocks.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub meta: Meta,
    pub data: Dataset,
}

fn io_err(path: &Path, source: std::io::Error) -> GmfmError {
    GmfmError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| GmfmError::data(path.display().to_string(), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| GmfmError::data(path.display().to_string(), e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let meta: Meta = read_json(path)?;
    let src = path.display().to_string();
    for (name, v) in [("p1", meta.p1), ("p2", meta.p2), ("T", meta.t)] {
        if v == 0 {
            return Err(GmfmError::data(&src, format!("field `{name}` must be positive")));
        }
    }
    for (name, v) in [("k1", meta.k1), ("k2", meta.k2)] {
        if v == Some(0) {
            return Err(GmfmError::data(&src, format!("field `{name}` must be positive")));
        }
    }
    meta.map()
        .resolve(meta.p1, meta.p2, meta.t)
        .map_err(|e| GmfmError::data(&src, format!("field `blocks`: {e}")))?;
    Ok(meta)
}

/// Reads `data.csv` into a series with the given dimensions.
pub fn read_data_csv(path: &Path, p1: usize, p2: usize, t: usize) -> Result<MatrixSeries> {
    let src = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| GmfmError::data(&src, e.to_string()))?
        .clone();
    let expected = ["t", "i", "j", "x"];
    if header.len() != 4 || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(GmfmError::data(&src, format!("header must be `t,i,j,x`, found `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let n = p1 * p2 * t;
    let mut values = vec![0.0; n];
    let mut observed = vec![false; n];
    for (line, rec) in reader.records().enumerate() {
        let row = line + 2;
        let rec = rec.map_err(|e| GmfmError::data(&src, e.to_string()))?;
        if rec.len() != 4 {
            return Err(GmfmError::data(&src, format!("line {row}: expected 4 fields, found {}", rec.len())));
        }
        let mut idx = [0usize; 3];
        for (k, (name, max)) in [("t", t), ("i", p1), ("j", p2)].into_iter().enumerate() {
            let v: usize = rec[k]
                .parse()
                .map_err(|_| GmfmError::data(&src, format!("line {row}: `{name}` is not a positive integer: `{}`", &rec[k])))?;
            if v == 0 || v > max {
                return Err(GmfmError::data(&src, format!("line {row}: `{name}` = {v} outside 1..={max}")));
            }
            idx[k] = v - 1;
        }
        let x: f64 = rec[3]
            .parse()
            .map_err(|_| GmfmError::data(&src, format!("line {row}: `x` is not a number: `{}`", &rec[3])))?;
        if !x.is_finite() {
            return Err(GmfmError::data(&src, format!("line {row}: `x` is not finite")));
        }
        let cell = (idx[0] * p1 + idx[1]) * p2 + idx[2];
        if observed[cell] {
            return Err(GmfmError::data(&src, format!("line {row}: duplicate cell (t={}, i={}, j={})", idx[0] + 1, idx[1] + 1, idx[2] + 1)));
        }
        observed[cell] = true;
        values[cell] = x;
    }
    MatrixSeries::with_mask(p1, p2, t, values, Some(observed))
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let meta = read_meta(&dir.join(META_FILE))?;
    let series = read_data_csv(&dir.join(DATA_FILE), meta.p1, meta.p2, meta.t)?;
    let data = Dataset::new(series, meta.map())?;
    Ok(Bundle { meta, data })
}

/// Writes `data.csv` with one row per observed cell.
pub fn write_data_csv(path: &Path, series: &MatrixSeries) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "t,i,j,x")?;
        for t in 0..series.t() {
            for i in 0..series.p1() {
                for j in 0..series.p2() {
                    let idx = series.index(i, j, t);
                    if series.is_observed(idx) {
                        writeln!(w, "{},{},{},{}", t + 1, i + 1, j + 1, series.values()[idx])?;
                    }
                }
            }
        }
        w.flush()
    };
    go().map_err(|e| io_err(path, e))
}

pub fn write_bundle(dir: &Path, meta: &Meta, series: &MatrixSeries) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join(META_FILE), meta)?;
    write_data_csv(&dir.join(DATA_FILE), series)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(what: &str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * ncols);
    for r in rows {
        if r.len() != ncols {
            return Err(GmfmError::dims(what, ncols, r.len()));
        }
        flat.extend_from_slice(r);
    }
    Ok(from_row_major(rows.len(), ncols, &flat))
}

/// Loadings and factors as nested row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    pub f: Vec<Vec<Vec<f64>>>,
}

impl ParamsJson {
    pub fn from_params(theta: &FactorParams) -> Self {
        ParamsJson {
            r: rows_of(&theta.r),
            c: rows_of(&theta.c),
            f: theta.f.iter().map(rows_of).collect(),
        }
    }

    pub fn to_params(&self) -> Result<FactorParams> {
        let k1 = self.r.first().map_or(0, Vec::len);
        let k2 = self.c.first().map_or(0, Vec::len);
        let r = matrix_from_rows("R", &self.r, k1)?;
        let c = matrix_from_rows("C", &self.c, k2)?;
        let f = self
            .f
            .iter()
            .map(|ft| {
                if ft.len() != k1 {
                    return Err(GmfmError::dims("F rows", k1, ft.len()));
                }
                matrix_from_rows("F", ft, k2)
            })
            .collect::<Result<Vec<_>>>()?;
        FactorParams::new(r, c, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBlocks {
    /// One k1 x k1 matrix per row loading.
    pub rows: Vec<Vec<Vec<f64>>>,
    /// One k2 x k2 matrix per column loading.
    pub cols: Vec<Vec<Vec<f64>>>,
    /// One (k1 k2) x (k1 k2) matrix per slice, for column-major vec(F_t).
    pub factors: Vec<Vec<Vec<f64>>>,
}

impl VarianceBlocks {
    pub fn from_variances(v: &AllVariances) -> Self {
        let m = |xs: &[crate::inference::SandwichEstimate]| xs.iter().map(|s| rows_of(&s.variance)).collect();
        VarianceBlocks {
            rows: m(&v.rows),
            cols: m(&v.cols),
            factors: m(&v.factors),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub p1: usize,
    pub p2: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub k1: usize,
    pub k2: usize,
    #[serde(flatten)]
    pub params: ParamsJson,
    pub report: FitReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<VarianceBlocks>,
}

impl FitFile {
    pub fn new(theta: &FactorParams, report: FitReport, variances: Option<&AllVariances>) -> Self {
        FitFile {
            p1: theta.p1(),
            p2: theta.p2(),
            t: theta.t(),
            k1: theta.k1(),
            k2: theta.k2(),
            params: ParamsJson::from_params(theta),
            report,
            variances: variances.map(VarianceBlocks::from_variances),
        }
    }

    pub fn theta(&self) -> Result<FactorParams> {
        let theta = self.params.to_params()?;
        for (what, want, got) in [
            ("p1", self.p1, theta.p1()),
            ("p2", self.p2, theta.p2()),
            ("T", self.t, theta.t()),
            ("k1", self.k1, theta.k1()),
            ("k2", self.k2, theta.k2()),
        ] {
            if want != got {
                return Err(GmfmError::dims(what, want, got));
            }
        }
        Ok(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub case: SimCase,
    pub seed: u64,
    pub k1: usize,
    pub k2: usize,
    #[serde(flatten)]
    pub params: ParamsJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_scales: Option<Vec<f64>>,
}

/// Writes a simulated data set as a bundle plus `truth.json`.
pub fn write_simulated(dir: &Path, sim: &Simulated) -> Result<()> {
    let (k1, k2) = (sim.truth.k1(), sim.truth.k2());
    let map = sim.data.map();
    let meta = Meta {
        p1: sim.spec.p1,
        p2: sim.spec.p2,
        t: sim.spec.t,
        family: map.default,
        blocks: map.blocks.clone(),
        k1: Some(k1),
        k2: Some(k2),
    };
    write_bundle(dir, &meta, sim.data.series())?;
    let truth = TruthFile {
        case: sim.spec.case,
        seed: sim.spec.seed,
        k1,
        k2,
        params: ParamsJson::from_params(&sim.truth),
        column_scales: sim.column_scales.clone(),
    };
    write_json(&dir.join(TRUTH_FILE), &truth)
}

pub fn criterion_csv(rows: &[CriterionRow]) -> String {
    let mut s = String::from(CRITERION_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn write_criterion_csv(path: &Path, rows: &[CriterionRow]) -> Result<()> {
    write_text(path, &criterion_csv(rows))
}

/// Writes `text` to `path`, or to stdout when `path` is `None` or `-`.
pub fn write_output(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) if p.as_os_str() != "-" => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            write_text(p, text)
        }
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}
