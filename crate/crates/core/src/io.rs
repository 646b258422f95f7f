//! Trace CSV and surface JSON persistence.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ecm_sim::{CellTrace, Sample, Truth};
use crate::error::{Error, Result};
use crate::ocv_model::OcvSurface;

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    t_s: f64,
    i_a: f64,
    v_v: f64,
    temp_c: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    t_s: f64,
    soc: f64,
    uc_v: f64,
    soh: f64,
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Input(format!("{}: row {}: {e}", path.display(), p.line())),
        None => input_err(path, e),
    }
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(rdr: R, path: &Path) -> Result<Vec<T>> {
    csv::Reader::from_reader(rdr)
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

fn write_rows<T: Serialize, W: Write>(w: W, rows: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| input_err(path, e))
}

/// Parse the `t_s,i_a,v_v,temp_c` layout.
pub fn parse_samples<R: Read>(rdr: R, path: &Path) -> Result<Vec<Sample>> {
    let rows: Vec<TraceRow> = read_rows(rdr, path)?;
    Ok(rows.into_iter().map(|r| Sample { t: r.t_s, i: r.i_a, v: r.v_v, temp: r.temp_c }).collect())
}

pub fn parse_truth<R: Read>(rdr: R, path: &Path) -> Result<Vec<Truth>> {
    let rows: Vec<TruthRow> = read_rows(rdr, path)?;
    Ok(rows.into_iter().map(|r| Truth { t: r.t_s, soc: r.soc, uc: r.uc_v, soh: r.soh }).collect())
}

/// Load a trace and its optional truth sidecar.
pub fn read_trace(trace: &Path, truth: Option<&Path>) -> Result<CellTrace> {
    let f = File::open(trace).map_err(|e| input_err(trace, e))?;
    let samples = parse_samples(f, trace)?;
    let truth = match truth {
        Some(p) => parse_truth(File::open(p).map_err(|e| input_err(p, e))?, p)?,
        None => Vec::new(),
    };
    let tr = CellTrace { samples, truth, soc_excursion: false };
    if !tr.truth.is_empty() {
        tr.validate().map_err(|e| input_err(trace, e))?;
    } else if tr.samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(input_err(trace, "time column must be strictly increasing"));
    }
    Ok(tr)
}

pub fn write_trace(tr: &CellTrace, trace: &Path, truth: Option<&Path>) -> Result<()> {
    let f = File::create(trace).map_err(|e| input_err(trace, e))?;
    write_rows(f, tr.samples.iter().map(|s| TraceRow { t_s: s.t, i_a: s.i, v_v: s.v, temp_c: s.temp }), trace)?;
    if let Some(p) = truth {
        let f = File::create(p).map_err(|e| input_err(p, e))?;
        write_rows(f, tr.truth.iter().map(|t| TruthRow { t_s: t.t, soc: t.soc, uc_v: t.uc, soh: t.soh }), p)?;
    }
    Ok(())
}

/// Write any serialisable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| input_err(path, e))?;
    write_rows(f, rows, path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| input_err(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| input_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| input_err(path, e))?;
    serde_json::to_writer_pretty(f, value).map_err(|e| input_err(path, e))
}

pub fn read_surface(path: &Path) -> Result<OcvSurface> {
    read_json(path)
}
