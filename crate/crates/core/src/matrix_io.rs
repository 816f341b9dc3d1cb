//! CSV formats for square node-by-node matrices.
//!
//! Dense: header `sensor_id,<id_1>,...,<id_N>`, then one row per node starting
//! with that node's id. Sparse: header `i,j,weight` with zero-based indices,
//! one row per nonzero entry in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn write_dense(path: &Path, ids: &[String], m: &Array2<f64>) -> Result<()> {
    if m.nrows() != ids.len() || m.ncols() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for a {:?} matrix",
            ids.len(),
            m.dim()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["sensor_id".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dense(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let ids: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let n = ids.len();
    let mut flat = Vec::with_capacity(n * n);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != n + 1 || rec.get(0) != ids.get(rows).map(String::as_str) {
            return Err(Error::Parse {
                line,
                message: "row does not match header ids".into(),
            });
        }
        for v in rec.iter().skip(1) {
            flat.push(v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad matrix entry {v:?}"),
            })?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::ShapeMismatch(format!("{rows} rows for {n} columns")));
    }
    Ok((ids, Array2::from_shape_vec((n, n), flat).expect("checked")))
}

pub fn write_triplets(path: &Path, m: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["i", "j", "weight"])?;
    for ((i, j), v) in m.indexed_iter() {
        if *v != 0.0 {
            w.write_record([i.to_string(), j.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_triplets(path: &Path, n: usize) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let mut m = Array2::zeros((n, n));
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = || Error::Parse {
            line,
            message: "expected i,j,weight".into(),
        };
        let i: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let j: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let v: f64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if i >= n || j >= n {
            return Err(bad());
        }
        m[[i, j]] = v;
    }
    Ok(m)
}
