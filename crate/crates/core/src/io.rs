//! File formats: grouped-data CSV, trace and per-point CSVs, and JSON with a
//! reproducibility stamp.
//!
//! Every file starts with (CSV) or contains (JSON) the config hash and seed
//! of the run that produced it. CSV stamps are `#` comment lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluate::PointPrediction;
use crate::linalg::Matrix;
use crate::model::GroupedDataset;
use crate::optimizer::TraceRecord;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputStamp {
    pub config_hash: String,
    pub seed: u64,
}

impl OutputStamp {
    pub fn header_line(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// Writes through a sibling temporary file so a failed run never leaves a
/// truncated output behind.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(std::fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        Error::Csv(c) => Error::Data(format!("{}: {c}", path.display())),
        Error::Json(j) => Error::Data(format!("{}: {j}", path.display())),
        other => other,
    })
}

/// `group,y,x1..xJ` with `x1` the offset column and 1-based group ids.
pub fn write_dataset_csv<T: Real>(path: &Path, data: &GroupedDataset<T>, stamp: &OutputStamp) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", stamp.header_line())?;
        let mut header = vec!["group".to_string(), "y".to_string()];
        header.extend((1..=data.n_inputs()).map(|j| format!("x{j}")));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..data.n() {
            write!(w, "{},{}", data.groups()[i], data.y()[i].as_f64())?;
            for &v in data.x().row(i) {
                write!(w, ",{}", v.as_f64())?;
            }
            writeln!(w)?;
        }
        Ok(())
    })
}

pub fn read_dataset_csv(path: &Path) -> Result<GroupedDataset<f64>> {
    with_path(path, read_dataset_inner(path))
}

fn read_dataset_inner(path: &Path) -> Result<GroupedDataset<f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "group" || cols[1] != "y" {
        return Err(Error::Data("header must be group,y,x1,...,xJ".into()));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{}", j + 1) {
            return Err(Error::Data(format!("column {} is `{c}`, expected `x{}`", j + 3, j + 1)));
        }
    }
    let width = cols.len() - 2;
    let (mut y, mut x, mut g) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(r + 2, |p| p.line() as usize);
        if rec.len() != width + 2 {
            return Err(Error::Data(format!("line {line}: expected {} fields, found {}", width + 2, rec.len())));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("line {line}: cannot parse `{s}` as a number")))
        };
        let group: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: group `{}` is not a positive integer", &rec[0])))?;
        g.push(group);
        y.push(parse(&rec[1])?);
        for v in rec.iter().skip(2) {
            x.push(parse(v)?);
        }
    }
    let n = y.len();
    GroupedDataset::new(y, Matrix::from_row_major(n, width, x)?, g)
}

pub fn write_trace_csv(path: &Path, records: &[TraceRecord], stamp: &OutputStamp) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", stamp.header_line())?;
        writeln!(w, "step,elapsed_s,noisy_elbo")?;
        for r in records {
            writeln!(w, "{},{},{}", r.step, r.elapsed_s, r.noisy_elbo)?;
        }
        Ok(())
    })
}

pub fn write_points_csv(path: &Path, points: &[PointPrediction], stamp: &OutputStamp) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", stamp.header_line())?;
        writeln!(w, "i,group,y,y_hat,p_hat")?;
        for p in points {
            writeln!(w, "{},{},{},{},{}", p.i, p.group, p.y, p.y_hat, p.p_hat)?;
        }
        Ok(())
    })
}

pub fn read_points_csv(path: &Path) -> Result<Vec<PointPrediction>> {
    with_path(path, (|| {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let rows: std::result::Result<Vec<PointPrediction>, csv::Error> = rdr.deserialize().collect();
        Ok(rows?)
    })())
}

/// Pretty JSON of `value` (which must serialize to an object) with
/// `config_hash` and `seed` fields added.
pub fn write_json<S: Serialize>(path: &Path, value: &S, stamp: &OutputStamp) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Data("only JSON objects can carry a stamp".into()))?;
    obj.insert("config_hash".into(), stamp.config_hash.clone().into());
    obj.insert("seed".into(), stamp.seed.into());
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, &v)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    with_path(path, (|| {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    })())
}

/// Removes the `config_hash`/`seed` stamp from a JSON object.
pub fn strip_stamp(mut v: serde_json::Value) -> (serde_json::Value, Option<OutputStamp>) {
    let stamp = v.as_object_mut().and_then(|o| {
        let h = o.remove("config_hash")?;
        let s = o.remove("seed")?;
        Some(OutputStamp {
            config_hash: h.as_str()?.to_string(),
            seed: s.as_u64()?,
        })
    });
    (v, stamp)
}
