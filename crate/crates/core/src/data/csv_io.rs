//! Long-format CSV: one row per `(sample, time step)`.
//!
//! Header: `sample_id,time,<modality columns...>,label`. An empty field is a
//! missing cell.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::MultimodalSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Column names of each modality, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub modalities: Vec<Vec<String>>,
}

impl CsvSchema {
    /// Columns named `m<i>_f<j>`.
    pub fn numbered(modalities: usize, features: usize) -> Self {
        CsvSchema {
            modalities: (0..modalities)
                .map(|m| (0..features).map(|f| format!("m{m}_f{f}")).collect())
                .collect(),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["sample_id".to_string(), "time".to_string()];
        h.extend(self.modalities.iter().flatten().cloned());
        h.push("label".into());
        h
    }

    fn width(&self) -> usize {
        self.modalities.iter().map(Vec::len).sum::<usize>() + 3
    }
}

struct Pending {
    id: u64,
    label: usize,
    rows: Vec<Vec<Option<f64>>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<MultimodalSample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Vec<MultimodalSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or(Error::Parse { line: 1, msg: "empty file".into() })?
        .map_err(|e| csv_err(e, 1))?;
    let expected = schema.header();
    if header.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header does not match schema; expected {}", expected.join(",")),
        });
    }

    let mut done: Vec<MultimodalSample> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<Pending> = None;
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(e, line))?;
        if rec.len() != schema.width() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", schema.width(), rec.len()),
            });
        }
        let id: u64 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("unknown sample id `{}`", &rec[0]),
        })?;
        let time: usize = rec[1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad time index `{}`", &rec[1]),
        })?;
        let label: usize = rec[rec.len() - 1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label `{}`", &rec[rec.len() - 1]),
        })?;
        let mut cells = Vec::with_capacity(rec.len() - 3);
        for field in rec.iter().skip(2).take(rec.len() - 3) {
            let field = field.trim();
            if field.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric cell `{field}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("non-finite cell `{field}`") });
                }
                cells.push(Some(v));
            }
        }

        if current.as_ref().is_some_and(|p| p.id != id) {
            done.push(finish(current.take().unwrap(), schema));
        }
        let pending = match current.as_mut() {
            Some(p) => p,
            None => {
                if !seen.insert(id) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("rows for sample {id} are not contiguous"),
                    });
                }
                current.insert(Pending { id, label, rows: Vec::new() })
            }
        };
        if time != pending.rows.len() {
            return Err(Error::Parse {
                line,
                msg: format!("sample {id}: expected time {}, found {time}", pending.rows.len()),
            });
        }
        if label != pending.label {
            return Err(Error::Parse {
                line,
                msg: format!("sample {id}: label changes from {} to {label}", pending.label),
            });
        }
        pending.rows.push(cells);
    }
    if let Some(p) = current {
        done.push(finish(p, schema));
    }
    Ok(done)
}

fn csv_err(e: csv::Error, line: usize) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }
}

fn finish(p: Pending, schema: &CsvSchema) -> MultimodalSample {
    let l = p.rows.len();
    let mut modalities = Vec::new();
    let mut masks = Vec::new();
    let mut off = 0;
    for cols in &schema.modalities {
        let f = cols.len();
        let mut x = vec![0.0; l * f];
        let mut r = vec![0.0; l * f];
        for (t, row) in p.rows.iter().enumerate() {
            for c in 0..f {
                if let Some(v) = row[off + c] {
                    x[t * f + c] = v;
                    r[t * f + c] = 1.0;
                }
            }
        }
        modalities.push(Tensor::matrix(l, f, x).expect("shape"));
        masks.push(Tensor::matrix(l, f, r).expect("shape"));
        off += f;
    }
    let present = masks.iter().map(|r| r.data().iter().any(|&v| v != 0.0)).collect();
    MultimodalSample {
        id: p.id,
        modalities,
        label: p.label,
        present,
        masks,
        ground_truth: None,
    }
}

/// Write samples in the long format; unobserved cells become empty fields.
pub fn write_csv(path: impl AsRef<Path>, samples: &[MultimodalSample], schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(schema.header()).map_err(io)?;
    for s in samples {
        if s.num_modalities() != schema.modalities.len() {
            return Err(Error::shape("write_csv", format!("sample {} does not match schema", s.id)));
        }
        for t in 0..s.len_ts() {
            let mut row = vec![s.id.to_string(), t.to_string()];
            for (x, r) in s.modalities.iter().zip(&s.masks) {
                for c in 0..x.cols() {
                    row.push(if r.get2(t, c) == 0.0 {
                        String::new()
                    } else {
                        format!("{}", x.get2(t, c))
                    });
                }
            }
            row.push(s.label.to_string());
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
