//! Report files: `metrics.json` and `feature_distances.csv`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::analysis::FeatureDistanceRecord;

pub const METRICS_FILE: &str = "metrics.json";
pub const DISTANCES_FILE: &str = "feature_distances.csv";
const DISTANCES_HEADER: &str = "sample_id,d_zero_l2,d_imp_l2,d_zero_cos,d_imp_cos";

pub fn write_metrics<T: Serialize>(dir: &Path, summary: &T) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::Serialization(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One row per record. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn write_feature_distances(dir: &Path, records: &[FeatureDistanceRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(DISTANCES_FILE);
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(DISTANCES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id, r.d_zero_l2, r.d_imp_l2, r.d_zero_cos, r.d_imp_cos
        ));
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_feature_distances(path: &Path) -> Result<Vec<FeatureDistanceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(DISTANCES_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{DISTANCES_HEADER}`"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse { line: i + 2, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
            Ok(FeatureDistanceRecord {
                sample_id: f[0].parse().map_err(|_| bad(format!("`{}` is not a sample id", f[0])))?,
                d_zero_l2: num(f[1])?,
                d_imp_l2: num(f[2])?,
                d_zero_cos: num(f[3])?,
                d_imp_cos: num(f[4])?,
                degenerate: false,
            })
        })
        .collect()
}

/// Write both report files into `dir`.
pub fn emit_reports<T: Serialize>(dir: &Path, summary: &T, records: &[FeatureDistanceRecord]) -> Result<()> {
    write_metrics(dir, summary)?;
    write_feature_distances(dir, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, x: f64) -> FeatureDistanceRecord {
        FeatureDistanceRecord {
            sample_id: id,
            d_zero_l2: x,
            d_imp_l2: x / 3.0,
            d_zero_cos: 0.1 + x,
            d_imp_cos: 1.0 / 7.0,
            degenerate: false,
        }
    }

    #[test]
    fn empty_record_list_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        write_feature_distances(dir.path(), &[]).unwrap();
        let text = fs::read_to_string(dir.path().join(DISTANCES_FILE)).unwrap();
        assert_eq!(text, format!("{DISTANCES_HEADER}\n"));
        assert!(read_feature_distances(&dir.path().join(DISTANCES_FILE)).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..628).map(|i| rec(i, i as f64 * 0.013 + 1e-9)).collect();
        emit_reports(dir.path(), &serde_json::json!({"accuracy": 0.5}), &records).unwrap();
        let back = read_feature_distances(&dir.path().join(DISTANCES_FILE)).unwrap();
        assert_eq!(back.len(), 628);
        assert_eq!(back, records);
        assert!(dir.path().join(METRICS_FILE).exists());
    }

    #[test]
    fn io_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_feature_distances(&blocker.join("sub"), &[]).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
