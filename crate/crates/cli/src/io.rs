//! CSV and JSON input/output.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use matchmarket::{MarketInstance, WeightDistribution};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Formats a float with at most 9 significant digits, dropping trailing zeros.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    let s = rounded.to_string();
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

/// Reads an instance: one row of side-M user `i` per line, comma separated,
/// no header. Blank lines and lines starting with `#` are skipped.
pub fn read_instance_csv(path: &Path) -> Result<MarketInstance> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read instance {}", path.display()))?;
    parse_instance_csv(&text).with_context(|| format!("malformed instance {}", path.display()))
}

pub fn parse_instance_csv(text: &str) -> Result<MarketInstance> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split(',')
            .enumerate()
            .map(|(c, field)| {
                let field = field.trim();
                field
                    .parse::<f64>()
                    .map_err(|_| anyhow!("line {line}, column {}: cannot parse {field:?} as a number", c + 1))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!("line {line}: expected {} fields like line {}, found {}", first.len(), lines[0], row.len());
            }
        }
        rows.push(row);
        lines.push(line);
    }
    if rows.is_empty() {
        bail!("instance has no rows");
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                bail!("line {}, column {}: weight {v} outside [0, 1]", lines[r], c + 1);
            }
        }
    }
    Ok(MarketInstance::from_rows(&rows)?)
}

/// Writes an instance with shortest round-trip formatting so that reading it
/// back yields the identical instance.
pub fn write_instance_csv(path: &Path, inst: &MarketInstance) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in inst.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Optional sidecar `<instance>.json` recording where an instance came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMeta {
    pub m: usize,
    pub n: usize,
    pub distribution: WeightDistribution,
    pub seed: u64,
    pub trial: u64,
}

pub fn sidecar_path(instance: &Path) -> std::path::PathBuf {
    instance.with_extension("json")
}

pub fn read_sidecar(instance: &Path) -> Result<Option<InstanceMeta>> {
    let path = sidecar_path(instance);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a matrix without header.
pub fn write_matrix_csv(path: &Path, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in rows {
        w.write_record(row.iter().map(|&v| fmt_sig(v)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.1815), "0.1815");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(2.0), "2");
        assert_eq!(fmt_sig(123456789.49), "123456789");
        assert_eq!(fmt_sig(-0.0), "0");
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_instance_csv("0.1,0.2\n0.3,x\n").unwrap_err();
        assert!(err.to_string().contains("line 2, column 2"), "{err}");
        let err = parse_instance_csv("0.1,0.2\n\n# note\n0.3\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        let err = parse_instance_csv("0.1,1.2\n").unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"), "{err}");
        assert!(parse_instance_csv("# only a comment\n").is_err());
    }

    #[test]
    fn parse_accepts_comments_and_spaces() {
        let inst = parse_instance_csv("# w\n1.0, 0\n 0 ,1\n").unwrap();
        assert_eq!(inst.rows(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn instance_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let inst = matchmarket::InstanceSampler::beta(2.0, 2.0, 3).unwrap().sample(4, 6).unwrap();
        write_instance_csv(&path, &inst).unwrap();
        assert_eq!(read_instance_csv(&path).unwrap(), inst);
    }
}
