//! Metrics sinks: per-client CSV and JSON-lines, round CSV, and the report
//! tables.
//!
//! The client CSV header starts with the fixed columns `run_id, algorithm,
//! client_id, local_acc, global_acc, seed`; `samples` and, for gated
//! algorithms, `mean_g` follow.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::{MetricsRecord, Summary};
use crate::federation::RoundRecord;

pub const FIXED_COLUMNS: [&str; 6] = ["run_id", "algorithm", "client_id", "local_acc", "global_acc", "seed"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_records_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let with_gate = records.iter().any(|r| r.mean_gate.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.push("samples");
    if with_gate {
        header.push("mean_g");
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in records {
        let mut row = vec![
            r.run_id.clone(),
            r.algorithm.clone(),
            opt(r.client_id),
            r.local_acc.to_string(),
            r.global_acc.to_string(),
            r.seed.to_string(),
            opt(r.samples),
        ];
        if with_gate {
            row.push(opt(r.mean_gate));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, column: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::Schema(format!(
            "{} line {line}: column `{column}` has unparsable value `{raw}`",
            path.display()
        ))
    })
}

fn parse_opt<T: std::str::FromStr>(path: &Path, line: u64, column: &str, raw: Option<&str>) -> Result<Option<T>> {
    match raw {
        None | Some("") => Ok(None),
        Some(v) => parse_field(path, line, column, v).map(Some),
    }
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < FIXED_COLUMNS.len() || names[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Schema(format!(
            "{}: header {names:?} does not start with {FIXED_COLUMNS:?}",
            path.display()
        )));
    }
    let samples_col = names.iter().position(|n| *n == "samples");
    let gate_col = names.iter().position(|n| *n == "mean_g");
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = i as u64 + 2;
        let local_acc: f64 = parse_field(path, line, "local_acc", &row[3])?;
        let global_acc: f64 = parse_field(path, line, "global_acc", &row[4])?;
        for (name, v) in [("local_acc", local_acc), ("global_acc", global_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Schema(format!(
                    "{} line {line}: `{name}` = {v} is outside [0, 1]",
                    path.display()
                )));
            }
        }
        out.push(MetricsRecord {
            run_id: row[0].to_string(),
            algorithm: row[1].to_string(),
            client_id: parse_opt(path, line, "client_id", Some(&row[2]))?,
            local_acc,
            global_acc,
            seed: parse_field(path, line, "seed", &row[5])?,
            samples: parse_opt(path, line, "samples", samples_col.and_then(|c| row.get(c)))?,
            mean_gate: parse_opt(path, line, "mean_g", gate_col.and_then(|c| row.get(c)))?,
            timestamp: None,
        });
    }
    Ok(out)
}

pub fn write_records_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Schema(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads either format, chosen by extension.
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => read_records_jsonl(path),
        _ => read_records_csv(path),
    }
}

pub fn write_rounds_csv(path: &Path, rounds: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["round", "sampled_clients", "global_acc"])
        .map_err(|e| csv_err(path, e))?;
    for r in rounds {
        let sampled: Vec<String> = r.sampled.iter().map(|c| c.to_string()).collect();
        w.write_record([r.round.to_string(), sampled.join(" "), r.global_acc.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["algorithm", "clients", "mean_local", "mean_global", "weighted_local", "weighted_global"])
        .map_err(|e| csv_err(path, e))?;
    for r in &summary.rows {
        w.write_record([
            r.algorithm.clone(),
            r.clients.to_string(),
            r.mean_local.to_string(),
            r.mean_global.to_string(),
            opt(r.weighted_local),
            opt(r.weighted_global),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_deltas_csv(path: &Path, summary: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["algorithm", "client_id", "fedavg_local", "delta_local", "delta_global"])
        .map_err(|e| csv_err(path, e))?;
    for d in &summary.deltas {
        w.write_record([
            d.algorithm.clone(),
            d.client_id.to_string(),
            d.fedavg_local.to_string(),
            d.delta_local.to_string(),
            d.delta_global.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text table of the summary, percentages with two decimals.
pub fn render_summary(summary: &Summary, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10}", "algorithm", "clients", "local%", "global%", "w-local%", "w-global%")?;
    let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());
    for r in &summary.rows {
        writeln!(
            out,
            "{:<10} {:>7} {:>10.2} {:>10.2} {:>10} {:>10}",
            r.algorithm,
            r.clients,
            100.0 * r.mean_local,
            100.0 * r.mean_global,
            pct(r.weighted_local),
            pct(r.weighted_global)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alg: &str, client: usize, gate: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            algorithm: alg.into(),
            client_id: Some(client),
            local_acc: 0.25 + client as f64 * 0.1,
            global_acc: 0.5,
            seed: 7,
            samples: Some(10 + client),
            mean_gate: gate,
            timestamp: None,
        }
    }

    #[test]
    fn csv_round_trip_and_gate_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let with = vec![rec("pfl_mf", 0, Some(0.75)), rec("pfl_mf", 1, Some(0.1))];
        write_records_csv(&p, &with).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("run_id,algorithm,client_id,local_acc,global_acc,seed,samples,mean_g\n"));
        assert_eq!(read_records_csv(&p).unwrap(), with);

        let without = vec![rec("pfl_fb", 0, None)];
        write_records_csv(&p, &without).unwrap();
        assert!(!std::fs::read_to_string(&p).unwrap().contains("mean_g"));
        assert_eq!(read_records_csv(&p).unwrap(), without);
    }

    #[test]
    fn wrong_header_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_records_csv(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut recs = vec![rec("local", 3, None)];
        recs[0].timestamp = Some("1700000000".into());
        write_records_jsonl(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
    }
}
