use std::fmt::Write as _;
use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use hpn_core::stats::paired_t_test_one_sided;
use serde::{Deserialize, Serialize};

/// First line of every per-instance CSV file.
pub const CSV_VERSION_LINE: &str = "# hpn-bench per-instance results v1";

/// One row of the per-instance CSV: `method,n,instance_id,length,seconds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub method: String,
    pub n: usize,
    pub instance_id: usize,
    pub length: f64,
    pub seconds: f64,
}

pub fn write_results<W: Write>(mut w: W, rows: &[InstanceResult]) -> Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    if rows.is_empty() {
        csv.write_record(["method", "n", "instance_id", "length", "seconds"])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(r: R) -> Result<Vec<InstanceResult>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["method", "n", "instance_id", "length", "seconds"] {
        bail!("unexpected CSV header {:?}", header);
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("CSV record {}", i + 1)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub n: usize,
    pub count: usize,
    pub mean_length: f64,
    /// Mean length in the input's original units, for normalized TSPLIB
    /// inputs.
    pub mean_denormalized: Option<f64>,
    pub total_seconds: f64,
}

/// p-value for "`better` has shorter tours than `than`", paired by
/// instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTest {
    pub better: String,
    pub than: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
    pub tests: Vec<PairwiseTest>,
}

impl BenchReport {
    /// Aggregates per-instance results, methods in first-seen order.
    /// `scale` converts normalized lengths back to original units.
    pub fn from_results(results: &[InstanceResult], scale: Option<f64>) -> Self {
        let mut methods: Vec<&str> = Vec::new();
        for r in results {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let by_method = |m: &str| {
            let mut v: Vec<&InstanceResult> = results.iter().filter(|r| r.method == m).collect();
            v.sort_by_key(|r| r.instance_id);
            v
        };
        let rows = methods
            .iter()
            .map(|&m| {
                let rs = by_method(m);
                let mean = rs.iter().map(|r| r.length).sum::<f64>() / rs.len() as f64;
                ReportRow {
                    method: m.to_string(),
                    n: rs[0].n,
                    count: rs.len(),
                    mean_length: mean,
                    mean_denormalized: scale.map(|s| mean * s),
                    total_seconds: rs.iter().map(|r| r.seconds).sum(),
                }
            })
            .collect();
        let mut tests = Vec::new();
        for &a in &methods {
            for &b in &methods {
                if a == b {
                    continue;
                }
                let (ra, rb) = (by_method(a), by_method(b));
                let paired = ra.len() == rb.len()
                    && ra.iter().zip(&rb).all(|(x, y)| x.instance_id == y.instance_id);
                if !paired {
                    continue;
                }
                let la: Vec<f64> = ra.iter().map(|r| r.length).collect();
                let lb: Vec<f64> = rb.iter().map(|r| r.length).collect();
                if let Ok(p) = paired_t_test_one_sided(&la, &lb) {
                    tests.push(PairwiseTest {
                        better: a.to_string(),
                        than: b.to_string(),
                        p_value: p,
                    });
                }
            }
        }
        Self { rows, tests }
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let denorm = self.rows.iter().any(|r| r.mean_denormalized.is_some());
        write!(s, "{:<width$}  {:>5}  {:>6}  {:>10}", "method", "n", "count", "obj").unwrap();
        if denorm {
            write!(s, "  {:>14}", "obj (raw)").unwrap();
        }
        writeln!(s, "  {:>10}", "time (s)").unwrap();
        for r in &self.rows {
            write!(s, "{:<width$}  {:>5}  {:>6}  {:>10.4}", r.method, r.n, r.count, r.mean_length).unwrap();
            if let Some(d) = r.mean_denormalized {
                write!(s, "  {d:>14.2}").unwrap();
            }
            writeln!(s, "  {:>10.3}", r.total_seconds).unwrap();
        }
        if !self.tests.is_empty() {
            writeln!(s, "\none-sided paired t-test, p-value that the first is shorter:").unwrap();
            for t in &self.tests {
                writeln!(s, "  {} < {}: {:.4e}", t.better, t.than, t.p_value).unwrap();
            }
        }
        s
    }
}
