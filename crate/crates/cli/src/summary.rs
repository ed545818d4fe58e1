//! Per-domain mean accuracy tables over a results store.

use std::collections::BTreeMap;

use peft_forge::analysis::{mean_ci95, MeanCi};
use serde::Serialize;

use crate::error::CliError;
use crate::store::StoredReport;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub spec: String,
    pub algorithm: String,
    /// One cell per domain of the table, `None` when the method has no episodes there.
    pub cells: Vec<Option<MeanCi>>,
}

/// Rows are methods, columns are domains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub domains: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

pub fn summarize(records: &[StoredReport]) -> SummaryTable {
    let mut groups: BTreeMap<(String, String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut domains: Vec<String> = Vec::new();
    for r in records {
        let algorithm = serde_json::to_value(r.report.algorithm).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let key = (r.experiment.clone(), r.report.spec.clone(), algorithm);
        groups.entry(key).or_default().entry(r.report.domain.clone()).or_default().push(r.report.accuracy);
        if !domains.contains(&r.report.domain) {
            domains.push(r.report.domain.clone());
        }
    }
    domains.sort();
    let rows = groups
        .into_iter()
        .map(|((experiment, spec, algorithm), by_domain)| SummaryRow {
            experiment,
            spec,
            algorithm,
            cells: domains.iter().map(|d| by_domain.get(d).map(|v| mean_ci95(v))).collect(),
        })
        .collect();
    SummaryTable { domains, rows }
}

impl SummaryTable {
    /// `experiment,spec,algorithm` then `<domain>_mean,<domain>_ci95,<domain>_n` per domain.
    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["experiment".to_string(), "spec".into(), "algorithm".into()];
        for d in &self.domains {
            header.extend([format!("{d}_mean"), format!("{d}_ci95"), format!("{d}_n")]);
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.experiment.clone(), r.spec.clone(), r.algorithm.clone()];
            for c in &r.cells {
                match c {
                    Some(m) => rec.extend([m.mean.to_string(), m.ci95.to_string(), m.n.to_string()]),
                    None => rec.extend([String::new(), String::new(), "0".into()]),
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Fixed-width text table in percent, `mean ± ci95`.
    pub fn to_text(&self) -> String {
        let label = |r: &SummaryRow| format!("{} {} ({})", r.experiment, r.spec, r.algorithm);
        let width = self.rows.iter().map(|r| label(r).len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:width$}", "method");
        for d in &self.domains {
            out.push_str(&format!("  {d:>16}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:width$}", label(r)));
            for c in &r.cells {
                let cell = match c {
                    Some(m) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.ci95),
                    None => "-".into(),
                };
                out.push_str(&format!("  {cell:>16}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(format!("csv: {e}"))
}
