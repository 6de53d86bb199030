use std::collections::BTreeMap;
use std::path::Path;

use czsl::evaluator::{harmonic_mean, MetricsReport, SeedSummary};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub n_p: usize,
    pub k_s: usize,
    pub k_q: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub method: String,
    pub k_s: usize,
    pub summary: SeedSummary,
}

/// One line of a `results.jsonl` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Result(ResultRecord),
    Summary(SummaryRecord),
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: malformed record: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// One table row: means over every result record of a `(method, K_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub method: String,
    pub k_s: usize,
    pub ua: f64,
    pub sa: f64,
    pub hm: f64,
    pub ua_ci95: f64,
    pub sa_ci95: f64,
    pub error_ratio: Option<f64>,
    pub runs: usize,
}

pub fn rows(records: &[Record]) -> Vec<Row> {
    let mut groups: BTreeMap<(String, usize), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        if let Record::Result(r) = r {
            groups.entry((r.method.clone(), r.k_s)).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .map(|((method, k_s), rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&MetricsReport) -> f64| rs.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            let (ua, sa) = (mean(|m| m.ua), mean(|m| m.sa));
            let u_to_s: usize = rs.iter().map(|r| r.metrics.errors.u_to_s).sum();
            let u_to_u: usize = rs.iter().map(|r| r.metrics.errors.u_to_u).sum();
            Row {
                method,
                k_s,
                ua,
                sa,
                hm: harmonic_mean(sa, ua),
                ua_ci95: mean(|m| m.ua_ci95),
                sa_ci95: mean(|m| m.sa_ci95),
                error_ratio: (u_to_u > 0).then(|| u_to_s as f64 / u_to_u as f64),
                runs: rs.len(),
            }
        })
        .collect()
}

pub const HEADER: [&str; 7] = ["method", "K_s", "UA", "SA", "HM", "U->S/U->U", "runs"];

pub fn render_table(records: &[Record]) -> String {
    let mut cells: Vec<[String; 7]> = vec![HEADER.map(str::to_string)];
    for r in rows(records) {
        cells.push([
            r.method,
            r.k_s.to_string(),
            format!("{:.2} ± {:.2}", r.ua, r.ua_ci95),
            format!("{:.2} ± {:.2}", r.sa, r.sa_ci95),
            format!("{:.2}", r.hm),
            r.error_ratio.map_or("undefined".into(), |x| format!("{x:.2}")),
            r.runs.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn cmd_report(paths: &[std::path::PathBuf]) -> Result<String, CliError> {
    if paths.is_empty() {
        return Err(CliError::Config("report needs at least one result file".into()));
    }
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_records(p)?);
    }
    Ok(render_table(&records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use czsl::evaluator::ErrorCounts;

    fn rec(method: &str, seed: u64, ua: f64, sa: f64) -> Record {
        Record::Result(ResultRecord {
            method: method.into(),
            n_p: 5,
            k_s: 5,
            k_q: 5,
            seed,
            metrics: MetricsReport {
                ua,
                sa,
                hm: harmonic_mean(sa, ua),
                ua_ci95: 1.0,
                sa_ci95: 2.0,
                error_ratio: Some(2.0),
                errors: ErrorCounts { u_to_s: 4, u_to_u: 2, u_to_unfeasible: 0 },
                n_episodes: 10,
            },
        })
    }

    #[test]
    fn single_record_gives_single_row() {
        let t = render_table(&[rec("ours", 0, 10.0, 20.0)]);
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("13.33"));
    }

    #[test]
    fn two_methods_share_headers_and_hm_is_recomputed() {
        let recs = [rec("ours", 0, 10.0, 20.0), rec("visprod", 0, 5.0, 30.0), rec("ours", 1, 14.0, 22.0)];
        let t = render_table(&recs);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("method"));
        for r in rows(&recs) {
            assert!((r.hm - 2.0 * r.sa * r.ua / (r.sa + r.ua)).abs() < 1e-12);
        }
        assert_eq!(rows(&recs)[0].runs, 2);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        std::fs::write(&p, "{\"kind\":\"result\"}\n").unwrap();
        assert!(matches!(read_records(&p), Err(CliError::Data(_))));
        assert!(cmd_report(&[]).is_err());
    }
}
