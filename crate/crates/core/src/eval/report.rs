//! Evaluation reports, result tables and their JSON / CSV / markdown forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::RocPoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub score: f64,
    pub label: u8,
    pub prediction: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    /// `None` when the split holds a single class.
    pub auroc: Option<f64>,
    pub config_hash: String,
    pub records: Vec<SampleRecord>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::arg(format!("unknown format {other:?} (expected json, csv or markdown)"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Percent with two decimals, or a dash.
fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-sample dump. Floats use the shortest representation that parses
    /// back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,score,label,prediction\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", csv_field(&r.id), r.score, r.label, r.prediction);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| split | n | Acc. | AUROC |");
        let _ = writeln!(out, "|---|---:|---:|---:|");
        let _ = writeln!(out, "| {} | {} | {} | {} |", self.split, self.n, pct(Some(self.accuracy)), pct(self.auroc));
        let _ = writeln!(out, "\nconfig hash: `{}`", self.config_hash);
        out
    }

    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.roc {
            let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, opt(p.threshold));
        }
        out
    }

    /// Two-column `key=value` lines for terminals.
    pub fn summary(&self) -> String {
        format!(
            "split={}\nn={}\naccuracy={}\nauroc={}\nconfig_hash={}\n",
            self.split,
            self.n,
            self.accuracy,
            self.auroc.map(|a| a.to_string()).unwrap_or_else(|| "undefined".into()),
            self.config_hash
        )
    }
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let body = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Markdown => report.to_markdown(),
    };
    fs::write(path, body)?;
    Ok(())
}

/// Writes `report.json`, `report.csv`, `report.md` and `roc.csv` into `dir`.
pub fn emit_report_bundle(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    emit_report(report, ReportFormat::Json, &dir.join("report.json"))?;
    emit_report(report, ReportFormat::Csv, &dir.join("report.csv"))?;
    emit_report(report, ReportFormat::Markdown, &dir.join("report.md"))?;
    fs::write(dir.join("roc.csv"), report.roc_csv())?;
    Ok(())
}

/// Parses the per-sample CSV written by [`MetricsReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::arg(format!("report.csv line {}: malformed row", i + 1));
        let mut parts = line.rsplitn(4, ',');
        let prediction = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let label = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let score = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let id = parts.next().ok_or_else(bad)?;
        let id = id
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .map(|s| s.replace("\"\"", "\""))
            .unwrap_or_else(|| id.to_string());
        out.push(SampleRecord {
            id,
            score,
            label,
            prediction,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub config_hash: String,
    /// Checkpoint directory, when one was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub title: String,
    pub split: String,
    pub rows: Vec<TableRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,name,n,accuracy,auroc,config_hash\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                i + 1,
                csv_field(&r.name),
                r.n,
                r.accuracy,
                opt(r.auroc),
                r.config_hash
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {} ({})\n\n| # | Model | Acc. | AUROC |\n|---:|---|---:|---:|\n", self.title, self.split);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "| {} | {} | {} | {} |", i + 1, r.name, pct(Some(r.accuracy)), pct(r.auroc));
        }
        if let Some(note) = &self.note {
            let _ = writeln!(out, "\n{note}");
        }
        out
    }

    /// Writes `table.csv`, `table.md` and `table.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.csv"), self.to_csv())?;
        fs::write(dir.join("table.md"), self.to_markdown())?;
        fs::write(dir.join("table.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport {
            split: "test_unseen".into(),
            n: 2,
            accuracy: 0.5,
            auroc: Some(1.0),
            config_hash: "abc".into(),
            records: vec![
                SampleRecord {
                    id: "a,\"b\"".into(),
                    score: 0.1 + 0.2,
                    label: 1,
                    prediction: 0,
                },
                SampleRecord {
                    id: "c".into(),
                    score: 1.0 / 3.0,
                    label: 0,
                    prediction: 0,
                },
            ],
            roc: vec![],
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let r = report();
        let back = parse_report_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r.records);
    }

    #[test]
    fn json_contains_hash() {
        let v: serde_json::Value = serde_json::from_str(&report().to_json().unwrap()).unwrap();
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(v["n"], 2);
    }

    #[test]
    fn markdown_table_shape() {
        let t = ResultTable {
            title: "Ablation".into(),
            split: "test".into(),
            rows: vec![
                TableRow {
                    name: "x".into(),
                    n: 4,
                    accuracy: 0.7770,
                    auroc: Some(0.8551),
                    config_hash: "h".into(),
                    checkpoint: None,
                };
                4
            ],
            note: None,
        };
        assert_eq!(t.to_csv().lines().count(), 5);
        assert!(t.to_markdown().contains("| 1 | x | 77.70 | 85.51 |"));
    }
}
