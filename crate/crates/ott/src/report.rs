//! CSV tables. Every table ends with a `# config_hash=` comment line.

use std::fmt::Write;

use ott_core::theory::TheoryReport;
use ott_core::train::MetricsRow;

pub const METRICS_HEADER: &str = "iteration,train_loss,test_loss,transport_cost,perplexity,wall_ms";

fn footer(out: &mut String, hash: &str) {
    writeln!(out, "# config_hash={hash}").unwrap();
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow], hash: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_HEADER}").unwrap();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.train_loss, r.test_loss, r.transport_cost, r.perplexity, r.wall_ms
        )
        .unwrap();
    }
    footer(&mut out, hash);
    out
}

/// Parses the rows written by [`metrics_csv`], skipping the header and
/// comment lines.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err("missing metrics header".into());
    }
    lines
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(format!("expected 6 fields in {l:?}"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{l:?}: {e}"));
            let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("{l:?}: {e}"));
            Ok(MetricsRow {
                iteration: int(0)?,
                train_loss: num(1)?,
                test_loss: num(2)?,
                transport_cost: num(3)?,
                perplexity: num(4)?,
                wall_ms: int(5)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustTable {
    pub rates: Vec<f64>,
    pub losses: Vec<f64>,
    /// `loss(rate) − loss(0)`.
    pub drops: Vec<f64>,
}

/// One column per rate, rows `loss` and `drop`.
pub fn robust_csv(t: &RobustTable, hash: &str) -> String {
    let mut out = String::from("metric");
    for r in &t.rates {
        write!(out, ",{r}").unwrap();
    }
    out.push('\n');
    for (name, vals) in [("loss", &t.losses), ("drop", &t.drops)] {
        out.push_str(name);
        for v in vals {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    footer(&mut out, hash);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub lambda: f64,
    pub steps: usize,
    pub final_test_loss: Option<f64>,
    pub final_transport_cost: Option<f64>,
    /// Divergence description, if the cell failed.
    pub failure: Option<String>,
}

pub fn ablation_csv(cells: &[AblationCell], hash: &str) -> String {
    let mut out = String::from("lambda,steps,status,final_test_loss,final_transport_cost,failure\n");
    for c in cells {
        let status = if c.failure.is_some() { "diverged" } else { "completed" };
        writeln!(
            out,
            "{},{},{status},{},{},{}",
            c.lambda,
            c.steps,
            opt(c.final_test_loss),
            opt(c.final_transport_cost),
            c.failure.as_deref().unwrap_or("").replace(',', ";")
        )
        .unwrap();
    }
    footer(&mut out, hash);
    out
}

pub fn theory_csv(report: &TheoryReport, hash: &str) -> String {
    let mut out = String::from("suite,passed,cases,worst_slack,certified_constant,lambda\n");
    for s in &report.suites {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.name,
            s.passed,
            s.cases,
            s.worst_slack,
            opt(s.constant),
            opt(s.lambda)
        )
        .unwrap();
    }
    footer(&mut out, hash);
    out
}
