use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Column headers in table order.
pub const COLUMNS: [&str; 10] = ["Algorithm", "B4", "R", "M", "C", "P", "R", "F1", "Time(min)", "Param(M)"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub algorithm: String,
    pub metrics: MetricReport,
    pub minutes: f64,
    pub params_millions: f64,
}

impl LeaderboardRow {
    fn cells(&self) -> Vec<String> {
        let m = &self.metrics;
        let mut cells = vec![self.algorithm.clone()];
        for v in [m.b4, m.rouge_l, m.meteor, m.cider, m.ce_p, m.ce_r, m.ce_f1, self.minutes, self.params_millions] {
            cells.push(format!("{v:.3}"));
        }
        cells
    }

    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("row serializes")
    }
}

/// Aligned text table and one JSON record per row.
pub fn emit_leaderboard(rows: &[LeaderboardRow]) -> Result<(String, String)> {
    if rows.is_empty() {
        return Err(Error::contract("leaderboard needs at least one row"));
    }
    let body: Vec<Vec<String>> = rows.iter().map(LeaderboardRow::cells).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        parts.join("  ")
    };
    let mut table = line(&COLUMNS);
    table.push('\n');
    for r in &body {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        table.push_str(&line(&cells));
        table.push('\n');
    }
    let mut records = String::new();
    for r in rows {
        records.push_str(&r.to_record());
        records.push('\n');
    }
    Ok((table, records))
}
