use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Mean and sample standard deviation of final target accuracy over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub pair: String,
    pub mode: String,
    pub finals: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl SummaryTable {
    /// Adds one seed's final accuracy, grouping rows by (method, pair, mode)
    /// in order of first appearance.
    pub fn push(&mut self, method: &str, pair: &str, mode: &str, final_acc: f64) {
        let row = match self
            .rows
            .iter_mut()
            .position(|r| r.method == method && r.pair == pair && r.mode == mode)
        {
            Some(i) => &mut self.rows[i],
            None => {
                self.rows.push(SummaryRow {
                    method: method.into(),
                    pair: pair.into(),
                    mode: mode.into(),
                    finals: Vec::new(),
                    mean: 0.0,
                    std: 0.0,
                });
                self.rows.last_mut().expect("just pushed")
            }
        };
        row.finals.push(final_acc);
        row.mean = mean(&row.finals);
        row.std = sample_std(&row.finals);
    }

    pub fn get(&self, method: &str, pair: &str, mode: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.pair == pair && r.mode == mode)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "pair",
            "mode",
            "seeds",
            "mean_target_acc",
            "std_target_acc",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.pair.clone(),
                r.mode.clone(),
                r.finals.len().to_string(),
                r.mean.to_string(),
                r.std.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let headers = ["method", "pair", "mode", "seeds", "final target acc (%)"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.pair.clone(),
                    r.mode.clone(),
                    r.finals.len().to_string(),
                    format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std),
                ]
            })
            .collect();
        let mut widths = headers.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let padded: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &headers.map(String::from));
        line(&mut out, &widths.map(|w| "-".repeat(w)));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}
