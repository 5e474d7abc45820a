//! Append-only training metrics, one CSV row per (epoch, split).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,split,mae,aug_mae,sep_gap,lr,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub mae: f64,
    pub aug_mae: Option<f64>,
    pub sep_gap: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.mae,
            opt(self.aug_mae),
            opt(self.sep_gap),
            self.lr,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    /// Rows for one split, in epoch order.
    pub fn split_rows(&self, split: &str) -> Vec<&MetricsRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
