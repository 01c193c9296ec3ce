use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,ce,kd,picd,nicd,total,train_acc,test_acc,bank_checksum,wall_ms";

/// Numeric series of a metrics file, in column order.
pub const METRIC_SERIES: [&str; 8] = ["ce", "kd", "picd", "nicd", "total", "train_acc", "test_acc", "wall_ms"];

/// Per-epoch means over all training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce: f64,
    pub kd: f64,
    pub picd: f64,
    pub nicd: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// 0 when no bank exists for this run.
    pub bank_checksum: u64,
    pub wall_ms: u64,
}

impl EpochMetrics {
    pub fn series(&self) -> [f64; 8] {
        [
            self.ce,
            self.kd,
            self.picd,
            self.nicd,
            self.total,
            self.train_acc,
            self.test_acc,
            self.wall_ms as f64,
        ]
    }
}

/// Per-batch means, kept for the loss decomposition check.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub ce: f64,
    pub kd: f64,
    pub picd: f64,
    pub nicd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub final_test_acc: f64,
    pub bank_builds: usize,
    pub picd_evaluations: usize,
    pub nicd_evaluations: usize,
    pub negative_retrievals: usize,
}

impl RunMetrics {
    /// CSV with one row per epoch and a trailing `#final` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:016x},{}",
                e.epoch, e.ce, e.kd, e.picd, e.nicd, e.total, e.train_acc, e.test_acc, e.bank_checksum, e.wall_ms
            )
            .unwrap();
        }
        writeln!(
            out,
            "#final,test_acc={},bank_builds={},picd_evaluations={},nicd_evaluations={},negative_retrievals={}",
            self.final_test_acc,
            self.bank_builds,
            self.picd_evaluations,
            self.nicd_evaluations,
            self.negative_retrievals
        )
        .unwrap();
        out
    }
}

/// Reads the per-epoch rows of a metrics file; `#` lines are skipped.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        Some((n, h)) => return Err(Error::invalid(format!("line {}: unexpected header {h:?}", n + 1))),
        None => return Err(Error::invalid("empty metrics file")),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        let bad = |what: &str| Error::invalid(format!("line {}: {what}", n + 1));
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 10 {
            return Err(bad(&format!("expected 10 columns, found {}", cols.len())));
        }
        let f = |i: usize| {
            cols[i]
                .parse::<f64>()
                .map_err(|_| bad(&format!("bad number {:?}", cols[i])))
        };
        out.push(EpochMetrics {
            epoch: cols[0].parse().map_err(|_| bad("bad epoch"))?,
            ce: f(1)?,
            kd: f(2)?,
            picd: f(3)?,
            nicd: f(4)?,
            total: f(5)?,
            train_acc: f(6)?,
            test_acc: f(7)?,
            bank_checksum: u64::from_str_radix(cols[8], 16).map_err(|_| bad("bad checksum"))?,
            wall_ms: cols[9].parse().map_err(|_| bad("bad wall_ms"))?,
        });
    }
    Ok(out)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
