//! Metric files.
//!
//! `metrics.csv`, one row per epoch:
//! `epoch,lr,train_loss,l_kd,l_ohkd_head1..D,head1_acc..headD_acc,test_acc`.
//! Losses are epoch means over training steps. Head accuracies are epoch means
//! of student-head top-1 accuracy on training batches. `test_acc` is final
//! student top-1 accuracy on the test split. Runs without heads have no head
//! columns; supervised runs report `l_kd = 0`.
//!
//! `steps.csv`, one row per optimizer step, holds the full loss decomposition.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mhkd::train::{EpochRecord, StepRecord};

pub fn metrics_header(num_heads: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "lr", "train_loss", "l_kd"].map(String::from).to_vec();
    h.extend((1..=num_heads).map(|j| format!("l_ohkd_head{j}")));
    h.extend((1..=num_heads).map(|j| format!("head{j}_acc")));
    h.push("test_acc".into());
    h
}

pub fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let heads = history.first().map_or(0, |r| r.l_ohkd.len());
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(metrics_header(heads))?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.lr.to_string(), r.train_loss.to_string(), r.l_kd.to_string()];
        row.extend(r.l_ohkd.iter().map(f64::to_string));
        row.extend(r.head_acc.iter().map(f64::to_string));
        row.push(r.test_acc.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_steps(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let heads = steps.first().map_or(0, |s| s.report.per_head.len());
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> =
        ["epoch", "step", "lr", "l_mhkd", "l_kd", "l_kl_final", "l_ce_final"].map(String::from).to_vec();
    for j in 1..=heads {
        header.extend([
            format!("l_kl_head{j}"),
            format!("l_ce_head{j}"),
            format!("l_ohkd_head{j}"),
            format!("head{j}_acc"),
            format!("teacher_head{j}_ce"),
        ]);
    }
    w.write_record(&header)?;
    for s in steps {
        let r = &s.report;
        let mut row = vec![
            s.epoch.to_string(),
            s.step.to_string(),
            s.lr.to_string(),
            r.l_mhkd.to_string(),
            r.l_kd.to_string(),
            r.l_kl_final.to_string(),
            r.l_ce_final.to_string(),
        ];
        for j in 0..heads {
            let h = &r.per_head[j];
            row.extend([h.l_kl, h.l_ce, h.l_ohkd, r.head_accuracies[j], r.teacher_head_ce[j]].map(|v| v.to_string()));
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed numeric CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>().with_context(|| format!("{}: row {}: bad number {v:?}", path.display(), i + 2))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            bail!("{}: no data rows", path.display());
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn columns_with_prefix(&self, prefix: &str) -> Vec<(String, Vec<f64>)> {
        self.header
            .iter()
            .filter(|h| h.starts_with(prefix))
            .map(|h| (h.clone(), self.column(h).expect("listed column")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_schema() {
        assert_eq!(
            metrics_header(2).join(","),
            "epoch,lr,train_loss,l_kd,l_ohkd_head1,l_ohkd_head2,head1_acc,head2_acc,test_acc"
        );
        assert_eq!(metrics_header(0).join(","), "epoch,lr,train_loss,l_kd,test_acc");
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rec = EpochRecord {
            epoch: 0,
            lr: 0.05,
            train_loss: 1.25,
            l_kd: 0.5,
            l_ohkd: vec![0.1],
            head_acc: vec![0.3],
            test_acc: 0.75,
            ..Default::default()
        };
        write_metrics(&path, &[rec]).unwrap();
        let t = Table::read(&path).unwrap();
        assert_eq!(t.column("test_acc"), Some(vec![0.75]));
        assert_eq!(t.columns_with_prefix("l_ohkd_head").len(), 1);
    }
}
