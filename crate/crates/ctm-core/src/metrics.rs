//! Training and evaluation metrics with CSV emission.

use std::fs;
use std::path::Path;

use crate::error::Result;

/// One metrics row: per epoch and split.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_tm: f64,
    pub loss_cr: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn push(&mut self, row: EpochMetrics) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: Metrics) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss_tm,loss_cr,accuracy,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.split, r.loss_tm, r.loss_cr, r.accuracy, r.seconds
            ));
        }
        out
    }

    /// CSV with the wall-clock column stripped; wall-clock is the one
    /// field that legitimately differs between otherwise identical runs,
    /// so determinism comparisons use this form.
    pub fn to_csv_without_time(&self) -> String {
        let mut out = String::from("epoch,split,loss_tm,loss_cr,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.split, r.loss_tm, r.loss_cr, r.accuracy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn best_accuracy(&self, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.accuracy)
            .fold(None, |acc, a| Some(acc.map_or(a, |b: f64| b.max(a))))
    }

    pub fn last_accuracy(&self, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split)
            .map(|r| r.accuracy)
    }
}

/// Two-column CSV for ablation and sweep tables.
pub fn comparison_csv(rows: &[(String, f64)]) -> String {
    let mut out = String::from("config,accuracy\n");
    for (name, acc) in rows {
        out.push_str(&format!("{name},{acc:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_is_stable() {
        let mut m = Metrics::default();
        m.push(EpochMetrics {
            epoch: 0,
            split: "train".to_string(),
            loss_tm: 1.25,
            loss_cr: 0.5,
            accuracy: 0.75,
            seconds: 1.5,
        });
        assert_eq!(
            m.to_csv(),
            "epoch,split,loss_tm,loss_cr,accuracy,seconds\n0,train,1.250000,0.500000,0.750000,1.500\n"
        );
        assert_eq!(
            m.to_csv_without_time(),
            "epoch,split,loss_tm,loss_cr,accuracy\n0,train,1.250000,0.500000,0.750000\n"
        );
        assert_eq!(m.best_accuracy("train"), Some(0.75));
        assert_eq!(m.best_accuracy("eval"), None);
    }

    #[test]
    fn comparison_table_layout() {
        let rows = vec![("aqp".to_string(), 0.9), ("dcmn".to_string(), 0.85)];
        assert_eq!(
            comparison_csv(&rows),
            "config,accuracy\naqp,0.900000\ndcmn,0.850000\n"
        );
    }
}
