use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::harness::noise::NoiseSweepReport;
use crate::harness::train::EpochMetrics;

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc,penalty,sigma_dev\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.penalty, r.sigma_dev
        );
    }
    out
}

pub fn sweep_csv(report: &NoiseSweepReport) -> String {
    let mut out = String::from("model,rho,seed,accuracy\n");
    for c in &report.cells {
        let _ = writeln!(out, "{},{},{},{}", c.model, c.rho, c.seed, c.accuracy);
    }
    out
}

pub fn sweep_json(report: &NoiseSweepReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}
