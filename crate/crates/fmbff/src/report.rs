//! CSV and plain-text rendering of metric reports and training history.

use std::fmt::Write as _;

use fmbff_core::metrics::{Metrics, MetricsReport, Summary};
use fmbff_core::train::EpochRecord;

fn columns(with_pr: bool) -> &'static [&'static str] {
    if with_pr {
        &Metrics::NAMES
    } else {
        &Metrics::NAMES[..5]
    }
}

/// Labelled rows: per-image values, then `mean`/`std`, then
/// `fold<k>_mean`/`fold<k>_std` when folds are present.
fn rows(report: &MetricsReport) -> Vec<(String, Metrics)> {
    let mut out = report.per_image.clone();
    let summary = |out: &mut Vec<(String, Metrics)>, prefix: &str, s: &Summary| {
        out.push((format!("{}mean", prefix), s.mean));
        out.push((format!("{}std", prefix), s.std));
    };
    summary(&mut out, "", &report.aggregate);
    for (k, s) in report.folds.iter().flatten().enumerate() {
        summary(&mut out, &format!("fold{}_", k), s);
    }
    out
}

pub fn csv(report: &MetricsReport, with_pr: bool) -> String {
    let cols = columns(with_pr);
    let mut out = format!("id,{}\n", cols.join(","));
    for (id, m) in rows(report) {
        out.push_str(&id);
        for v in &m.values()[..cols.len()] {
            let _ = write!(out, ",{:.6}", v);
        }
        out.push('\n');
    }
    out
}

/// Aligned text table with the same rows as [`csv`].
pub fn table(report: &MetricsReport, with_pr: bool) -> String {
    let cols = columns(with_pr);
    let rows = rows(report);
    let w = rows.iter().map(|(id, _)| id.len()).max().unwrap_or(2).max(2);
    let mut out = format!("{:<w$}", "id");
    for c in cols {
        let _ = write!(out, " {:>8}", c);
    }
    out.push('\n');
    let n_images = report.per_image.len();
    for (i, (id, m)) in rows.iter().enumerate() {
        if i == n_images {
            let _ = writeln!(out, "{}", "-".repeat(w + 9 * cols.len()));
        }
        let _ = write!(out, "{:<w$}", id);
        for v in &m.values()[..cols.len()] {
            let _ = write!(out, " {:>8.4}", v);
        }
        out.push('\n');
    }
    out
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr,val_acc,val_sn,val_sp,val_j,val_d,val_pr,improved\n");
    for r in history {
        let _ = write!(out, "{},{},{}", r.epoch, r.loss, r.lr);
        for v in r.val.values() {
            let _ = write!(out, ",{}", v);
        }
        let _ = writeln!(out, ",{}", u8::from(r.improved));
    }
    out
}
