//! CSV emission for round histories and multi-seed summaries.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! value read back from the CSV compares equal to the in-memory one.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::runtime::{Mode, RoundMetrics};

pub const CSV_HEADER: &str = "run_id,mode,round,client_id,task_loss_t,task_loss_s,rep_loss,ddl_rep,ddl_dec_t,ddl_dec_s,test_acc,weighted_acc,upload_bytes,download_bytes,comm_ratio";

pub const SUMMARY_HEADER: &str =
    "mode,n_seeds,final_acc_mean,final_acc_std,comm_ratio_mean,comm_ratio_std,upload_bytes_mean,upload_bytes_std";

/// One run's history tagged with its id and mode.
#[derive(Debug, Clone)]
pub struct RunHistory {
    pub run_id: String,
    pub mode: Mode,
    pub rounds: Vec<RoundMetrics>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Client rows followed by one aggregate row (client_id = -1) per round.
pub fn render_csv(runs: &[RunHistory]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for run in runs {
        for m in &run.rounds {
            for c in &m.clients {
                let l = c.losses;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},,{},{},{}",
                    run.run_id,
                    run.mode,
                    m.round,
                    c.client_id,
                    opt(l.map(|l| l.task_t)),
                    opt(l.map(|l| l.task_s)),
                    opt(l.map(|l| l.rep)),
                    opt(l.map(|l| l.dec_r)),
                    opt(l.map(|l| l.dec_d_t)),
                    opt(l.map(|l| l.dec_d_s)),
                    c.test_acc,
                    c.upload_bytes,
                    c.download_bytes,
                    opt(c.upload_ratio),
                );
            }
            let l = m.mean_losses();
            let mean_acc = if m.clients.is_empty() {
                None
            } else {
                Some(m.clients.iter().map(|c| c.test_acc).sum::<f64>() / m.clients.len() as f64)
            };
            let _ = writeln!(
                out,
                "{},{},{},-1,{},{},{},{},{},{},{},{},{},{},{}",
                run.run_id,
                run.mode,
                m.round,
                opt(l.map(|l| l.task_t)),
                opt(l.map(|l| l.task_s)),
                opt(l.map(|l| l.rep)),
                opt(l.map(|l| l.dec_r)),
                opt(l.map(|l| l.dec_d_t)),
                opt(l.map(|l| l.dec_d_s)),
                opt(mean_acc),
                m.weighted_acc,
                m.upload_bytes,
                m.download_bytes,
                m.comm_ratio,
            );
        }
    }
    out
}

pub fn emit_metrics(runs: &[RunHistory], path: &Path) -> Result<()> {
    if runs.iter().all(|r| r.rounds.is_empty()) {
        return Err(Error::Contract("cannot emit an empty history".into()));
    }
    fs::write(path, render_csv(runs))?;
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final weighted accuracy, overall comm ratio and total upload bytes of a run.
pub fn run_totals(rounds: &[RoundMetrics]) -> (f64, f64, f64) {
    let acc = rounds.last().map_or(f64::NAN, |m| m.weighted_acc);
    let transmitted: usize = rounds.iter().map(|m| m.transmitted).sum();
    let full: usize = rounds.iter().map(|m| m.full).sum();
    let ratio = if full == 0 { 0.0 } else { transmitted as f64 / full as f64 };
    let up: usize = rounds.iter().map(|m| m.upload_bytes).sum();
    (acc, ratio, up as f64)
}

/// One summary row per mode, in first-seen order.
pub fn render_summary(runs: &[RunHistory]) -> String {
    let mut modes: Vec<Mode> = Vec::new();
    for r in runs {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for mode in modes {
        let totals: Vec<(f64, f64, f64)> =
            runs.iter().filter(|r| r.mode == mode).map(|r| run_totals(&r.rounds)).collect();
        let (am, asd) = mean_std(&totals.iter().map(|t| t.0).collect::<Vec<_>>());
        let (cm, csd) = mean_std(&totals.iter().map(|t| t.1).collect::<Vec<_>>());
        let (um, usd) = mean_std(&totals.iter().map(|t| t.2).collect::<Vec<_>>());
        let _ = writeln!(out, "{mode},{},{am},{asd},{cm},{csd},{um},{usd}", totals.len());
    }
    out
}

pub fn emit_summary(runs: &[RunHistory], path: &Path) -> Result<()> {
    fs::write(path, render_summary(runs))?;
    Ok(())
}
