use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mimic_core::evaluator::{MetricsReport, DEFAULT_KS};
use mimic_core::trainer::EpochRecord;

use crate::CliError;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A run's history.jsonl.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// One or more metrics JSON files written by `evaluate`.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn report(args: &ReportArgs) -> Result<String, CliError> {
    if args.history.is_none() && args.metrics.is_empty() {
        return Err(CliError::usage("report needs --history and/or --metrics"));
    }
    let history = match &args.history {
        Some(p) => read(p)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<EpochRecord>(l)
                    .map_err(|e| CliError::runtime("parse", format!("{}:{}: {e}", p.display(), i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    let mut metrics = Vec::new();
    for p in &args.metrics {
        let m: MetricsReport =
            serde_json::from_str(&read(p)?).map_err(|e| CliError::runtime("parse", format!("{}: {e}", p.display())))?;
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        metrics.push((label, m));
    }
    Ok(render_report(&history, &metrics))
}

/// Markdown: the per-epoch history table, then one headed metrics table per
/// report with columns H@1, H@3, H@5, H@10, H@20, MRR, MR. Hit rates and MRR
/// are shown as percentages.
pub fn render_report(history: &[EpochRecord], metrics: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    if !history.is_empty() {
        out.push_str("| Epoch | Loss | Valid MRR |\n|---:|---:|---:|\n");
        for r in history {
            let _ = writeln!(out, "| {} | {:.4} | {:.2} |", r.epoch, r.loss, r.val_mrr * 100.0);
        }
    }
    for (label, m) in metrics {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "### {label}\n");
        out.push_str("| H@1 | H@3 | H@5 | H@10 | H@20 | MRR | MR |\n");
        out.push_str("|---:|---:|---:|---:|---:|---:|---:|\n|");
        for k in DEFAULT_KS {
            match m.hit(k) {
                Some(h) => {
                    let _ = write!(out, " {:.2} |", h * 100.0);
                }
                None => out.push_str(" - |"),
            }
        }
        let _ = writeln!(out, " {:.2} | {:.2} |", m.mrr * 100.0, m.mr);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mimic_core::evaluator::compute_metrics;

    #[test]
    fn columns_are_fixed() {
        let m = compute_metrics(&[1, 2, 4], &DEFAULT_KS).unwrap();
        let text = render_report(&[], &[("test".into(), m)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "### test");
        let cols: Vec<&str> = lines[2].split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
        assert_eq!(cols, ["H@1", "H@3", "H@5", "H@10", "H@20", "MRR", "MR"]);
        assert_eq!(lines[4], "| 33.33 | 66.67 | 100.00 | 100.00 | 100.00 | 58.33 | 2.33 |");
    }

    #[test]
    fn history_table() {
        let h = [EpochRecord {
            epoch: 1,
            loss: 2.5,
            val_mrr: 0.5,
        }];
        assert!(render_report(&h, &[]).contains("| 1 | 2.5000 | 50.00 |"));
    }
}
