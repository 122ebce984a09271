//! Metric records, text tables and the consolidated run report.

use std::fmt::Write as _;
use std::path::Path;

use msn_core::downstream::{LowShotRow, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_TXT: &str = "metrics.txt";
pub const LOWSHOT_CSV: &str = "lowshot.csv";
pub const REPORT_FILE: &str = "report.md";

/// Test-split scores of one protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub protocol: String,
    pub split: String,
    pub macro_f1: f64,
    pub video_f1: Option<f64>,
    pub per_class_f1: Vec<Option<f64>>,
    pub n_samples: usize,
    pub val_macro_f1: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn new(protocol: &str, report: &MetricsReport, val_macro_f1: f64, best_epoch: usize, seed: u64) -> Self {
        Self {
            protocol: protocol.into(),
            split: "test".into(),
            macro_f1: report.macro_f1,
            video_f1: report.video_f1,
            per_class_f1: report.per_class_f1.clone(),
            n_samples: report.n_samples,
            val_macro_f1,
            best_epoch,
            seed,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn metrics_table(r: &MetricsRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9} {:>6} {:>8}", "protocol", "macro_f1", "video_f1", "val_f1", "epoch", "frames");
    let _ = writeln!(
        s,
        "{:<10} {:>9.4} {:>9} {:>9.4} {:>6} {:>8}",
        r.protocol,
        r.macro_f1,
        opt(r.video_f1),
        r.val_macro_f1,
        r.best_epoch,
        r.n_samples
    );
    let per_class: Vec<String> = r.per_class_f1.iter().enumerate().map(|(c, f)| format!("{c}:{}", opt(*f))).collect();
    let _ = writeln!(s, "per-class F1  {}", per_class.join("  "));
    s
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes `metrics.jsonl` and `metrics.txt` into `dir` and returns the table.
pub fn write_metrics(dir: &Path, record: &MetricsRecord) -> Result<String, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    write(&dir.join(METRICS_JSONL), &line)?;
    let table = metrics_table(record);
    write(&dir.join(METRICS_TXT), &table)?;
    Ok(table)
}

pub fn read_metrics(dir: &Path) -> Result<Option<MetricsRecord>, CliError> {
    let path = dir.join(METRICS_JSONL);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or("");
    serde_json::from_str(first)
        .map(Some)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn lowshot_table(rows: &[LowShotRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>9} {:>7} {:>9} {:>8}", "fraction", "videos", "mean_f1", "std_f1");
    for r in rows {
        let _ = writeln!(s, "{:>9.2} {:>7} {:>9.4} {:>8.4}", r.fraction, r.n_videos, r.mean_f1, r.std_f1);
    }
    s
}

/// Markdown summary of every protocol found under `run_dir`.
pub fn consolidated(run_dir: &Path) -> Result<String, CliError> {
    let protocols = [("probe", "frame (linear probe)"), ("finetune", "frame (fine-tune)"), ("temporal", "temporal (MS-TCN)")];
    let mut found = Vec::new();
    for (dir, label) in protocols {
        if let Some(r) = read_metrics(&run_dir.join(dir))? {
            found.push((dir, label, r));
        }
    }
    let lowshot_path = run_dir.join("lowshot").join(LOWSHOT_CSV);
    let lowshot = lowshot_path
        .exists()
        .then(|| std::fs::read_to_string(&lowshot_path))
        .transpose()
        .map_err(|e| CliError::Io(format!("{}: {e}", lowshot_path.display())))?;
    if found.is_empty() && lowshot.is_none() {
        return Err(CliError::Io(format!("no results under {}", run_dir.display())));
    }

    let mut s = format!("# Run report: {}\n\n", run_dir.display());
    if !found.is_empty() {
        s.push_str("| protocol | test F-F1 | test V-F1 | val F-F1 | best epoch | frames |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for (_, label, r) in &found {
            let _ = writeln!(
                s,
                "| {label} | {:.4} | {} | {:.4} | {} | {} |",
                r.macro_f1,
                opt(r.video_f1),
                r.val_macro_f1,
                r.best_epoch,
                r.n_samples
            );
        }
        let get = |name: &str| found.iter().find(|f| f.0 == name).map(|f| f.2.macro_f1);
        if let (Some(p), Some(t)) = (get("probe"), get("temporal")) {
            let _ = writeln!(s, "\nTemporal gain over the frame probe: {:+.1} F1 points.", 100.0 * (t - p));
        }
    }
    if let Some(csv) = lowshot {
        s.push_str("\n## Low-shot\n\n| fraction | videos | mean F-F1 | std |\n|---|---|---|---|\n");
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == 4 {
                let _ = writeln!(s, "| {} | {} | {} | {} |", cols[0], cols[1], cols[2], cols[3]);
            }
        }
    }
    Ok(s)
}
