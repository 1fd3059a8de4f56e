use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, FormatError, Result};
use crate::protocol::RunReport;

/// `<output_dir>/run-<first 12 digest chars>-<seed>`.
pub fn run_dir(output_dir: &Path, report: &RunReport) -> PathBuf {
    let short = &report.config_digest[..report.config_digest.len().min(12)];
    output_dir.join(format!("run-{short}-{}", report.seed))
}

pub fn render_steps_csv(report: &RunReport) -> String {
    let mut out = String::from("step,seen_classes,correct,total,top1\n");
    for s in &report.per_step {
        writeln!(out, "{},{},{},{},{}", s.step_index, s.seen_classes.len(), s.correct, s.total, s.top1).unwrap();
    }
    out
}

/// Write `report.json` and `steps.csv` into the run directory and return
/// its path. Output depends only on the report, so reruns are
/// byte-identical.
pub fn write_run_report(output_dir: &Path, report: &RunReport) -> Result<PathBuf> {
    let dir = run_dir(output_dir, report);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    let json_path = dir.join("report.json");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("steps.csv");
    fs::write(&csv_path, render_steps_csv(report)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(dir)
}

pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(FormatError::BadReport(e.to_string())))?;
    report.check_consistency()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{run_fpcil_scenario, tests::tiny_config};

    #[test]
    fn reports_are_byte_identical_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let a = write_run_report(dir.path(), &run_fpcil_scenario(&cfg, 1).unwrap().report).unwrap();
        let first = (fs::read(a.join("report.json")).unwrap(), fs::read(a.join("steps.csv")).unwrap());
        let b = write_run_report(dir.path(), &run_fpcil_scenario(&cfg, 1).unwrap().report).unwrap();
        assert_eq!(a, b);
        assert_eq!(first.0, fs::read(b.join("report.json")).unwrap());
        assert_eq!(first.1, fs::read(b.join("steps.csv")).unwrap());
        let back = read_run_report(&a).unwrap();
        assert_eq!(back.seed, 1);
        let csv = String::from_utf8(first.1).unwrap();
        assert_eq!(csv.lines().count(), 1 + back.per_step.len());
    }

    #[test]
    fn tampered_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_fpcil_scenario(&tiny_config(), 0).unwrap().report;
        let d = write_run_report(dir.path(), &report).unwrap();
        let mut bad = report.clone();
        bad.average_incremental_accuracy += 0.01;
        fs::write(d.join("report.json"), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(read_run_report(&d).is_err());
        fs::write(d.join("report.json"), "{").unwrap();
        assert!(matches!(read_run_report(&d), Err(Error::Format(_))));
    }
}
