//! Metric report emission: JSON for the full report, CSV for the
//! dataset-level row, and a 256-row CSV for the PR curve.

use std::io;
use std::path::Path;

use crate::metrics::{MetricReport, NUM_THRESHOLDS};

pub fn write_report_json(path: &Path, report: &MetricReport) -> io::Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json)
}

/// One row per dataset: S_alpha, F_max, E_max, MAE.
pub fn write_report_csv(path: &Path, report: &MetricReport) -> io::Result<()> {
    let mut out = String::from("images,s_measure,f_measure_max,e_measure_max,mae\n");
    out.push_str(&format!(
        "{},{},{},{},{}\n",
        report.images, report.s_measure, report.f_measure_max, report.e_measure_max, report.mae
    ));
    std::fs::write(path, out)
}

/// Threshold-indexed precision/recall pairs for external plotting.
pub fn write_pr_csv(path: &Path, report: &MetricReport) -> io::Result<()> {
    let mut out = String::from("threshold,precision,recall\n");
    for t in 0..NUM_THRESHOLDS {
        out.push_str(&format!("{},{},{}\n", t, report.precision[t], report.recall[t]));
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> MetricReport {
        MetricReport {
            images: 2,
            s_measure: 0.91,
            f_measure_max: 0.87,
            e_measure_max: 0.95,
            mae: 0.04,
            precision: vec![1.0; NUM_THRESHOLDS],
            recall: vec![0.5; NUM_THRESHOLDS],
            per_image: vec![],
        }
    }

    #[test]
    fn csv_files_have_headers_and_expected_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        let csv = dir.path().join("report.csv");
        let pr = dir.path().join("pr.csv");
        write_report_csv(&csv, &report).unwrap();
        write_pr_csv(&pr, &report).unwrap();
        let csv_text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(csv_text.lines().count(), 2);
        assert!(csv_text.starts_with("images,s_measure"));
        let pr_text = std::fs::read_to_string(pr).unwrap();
        assert_eq!(pr_text.lines().count(), 1 + NUM_THRESHOLDS);
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = sample_report();
        write_report_json(&path, &report).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.s_measure, report.s_measure);
        assert_eq!(back.precision.len(), NUM_THRESHOLDS);
    }
}
