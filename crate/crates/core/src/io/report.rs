use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const CSV_HEADER: &str = "TR@1,TR@5,TR@10,IR@1,IR@5,IR@10,R@Mean,ASR,config_fingerprint";

/// Writes `<stem>.json` and `<stem>.csv` next to each other and returns
/// both paths. CSV values keep full precision.
pub fn write_report(report: &EvalReport, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let json_path = stem.with_extension("json");
    let csv_path = stem.with_extension("csv");
    if let Some(parent) = json_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&json_path, json + "\n")?;
    fs::write(&csv_path, format!("{CSV_HEADER}\n{}\n", csv_row(report)))?;
    Ok((json_path, csv_path))
}

pub fn csv_row(report: &EvalReport) -> String {
    let mut fields: Vec<String> = report.retrieval_row().iter().map(|v| v.to_string()).collect();
    fields.push(report.r_mean.to_string());
    fields.push(report.classification_asr.map(|v| v.to_string()).unwrap_or_default());
    fields.push(report.metadata.config_fingerprint.clone());
    fields.join(",")
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ReportMetadata;
    use std::collections::BTreeMap;

    #[test]
    fn json_and_csv_agree() {
        let tr: BTreeMap<usize, f64> = [(1, 10.0 / 3.0), (5, 50.0), (10, 75.0)].into();
        let ir: BTreeMap<usize, f64> = [(1, 1.0), (5, 2.0), (10, 3.0)].into();
        let meta = ReportMetadata {
            config_fingerprint: "abc".into(),
            dataset_sizes: BTreeMap::new(),
        };
        let report = EvalReport::from_recalls(tr, ir, Some(12.5), meta).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (json, csv) = write_report(&report, &dir.path().join("eval")).unwrap();
        assert_eq!(read_report(&json).unwrap(), report);
        let text = fs::read_to_string(csv).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0].parse::<f64>().unwrap(), 10.0 / 3.0);
        assert_eq!(row[6].parse::<f64>().unwrap(), report.r_mean);
        assert_eq!(row[8], "abc");
    }
}
