//! Per-batch telemetry rows and their CSV form.
//!
//! Header: `epoch,batch,train_loss,train_acc,test_acc,mean_cgn,below_thresh,resets,diverged`.
//! `test_acc` is filled only on the last row of each epoch. Floats are written
//! in shortest round-trip form, so reading a file back is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 9] = [
    "epoch",
    "batch",
    "train_loss",
    "train_acc",
    "test_acc",
    "mean_cgn",
    "below_thresh",
    "resets",
    "diverged",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub batch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub mean_cgn: f64,
    pub below_thresh: usize,
    pub resets: usize,
    pub diverged: bool,
}

pub fn to_csv_bytes(records: &[MetricsRecord]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_bytes(records)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&bytes, path)
}

pub fn parse_metrics(bytes: &[u8], path: &Path) -> Result<Vec<MetricsRecord>> {
    let err = |line: u64, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(err(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<MetricsRecord>() {
        let record = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                epoch: 0,
                batch: 0,
                train_loss: 0.6931471805599453,
                train_acc: 0.5,
                test_acc: None,
                mean_cgn: 1.2345678901234567e-9,
                below_thresh: 3,
                resets: 3,
                diverged: false,
            },
            MetricsRecord {
                epoch: 0,
                batch: 1,
                train_loss: 0.1 + 0.2,
                train_acc: 1.0 / 3.0,
                test_acc: Some(0.515),
                mean_cgn: 0.0,
                below_thresh: 0,
                resets: 0,
                diverged: false,
            },
        ]
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&sample(), &path).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), sample());
    }

    #[test]
    fn empty_run_is_header_only() {
        let bytes = to_csv_bytes(&[]);
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "epoch,batch,train_loss,train_acc,test_acc,mean_cgn,below_thresh,resets,diverged\n"
        );
    }

    #[test]
    fn malformed_row_reports_line() {
        let mut bytes = to_csv_bytes(&sample());
        bytes.extend_from_slice(b"1,0,abc,0.5,,0.1,0,0,false\n");
        let err = parse_metrics(&bytes, Path::new("x.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn wrong_header_rejected() {
        let err = parse_metrics(b"epoch,batch\n0,0\n", Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
