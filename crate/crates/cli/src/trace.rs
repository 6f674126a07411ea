//! Per-timestamp score trace files.
//!
//! Columns: `index,score,lsd,isd,threshold,raw_pred,adjusted_pred,label`.
//! `threshold` and the prediction columns stay empty until a threshold is
//! applied; `label` is empty for unlabeled data.

use std::path::Path;

use memto::detect::{AnomalyScoreSeries, Criterion};

use crate::{CliError, CliResult};

pub const COLUMNS: [&str; 8] = [
    "index",
    "score",
    "lsd",
    "isd",
    "threshold",
    "raw_pred",
    "adjusted_pred",
    "label",
];

pub fn write_trace(path: &Path, s: &AnomalyScoreSeries) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let csv_err = |e: csv::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
    let threshold = s.threshold.map(|t| t.to_string()).unwrap_or_default();
    for t in 0..s.len() {
        w.write_record([
            t.to_string(),
            s.scores[t].to_string(),
            s.lsd[t].to_string(),
            s.isd[t].to_string(),
            threshold.clone(),
            opt(s.raw_pred.as_ref().map(|p| p[t])),
            opt(s.adjusted_pred.as_ref().map(|p| p[t])),
            opt(s.labels.as_ref().map(|p| p[t])),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads the score, deviation and label columns of a trace; predictions and
/// threshold are dropped so the trace can be re-thresholded.
pub fn read_trace(path: &Path) -> CliResult<AnomalyScoreSeries> {
    let bad = |row: usize, msg: String| {
        CliError::Core(memto::Error::Parse {
            row,
            column: 0,
            message: format!("{}: {msg}", path.display()),
        })
    };
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(bad(
            1,
            format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let (mut scores, mut lsd, mut isd, mut labels) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut labeled = None;
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        let num = |c: usize| -> CliResult<f64> {
            rec[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    bad(
                        row,
                        format!(
                            "column {} is not a finite number: {:?}",
                            COLUMNS[c], &rec[c]
                        ),
                    )
                })
        };
        scores.push(num(1)?);
        lsd.push(num(2)?);
        isd.push(num(3)?);
        let label = &rec[7];
        let has = !label.is_empty();
        if *labeled.get_or_insert(has) != has {
            return Err(bad(row, "label column is only partially filled".into()));
        }
        if has {
            match label {
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => return Err(bad(row, format!("label {other:?} is not 0 or 1"))),
            }
        }
    }
    if scores.is_empty() {
        return Err(bad(2, "trace has no rows".into()));
    }
    Ok(AnomalyScoreSeries {
        criterion: Criterion::Both,
        scores,
        lsd,
        isd,
        threshold: None,
        raw_pred: None,
        adjusted_pred: None,
        labels: labeled.unwrap_or(false).then_some(labels),
    })
}
