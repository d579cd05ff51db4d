use std::path::Path;

use crate::error::{Error, Result};

/// One epoch of diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub total_loss: f64,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    /// Constrained hyperparameters used for this epoch.
    pub lambda: Vec<f64>,
    /// Absolute gradient per unconstrained coordinate, before clipping.
    pub grad_abs: Vec<f64>,
    pub lr: f64,
    pub clipped: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTrace {
    pub component_ids: Vec<String>,
    pub hyper_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn new(component_ids: Vec<String>, hyper_names: Vec<String>) -> Self {
        Self {
            component_ids,
            hyper_names,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "total_loss".to_string()];
        h.extend(self.component_ids.iter().map(|c| format!("loss_{c}")));
        h.extend(self.component_ids.iter().map(|c| format!("weight_{c}")));
        h.extend(self.hyper_names.iter().map(|n| format!("lambda_{n}")));
        h.extend(self.hyper_names.iter().map(|n| format!("gradnorm_{n}")));
        h.push("lr".into());
        h.push("clipped".into());
        h
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.seconds).sum::<f64>() / self.rows.len() as f64
    }

    /// Writes every deterministic column. Wall-clock times go to a
    /// separate file through [`TrainingTrace::write_timing`] so that runs
    /// with equal settings produce identical traces.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(self.header()).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string(), fmt(r.total_loss)];
            rec.extend(r.losses.iter().map(|v| fmt(*v)));
            rec.extend(r.weights.iter().map(|v| fmt(*v)));
            rec.extend(r.lambda.iter().map(|v| fmt(*v)));
            rec.extend(r.grad_abs.iter().map(|v| fmt(*v)));
            rec.push(fmt(r.lr));
            rec.push(u8::from(r.clipped).to_string());
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_timing(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["epoch", "seconds"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([r.epoch.to_string(), fmt(r.seconds)])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a trace written by [`TrainingTrace::write_csv`]; `seconds` is
    /// left at zero.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let strip = |prefix: &str| -> Vec<String> {
            header
                .iter()
                .filter_map(|h| h.strip_prefix(prefix).map(str::to_string))
                .collect()
        };
        let trace = TrainingTrace::new(strip("loss_"), strip("lambda_"));
        if trace.header() != header {
            return Err(Error::Parse(format!(
                "{}: unexpected trace columns",
                path.display()
            )));
        }
        let (m, h) = (trace.component_ids.len(), trace.hyper_names.len());
        let mut trace = trace;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}: row {}: bad number `{}`",
                        path.display(),
                        line + 1,
                        &rec[i]
                    ))
                })
            };
            let nums = |from: usize, n: usize| (from..from + n).map(num).collect::<Result<Vec<_>>>();
            let mut at = 2;
            let losses = nums(at, m)?;
            at += m;
            let weights = nums(at, m)?;
            at += m;
            let lambda = nums(at, h)?;
            at += h;
            let grad_abs = nums(at, h)?;
            at += h;
            trace.rows.push(TraceRow {
                epoch: num(0)? as usize,
                total_loss: num(1)?,
                losses,
                weights,
                lambda,
                grad_abs,
                lr: num(at)?,
                clipped: &rec[at + 1] == "1",
                seconds: 0.0,
            });
        }
        Ok(trace)
    }
}

/// Shortest text that parses back to the same double.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if !e.is_io_error() {
        return Error::Parse(format!("{}: {e}", path.display()));
    }
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}
