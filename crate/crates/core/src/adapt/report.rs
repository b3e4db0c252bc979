//! CSV emission for adaptation logs and evaluation reports.

use std::io::Write;

use super::eval::{EvalReport, HISTOGRAM_BINS};
use super::methods::{EpochLog, StepLog};
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn table<W: Write, R: IntoIterator<Item = Vec<String>>>(w: W, header: &[&str], rows: R) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        out.write_record(&r).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

/// Columns: step, epoch, lr, batch_entropy.
pub fn write_step_log<W: Write>(w: W, log: &[StepLog]) -> Result<()> {
    let rows = log.iter().map(|s| {
        vec![
            s.step.to_string(),
            s.epoch.to_string(),
            s.lr.to_string(),
            s.batch_entropy.to_string(),
        ]
    });
    table(w, &["step", "epoch", "lr", "batch_entropy"], rows)
}

/// Columns: epoch, mean_entropy, error_pct (empty without labels).
pub fn write_epoch_log<W: Write>(w: W, log: &[EpochLog]) -> Result<()> {
    let rows = log.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            e.mean_entropy.to_string(),
            e.error_pct.map_or(String::new(), |v| v.to_string()),
        ]
    });
    table(w, &["epoch", "mean_entropy", "error_pct"], rows)
}

/// Columns: method, n, error_pct, mean_entropy.
pub fn write_summary<W: Write>(w: W, method: &str, r: &EvalReport) -> Result<()> {
    let row = vec![method.to_string(), r.n.to_string(), r.error_pct.to_string(), r.mean_entropy.to_string()];
    table(w, &["method", "n", "error_pct", "mean_entropy"], [row])
}

/// Columns: bin, lo, hi, count; one row per bin.
pub fn write_histogram<W: Write>(w: W, r: &EvalReport) -> Result<()> {
    let width = (r.classes as f64).ln() / HISTOGRAM_BINS as f64;
    let rows = r.histogram.iter().enumerate().map(|(i, c)| {
        vec![
            i.to_string(),
            (i as f64 * width).to_string(),
            ((i + 1) as f64 * width).to_string(),
            c.to_string(),
        ]
    });
    table(w, &["bin", "lo", "hi", "count"], rows)
}

/// Columns: index, label, class, p_before, p_after; one row per example per class.
pub fn write_examples<W: Write>(w: W, r: &EvalReport) -> Result<()> {
    let rows = r.examples.iter().flat_map(|e| {
        e.before.iter().zip(&e.after).enumerate().map(move |(k, (b, a))| {
            vec![e.index.to_string(), e.label.to_string(), k.to_string(), b.to_string(), a.to_string()]
        })
    });
    table(w, &["index", "label", "class", "p_before", "p_after"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn histogram_has_one_row_per_bin() {
        let probs = Tensor::full(vec![2, 10], 0.1f32);
        let r = EvalReport::from_probs(&probs, &[0, 1]).unwrap();
        let mut buf = Vec::new();
        write_histogram(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), HISTOGRAM_BINS + 1);
        assert!(text.lines().last().unwrap().ends_with(",2"));
    }

    #[test]
    fn step_log_columns() {
        let log = vec![StepLog {
            step: 0,
            epoch: 0,
            lr: 0.001,
            batch_entropy: 0.5,
            loss: 0.5,
            selected: 3,
        }];
        let mut buf = Vec::new();
        write_step_log(&mut buf, &log).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,epoch,lr,batch_entropy\n0,0,0.001,0.5\n");
    }
}
