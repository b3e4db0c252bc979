use serde::Serialize;

use crate::diffcore::kernel::{argmax_rows, row_entropies};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 30;
/// Number of examples kept for before/after reporting.
pub const SHIFT_EXAMPLES: usize = 8;

/// One example's class distribution before and after adaptation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleShift {
    pub index: usize,
    pub label: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub classes: usize,
    /// Top-1 error in percent.
    pub error_pct: f64,
    pub mean_entropy: f64,
    /// Counts over `[0, ln C]` in equal-width bins; the top bin is closed.
    pub histogram: Vec<usize>,
    pub examples: Vec<ExampleShift>,
}

/// Bin index of entropy `h` for `classes` classes.
pub fn entropy_bin(h: f64, classes: usize) -> usize {
    let top = (classes as f64).ln();
    ((h / top * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

impl EvalReport {
    /// Error, entropy, and histogram of class probabilities `probs` (N x C).
    pub fn from_probs(probs: &Tensor<f32>, labels: &[usize]) -> Result<Self> {
        if probs.rank() != 2 || probs.batch() != labels.len() {
            return Err(Error::shape("evaluate", format!("probs {:?} for {} labels", probs.shape(), labels.len())));
        }
        let (n, classes) = (probs.shape()[0], probs.shape()[1]);
        let wrong = argmax_rows(probs).iter().zip(labels).filter(|(p, y)| p != y).count();
        let ents = row_entropies(probs);
        let mut histogram = vec![0; HISTOGRAM_BINS];
        ents.iter().for_each(|&h| histogram[entropy_bin(h, classes)] += 1);
        let ratio = |num: f64| if n == 0 { 0.0 } else { num / n as f64 };
        Ok(Self {
            n,
            classes,
            error_pct: 100.0 * ratio(wrong as f64),
            mean_entropy: ratio(ents.iter().sum()),
            histogram,
            examples: Vec::new(),
        })
    }

    /// Attaches the `k` examples whose entropy dropped most from `before`
    /// to `after`; ties go to the lower index.
    pub fn with_shift_examples(mut self, before: &Tensor<f32>, after: &Tensor<f32>, labels: &[usize], k: usize) -> Result<Self> {
        if before.shape() != after.shape() || before.batch() != labels.len() {
            return Err(Error::shape("evaluate", format!("before {:?}, after {:?}", before.shape(), after.shape())));
        }
        let c = before.shape()[1];
        let (hb, ha) = (row_entropies(before), row_entropies(after));
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&i, &j| (hb[j] - ha[j]).total_cmp(&(hb[i] - ha[i])).then(i.cmp(&j)));
        let row = |t: &Tensor<f32>, i: usize| t.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
        self.examples = order
            .into_iter()
            .take(k)
            .map(|i| ExampleShift {
                index: i,
                label: labels[i],
                entropy_before: hb[i],
                entropy_after: ha[i],
                before: row(before, i),
                after: row(after, i),
            })
            .collect();
        Ok(self)
    }
}
