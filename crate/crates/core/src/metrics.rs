//! Ranking metrics over majority (zero) and minority (non-zero) classes.
//!
//! Each evaluation instant is one horizon step of one segment: a length-N
//! prediction vector ranked against the true labels. k adapts per instant to
//! the true class-set size, ties break toward the lower node index, and the
//! dataset-level value is the mean over non-skipped instants.

use crate::error::{invalid, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Node order ranked by descending prediction, ties toward lower index.
fn rank_descending(yhat: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..yhat.len()).collect();
    idx.sort_by(|&a, &b| yhat[b].partial_cmp(&yhat[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Node order ranked by ascending prediction, ties toward lower index.
fn rank_ascending(yhat: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..yhat.len()).collect();
    idx.sort_by(|&a, &b| yhat[a].partial_cmp(&yhat[b]).unwrap().then(a.cmp(&b)));
    idx
}

/// Recall of the non-zero set in the top-m descending-ranked nodes, with
/// m the true non-zero count. `None` when the instant has no non-zero label.
pub fn recall_min(yhat: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(yhat.len(), y.len());
    let m = y.iter().filter(|&&v| v > 0.0).count();
    if m == 0 {
        return None;
    }
    let ranked = rank_descending(yhat);
    let hits = ranked[..m].iter().filter(|&&i| y[i] > 0.0).count();
    Some(hits as f64 / m as f64)
}

/// Recall of the zero set in the bottom-z ascending-ranked nodes, with z the
/// true zero count. `None` when the instant has no zero label.
pub fn recall_maj(yhat: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(yhat.len(), y.len());
    let z = y.iter().filter(|&&v| v == 0.0).count();
    if z == 0 {
        return None;
    }
    let ranked = rank_ascending(yhat);
    let hits = ranked[..z].iter().filter(|&&i| y[i] == 0.0).count();
    Some(hits as f64 / z as f64)
}

/// Average precision of the descending ranking with non-zero relevance.
pub fn average_precision_min(yhat: &[f64], y: &[f64]) -> Option<f64> {
    average_precision(&rank_descending(yhat), &y.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
}

/// Average precision of the ascending ranking with zero relevance.
pub fn average_precision_maj(yhat: &[f64], y: &[f64]) -> Option<f64> {
    average_precision(&rank_ascending(yhat), &y.iter().map(|&v| v == 0.0).collect::<Vec<_>>())
}

fn average_precision(ranked: &[usize], relevant: &[bool]) -> Option<f64> {
    let m = relevant.iter().filter(|&&r| r).count();
    if m == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &i) in ranked.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    Some(acc / m as f64)
}

/// Absolute difference between class metrics (Rec-D / MAP-D).
pub fn disparity(maj: f64, min: f64) -> f64 {
    (maj - min).abs()
}

/// Aggregated metric report. Base metrics are raw values in [0, 1]; the
/// JSON display block follows the tables' conventions (recall scaled by
/// 100, 4-decimal rounding), with full precision retained in `raw`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub rec_maj: f64,
    pub rec_min: f64,
    pub map_maj: f64,
    pub map_min: f64,
    pub rec_d: f64,
    pub map_d: f64,
    pub instants_min: usize,
    pub skipped_min: usize,
    pub instants_maj: usize,
    pub skipped_maj: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> serde_json::Value {
        let round4 = |v: f64| (v * 1e4).round() / 1e4;
        serde_json::json!({
            "raw": self,
            "display": {
                "rec_maj": round4(self.rec_maj * 100.0),
                "rec_min": round4(self.rec_min * 100.0),
                "rec_d": round4(self.rec_d * 100.0),
                "map_maj": round4(self.map_maj),
                "map_min": round4(self.map_min),
                "map_d": round4(self.map_d),
            },
        })
    }
}

/// Streaming accumulator over evaluation instants.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    rec_min_sum: f64,
    rec_min_n: usize,
    rec_min_skip: usize,
    rec_maj_sum: f64,
    rec_maj_n: usize,
    rec_maj_skip: usize,
    map_min_sum: f64,
    map_min_n: usize,
    map_maj_sum: f64,
    map_maj_n: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one instant: predictions and labels over the node axis.
    pub fn push_instant(&mut self, yhat: &[f64], y: &[f64]) {
        match recall_min(yhat, y) {
            Some(r) => {
                self.rec_min_sum += r;
                self.rec_min_n += 1;
            }
            None => self.rec_min_skip += 1,
        }
        match recall_maj(yhat, y) {
            Some(r) => {
                self.rec_maj_sum += r;
                self.rec_maj_n += 1;
            }
            None => self.rec_maj_skip += 1,
        }
        if let Some(ap) = average_precision_min(yhat, y) {
            self.map_min_sum += ap;
            self.map_min_n += 1;
        }
        if let Some(ap) = average_precision_maj(yhat, y) {
            self.map_maj_sum += ap;
            self.map_maj_n += 1;
        }
    }

    /// Add every (segment, horizon-step) instant of a prediction tensor.
    pub fn push_batch(&mut self, yhat: &Array3<f64>, y: &Array3<f64>) -> Result<()> {
        if yhat.dim() != y.dim() {
            invalid!("prediction and label shapes differ: {:?} vs {:?}", yhat.dim(), y.dim());
        }
        let (b, delta, _n) = y.dim();
        for s in 0..b {
            for d in 0..delta {
                let p: Vec<f64> = yhat.slice(ndarray::s![s, d, ..]).to_vec();
                let t: Vec<f64> = y.slice(ndarray::s![s, d, ..]).to_vec();
                self.push_instant(&p, &t);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mean = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
        let rec_maj = mean(self.rec_maj_sum, self.rec_maj_n);
        let rec_min = mean(self.rec_min_sum, self.rec_min_n);
        let map_maj = mean(self.map_maj_sum, self.map_maj_n);
        let map_min = mean(self.map_min_sum, self.map_min_n);
        MetricReport {
            rec_maj,
            rec_min,
            map_maj,
            map_min,
            rec_d: disparity(rec_maj, rec_min),
            map_d: disparity(map_maj, map_min),
            instants_min: self.rec_min_n,
            skipped_min: self.rec_min_skip,
            instants_maj: self.rec_maj_n,
            skipped_maj: self.rec_maj_skip,
        }
    }
}
