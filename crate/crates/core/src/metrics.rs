//! Evaluation: temporal and spatio-temporal AP at 0.25 overlap, success
//! rate at 0.05 tube IoU, and size/time reporting.
//!
//! Each query has exactly one ground-truth track and at most one
//! prediction. AP ranks predictions by descending score (absent predictions
//! last, ties by input order) and averages precision at every true-positive
//! rank over the number of queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{temporal_iou, tube_iou, ResponseTrack};
use crate::retrieval::RetrievalResult;

pub const AP_THRESHOLD: f64 = 0.25;
pub const SUCCESS_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub track: ResponseTrack,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEvaluation {
    pub query_id: u64,
    pub prediction: Option<Prediction>,
    pub ground_truth: ResponseTrack,
}

pub fn temporal_overlap(a: &ResponseTrack, b: &ResponseTrack) -> f64 {
    temporal_iou(&a.interval(), &b.interval())
}

pub fn success_rate(evals: &[QueryEvaluation]) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::Input("no queries to evaluate".into()));
    }
    let hits = evals
        .iter()
        .filter(|e| {
            e.prediction
                .as_ref()
                .is_some_and(|p| tube_iou(&p.track, &e.ground_truth) >= SUCCESS_THRESHOLD)
        })
        .count();
    Ok(100.0 * hits as f64 / evals.len() as f64)
}

pub fn average_precision_at(
    evals: &[QueryEvaluation],
    overlap: impl Fn(&ResponseTrack, &ResponseTrack) -> f64,
    threshold: f64,
) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::Input("no queries to evaluate".into()));
    }
    let mut ranked: Vec<(bool, f64, bool)> = evals
        .iter()
        .map(|e| match &e.prediction {
            Some(p) => (true, p.score, overlap(&p.track, &e.ground_truth) >= threshold),
            None => (false, 0.0, false),
        })
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)));

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (k, &(_, _, tp)) in ranked.iter().enumerate() {
        if tp {
            hits += 1;
            precision_sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(100.0 * precision_sum / evals.len() as f64)
}

pub fn temporal_ap25(evals: &[QueryEvaluation]) -> Result<f64> {
    average_precision_at(evals, temporal_overlap, AP_THRESHOLD)
}

pub fn spatiotemporal_ap25(evals: &[QueryEvaluation]) -> Result<f64> {
    average_precision_at(evals, tube_iou, AP_THRESHOLD)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTiming {
    pub mean_retrieval_time_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t_ap25: f64,
    pub st_ap25: f64,
    pub success: f64,
    pub queries: u64,
    pub mean_size_bytes: f64,
    pub mean_retrieval_ops: f64,
    /// Wall-clock fields; excluded from determinism digests.
    pub timing: MetricsTiming,
}

pub fn evaluate_run(evals: &[QueryEvaluation], size_bytes: u64, results: &[RetrievalResult]) -> Result<MetricsReport> {
    let n = results.len().max(1) as f64;
    Ok(MetricsReport {
        t_ap25: temporal_ap25(evals)?,
        st_ap25: spatiotemporal_ap25(evals)?,
        success: success_rate(evals)?,
        queries: evals.len() as u64,
        mean_size_bytes: size_bytes as f64,
        mean_retrieval_ops: results.iter().map(|r| r.similarity_ops as f64).sum::<f64>() / n,
        timing: MetricsTiming {
            mean_retrieval_time_s: results.iter().map(|r| r.timing.elapsed_s).sum::<f64>() / n,
        },
    })
}
