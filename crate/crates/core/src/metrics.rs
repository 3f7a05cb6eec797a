//! Displacement errors and best-of-K evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Point, PredictionCase, Unit};
use crate::model::{sample_k, ModelConfig, ModelError, ParameterStore};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction has {pred} steps but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("cannot score an empty trajectory")]
    Empty,
    #[error("test set is empty")]
    EmptyTestset,
    #[error("case {0} has no ground-truth future")]
    MissingFuture(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(pred: &[Point], gt: &[Point]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Average displacement error.
pub fn ade(pred: &[Point], gt: &[Point]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Final displacement error.
pub fn fde(pred: &[Point], gt: &[Point]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

/// `(min_k ade, min_k fde)`; each minimum is taken independently.
pub fn min_over_k(samples: &[Vec<Point>], gt: &[Point]) -> Result<(f64, f64), MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for s in samples {
        best.0 = best.0.min(ade(s, gt)?);
        best.1 = best.1.min(fde(s, gt)?);
    }
    Ok(best)
}

/// Per-case sampling seed derived from the master seed and the case id.
pub fn case_seed(seed: u64, case_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(case_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub min_ade: f64,
    pub min_fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub k: usize,
    pub n_cases: usize,
    pub unit: Unit,
    pub per_case: Vec<CaseMetrics>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "k = {}\nn_cases = {}\nunit = {}\nmin_ade_k = {:.17e}\nmin_fde_k = {:.17e}\n",
            self.k, self.n_cases, self.unit, self.min_ade_k, self.min_fde_k
        )
    }

    /// Tab-separated per-case table with a header row.
    pub fn per_case_table(&self) -> String {
        let mut out = String::from("case_id\tmin_ade\tmin_fde\n");
        for c in &self.per_case {
            writeln!(out, "{}\t{:.17e}\t{:.17e}", c.case_id, c.min_ade, c.min_fde)
                .expect("string write");
        }
        out
    }
}

pub fn evaluate(
    params: &ParameterStore,
    config: &ModelConfig,
    testset: &[PredictionCase],
    k: usize,
    seed: u64,
) -> Result<EvalReport, MetricError> {
    if testset.is_empty() {
        return Err(MetricError::EmptyTestset);
    }
    let per_case: Vec<CaseMetrics> = testset
        .par_iter()
        .map(|case| {
            let gt = case
                .future
                .as_ref()
                .ok_or_else(|| MetricError::MissingFuture(case.case_id.clone()))?;
            let out = sample_k(case, params, config, k, case_seed(seed, &case.case_id))?;
            let samples = out.denormalized.expect("sample_k denormalizes");
            let (min_ade, min_fde) = min_over_k(&samples, gt)?;
            Ok(CaseMetrics {
                case_id: case.case_id.clone(),
                min_ade,
                min_fde,
            })
        })
        .collect::<Result<_, MetricError>>()?;
    let n = per_case.len() as f64;
    Ok(EvalReport {
        min_ade_k: per_case.iter().map(|c| c.min_ade).sum::<f64>() / n,
        min_fde_k: per_case.iter().map(|c| c.min_fde).sum::<f64>() / n,
        k,
        n_cases: per_case.len(),
        unit: testset[0].unit,
        per_case,
    })
}
