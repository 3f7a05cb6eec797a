//! What-if probing: predict a case with synthetic manual neighbors added.
//!
//! Shared by the `probe` command and the HTTP service so both produce the
//! same numbers for the same checkpoint, case and request.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::circle::{inject_manual_neighbor, AttentionProfile, FactorSet, MetaMatrix};
use crate::data::{select_neighbors, Point, PredictionCase};
use crate::metrics::case_seed;
use crate::model::{sample_k_masked, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("no model loaded")]
    NoModel,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(field: &str, message: impl Into<String>) -> ProbeError {
    ProbeError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManualNeighborSpec {
    pub start: Point,
    pub end: Point,
}

impl std::str::FromStr for ManualNeighborSpec {
    type Err = String;

    /// Parses `x0,y0:x1,y1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let point = |p: &str| -> Result<Point, String> {
            let (x, y) = p
                .split_once(',')
                .ok_or_else(|| format!("expected `x,y`, got `{p}`"))?;
            let x: f64 = x
                .trim()
                .parse()
                .map_err(|_| format!("invalid number `{x}`"))?;
            let y: f64 = y
                .trim()
                .parse()
                .map_err(|_| format!("invalid number `{y}`"))?;
            Ok([x, y])
        };
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `x0,y0:x1,y1`, got `{s}`"))?;
        Ok(ManualNeighborSpec {
            start: point(a)?,
            end: point(b)?,
        })
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRequest {
    pub case_id: String,
    #[serde(default)]
    pub manual_neighbors: Vec<ManualNeighborSpec>,
    #[serde(default = "one", alias = "K")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_partitions: Option<usize>,
    #[serde(default)]
    pub factors: Option<FactorSet>,
}

impl ProbeRequest {
    pub fn new(case_id: impl Into<String>) -> Self {
        ProbeRequest {
            case_id: case_id.into(),
            manual_neighbors: Vec::new(),
            k: 1,
            seed: 0,
            n_partitions: None,
            factors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborPolyline {
    pub agent_id: String,
    pub manual: bool,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub case_id: String,
    pub checkpoint: String,
    /// `K` predicted futures in scene coordinates.
    pub predictions: Vec<Vec<Point>>,
    pub observed: Vec<Point>,
    pub ground_truth: Option<Vec<Point>>,
    /// Real and manual neighbors after the neighbor cap.
    pub neighbors: Vec<NeighborPolyline>,
    pub attention: Option<AttentionProfile>,
    /// `(lower, upper)` angles of each partition.
    pub partition_boundaries: Vec<(f64, f64)>,
    pub meta: Option<MetaMatrix>,
}

impl ProbeResponse {
    /// One polyline per line: `label: x0,y0 x1,y1 ...`.
    pub fn plot_data(&self) -> String {
        let mut lines = vec![polyline("observed", &self.observed)];
        if let Some(gt) = &self.ground_truth {
            lines.push(polyline("ground_truth", gt));
        }
        for n in &self.neighbors {
            let kind = if n.manual { "manual" } else { "neighbor" };
            lines.push(polyline(&format!("{kind}/{}", n.agent_id), &n.points));
        }
        for (i, p) in self.predictions.iter().enumerate() {
            lines.push(polyline(&format!("prediction/{i}"), p));
        }
        lines.join("\n") + "\n"
    }
}

fn polyline(label: &str, points: &[Point]) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|p| format!("{:?},{:?}", p[0], p[1]))
        .collect();
    format!("{label}: {}", coords.join(" "))
}

/// Checks `request` against the loaded model.
pub fn validate_request(request: &ProbeRequest, checkpoint: &Checkpoint) -> Result<(), ProbeError> {
    let config = &checkpoint.config;
    if request.k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    if let Some(n) = request.n_partitions {
        if n == 0 || n > config.t_h {
            return Err(invalid(
                "n_partitions",
                format!("must be in 1..={}", config.t_h),
            ));
        }
        if !config.use_socialcircle {
            return Err(invalid("n_partitions", "model has no SocialCircle branch"));
        }
    }
    if let Some(f) = request.factors {
        if !f.is_subset_of(config.partition.factors) {
            return Err(invalid(
                "factors",
                format!(
                    "`{f}` is not a subset of the trained factors `{}`",
                    config.partition.factors
                ),
            ));
        }
    }
    for (i, m) in request.manual_neighbors.iter().enumerate() {
        if !m.start.iter().chain(&m.end).all(|v| v.is_finite()) {
            return Err(invalid(
                &format!("manual_neighbors[{i}]"),
                "coordinates must be finite",
            ));
        }
    }
    Ok(())
}

/// Runs one probe. Manual neighbors are given in scene coordinates.
pub fn run_probe(
    checkpoint: &Checkpoint,
    case: &PredictionCase,
    request: &ProbeRequest,
) -> Result<ProbeResponse, ProbeError> {
    validate_request(request, checkpoint)?;
    let mut config = checkpoint.config.clone();
    if let Some(n) = request.n_partitions {
        config.partition.n_partitions = n;
    }
    let cap = config.partition.neighbor_cap;

    let mut probed = select_neighbors(case, cap);
    for m in &request.manual_neighbors {
        probed = inject_manual_neighbor(&probed, m.start, m.end, cap);
    }

    let seed = case_seed(request.seed, &case.case_id);
    let out = sample_k_masked(
        &probed,
        &checkpoint.params,
        &config,
        request.k,
        seed,
        request.factors,
    )?;

    Ok(ProbeResponse {
        case_id: case.case_id.clone(),
        checkpoint: checkpoint.checksum(),
        predictions: out.denormalized.expect("sample_k denormalizes"),
        observed: probed.observed.clone(),
        ground_truth: probed.future.clone(),
        neighbors: probed
            .neighbors
            .iter()
            .map(|n| NeighborPolyline {
                agent_id: n.agent_id.clone(),
                manual: n.manual,
                points: n.window.clone(),
            })
            .collect(),
        attention: out.attention,
        partition_boundaries: if config.use_socialcircle {
            config.partition.boundaries()
        } else {
            Vec::new()
        },
        meta: out.meta,
    })
}
