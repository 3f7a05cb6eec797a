//! Trajectory ingestion and prediction windows.
//!
//! Input files are plain text, one sample per line: `frame agent_id x y`,
//! separated by any run of spaces or tabs. Lines starting with `#` are
//! comments. Consecutive rows of an agent are treated as consecutive model
//! steps; no resampling or interpolation happens here.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 2D position.
pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: non-finite coordinate")]
    NonFinite { line: usize },
    #[error("unknown unit tag `{0}` (expected meters or pixels)")]
    UnknownUnit(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Meters,
    Pixels,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Meters => f.write_str("meters"),
            Unit::Pixels => f.write_str("pixels"),
        }
    }
}

impl FromStr for Unit {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "meters" | "m" => Ok(Unit::Meters),
            "pixels" | "px" => Ok(Unit::Pixels),
            other => Err(DataError::UnknownUnit(other.to_string())),
        }
    }
}

/// One agent's samples within a scene, sorted by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: String,
    pub samples: Vec<(i64, Point)>,
    pub unit: Unit,
}

/// A neighbor's observed window, co-temporal with the target's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub agent_id: String,
    /// Position of the agent in its scene's track list; used for tie-breaks.
    pub ordinal: usize,
    pub window: Vec<Point>,
    #[serde(default)]
    pub manual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionCase {
    pub case_id: String,
    pub scene_id: String,
    pub target_id: String,
    pub observed: Vec<Point>,
    pub future: Option<Vec<Point>>,
    pub neighbors: Vec<Neighbor>,
    #[serde(default)]
    pub unit: Unit,
}

impl PredictionCase {
    pub fn t_h(&self) -> usize {
        self.observed.len()
    }

    /// The target's position at the last observed step.
    pub fn last_observed(&self) -> Point {
        *self
            .observed
            .last()
            .expect("observed window is never empty")
    }

    /// Applies `f` to every position in the case (target, future, neighbors).
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> PredictionCase {
        let mut out = self.clone();
        out.observed.iter_mut().for_each(|p| *p = f(*p));
        if let Some(future) = out.future.as_mut() {
            future.iter_mut().for_each(|p| *p = f(*p));
        }
        for n in &mut out.neighbors {
            n.window.iter_mut().for_each(|p| *p = f(*p));
        }
        out
    }
}

/// Translation that moves a case's last observed target position to the origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub offset: Point,
}

impl NormalizationTransform {
    pub fn apply(&self, p: Point) -> Point {
        [p[0] - self.offset[0], p[1] - self.offset[1]]
    }

    pub fn invert(&self, p: Point) -> Point {
        [p[0] + self.offset[0], p[1] + self.offset[1]]
    }

    pub fn invert_all(&self, points: &[Point]) -> Vec<Point> {
        points.iter().map(|&p| self.invert(p)).collect()
    }
}

pub fn parse_trajectory_file(text: &str) -> Result<Vec<AgentTrack>, DataError> {
    parse_trajectory_file_with_unit(text, Unit::Meters)
}

pub fn parse_trajectory_file_with_unit(
    text: &str,
    unit: Unit,
) -> Result<Vec<AgentTrack>, DataError> {
    let mut tracks: Vec<AgentTrack> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(DataError::Parse {
                line,
                message: format!(
                    "expected 4 fields (frame agent_id x y), found {}",
                    fields.len()
                ),
            });
        }
        let frame = parse_frame(fields[0]).ok_or_else(|| DataError::Parse {
            line,
            message: format!("invalid frame index `{}`", fields[0]),
        })?;
        let coord = |s: &str| {
            s.parse::<f64>().map_err(|_| DataError::Parse {
                line,
                message: format!("invalid coordinate `{s}`"),
            })
        };
        let x = coord(fields[2])?;
        let y = coord(fields[3])?;
        if !x.is_finite() || !y.is_finite() {
            return Err(DataError::NonFinite { line });
        }

        let agent = fields[1].to_string();
        let slot = *index.entry(agent.clone()).or_insert_with(|| {
            tracks.push(AgentTrack {
                agent_id: agent,
                samples: Vec::new(),
                unit,
            });
            tracks.len() - 1
        });
        tracks[slot].samples.push((frame, [x, y]));
    }

    for track in &mut tracks {
        track.samples.sort_by_key(|&(frame, _)| frame);
        if let Some(w) = track.samples.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(DataError::Parse {
                line: 0,
                message: format!("agent {} has duplicate frame {}", track.agent_id, w[0].0),
            });
        }
    }
    Ok(tracks)
}

// Frame columns are often written as floats ("780.0").
fn parse_frame(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let v = s.parse::<f64>().ok()?;
    (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
}

/// Per-agent presence over the scene's global step axis (sorted distinct frames).
struct Presence {
    frames: Vec<i64>,
    positions: Vec<Vec<Option<Point>>>,
}

impl Presence {
    fn new(tracks: &[AgentTrack]) -> Self {
        let frames: Vec<i64> = tracks
            .iter()
            .flat_map(|t| t.samples.iter().map(|s| s.0))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let step: HashMap<i64, usize> = frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let positions = tracks
            .iter()
            .map(|t| {
                let mut row = vec![None; frames.len()];
                for &(f, p) in &t.samples {
                    row[step[&f]] = Some(p);
                }
                row
            })
            .collect();
        Presence { frames, positions }
    }

    fn window(&self, agent: usize, start: usize, len: usize) -> Option<Vec<Point>> {
        self.positions[agent]
            .get(start..start + len)?
            .iter()
            .copied()
            .collect()
    }

    /// Maximal runs of consecutive presence as (start, length).
    fn runs(&self, agent: usize) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, p) in self.positions[agent].iter().enumerate() {
            match (p.is_some(), start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, self.frames.len() - s));
        }
        runs
    }
}

/// Builds one case per (agent, window start). Neighbors are the other agents
/// present at every observed step of the window.
pub fn build_windows(
    tracks: &[AgentTrack],
    scene_id: &str,
    t_h: usize,
    t_f: usize,
    stride: usize,
) -> Vec<PredictionCase> {
    assert!(
        t_h >= 1 && t_f >= 1 && stride >= 1,
        "t_h, t_f and stride must be positive"
    );
    let presence = Presence::new(tracks);
    let span = t_h + t_f;
    let mut cases = Vec::new();

    for (agent, track) in tracks.iter().enumerate() {
        for (run_start, run_len) in presence.runs(agent) {
            if run_len < span {
                continue;
            }
            for start in (run_start..=run_start + run_len - span).step_by(stride) {
                let full = presence
                    .window(agent, start, span)
                    .expect("inside a presence run");
                let neighbors = tracks
                    .iter()
                    .enumerate()
                    .filter(|&(other, _)| other != agent)
                    .filter_map(|(other, t)| {
                        presence.window(other, start, t_h).map(|window| Neighbor {
                            agent_id: t.agent_id.clone(),
                            ordinal: other,
                            window,
                            manual: false,
                        })
                    })
                    .collect();
                cases.push(PredictionCase {
                    case_id: format!("{scene_id}:{}:{}", track.agent_id, presence.frames[start]),
                    scene_id: scene_id.to_string(),
                    target_id: track.agent_id.clone(),
                    observed: full[..t_h].to_vec(),
                    future: Some(full[t_h..].to_vec()),
                    neighbors,
                    unit: track.unit,
                });
            }
        }
    }
    cases
}

pub fn normalize_case(case: &PredictionCase) -> (PredictionCase, NormalizationTransform) {
    let transform = NormalizationTransform {
        offset: case.last_observed(),
    };
    (case.map_points(|p| transform.apply(p)), transform)
}

fn squared_distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Keeps the `cap` neighbors closest to the target at the last observed step,
/// ordered by (distance, ordinal).
pub fn select_neighbors(case: &PredictionCase, cap: usize) -> PredictionCase {
    let anchor = case.last_observed();
    let mut ranked: Vec<(f64, &Neighbor)> = case
        .neighbors
        .iter()
        .map(|n| {
            (
                squared_distance(*n.window.last().expect("non-empty window"), anchor),
                n,
            )
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.ordinal.cmp(&b.1.ordinal)));
    let mut out = case.clone();
    out.neighbors = ranked
        .into_iter()
        .take(cap)
        .map(|(_, n)| n.clone())
        .collect();
    out
}
