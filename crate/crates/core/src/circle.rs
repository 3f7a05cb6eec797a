//! The SocialCircle representation.
//!
//! Neighbors are binned by their bearing from the target (at the last
//! observed step) into `N` equal half-open angular sectors. Each sector is
//! summarised by the mean of a few per-neighbor factors: speed over the
//! observed window, distance, bearing, and optionally heading. The target
//! itself is always a member of the first sector.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{select_neighbors, Neighbor, Point, PredictionCase};

#[derive(Debug, Error, PartialEq)]
pub enum CircleError {
    #[error("angle {0} is outside [0, 2pi)")]
    AngleOutOfRange(f64),
    #[error("number of partitions must be at least 1")]
    NoPartitions,
    #[error("{n_partitions} partitions exceed the observation length {t_h}")]
    TooManyPartitions { n_partitions: usize, t_h: usize },
    #[error("factor set is empty")]
    NoFactors,
    #[error("unknown factor `{0}` (use a subset of v, d, r, m)")]
    UnknownFactor(char),
    #[error("observed window has {found} steps, expected {expected}")]
    WindowLength { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Velocity,
    Distance,
    Direction,
    MovementDirection,
}

impl Factor {
    pub const ALL: [Factor; 4] = [
        Factor::Velocity,
        Factor::Distance,
        Factor::Direction,
        Factor::MovementDirection,
    ];

    pub fn letter(self) -> char {
        match self {
            Factor::Velocity => 'v',
            Factor::Distance => 'd',
            Factor::Direction => 'r',
            Factor::MovementDirection => 'm',
        }
    }
}

/// Ordered subset of factors. Column order is always v, d, r, m.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FactorSet {
    bits: u8,
}

impl FactorSet {
    /// Velocity, distance and direction.
    pub const VDR: FactorSet = FactorSet { bits: 0b0111 };
    pub const ALL: FactorSet = FactorSet { bits: 0b1111 };

    pub fn contains(self, f: Factor) -> bool {
        self.bits & (1 << f as u8) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Factor> {
        Factor::ALL.into_iter().filter(move |&f| self.contains(f))
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn is_subset_of(self, other: FactorSet) -> bool {
        self.bits & !other.bits == 0
    }

    pub fn from_factors(factors: &[Factor]) -> Self {
        FactorSet {
            bits: factors.iter().fold(0, |acc, &f| acc | (1 << f as u8)),
        }
    }
}

impl Default for FactorSet {
    fn default() -> Self {
        FactorSet::VDR
    }
}

impl FromStr for FactorSet {
    type Err = CircleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut factors = Vec::new();
        for c in s.trim().chars() {
            let f = match c.to_ascii_lowercase() {
                'v' => Factor::Velocity,
                'd' => Factor::Distance,
                'r' => Factor::Direction,
                'm' => Factor::MovementDirection,
                other => return Err(CircleError::UnknownFactor(other)),
            };
            factors.push(f);
        }
        let set = FactorSet::from_factors(&factors);
        if set.is_empty() {
            return Err(CircleError::NoFactors);
        }
        Ok(set)
    }
}

impl TryFrom<String> for FactorSet {
    type Error = CircleError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FactorSet> for String {
    fn from(f: FactorSet) -> String {
        f.to_string()
    }
}

impl fmt::Display for FactorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.iter()
            .try_for_each(|factor| write!(f, "{}", factor.letter()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_partitions: usize,
    pub factors: FactorSet,
    pub neighbor_cap: usize,
    pub t_h: usize,
    /// Seconds between consecutive steps.
    pub step_seconds: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            n_partitions: 8,
            factors: FactorSet::VDR,
            neighbor_cap: 50,
            t_h: 8,
            step_seconds: 0.4,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<(), CircleError> {
        if self.n_partitions == 0 {
            return Err(CircleError::NoPartitions);
        }
        if self.n_partitions > self.t_h {
            return Err(CircleError::TooManyPartitions {
                n_partitions: self.n_partitions,
                t_h: self.t_h,
            });
        }
        if self.factors.is_empty() {
            return Err(CircleError::NoFactors);
        }
        Ok(())
    }

    /// `(lower, upper)` angle bounds of each partition.
    pub fn boundaries(&self) -> Vec<(f64, f64)> {
        (0..self.n_partitions)
            .map(|k| {
                (
                    partition_lower(k, self.n_partitions),
                    partition_lower(k + 1, self.n_partitions),
                )
            })
            .collect()
    }
}

/// Per-partition factor means plus member counts (the self-neighbor included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaMatrix {
    pub factors: FactorSet,
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl MetaMatrix {
    pub fn n_partitions(&self) -> usize {
        self.values.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn column(&self, factor: Factor) -> Option<usize> {
        self.factors.iter().position(|f| f == factor)
    }

    /// Row-major copy of the values.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Bearing of `neighbor` seen from `target`, in `[0, 2pi)`. The zero vector maps to 0.
pub fn relative_angle(target: Point, neighbor: Point) -> f64 {
    vector_angle([neighbor[0] - target[0], neighbor[1] - target[1]])
}

fn vector_angle(v: Point) -> f64 {
    if v[0] == 0.0 && v[1] == 0.0 {
        return 0.0;
    }
    let a = v[1].atan2(v[0]);
    let a = if a < 0.0 { a + TAU } else { a };
    if a >= TAU {
        0.0
    } else {
        a
    }
}

fn partition_lower(k: usize, n: usize) -> f64 {
    TAU * k as f64 / n as f64
}

/// Zero-based partition index `k` such that `angle` lies in
/// `[2k pi / n, 2(k+1) pi / n)`.
pub fn assign_partition(angle: f64, n_partitions: usize) -> Result<usize, CircleError> {
    if n_partitions == 0 {
        return Err(CircleError::NoPartitions);
    }
    if !(0.0..TAU).contains(&angle) {
        return Err(CircleError::AngleOutOfRange(angle));
    }
    let mut k = ((angle / TAU) * n_partitions as f64) as usize;
    k = k.min(n_partitions - 1);
    // Snap to the exact boundary values so edges are half-open.
    while k > 0 && angle < partition_lower(k, n_partitions) {
        k -= 1;
    }
    while k + 1 < n_partitions && angle >= partition_lower(k + 1, n_partitions) {
        k += 1;
    }
    Ok(k)
}

fn speed(window: &[Point], step_seconds: f64) -> f64 {
    if window.len() < 2 {
        return 0.0;
    }
    let (first, last) = (window[0], window[window.len() - 1]);
    let elapsed = (window.len() - 1) as f64 * step_seconds;
    (last[0] - first[0]).hypot(last[1] - first[1]) / elapsed
}

fn heading(window: &[Point]) -> f64 {
    let (first, last) = (window[0], window[window.len() - 1]);
    vector_angle([last[0] - first[0], last[1] - first[1]])
}

pub fn compute_meta(
    case: &PredictionCase,
    config: &PartitionConfig,
) -> Result<MetaMatrix, CircleError> {
    config.validate()?;
    if case.observed.len() != config.t_h {
        return Err(CircleError::WindowLength {
            expected: config.t_h,
            found: case.observed.len(),
        });
    }
    let n = config.n_partitions;
    let width = config.factors.len();
    let anchor = case.last_observed();
    let mut sums = vec![vec![0.0; width]; n];
    let mut counts = vec![0usize; n];

    let mut add = |k: usize, features: [f64; 4]| {
        counts[k] += 1;
        for (slot, f) in sums[k].iter_mut().zip(config.factors.iter()) {
            *slot += features[f as usize];
        }
    };

    // Self-neighbor: own speed and heading, zero distance and bearing.
    add(
        0,
        [
            speed(&case.observed, config.step_seconds),
            0.0,
            0.0,
            heading(&case.observed),
        ],
    );

    for neighbor in &case.neighbors {
        if neighbor.window.len() != config.t_h {
            return Err(CircleError::WindowLength {
                expected: config.t_h,
                found: neighbor.window.len(),
            });
        }
        let last = *neighbor.window.last().expect("checked length");
        let bearing = relative_angle(anchor, last);
        let k = assign_partition(bearing, n)?;
        add(
            k,
            [
                speed(&neighbor.window, config.step_seconds),
                (last[0] - anchor[0]).hypot(last[1] - anchor[1]),
                bearing,
                heading(&neighbor.window),
            ],
        );
    }

    let values = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &c)| {
            if c == 0 {
                row
            } else {
                row.into_iter().map(|s| s / c as f64).collect()
            }
        })
        .collect();
    Ok(MetaMatrix {
        factors: config.factors,
        values,
        counts,
    })
}

/// Extends `rows` with zero rows up to `t_h` rows.
pub fn zero_pad(rows: &[Vec<f64>], t_h: usize) -> Result<Vec<Vec<f64>>, CircleError> {
    if rows.len() > t_h {
        return Err(CircleError::TooManyPartitions {
            n_partitions: rows.len(),
            t_h,
        });
    }
    let width = rows.first().map_or(0, Vec::len);
    let mut out = rows.to_vec();
    out.resize(t_h, vec![0.0; width]);
    Ok(out)
}

/// Squared norm of each partition feature row, and its share of the total.
pub fn attention_scores(rows: &[Vec<f64>]) -> AttentionProfile {
    let raw: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let total: f64 = raw.iter().sum();
    let normalized = if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![0.0; raw.len()]
    };
    AttentionProfile { raw, normalized }
}

/// Observed window of a synthetic neighbor moving linearly from `start` to `end`.
pub fn interpolate_window(start: Point, end: Point, t_h: usize) -> Vec<Point> {
    if t_h == 1 {
        return vec![end];
    }
    (0..t_h)
        .map(|k| {
            let s = k as f64 / (t_h - 1) as f64;
            [
                start[0] + s * (end[0] - start[0]),
                start[1] + s * (end[1] - start[1]),
            ]
        })
        .collect()
}

/// Appends a manual neighbor and re-applies the neighbor cap.
pub fn inject_manual_neighbor(
    case: &PredictionCase,
    start: Point,
    end: Point,
    cap: usize,
) -> PredictionCase {
    let mut out = case.clone();
    let ordinal = case
        .neighbors
        .iter()
        .map(|n| n.ordinal + 1)
        .max()
        .unwrap_or(0);
    let manual_index = case.neighbors.iter().filter(|n| n.manual).count();
    out.neighbors.push(Neighbor {
        agent_id: format!("manual-{manual_index}"),
        ordinal,
        window: interpolate_window(start, end, case.t_h()),
        manual: true,
    });
    select_neighbors(&out, cap)
}
