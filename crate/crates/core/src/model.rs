//! Transformer forecaster with an optional SocialCircle branch.
//!
//! Pipeline for one normalized case:
//! meta matrix -> `g_embed` (two-layer perceptron) -> zero-pad to `t_h` rows;
//! observed window -> linear embedding + sinusoidal position encoding;
//! both concatenated and passed through the fuse layer; then a post-norm
//! transformer encoder, a flattened readout (optionally with a noise vector
//! appended) and a linear head that predicts displacements from the last
//! observed position.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circle::{
    attention_scores, compute_meta, AttentionProfile, CircleError, FactorSet, MetaMatrix,
    PartitionConfig,
};
use crate::data::{normalize_case, select_neighbors, Point, PredictionCase};
use crate::tensor::{Graph, Tensor, TensorError, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Circle(#[from] CircleError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("case {0} has no ground-truth future")]
    MissingFuture(String),
    #[error("noise vector has length {found}, expected {expected}")]
    NoiseLength { expected: usize, found: usize },
    #[error("K must be at least 1")]
    ZeroSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_sc: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub use_socialcircle: bool,
    pub noise_dim: usize,
    pub partition: PartitionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_sc: 64,
            n_layers: 2,
            n_heads: 4,
            t_h: 8,
            t_f: 12,
            use_socialcircle: true,
            noise_dim: 16,
            partition: PartitionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.d_sc == 0 {
            return Err(ModelError::Config("d and d_sc must be positive".into()));
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.t_h == 0 || self.t_f == 0 {
            return Err(ModelError::Config("t_h and t_f must be positive".into()));
        }
        if self.partition.t_h != self.t_h {
            return Err(ModelError::Config(format!(
                "partition t_h {} differs from model t_h {}",
                self.partition.t_h, self.t_h
            )));
        }
        self.partition.validate()?;
        Ok(())
    }

    fn ff_width(&self) -> usize {
        2 * self.d
    }

    /// Expected name and shape of every parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dsc) = (self.d, self.d_sc);
        let mut shapes = vec![
            ("traj.w".to_string(), vec![2, d]),
            ("traj.b".to_string(), vec![d]),
        ];
        if self.use_socialcircle {
            let f = self.partition.factors.len();
            shapes.extend([
                ("sc.w1".to_string(), vec![f, dsc]),
                ("sc.b1".to_string(), vec![dsc]),
                ("sc.w2".to_string(), vec![dsc, dsc]),
                ("sc.b2".to_string(), vec![dsc]),
                ("fuse.w".to_string(), vec![d + dsc, d]),
                ("fuse.b".to_string(), vec![d]),
            ]);
        }
        for i in 0..self.n_layers {
            for m in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("layer{i}.attn.{m}"), vec![d, d]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                shapes.push((format!("layer{i}.attn.{b}"), vec![d]));
            }
            for ln in ["ln1", "ln2"] {
                shapes.push((format!("layer{i}.{ln}.gain"), vec![d]));
                shapes.push((format!("layer{i}.{ln}.bias"), vec![d]));
            }
            shapes.push((format!("layer{i}.ff.w1"), vec![d, self.ff_width()]));
            shapes.push((format!("layer{i}.ff.b1"), vec![self.ff_width()]));
            shapes.push((format!("layer{i}.ff.w2"), vec![self.ff_width(), d]));
            shapes.push((format!("layer{i}.ff.b2"), vec![d]));
        }
        shapes.push((
            "head.w".to_string(),
            vec![self.t_h * d + self.noise_dim, self.t_f * 2],
        ));
        shapes.push(("head.b".to_string(), vec![self.t_f * 2]));
        shapes
    }
}

/// All trainable arrays, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    /// Xavier-uniform weights, zero biases and unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 2 {
                    Tensor::xavier_uniform(shape[0], shape[1], &mut rng)
                } else if name.ends_with(".gain") {
                    Tensor::filled(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(ParameterStore { params })
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        ParameterStore { params }
    }

    /// Checks names and shapes against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for (name, shape) in config.parameter_shapes() {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` has non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// Parameters registered as leaves of one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(graph: &mut Graph, store: &ParameterStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    /// Replaces the leaf used for `name`.
    pub fn rebind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardTrace {
    /// `t_f x 2` prediction in the case's frame.
    pub prediction: Var,
    /// Embedded partition rows before padding (`N x d_sc`).
    pub partition_rows: Option<Var>,
    pub meta: Option<MetaMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    /// `K` trajectories of `t_f` points in the normalized frame.
    pub samples: Vec<Vec<Point>>,
    pub attention: Option<AttentionProfile>,
    pub meta: Option<MetaMatrix>,
    /// The same samples mapped back to scene coordinates.
    pub denormalized: Option<Vec<Vec<Point>>>,
}

pub fn position_encoding(rows: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * width);
    for t in 0..rows {
        for j in 0..width {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / width as f64);
            let angle = t as f64 / rate;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(rows, width, data).expect("consistent size")
}

fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::matrix(
        points.len(),
        2,
        points.iter().flat_map(|p| p.iter().copied()).collect(),
    )
    .expect("consistent size")
}

fn tensor_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Builds forward passes on a graph with bound parameters.
pub struct Net<'a> {
    pub graph: &'a mut Graph,
    pub params: &'a Bound,
    pub config: &'a ModelConfig,
    /// When set, meta columns of factors outside this set are zeroed.
    pub active_factors: Option<FactorSet>,
}

impl Net<'_> {
    fn p(&self, name: &str) -> Result<Var, ModelError> {
        self.params.var(name)
    }

    fn affine(&mut self, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(y, b)?)
    }

    pub fn embed_trajectory(&mut self, observed: Var) -> Result<Var, ModelError> {
        let x = self.affine(observed, "traj.w", "traj.b")?;
        let pe = self
            .graph
            .constant(position_encoding(self.config.t_h, self.config.d));
        Ok(self.graph.add(x, pe)?)
    }

    /// Returns `(padded, unpadded)` embedded partition rows.
    pub fn embed_socialcircle(&mut self, meta: &MetaMatrix) -> Result<(Var, Var), ModelError> {
        let rows = Tensor::from_rows(&meta.values)?;
        let x = self.graph.constant(rows);
        let h = self.affine(x, "sc.w1", "sc.b1")?;
        let h = self.graph.relu(h);
        let embedded = self.affine(h, "sc.w2", "sc.b2")?;
        let n = meta.n_partitions();
        let padded = if n < self.config.t_h {
            let zeros = self
                .graph
                .constant(Tensor::zeros(&[self.config.t_h - n, self.config.d_sc]));
            self.graph.concat_rows(&[embedded, zeros])?
        } else if n == self.config.t_h {
            embedded
        } else {
            return Err(CircleError::TooManyPartitions {
                n_partitions: n,
                t_h: self.config.t_h,
            }
            .into());
        };
        Ok((padded, embedded))
    }

    pub fn fuse(&mut self, traj: Var, sc: Var) -> Result<Var, ModelError> {
        let joined = self.graph.concat(&[traj, sc])?;
        let y = self.affine(joined, "fuse.w", "fuse.b")?;
        Ok(self.graph.relu(y))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let y = self.graph.layer_norm(x, LAYER_NORM_EPS);
        let gain = self.p(&format!("{prefix}.gain"))?;
        let bias = self.p(&format!("{prefix}.bias"))?;
        let y = self.graph.mul_row(y, gain)?;
        Ok(self.graph.add_row(y, bias)?)
    }

    fn self_attention(&mut self, x: Var, layer: usize) -> Result<Var, ModelError> {
        let pre = format!("layer{layer}.attn");
        let q = self.affine(x, &format!("{pre}.wq"), &format!("{pre}.bq"))?;
        let k = self.affine(x, &format!("{pre}.wk"), &format!("{pre}.bk"))?;
        let v = self.affine(x, &format!("{pre}.wv"), &format!("{pre}.bv"))?;
        let head_width = self.config.d / self.config.n_heads;
        let scale = 1.0 / (head_width as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * head_width, (h + 1) * head_width);
            let qh = self.graph.slice(q, lo, hi)?;
            let kh = self.graph.slice(k, lo, hi)?;
            let vh = self.graph.slice(v, lo, hi)?;
            let kt = self.graph.transpose(kh);
            let scores = self.graph.matmul(qh, kt)?;
            let scores = self.graph.scale(scores, scale);
            let weights = self.graph.softmax(scores);
            heads.push(self.graph.matmul(weights, vh)?);
        }
        let joined = self.graph.concat(&heads)?;
        self.affine(joined, &format!("{pre}.wo"), &format!("{pre}.bo"))
    }

    fn encoder_layer(&mut self, x: Var, layer: usize) -> Result<Var, ModelError> {
        let attn = self.self_attention(x, layer)?;
        let x = self.graph.add(x, attn)?;
        let x = self.layer_norm(x, &format!("layer{layer}.ln1"))?;
        let h = self.affine(
            x,
            &format!("layer{layer}.ff.w1"),
            &format!("layer{layer}.ff.b1"),
        )?;
        let h = self.graph.relu(h);
        let h = self.affine(
            h,
            &format!("layer{layer}.ff.w2"),
            &format!("layer{layer}.ff.b2"),
        )?;
        let x = self.graph.add(x, h)?;
        self.layer_norm(x, &format!("layer{layer}.ln2"))
    }

    /// Full forward pass for a normalized, neighbor-capped case.
    pub fn forward(
        &mut self,
        case: &PredictionCase,
        noise: Option<&[f64]>,
    ) -> Result<ForwardTrace, ModelError> {
        let config = self.config;
        if case.observed.len() != config.t_h {
            return Err(CircleError::WindowLength {
                expected: config.t_h,
                found: case.observed.len(),
            }
            .into());
        }
        let observed = self.graph.constant(points_tensor(&case.observed));
        let traj = self.embed_trajectory(observed)?;

        let (mut x, partition_rows, meta) = if config.use_socialcircle {
            let mut meta = compute_meta(case, &config.partition)?;
            if let Some(active) = self.active_factors {
                mask_factors(&mut meta, active);
            }
            let (padded, rows) = self.embed_socialcircle(&meta)?;
            (self.fuse(traj, padded)?, Some(rows), Some(meta))
        } else {
            (traj, None, None)
        };

        for layer in 0..config.n_layers {
            x = self.encoder_layer(x, layer)?;
        }

        let mut flat = self.graph.reshape(x, &[1, config.t_h * config.d])?;
        if config.noise_dim > 0 {
            let zeros;
            let noise = match noise {
                Some(n) => n,
                None => {
                    zeros = vec![0.0; config.noise_dim];
                    &zeros
                }
            };
            if noise.len() != config.noise_dim {
                return Err(ModelError::NoiseLength {
                    expected: config.noise_dim,
                    found: noise.len(),
                });
            }
            let z = self
                .graph
                .constant(Tensor::matrix(1, config.noise_dim, noise.to_vec())?);
            flat = self.graph.concat(&[flat, z])?;
        }
        let out = self.affine(flat, "head.w", "head.b")?;
        let out = self.graph.reshape(out, &[config.t_f, 2])?;
        let last = case.last_observed();
        let anchor = self.graph.constant(Tensor::new(vec![2], last.to_vec())?);
        let prediction = self.graph.add_row(out, anchor)?;
        Ok(ForwardTrace {
            prediction,
            partition_rows,
            meta,
        })
    }
}

/// Zeroes the columns of factors not in `active`.
pub fn mask_factors(meta: &mut MetaMatrix, active: FactorSet) {
    let off: Vec<usize> = meta
        .factors
        .iter()
        .enumerate()
        .filter(|(_, f)| !active.contains(*f))
        .map(|(i, _)| i)
        .collect();
    for row in &mut meta.values {
        for &i in &off {
            row[i] = 0.0;
        }
    }
}

fn with_frozen<T>(
    params: &ParameterStore,
    config: &ModelConfig,
    active_factors: Option<FactorSet>,
    f: impl FnOnce(&mut Net) -> Result<T, ModelError>,
) -> Result<T, ModelError> {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params, false);
    let mut net = Net {
        graph: &mut graph,
        params: &bound,
        config,
        active_factors,
    };
    f(&mut net)
}

/// `t_h x d` embedding of an observed window.
pub fn embed_trajectory(
    observed: &[Point],
    params: &ParameterStore,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    with_frozen(params, config, None, |net| {
        let x = net.graph.constant(points_tensor(observed));
        let y = net.embed_trajectory(x)?;
        Ok(net.graph.value(y).clone())
    })
}

/// `t_h x d_sc` embedding of a meta matrix; rows past the partition count are zero.
pub fn embed_socialcircle(
    meta: &MetaMatrix,
    params: &ParameterStore,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    with_frozen(params, config, None, |net| {
        let (padded, _) = net.embed_socialcircle(meta)?;
        Ok(net.graph.value(padded).clone())
    })
}

pub fn fuse(
    traj: &Tensor,
    sc: &Tensor,
    params: &ParameterStore,
    config: &ModelConfig,
) -> Result<Tensor, ModelError> {
    with_frozen(params, config, None, |net| {
        let a = net.graph.constant(traj.clone());
        let b = net.graph.constant(sc.clone());
        let y = net.fuse(a, b)?;
        Ok(net.graph.value(y).clone())
    })
}

/// Deterministic forward pass on a normalized, capped case.
pub fn forward(
    case: &PredictionCase,
    params: &ParameterStore,
    config: &ModelConfig,
    noise: Option<&[f64]>,
) -> Result<Vec<Point>, ModelError> {
    with_frozen(params, config, None, |net| {
        let trace = net.forward(case, noise)?;
        Ok(tensor_points(net.graph.value(trace.prediction)))
    })
}

/// Noise vectors for `k` samples. Sample `i` is the same for every `k > i`.
pub fn sample_noise(noise_dim: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            (0..noise_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Normalizes and caps `case`, then draws `k` predictions with seeded noise.
pub fn sample_k(
    case: &PredictionCase,
    params: &ParameterStore,
    config: &ModelConfig,
    k: usize,
    seed: u64,
) -> Result<PredictionOutput, ModelError> {
    sample_k_masked(case, params, config, k, seed, None)
}

/// [`sample_k`] with factors outside `active_factors` zeroed in the meta matrix.
pub fn sample_k_masked(
    case: &PredictionCase,
    params: &ParameterStore,
    config: &ModelConfig,
    k: usize,
    seed: u64,
    active_factors: Option<FactorSet>,
) -> Result<PredictionOutput, ModelError> {
    if k == 0 {
        return Err(ModelError::ZeroSamples);
    }
    let capped = select_neighbors(case, config.partition.neighbor_cap);
    let (normalized, transform) = normalize_case(&capped);
    let noises = sample_noise(config.noise_dim, k, seed);

    let mut samples = Vec::with_capacity(k);
    let mut attention = None;
    let mut meta = None;
    with_frozen(params, config, active_factors, |net| {
        for (i, noise) in noises.iter().enumerate() {
            let trace = net.forward(&normalized, Some(noise))?;
            samples.push(tensor_points(net.graph.value(trace.prediction)));
            if i == 0 {
                attention = trace
                    .partition_rows
                    .map(|rows| attention_scores(&net.graph.value(rows).to_rows()));
                meta = trace.meta;
            }
        }
        Ok(())
    })?;
    let denormalized = samples.iter().map(|s| transform.invert_all(s)).collect();
    Ok(PredictionOutput {
        samples,
        attention,
        meta,
        denormalized: Some(denormalized),
    })
}

/// Mean-squared-error loss for one normalized case, built on `graph`.
pub fn case_loss(
    graph: &mut Graph,
    params: &Bound,
    config: &ModelConfig,
    case: &PredictionCase,
    noise: Option<&[f64]>,
) -> Result<Var, ModelError> {
    let future = case
        .future
        .as_ref()
        .ok_or_else(|| ModelError::MissingFuture(case.case_id.clone()))?;
    let mut net = Net {
        graph,
        params,
        config,
        active_factors: None,
    };
    let trace = net.forward(case, noise)?;
    let target = net.graph.constant(points_tensor(future));
    Ok(net.graph.mse(trace.prediction, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle::{inject_manual_neighbor, interpolate_window};
    use crate::data::{Neighbor, Unit};

    pub(crate) fn sample_case() -> PredictionCase {
        PredictionCase {
            case_id: "c0".into(),
            scene_id: "s".into(),
            target_id: "t".into(),
            observed: interpolate_window([-2.8, 0.3], [0.0, 0.0], 8),
            future: Some(interpolate_window([0.4, 0.0], [4.8, -0.1], 12)),
            neighbors: vec![Neighbor {
                agent_id: "n".into(),
                ordinal: 1,
                window: interpolate_window([3.0, 2.0], [1.5, 1.0], 8),
                manual: false,
            }],
            unit: Unit::Meters,
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            d_sc: 16,
            n_layers: 1,
            n_heads: 2,
            noise_dim: 0,
            ..Default::default()
        }
    }

    #[test]
    fn default_shapes() {
        let config = ModelConfig::default();
        let params = ParameterStore::init(&config, 0).unwrap();
        params.check(&config).unwrap();
        let case = sample_case();
        let traj = embed_trajectory(&case.observed, &params, &config).unwrap();
        assert_eq!(traj.shape(), &[8, 64]);
        let meta = compute_meta(&case, &config.partition).unwrap();
        let sc = embed_socialcircle(&meta, &params, &config).unwrap();
        assert_eq!(sc.shape(), &[8, 64]);
        assert_eq!(
            fuse(&traj, &sc, &params, &config).unwrap().shape(),
            &[8, 64]
        );
        let pred = forward(&case, &params, &config, Some(&[0.1; 16])).unwrap();
        assert_eq!(pred.len(), 12);
    }

    #[test]
    fn zero_trajectory_weights_give_position_encoding() {
        let config = small_config();
        let mut params = ParameterStore::init(&config, 1).unwrap();
        params.insert("traj.w", Tensor::zeros(&[2, 16]));
        let out = embed_trajectory(&sample_case().observed, &params, &config).unwrap();
        assert_eq!(out, position_encoding(8, 16));
    }

    #[test]
    fn fewer_partitions_pad_with_zero_rows() {
        let mut config = small_config();
        config.partition.n_partitions = 4;
        let params = ParameterStore::init(&config, 2).unwrap();
        let meta = compute_meta(&sample_case(), &config.partition).unwrap();
        let sc = embed_socialcircle(&meta, &params, &config).unwrap();
        assert_eq!(sc.shape(), &[8, 16]);
        assert!(sc.data()[4 * 16..].iter().all(|&v| v == 0.0));
        assert!(sc.data()[..4 * 16].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fuse_projection_identity() {
        let config = small_config();
        let mut params = ParameterStore::init(&config, 3).unwrap();
        let mut w = Tensor::zeros(&[32, 16]);
        for i in 0..16 {
            w.data_mut()[i * 16 + i] = 1.0;
        }
        params.insert("fuse.w", w);
        let traj =
            Tensor::matrix(8, 16, (0..128).map(|i| (i % 7) as f64 * 0.25).collect()).unwrap();
        let sc = Tensor::filled(&[8, 16], -3.0);
        assert_eq!(fuse(&traj, &sc, &params, &config).unwrap(), traj);
    }

    #[test]
    fn zero_head_predicts_last_position() {
        let config = ModelConfig {
            noise_dim: 4,
            ..small_config()
        };
        let mut params = ParameterStore::init(&config, 4).unwrap();
        params.insert("head.w", Tensor::zeros(&[8 * 16 + 4, 24]));
        let mut case = sample_case();
        case = case.map_points(|p| [p[0] + 2.0, p[1] - 1.0]);
        let pred = forward(&case, &params, &config, Some(&[1.0, -1.0, 0.5, 2.0])).unwrap();
        assert!(pred.iter().all(|p| *p == case.last_observed()));
    }

    #[test]
    fn noise_controls_sample_diversity() {
        let config = ModelConfig {
            noise_dim: 16,
            ..small_config()
        };
        let params = ParameterStore::init(&config, 5).unwrap();
        let out = sample_k(&sample_case(), &params, &config, 2, 9).unwrap();
        assert_ne!(out.samples[0], out.samples[1]);
        let again = sample_k(&sample_case(), &params, &config, 2, 9).unwrap();
        assert_eq!(out, again);

        let config = small_config();
        let params = ParameterStore::init(&config, 5).unwrap();
        let out = sample_k(&sample_case(), &params, &config, 2, 9).unwrap();
        assert_eq!(out.samples[0], out.samples[1]);
        let single = forward(&sample_case(), &params, &config, None).unwrap();
        assert_eq!(
            sample_k(&sample_case(), &params, &config, 1, 0)
                .unwrap()
                .samples[0],
            single
        );
    }

    #[test]
    fn sample_twenty() {
        let config = ModelConfig {
            d: 16,
            d_sc: 16,
            n_heads: 2,
            ..Default::default()
        };
        let params = ParameterStore::init(&config, 6).unwrap();
        let out = sample_k(&sample_case(), &params, &config, 20, 1).unwrap();
        assert_eq!(out.samples.len(), 20);
        assert!(out.samples.iter().all(|s| s.len() == 12));
        let att = out.attention.unwrap();
        assert_eq!(att.raw.len(), 8);
        assert!((att.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(matches!(
            sample_k(&sample_case(), &params, &config, 0, 1),
            Err(ModelError::ZeroSamples)
        ));
    }

    #[test]
    fn plain_mode_ignores_neighbors() {
        let config = ModelConfig {
            use_socialcircle: false,
            ..small_config()
        };
        let params = ParameterStore::init(&config, 7).unwrap();
        assert!(params.get("fuse.w").is_none());
        let base = sample_case();
        let probed = inject_manual_neighbor(&base, [1.0, 0.0], [0.5, 0.0], 50);
        let a = sample_k(&base, &params, &config, 1, 0).unwrap();
        let b = sample_k(&probed, &params, &config, 1, 0).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a.attention.is_none());
    }

    #[test]
    fn config_validation() {
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(matches!(bad_heads.validate(), Err(ModelError::Config(_))));
        let mut too_many = ModelConfig::default();
        too_many.partition.n_partitions = 9;
        assert!(matches!(
            too_many.validate(),
            Err(ModelError::Circle(CircleError::TooManyPartitions { .. }))
        ));
    }

    #[test]
    fn missing_parameter_detected() {
        let config = small_config();
        let mut params = ParameterStore::init(&config, 0).unwrap();
        params.params.remove("head.b");
        assert_eq!(
            params.check(&config),
            Err(ModelError::MissingParameter("head.b".into()))
        );
    }
}
