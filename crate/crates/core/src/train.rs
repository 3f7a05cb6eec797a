//! Mini-batch training on the mean squared displacement loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_case, select_neighbors, PredictionCase};
use crate::model::{case_loss, sample_noise, Bound, ModelConfig, ModelError, ParameterStore};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint callback failed: {0}")]
    Callback(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Invoke the checkpoint callback every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 600 epochs with batches of 1500.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs: 600,
            batch_size: 1500,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: ParameterStore,
    v: ParameterStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = ParameterStore::from_map(
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        );
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` holds one tensor per parameter name.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &ParameterStore,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.get_mut(name).expect("state mirrors params");
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("state mirrors params");
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
        }
        let m = state.m.get(name).expect("present");
        let v = state.v.get(name).expect("present");
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    /// Mean per-case loss of each epoch, measured before that epoch's updates.
    pub loss_curve: Vec<f64>,
}

/// Loss and gradient of one case.
pub fn case_gradient(
    params: &ParameterStore,
    config: &ModelConfig,
    case: &PredictionCase,
    noise: Option<&[f64]>,
) -> Result<(f64, ParameterStore), ModelError> {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params, true);
    let loss = case_loss(&mut graph, &bound, config, case, noise)?;
    graph.backward(loss).map_err(ModelError::from)?;
    let grads = bound
        .iter()
        .map(|(name, &var)| {
            let g = graph
                .grad(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(var).shape()));
            (name.clone(), g)
        })
        .collect();
    Ok((graph.value(loss).data()[0], ParameterStore::from_map(grads)))
}

pub fn train(
    dataset: &[PredictionCase],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let params = ParameterStore::init(model, config.seed)?;
    train_from(dataset, model, config, params, |_, _| Ok(()))
}

/// Trains starting from `params`. `on_checkpoint(epoch, params)` runs every
/// `checkpoint_every` epochs and after the last one.
pub fn train_from(
    dataset: &[PredictionCase],
    model: &ModelConfig,
    config: &TrainConfig,
    mut params: ParameterStore,
    mut on_checkpoint: impl FnMut(usize, &ParameterStore) -> Result<(), String>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.validate()?;
    params.check(model)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(c) = dataset.iter().find(|c| c.future.is_none()) {
        return Err(ModelError::MissingFuture(c.case_id.clone()).into());
    }
    let cases: Vec<PredictionCase> = dataset
        .iter()
        .map(|c| normalize_case(&select_neighbors(c, model.partition.neighbor_cap)).0)
        .collect();

    let mut state = AdamState::new(&params);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..cases.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let noise_seed = rand::Rng::gen::<u64>(&mut rng);
        let noises = sample_noise(model.noise_dim, cases.len(), noise_seed);

        let mut case_losses = vec![0.0; cases.len()];
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, ParameterStore)> = batch
                .par_iter()
                .map(|&i| case_gradient(&params, model, &cases[i], Some(&noises[i])))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut total = ParameterStore::from_map(
                params
                    .iter()
                    .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                    .collect(),
            );
            for (&i, (loss, grads)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                case_losses[i] = *loss;
                for (name, acc) in total.iter_mut() {
                    let g = grads.get(name).expect("same names");
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += scale * b);
                }
            }
            adam_step(&mut params, &total, &mut state, config);
            if params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
        }
        let mean = case_losses.iter().sum::<f64>() / cases.len() as f64;
        if !mean.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        loss_curve.push(mean);

        let due = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        if due || epoch == config.epochs {
            on_checkpoint(epoch, &params).map_err(TrainError::Callback)?;
        }
    }
    Ok(TrainOutcome { params, loss_curve })
}

/// Two-column text: `epoch mean_loss`.
pub fn format_loss_curve(curve: &[f64]) -> String {
    let mut out = String::from("# epoch mean_loss\n");
    for (i, loss) in curve.iter().enumerate() {
        writeln!(out, "{} {:.17e}", i + 1, loss).expect("writing to a string");
    }
    out
}
