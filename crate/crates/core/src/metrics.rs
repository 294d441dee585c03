//! Convergence diagnostics computed out-of-band from agent snapshots.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{backward_blocks, forward_blocks, masked_loss, masked_loss_grad, LossKind, ModelSpec, ParamBank, Propagator};
use crate::graph::{DataGraph, Labels, Partition};

/// One line of the per-iteration JSON Lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_mse: Option<f64>,
    /// `||w - Pi_S w||` over the stacked agent parameters.
    pub consensus_residual: f64,
    /// Largest Euclidean distance between two agents' parameter vectors.
    pub max_pairwise_distance: f64,
    /// `g^t`, when computed at this iteration.
    pub stationarity: Option<f64>,
    /// Running minimum of every `g` computed so far.
    pub stationarity_best: Option<f64>,
    pub messages_forward: u64,
    pub messages_backward: u64,
    pub messages_consensus: u64,
    pub eta_t: f64,
}

impl TrainRecord {
    pub fn new(iteration: usize, train_loss: f64, eta_t: f64) -> Self {
        TrainRecord {
            iteration,
            train_loss,
            test_accuracy: None,
            test_mse: None,
            consensus_residual: 0.0,
            max_pairwise_distance: 0.0,
            stationarity: None,
            stationarity_best: None,
            messages_forward: 0,
            messages_backward: 0,
            messages_consensus: 0,
            eta_t,
        }
    }
}

/// Mean of the agents' parameter banks.
pub fn mean_params(banks: &[ParamBank]) -> ParamBank {
    let mut mean = banks[0].scaled(0.0);
    for b in banks {
        mean.axpy(1.0 / banks.len() as f64, b);
    }
    mean
}

/// `||w - Pi_S w||`: distance of the stacked parameters from agreement.
pub fn consensus_residual(banks: &[ParamBank]) -> f64 {
    if banks.is_empty() {
        return 0.0;
    }
    let mean = mean_params(banks);
    banks
        .iter()
        .map(|b| {
            let mut d = b.clone();
            d.axpy(-1.0, &mean);
            d.norm_squared()
        })
        .sum::<f64>()
        .sqrt()
}

pub fn max_pairwise_distance(banks: &[ParamBank]) -> f64 {
    let flat: Vec<Vec<f64>> = banks.iter().map(ParamBank::flatten).collect();
    let mut best = 0.0f64;
    for a in 0..flat.len() {
        for b in a + 1..flat.len() {
            let d: f64 = flat[a]
                .iter()
                .zip(&flat[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            best = best.max(d.sqrt());
        }
    }
    best
}

/// Global training loss and its gradient with respect to every agent's bank,
/// evaluated densely. This is the reference the message-passing engine is
/// checked against.
pub fn oracle_gradients(
    graph: &DataGraph,
    partition: &Partition,
    banks: &[ParamBank],
    spec: &ModelSpec,
) -> Result<(f64, Vec<ParamBank>)> {
    if banks.len() != partition.m {
        return Err(Error::dim("agent banks", partition.m, banks.len()));
    }
    let prop = Propagator::from_graph(graph)?;
    let kind = LossKind::for_labels(&graph.labels);
    let cache = forward_blocks(&prop, &graph.features, banks, &partition.assign, spec, None)?;
    let loss = masked_loss(cache.output(), &graph.labels, graph.train_mask(), kind)?;
    let dout = masked_loss_grad(cache.output(), &graph.labels, graph.train_mask(), kind)?;
    let grads = backward_blocks(&prop, &cache, banks, spec, &dout)?;
    Ok((loss, grads))
}

/// `g = grad L(w_S)^T Pi_S grad L(w_S)` at the agents' average, via
/// `(1/m) ||sum_k grad_k L||^2`.
pub fn stationarity(
    graph: &DataGraph,
    partition: &Partition,
    banks: &[ParamBank],
    spec: &ModelSpec,
) -> Result<f64> {
    let mean = mean_params(banks);
    let consensus = vec![mean; banks.len()];
    let (_, grads) = oracle_gradients(graph, partition, &consensus, spec)?;
    let total = mean_params(&grads).scaled(grads.len() as f64);
    Ok(total.norm_squared() / banks.len() as f64)
}

/// Fraction of rows in `mask` whose argmax (lowest index on ties) equals the label.
pub fn accuracy(outputs: &DMatrix<f64>, labels: &Labels, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::param("accuracy mask is empty"));
    }
    let Labels::Classes(classes) = labels else {
        return Err(Error::param("accuracy needs class labels"));
    };
    let mut correct = 0usize;
    for &i in mask {
        let row = outputs.row(i);
        let mut arg = 0;
        for c in 1..row.len() {
            if row[c] > row[arg] {
                arg = c;
            }
        }
        if classes[i] == Some(arg) {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}
