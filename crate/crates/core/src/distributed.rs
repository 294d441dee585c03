//! The multi-agent engine.
//!
//! Each agent owns a subset of data nodes and a private copy of the model
//! weights. A layer of order `P` costs `P` synchronous communication hops:
//! in a hop, every agent sends to each neighbouring agent one batch holding,
//! per destination node, the shift-weighted partial sum of its own rows
//! (`sum_{j owned by z} S_ij y_j`). Receivers add their local term first and
//! then the batches in ascending sender order, so results do not depend on
//! thread scheduling. The backward pass runs the same protocol on `S^T`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::CommGraph;
use crate::error::{Error, Result};
use crate::gcn::{
    activation_backward, add_loss_grad_rows, apply_activation, init_params, test_metrics, Basis,
    DropoutMasks, LossKind, ModelSpec, ParamBank, Propagator, TrainConfig,
};
use crate::graph::{DataGraph, Labels, Partition};
use crate::metrics::{self, TrainRecord};
use crate::optim::{local_step, step_size, OptimizerKind, OptimizerState};
use crate::rng::{stream, Purpose};
use crate::sparse::CsrMatrix;
use crate::topology::MixingMatrix;

pub use crate::optim::{local_step as agent_local_step, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Agents processed one after another in id order.
    #[default]
    Sequential,
    /// Agent work between barriers runs on the rayon pool.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub iteration: usize,
    pub layer: usize,
    pub hop: usize,
    pub direction: Direction,
}

/// Partial sums shipped from one agent to another in a single hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageBatch {
    pub round: Round,
    pub from_agent: usize,
    pub to_agent: usize,
    /// `(destination node id, partial sum)`.
    pub payload: Vec<(usize, Vec<f64>)>,
}

impl MessageBatch {
    pub fn scalars(&self) -> u64 {
        self.payload.iter().map(|(_, v)| v.len() as u64).sum()
    }
}

/// Scalar traffic counters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MessageLog {
    pub forward: u64,
    pub backward: u64,
    pub consensus: u64,
    /// `[from][to]` forward scalars.
    pub forward_pairs: Vec<Vec<u64>>,
    pub backward_pairs: Vec<Vec<u64>>,
    /// Every batch, when retention is enabled.
    pub batches: Option<Vec<MessageBatch>>,
}

impl MessageLog {
    pub fn new(m: usize, retain: bool) -> Self {
        MessageLog {
            forward_pairs: vec![vec![0; m]; m],
            backward_pairs: vec![vec![0; m]; m],
            batches: retain.then(Vec::new),
            ..Default::default()
        }
    }

    fn record(&mut self, batch: MessageBatch) {
        let s = batch.scalars();
        match batch.round.direction {
            Direction::Forward => {
                self.forward += s;
                self.forward_pairs[batch.from_agent][batch.to_agent] += s;
            }
            Direction::Backward => {
                self.backward += s;
                self.backward_pairs[batch.from_agent][batch.to_agent] += s;
            }
        }
        if let Some(b) = self.batches.as_mut() {
            b.push(batch);
        }
    }
}

/// Routing for one operator `M`: `(M y)_r = sum_c M_rc y_c`, row `r` computed
/// by the owner of `r` from partial sums sent by the owners of the `c`s.
#[derive(Debug, Clone)]
struct Routes {
    /// `[sender] -> [(receiver, [(destination node, [(sender-local row, weight)])])]`.
    outgoing: Vec<Vec<(usize, Vec<(usize, Vec<(usize, f64)>)>)>>,
    /// `[agent][local row] -> [(local row, weight)]`.
    local: Vec<Vec<Vec<(usize, f64)>>>,
}

impl Routes {
    fn build(op: &CsrMatrix, assign: &[usize], local_index: &[usize], agent_nodes: &[Vec<usize>]) -> Self {
        let m = agent_nodes.len();
        let mut outgoing: Vec<BTreeMap<usize, BTreeMap<usize, Vec<(usize, f64)>>>> = vec![BTreeMap::new(); m];
        let mut local = agent_nodes
            .iter()
            .map(|nodes| vec![Vec::new(); nodes.len()])
            .collect::<Vec<_>>();
        for (r, c, w) in op.triplets() {
            if w == 0.0 {
                continue;
            }
            let (k, z) = (assign[r], assign[c]);
            if k == z {
                local[k][local_index[r]].push((local_index[c], w));
            } else {
                outgoing[z]
                    .entry(k)
                    .or_default()
                    .entry(r)
                    .or_default()
                    .push((local_index[c], w));
            }
        }
        Routes {
            outgoing: outgoing
                .into_iter()
                .map(|dests| {
                    dests
                        .into_iter()
                        .map(|(k, targets)| (k, targets.into_iter().collect()))
                        .collect()
                })
                .collect(),
            local,
        }
    }
}

fn map_agents<T, F>(mode: ExecMode, m: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..m).map(f).collect(),
        ExecMode::Parallel => (0..m).into_par_iter().map(f).collect(),
    }
}

type Blocks = Vec<DMatrix<f64>>;

fn blocks_axpy(acc: &mut Blocks, alpha: f64, other: &Blocks) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b * alpha;
    }
}

/// Per-agent activations kept between the forward and backward passes.
#[derive(Debug, Clone)]
pub struct AgentCache {
    pub iteration: usize,
    pub inputs: Vec<DMatrix<f64>>,
    pub pre_activations: Vec<DMatrix<f64>>,
    pub outputs: Vec<DMatrix<f64>>,
    pub dropout: Option<DropoutMasks>,
    params: ParamBank,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub agent_id: usize,
    pub params: ParamBank,
    pub optimizer: OptimizerState,
    pub cache: Option<AgentCache>,
    /// Global ids of owned nodes, ascending.
    pub local_nodes: Vec<usize>,
    /// Global ids of owned training nodes.
    pub local_train: Vec<usize>,
}

/// Static description of the deployment: who owns what and who talks to whom.
#[derive(Debug, Clone)]
pub struct Network {
    m: usize,
    spec: ModelSpec,
    assign: Vec<usize>,
    local_index: Vec<usize>,
    agent_nodes: Vec<Vec<usize>>,
    /// `(local row, global id)` of owned training nodes.
    agent_train: Vec<Vec<(usize, usize)>>,
    features: Vec<DMatrix<f64>>,
    labels: Labels,
    loss: LossKind,
    /// `|T_D|`, handed to every agent once at setup.
    train_total: usize,
    forward_routes: BTreeMap<Basis, Routes>,
    backward_routes: BTreeMap<Basis, Routes>,
    pub mode: ExecMode,
}

impl Network {
    /// Validates that every cross-agent data edge has a channel in `channels`.
    pub fn new(graph: &DataGraph, partition: &Partition, spec: &ModelSpec, channels: &CommGraph) -> Result<Self> {
        spec.validate()?;
        let n = graph.n();
        if partition.assign.len() != n {
            return Err(Error::dim("partition", n, partition.assign.len()));
        }
        if spec.in_dim() != graph.feature_dim() {
            return Err(Error::dim("layer 0 input", graph.feature_dim(), spec.in_dim()));
        }
        if channels.m() != partition.m {
            return Err(Error::dim("communication graph agents", partition.m, channels.m()));
        }
        let shift = graph.require_shift()?;
        for (i, j, w) in shift.triplets() {
            let (k, z) = (partition.assign[i], partition.assign[j]);
            if w != 0.0 && k != z && !channels.contains(z, k) {
                return Err(Error::MissingChannel {
                    from: z,
                    to: k,
                    src: j,
                    dst: i,
                });
            }
        }
        let m = partition.m;
        let mut local_index = vec![0; n];
        for nodes in &partition.agent_nodes {
            for (pos, &i) in nodes.iter().enumerate() {
                local_index[i] = pos;
            }
        }
        let prop = Propagator::new(shift);
        let mut forward_routes = BTreeMap::new();
        let mut backward_routes = BTreeMap::new();
        for basis in spec.layers.iter().map(|l| l.basis).collect::<BTreeSet<_>>() {
            forward_routes.insert(
                basis,
                Routes::build(prop.operator(basis, false), &partition.assign, &local_index, &partition.agent_nodes),
            );
            backward_routes.insert(
                basis,
                Routes::build(prop.operator(basis, true), &partition.assign, &local_index, &partition.agent_nodes),
            );
        }
        let features = partition
            .agent_nodes
            .iter()
            .map(|nodes| graph.features.select_rows(nodes))
            .collect();
        let agent_train = partition
            .agent_train
            .iter()
            .map(|t| t.iter().map(|&i| (local_index[i], i)).collect())
            .collect();
        Ok(Network {
            m,
            spec: spec.clone(),
            assign: partition.assign.clone(),
            local_index,
            agent_nodes: partition.agent_nodes.clone(),
            agent_train,
            features,
            labels: graph.labels.clone(),
            loss: LossKind::for_labels(&graph.labels),
            train_total: graph.train_mask().len(),
            forward_routes,
            backward_routes,
            mode: ExecMode::Sequential,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Fresh agents holding the given parameter banks.
    pub fn agents(&self, params: Vec<ParamBank>, optimizer: OptimizerKind) -> Result<Vec<AgentState>> {
        if params.len() != self.m {
            return Err(Error::dim("agent parameter banks", self.m, params.len()));
        }
        params
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                if !p.matches(&self.spec) {
                    return Err(Error::dim(
                        format!("agent {k} parameters"),
                        self.spec.num_params(),
                        p.len(),
                    ));
                }
                Ok(AgentState {
                    agent_id: k,
                    optimizer: OptimizerState::new(optimizer, &p),
                    params: p,
                    cache: None,
                    local_nodes: self.agent_nodes[k].clone(),
                    local_train: self.agent_train[k].iter().map(|&(_, i)| i).collect(),
                })
            })
            .collect()
    }

    /// One synchronous communication round applying `routes` to per-agent values.
    fn hop(&self, routes: &Routes, values: &Blocks, round: Round, log: &mut MessageLog) -> Blocks {
        let width = values[0].ncols();
        let outboxes: Vec<Vec<MessageBatch>> = map_agents(self.mode, self.m, |z| {
            routes.outgoing[z]
                .iter()
                .map(|(k, targets)| MessageBatch {
                    round,
                    from_agent: z,
                    to_agent: *k,
                    payload: targets
                        .iter()
                        .map(|(r, terms)| {
                            let mut acc = vec![0.0; width];
                            for &(c, w) in terms {
                                for (h, a) in acc.iter_mut().enumerate() {
                                    *a += w * values[z][(c, h)];
                                }
                            }
                            (*r, acc)
                        })
                        .collect(),
                })
                .collect()
        });
        let mut inboxes: Vec<Vec<&MessageBatch>> = vec![Vec::new(); self.m];
        for batch in outboxes.iter().flatten() {
            inboxes[batch.to_agent].push(batch);
        }
        let result = map_agents(self.mode, self.m, |k| {
            let mut out = DMatrix::zeros(values[k].nrows(), width);
            for (row, terms) in routes.local[k].iter().enumerate() {
                for &(c, w) in terms {
                    for h in 0..width {
                        out[(row, h)] += w * values[k][(c, h)];
                    }
                }
            }
            for batch in &inboxes[k] {
                for (r, partial) in &batch.payload {
                    let row = self.local_index[*r];
                    for (h, v) in partial.iter().enumerate() {
                        out[(row, h)] += v;
                    }
                }
            }
            out
        });
        for batch in outboxes.into_iter().flatten() {
            log.record(batch);
        }
        result
    }

    /// Message-passing forward pass. Stores a cache in every agent and returns
    /// each agent's output rows.
    pub fn forward(
        &self,
        agents: &mut [AgentState],
        iteration: usize,
        dropout: Option<&[DropoutMasks]>,
        log: &mut MessageLog,
    ) -> Result<Blocks> {
        self.check_agents(agents)?;
        let mut h: Blocks = self.features.clone();
        let mut caches: Vec<AgentCache> = agents
            .iter()
            .enumerate()
            .map(|(k, a)| AgentCache {
                iteration,
                inputs: Vec::new(),
                pre_activations: Vec::new(),
                outputs: Vec::new(),
                dropout: dropout.map(|d| d[k].clone()),
                params: a.params.clone(),
            })
            .collect();
        for (l, layer) in self.spec.layers.iter().enumerate() {
            if let Some(masks) = dropout {
                for (k, hk) in h.iter_mut().enumerate() {
                    hk.component_mul_assign(&masks[k].layers[l]);
                }
            }
            let params = &*agents;
            let hr = &h;
            // terms[p][k] = H_k W_{p,k}
            let per_agent: Vec<Vec<DMatrix<f64>>> = map_agents(self.mode, self.m, |k| {
                (0..=layer.order)
                    .map(|p| &hr[k] * &params[k].params.layers[l][p])
                    .collect()
            });
            let mut terms: Vec<Blocks> = vec![Vec::with_capacity(self.m); layer.order + 1];
            for row in per_agent {
                for (p, t) in row.into_iter().enumerate() {
                    terms[p].push(t);
                }
            }
            let routes = &self.forward_routes[&layer.basis];
            let mut hop_index = 0;
            let mut apply = |y: &Blocks, log: &mut MessageLog| {
                let round = Round {
                    iteration,
                    layer: l,
                    hop: hop_index,
                    direction: Direction::Forward,
                };
                hop_index += 1;
                self.hop(routes, y, round, log)
            };
            let order = layer.order;
            let z: Blocks = match layer.basis {
                Basis::Monomial => {
                    let mut acc = terms[order].clone();
                    for p in (0..order).rev() {
                        let mut next = apply(&acc, log);
                        blocks_axpy(&mut next, 1.0, &terms[p]);
                        acc = next;
                    }
                    acc
                }
                Basis::Chebyshev if order == 0 => terms[0].clone(),
                Basis::Chebyshev => {
                    let mut b1 = terms[order].clone();
                    let mut b2: Blocks = b1.iter().map(|b| b * 0.0).collect();
                    for k in (1..order).rev() {
                        let mut next = apply(&b1, log);
                        next.iter_mut().for_each(|v| *v *= 2.0);
                        blocks_axpy(&mut next, 1.0, &terms[k]);
                        blocks_axpy(&mut next, -1.0, &b2);
                        b2 = std::mem::replace(&mut b1, next);
                    }
                    let mut out = apply(&b1, log);
                    blocks_axpy(&mut out, 1.0, &terms[0]);
                    blocks_axpy(&mut out, -1.0, &b2);
                    out
                }
            };
            let out: Blocks = map_agents(self.mode, self.m, |k| apply_activation(layer.activation, &z[k]));
            for k in 0..self.m {
                caches[k].inputs.push(h[k].clone());
                caches[k].pre_activations.push(z[k].clone());
                caches[k].outputs.push(out[k].clone());
            }
            h = out;
        }
        for (a, c) in agents.iter_mut().zip(caches) {
            a.cache = Some(c);
        }
        Ok(h)
    }

    /// Sum over each agent's training nodes of the per-node loss, divided by `|T_D|`.
    pub fn loss(&self, outputs: &Blocks) -> Result<f64> {
        if self.train_total == 0 {
            return Err(Error::param("loss mask is empty"));
        }
        let mut total = 0.0;
        for (k, train) in self.agent_train.iter().enumerate() {
            for &(row, i) in train {
                total += node_loss(&outputs[k], &self.labels, row, i, self.loss)?;
            }
        }
        Ok(total / self.train_total as f64)
    }

    /// `d L / d outputs`, computed by every agent on its own rows.
    pub fn loss_grads(&self, outputs: &Blocks) -> Result<Blocks> {
        if self.train_total == 0 {
            return Err(Error::param("loss mask is empty"));
        }
        (0..self.m)
            .map(|k| {
                let mut g = DMatrix::zeros(outputs[k].nrows(), outputs[k].ncols());
                add_loss_grad_rows(
                    &outputs[k],
                    &self.labels,
                    &self.agent_train[k],
                    self.loss,
                    self.train_total as f64,
                    &mut g,
                )?;
                Ok(g)
            })
            .collect()
    }

    /// Message-passing backpropagation; returns `grad_{w_k} L` for every agent.
    pub fn backward(&self, agents: &[AgentState], grad_out: &Blocks, log: &mut MessageLog) -> Result<Vec<ParamBank>> {
        self.check_agents(agents)?;
        let caches: Vec<&AgentCache> = agents
            .iter()
            .map(|a| {
                let c = a
                    .cache
                    .as_ref()
                    .ok_or_else(|| Error::StaleCache(format!("agent {} has no forward cache", a.agent_id)))?;
                if c.params != a.params {
                    return Err(Error::StaleCache(format!(
                        "agent {} parameters changed since the forward pass",
                        a.agent_id
                    )));
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        let iteration = caches[0].iteration;
        if caches.iter().any(|c| c.iteration != iteration) {
            return Err(Error::StaleCache("agent caches come from different iterations".into()));
        }
        let mut grads: Vec<ParamBank> = agents.iter().map(|a| a.params.scaled(0.0)).collect();
        let mut upstream: Blocks = grad_out.clone();
        for (l, layer) in self.spec.layers.iter().enumerate().rev() {
            let delta: Blocks = map_agents(self.mode, self.m, |k| {
                activation_backward(
                    layer.activation,
                    &caches[k].pre_activations[l],
                    &caches[k].outputs[l],
                    &upstream[k],
                )
            });
            let routes = &self.backward_routes[&layer.basis];
            let mut adj: Vec<Blocks> = vec![delta];
            for p in 1..=layer.order {
                let round = Round {
                    iteration,
                    layer: l,
                    hop: p - 1,
                    direction: Direction::Backward,
                };
                let mut next = self.hop(routes, &adj[p - 1], round, log);
                if layer.basis == Basis::Chebyshev && p >= 2 {
                    next.iter_mut().for_each(|v| *v *= 2.0);
                    blocks_axpy(&mut next, -1.0, &adj[p - 2]);
                }
                adj.push(next);
            }
            let adj_ref = &adj;
            let local: Vec<(Vec<DMatrix<f64>>, Option<DMatrix<f64>>)> = map_agents(self.mode, self.m, |k| {
                let input = &caches[k].inputs[l];
                let gw = adj_ref.iter().map(|g| input.transpose() * &g[k]).collect();
                let d_input = (l > 0).then(|| {
                    let mut d = DMatrix::zeros(input.nrows(), input.ncols());
                    for (p, g) in adj_ref.iter().enumerate() {
                        d += &g[k] * agents[k].params.layers[l][p].transpose();
                    }
                    if let Some(masks) = &caches[k].dropout {
                        d.component_mul_assign(&masks.layers[l]);
                    }
                    d
                });
                (gw, d_input)
            });
            let mut next_upstream = Vec::with_capacity(self.m);
            for (k, (gw, d)) in local.into_iter().enumerate() {
                grads[k].layers[l] = gw;
                if let Some(d) = d {
                    next_upstream.push(d);
                }
            }
            upstream = next_upstream;
        }
        Ok(grads)
    }

    /// Reassembles per-agent rows into a global `n x q` matrix.
    pub fn gather(&self, blocks: &Blocks) -> DMatrix<f64> {
        let n = self.assign.len();
        let mut out = DMatrix::zeros(n, blocks[0].ncols());
        for (k, nodes) in self.agent_nodes.iter().enumerate() {
            for (pos, &i) in nodes.iter().enumerate() {
                out.set_row(i, &blocks[k].row(pos));
            }
        }
        out
    }

    /// Independent dropout masks, each agent drawing from its own stream.
    pub fn sample_dropout(&self, prob: f64, rngs: &mut [rand_chacha::ChaCha8Rng]) -> Vec<DropoutMasks> {
        self.agent_nodes
            .iter()
            .zip(rngs.iter_mut())
            .map(|(nodes, rng)| DropoutMasks::sample(&self.spec, nodes.len(), prob, rng))
            .collect()
    }

    fn check_agents(&self, agents: &[AgentState]) -> Result<()> {
        if agents.len() != self.m {
            return Err(Error::dim("agents", self.m, agents.len()));
        }
        for (k, a) in agents.iter().enumerate() {
            if a.agent_id != k || !a.params.matches(&self.spec) {
                return Err(Error::dim(
                    format!("agent {k}"),
                    format!("id {k} with {} weights", self.spec.num_params()),
                    format!("id {} with {} weights", a.agent_id, a.params.len()),
                ));
            }
        }
        Ok(())
    }
}

fn node_loss(outputs: &DMatrix<f64>, labels: &Labels, row: usize, i: usize, kind: LossKind) -> Result<f64> {
    // reuse the centralized per-node definition on a single-row view
    let one = outputs.rows(row, 1).into_owned();
    let single = match labels {
        Labels::Classes(c) => Labels::Classes(vec![c[i]]),
        Labels::Targets(t) => Labels::Targets(vec![t[i]]),
    };
    crate::gcn::masked_loss(&one, &single, &[0], kind)
}

/// `w_k <- sum_z C_kz psi_z`, summing in ascending `z`. Returns the mixed
/// parameters and the scalars exchanged (`2 p` per link).
pub fn consensus_step(psi: &[ParamBank], c: &MixingMatrix) -> Result<(Vec<ParamBank>, u64)> {
    let m = psi.len();
    if c.m() != m {
        return Err(Error::dim("mixing matrix", m, c.m()));
    }
    let mixed = (0..m)
        .map(|k| {
            let mut acc = psi[k].scaled(0.0);
            for (z, p) in psi.iter().enumerate() {
                let w = c.get(k, z);
                if w != 0.0 {
                    acc.axpy(w, p);
                }
            }
            acc
        })
        .collect();
    let p = psi.first().map_or(0, ParamBank::len) as u64;
    Ok((mixed, 2 * p * c.comm_edges().len() as u64))
}

/// Whether iteration `t` ends with a consensus step; `None` never mixes.
pub fn consensus_due(period: Option<usize>, t: usize) -> bool {
    match period {
        Some(p) if p > 0 => t % p == 0,
        _ => false,
    }
}

/// Agents whose parameters can change `grad_{w_k} L` for a network of
/// `hops` total propagation steps: the union of `C_t` (owners of the nodes
/// within `hops` of `t`) over every training node `t` with `k` in `C_t`.
pub fn influence_set(graph: &DataGraph, partition: &Partition, hops: usize, k: usize) -> Result<BTreeSet<usize>> {
    let shift = graph.require_shift()?;
    let mut out = BTreeSet::new();
    let mut dist = vec![usize::MAX; graph.n()];
    for &t in graph.train_mask() {
        let mut reached = vec![t];
        dist[t] = 0;
        let mut queue = VecDeque::from([t]);
        while let Some(u) = queue.pop_front() {
            if dist[u] == hops {
                continue;
            }
            for (v, w) in shift.row(u) {
                if w != 0.0 && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    reached.push(v);
                    queue.push_back(v);
                }
            }
        }
        let owners: BTreeSet<usize> = reached.iter().map(|&i| partition.assign[i]).collect();
        if owners.contains(&k) {
            out.extend(owners);
        }
        for i in reached {
            dist[i] = usize::MAX;
        }
    }
    Ok(out)
}

/// Distributed-training options on top of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub optimizer: OptimizerKind,
    /// Mix every this many iterations; `None` disables consensus entirely.
    pub consensus_period: Option<usize>,
    /// Start all agents from the centralized initialization.
    pub identical_init: bool,
    pub mode: ExecMode,
    /// Compute `g^t` every this many iterations; `None` never.
    pub stationarity_every: Option<usize>,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig {
            train: TrainConfig::default(),
            optimizer: OptimizerKind::Gd,
            consensus_period: Some(1),
            identical_init: false,
            mode: ExecMode::Sequential,
            stationarity_every: None,
        }
    }
}

/// Result of a distributed run.
#[derive(Debug, Clone)]
pub struct DistRun {
    pub agents: Vec<AgentState>,
    pub records: Vec<TrainRecord>,
    /// `(iteration, loss)` when training stopped on a non-finite loss.
    pub diverged: Option<(usize, f64)>,
}

impl DistRun {
    pub fn params(&self) -> Vec<ParamBank> {
        self.agents.iter().map(|a| a.params.clone()).collect()
    }
}

/// Per-agent starting points: the shared initialization, or one stream per agent.
pub fn initial_params(spec: &ModelSpec, config: &DistConfig, m: usize) -> Vec<ParamBank> {
    if config.identical_init {
        vec![init_params(spec, &config.train); m]
    } else {
        (0..m)
            .map(|k| {
                let mut rng = stream(config.train.seed, Purpose::Init, k as u64 + 1);
                ParamBank::gaussian(spec, config.train.init_std, &mut rng)
            })
            .collect()
    }
}

/// Distributed training: local predictions, message-passing gradients,
/// local update, then mixing with `c`.
pub fn train_distributed(
    graph: &DataGraph,
    partition: &Partition,
    c: &MixingMatrix,
    spec: &ModelSpec,
    config: &DistConfig,
) -> Result<DistRun> {
    let init = initial_params(spec, config, partition.m);
    train_distributed_from(graph, partition, c, spec, config, init)
}

pub fn train_distributed_from(
    graph: &DataGraph,
    partition: &Partition,
    c: &MixingMatrix,
    spec: &ModelSpec,
    config: &DistConfig,
    init: Vec<ParamBank>,
) -> Result<DistRun> {
    config.train.validate()?;
    if c.m() != partition.m {
        return Err(Error::dim("mixing matrix", partition.m, c.m()));
    }
    let mut network = Network::new(graph, partition, spec, &c.comm_edges())?;
    network.mode = config.mode;
    let mut agents = network.agents(init, config.optimizer)?;
    let mut dropout_rngs: Vec<_> = (0..partition.m)
        .map(|k| stream(config.train.seed, Purpose::Dropout, k as u64 + 1))
        .collect();
    let t_max = config.train.iterations;
    let mut records = Vec::with_capacity(t_max + 1);
    let mut best: Option<f64> = None;
    for t in 0..=t_max {
        let mut log = MessageLog::new(partition.m, false);
        let training = t < t_max;
        let masks = match (training, config.train.dropout) {
            (true, Some(p)) => Some(network.sample_dropout(p, &mut dropout_rngs)),
            _ => None,
        };
        let outputs = network.forward(&mut agents, t, masks.as_deref(), &mut log)?;
        let eval_outputs = if masks.is_some() {
            let mut scratch = agents.clone();
            network.forward(&mut scratch, t, None, &mut MessageLog::new(partition.m, false))?
        } else {
            outputs.clone()
        };
        let loss = network.loss(&eval_outputs)?;
        let eta = step_size(&config.train.schedule, t);
        let params: Vec<ParamBank> = agents.iter().map(|a| a.params.clone()).collect();
        let mut record = TrainRecord::new(t, loss, eta);
        record.consensus_residual = metrics::consensus_residual(&params);
        record.max_pairwise_distance = metrics::max_pairwise_distance(&params);
        if !loss.is_finite() {
            records.push(record);
            return Ok(DistRun {
                agents,
                records,
                diverged: Some((t, loss)),
            });
        }
        if config.train.evaluates(t) {
            (record.test_accuracy, record.test_mse) = test_metrics(graph, &network.gather(&eval_outputs))?;
        }
        if let Some(every) = config.stationarity_every {
            if every > 0 && (t % every == 0 || t == t_max) {
                let g = metrics::stationarity(graph, partition, &params, spec)?;
                best = Some(best.map_or(g, |b| b.min(g)));
                record.stationarity = Some(g);
            }
        }
        record.stationarity_best = best;
        if training {
            let dout = network.loss_grads(&outputs)?;
            let grads = network.backward(&agents, &dout, &mut log)?;
            let mut psi = Vec::with_capacity(agents.len());
            for (agent, g) in agents.iter_mut().zip(&grads) {
                psi.push(local_step(&agent.params, g, eta, config.optimizer, &mut agent.optimizer)?);
            }
            let mixed = if consensus_due(config.consensus_period, t) {
                let (mixed, scalars) = consensus_step(&psi, c)?;
                log.consensus = scalars;
                mixed
            } else {
                psi
            };
            for (agent, w) in agents.iter_mut().zip(mixed) {
                agent.params = w;
                agent.cache = None;
            }
        }
        record.messages_forward = log.forward;
        record.messages_backward = log.backward;
        record.messages_consensus = log.consensus;
        records.push(record);
    }
    Ok(DistRun {
        agents,
        records,
        diverged: None,
    })
}
