//! Centralized graph-convolutional layers, losses and exact backpropagation.
//!
//! Everything here is written for the *block-parameterized* model: node `i`
//! is transformed with the weights of the agent that owns it, so a layer of
//! order `P` computes `phi(sum_p T_p(S) Xt_p)` where row `i` of `Xt_p` is
//! `x_i^T W_{p, a(i)}`. With a single agent this is the ordinary GCN, and
//! with heterogeneous agents it is the dense oracle the message-passing
//! engine in [`crate::distributed`] must reproduce.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataGraph, Labels};
use crate::metrics::{self, TrainRecord};
use crate::optim::{local_step, step_size, OptimizerKind, OptimizerState, ScheduleSpec};
use crate::rng::{stream, Purpose};
use crate::sparse::CsrMatrix;

/// Cross-entropy is evaluated on probabilities clamped to this floor.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

/// Polynomial family used for the powers of the shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Monomial,
    /// `T_0 = I`, `T_1 = S'`, `T_p = 2 S' T_{p-1} - T_{p-2}` with `S' = S / ||S||_inf`.
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    pub activation: Activation,
    #[serde(default)]
    pub basis: Basis,
}

fn default_order() -> usize {
    1
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Hidden ReLU layers followed by an output layer; softmax output for
    /// classification, identity for regression.
    pub fn stack(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        order: usize,
        basis: Basis,
        classification: bool,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                order,
                activation: if l < last {
                    Activation::Relu
                } else if classification {
                    Activation::Softmax
                } else {
                    Activation::Identity
                },
                basis,
            })
            .collect();
        ModelSpec { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::param("model has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_dim == 0 || layer.out_dim == 0 || layer.order == 0 {
                return Err(Error::param(format!(
                    "layer {l}: dimensions and order must be positive"
                )));
            }
            if l > 0 && self.layers[l - 1].out_dim != layer.in_dim {
                return Err(Error::dim(
                    format!("layer {l} input"),
                    self.layers[l - 1].out_dim,
                    layer.in_dim,
                ));
            }
            if layer.activation == Activation::Softmax && l + 1 != self.layers.len() {
                return Err(Error::param(format!("layer {l}: softmax is only allowed on the last layer")));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Total number of weights `p`.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.order + 1) * l.in_dim * l.out_dim)
            .sum()
    }

    /// Receptive field in hops of the shift.
    pub fn hops(&self) -> usize {
        self.layers.iter().map(|l| l.order).sum()
    }
}

/// Weight banks: `layers[l][p]` is the `in x out` matrix multiplying `T_p(S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBank {
    pub layers: Vec<Vec<DMatrix<f64>>>,
}

impl ParamBank {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ParamBank {
            layers: spec
                .layers
                .iter()
                .map(|l| vec![DMatrix::zeros(l.in_dim, l.out_dim); l.order + 1])
                .collect(),
        }
    }

    /// i.i.d. `N(0, std^2)` entries.
    pub fn gaussian<R: Rng + ?Sized>(spec: &ModelSpec, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        let mut bank = ParamBank::zeros(spec);
        for w in bank.layers.iter_mut().flatten() {
            w.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        bank
    }

    pub fn len(&self) -> usize {
        self.layers.iter().flatten().map(|w| w.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation of column-major `vec(W)` over layers then powers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for w in self.layers.iter().flatten() {
            out.extend_from_slice(w.as_slice());
        }
        out
    }

    pub fn unflatten(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.num_params() {
            return Err(Error::dim("parameter vector", spec.num_params(), flat.len()));
        }
        let mut bank = ParamBank::zeros(spec);
        let mut offset = 0;
        for w in bank.layers.iter_mut().flatten() {
            let len = w.len();
            w.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(bank)
    }

    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.layers.len() == spec.layers.len()
            && self.layers.iter().zip(&spec.layers).all(|(banks, l)| {
                banks.len() == l.order + 1
                    && banks.iter().all(|w| w.shape() == (l.in_dim, l.out_dim))
            })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamBank) {
        for (a, b) in self.layers.iter_mut().flatten().zip(other.layers.iter().flatten()) {
            *a += b * alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamBank {
        ParamBank {
            layers: self
                .layers
                .iter()
                .map(|ws| ws.iter().map(|w| w * alpha).collect())
                .collect(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.layers.iter().flatten().map(|w| w.norm_squared()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|w| w.iter().all(|v| v.is_finite()))
    }

    /// Writes the flat vector, one value per line, after a header describing the layers.
    pub fn write_checkpoint(&self, spec: &ModelSpec, path: &Path) -> Result<()> {
        let mut out = String::from("# dgcn checkpoint v1\n");
        for l in &spec.layers {
            writeln!(
                out,
                "# layer in_dim={} out_dim={} order={} activation={} basis={}",
                l.in_dim,
                l.out_dim,
                l.order,
                enum_name(&l.activation),
                enum_name(&l.basis)
            )
            .unwrap();
        }
        for v in self.flatten() {
            writeln!(out, "{v:.16e}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<(ModelSpec, ParamBank)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let mut layers = Vec::new();
        let mut flat = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# layer") {
                let mut table = toml::Table::new();
                for kv in rest.split_whitespace() {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| perr(ln + 1, format!("bad layer field {kv:?}")))?;
                    let value = match v.parse::<i64>() {
                        Ok(i) => toml::Value::Integer(i),
                        Err(_) => toml::Value::String(v.to_string()),
                    };
                    table.insert(k.to_string(), value);
                }
                let layer: LayerSpec = table
                    .try_into()
                    .map_err(|e| perr(ln + 1, format!("bad layer header: {e}")))?;
                layers.push(layer);
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else {
                for tok in line.split(',') {
                    flat.push(
                        tok.trim()
                            .parse::<f64>()
                            .map_err(|_| perr(ln + 1, format!("not a number: {tok:?}")))?,
                    );
                }
            }
        }
        let spec = ModelSpec { layers };
        spec.validate()?;
        let bank = ParamBank::unflatten(&spec, &flat)?;
        Ok((spec, bank))
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// A shift operator prepared for both polynomial bases, with transposes.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub shift: CsrMatrix,
    pub shift_t: CsrMatrix,
    pub cheb: CsrMatrix,
    pub cheb_t: CsrMatrix,
}

impl Propagator {
    pub fn new(shift: &CsrMatrix) -> Self {
        let bound = shift.inf_norm();
        let cheb = if bound > 0.0 {
            shift.scale(1.0 / bound)
        } else {
            shift.clone()
        };
        Propagator {
            shift: shift.clone(),
            shift_t: shift.transpose(),
            cheb_t: cheb.transpose(),
            cheb,
        }
    }

    pub fn from_graph(graph: &DataGraph) -> Result<Self> {
        Ok(Propagator::new(graph.require_shift()?))
    }

    pub fn n(&self) -> usize {
        self.shift.n()
    }

    pub fn operator(&self, basis: Basis, transposed: bool) -> &CsrMatrix {
        match (basis, transposed) {
            (Basis::Monomial, false) => &self.shift,
            (Basis::Monomial, true) => &self.shift_t,
            (Basis::Chebyshev, false) => &self.cheb,
            (Basis::Chebyshev, true) => &self.cheb_t,
        }
    }
}

/// `sum_p T_p(S) terms[p]` by Horner (monomial) or Clenshaw (Chebyshev).
/// `apply` multiplies by the basis operator; it is called exactly `P` times.
pub fn polynomial_apply<F>(basis: Basis, terms: &[DMatrix<f64>], mut apply: F) -> DMatrix<f64>
where
    F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
{
    let order = terms.len() - 1;
    match basis {
        Basis::Monomial => {
            let mut acc = terms[order].clone();
            for p in (0..order).rev() {
                acc = &terms[p] + apply(&acc);
            }
            acc
        }
        Basis::Chebyshev => {
            if order == 0 {
                return terms[0].clone();
            }
            let zeros = DMatrix::zeros(terms[0].nrows(), terms[0].ncols());
            let mut b1 = terms[order].clone();
            let mut b2 = zeros;
            for k in (1..order).rev() {
                let next = &terms[k] + apply(&b1) * 2.0 - &b2;
                b2 = std::mem::replace(&mut b1, next);
            }
            &terms[0] + apply(&b1) - b2
        }
    }
}

/// `[T_0(S^T) g, ..., T_P(S^T) g]`; `apply` multiplies by the transposed operator
/// and is called exactly `P` times.
pub fn polynomial_adjoints<F>(basis: Basis, order: usize, g: &DMatrix<f64>, mut apply: F) -> Vec<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
{
    let mut out = Vec::with_capacity(order + 1);
    out.push(g.clone());
    for p in 1..=order {
        let next = match basis {
            Basis::Monomial => apply(&out[p - 1]),
            Basis::Chebyshev if p == 1 => apply(&out[0]),
            Basis::Chebyshev => apply(&out[p - 1]) * 2.0 - &out[p - 2],
        };
        out.push(next);
    }
    out
}

pub fn apply_activation(act: Activation, z: &DMatrix<f64>) -> DMatrix<f64> {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::Softmax => softmax_rows(z),
    }
}

pub fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Pulls `d(loss)/d(output)` back through the activation.
pub fn activation_backward(
    act: Activation,
    pre: &DMatrix<f64>,
    out: &DMatrix<f64>,
    grad_out: &DMatrix<f64>,
) -> DMatrix<f64> {
    match act {
        Activation::Identity => grad_out.clone(),
        Activation::Relu => grad_out.zip_map(pre, |g, z| if z > 0.0 { g } else { 0.0 }),
        Activation::Softmax => {
            let mut d = grad_out.component_mul(out);
            for r in 0..d.nrows() {
                let dot = d.row(r).sum();
                for c in 0..d.ncols() {
                    d[(r, c)] -= out[(r, c)] * dot;
                }
            }
            d
        }
    }
}

/// Inverted-dropout masks on the input of every layer (`0` or `1/(1-p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layers: Vec<DMatrix<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(spec: &ModelSpec, rows: usize, prob: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - prob);
        DropoutMasks {
            layers: spec
                .layers
                .iter()
                .map(|l| {
                    DMatrix::from_fn(rows, l.in_dim, |_, _| {
                        if rng.random::<f64>() < prob {
                            0.0
                        } else {
                            keep
                        }
                    })
                })
                .collect(),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs after dropout.
    pub inputs: Vec<DMatrix<f64>>,
    pub pre_activations: Vec<DMatrix<f64>>,
    pub outputs: Vec<DMatrix<f64>>,
    pub dropout: Option<DropoutMasks>,
    params: Vec<ParamBank>,
    assign: Vec<usize>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("at least one layer")
    }
}

/// Row groups per owner.
fn groups(assign: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); m];
    for (i, &a) in assign.iter().enumerate() {
        g[a].push(i);
    }
    g
}

/// Row `i` of the result is `h_i^T W_{a(i)}`.
fn transform_rows(h: &DMatrix<f64>, weights: &[&DMatrix<f64>], groups: &[Vec<usize>]) -> DMatrix<f64> {
    if weights.len() == 1 {
        return h * weights[0];
    }
    let mut out = DMatrix::zeros(h.nrows(), weights[0].ncols());
    for (k, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let block = h.select_rows(rows) * weights[k];
        for (r, &i) in rows.iter().enumerate() {
            out.set_row(i, &block.row(r));
        }
    }
    out
}

fn check_banks(spec: &ModelSpec, banks: &[ParamBank], assign: &[usize], n: usize) -> Result<()> {
    spec.validate()?;
    if banks.is_empty() {
        return Err(Error::param("no parameter banks"));
    }
    for (k, b) in banks.iter().enumerate() {
        if !b.matches(spec) {
            return Err(Error::dim(
                format!("parameter bank {k}"),
                format!("{} weights", spec.num_params()),
                format!("{} weights in a different layout", b.len()),
            ));
        }
    }
    if assign.len() != n {
        return Err(Error::dim("assignment", n, assign.len()));
    }
    if let Some(&bad) = assign.iter().find(|&&a| a >= banks.len()) {
        return Err(Error::param(format!("assignment refers to bank {bad} of {}", banks.len())));
    }
    Ok(())
}

/// Forward pass where node `i` uses `banks[assign[i]]`.
pub fn forward_blocks(
    prop: &Propagator,
    x: &DMatrix<f64>,
    banks: &[ParamBank],
    assign: &[usize],
    spec: &ModelSpec,
    dropout: Option<&DropoutMasks>,
) -> Result<ForwardCache> {
    check_banks(spec, banks, assign, prop.n())?;
    if x.nrows() != prop.n() || x.ncols() != spec.in_dim() {
        return Err(Error::dim(
            "layer 0 input",
            format!("{}x{}", prop.n(), spec.in_dim()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    let groups = groups(assign, banks.len());
    let mut h = x.clone();
    let mut cache = ForwardCache {
        inputs: Vec::new(),
        pre_activations: Vec::new(),
        outputs: Vec::new(),
        dropout: dropout.cloned(),
        params: banks.to_vec(),
        assign: assign.to_vec(),
    };
    for (l, layer) in spec.layers.iter().enumerate() {
        if let Some(masks) = dropout {
            h = h.component_mul(&masks.layers[l]);
        }
        let terms: Vec<DMatrix<f64>> = (0..=layer.order)
            .map(|p| {
                let ws: Vec<&DMatrix<f64>> = banks.iter().map(|b| &b.layers[l][p]).collect();
                transform_rows(&h, &ws, &groups)
            })
            .collect();
        let op = prop.operator(layer.basis, false);
        let z = polynomial_apply(layer.basis, &terms, |y| op.mul_dense(y));
        let out = apply_activation(layer.activation, &z);
        cache.inputs.push(h);
        cache.pre_activations.push(z);
        h = out.clone();
        cache.outputs.push(out);
    }
    Ok(cache)
}

/// Centralized forward pass with a single shared parameter bank.
pub fn gc_forward(
    prop: &Propagator,
    x: &DMatrix<f64>,
    params: &ParamBank,
    spec: &ModelSpec,
) -> Result<(DMatrix<f64>, ForwardCache)> {
    let assign = vec![0; prop.n()];
    let cache = forward_blocks(prop, x, std::slice::from_ref(params), &assign, spec, None)?;
    Ok((cache.output().clone(), cache))
}

/// Gradient of a scalar loss with respect to every bank, given `d(loss)/d(outputs)`.
pub fn backward_blocks(
    prop: &Propagator,
    cache: &ForwardCache,
    banks: &[ParamBank],
    spec: &ModelSpec,
    grad_out: &DMatrix<f64>,
) -> Result<Vec<ParamBank>> {
    if cache.params.as_slice() != banks {
        return Err(Error::StaleCache(
            "parameters changed since the forward pass".into(),
        ));
    }
    if cache.outputs.len() != spec.layers.len() {
        return Err(Error::StaleCache(format!(
            "cache has {} layers, model has {}",
            cache.outputs.len(),
            spec.layers.len()
        )));
    }
    if grad_out.shape() != cache.output().shape() {
        return Err(Error::dim(
            "output gradient",
            format!("{:?}", cache.output().shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let groups = groups(&cache.assign, banks.len());
    let mut grads: Vec<ParamBank> = banks.iter().map(|_| ParamBank::zeros(spec)).collect();
    let mut upstream = grad_out.clone();
    for (l, layer) in spec.layers.iter().enumerate().rev() {
        let delta = activation_backward(
            layer.activation,
            &cache.pre_activations[l],
            &cache.outputs[l],
            &upstream,
        );
        let op = prop.operator(layer.basis, true);
        let adj = polynomial_adjoints(layer.basis, layer.order, &delta, |y| op.mul_dense(y));
        let input = &cache.inputs[l];
        for (p, g) in adj.iter().enumerate() {
            for (k, rows) in groups.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                grads[k].layers[l][p] = if banks.len() == 1 {
                    input.transpose() * g
                } else {
                    input.select_rows(rows).transpose() * g.select_rows(rows)
                };
            }
        }
        if l == 0 {
            break;
        }
        let mut d_input = DMatrix::zeros(input.nrows(), input.ncols());
        for (p, g) in adj.iter().enumerate() {
            let ws: Vec<DMatrix<f64>> = banks.iter().map(|b| b.layers[l][p].transpose()).collect();
            let refs: Vec<&DMatrix<f64>> = ws.iter().collect();
            d_input += transform_rows(g, &refs, &groups);
        }
        if let Some(masks) = &cache.dropout {
            d_input.component_mul_assign(&masks.layers[l]);
        }
        upstream = d_input;
    }
    Ok(grads)
}

/// Centralized backward pass.
pub fn gc_backward(
    prop: &Propagator,
    cache: &ForwardCache,
    params: &ParamBank,
    spec: &ModelSpec,
    grad_out: &DMatrix<f64>,
) -> Result<ParamBank> {
    Ok(backward_blocks(prop, cache, std::slice::from_ref(params), spec, grad_out)?
        .pop()
        .unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn for_labels(labels: &Labels) -> Self {
        if labels.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        }
    }
}

fn node_loss(outputs: &DMatrix<f64>, labels: &Labels, i: usize, kind: LossKind) -> Result<f64> {
    match (kind, labels) {
        (LossKind::CrossEntropy, Labels::Classes(c)) => {
            let y = c[i].ok_or_else(|| Error::param(format!("node {i} has no label")))?;
            if y >= outputs.ncols() {
                return Err(Error::dim(format!("class of node {i}"), outputs.ncols(), y));
            }
            Ok(-outputs[(i, y)].max(PROB_FLOOR).ln())
        }
        (LossKind::Mse, Labels::Targets(t)) => {
            let y = t[i].ok_or_else(|| Error::param(format!("node {i} has no target")))?;
            Ok(outputs.row(i).iter().map(|v| (v - y).powi(2)).sum())
        }
        (LossKind::Mse, Labels::Classes(c)) => {
            let y = c[i].ok_or_else(|| Error::param(format!("node {i} has no label")))?;
            Ok(outputs
                .row(i)
                .iter()
                .enumerate()
                .map(|(k, v)| (v - if k == y { 1.0 } else { 0.0 }).powi(2))
                .sum())
        }
        (LossKind::CrossEntropy, Labels::Targets(_)) => Err(Error::param(
            "cross-entropy needs class labels",
        )),
    }
}

/// Mean per-node loss over `mask`.
pub fn masked_loss(outputs: &DMatrix<f64>, labels: &Labels, mask: &[usize], kind: LossKind) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::param("loss mask is empty"));
    }
    let mut total = 0.0;
    for &i in mask {
        total += node_loss(outputs, labels, i, kind)?;
    }
    Ok(total / mask.len() as f64)
}

/// `d(sum_{i in nodes} l_i) / d(outputs) / normalizer`, written into `grad` rows.
pub fn add_loss_grad_rows(
    outputs: &DMatrix<f64>,
    labels: &Labels,
    nodes: &[(usize, usize)],
    kind: LossKind,
    normalizer: f64,
    grad: &mut DMatrix<f64>,
) -> Result<()> {
    for &(row, i) in nodes {
        match (kind, labels) {
            (LossKind::CrossEntropy, Labels::Classes(c)) => {
                let y = c[i].ok_or_else(|| Error::param(format!("node {i} has no label")))?;
                let p = outputs[(row, y)];
                if p > PROB_FLOOR {
                    grad[(row, y)] -= 1.0 / (p * normalizer);
                }
            }
            (LossKind::Mse, Labels::Targets(t)) => {
                let y = t[i].ok_or_else(|| Error::param(format!("node {i} has no target")))?;
                for c in 0..outputs.ncols() {
                    grad[(row, c)] += 2.0 * (outputs[(row, c)] - y) / normalizer;
                }
            }
            (LossKind::Mse, Labels::Classes(cl)) => {
                let y = cl[i].ok_or_else(|| Error::param(format!("node {i} has no label")))?;
                for c in 0..outputs.ncols() {
                    let t = if c == y { 1.0 } else { 0.0 };
                    grad[(row, c)] += 2.0 * (outputs[(row, c)] - t) / normalizer;
                }
            }
            (LossKind::CrossEntropy, Labels::Targets(_)) => {
                return Err(Error::param("cross-entropy needs class labels"))
            }
        }
    }
    Ok(())
}

/// `d(masked_loss)/d(outputs)`.
pub fn masked_loss_grad(outputs: &DMatrix<f64>, labels: &Labels, mask: &[usize], kind: LossKind) -> Result<DMatrix<f64>> {
    if mask.is_empty() {
        return Err(Error::param("loss mask is empty"));
    }
    let mut grad = DMatrix::zeros(outputs.nrows(), outputs.ncols());
    let rows: Vec<(usize, usize)> = mask.iter().map(|&i| (i, i)).collect();
    add_loss_grad_rows(outputs, labels, &rows, kind, mask.len() as f64, &mut grad)?;
    Ok(grad)
}

/// Settings shared by centralized and distributed training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub init_std: f64,
    /// Dropout probability on every layer input; `None` disables it.
    pub dropout: Option<f64>,
    /// Test metrics are computed every this many iterations (and at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            schedule: ScheduleSpec::default(),
            seed: 0,
            init_std: 1e-3,
            dropout: None,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::param("init_std must be finite and nonnegative"));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::param(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::param("eval_every must be positive"));
        }
        Ok(())
    }

    pub(crate) fn evaluates(&self, t: usize) -> bool {
        t % self.eval_every == 0 || t == self.iterations
    }
}

/// Test-set metric for the current outputs: accuracy for classes, mse for targets.
pub(crate) fn test_metrics(graph: &DataGraph, outputs: &DMatrix<f64>) -> Result<(Option<f64>, Option<f64>)> {
    let test = graph.test_mask();
    if test.is_empty() {
        return Ok((None, None));
    }
    match &graph.labels {
        Labels::Classes(_) => Ok((Some(metrics::accuracy(outputs, &graph.labels, &test)?), None)),
        Labels::Targets(_) => Ok((None, Some(masked_loss(outputs, &graph.labels, &test, LossKind::Mse)?))),
    }
}

/// Initial weights for a run seed.
pub fn init_params(spec: &ModelSpec, config: &TrainConfig) -> ParamBank {
    let mut rng = stream(config.seed, Purpose::Init, 0);
    ParamBank::gaussian(spec, config.init_std, &mut rng)
}

/// Full-batch gradient descent on the masked training loss.
pub fn train_centralized(
    graph: &DataGraph,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<(ParamBank, Vec<TrainRecord>)> {
    train_centralized_from(graph, spec, config, init_params(spec, config))
}

pub fn train_centralized_from(
    graph: &DataGraph,
    spec: &ModelSpec,
    config: &TrainConfig,
    init: ParamBank,
) -> Result<(ParamBank, Vec<TrainRecord>)> {
    train_centralized_with(graph, spec, config, init, OptimizerKind::Gd)
}

/// Centralized training with any of the local update rules.
pub fn train_centralized_with(
    graph: &DataGraph,
    spec: &ModelSpec,
    config: &TrainConfig,
    init: ParamBank,
    optimizer: OptimizerKind,
) -> Result<(ParamBank, Vec<TrainRecord>)> {
    config.validate()?;
    spec.validate()?;
    let prop = Propagator::from_graph(graph)?;
    let kind = LossKind::for_labels(&graph.labels);
    let train = graph.train_mask();
    if !init.matches(spec) {
        return Err(Error::dim("initial parameters", spec.num_params(), init.len()));
    }
    let mut state = OptimizerState::new(optimizer, &init);
    let mut params = init;
    let mut records = Vec::with_capacity(config.iterations + 1);
    let mut dropout_rng = stream(config.seed, Purpose::Dropout, 0);
    for t in 0..=config.iterations {
        let (outputs, eval_cache) = gc_forward(&prop, &graph.features, &params, spec)?;
        let loss = masked_loss(&outputs, &graph.labels, train, kind)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, loss });
        }
        let eta = step_size(&config.schedule, t);
        let mut record = TrainRecord::new(t, loss, eta);
        if config.evaluates(t) {
            (record.test_accuracy, record.test_mse) = test_metrics(graph, &outputs)?;
        }
        records.push(record);
        if t == config.iterations {
            break;
        }
        let cache = match config.dropout {
            Some(p) => {
                let masks = DropoutMasks::sample(spec, graph.n(), p, &mut dropout_rng);
                let assign = vec![0; graph.n()];
                forward_blocks(&prop, &graph.features, std::slice::from_ref(&params), &assign, spec, Some(&masks))?
            }
            None => eval_cache,
        };
        let grad_out = masked_loss_grad(cache.output(), &graph.labels, train, kind)?;
        let grad = gc_backward(&prop, &cache, &params, spec, &grad_out)?;
        params = local_step(&params, &grad, eta, optimizer, &mut state)?;
    }
    Ok((params, records))
}
