#![allow(dead_code)]

use dgcn_core::{
    gcn::{forward_blocks, LayerSpec, Propagator},
    normalize_shift, partition_bfs, Activation, Basis, DataGraph, Labels, ModelSpec, ParamBank,
    Partition, ShiftKind,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub graph: DataGraph,
    pub partition: Partition,
    pub spec: ModelSpec,
    pub banks: Vec<ParamBank>,
}

/// Random connected-ish graph, partition and heterogeneous agent weights.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..=50);
    let d = rng.random_range(1..=8);
    let m = rng.random_range(1..=5usize).min(n);
    let classification = rng.random_bool(0.5);
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.random_range(0..i), i, rng.random_range(0.2..2.0)));
    }
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.iter().any(|&(s, t, _)| (s, t) == (a, b) || (s, t) == (b, a)) {
            edges.push((a, b, rng.random_range(0.2..2.0)));
        }
    }
    let features = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let q = rng.random_range(2..=4);
    let labels = if classification {
        Labels::Classes((0..n).map(|_| Some(rng.random_range(0..q))).collect())
    } else {
        Labels::Targets((0..n).map(|_| Some(rng.random_range(-1.0..1.0))).collect())
    };
    let train: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).chain([0]).collect();
    let kind = [ShiftKind::SymRenorm, ShiftKind::RowStochastic, ShiftKind::Laplacian][rng.random_range(0..3)];
    let graph = DataGraph::new(n, &edges, features, labels, train).unwrap();
    let graph = normalize_shift(&graph, kind).unwrap();
    let partition = partition_bfs(&graph, m, seed).unwrap();
    let layers = rng.random_range(1..=3);
    let basis = if rng.random_bool(0.5) { Basis::Monomial } else { Basis::Chebyshev };
    let mut dims = vec![d];
    for _ in 1..layers {
        dims.push(rng.random_range(1..=6));
    }
    dims.push(if classification { q } else { 1 });
    let spec = ModelSpec {
        layers: dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                order: rng.random_range(1..=2),
                activation: if l + 1 < layers {
                    Activation::Relu
                } else if classification {
                    Activation::Softmax
                } else {
                    Activation::Identity
                },
                basis,
            })
            .collect(),
    };
    // redraw at a smaller scale until the output is not saturated; a saturated
    // softmax leaves gradients below the resolution of finite differences
    let prop = Propagator::from_graph(&graph).unwrap();
    let mut std = 0.7;
    let banks = loop {
        let banks: Vec<ParamBank> = (0..m).map(|_| ParamBank::gaussian(&spec, std, &mut rng)).collect();
        let cache = forward_blocks(&prop, &graph.features, &banks, &partition.assign, &spec, None).unwrap();
        if cache.pre_activations.last().unwrap().amax() <= 4.0 {
            break banks;
        }
        std *= 0.8;
    };
    Instance {
        graph,
        partition,
        spec,
        banks,
    }
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Random instance restricted to at most `max_n` nodes.
pub fn small_instance(seed: u64, max_n: usize) -> Instance {
    (0..)
        .map(|k| random_instance(seed.wrapping_mul(7919).wrapping_add(k)))
        .find(|inst| inst.graph.n() <= max_n)
        .unwrap()
}

/// Largest deviation between analytic and central-difference gradients of the
/// global loss, relative to the largest gradient entry.
pub fn finite_difference_error(inst: &Instance, grads: &[ParamBank], h: f64) -> f64 {
    use dgcn_core::gcn::{forward_blocks, masked_loss, LossKind, Propagator};
    let prop = Propagator::from_graph(&inst.graph).unwrap();
    let kind = LossKind::for_labels(&inst.graph.labels);
    let loss = |banks: &[ParamBank]| {
        let cache = forward_blocks(&prop, &inst.graph.features, banks, &inst.partition.assign, &inst.spec, None).unwrap();
        masked_loss(cache.output(), &inst.graph.labels, inst.graph.train_mask(), kind).unwrap()
    };
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let flat = inst.banks[k].flatten();
        let analytic = g.flatten();
        for i in 0..flat.len() {
            let mut banks = inst.banks.clone();
            let mut plus = flat.clone();
            plus[i] += h;
            banks[k] = ParamBank::unflatten(&inst.spec, &plus).unwrap();
            let lp = loss(&banks);
            let mut minus = flat.clone();
            minus[i] -= h;
            banks[k] = ParamBank::unflatten(&inst.spec, &minus).unwrap();
            let lm = loss(&banks);
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - analytic[i]).abs());
            scale = scale.max(analytic[i].abs());
        }
    }
    worst / scale.max(1e-12)
}
