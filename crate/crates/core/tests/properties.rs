mod common;

use common::{finite_difference_error, random_instance, rel_err, small_instance};
use dgcn_core::distributed::{consensus_step, MessageLog};
use dgcn_core::gcn::{gc_forward, Propagator};
use dgcn_core::metrics::{consensus_residual, oracle_gradients, stationarity};
use dgcn_core::topology::{deflated_spectral_radius, project_feasible};
use dgcn_core::{
    design_mixing_admm, metropolis_weights, normalize_shift, prune_to_comm, AdmmOptions, Basis, CommGraph, DataGraph,
    Labels, MixingMatrix, ModelSpec, Network, OptimizerKind, ParamBank, Partition, ShiftKind,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(max_m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (2..=max_m).prop_flat_map(|m| {
        prop::collection::vec(-2.0..2.0f64, m * m).prop_map(move |v| DMatrix::from_vec(m, m, v))
    })
}

fn projector(m: usize) -> DMatrix<f64> {
    DMatrix::from_element(m, m, 1.0 / m as f64)
}

/// Connected random agent graph: a random spanning tree plus extra links.
fn random_comm(m: usize, rng: &mut ChaCha8Rng) -> CommGraph {
    let mut g = CommGraph::empty(m);
    for z in 1..m {
        g.insert(rng.random_range(0..z), z);
    }
    for _ in 0..m {
        let (a, b) = (rng.random_range(0..m), rng.random_range(0..m));
        if a != b {
            g.insert(a, b);
        }
    }
    g
}

/// Stacks banks into one vector `[w_1; ...; w_m]`.
fn stacked(banks: &[ParamBank]) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_iterator(
        banks.iter().map(|b| b.len()).sum(),
        banks.iter().flat_map(|b| b.flatten()),
    )
}

/// `(1/m) 11^T (x) I_p`, built densely.
fn consensus_projector(m: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m * p, m * p, |r, c| if r % p == c % p { 1.0 / m as f64 } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent(x in square(8), gamma in 0.05..0.95f64) {
        let p = project_feasible(&x, gamma).unwrap();
        let pp = project_feasible(&p, gamma).unwrap();
        prop_assert!((&pp - &p).amax() <= 1e-9);
    }

    #[test]
    fn projection_has_unit_rows_and_bounded_radius(x in square(8), gamma in 0.05..0.95f64) {
        let p = project_feasible(&x, gamma).unwrap();
        for r in 0..p.nrows() {
            prop_assert!((p.row(r).sum() - 1.0).abs() <= 1e-10);
        }
        prop_assert!((&p - p.transpose()).amax() <= 1e-12);
        prop_assert!(deflated_spectral_radius(&p).unwrap() <= 1.0 - gamma + 1e-8);
    }

    #[test]
    fn iterated_mixing_contracts_geometrically(seed in any::<u64>(), m in 2..10usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = metropolis_weights(&random_comm(m, &mut rng)).unwrap();
        let rho = 1.0 - c.spectral_gap();
        let j = projector(m);
        let mut power = DMatrix::identity(m, m);
        for t in 1..=12 {
            power = &power * c.entries();
            let dev = &power - &j;
            // spectral norm of the deflated power is exactly rho^t
            let sv = dev.clone().svd(false, false).singular_values.max();
            prop_assert!(sv <= rho.powi(t) + 1e-12, "t={} {} > {}", t, sv, rho.powi(t));
        }
        let mut p1 = c.entries() - &j;
        for t in 1..=12 {
            let next = &p1 * (c.entries() - &j);
            prop_assert!(next.norm() <= rho * p1.norm() + 1e-12, "t={}", t);
            p1 = next;
        }
    }

    #[test]
    fn one_consensus_step_contracts_disagreement(seed in any::<u64>(), m in 2..8usize, p in 1..20usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = metropolis_weights(&random_comm(m, &mut rng)).unwrap();
        let spec = ModelSpec::stack(p, &[], 1, 1, Basis::Monomial, false);
        let psi: Vec<ParamBank> = (0..m).map(|_| ParamBank::gaussian(&spec, 1.0, &mut rng)).collect();
        let (w, scalars) = consensus_step(&psi, &c).unwrap();
        let rho = 1.0 - c.spectral_gap();
        prop_assert!(consensus_residual(&w) <= rho * consensus_residual(&psi) + 1e-12);
        prop_assert_eq!(scalars, 2 * spec.num_params() as u64 * c.comm_edges().len() as u64);
    }

    #[test]
    fn consensus_residual_matches_explicit_projector(seed in any::<u64>(), m in 1..6usize, p in 1..40usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::stack(p, &[], 1, 1, Basis::Monomial, false);
        let banks: Vec<ParamBank> = (0..m).map(|_| ParamBank::gaussian(&spec, 1.0, &mut rng)).collect();
        let w = stacked(&banks);
        let q = banks[0].len();
        let explicit = (&w - consensus_projector(m, q) * &w).norm();
        prop_assert!((consensus_residual(&banks) - explicit).abs() <= 1e-10 * (1.0 + explicit));
    }

    #[test]
    fn flatten_round_trip(seed in any::<u64>()) {
        let inst = random_instance(seed % 10_000);
        for b in &inst.banks {
            let flat = b.flatten();
            prop_assert_eq!(flat.len(), inst.spec.num_params());
            prop_assert_eq!(&ParamBank::unflatten(&inst.spec, &flat).unwrap(), b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn boundary_and_forbidden_invariants(seed in 0..5_000u64, m_extra in 0..3usize) {
        let inst = random_instance(seed);
        // pruning may isolate nodes, which only the self-loop normalization tolerates
        let g = &normalize_shift(&inst.graph, ShiftKind::SymRenorm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for partition in [inst.partition.clone(), {
            let m = (inst.partition.m + m_extra).min(g.n());
            let assign = (0..g.n()).map(|_| rng.random_range(0..m)).collect();
            Partition::from_assignment(g, m, assign).unwrap()
        }] {
            check_partition(g, &partition)?;
            // pruning to a random topology, then recomputing
            let comm = random_comm(partition.m, &mut rng).drop_random(&CommGraph::empty(partition.m), 0.5, &mut rng);
            let pruned = prune_to_comm(g, &partition, &comm).unwrap();
            let rebuilt = partition.rebuild(&pruned.graph).unwrap();
            check_partition(&pruned.graph, &rebuilt)?;
            for k in 0..partition.m {
                for z in 0..partition.m {
                    if k != z && !comm.contains(k, z) {
                        prop_assert_eq!(rebuilt.boundary[k][z], 0);
                    }
                }
            }
            // idempotence
            let again = prune_to_comm(&pruned.graph, &rebuilt, &comm).unwrap();
            prop_assert_eq!(again.graph.adjacency(), pruned.graph.adjacency());
            prop_assert_eq!(again.graph.shift(), pruned.graph.shift());
            prop_assert_eq!(again.survival, 1.0);
        }
    }

    #[test]
    fn shift_operators_are_normalized(seed in 0..5_000u64) {
        let inst = random_instance(seed);
        let sym = normalize_shift(&inst.graph, ShiftKind::SymRenorm).unwrap();
        let s = sym.shift().unwrap().to_dense();
        prop_assert!((&s - s.transpose()).amax() <= 1e-15);
        let rs = normalize_shift(&inst.graph, ShiftKind::RowStochastic).unwrap();
        let r = rs.shift().unwrap().to_dense();
        for i in 0..r.nrows() {
            prop_assert!((r.row(i).sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_permutation_equivariant(seed in 0..5_000u64) {
        let inst = random_instance(seed);
        let g = &inst.graph;
        let n = g.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // node i becomes node perm[i]
        let edges: Vec<(usize, usize, f64)> = g
            .directed_edges()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, w)| (perm[i], perm[j], w))
            .collect();
        let features = DMatrix::from_fn(n, g.feature_dim(), |r, c| {
            let src = perm.iter().position(|&p| p == r).unwrap();
            g.features[(src, c)]
        });
        let inv: Vec<usize> = (0..n).map(|r| perm.iter().position(|&p| p == r).unwrap()).collect();
        let labels = match &g.labels {
            Labels::Classes(v) => Labels::Classes(inv.iter().map(|&s| v[s]).collect()),
            Labels::Targets(v) => Labels::Targets(inv.iter().map(|&s| v[s]).collect()),
        };
        let train = g.train_mask().iter().map(|&i| perm[i]).collect();
        let permuted = DataGraph::new(n, &edges, features, labels, train).unwrap();
        let permuted = normalize_shift(&permuted, g.shift_kind().unwrap()).unwrap();
        let (a, _) = gc_forward(&Propagator::from_graph(g).unwrap(), &g.features, &inst.banks[0], &inst.spec).unwrap();
        let (b, _) = gc_forward(&Propagator::from_graph(&permuted).unwrap(), &permuted.features, &inst.banks[0], &inst.spec).unwrap();
        for i in 0..n {
            for c in 0..a.ncols() {
                prop_assert!((a[(i, c)] - b[(perm[i], c)]).abs() <= 1e-11 * (1.0 + a[(i, c)].abs()));
            }
        }
    }

    #[test]
    fn higher_order_with_zero_extra_taps_reduces_to_order_one(seed in 0..5_000u64, extra in 1..3usize) {
        let inst = random_instance(seed);
        let mut spec = inst.spec.clone();
        for l in &mut spec.layers {
            l.order = 1;
            l.basis = Basis::Monomial;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let low = ParamBank::gaussian(&spec, 0.7, &mut rng);
        let mut high_spec = spec.clone();
        for l in &mut high_spec.layers {
            l.order = 1 + extra;
        }
        let mut high = ParamBank::zeros(&high_spec);
        for (hl, ll) in high.layers.iter_mut().zip(&low.layers) {
            hl[0] = ll[0].clone();
            hl[1] = ll[1].clone();
        }
        let prop = Propagator::from_graph(&inst.graph).unwrap();
        let (a, _) = gc_forward(&prop, &inst.graph.features, &low, &spec).unwrap();
        let (b, _) = gc_forward(&prop, &inst.graph.features, &high, &high_spec).unwrap();
        prop_assert!(rel_err(&b, &a) <= 1e-13);
    }

    #[test]
    fn stationarity_matches_explicit_projector(seed in 0..5_000u64) {
        let inst = small_instance(seed, 30);
        let m = inst.partition.m;
        let p = inst.spec.num_params();
        prop_assume!(m * p <= 1000);
        let g = stationarity(&inst.graph, &inst.partition, &inst.banks, &inst.spec).unwrap();
        let mean = dgcn_core::metrics::mean_params(&inst.banks);
        let (_, grads) = oracle_gradients(&inst.graph, &inst.partition, &vec![mean; m], &inst.spec).unwrap();
        let v = stacked(&grads);
        let explicit = v.dot(&(consensus_projector(m, p) * &v));
        prop_assert!((g - explicit).abs() <= 1e-10 * (1.0 + explicit.abs()), "{} vs {}", g, explicit);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distributed_gradients_match_finite_differences(seed in 0..5_000u64) {
        let inst = small_instance(seed, 20);
        let net = Network::new(&inst.graph, &inst.partition, &inst.spec, &inst.partition.required_links()).unwrap();
        let mut agents = net.agents(inst.banks.clone(), OptimizerKind::Gd).unwrap();
        let mut log = MessageLog::new(net.m(), false);
        let out = net.forward(&mut agents, 0, None, &mut log).unwrap();
        let grads = net.backward(&agents, &net.loss_grads(&out).unwrap(), &mut log).unwrap();
        let err = finite_difference_error(&inst, &grads, 1e-6);
        prop_assert!(err <= 1e-6, "relative error {}", err);
    }

    #[test]
    fn message_batches_are_well_formed(seed in 0..5_000u64) {
        let inst = random_instance(seed);
        let net = Network::new(&inst.graph, &inst.partition, &inst.spec, &inst.partition.required_links()).unwrap();
        let mut agents = net.agents(inst.banks.clone(), OptimizerKind::Gd).unwrap();
        let mut log = MessageLog::new(net.m(), true);
        let out = net.forward(&mut agents, 0, None, &mut log).unwrap();
        net.backward(&agents, &net.loss_grads(&out).unwrap(), &mut log).unwrap();
        for b in log.batches.as_ref().unwrap() {
            prop_assert_ne!(b.from_agent, b.to_agent);
            prop_assert!(inst.partition.boundary[b.to_agent][b.from_agent] > 0 || inst.partition.boundary[b.from_agent][b.to_agent] > 0);
            let width = b.payload[0].1.len();
            prop_assert!(b.payload.iter().all(|(node, v)| v.len() == width && inst.partition.assign[*node] == b.to_agent));
        }
        prop_assert_eq!(log.forward, log.backward);
    }
}

#[test]
fn admm_three_agent_example() {
    let mut a = vec![vec![false; 3]; 3];
    a[0][2] = true;
    a[2][0] = true;
    let d = design_mixing_admm(
        &a,
        AdmmOptions {
            gamma: 0.4,
            ..AdmmOptions::default()
        },
    )
    .unwrap();
    let c = d.mixing.entries();
    assert_eq!(c[(0, 2)], 0.0);
    assert_eq!(c[(2, 0)], 0.0);
    assert!(d.unneeded_links.is_empty());
    assert!((c - c.transpose()).amax() <= 1e-12);
    for r in 0..3 {
        assert!((c.row(r).sum() - 1.0).abs() <= 1e-10);
    }
    assert!(deflated_spectral_radius(c).unwrap() <= 0.6 + 1e-8);
    // Feasible matrices with C_02 = 0 form the family
    // [[1-a, a, 0], [a, 1-a-b, b], [0, b, 1-b]]. A grid search over it finds
    // the best achievable penalty on forbidden entries, which is zero; the
    // ADMM design must reach the same objective.
    let mut best = f64::INFINITY;
    let mut feasible = 0;
    for i in 0..=200 {
        for j in 0..=200 {
            let (x, y) = (i as f64 / 200.0, j as f64 / 200.0);
            let cand = DMatrix::from_row_slice(3, 3, &[1.0 - x, x, 0.0, x, 1.0 - x - y, y, 0.0, y, 1.0 - y]);
            if deflated_spectral_radius(&cand).unwrap() <= 0.6 {
                feasible += 1;
                best = best.min(cand[(0, 2)].abs() + cand[(2, 0)].abs());
            }
        }
    }
    assert!(feasible > 0);
    let objective = c[(0, 2)].abs() + c[(2, 0)].abs();
    assert_eq!(objective, best);
}

#[test]
fn uniform_mixing_has_unit_gap() {
    for m in 1..6 {
        let c = MixingMatrix::uniform(m);
        assert!(deflated_spectral_radius(c.entries()).unwrap() <= 1e-12);
    }
}

fn check_partition(g: &DataGraph, p: &Partition) -> Result<(), TestCaseError> {
    let m = p.m;
    let mut out_cross = vec![0usize; m];
    let mut b = vec![vec![0usize; m]; m];
    for (i, j, _) in g.directed_edges() {
        if i != j && p.assign[i] != p.assign[j] {
            out_cross[p.assign[i]] += 1;
            b[p.assign[i]][p.assign[j]] += 1;
        }
    }
    prop_assert_eq!(&p.boundary, &b);
    for k in 0..m {
        prop_assert_eq!(p.boundary[k].iter().sum::<usize>(), out_cross[k]);
        prop_assert!(!p.forbidden[k][k]);
        for z in 0..m {
            if k != z {
                prop_assert_eq!(p.forbidden[k][z], p.boundary[k][z] == 0);
                prop_assert_eq!(p.boundary[k][z], p.boundary[z][k]);
            }
        }
    }
    let mut seen = vec![false; g.n()];
    for (k, nodes) in p.agent_nodes.iter().enumerate() {
        for &i in nodes {
            prop_assert!(!seen[i]);
            seen[i] = true;
            prop_assert_eq!(p.assign[i], k);
        }
    }
    prop_assert!(seen.iter().all(|&s| s));
    Ok(())
}
