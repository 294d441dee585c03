//! Data graphs, shift operators, agent partitions and edge pruning.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::CommGraph;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Choice of graph shift operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// `(Deg + I)^{-1/2} (A + I) (Deg + I)^{-1/2}`.
    #[default]
    SymRenorm,
    /// `Deg^{-1} A`.
    RowStochastic,
    /// `Deg - A`.
    Laplacian,
    /// `I`, removes the graph entirely (plain MLP baseline).
    Identity,
}

impl ShiftKind {
    fn name(self) -> &'static str {
        match self {
            ShiftKind::SymRenorm => "sym_renorm",
            ShiftKind::RowStochastic => "row_stochastic",
            ShiftKind::Laplacian => "laplacian",
            ShiftKind::Identity => "identity",
        }
    }
}

/// Per-node supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<Option<usize>>),
    Targets(Vec<Option<f64>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        match self {
            Labels::Classes(v) => v[i].is_some(),
            Labels::Targets(v) => v[i].is_some(),
        }
    }

    /// `max class + 1` for classification, 1 for regression.
    pub fn output_dim(&self) -> usize {
        match self {
            Labels::Classes(v) => v.iter().flatten().max().map_or(0, |c| c + 1),
            Labels::Targets(_) => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Labels::Classes(_))
    }
}

/// Graph over data points with features, labels and a shift operator.
#[derive(Debug, Clone)]
pub struct DataGraph {
    n: usize,
    adjacency: CsrMatrix,
    pub features: DMatrix<f64>,
    pub labels: Labels,
    train_mask: Vec<usize>,
    shift: Option<CsrMatrix>,
    shift_kind: Option<ShiftKind>,
}

impl DataGraph {
    /// Builds a graph from undirected edges. Each edge may be listed once or in
    /// both directions; the two directions must then carry the same weight.
    pub fn new(
        n: usize,
        edges: &[(usize, usize, f64)],
        features: DMatrix<f64>,
        labels: Labels,
        train_mask: Vec<usize>,
    ) -> Result<Self> {
        if features.nrows() != n {
            return Err(Error::dim("features", format!("{n} rows"), features.nrows()));
        }
        if labels.len() != n {
            return Err(Error::dim("labels", format!("{n} entries"), labels.len()));
        }
        let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(s, d, w) in edges {
            for id in [s, d] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { id, n });
                }
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::param(format!(
                    "edge ({s}, {d}) has weight {w}; weights must be finite and nonnegative"
                )));
            }
            if directed.insert((s, d), w).is_some() {
                return Err(Error::DuplicateEdge(s, d));
            }
        }
        let mut triplets = Vec::with_capacity(2 * directed.len());
        for (&(s, d), &w) in &directed {
            match directed.get(&(d, s)) {
                Some(&r) if r != w => {
                    return Err(Error::DirectedInput {
                        src: s,
                        dst: d,
                        forward: w,
                        reverse: r,
                    })
                }
                Some(_) => triplets.push((s, d, w)),
                None => {
                    triplets.push((s, d, w));
                    triplets.push((d, s, w));
                }
            }
        }
        let mut mask = train_mask;
        mask.sort_unstable();
        mask.dedup();
        for &i in &mask {
            if i >= n {
                return Err(Error::NodeOutOfRange { id: i, n });
            }
            if !labels.is_labeled(i) {
                return Err(Error::param(format!("training node {i} has no label")));
            }
        }
        Ok(DataGraph {
            n,
            adjacency: CsrMatrix::from_triplets(n, &triplets),
            features,
            labels,
            train_mask: mask,
            shift: None,
            shift_kind: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Symmetric adjacency, both directions stored.
    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    /// Directed edge list `(src, dst, weight)`, each undirected edge twice.
    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency.triplets()
    }

    /// Number of undirected edges, self-loops counted once.
    pub fn undirected_edge_count(&self) -> usize {
        self.directed_edges().filter(|&(s, d, _)| s <= d).count()
    }

    pub fn train_mask(&self) -> &[usize] {
        &self.train_mask
    }

    /// Labeled nodes outside the training set.
    pub fn test_mask(&self) -> Vec<usize> {
        let train: BTreeSet<usize> = self.train_mask.iter().copied().collect();
        (0..self.n)
            .filter(|i| self.labels.is_labeled(*i) && !train.contains(i))
            .collect()
    }

    pub fn shift(&self) -> Option<&CsrMatrix> {
        self.shift.as_ref()
    }

    pub fn shift_kind(&self) -> Option<ShiftKind> {
        self.shift_kind
    }

    /// Shift operator, or an error if `normalize_shift` was never applied.
    pub fn require_shift(&self) -> Result<&CsrMatrix> {
        self.shift
            .as_ref()
            .ok_or_else(|| Error::param("graph has no shift operator; call normalize_shift first"))
    }

    /// Replaces the node features, keeping structure and labels.
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.n {
            return Err(Error::dim("features", format!("{} rows", self.n), features.nrows()));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }
}

/// Returns a copy of `graph` with its shift operator populated.
pub fn normalize_shift(graph: &DataGraph, kind: ShiftKind) -> Result<DataGraph> {
    let n = graph.n;
    let a = &graph.adjacency;
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).map(|(_, w)| w).sum()).collect();
    let shift = match kind {
        ShiftKind::Identity => CsrMatrix::identity(n),
        ShiftKind::SymRenorm => {
            let mut t: Vec<(usize, usize, f64)> = a.triplets().collect();
            t.extend((0..n).map(|i| (i, i, 1.0)));
            let hat = CsrMatrix::from_triplets(n, &t);
            let inv_sqrt: Vec<f64> = (0..n)
                .map(|i| 1.0 / hat.row(i).map(|(_, w)| w).sum::<f64>().sqrt())
                .collect();
            let scaled: Vec<_> = hat
                .triplets()
                .map(|(r, c, w)| (r, c, inv_sqrt[r] * w * inv_sqrt[c]))
                .collect();
            CsrMatrix::from_triplets(n, &scaled)
        }
        ShiftKind::RowStochastic => {
            if let Some(node) = degree.iter().position(|&d| d <= 0.0) {
                return Err(Error::ZeroDegree {
                    node,
                    kind: kind.name(),
                });
            }
            let t: Vec<_> = a.triplets().map(|(r, c, w)| (r, c, w / degree[r])).collect();
            CsrMatrix::from_triplets(n, &t)
        }
        ShiftKind::Laplacian => {
            let mut t: Vec<_> = a.triplets().map(|(r, c, w)| (r, c, -w)).collect();
            t.extend((0..n).map(|i| (i, i, degree[i])));
            CsrMatrix::from_triplets(n, &t)
        }
    };
    let mut out = graph.clone();
    out.shift = Some(shift);
    out.shift_kind = Some(kind);
    Ok(out)
}

/// Assignment of data nodes to agents with the derived boundary counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub m: usize,
    pub assign: Vec<usize>,
    pub agent_nodes: Vec<Vec<usize>>,
    pub agent_train: Vec<Vec<usize>>,
    /// `boundary[k][z]`: directed data edges `(i, j)` with `a(i) = k`, `a(j) = z`.
    pub boundary: Vec<Vec<usize>>,
    /// `forbidden[k][z]`: `k != z` and `boundary[k][z] == 0`.
    pub forbidden: Vec<Vec<bool>>,
}

impl Partition {
    /// Derives node lists, training sets, `B` and `A` from an assignment.
    pub fn from_assignment(graph: &DataGraph, m: usize, assign: Vec<usize>) -> Result<Self> {
        if m == 0 {
            return Err(Error::param("agent count must be positive"));
        }
        if assign.len() != graph.n {
            return Err(Error::dim("assignment", graph.n, assign.len()));
        }
        if let Some(&bad) = assign.iter().find(|&&a| a >= m) {
            return Err(Error::param(format!("agent id {bad} outside 0..{m}")));
        }
        let mut agent_nodes = vec![Vec::new(); m];
        for (i, &k) in assign.iter().enumerate() {
            agent_nodes[k].push(i);
        }
        let mut agent_train = vec![Vec::new(); m];
        for &i in graph.train_mask() {
            agent_train[assign[i]].push(i);
        }
        let mut boundary = vec![vec![0usize; m]; m];
        for (i, j, _) in graph.directed_edges() {
            if assign[i] != assign[j] {
                boundary[assign[i]][assign[j]] += 1;
            }
        }
        let forbidden = (0..m)
            .map(|k| (0..m).map(|z| k != z && boundary[k][z] == 0).collect())
            .collect();
        Ok(Partition {
            m,
            assign,
            agent_nodes,
            agent_train,
            boundary,
            forbidden,
        })
    }

    /// Recomputes `B` and `A` against a (possibly pruned) graph.
    pub fn rebuild(&self, graph: &DataGraph) -> Result<Self> {
        Partition::from_assignment(graph, self.m, self.assign.clone())
    }

    /// Agent links required by the data graph (`B_kz > 0`).
    pub fn required_links(&self) -> CommGraph {
        let need: Vec<Vec<bool>> = self
            .boundary
            .iter()
            .map(|row| row.iter().map(|&b| b > 0).collect())
            .collect();
        CommGraph::from_adjacency(&need)
    }
}

/// Randomized breadth-first growth from `m` random seeds.
///
/// Each round every agent expands its whole frontier by one hop. A node
/// claimed by several agents in the same round goes to one claimant chosen
/// uniformly at random. Nodes no frontier reaches are dealt round-robin.
pub fn partition_bfs(graph: &DataGraph, m: usize, rng_seed: u64) -> Result<Partition> {
    let n = graph.n;
    if n == 0 {
        return Err(Error::param("cannot partition an empty graph"));
    }
    if m == 0 || m > n {
        return Err(Error::param(format!("agent count {m} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    const NONE: usize = usize::MAX;
    let mut assign = vec![NONE; n];
    let mut frontiers: Vec<Vec<usize>> = Vec::with_capacity(m);
    for (k, seed) in index::sample(&mut rng, n, m).into_iter().enumerate() {
        assign[seed] = k;
        frontiers.push(vec![seed]);
    }
    let adj = &graph.adjacency;
    loop {
        let mut claims: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, frontier) in frontiers.iter_mut().enumerate() {
            frontier.shuffle(&mut rng);
            for &u in frontier.iter() {
                for (v, _) in adj.row(u) {
                    if assign[v] == NONE {
                        let c = claims.entry(v).or_default();
                        if c.last() != Some(&k) {
                            c.push(k);
                        }
                    }
                }
            }
        }
        if claims.is_empty() {
            break;
        }
        frontiers.iter_mut().for_each(Vec::clear);
        for (v, claimants) in claims {
            let k = claimants[rng.random_range(0..claimants.len())];
            assign[v] = k;
            frontiers[k].push(v);
        }
    }
    let mut next = 0;
    for a in assign.iter_mut().filter(|a| **a == NONE) {
        *a = next % m;
        next += 1;
    }
    Partition::from_assignment(graph, m, assign)
}

/// Result of pruning a data graph to an agent topology.
#[derive(Debug, Clone)]
pub struct Pruned {
    pub graph: DataGraph,
    /// Fraction of undirected non-loop data edges that survived.
    pub survival: f64,
}

/// Drops every cross-agent data edge whose agents are not linked in `comm`,
/// then re-normalizes the shift with the graph's original kind.
pub fn prune_to_comm(graph: &DataGraph, partition: &Partition, comm: &CommGraph) -> Result<Pruned> {
    if partition.assign.len() != graph.n {
        return Err(Error::dim("partition", graph.n, partition.assign.len()));
    }
    if comm.m() != partition.m {
        return Err(Error::dim("communication graph agents", partition.m, comm.m()));
    }
    let a = &partition.assign;
    let mut before = 0usize;
    let mut after = 0usize;
    let mut kept = Vec::new();
    for (i, j, w) in graph.directed_edges() {
        if i > j {
            continue;
        }
        let keep = a[i] == a[j] || comm.contains(a[i], a[j]);
        if i != j {
            before += 1;
            after += keep as usize;
        }
        if keep {
            kept.push((i, j, w));
        }
    }
    let mut out = DataGraph::new(
        graph.n,
        &kept,
        graph.features.clone(),
        graph.labels.clone(),
        graph.train_mask.clone(),
    )?;
    if graph.shift.is_some() {
        out = normalize_shift(&out, graph.shift_kind.unwrap_or_default())?;
    }
    let survival = if before == 0 {
        1.0
    } else {
        after as f64 / before as f64
    };
    Ok(Pruned {
        graph: out,
        survival,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, edges: &[(usize, usize)]) -> DataGraph {
        let e: Vec<_> = edges.iter().map(|&(a, b)| (a, b, 1.0)).collect();
        DataGraph::new(
            n,
            &e,
            DMatrix::zeros(n, 1),
            Labels::Classes(vec![Some(0); n]),
            vec![0],
        )
        .unwrap()
    }

    fn path(n: usize) -> DataGraph {
        let e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        toy(n, &e)
    }

    #[test]
    fn edgeless_sym_renorm_is_identity() {
        let g = normalize_shift(&toy(4, &[]), ShiftKind::SymRenorm).unwrap();
        assert_eq!(g.shift().unwrap().to_dense(), DMatrix::identity(4, 4));
    }

    #[test]
    fn identity_kind_ignores_edges() {
        let g = normalize_shift(&path(5), ShiftKind::Identity).unwrap();
        assert_eq!(g.shift().unwrap().to_dense(), DMatrix::identity(5, 5));
    }

    #[test]
    fn two_node_sym_renorm() {
        let g = normalize_shift(&toy(2, &[(0, 1)]), ShiftKind::SymRenorm).unwrap();
        let expected = DMatrix::from_element(2, 2, 0.5);
        assert!((g.shift().unwrap().to_dense() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn row_stochastic_rejects_isolated_node() {
        let err = normalize_shift(&toy(3, &[(0, 1)]), ShiftKind::RowStochastic).unwrap_err();
        assert!(matches!(err, Error::ZeroDegree { node: 2, .. }), "{err}");
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let g = normalize_shift(&path(4), ShiftKind::Laplacian).unwrap();
        let d = g.shift().unwrap().to_dense();
        for r in 0..4 {
            assert!(d.row(r).sum().abs() < 1e-15);
        }
        assert_eq!(d[(1, 1)], 2.0);
    }

    #[test]
    fn directed_weights_are_rejected() {
        let err = DataGraph::new(
            2,
            &[(0, 1, 1.0), (1, 0, 2.0)],
            DMatrix::zeros(2, 1),
            Labels::Classes(vec![None, None]),
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DirectedInput { .. }));
    }

    #[test]
    fn duplicate_and_out_of_range_edges_are_rejected() {
        let dup = DataGraph::new(
            2,
            &[(0, 1, 1.0), (0, 1, 1.0)],
            DMatrix::zeros(2, 1),
            Labels::Classes(vec![None, None]),
            vec![],
        );
        assert!(matches!(dup, Err(Error::DuplicateEdge(0, 1))));
        let oob = DataGraph::new(
            2,
            &[(0, 5, 1.0)],
            DMatrix::zeros(2, 1),
            Labels::Classes(vec![None, None]),
            vec![],
        );
        assert!(matches!(oob, Err(Error::NodeOutOfRange { id: 5, n: 2 })));
    }

    #[test]
    fn train_mask_must_be_labeled() {
        let err = DataGraph::new(
            2,
            &[],
            DMatrix::zeros(2, 1),
            Labels::Classes(vec![Some(1), None]),
            vec![1],
        );
        assert!(err.is_err());
    }

    #[test]
    fn single_agent_partition() {
        let g = path(6);
        let p = partition_bfs(&g, 1, 9).unwrap();
        assert!(p.assign.iter().all(|&a| a == 0));
        assert_eq!(p.boundary, vec![vec![0]]);
        assert_eq!(p.forbidden, vec![vec![false]]);
    }

    #[test]
    fn one_node_per_agent_on_a_path() {
        let g = path(7);
        let p = partition_bfs(&g, 7, 1).unwrap();
        let mut seen = p.assign.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        for k in 0..7 {
            for z in 0..7 {
                let i = p.agent_nodes[k][0];
                let j = p.agent_nodes[z][0];
                let adjacent = i.abs_diff(j) == 1;
                assert_eq!(p.boundary[k][z] > 0, adjacent);
                assert_eq!(p.forbidden[k][z], k != z && !adjacent);
            }
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let e: Vec<_> = (0..30).flat_map(|i| [(i, (i + 1) % 30), (i, (i + 7) % 30)]).collect();
        let g = toy(30, &e);
        assert_eq!(partition_bfs(&g, 4, 11).unwrap(), partition_bfs(&g, 4, 11).unwrap());
    }

    #[test]
    fn unreachable_nodes_are_dealt_round_robin() {
        // nodes 3..6 are isolated; with m = 1 the seed may be anywhere
        let g = toy(6, &[(0, 1), (1, 2)]);
        let p = partition_bfs(&g, 2, 0).unwrap();
        assert_eq!(p.agent_nodes.iter().map(Vec::len).sum::<usize>(), 6);
        assert!(partition_bfs(&g, 0, 0).is_err());
        assert!(partition_bfs(&g, 7, 0).is_err());
    }

    #[test]
    fn pruning_with_complete_or_empty_topology() {
        let e: Vec<_> = (0..12).map(|i| (i, (i + 1) % 12)).collect();
        let g = normalize_shift(&toy(12, &e), ShiftKind::SymRenorm).unwrap();
        let p = partition_bfs(&g, 3, 5).unwrap();
        let full = prune_to_comm(&g, &p, &CommGraph::complete(3)).unwrap();
        assert_eq!(full.survival, 1.0);
        assert_eq!(full.graph.shift(), g.shift());
        let none = prune_to_comm(&g, &p, &CommGraph::empty(3)).unwrap();
        for (i, j, _) in none.graph.directed_edges() {
            assert_eq!(p.assign[i], p.assign[j]);
        }
        let intra = e.iter().filter(|&&(i, j)| p.assign[i] == p.assign[j]).count();
        assert!((none.survival - intra as f64 / 12.0).abs() < 1e-15);
    }
}
