//! Desk-scale benchmark generators.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataGraph, Labels};
use crate::rng::{stream, Purpose};
use crate::sparse::CsrMatrix;

/// Planted-partition graph with class-conditioned Gaussian features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmSpec {
    pub nodes: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Std of the feature noise around unit-variance class means.
    pub feature_noise: f64,
    /// Fraction of nodes in the training set (at least one per class).
    pub label_fraction: f64,
    pub require_connected: bool,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            nodes: 300,
            classes: 3,
            p_in: 0.1,
            p_out: 0.003,
            feature_dim: 16,
            feature_noise: 2.0,
            label_fraction: 0.1,
            require_connected: true,
            seed: 0,
        }
    }
}

/// Sensors on a jittered 2-D grid observed over time. Each data node is one
/// `(snapshot, sensor)` pair; edges connect sensors within a snapshot
/// through a thresholded Gaussian kernel. Inputs are the last `window`
/// readings and the target is the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub jitter: f64,
    /// `w_ij = exp(-d_ij^2 / bandwidth)`.
    pub bandwidth: f64,
    /// Kernel weights below this are dropped.
    pub threshold: f64,
    pub window: usize,
    pub snapshots: usize,
    /// Leading fraction of snapshots used for training.
    pub train_fraction: f64,
    /// Degree of the Chebyshev polynomial of the shift driving the process.
    pub dynamics_degree: usize,
    /// Gain on that polynomial term.
    pub persistence: f64,
    /// Gain on the nonlinear one-hop term `|S u| - mean |S u|`.
    pub nonlinearity: f64,
    pub seed: u64,
}

impl Default for SensorGridSpec {
    fn default() -> Self {
        SensorGridSpec {
            rows: 6,
            cols: 6,
            spacing: 1.5,
            jitter: 0.2,
            bandwidth: 10.0,
            threshold: 0.5,
            window: 6,
            snapshots: 200,
            train_fraction: 0.5,
            dynamics_degree: 4,
            persistence: 0.9,
            nonlinearity: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    SbmClassification(SbmSpec),
    SensorGridRegression(SensorGridSpec),
}

impl SyntheticSpec {
    pub fn seed(&self) -> u64 {
        match self {
            SyntheticSpec::SbmClassification(s) => s.seed,
            SyntheticSpec::SensorGridRegression(s) => s.seed,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DataGraph> {
    match spec {
        SyntheticSpec::SbmClassification(s) => sbm(s),
        SyntheticSpec::SensorGridRegression(s) => sensor_grid(s),
    }
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::param(format!("{name} {f} must lie in (0, 1]")));
    }
    Ok(())
}

/// Number of connected components of an undirected edge list.
pub fn component_count(n: usize, edges: &[(usize, usize, f64)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut count = n;
    for &(a, b, _) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            count -= 1;
        }
    }
    count
}

pub fn sbm(spec: &SbmSpec) -> Result<DataGraph> {
    check_fraction("label_fraction", spec.label_fraction)?;
    if spec.classes == 0 || spec.nodes < spec.classes || spec.feature_dim == 0 {
        return Err(Error::param("sbm needs nodes >= classes >= 1 and feature_dim >= 1"));
    }
    for (name, p) in [("p_in", spec.p_in), ("p_out", spec.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param(format!("{name} {p} must lie in [0, 1]")));
        }
    }
    let n = spec.nodes;
    let mut rng = stream(spec.seed, Purpose::Synthetic, 0);
    // contiguous, balanced blocks
    let class: Vec<usize> = (0..n).map(|i| i * spec.classes / n).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if class[i] == class[j] { spec.p_in } else { spec.p_out };
            if rng.random_bool(p) {
                edges.push((i, j, 1.0));
            }
        }
    }
    let components = component_count(n, &edges);
    if spec.require_connected && components > 1 {
        return Err(Error::param(format!(
            "generated sbm graph has {components} connected components; raise p_in/p_out or clear require_connected"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let means = DMatrix::from_fn(spec.classes, spec.feature_dim, |_, _| normal.sample(&mut rng));
    let features = DMatrix::from_fn(n, spec.feature_dim, |i, c| {
        means[(class[i], c)] + spec.feature_noise * normal.sample(&mut rng)
    });
    let target = ((spec.label_fraction * n as f64).round() as usize).max(spec.classes);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut train = Vec::with_capacity(target);
    // one per class first, then fill in shuffled order
    for c in 0..spec.classes {
        train.push(*order.iter().find(|&&i| class[i] == c).expect("every class is populated"));
    }
    for &i in &order {
        if train.len() >= target {
            break;
        }
        if !train.contains(&i) {
            train.push(i);
        }
    }
    DataGraph::new(n, &edges, features, Labels::Classes(class.into_iter().map(Some).collect()), train)
}

/// Pairs of points whose kernel weight `exp(-d^2 / bandwidth)` reaches `threshold`.
pub fn kernel_edges(coords: &[(f64, f64)], bandwidth: f64, threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let d2 = (coords[i].0 - coords[j].0).powi(2) + (coords[i].1 - coords[j].1).powi(2);
            let w = (-d2 / bandwidth).exp();
            if w >= threshold {
                edges.push((i, j, w));
            }
        }
    }
    edges
}

/// Sensor coordinates, row-major over the grid.
pub fn sensor_coordinates(spec: &SensorGridSpec) -> Vec<(f64, f64)> {
    let mut rng = stream(spec.seed, Purpose::Synthetic, 1);
    let mut coords = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            coords.push((
                c as f64 * spec.spacing + rng.random_range(-spec.jitter..=spec.jitter),
                r as f64 * spec.spacing + rng.random_range(-spec.jitter..=spec.jitter),
            ));
        }
    }
    coords
}

pub fn sensor_grid(spec: &SensorGridSpec) -> Result<DataGraph> {
    check_fraction("train_fraction", spec.train_fraction)?;
    if spec.rows * spec.cols == 0 || spec.window == 0 || spec.snapshots < 2 {
        return Err(Error::param("sensor grid needs sensors, a window and at least two snapshots"));
    }
    if !(spec.bandwidth > 0.0) || !(0.0..=1.0).contains(&spec.threshold) {
        return Err(Error::param("bandwidth must be positive and threshold in [0, 1]"));
    }
    let s = spec.rows * spec.cols;
    let coords = sensor_coordinates(spec);
    let sensor_edges = kernel_edges(&coords, spec.bandwidth, spec.threshold);
    if component_count(s, &sensor_edges) > 1 {
        return Err(Error::param("sensor kernel graph is disconnected; lower the threshold or the spacing"));
    }
    // latent process u_{t+1} = a T_d(S) u_t + c (|S u_t| - mean) + e_t, with S the
    // renormalized kernel adjacency (self-loops included) of the sensors
    let mut triplets: Vec<(usize, usize, f64)> = (0..s).map(|i| (i, i, 1.0)).collect();
    for &(i, j, w) in &sensor_edges {
        triplets.push((i, j, w));
        triplets.push((j, i, w));
    }
    let raw = CsrMatrix::from_triplets(s, &triplets);
    let deg: Vec<f64> = (0..s).map(|i| raw.row(i).map(|(_, w)| w).sum()).collect();
    let shift = CsrMatrix::from_triplets(
        s,
        &raw.triplets().map(|(i, j, w)| (i, j, w / (deg[i] * deg[j]).sqrt())).collect::<Vec<_>>(),
    );
    let apply = |v: &DMatrix<f64>| shift.mul_dense(v);
    let mut rng = stream(spec.seed, Purpose::Synthetic, 2);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let burn_in = 50;
    let steps = burn_in + spec.window + spec.snapshots;
    let mut u = DMatrix::from_fn(s, 1, |_, _| normal.sample(&mut rng));
    let mut series: Vec<DVector<f64>> = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (mut prev, mut cur) = (u.clone(), apply(&u));
        let poly = match spec.dynamics_degree {
            0 => u.clone(),
            _ => {
                for _ in 1..spec.dynamics_degree {
                    let next = apply(&cur) * 2.0 - &prev;
                    prev = std::mem::replace(&mut cur, next);
                }
                cur
            }
        };
        let local = apply(&u).abs();
        let local_mean = local.mean();
        u = DMatrix::from_fn(s, 1, |i, _| {
            spec.persistence * poly[(i, 0)] + spec.nonlinearity * (local[(i, 0)] - local_mean) + normal.sample(&mut rng)
        });
        series.push(DVector::from_column_slice(u.as_slice()));
    }
    let series = &series[burn_in..];
    let scale = {
        let all: Vec<f64> = series.iter().flat_map(|v| v.iter().copied()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt()
    };
    let n = s * spec.snapshots;
    let mut edges = Vec::with_capacity(sensor_edges.len() * spec.snapshots);
    let mut features = DMatrix::zeros(n, spec.window);
    let mut targets = Vec::with_capacity(n);
    for t in 0..spec.snapshots {
        let base = t * s;
        edges.extend(sensor_edges.iter().map(|&(i, j, w)| (base + i, base + j, w)));
        for i in 0..s {
            for w in 0..spec.window {
                features[(base + i, w)] = series[t + w][i] / scale;
            }
            targets.push(Some(series[t + spec.window][i] / scale));
        }
    }
    let train_snapshots = ((spec.train_fraction * spec.snapshots as f64).round() as usize).clamp(1, spec.snapshots);
    let train = (0..train_snapshots * s).collect();
    DataGraph::new(n, &edges, features, Labels::Targets(targets), train)
}

/// Owner of every sensor-grid node: `m` base stations equispaced on a
/// circle around the grid centre, each sensor reporting to the closest one
/// for every snapshot. Station `k` sits at angle `2 pi k / m`, so a ring over
/// station ids joins geographic neighbours.
pub fn sensor_stations(spec: &SensorGridSpec, m: usize) -> Result<Vec<usize>> {
    let coords = sensor_coordinates(spec);
    if m == 0 || m > coords.len() {
        return Err(Error::param(format!("station count {m} must lie in 1..={}", coords.len())));
    }
    let (cx, cy) = (
        (spec.cols - 1) as f64 * spec.spacing / 2.0,
        (spec.rows - 1) as f64 * spec.spacing / 2.0,
    );
    let radius = 0.35 * (spec.cols.max(spec.rows) - 1) as f64 * spec.spacing;
    let stations: Vec<(f64, f64)> = (0..m)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            (cx + radius * a.cos(), cy + radius * a.sin())
        })
        .collect();
    let owner: Vec<usize> = coords
        .iter()
        .map(|&(x, y)| {
            let d = |k: usize| (stations[k].0 - x).powi(2) + (stations[k].1 - y).powi(2);
            (0..m).min_by(|&a, &b| d(a).total_cmp(&d(b))).expect("m >= 1")
        })
        .collect();
    let mut used = vec![false; m];
    owner.iter().for_each(|&k| used[k] = true);
    if let Some(k) = used.iter().position(|&u| !u) {
        return Err(Error::param(format!("station {k} is closest to no sensor")));
    }
    let s = coords.len();
    Ok((0..s * spec.snapshots).map(|node| owner[node % s]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_below_threshold_drops_the_edge() {
        // exp(-d^2/10) = 0.4
        let d = (10.0 * (1.0f64 / 0.4).ln()).sqrt();
        assert!(kernel_edges(&[(0.0, 0.0), (d, 0.0)], 10.0, 0.5).is_empty());
        let close = (10.0 * (1.0f64 / 0.6).ln()).sqrt();
        assert_eq!(kernel_edges(&[(0.0, 0.0), (close, 0.0)], 10.0, 0.5).len(), 1);
    }

    #[test]
    fn same_seed_same_graph() {
        for spec in [
            SyntheticSpec::SbmClassification(SbmSpec::default()),
            SyntheticSpec::SensorGridRegression(SensorGridSpec::default()),
        ] {
            let a = generate_synthetic(&spec).unwrap();
            let b = generate_synthetic(&spec).unwrap();
            assert_eq!(a.adjacency(), b.adjacency());
            assert_eq!(a.features, b.features);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.train_mask(), b.train_mask());
        }
    }

    #[test]
    fn sbm_has_every_class_in_training() {
        let g = sbm(&SbmSpec::default()).unwrap();
        let Labels::Classes(c) = &g.labels else { panic!() };
        let mut seen = vec![false; 3];
        for &i in g.train_mask() {
            seen[c[i].unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(g.train_mask().len(), 30);
    }

    #[test]
    fn disconnected_sbm_is_flagged() {
        let spec = SbmSpec {
            p_out: 0.0,
            ..SbmSpec::default()
        };
        assert!(sbm(&spec).is_err());
        assert!(sbm(&SbmSpec {
            require_connected: false,
            ..spec
        })
        .is_ok());
    }

    #[test]
    fn sensor_grid_shapes() {
        let spec = SensorGridSpec {
            snapshots: 40,
            ..SensorGridSpec::default()
        };
        let g = sensor_grid(&spec).unwrap();
        assert_eq!(g.n(), 36 * 40);
        assert_eq!(g.feature_dim(), 6);
        assert_eq!(g.train_mask().len(), 36 * 20);
        // the window slides: feature w+1 of snapshot t equals feature w of snapshot t+1
        assert_eq!(g.features[(36 + 5, 0)], g.features[(5, 1)]);
        let owner = sensor_stations(&spec, 6).unwrap();
        assert_eq!(owner.len(), g.n());
        assert_eq!(owner[3], owner[36 + 3]);
        assert_eq!(owner.iter().copied().max(), Some(5));
    }
}
