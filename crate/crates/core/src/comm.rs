//! Undirected communication graphs over agents.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Set of undirected agent links `(k, z)`, stored with `k < z`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommGraph {
    m: usize,
    links: BTreeSet<(usize, usize)>,
}

impl CommGraph {
    pub fn empty(m: usize) -> Self {
        CommGraph {
            m,
            links: BTreeSet::new(),
        }
    }

    pub fn from_pairs(m: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = CommGraph::empty(m);
        for (k, z) in pairs {
            if k >= m || z >= m {
                return Err(Error::param(format!(
                    "agent link ({k}, {z}) outside 0..{m}"
                )));
            }
            g.insert(k, z);
        }
        Ok(g)
    }

    pub fn complete(m: usize) -> Self {
        let mut g = CommGraph::empty(m);
        for k in 0..m {
            for z in k + 1..m {
                g.insert(k, z);
            }
        }
        g
    }

    pub fn line(m: usize) -> Self {
        let mut g = CommGraph::empty(m);
        for k in 1..m {
            g.insert(k - 1, k);
        }
        g
    }

    pub fn ring(m: usize) -> Self {
        let mut g = CommGraph::line(m);
        if m > 2 {
            g.insert(m - 1, 0);
        }
        g
    }

    /// Links whose entry in a boolean "needed" matrix is set, e.g. `B_kz > 0`.
    pub fn from_adjacency(adj: &[Vec<bool>]) -> Self {
        let m = adj.len();
        let mut g = CommGraph::empty(m);
        for k in 0..m {
            for z in 0..m {
                if k != z && (adj[k][z] || adj[z][k]) {
                    g.insert(k, z);
                }
            }
        }
        g
    }

    pub fn insert(&mut self, k: usize, z: usize) {
        if k != z {
            self.links.insert((k.min(z), k.max(z)));
        }
    }

    pub fn remove(&mut self, k: usize, z: usize) -> bool {
        self.links.remove(&(k.min(z), k.max(z)))
    }

    pub fn contains(&self, k: usize, z: usize) -> bool {
        k == z || self.links.contains(&(k.min(z), k.max(z)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().copied()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(k, z) in &self.links {
            deg[k] += 1;
            deg[z] += 1;
        }
        deg
    }

    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        self.links
            .iter()
            .filter_map(|&(a, b)| {
                if a == k {
                    Some(b)
                } else if b == k {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.m).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut c = x;
            while p[c] != r {
                let next = p[c];
                p[c] = r;
                c = next;
            }
            r
        }
        for &(k, z) in &self.links {
            let (rk, rz) = (find(&mut parent, k), find(&mut parent, z));
            if rk != rz {
                parent[rk.max(rz)] = rk.min(rz);
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for k in 0..self.m {
            let r = find(&mut parent, k);
            groups.entry(r).or_default().push(k);
        }
        groups.into_values().collect()
    }

    pub fn is_connected(&self) -> bool {
        self.m <= 1 || self.components().len() == 1
    }

    /// Randomly removes up to `fraction` of the links that are not in `keep`,
    /// never disconnecting the graph.
    pub fn drop_random<R: Rng + ?Sized>(&self, keep: &CommGraph, fraction: f64, rng: &mut R) -> CommGraph {
        let mut out = self.clone();
        let mut candidates: Vec<(usize, usize)> = self
            .links
            .iter()
            .copied()
            .filter(|&(k, z)| !keep.contains(k, z))
            .collect();
        candidates.shuffle(rng);
        let target = (fraction * self.links.len() as f64).round() as usize;
        let mut dropped = 0;
        for (k, z) in candidates {
            if dropped >= target {
                break;
            }
            out.remove(k, z);
            if out.is_connected() {
                dropped += 1;
            } else {
                out.insert(k, z);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_topologies() {
        assert_eq!(CommGraph::complete(4).len(), 6);
        assert_eq!(CommGraph::ring(5).len(), 5);
        assert_eq!(CommGraph::line(5).len(), 4);
        assert!(CommGraph::line(5).is_connected());
        assert_eq!(CommGraph::ring(2).len(), 1);
    }

    #[test]
    fn components_are_reported() {
        let g = CommGraph::from_pairs(5, [(0, 1), (3, 4)]).unwrap();
        assert_eq!(g.components(), vec![vec![0, 1], vec![2], vec![3, 4]]);
        assert!(!g.is_connected());
    }

    #[test]
    fn drop_keeps_connectivity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = CommGraph::complete(8);
        let d = g.drop_random(&CommGraph::empty(8), 0.75, &mut rng);
        assert!(d.is_connected());
        assert_eq!(d.len(), 28 - 21);
    }
}
