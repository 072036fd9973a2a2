//! Binary spillover graphs: normalization, hop structure and GLASSO estimation.

mod glasso;
mod io;

pub use glasso::{
    default_penalty_grid, empirical_covariance, glasso_fit, glasso_graph, glasso_solve, CvPoint, CvRule,
    GlassoCvConfig, GraphSelection, PrecisionEstimate, SUPPORT_THRESHOLD,
};
pub use io::{read_edge_list, spd_frequency, write_edge_list, write_spd_report, SpdFrequency};

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Undirected binary graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    entries: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            entries: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidInput(format!("self-loop at node {i}")));
            }
            a.set(i, j, true);
        }
        Ok(a)
    }

    /// Builds from a dense 0/1 matrix, rejecting asymmetric or looped input.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "adjacency must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidInput(format!("entry ({i}, {j}) = {v} is not binary")));
                }
                if v != m[(j, i)] {
                    return Err(Error::InvalidInput(format!("adjacency is not symmetric at ({i}, {j})")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::InvalidInput(format!("self-loop at node {i}")));
                }
                a.entries[i * n + j] = v == 1.0;
            }
        }
        Ok(a)
    }

    pub fn complete(n: usize) -> Self {
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a.entries[i * n + j] = true;
                }
            }
        }
        a
    }

    /// Erdős–Rényi graph: each pair is an edge independently with probability `p`.
    pub fn random(n: usize, p: f64, rng: &mut impl rand::Rng) -> Self {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, &edges).expect("generated edges are valid")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges).expect("path edges are valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, on: bool) {
        self.entries[i * self.n + j] = on;
        self.entries[j * self.n + i] = on;
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has_edge(i, j)).count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.has_edge(i, j))
    }

    /// Upper-triangle edge list.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if self.has_edge(i, j) { 1.0 } else { 0.0 })
    }
}

/// `O^{-1/2} A O^{-1/2}` with zero rows for isolated nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    entries: DMatrix<f64>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n, n),
        }
    }
}

pub fn normalize(a: &Adjacency) -> NormalizedAdjacency {
    let n = a.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| match a.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let entries = DMatrix::from_fn(n, n, |i, j| {
        if a.has_edge(i, j) {
            inv_sqrt[i] * inv_sqrt[j]
        } else {
            0.0
        }
    });
    NormalizedAdjacency { entries }
}

/// Exact second-hop graph: `XOR(reach2(A) AND NOT A, I)`, where `reach2`
/// marks pairs joined by a walk of length at most two (including i = j).
pub fn hop2(a: &Adjacency) -> Adjacency {
    let n = a.n();
    let mut out = Adjacency::empty(n);
    for i in 0..n {
        for j in 0..n {
            let reach2 = i == j || a.has_edge(i, j) || (0..n).any(|k| a.has_edge(i, k) && a.has_edge(k, j));
            let second = reach2 && !a.has_edge(i, j);
            // XOR with the identity clears the diagonal, which reach2 always sets
            out.entries[i * n + j] = second ^ (i == j);
        }
    }
    out
}

/// Pairwise shortest-path distances; `None` marks unreachable pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distances {
    n: usize,
    d: Vec<Option<usize>>,
}

impl Distances {
    pub fn get(&self, i: usize, j: usize) -> Option<usize> {
        self.d[i * self.n + j]
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn bfs(a: &Adjacency, source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; a.n()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have distances");
        for v in a.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

pub fn shortest_path_distances(a: &Adjacency) -> Distances {
    let n = a.n();
    let mut d = Vec::with_capacity(n * n);
    for s in 0..n {
        d.extend(bfs(a, s));
    }
    Distances { n, d }
}

/// Nodes within `k` hops of `v`, including `v`.
pub fn k_hop_neighbors(a: &Adjacency, v: usize, k: usize) -> Result<BTreeSet<usize>> {
    if v >= a.n() {
        return Err(Error::InvalidInput(format!(
            "node {v} out of range for {} nodes",
            a.n()
        )));
    }
    Ok(bfs(a, v)
        .into_iter()
        .enumerate()
        .filter_map(|(u, d)| d.filter(|&d| d <= k).map(|_| u))
        .collect())
}

/// Longest shortest path; `None` when the graph is disconnected or has no nodes.
pub fn diameter(a: &Adjacency) -> Option<usize> {
    if a.n() == 0 {
        return None;
    }
    let d = shortest_path_distances(a);
    let mut best = 0;
    for i in 0..a.n() {
        for j in 0..a.n() {
            best = best.max(d.get(i, j)?);
        }
    }
    Some(best)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // distance tables read clearest as d[i][j]
pub(crate) mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// The 5-node example graph: v1-v2, v2-v4, v3-v4, v4-v5, v3-v5 (0-based here).
    pub(crate) fn example_graph() -> Adjacency {
        Adjacency::from_edges(5, &[(0, 1), (1, 3), (2, 3), (3, 4), (2, 4)]).unwrap()
    }

    pub(crate) fn erdos_renyi(n: usize, p: f64, rng: &mut impl Rng) -> Adjacency {
        Adjacency::random(n, p, rng)
    }

    /// Floyd-Warshall, independent of the BFS used in the implementation.
    fn floyd(a: &Adjacency) -> Vec<Vec<Option<usize>>> {
        let n = a.n();
        let mut d = vec![vec![None; n]; n];
        for i in 0..n {
            d[i][i] = Some(0);
            for j in a.neighbors(i) {
                d[i][j] = Some(1);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if let (Some(x), Some(y)) = (d[i][k], d[k][j]) {
                        if d[i][j].is_none_or(|z| x + y < z) {
                            d[i][j] = Some(x + y);
                        }
                    }
                }
            }
        }
        d
    }

    #[test]
    fn normalize_small_graphs() {
        assert_eq!(normalize(&Adjacency::empty(3)).matrix(), &DMatrix::zeros(3, 3));
        let w = normalize(&Adjacency::complete(2));
        assert_eq!(w.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let w = normalize(&Adjacency::path(3));
        let s = 1.0 / 2f64.sqrt();
        assert!((w.matrix()[(0, 1)] - s).abs() < 1e-15);
        assert!((w.matrix()[(1, 2)] - s).abs() < 1e-15);
        assert_eq!(w.matrix()[(0, 2)], 0.0);
    }

    #[test]
    fn example_graph_hops() {
        let a = example_graph();
        assert_eq!(k_hop_neighbors(&a, 0, 1).unwrap(), BTreeSet::from([0, 1]));
        assert_eq!(k_hop_neighbors(&a, 0, 2).unwrap(), BTreeSet::from([0, 1, 3]));
        let h2 = hop2(&a);
        assert!(h2.has_edge(0, 3));
        assert!(!h2.has_edge(0, 1));
        assert_eq!(diameter(&a), Some(3));
    }

    #[test]
    fn hop2_special_graphs() {
        assert_eq!(hop2(&Adjacency::complete(3)).n_edges(), 0);
        // star: center 0, leaves 1..=4
        let star = Adjacency::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let h = hop2(&star);
        assert_eq!(h.degree(0), 0);
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(h.has_edge(i, j), i != j);
            }
        }
        // isolated nodes stay isolated and the diagonal stays clear
        let h = hop2(&Adjacency::empty(4));
        assert_eq!(h, Adjacency::empty(4));
    }

    #[test]
    fn distances_and_diameter() {
        let d = shortest_path_distances(&Adjacency::complete(4));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d.get(i, j), Some(usize::from(i != j)));
            }
        }
        let p4 = Adjacency::path(4);
        assert_eq!(shortest_path_distances(&p4).get(0, 3), Some(3));
        assert_eq!(diameter(&p4), Some(3));
        assert_eq!(diameter(&Adjacency::complete(5)), Some(1));
        assert_eq!(diameter(&Adjacency::empty(3)), None);
        assert_eq!(shortest_path_distances(&Adjacency::empty(2)).get(0, 1), None);
    }

    #[test]
    fn k_hop_edge_cases() {
        let a = example_graph();
        assert_eq!(k_hop_neighbors(&a, 2, 0).unwrap(), BTreeSet::from([2]));
        assert_eq!(k_hop_neighbors(&a, 0, 3).unwrap().len(), 5);
        assert!(k_hop_neighbors(&a, 5, 1).is_err());
    }

    #[test]
    fn hop2_matches_floyd_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let n = rng.random_range(1..=30);
            let p = [0.05, 0.1, 0.2, 0.4, 0.7][case % 5];
            let a = erdos_renyi(n, p, &mut rng);
            let d = floyd(&a);
            let h = hop2(&a);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(h.has_edge(i, j), d[i][j] == Some(2));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn k_hop_monotone_and_layered(seed in 0u64..500, n in 1usize..20, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = erdos_renyi(n, 0.2, &mut rng);
            let d = shortest_path_distances(&a);
            for v in 0..n {
                let prev = k_hop_neighbors(&a, v, k - 1).unwrap();
                let cur = k_hop_neighbors(&a, v, k).unwrap();
                prop_assert!(prev.is_subset(&cur));
                let ring: BTreeSet<usize> = (0..n).filter(|&u| d.get(v, u) == Some(k)).collect();
                let union: BTreeSet<usize> = prev.union(&ring).copied().collect();
                prop_assert_eq!(union, cur);
            }
        }

        #[test]
        fn normalized_spectrum_in_unit_interval(seed in 0u64..500, n in 1usize..25, p in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = erdos_renyi(n, p, &mut rng);
            let w = normalize(&a);
            prop_assert_eq!(w.matrix(), &w.matrix().transpose());
            for i in 0..n {
                prop_assert_eq!(w.matrix()[(i, i)], 0.0);
            }
            let eig = SymmetricEigen::new(w.matrix().clone());
            for l in eig.eigenvalues.iter() {
                prop_assert!(*l >= -1.0 - 1e-12 && *l <= 1.0 + 1e-12);
            }
        }
    }
}
