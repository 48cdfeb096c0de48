//! Symmetric weighted adjacency over target nodes.

use std::collections::BTreeMap;

use ndarray::Array2;

/// Symmetric sparse matrix stored as sorted `(row, col, weight)` triplets,
/// both orientations present, zero entries dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct SymAdjacency {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymAdjacency {
    pub fn empty(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    /// Builds `(W + W^T) / 2` where `W` has `weights[e]` at `edges[e]`.
    /// Duplicate directed edges are summed.
    pub fn from_directed(n: usize, edges: &[(usize, usize)], weights: &[f64]) -> Self {
        assert_eq!(edges.len(), weights.len());
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (&(i, j), &w) in edges.iter().zip(weights) {
            assert!(i < n && j < n, "edge ({i},{j}) out of range for n={n}");
            *acc.entry((i, j)).or_insert(0.0) += 0.5 * w;
            *acc.entry((j, i)).or_insert(0.0) += 0.5 * w;
        }
        let entries = acc.into_iter().filter(|&(_, w)| w != 0.0).map(|((i, j), w)| (i, j, w)).collect();
        Self { n, entries }
    }

    /// Unweighted symmetric adjacency from undirected pairs.
    pub fn from_undirected_unit(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j) in pairs {
            acc.insert((i, j), 1.0);
            acc.insert((j, i), 1.0);
        }
        Self { n, entries: acc.into_iter().map(|((i, j), w)| (i, j, w)).collect() }
    }

    /// From arbitrary triplets, which must already be symmetric.
    pub fn from_triplets(n: usize, triplets: Vec<(usize, usize, f64)>) -> Self {
        let mut entries: Vec<_> = triplets.into_iter().filter(|t| t.2 != 0.0).collect();
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Self { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(i, j)))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// Exact (bitwise) symmetry check.
    pub fn is_symmetric(&self) -> bool {
        self.entries.iter().all(|&(i, j, w)| self.get(j, i).to_bits() == w.to_bits())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.entries.iter().all(|e| e.2 >= 0.0)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for &(i, j, w) in &self.entries {
            m[[i, j]] = w;
        }
        m
    }

    /// Neighbor lists `(j, weight)` per row.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.n];
        for &(i, j, w) in &self.entries {
            out[i].push((j, w));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directed_merge_halves_and_symmetrizes() {
        let a = SymAdjacency::from_directed(3, &[(0, 1), (1, 0), (1, 2)], &[0.5, 0.3, 1.0]);
        assert_eq!(a.get(0, 1), 0.4);
        assert_eq!(a.get(1, 0), 0.4);
        assert_eq!(a.get(1, 2), 0.5);
        assert_eq!(a.get(2, 1), 0.5);
        assert_eq!(a.get(0, 2), 0.0);
        assert!(a.is_symmetric());
        assert_eq!(a.nnz(), 4);
    }

    #[test]
    fn zero_weights_are_dropped() {
        let a = SymAdjacency::from_directed(2, &[(0, 1)], &[0.0]);
        assert_eq!(a.nnz(), 0);
    }
}
