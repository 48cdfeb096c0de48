//! Heterogeneous graph data model.
//!
//! A [`HetGraph`] holds typed node feature matrices, typed edge lists, a
//! designated target node type with (partially) labeled nodes, the pre-given
//! homogeneous structure among target nodes and a train/test split. Graphs
//! are validated on construction and immutable afterwards.

mod io;
mod synthetic;

pub use io::{load_graph, save_graph};
pub use synthetic::{generate_synthetic, planted_partition, SyntheticSpec};

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SymAdjacency;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeType {
    pub name: String,
    pub src: String,
    pub dst: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Unvalidated graph components. Turn into a [`HetGraph`] with
/// [`HetGraph::new`].
#[derive(Clone, Debug)]
pub struct GraphParts {
    pub node_types: Vec<String>,
    pub target_type: String,
    pub num_classes: usize,
    /// One matrix per entry of `node_types`, same order.
    pub features: Vec<Array2<f64>>,
    pub edge_types: Vec<EdgeType>,
    /// One edge list per entry of `edge_types`, same order.
    pub edges: Vec<Vec<(usize, usize)>>,
    /// Undirected target-target pairs; orientation and duplicates are ignored.
    pub hom_edges: Vec<(usize, usize)>,
    pub labels: Vec<Option<usize>>,
    pub split: Split,
}

/// A target-incident edge type as seen from the target node: for every
/// target node, the list of neighbor ids in `other_type`.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub edge_type: usize,
    pub other_type: usize,
    pub neighbors: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    node_types: Vec<String>,
    target: usize,
    num_classes: usize,
    features: Vec<Array2<f64>>,
    edge_types: Vec<EdgeType>,
    edges: Vec<Vec<(usize, usize)>>,
    hom_edges: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
    split: Split,
}

impl HetGraph {
    pub fn new(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            node_types,
            target_type,
            num_classes,
            features,
            edge_types,
            edges,
            hom_edges,
            labels,
            split,
        } = parts;

        let err = |m: String| Err(Error::Graph(m));
        let type_index = |name: &str| node_types.iter().position(|t| t == name);

        let distinct: BTreeSet<_> = node_types.iter().collect();
        if distinct.len() != node_types.len() {
            return err("duplicate node type name".into());
        }
        if node_types.len() + edge_types.len() <= 2 {
            return err(format!(
                "need more than two node and edge types combined, got {} + {}",
                node_types.len(),
                edge_types.len()
            ));
        }
        let Some(target) = type_index(&target_type) else {
            return err(format!("target type {target_type:?} is not a node type"));
        };
        if num_classes == 0 {
            return err("num_classes must be >= 1".into());
        }
        if features.len() != node_types.len() {
            return err("one feature matrix per node type required".into());
        }
        if edges.len() != edge_types.len() {
            return err("one edge list per edge type required".into());
        }
        if features.iter().any(|f| f.iter().any(|x| !x.is_finite())) {
            return err("non-finite feature value".into());
        }
        let n = features[target].nrows();

        for (et, list) in edge_types.iter().zip(&edges) {
            let (Some(s), Some(d)) = (type_index(&et.src), type_index(&et.dst)) else {
                return err(format!("edge type {:?} references an unknown node type", et.name));
            };
            let (ns, nd) = (features[s].nrows(), features[d].nrows());
            if let Some((row, &(a, b))) = list.iter().enumerate().find(|(_, &(a, b))| a >= ns || b >= nd) {
                return err(format!("dangling edge {a}->{b} at index {row} in edge type {:?}", et.name));
            }
        }

        let mut hom: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(a, b) in &hom_edges {
            if a >= n || b >= n {
                return err(format!("dangling edge {a}-{b} in homogeneous structure"));
            }
            if a == b {
                return err(format!("self-loop {a}-{a} in homogeneous structure"));
            }
            hom.insert((a.min(b), a.max(b)));
        }

        if labels.len() != n {
            return err(format!("{} labels for {n} target nodes", labels.len()));
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| l >= num_classes) {
            return err(format!("label out of range: {l} >= {num_classes}"));
        }

        let train: BTreeSet<_> = split.train.iter().copied().collect();
        let test: BTreeSet<_> = split.test.iter().copied().collect();
        if train.len() != split.train.len() || test.len() != split.test.len() {
            return err("duplicate id in split".into());
        }
        if let Some(i) = train.iter().chain(&test).find(|&&i| i >= n) {
            return err(format!("split id {i} out of range"));
        }
        if let Some(i) = train.intersection(&test).next() {
            return err(format!("node {i} in both train and test"));
        }
        if let Some(&i) = split.train.iter().find(|&&i| labels[i].is_none()) {
            return err(format!("train node {i} has no label"));
        }

        Ok(Self {
            node_types,
            target,
            num_classes,
            features,
            edge_types,
            edges,
            hom_edges: hom.into_iter().collect(),
            labels,
            split,
        })
    }

    pub fn node_types(&self) -> &[String] {
        &self.node_types
    }

    pub fn target_type(&self) -> &str {
        &self.node_types[self.target]
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of target nodes.
    pub fn n_target(&self) -> usize {
        self.features[self.target].nrows()
    }

    pub fn features(&self, node_type: usize) -> &Array2<f64> {
        &self.features[node_type]
    }

    pub fn all_features(&self) -> &[Array2<f64>] {
        &self.features
    }

    pub fn target_features(&self) -> &Array2<f64> {
        &self.features[self.target]
    }

    pub fn edge_types(&self) -> &[EdgeType] {
        &self.edge_types
    }

    pub fn edges(&self, edge_type: usize) -> &[(usize, usize)] {
        &self.edges[edge_type]
    }

    /// Undirected homogeneous pairs with `a < b`, sorted.
    pub fn hom_edges(&self) -> &[(usize, usize)] {
        &self.hom_edges
    }

    pub fn hom_adjacency(&self) -> SymAdjacency {
        SymAdjacency::from_undirected_unit(self.n_target(), &self.hom_edges)
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    /// Labels restricted to the training split; everything else is `None`.
    pub fn train_labels(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_target()];
        for &i in &self.split.train {
            out[i] = self.labels[i];
        }
        out
    }

    fn type_index(&self, name: &str) -> usize {
        self.node_types.iter().position(|t| t == name).expect("validated")
    }

    /// Edge types incident to the target type, in edge-type order, with
    /// per-target-node neighbor lists. Target-target edge types are treated
    /// as undirected.
    pub fn relations(&self) -> Vec<Relation> {
        let n = self.n_target();
        let mut out = Vec::new();
        for (k, et) in self.edge_types.iter().enumerate() {
            let (s, d) = (self.type_index(&et.src), self.type_index(&et.dst));
            if s != self.target && d != self.target {
                continue;
            }
            let mut neighbors = vec![Vec::new(); n];
            for &(a, b) in &self.edges[k] {
                if s == self.target {
                    neighbors[a].push(b);
                }
                if d == self.target {
                    neighbors[b].push(a);
                }
            }
            let other = if s == self.target { d } else { s };
            out.push(Relation { edge_type: k, other_type: other, neighbors });
        }
        out
    }
}

/// Fraction of edge weight joining same-class endpoints.
///
/// Entries touching a node without a label are ignored. Fails with
/// [`Error::NoEdges`] when no weight remains.
pub fn homophily_ratio(adj: &SymAdjacency, labels: &[Option<usize>]) -> Result<f64> {
    let (mut same, mut total) = (0.0, 0.0);
    for &(i, j, w) in adj.triplets() {
        assert!(w >= 0.0, "homophily_ratio needs nonnegative weights");
        let (Some(a), Some(b)) = (labels[i], labels[j]) else { continue };
        total += w;
        if a == b {
            same += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::NoEdges);
    }
    Ok(same / total)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use ndarray::array;

    /// Three node types (paper/author/subject), 4 papers, 2 classes.
    pub fn toy() -> HetGraph {
        HetGraph::new(GraphParts {
            node_types: vec!["paper".into(), "author".into(), "subject".into()],
            target_type: "paper".into(),
            num_classes: 2,
            features: vec![
                array![[1.0, 0.0, 0.5], [0.9, 0.1, 0.4], [0.0, 1.0, -0.5], [0.1, 0.8, -0.25]],
                array![[0.5, 0.5], [-1.0, 2.0], [0.25, 0.0]],
                array![[1.0], [2.0]],
            ],
            edge_types: vec![
                EdgeType { name: "pa".into(), src: "paper".into(), dst: "author".into() },
                EdgeType { name: "ps".into(), src: "paper".into(), dst: "subject".into() },
            ],
            edges: vec![vec![(0, 0), (1, 0), (2, 1), (3, 2), (3, 1)], vec![(0, 0), (1, 0), (2, 1)]],
            hom_edges: vec![(0, 1), (2, 3)],
            labels: vec![Some(0), Some(0), Some(1), None],
            split: Split { train: vec![0, 2], test: vec![1] },
        })
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn homophily_examples() {
        // two pure classes, edges only inside blocks
        let a = SymAdjacency::from_undirected_unit(4, &[(0, 1), (2, 3)]);
        let l = [Some(0), Some(0), Some(1), Some(1)];
        assert_eq!(homophily_ratio(&a, &l).unwrap(), 1.0);
        // complete bipartite across the two classes
        let b = SymAdjacency::from_undirected_unit(4, &[(0, 2), (0, 3), (1, 2), (1, 3)]);
        assert_eq!(homophily_ratio(&b, &l).unwrap(), 0.0);
        // hand enumeration: same-class weight 2 (0-1 both ways) of total 4
        let c = SymAdjacency::from_undirected_unit(3, &[(0, 1), (1, 2)]);
        assert_eq!(homophily_ratio(&c, &[Some(0), Some(0), Some(1)]).unwrap(), 0.5);
    }

    #[test]
    fn homophily_errors_and_exclusions() {
        let empty = SymAdjacency::empty(3);
        assert!(matches!(homophily_ratio(&empty, &[Some(0); 3]), Err(Error::NoEdges)));
        let a = SymAdjacency::from_undirected_unit(3, &[(0, 1), (1, 2)]);
        assert_eq!(homophily_ratio(&a, &[Some(0), Some(0), None]).unwrap(), 1.0);
        assert!(matches!(homophily_ratio(&a, &[None, Some(0), None]), Err(Error::NoEdges)));
    }

    proptest! {
        #[test]
        fn homophily_scale_invariant(ws in proptest::collection::vec(0.01f64..5.0, 6), k in 0.1f64..100.0) {
            let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3)];
            let labels = [Some(0), Some(1), Some(0), Some(1)];
            let a = SymAdjacency::from_directed(4, &edges, &ws);
            let scaled: Vec<f64> = ws.iter().map(|w| w * k).collect();
            let b = SymAdjacency::from_directed(4, &edges, &scaled);
            let ha = homophily_ratio(&a, &labels).unwrap();
            let hb = homophily_ratio(&b, &labels).unwrap();
            prop_assert!((ha - hb).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let g = fixtures::toy();
        let parts = |g: &HetGraph| GraphParts {
            node_types: g.node_types.clone(),
            target_type: g.target_type().into(),
            num_classes: g.num_classes,
            features: g.features.clone(),
            edge_types: g.edge_types.clone(),
            edges: g.edges.clone(),
            hom_edges: g.hom_edges.clone(),
            labels: g.labels.clone(),
            split: g.split.clone(),
        };
        let mut p = parts(&g);
        p.edges[0].push((0, 3));
        assert!(HetGraph::new(p).unwrap_err().to_string().contains("dangling edge"));
        let mut p = parts(&g);
        p.labels[3] = Some(5);
        assert!(HetGraph::new(p).unwrap_err().to_string().contains("label out of range"));
        let mut p = parts(&g);
        p.split.test.push(0);
        assert!(HetGraph::new(p).is_err());
        let mut p = parts(&g);
        p.split.train.push(3);
        assert!(HetGraph::new(p).is_err());
        let mut p = parts(&g);
        p.hom_edges.push((2, 2));
        assert!(HetGraph::new(p).is_err());
        let mut p = parts(&g);
        p.node_types.truncate(2);
        p.features.truncate(2);
        p.edge_types.clear();
        p.edges.clear();
        assert!(HetGraph::new(p).unwrap_err().to_string().contains("more than two"));
    }

    #[test]
    fn relations_list_target_neighbors() {
        let g = fixtures::toy();
        let rels = g.relations();
        assert_eq!(rels.len(), 2);
        assert_eq!(rels[0].neighbors[3], vec![2, 1]);
        assert!(rels[1].neighbors[3].is_empty());
        assert_eq!(g.hom_adjacency().nnz(), 4);
        assert_eq!(g.train_labels(), vec![Some(0), None, Some(1), None]);
    }
}
