//! Planted-partition heterogeneous graph generator.
//!
//! Target nodes ("paper") get class-conditional Gaussian features and a
//! planted-partition homogeneous structure. Auxiliary node types alternate
//! between class-informative wiring (each paper links to auxiliary nodes
//! owned by its class) and noise wiring (uniform random links). Auxiliary
//! features are plain Gaussians, so the class signal of the heterogeneous
//! branch is carried entirely by connectivity.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EdgeType, GraphParts, HetGraph, Split};
use crate::error::{Error, Result};

const AUX_NAMES: [&str; 3] = ["author", "subject", "term"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_target: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Norm of each class mean; features are `mean + N(0, I)`.
    pub separation: f64,
    pub aux_types: usize,
    pub n_aux: usize,
    /// Links from each target node to each auxiliary type.
    pub het_degree: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Probability that a planted homogeneous edge is rewired to a uniform
    /// random endpoint.
    pub hom_noise: f64,
    pub train_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_target: 600,
            num_classes: 3,
            feature_dim: 16,
            separation: 4.0,
            aux_types: 2,
            n_aux: 60,
            het_degree: 3,
            p_in: 0.05,
            p_out: 0.005,
            hom_noise: 0.0,
            train_per_class: 20,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if !(prob(self.p_in) && prob(self.p_out) && prob(self.hom_noise)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.p_in <= self.p_out {
            return bad("p_in must exceed p_out");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return bad("separation must be finite and nonnegative");
        }
        if self.aux_types < 2 {
            return bad("need at least one informative and one noise auxiliary type");
        }
        if self.n_aux < self.num_classes {
            return bad("n_aux must be >= num_classes");
        }
        if self.het_degree == 0 {
            return bad("het_degree must be >= 1");
        }
        if self.train_per_class == 0 || self.train_per_class * self.num_classes >= self.n_target {
            return bad("train_per_class must leave at least one test node");
        }
        if self.n_target / self.num_classes < self.train_per_class {
            return bad("a class has fewer nodes than train_per_class");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Samples an undirected planted partition: each unordered pair joins with
/// probability `p_in` inside a class and `p_out` across classes; each edge is
/// then rewired to a uniform random endpoint with probability `noise`.
pub fn planted_partition(labels: &[usize], p_in: f64, p_out: f64, noise: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    if noise > 0.0 && n > 1 {
        for e in &mut edges {
            if rng.random::<f64>() < noise {
                let mut j = rng.random_range(0..n - 1);
                if j >= e.0 {
                    j += 1;
                }
                *e = (e.0.min(j), e.0.max(j));
            }
        }
    }
    edges
}

/// Generates a graph as a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HetGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, c, f) = (spec.n_target, spec.num_classes, spec.feature_dim);

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let mut centers = gaussian(&mut rng, c, f);
    for mut row in centers.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row *= spec.separation / norm;
    }
    let mut x = gaussian(&mut rng, n, f);
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &centers.row(labels[i]);
    }

    let hom_edges = planted_partition(&labels, spec.p_in, spec.p_out, spec.hom_noise, &mut rng);

    let target = "paper".to_string();
    let mut node_types = vec![target.clone()];
    let mut features = vec![x];
    let mut edge_types = Vec::new();
    let mut edges = Vec::new();
    for t in 0..spec.aux_types {
        let name = AUX_NAMES.get(t).map_or_else(|| format!("aux{t}"), |s| s.to_string());
        features.push(gaussian(&mut rng, spec.n_aux, f));
        // auxiliary node a belongs to class a % c
        let owned: Vec<Vec<usize>> = (0..c).map(|y| (y..spec.n_aux).step_by(c).collect()).collect();
        let informative = t % 2 == 0;
        let mut list = Vec::with_capacity(n * spec.het_degree);
        for (i, &y) in labels.iter().enumerate() {
            let pool: Vec<usize> = if informative { owned[y].clone() } else { (0..spec.n_aux).collect() };
            let k = spec.het_degree.min(pool.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_iter().map(|p| pool[p]).collect();
            picked.sort_unstable();
            list.extend(picked.into_iter().map(|a| (i, a)));
        }
        edge_types.push(EdgeType { name: format!("{target}-{name}"), src: target.clone(), dst: name.clone() });
        edges.push(list);
        node_types.push(name);
    }

    let mut train = Vec::new();
    for y in 0..c {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == y).collect();
        let picks = index::sample(&mut rng, members.len(), spec.train_per_class);
        train.extend(picks.into_iter().map(|p| members[p]));
    }
    train.sort_unstable();
    let test: Vec<usize> = (0..n).filter(|i| train.binary_search(i).is_err()).collect();

    HetGraph::new(GraphParts {
        node_types,
        target_type: target,
        num_classes: c,
        features,
        edge_types,
        edges,
        hom_edges,
        labels: labels.into_iter().map(Some).collect(),
        split: Split { train, test },
    })
}
