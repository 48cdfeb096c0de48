//! Matrix-valued reverse-mode differentiation.
//!
//! Every value on the tape is a dense `f64` matrix (vectors are `n x 1`,
//! scalars are `1 x 1`). Nodes are appended in evaluation order, so a single
//! reverse sweep over the node list is a valid topological order for the
//! backward pass.
//!
//! The op set is deliberately small and tailored to the adapter forward pass:
//! dense products, pointwise activations, row-wise cosine normalisation,
//! sparse symmetric message passing over a fixed edge list, masked softmax and
//! the three loss heads. Discrete inputs (edge lists, masks, label rows) are
//! constants baked into the op; no gradient flows through them.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One anchor of the prototype-contrastive head: node `node` with class
/// `class`, weighted by `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastRow {
    pub node: usize,
    pub class: usize,
    pub weight: f64,
}

/// One hinge term: anchor `anchor` with class `class` against `other`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarginTriple {
    pub anchor: usize,
    pub other: usize,
    pub class: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    RowNormalize(Var, f64),
    EdgeDot(Var, Rc<[(usize, usize)]>),
    SymSpmm {
        w: Var,
        x: Var,
        edges: Rc<[(usize, usize)]>,
    },
    RowDiv(Var, Var),
    ConcatCols(Var, Var),
    Col(Var, usize),
    RowScale(Var, Var),
    MaskedSoftmax(Var, Rc<[bool]>),
    ProtoContrastive {
        sim: Var,
        rows: Rc<[ContrastRow]>,
        tau: f64,
        include_positive: bool,
    },
    CrossEntropyRows {
        r: Var,
        target: Rc<Mat>,
        rows: Rc<[usize]>,
        eps: f64,
    },
    MarginHinge {
        protos: Var,
        m: Var,
        triples: Rc<[MarginTriple]>,
        gamma: f64,
    },
    SquaredError(Var, Rc<Mat>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

/// Slope of ReLU used by the backward pass. At exactly zero the slope is 1:
/// zero-initialised up-projections sit on the kink and would otherwise never
/// receive a gradient.
#[inline]
fn relu_slope(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Each row divided by `(norm + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n + eps;
        }
        let ng = self.ng(a);
        self.push(v, Op::RowNormalize(a, eps), ng)
    }

    /// `out[e] = <q[i], q[j]>` for every edge `e = (i, j)`; shape `E x 1`.
    pub fn edge_dot(&mut self, q: Var, edges: Rc<[(usize, usize)]>) -> Var {
        let qv = self.value(q);
        let mut v = Mat::zeros((edges.len(), 1));
        for (e, &(i, j)) in edges.iter().enumerate() {
            v[[e, 0]] = qv.row(i).dot(&qv.row(j));
        }
        let ng = self.ng(q);
        self.push(v, Op::EdgeDot(q, edges), ng)
    }

    /// Product of the symmetrised sparse matrix `(W + W^T) / 2` with `x`,
    /// where `W` holds weight `w[e]` at position `edges[e]`.
    pub fn sym_spmm(&mut self, w: Var, x: Var, edges: Rc<[(usize, usize)]>) -> Var {
        let wv = self.value(w);
        let xv = self.value(x);
        debug_assert_eq!(wv.nrows(), edges.len());
        let mut out = Mat::zeros(xv.dim());
        for (e, &(i, j)) in edges.iter().enumerate() {
            let h = 0.5 * wv[[e, 0]];
            if h == 0.0 {
                continue;
            }
            out.row_mut(i).scaled_add(h, &xv.row(j));
            out.row_mut(j).scaled_add(h, &xv.row(i));
        }
        let ng = self.ng(w) || self.ng(x);
        self.push(out, Op::SymSpmm { w, x, edges }, ng)
    }

    /// Divides row `i` of `a` by `v[i]` (`v` is `n x 1`).
    pub fn row_div(&mut self, a: Var, v: Var) -> Var {
        let mut out = self.value(a).clone();
        let vv = self.value(v);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row /= vv[[i, 0]];
        }
        let ng = self.ng(a) || self.ng(v);
        self.push(out, Op::RowDiv(a, v), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts agree");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    pub fn col(&mut self, a: Var, c: usize) -> Var {
        let v = self.value(a).slice(s![.., c..c + 1]).to_owned();
        let ng = self.ng(a);
        self.push(v, Op::Col(a, c), ng)
    }

    /// Scales row `i` of `a` by `v[i]`.
    pub fn row_scale(&mut self, a: Var, v: Var) -> Var {
        let mut out = self.value(a).clone();
        let vv = self.value(v);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            row *= vv[[i, 0]];
        }
        let ng = self.ng(a) || self.ng(v);
        self.push(out, Op::RowScale(a, v), ng)
    }

    /// Row-wise softmax restricted to entries where `mask` (row-major, same
    /// shape as `a`) is true. Masked entries and fully masked rows are zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<[bool]>) -> Var {
        let av = self.value(a);
        let (n, r) = av.dim();
        assert_eq!(mask.len(), n * r);
        let mut out = Mat::zeros((n, r));
        for i in 0..n {
            let present = || (0..r).filter(|&k| mask[i * r + k]);
            if present().next().is_none() {
                continue;
            }
            let lse = logsumexp(present().map(|k| av[[i, k]]));
            for k in present() {
                out[[i, k]] = (av[[i, k]] - lse).exp();
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedSoftmax(a, mask), ng)
    }

    /// Prototype-contrastive head over a node-by-class similarity matrix.
    ///
    /// Each row contributes `-w * ln(exp(s[i,y]/tau) / sum_k exp(s[i,k]/tau))`
    /// where `k` ranges over all classes other than `y`, or over all classes
    /// when `include_positive` is set.
    pub fn proto_contrastive(
        &mut self,
        sim: Var,
        rows: Rc<[ContrastRow]>,
        tau: f64,
        include_positive: bool,
    ) -> Var {
        let sv = self.value(sim);
        let c = sv.ncols();
        let mut total = 0.0;
        for r in rows.iter() {
            let denom = (0..c).filter(|&k| include_positive || k != r.class);
            let lse = logsumexp(denom.map(|k| sv[[r.node, k]] / tau));
            total -= r.weight * (sv[[r.node, r.class]] / tau - lse);
        }
        let ng = self.ng(sim);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::ProtoContrastive { sim, rows, tau, include_positive },
            ng,
        )
    }

    /// `-sum_{i in rows} sum_j target[i,j] * ln(r[i,j] + eps)`
    pub fn cross_entropy_rows(&mut self, r: Var, target: Rc<Mat>, rows: Rc<[usize]>, eps: f64) -> Var {
        let rv = self.value(r);
        let mut total = 0.0;
        for &i in rows.iter() {
            total -= Zip::from(target.row(i))
                .and(rv.row(i))
                .fold(0.0, |acc, &t, &p| acc + t * (p + eps).ln());
        }
        let ng = self.ng(r);
        self.push(Mat::from_elem((1, 1), total), Op::CrossEntropyRows { r, target, rows, eps }, ng)
    }

    /// `sum max(0, |c_y - m_a|^2 - |c_y - m_o|^2 + gamma)` over triples.
    pub fn margin_hinge(&mut self, protos: Var, m: Var, triples: Rc<[MarginTriple]>, gamma: f64) -> Var {
        let cv = self.value(protos);
        let mv = self.value(m);
        let mut total = 0.0;
        for t in triples.iter() {
            let h = hinge_arg(cv, mv, t, gamma);
            if h > 0.0 {
                total += h;
            }
        }
        let ng = self.ng(protos) || self.ng(m);
        self.push(Mat::from_elem((1, 1), total), Op::MarginHinge { protos, m, triples, gamma }, ng)
    }

    /// `sum (a - target)^2`
    pub fn squared_error(&mut self, a: Var, target: Rc<Mat>) -> Var {
        let v = Zip::from(self.value(a)).and(&*target).fold(0.0, |acc, &x, &t| acc + (x - t) * (x - t));
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), v), Op::SquaredError(a, target), ng)
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= relu_slope(x));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::RowNormalize(a, eps) => {
                let x = self.value(*a);
                let mut d = Mat::zeros(x.dim());
                for i in 0..x.nrows() {
                    let xi = x.row(i);
                    let gi = g.row(i);
                    let n = xi.dot(&xi).sqrt();
                    let s = n + eps;
                    let mut di = d.row_mut(i);
                    di.assign(&gi);
                    di /= s;
                    if n > 0.0 {
                        let coef = xi.dot(&gi) / (n * s * s);
                        di.scaled_add(-coef, &xi);
                    }
                }
                acc(*a, d);
            }
            Op::EdgeDot(q, edges) => {
                let qv = self.value(*q);
                let mut d = Mat::zeros(qv.dim());
                for (e, &(i, j)) in edges.iter().enumerate() {
                    let ge = g[[e, 0]];
                    if ge == 0.0 {
                        continue;
                    }
                    d.row_mut(i).scaled_add(ge, &qv.row(j));
                    d.row_mut(j).scaled_add(ge, &qv.row(i));
                }
                acc(*q, d);
            }
            Op::SymSpmm { w, x, edges } => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                if self.ng(*w) {
                    let mut dw = Mat::zeros(wv.dim());
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        dw[[e, 0]] = 0.5 * (g.row(i).dot(&xv.row(j)) + g.row(j).dot(&xv.row(i)));
                    }
                    acc(*w, dw);
                }
                if self.ng(*x) {
                    let mut dx = Mat::zeros(xv.dim());
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        let h = 0.5 * wv[[e, 0]];
                        if h == 0.0 {
                            continue;
                        }
                        dx.row_mut(j).scaled_add(h, &g.row(i));
                        dx.row_mut(i).scaled_add(h, &g.row(j));
                    }
                    acc(*x, dx);
                }
            }
            Op::RowDiv(a, v) => {
                let av = self.value(*a);
                let vv = self.value(*v);
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        row /= vv[[i, 0]];
                    }
                    acc(*a, d);
                }
                if self.ng(*v) {
                    let mut d = Mat::zeros(vv.dim());
                    for i in 0..av.nrows() {
                        let vi = vv[[i, 0]];
                        d[[i, 0]] = -g.row(i).dot(&av.row(i)) / (vi * vi);
                    }
                    acc(*v, d);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                acc(*a, g.slice(s![.., ..ca]).to_owned());
                acc(*b, g.slice(s![.., ca..]).to_owned());
            }
            Op::Col(a, c) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *c..*c + 1]).assign(g);
                acc(*a, d);
            }
            Op::RowScale(a, v) => {
                let av = self.value(*a);
                let vv = self.value(*v);
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        row *= vv[[i, 0]];
                    }
                    acc(*a, d);
                }
                if self.ng(*v) {
                    let mut d = Mat::zeros(vv.dim());
                    for i in 0..av.nrows() {
                        d[[i, 0]] = g.row(i).dot(&av.row(i));
                    }
                    acc(*v, d);
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = &node.value;
                let (n, r) = y.dim();
                let mut d = Mat::zeros((n, r));
                for i in 0..n {
                    let inner: f64 = (0..r).filter(|&k| mask[i * r + k]).map(|k| y[[i, k]] * g[[i, k]]).sum();
                    for k in (0..r).filter(|&k| mask[i * r + k]) {
                        d[[i, k]] = y[[i, k]] * (g[[i, k]] - inner);
                    }
                }
                acc(*a, d);
            }
            Op::ProtoContrastive { sim, rows, tau, include_positive } => {
                let sv = self.value(*sim);
                let c = sv.ncols();
                let g0 = g[[0, 0]];
                let mut d = Mat::zeros(sv.dim());
                for r in rows.iter() {
                    let denom = || (0..c).filter(|&k| *include_positive || k != r.class);
                    let lse = logsumexp(denom().map(|k| sv[[r.node, k]] / tau));
                    let scale = g0 * r.weight / tau;
                    d[[r.node, r.class]] -= scale;
                    for k in denom() {
                        d[[r.node, k]] += scale * (sv[[r.node, k]] / tau - lse).exp();
                    }
                }
                acc(*sim, d);
            }
            Op::CrossEntropyRows { r, target, rows, eps } => {
                let rv = self.value(*r);
                let g0 = g[[0, 0]];
                let mut d = Mat::zeros(rv.dim());
                for &i in rows.iter() {
                    for j in 0..rv.ncols() {
                        d[[i, j]] -= g0 * target[[i, j]] / (rv[[i, j]] + eps);
                    }
                }
                acc(*r, d);
            }
            Op::MarginHinge { protos, m, triples, gamma } => {
                let cv = self.value(*protos);
                let mv = self.value(*m);
                let g0 = g[[0, 0]];
                let mut dc = Mat::zeros(cv.dim());
                let mut dm = Mat::zeros(mv.dim());
                for t in triples.iter() {
                    if hinge_arg(cv, mv, t, *gamma) <= 0.0 {
                        continue;
                    }
                    let c = cv.row(t.class);
                    let ma = mv.row(t.anchor);
                    let mo = mv.row(t.other);
                    // d/dc = 2(c - m_a) - 2(c - m_o) = 2(m_o - m_a)
                    dc.row_mut(t.class).scaled_add(2.0 * g0, &(&mo - &ma));
                    dm.row_mut(t.anchor).scaled_add(-2.0 * g0, &(&c - &ma));
                    dm.row_mut(t.other).scaled_add(2.0 * g0, &(&c - &mo));
                }
                acc(*protos, dc);
                acc(*m, dm);
            }
            Op::SquaredError(a, target) => {
                let d = (self.value(*a) - &**target) * (2.0 * g[[0, 0]]);
                acc(*a, d);
            }
        }
    }
}

fn hinge_arg(c: &Mat, m: &Mat, t: &MarginTriple, gamma: f64) -> f64 {
    let cy = c.row(t.class);
    let da = &cy - &m.row(t.anchor);
    let dob = &cy - &m.row(t.other);
    da.dot(&da) - dob.dot(&dob) + gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` with respect to its first leaf.
    fn check(x0: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Mat::zeros(x0.dim()));
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                *xp.iter_mut().nth(idx).unwrap() += delta;
                let mut t = Tape::new();
                let v = t.param(xp);
                let o = build(&mut t, v);
                t.scalar(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = *analytic.iter().nth(idx).unwrap();
            // absolute floor covers the O(eps/h) roundoff of the difference quotient
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() < 1e-8 || (a - fd).abs() / denom < 1e-5, "entry {idx}: analytic {a} vs fd {fd}");
        }
    }

    fn sum_all(t: &mut Tape, v: Var) -> Var {
        let target = Rc::new(Mat::zeros(t.value(v).dim()));
        let shifted = t.add_scalar(v, 0.3);
        t.squared_error(shifted, target)
    }

    #[test]
    fn quadratic_probe_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(array![[3.0]]);
        let y = tape.squared_error(x, Rc::new(array![[0.0]]));
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 4, 3);
        check(random(&mut rng, 5, 4), |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv);
            sum_all(t, y)
        });
        let b2 = random(&mut rng, 6, 4);
        check(random(&mut rng, 5, 4), |t, x| {
            let bv = t.constant(b2.clone());
            let y = t.matmul_t(x, bv);
            let z = t.matmul_t(bv, x);
            let zt = t.matmul(z, x);
            let a = sum_all(t, y);
            let b = sum_all(t, zt);
            t.add(a, b)
        });
    }

    #[test]
    fn pointwise_and_row_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(random(&mut rng, 4, 3), |t, x| {
            let a = t.tanh(x);
            let b = t.row_normalize(a, 1e-12);
            let c = t.scale(b, 1.7);
            sum_all(t, c)
        });
        let v0 = random(&mut rng, 4, 1).mapv(|x| x.abs() + 0.5);
        check(random(&mut rng, 4, 3), |t, x| {
            let v = t.constant(v0.clone());
            let d = t.row_div(x, v);
            let s = t.row_scale(x, v);
            let c = t.concat_cols(d, s);
            let col = t.col(c, 4);
            let a = sum_all(t, c);
            let b = sum_all(t, col);
            t.add(a, b)
        });
        // gradient w.r.t. the divisor/scale vector
        let a0 = random(&mut rng, 4, 3);
        check(random(&mut rng, 4, 1).mapv(|x| x.abs() + 0.5), |t, v| {
            let a = t.constant(a0.clone());
            let d = t.row_div(a, v);
            let s = t.row_scale(a, v);
            let x = sum_all(t, d);
            let y = sum_all(t, s);
            t.add(x, y)
        });
    }

    #[test]
    fn sparse_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges: Rc<[(usize, usize)]> = vec![(0, 1), (1, 0), (2, 3), (0, 3), (3, 1)].into();
        let e2 = edges.clone();
        check(random(&mut rng, 4, 3), move |t, q| {
            let w = t.edge_dot(q, e2.clone());
            let w = t.relu(w);
            let y = t.sym_spmm(w, q, e2.clone());
            sum_all(t, y)
        });
        let x0 = random(&mut rng, 4, 2);
        let e3 = edges.clone();
        check(random(&mut rng, 5, 1), move |t, w| {
            let x = t.constant(x0.clone());
            let y = t.sym_spmm(w, x, e3.clone());
            sum_all(t, y)
        });
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_grad() {
        let mask: Rc<[bool]> = vec![true, true, false, true, false, false, false, true, true].into();
        let mut t = Tape::new();
        let x = t.constant(array![[0.2, -1.0, 3.0], [0.5, 9.0, 9.0], [0.0, 0.1, 0.4]]);
        let y = t.masked_softmax(x, mask.clone());
        let v = t.value(y);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[1, 0]], 1.0);
        assert_eq!(v[[2, 0]], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 3, 3);
        check(random(&mut rng, 3, 3), move |t, x| {
            let y = t.masked_softmax(x, mask.clone());
            let wv = t.constant(w.clone());
            let z = t.matmul(y, wv);
            sum_all(t, z)
        });
    }

    #[test]
    fn loss_heads_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Rc<[ContrastRow]> = vec![
            ContrastRow { node: 0, class: 1, weight: 1.0 },
            ContrastRow { node: 2, class: 0, weight: 0.4 },
            ContrastRow { node: 3, class: 2, weight: 1.0 },
        ]
        .into();
        for include in [false, true] {
            let r = rows.clone();
            check(random(&mut rng, 4, 3), move |t, s| t.proto_contrastive(s, r.clone(), 0.5, include));
        }
        let target = Rc::new(random(&mut rng, 3, 4).mapv(f64::abs));
        check(random(&mut rng, 3, 4).mapv(|x| x.abs() + 0.1), move |t, r| {
            t.cross_entropy_rows(r, target.clone(), vec![0, 2].into(), 1e-12)
        });
        let triples: Rc<[MarginTriple]> = vec![
            MarginTriple { anchor: 0, other: 1, class: 0 },
            MarginTriple { anchor: 1, other: 2, class: 1 },
            MarginTriple { anchor: 2, other: 0, class: 1 },
        ]
        .into();
        let m0 = random(&mut rng, 3, 2);
        let tr = triples.clone();
        check(random(&mut rng, 2, 2), move |t, c| {
            let m = t.constant(m0.clone());
            t.margin_hinge(c, m, tr.clone(), 2.0)
        });
        let c0 = random(&mut rng, 2, 2);
        check(random(&mut rng, 3, 2), move |t, m| {
            let c = t.constant(c0.clone());
            t.margin_hinge(c, m, triples.clone(), 2.0)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[0.5], [0.25]]);
        let y = t.matmul(c, p);
        let g = t.backward(y);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(p).unwrap(), &array![[1.0], [2.0]]);
    }
}
