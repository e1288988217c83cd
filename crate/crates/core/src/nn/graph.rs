//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] records every operation as it is evaluated (a tape).
//! Parameters are bound lazily from a [`ParamStore`]; calling
//! [`Graph::backward`] on a 1x1 result yields one gradient per parameter.

use std::rc::Rc;

use super::matrix::{matmul, Matrix};
use super::params::{Gradients, ParamId, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    /// Row softmax; masked-out entries are exactly zero.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    /// Mean over consecutive groups of rows.
    GroupMean(Var, usize),
    Sum(Var),
    /// Scalar function of one input whose gradient was computed with the
    /// forward value.
    ScalarFn(Var, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), false, self.value(b), false);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), false, self.value(b), true);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            va.rows,
            va.cols,
            va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a single row");
        assert_eq!(r.cols, self.value(a).cols, "add_row width");
        let mut value = self.value(a).clone();
        let bias = &self.value(row).data;
        for chunk in value.data.chunks_mut(bias.len().max(1)) {
            for (v, b) in chunk.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax. `allowed`, when given, is a row-major mask of the
    /// same shape; disallowed entries get probability zero. Every row must
    /// allow at least one entry.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols;
        if let Some(mask) = allowed {
            assert_eq!(mask.len(), value.len(), "softmax mask shape");
        }
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let mask = allowed.map(|m| &m[r * cols..(r + 1) * cols]);
            let ok = |c: usize| mask.is_none_or(|m| m[c]);
            let max = (0..cols)
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite() || max == f64::INFINITY, "softmax row fully masked");
            let mut total = 0.0;
            for c in 0..cols {
                row[c] = if ok(c) { (row[c] - max).exp() } else { 0.0 };
                total += row[c];
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut value = normed.clone();
        for r in 0..rows {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols, "slice_cols out of range");
        let value = Matrix::from_fn(av.rows, width, |r, c| av.get(r, start + c));
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, indices: Rc<[usize]>) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * av.cols);
        for &i in indices.iter() {
            data.extend_from_slice(av.row(i));
        }
        let value = Matrix::from_vec(indices.len(), av.cols, data);
        let ng = self.needs(a);
        self.push(value, Op::GatherRows(a, indices), ng)
    }

    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows.is_multiple_of(group), "group_mean group size");
        let groups = av.rows / group;
        let mut value = Matrix::zeros(groups, av.cols);
        for r in 0..av.rows {
            let g = r / group;
            for c in 0..av.cols {
                let v = av.get(r, c) / group as f64;
                value.data[g * av.cols + c] += v;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::GroupMean(a, group), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Matrix::scalar(total), Op::Sum(a), ng)
    }

    /// Records a scalar-valued function of `input` whose gradient with
    /// respect to `input` is already known.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape(), "scalar_fn grad shape");
        let ng = self.needs(input);
        self.push(Matrix::scalar(value), Op::ScalarFn(input, grad), ng)
    }

    /// Gradients of the 1x1 node `root` with respect to every bound parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut out = self.store.zero_grads();
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if let Some(pid) = node.param {
                out.grads[pid.0].add_assign(&grad);
                continue;
            }
            self.backward_op(node, &grad, &mut grads);
        }
        out
    }

    fn backward_op(&self, node: &Node, grad: &Matrix, grads: &mut [Option<Matrix>]) {
        let accumulate = |grads: &mut [Option<Matrix>], v: Var, g: Matrix| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, matmul(grad, false, self.value(*b), true));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, matmul(self.value(*a), true, grad, false));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, matmul(grad, false, self.value(*b), false));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, matmul(grad, true, self.value(*a), false));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, hadamard(grad, self.value(*b)));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, hadamard(grad, self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, grad.clone());
                if self.needs(*row) {
                    let mut g = Matrix::zeros(1, grad.cols);
                    for r in 0..grad.rows {
                        for (o, v) in g.data.iter_mut().zip(grad.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *row, g);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, grad.map(|v| v * s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let g = Matrix::from_vec(
                    x.rows,
                    x.cols,
                    x.data
                        .iter()
                        .zip(&grad.data)
                        .map(|(x, g)| g * gelu_derivative(*x))
                        .collect(),
                );
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = Matrix::from_vec(
                    grad.rows,
                    grad.cols,
                    node.value
                        .data
                        .iter()
                        .zip(&grad.data)
                        .map(|(s, g)| g * s * (1.0 - s))
                        .collect(),
                );
                accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let mut g = Matrix::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    let (sr, gr) = (s.row(r), grad.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (sv, gv)) in g.row_mut(r).iter_mut().zip(sr.iter().zip(gr)) {
                        *o = sv * (gv - dot);
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let (rows, cols) = normed.shape();
                let gv = &self.value(*gamma).data;
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data[c] += grad.get(r, c) * normed.get(r, c);
                            db.data[c] += grad.get(r, c);
                        }
                    }
                    accumulate(grads, *gamma, dg);
                    accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for c in 0..cols {
                            let dn = grad.get(r, c) * gv[c];
                            sum_dn += dn;
                            sum_dn_n += dn * normed.get(r, c);
                        }
                        for c in 0..cols {
                            let dn = grad.get(r, c) * gv[c];
                            let v = inv_std[r] / n
                                * (n * dn - sum_dn - normed.get(r, c) * sum_dn_n);
                            dx.set(r, c, v);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    g.row_mut(r)[*start..*start + grad.cols].copy_from_slice(grad.row(r));
                }
                accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.needs(*p) {
                        let g = Matrix::from_fn(grad.rows, cols, |r, c| grad.get(r, offset + c));
                        accumulate(grads, *p, g);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.needs(*p) {
                        let g = Matrix::from_vec(
                            rows,
                            cols,
                            grad.data[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        accumulate(grads, *p, g);
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows, av.cols);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in g.row_mut(i).iter_mut().zip(grad.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::GroupMean(a, group) => {
                let av = self.value(*a);
                let inv = 1.0 / *group as f64;
                let g = Matrix::from_fn(av.rows, av.cols, |r, c| grad.get(r / group, c) * inv);
                accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                accumulate(grads, *a, Matrix::from_vec(rows, cols, vec![grad.data[0]; rows * cols]));
            }
            Op::ScalarFn(a, local) => {
                accumulate(grads, *a, local.map(|v| v * grad.data[0]));
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to every entry of
    /// every parameter, compared with `backward` by per-tensor relative
    /// error.
    fn check_gradients(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let analytic = g.backward(root);
        let h = 1e-6;
        for (id, p) in store.iter() {
            let mut numeric = Matrix::zeros(p.value.rows, p.value.cols);
            for k in 0..p.value.len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.value_mut(id).data[k] += delta;
                    let mut g = Graph::new(&s);
                    let r = f(&mut g);
                    g.value(r).data[0]
                };
                numeric.data[k] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let a = analytic.get(id);
            let diff: f64 = a.data.iter().zip(&numeric.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.sum_squares().sqrt().max(numeric.sum_squares().sqrt()).max(1e-10);
            assert!(diff / scale < 1e-6, "param {} rel err {}", p.name, diff / scale);
        }
    }

    fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, r, c) in shapes {
            s.add(*name, Matrix::from_fn(*r, *c, |_, _| rng.gen_range(-1.0..1.0)), true);
        }
        s
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, &[("a", 3, 4), ("b", 4, 5), ("c", 3, 5), ("r", 1, 5)]);
        let ids: Vec<ParamId> = s.iter().map(|(i, _)| i).collect();
        check_gradients(&s, |g| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let c = g.param(ids[2]);
            let r = g.param(ids[3]);
            let ab = g.matmul(a, b);
            let x = g.add_row(ab, r);
            let y = g.mul(x, c);
            let z = g.sub(y, c);
            let z = g.gelu(z);
            let w = g.matmul_t(z, c);
            let w = g.sigmoid(w);
            let w = g.scale(w, 1.7);
            let t = g.add(w, w);
            g.sum(t)
        });
    }

    #[test]
    fn softmax_layernorm_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_store(&mut rng, &[("x", 6, 4), ("gamma", 1, 4), ("beta", 1, 4), ("w", 4, 3)]);
        let ids: Vec<ParamId> = s.iter().map(|(i, _)| i).collect();
        let mask: Vec<bool> = (0..24).map(|k| k % 4 != 3 || k % 5 == 0).collect();
        check_gradients(&s, |g| {
            let x = g.param(ids[0]);
            let gamma = g.param(ids[1]);
            let beta = g.param(ids[2]);
            let w = g.param(ids[3]);
            let n = g.layer_norm(x, gamma, beta);
            let sm = g.softmax_rows(n, Some(&mask));
            let picked = g.gather_rows(sm, Rc::from(vec![0, 2, 2, 5]));
            let left = g.slice_cols(picked, 1, 2);
            let both = g.concat_cols(&[left, picked]);
            let stacked = g.concat_rows(&[both, both]);
            let pooled = g.group_mean(stacked, 2);
            let sliced = g.slice_cols(pooled, 2, 4);
            let out = g.matmul(sliced, w);
            let sq = g.mul(out, out);
            g.sum(sq)
        });
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Matrix::from_vec(1, 3, vec![1.0, 5.0, 2.0]));
        let y = g.softmax_rows(x, Some(&[true, false, true]));
        let v = g.value(y);
        assert_eq!(v.data[1], 0.0);
        assert!((v.data[0] + v.data[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_vec(1, 1, vec![2.0]), true);
        let mut g = Graph::new(&s);
        let w = g.param(id);
        let c = g.constant(Matrix::from_vec(1, 1, vec![3.0]));
        let y = g.mul(w, c);
        let grads = g.backward(y);
        assert_eq!(grads.get(id).data, vec![3.0]);
    }
}
