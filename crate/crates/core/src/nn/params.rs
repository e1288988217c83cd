use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        id
    }

    /// Uniform Glorot initialization; decayed.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let m = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..limit));
        self.add(name, m, true)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.add(name, Matrix::zeros(1, width), false)
    }

    pub fn add_constant(&mut self, name: impl Into<String>, width: usize, value: f64) -> ParamId {
        self.add(name, Matrix::from_vec(1, width, vec![value; width]), false)
    }

    /// Normal(0, std) table, e.g. embeddings and learned queries; not decayed.
    pub fn add_table(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let m = Matrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.add(name, m, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows, p.value.cols))
                .collect(),
        }
    }
}

/// One gradient tensor per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.scaled_add_assign(scale, b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}
