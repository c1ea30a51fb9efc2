use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors. Every tensor is 2-D;
/// vectors are stored as `1 × n` rows.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` declared twice"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        self.values[id.0] = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, _, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(_, n, _)| n)
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
            shapes: store.values.iter().map(|v| v.dim()).collect(),
        }
    }

    fn slot(&mut self, id: ParamId) -> &mut Mat {
        let shape = self.shapes[id.0];
        self.grads[id.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        *self.slot(id) += g;
    }

    pub fn accumulate_scaled(&mut self, id: ParamId, g: &Mat, scale: f64) {
        self.slot(id).scaled_add(scale, g);
    }

    /// Add row `r` of `g` into row `rows[r]` of the gradient.
    pub fn scatter_rows(&mut self, id: ParamId, rows: &[usize], g: &Mat) {
        let slot = self.slot(id);
        for (r, &target) in rows.iter().enumerate() {
            let mut dst = slot.row_mut(target);
            dst += &g.row(r);
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient entry, zero when the parameter was never touched.
    pub fn value_at(&self, id: ParamId, r: usize, c: usize) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g[[r, c]])
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}
