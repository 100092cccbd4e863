//! Named trainable parameters, detached gradient buffers and initializers.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::array::NumArray;
use super::SeededRng;
use crate::error::{Error, Result};

/// Stable index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: NumArray,
    pub grad: NumArray,
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NumArray) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = NumArray::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn value(&self, id: ParamId) -> &NumArray {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NumArray {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fresh zeroed gradient buffers shaped like this set.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self.params.iter().map(|p| NumArray::zeros(p.value.shape())).collect(),
        }
    }

    /// Moves accumulated buffers into each `Param::grad`.
    pub fn store_grads(&mut self, grads: Grads) {
        debug_assert_eq!(grads.bufs.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads.bufs) {
            p.grad = g;
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

/// Gradient accumulators detached from the parameter values, so several
/// utterances can be differentiated against one read-only [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<NumArray>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &NumArray {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.bufs[id.0].data_mut()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            b.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NumArray)> {
        self.bufs.iter().enumerate().map(|(i, b)| (ParamId(i), b))
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform values in `(-scale, scale)`.
pub fn uniform(shape: &[usize], scale: f64, rng: &mut SeededRng) -> NumArray {
    let mut a = NumArray::zeros(shape);
    for v in a.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
    a
}

/// `blocks` orthogonal `h x h` matrices laid side by side as `[h, blocks*h]`,
/// each the Q factor of a seeded Gaussian matrix.
pub fn orthogonal_blocks(h: usize, blocks: usize, rng: &mut SeededRng) -> NumArray {
    let mut out = NumArray::zeros(&[h, blocks * h]);
    for blk in 0..blocks {
        let g = DMatrix::<f64>::from_fn(h, h, |_, _| rng.sample(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        // Sign-fix so the factorization is unique.
        for j in 0..h {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        for i in 0..h {
            for j in 0..h {
                out.data_mut()[i * blocks * h + blk * h + j] = q[(i, j)];
            }
        }
    }
    out
}
