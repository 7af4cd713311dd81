//! Named parameter storage shared by the models and the optimizer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{ComplexTensor, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Real parameters keep a zero imaginary part and receive real gradients.
    pub real: bool,
    pub value: ComplexTensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, real: bool, value: ComplexTensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let value = if real { value.re() } else { value };
        self.params.push(Param { name, real, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ComplexTensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ComplexTensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_real(&self, id: ParamId) -> bool {
        self.params[id.0].real
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Number of real degrees of freedom.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| if p.real { p.value.len() } else { 2 * p.value.len() }).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(
            self.params.iter().map(|p| ComplexTensor::zeros(p.value.rows(), p.value.cols())).collect(),
        )
    }

    /// Same names, shapes and kinds.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.real == b.real && a.value.shape() == b.value.shape()
            })
    }
}

/// One gradient tensor per parameter, aligned with the store.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<ComplexTensor>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &ComplexTensor {
        &self.0[id.0]
    }

    pub fn set(&mut self, id: ParamId, g: ComplexTensor) {
        assert_eq!(self.0[id.0].shape(), g.shape(), "gradient shape mismatch");
        self.0[id.0] = g;
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            for z in g.data_mut() {
                *z *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(ComplexTensor::all_finite)
    }
}

/// Complex Gaussian entries with `E|z|² = var` (real and imaginary parts
/// independent, each with variance `var / 2`).
pub fn complex_normal(rows: usize, cols: usize, var: f64, rng: &mut impl Rng) -> ComplexTensor {
    let sd = (var / 2.0).sqrt();
    ComplexTensor::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(sd * re, sd * im)
    })
}

pub fn real_normal(rows: usize, cols: usize, var: f64, rng: &mut impl Rng) -> ComplexTensor {
    let sd = var.sqrt();
    ComplexTensor::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        C64::new(sd * x, 0.0)
    })
}
