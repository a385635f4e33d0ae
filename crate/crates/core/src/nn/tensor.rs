//! Scalar trait and named parameters with gradient accumulators.

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Floating point scalar the engine can train in. 32-bit for speed,
/// 64-bit for gradient checks and operator oracles.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A tensor with a gradient accumulator and a unique name.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

/// Ordered collection of parameters; the order defines checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Register a parameter; returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> usize {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Parameter { name, value, grad });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<F> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<F> {
        &mut self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Add `grad` into the accumulator of parameter `idx`.
    pub fn accumulate_grad(&mut self, idx: usize, grad: &ArrayD<F>) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.raw_dim() != grad.raw_dim() {
            return Err(Error::dimension(
                format!("gradient shaped {:?} for {}", p.value.shape(), p.name),
                format!("{:?}", grad.shape()),
            ));
        }
        p.grad.zip_mut_with(grad, |g, &d| *g = *g + d);
        Ok(())
    }

    /// Convert every parameter to another precision (gradients reset).
    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let params = self
            .params
            .iter()
            .map(|p| {
                let value = p.value.mapv(|v| G::from_f64(v.to_f64()));
                let grad = ArrayD::zeros(value.raw_dim());
                Parameter {
                    name: p.name.clone(),
                    value,
                    grad,
                }
            })
            .collect();
        ParamSet { params }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}
