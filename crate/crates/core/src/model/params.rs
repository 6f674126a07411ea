use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Registers every tensor on the graph, as trainable or constant leaves.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars(
            self.values
                .iter()
                .map(|v| {
                    if trainable {
                        g.param(v.clone())
                    } else {
                        g.constant(v.clone())
                    }
                })
                .collect(),
        )
    }

    /// Replaces every value by name, requiring identical names and shapes.
    pub(crate) fn load_named(&mut self, tensors: Vec<(String, Mat)>) -> Result<()> {
        let mut by_name: HashMap<String, Mat> = tensors.into_iter().collect();
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let value = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if value.dim() != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            *slot = value;
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Graph handles for a registered [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Mat::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}
