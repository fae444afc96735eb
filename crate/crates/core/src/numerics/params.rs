use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Architectural weights: decayed.
    Main,
    /// Combination-coefficient parameters: never decayed.
    Lambda,
}

/// How a parameter is (re)initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))` over a 2-D shape.
    XavierUniform,
    /// `N(0, std^2)`.
    Normal { std: f64 },
    Constant(f64),
}

/// A trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub group: ParamGroup,
    pub init: Init,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub const fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter holding `value`; `Init::Constant(0.0)` is
    /// recorded as its re-initialization rule.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.add_with_init(name, value, group, Init::Constant(0.0))
    }

    /// Registers a zero-filled parameter of `shape` that `init` will later fill.
    pub fn declare(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        init: Init,
    ) -> ParamId {
        let value = match init {
            Init::Constant(c) => Tensor::filled(shape, c),
            _ => Tensor::zeros(shape),
        };
        self.add_with_init(name, value, group, init)
    }

    fn add_with_init(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
        init: Init,
    ) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            group,
            init,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    /// Overwrites a parameter's data, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.numel() != data.len() {
            return Err(Error::Dimension(format!(
                "{} holds {} values, got {}",
                p.name,
                p.value.numel(),
                data.len()
            )));
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
