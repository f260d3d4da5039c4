use super::{Gradients, Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces all values; shapes must match one-to-one.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return invalid(format!("expected {} parameter tensors, got {}", self.values.len(), values.len()));
        }
        for ((n, old), new) in self.names.iter().zip(&self.values).zip(&values) {
            if old.shape() != new.shape() {
                return invalid(format!("parameter {n}: shape {:?} does not match {:?}", new.shape(), old.shape()));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Places every parameter on `tape` as a gradient-receiving leaf.
    pub fn attach<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn attach_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }
}

/// Parameters bound to a tape for one forward/backward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Wraps vars already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order, zeros where unused.
    pub fn collect_grads(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(v, t)| grads.take_by_id(v.id()).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
