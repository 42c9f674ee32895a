use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::LinearVars;
use crate::tensor::{Gradients, ParamId, Tape, Tensor, Var};

/// Named trainable tensors addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push((name.into(), tensor.param()));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.entries.iter_mut().enumerate().map(|(i, (_, t))| (ParamId(i), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Total elements over tensors that require gradients.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn record(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.get(id), id)
    }

    pub fn record_linear(&self, tape: &mut Tape, lin: &LinearIds) -> LinearVars {
        LinearVars {
            w: self.record(tape, lin.w),
            b: self.record(tape, lin.b),
        }
    }

    pub fn add_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng)),
            b: self.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Gives every trainable tensor without a gradient a zero one, for
    /// parameters the traced graph never touched.
    pub fn fill_missing_grads(&mut self) {
        for (_, t) in &mut self.entries {
            if t.requires_grad() && t.grad().is_none() {
                let z = vec![0.0; t.numel()];
                t.accumulate_grad(&z).expect("matching length");
            }
        }
    }

    pub fn apply_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let t = self
                .entries
                .get_mut(id.0)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {}", id.0)))?;
            t.1.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Replaces every tensor's values, keeping names and flags.
    pub fn load_values(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, t) in &mut self.entries {
            let src = lookup(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::dim("checkpoint", t.shape(), src.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}
