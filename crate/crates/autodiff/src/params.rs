//! Persistent trainable tensors and their binding onto a tape.

use crate::{Element, Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    /// Lazily allocated on first accumulation; same shape as `value`.
    pub grad: Option<Tensor<f32>>,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
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

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Number of scalars across parameters that currently require grad.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Puts every parameter on the tape as a leaf (cast to `F`).
    pub fn bind<F: Element>(&self, tape: &mut Tape<F>) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.cast(), p.requires_grad))
            .collect();
        Bindings { vars }
    }

    /// Puts every parameter on the tape as a constant, for inference.
    pub fn bind_frozen<F: Element>(&self, tape: &mut Tape<F>) -> Bindings {
        let vars = self.params.iter().map(|p| tape.constant(p.value.cast())).collect();
        Bindings { vars }
    }

    /// Like [`ParamStore::bind`], but `id` is replaced by an existing var.
    pub fn bind_with_override<F: Element>(&self, tape: &mut Tape<F>, id: ParamId, var: Var) -> Bindings {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == id.0 {
                    var
                } else {
                    tape.leaf(p.value.cast(), p.requires_grad)
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients of every bound, trainable parameter into its
    /// `grad` buffer.
    pub fn accumulate<F: Element>(&mut self, bindings: &Bindings, grads: &Gradients<F>) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = grads.get(v) else { continue };
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (d, &s) in buf.data_mut().iter_mut().zip(g) {
                *d += s.as_f64() as f32;
            }
        }
    }
}

/// Mapping from parameters to the tape vars they were bound to.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
