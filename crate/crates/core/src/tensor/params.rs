use super::{Gradients, Scalar, Tape, Tensor};

/// Stable handle of one parameter group inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamGroup<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Named trainable tensors with accumulated gradients, in declaration order.
#[derive(Clone, Debug, Default)]
pub struct Params<F> {
    groups: Vec<ParamGroup<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.groups.push(ParamGroup {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.groups.len()).map(ParamId)
    }

    pub fn groups(&self) -> &[ParamGroup<F>] {
        &self.groups
    }

    pub fn group(&self, id: ParamId) -> &ParamGroup<F> {
        &self.groups[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.groups[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.groups[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.groups[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.groups[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.groups.iter().position(|g| g.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.groups.iter().map(|g| g.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.grad.data_mut().fill(F::zero());
        }
    }

    /// Adds the gradients of every parameter leaf bound on `tape` into the stored grads.
    pub fn accumulate(&mut self, tape: &Tape<F>, grads: &Gradients<F>) {
        for (var, id) in tape.param_bindings() {
            if let Some(g) = grads.get(var) {
                let acc = self.groups[id.0].grad.data_mut();
                for (a, &b) in acc.iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    value: g.value.cast(),
                    grad: g.grad.cast(),
                })
                .collect(),
        }
    }
}
