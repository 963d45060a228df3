use crate::tensor::Tensor;
use crate::{GraphError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensor together with its Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Owning collection of model parameters, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot of all parameter values, in id order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Restores values previously taken with [`ParamStore::values`].
    /// Optimizer moments are left untouched.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(GraphError::InvalidArgument("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(GraphError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.value = v;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One update of every parameter listed in `grads`.
    pub fn step(&self, store: &mut ParamStore, grads: &[(ParamId, &[f64])]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.value.len() != g.len() {
                return Err(GraphError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let values = p.value.data_mut();
            for i in 0..g.len() {
                let m = &mut p.first_moment[i];
                let v = &mut p.second_moment[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
