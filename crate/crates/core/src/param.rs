//! Named trainable parameters and the AdamW optimizer.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let shape = tensor.shape().to_vec();
        Self {
            name: name.into(),
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            tensor,
            grad: None,
            step_count: 0,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(Parameter::new(name, tensor))
    }

    /// Weights drawn from N(0, 0.02^2) truncated at two standard deviations.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| INIT_STD * rng.truncated_normal(2.0)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), v))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let id = self.id_of(name)?;
        Some(self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// AdamW hyperparameters; weight decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    fn update(&self, p: &mut Parameter) {
        let grad = p.grad.as_ref().expect("checked by caller");
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        let w = p.tensor.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] = w[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One AdamW update for every parameter. Gradients are left in place.
/// Nothing is modified if any parameter lacks a gradient.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = (&'a mut Parameter, AdamW)>,
) -> Result<()> {
    let params: Vec<_> = params.into_iter().collect();
    if let Some((p, _)) = params.iter().find(|(p, _)| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    if let Some((_, cfg)) = params.iter().find(|(_, c)| !(c.lr > 0.0)) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (p, cfg) in params {
        cfg.update(p);
    }
    Ok(())
}

/// Replaces every gradient in `store` by `grads` (zeros where absent) and
/// takes one step with the same settings for all parameters.
pub fn step_with(store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>, opt: AdamW) -> Result<()> {
    store.zero_grads();
    for (id, g) in grads {
        store.get_mut(id).grad = Some(g);
    }
    adamw_step(store.iter_mut().map(|p| {
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.tensor.shape().to_vec()));
        }
        (p, opt)
    }))
}
