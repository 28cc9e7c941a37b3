//! Parameter binding and small layer building blocks.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::cell::RefCell;

/// Instrumentation events recorded by a tracing [`Session`].
#[derive(Debug, Clone)]
pub enum TraceEvent {
    /// Attention weights (rows over keys) produced at a named site.
    Attention { site: String, weights: Tensor },
    /// One application of the cross-modal layer workflow.
    CrossModalLayer { index: usize },
}

/// A tape plus lazily bound parameters for one forward (and backward) pass.
pub struct Session<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
    trace: Option<RefCell<Vec<TraceEvent>>>,
}

impl<'a> Session<'a> {
    /// Parameters become differentiable leaves.
    pub fn train(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters become constants; nothing is differentiable.
    pub fn eval(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'a Tape, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
            trace: None,
        }
    }

    pub fn traced(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    /// Routes parameter `id` through an existing variable on this tape.
    pub fn bind(&self, id: ParamId, var: Var) {
        self.bound.borrow_mut()[id.0] = Some(var);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).tensor.clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn is_tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record(&self, event: impl FnOnce() -> TraceEvent) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push(event());
        }
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.trace
            .as_ref()
            .map(|t| std::mem::take(&mut *t.borrow_mut()))
            .unwrap_or_default()
    }

    /// Gradients of every bound parameter; zeros where the backward pass
    /// did not reach.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self
                    .tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(ParamId(i)).tensor.shape().to_vec()));
                Some((ParamId(i), g))
            })
            .collect()
    }

    /// Copies gradients of every bound parameter into `store` (adding to
    /// any gradient already present). Bound parameters that the backward
    /// pass did not reach receive zeros.
    pub fn collect_grads(&self, store: &mut ParamStore) {
        for (i, v) in self.bound.borrow().iter().enumerate() {
            let Some(v) = *v else { continue };
            let p = store.get_mut(ParamId(i));
            let g = self
                .tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()));
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], rng)?;
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let y = s.tape.matmul(x, s.param(self.weight))?;
        match self.bias {
            Some(b) => s.tape.add(y, s.param(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization with a learned elementwise affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0)?,
            shift: store.add_zeros(format!("{name}.shift"), &[dim])?,
        })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = &s.tape;
        let y = t.mul(t.layer_norm(x)?, s.param(self.gain))?;
        t.add(y, s.param(self.shift))
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let h = s.tape.gelu(self.up.forward(s, x)?)?;
        self.down.forward(s, h)
    }
}
