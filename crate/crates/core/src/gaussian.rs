//! Diagonal-Gaussian distribution representations.
//!
//! A token is represented as `N(mu, diag(sigma^2))` and stored through
//! `log_sigma`, so `sigma = exp(log_sigma)` is positive by construction.
//! For diagonal covariances the squared 2-Wasserstein distance collapses to
//! `||mu1 - mu2||^2 + ||sigma1 - sigma2||^2` and the differential entropy to
//! `d/2 (ln 2pi + 1) + sum(log_sigma)`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Entropy of one standard-normal dimension, `(ln 2pi + 1) / 2`.
pub fn unit_entropy() -> f64 {
    0.5 * ((2.0 * PI).ln() + 1.0)
}

/// Per-token Gaussians recorded on a tape. `mu` and `log_sigma` share a
/// shape whose last axis is the feature dimension; every leading position
/// is one token.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussianSeq {
    pub mu: Var,
    pub log_sigma: Var,
}

impl DiagGaussianSeq {
    pub fn new(tape: &Tape, mu: Var, log_sigma: Var) -> Result<Self> {
        let (a, b) = (tape.shape(mu), tape.shape(log_sigma));
        if a != b {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs: a,
                rhs: b,
            });
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mu).last_dim()
    }

    pub fn sigma(&self, tape: &Tape) -> Result<Var> {
        tape.exp(self.log_sigma)
    }

    /// Selects tokens (rows of the flattened `[tokens, D]` view).
    pub fn rows(&self, tape: &Tape, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            mu: tape.index_rows(self.mu, idx)?,
            log_sigma: tape.index_rows(self.log_sigma, idx)?,
        })
    }

    pub fn to_tokens(&self, tape: &Tape) -> Vec<GaussianToken> {
        let (mu, ls) = (tape.value(self.mu), tape.value(self.log_sigma));
        (0..mu.rows())
            .map(|r| GaussianToken {
                mu: mu.row(r).to_vec(),
                log_sigma: ls.row(r).to_vec(),
            })
            .collect()
    }
}

/// A single detached Gaussian token.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianToken {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianToken {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs: vec![mu.len()],
                rhs: vec![log_sigma.len()],
            });
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    /// Places the token on a tape as differentiable `[D]` leaves.
    pub fn leaf(&self, tape: &Tape) -> DiagGaussianSeq {
        DiagGaussianSeq {
            mu: tape.leaf(Tensor::from_vec(self.mu.clone())),
            log_sigma: tape.leaf(Tensor::from_vec(self.log_sigma.clone())),
        }
    }

    pub fn entropy(&self) -> f64 {
        self.dim() as f64 * unit_entropy() + self.log_sigma.iter().sum::<f64>()
    }
}

/// Squared 2-Wasserstein distance between two detached tokens.
pub fn w2_squared_values(a: &GaussianToken, b: &GaussianToken) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "w2_squared",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    let mut d = 0.0;
    for i in 0..a.dim() {
        let dm = a.mu[i] - b.mu[i];
        let ds = a.log_sigma[i].exp() - b.log_sigma[i].exp();
        d += dm * dm + ds * ds;
    }
    Ok(d)
}

/// Per-token squared 2-Wasserstein distance between equally shaped
/// sequences; result has one entry per token.
pub fn w2_rows(tape: &Tape, a: &DiagGaussianSeq, b: &DiagGaussianSeq) -> Result<Var> {
    let (sa, sb) = (tape.shape(a.mu), tape.shape(b.mu));
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "w2_squared",
            lhs: sa,
            rhs: sb,
        });
    }
    let dm = tape.square(tape.sub(a.mu, b.mu)?)?;
    let ds = tape.square(tape.sub(a.sigma(tape)?, b.sigma(tape)?)?)?;
    tape.sum_last(tape.add(dm, ds)?)
}

/// Squared 2-Wasserstein distance between two single tokens (shape `[D]`).
pub fn w2_squared(tape: &Tape, a: &DiagGaussianSeq, b: &DiagGaussianSeq) -> Result<Var> {
    let rows = w2_rows(tape, a, b)?;
    tape.sum(rows)
}

/// All-pairs distance table `[N, M]` between `[N, D]` and `[M, D]` tokens.
pub fn w2_table(tape: &Tape, a: &DiagGaussianSeq, b: &DiagGaussianSeq) -> Result<Var> {
    let (sa, sb) = (tape.shape(a.mu), tape.shape(b.mu));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::ShapeMismatch {
            op: "w2_table",
            lhs: sa,
            rhs: sb,
        });
    }
    let (n, m) = (sa[0], sb[0]);
    let left: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let right: Vec<usize> = (0..n).flat_map(|_| 0..m).collect();
    let d = w2_rows(tape, &a.rows(tape, &left)?, &b.rows(tape, &right)?)?;
    tape.reshape(d, &[n, m])
}

/// Differential entropy of every token; one entry per token.
pub fn entropy(tape: &Tape, g: &DiagGaussianSeq) -> Result<Var> {
    let d = g.dim(tape) as f64;
    let s = tape.sum_last(g.log_sigma)?;
    tape.add_scalar(s, d * unit_entropy())
}

/// Mean over tokens of `max(0, gamma - h(token))`.
pub fn entropy_floor_loss(tape: &Tape, g: &DiagGaussianSeq, gamma: f64) -> Result<Var> {
    if !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("entropy floor must be finite, got {gamma}")));
    }
    let h = entropy(tape, g)?;
    let gap = tape.add_scalar(tape.neg(h)?, gamma)?;
    tape.mean(tape.relu(gap)?)
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)` drawn from `rng`.
/// The noise is a constant, so gradients reach only `mu` and `log_sigma`.
pub fn reparam_sample(tape: &Tape, g: &DiagGaussianSeq, rng: &mut SeededRng) -> Result<Var> {
    let shape = tape.shape(g.mu);
    let n = shape.iter().product();
    let eps = Tensor::new(shape, rng.normals(n))?;
    reparam_sample_with_noise(tape, g, eps)
}

/// [`reparam_sample`] with caller-supplied noise.
pub fn reparam_sample_with_noise(tape: &Tape, g: &DiagGaussianSeq, eps: Tensor) -> Result<Var> {
    let shape = tape.shape(g.mu);
    if eps.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            lhs: shape,
            rhs: eps.shape().to_vec(),
        });
    }
    let eps = tape.constant(eps);
    let scaled = tape.mul(g.sigma(tape)?, eps)?;
    tape.add(g.mu, scaled)
}
