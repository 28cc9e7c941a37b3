//! Probability Distribution Encoder.
//!
//! Maps a point-representation sequence `H: [.., T, D]` to per-token
//! diagonal Gaussians. The feature axis is split in half: dims `[0, D/2)`
//! feed the mean path and `[D/2, D)` the variance path. Inside each half,
//! head `i` owns the contiguous block `[i*d_k, (i+1)*d_k)` with
//! `d_k = D / (2k)`. Each path runs per-head sequence attention with a
//! fused `W_qkv` projection, concatenates heads, projects back to `D` with
//! `W_O`, then applies a pre-normalized residual feed-forward stage. The
//! mean path adds `H` back; the variance path output is `log sigma`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussianSeq;
use crate::nn::{FeedForward, LayerNorm, Session, TraceEvent};
use crate::param::{ParamId, ParamStore};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Row-denominator floor used by the normalized activation variants.
pub const NORM_FLOOR: f64 = 1e-6;

/// Sequence-interaction activation inside the PDE heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    #[default]
    Softmax,
    ReluNorm,
    Relu2Norm,
    SigmoidNorm,
    /// No sequence interaction: feed-forward layers only.
    MlpOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    pub model_dim: usize,
    pub heads: usize,
    #[serde(default)]
    pub act: Act,
    pub ffn_hidden: usize,
}

impl PdeConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / (2 * self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("PDE dimensions must be positive".into()));
        }
        if self.model_dim % (2 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "PDE model_dim {} is not divisible by 2 * heads = {}",
                self.model_dim,
                2 * self.heads
            )));
        }
        Ok(())
    }
}

/// `Act(Q K^T / sqrt(d_k)) V` over `[.., T, d_k]` inputs.
///
/// Softmax uses no further normalization. ReLU, ReLU^2 and sigmoid are
/// applied pointwise and each row is then divided by its sum.
pub fn act_attention(tape: &Tape, q: Var, k: Var, v: Var, act: Act) -> Result<Var> {
    let weights = attention_weights(tape, q, k, act)?;
    tape.matmul(weights, v)
}

pub(crate) fn attention_weights(tape: &Tape, q: Var, k: Var, act: Act) -> Result<Var> {
    let (sq, sk) = (tape.shape(q), tape.shape(k));
    if sq.len() < 2 || sq.len() != sk.len() || sq[sq.len() - 1] != sk[sk.len() - 1] {
        return Err(Error::ShapeMismatch {
            op: "act_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let dk = *sq.last().unwrap() as f64;
    let scores = tape.scale(tape.matmul(q, tape.transpose(k)?)?, 1.0 / dk.sqrt())?;
    match act {
        Act::Softmax => tape.softmax_rows(scores),
        Act::ReluNorm => tape.row_normalize(tape.relu(scores)?, NORM_FLOOR),
        Act::Relu2Norm => {
            let r = tape.relu(scores)?;
            tape.row_normalize(tape.mul(r, r)?, NORM_FLOOR)
        }
        Act::SigmoidNorm => tape.row_normalize(tape.sigmoid(scores)?, NORM_FLOOR),
        Act::MlpOnly => Err(Error::InvalidArgument(
            "mlp_only has no attention stage".into(),
        )),
    }
}

/// Weights of one path (mean or variance).
#[derive(Debug, Clone)]
pub struct PdePath {
    /// Per-head `W_qkv: [d_k, 3 d_k]`; empty for `mlp_only`.
    pub wqkv: Vec<ParamId>,
    /// `W_O: [k d_k, D]`; absent for `mlp_only`.
    pub wo: Option<ParamId>,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Pde {
    pub cfg: PdeConfig,
    pub mu: PdePath,
    pub sigma: PdePath,
    pub name: String,
}

impl Pde {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: PdeConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut path = |which: &str| -> Result<PdePath> {
            let prefix = format!("{name}.{which}");
            let dk = cfg.head_dim();
            let (wqkv, wo) = if cfg.act == Act::MlpOnly {
                (Vec::new(), None)
            } else {
                let heads = (0..cfg.heads)
                    .map(|i| store.add_normal(format!("{prefix}.head{i}.wqkv"), &[dk, 3 * dk], rng))
                    .collect::<Result<Vec<_>>>()?;
                let wo = store.add_normal(format!("{prefix}.wo"), &[cfg.heads * dk, cfg.model_dim], rng)?;
                (heads, Some(wo))
            };
            Ok(PdePath {
                wqkv,
                wo,
                norm: LayerNorm::new(store, &format!("{prefix}.ln"), cfg.model_dim)?,
                ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg.model_dim, cfg.ffn_hidden, rng)?,
            })
        };
        let mu = path("mu")?;
        let sigma = path("sigma")?;
        Ok(Self {
            cfg,
            mu,
            sigma,
            name: name.to_string(),
        })
    }

    /// Encodes `h: [.., T, D]` into per-token Gaussians of the same shape.
    pub fn forward(&self, s: &Session, h: Var) -> Result<DiagGaussianSeq> {
        let t = s.tape;
        let d = t.value(h).last_dim();
        if d != self.cfg.model_dim {
            return Err(Error::ShapeMismatch {
                op: "pde_forward",
                lhs: t.shape(h),
                rhs: vec![self.cfg.model_dim],
            });
        }
        let (mu_out, sigma_out) = if self.cfg.act == Act::MlpOnly {
            (self.mlp_path(s, &self.mu, h)?, self.mlp_path(s, &self.sigma, h)?)
        } else {
            let half = d / 2;
            let mu_in = t.slice_last(h, 0, half)?;
            let sigma_in = t.slice_last(h, half, half)?;
            (
                self.attn_path(s, &self.mu, mu_in, "mu")?,
                self.attn_path(s, &self.sigma, sigma_in, "sigma")?,
            )
        };
        let mu = t.add(h, mu_out)?;
        DiagGaussianSeq::new(t, mu, sigma_out)
    }

    fn attn_path(&self, s: &Session, path: &PdePath, x: Var, which: &str) -> Result<Var> {
        let t = s.tape;
        let dk = self.cfg.head_dim();
        let heads = t.split_last(x, self.cfg.heads)?;
        let mut outs = Vec::with_capacity(heads.len());
        for (i, (hx, &w)) in heads.into_iter().zip(&path.wqkv).enumerate() {
            let qkv = t.matmul(hx, s.param(w))?;
            let q = t.slice_last(qkv, 0, dk)?;
            let k = t.slice_last(qkv, dk, dk)?;
            let v = t.slice_last(qkv, 2 * dk, dk)?;
            let weights = attention_weights(t, q, k, self.cfg.act)?;
            if s.is_tracing() {
                s.record(|| TraceEvent::Attention {
                    site: format!("{}.{which}.head{i}", self.name),
                    weights: t.value(weights).clone(),
                });
            }
            outs.push(t.matmul(weights, v)?);
        }
        let cat = t.concat_last(&outs)?;
        let m = t.matmul(cat, s.param(path.wo.expect("attention path has W_O")))?;
        let ff = path.ffn.forward(s, path.norm.forward(s, m)?)?;
        t.add(m, ff)
    }

    fn mlp_path(&self, s: &Session, path: &PdePath, h: Var) -> Result<Var> {
        path.ffn.forward(s, path.norm.forward(s, h)?)
    }
}
