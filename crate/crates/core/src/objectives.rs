//! Distribution-based pre-training losses and the combined training step.
//!
//! Classifiers are passed as closures from features to logits so the losses
//! can be exercised with fixed fixtures as well as with the model heads.

use crate::autograd::{Tape, Var};
use crate::data::{mask_batch, match_pairs, MaskPolicy, MaskedBatch, MatchPairs, PairedExample};
use crate::error::{Error, Result};
use crate::gaussian::{entropy, reparam_sample, w2_squared, w2_squared_values, w2_table, DiagGaussianSeq, GaussianToken};
use crate::model::{cls_rows, Model, ParamGroup};
use crate::nn::Session;
use crate::param::{adamw_step, AdamW, ParamId};
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Maps `[R, F]` features to `[R, C]` logits.
pub type Classifier<'a> = &'a dyn Fn(Var) -> Result<Var>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Similarity scale; must be negative.
    pub a: f64,
    pub b: f64,
    /// Weight of the entropy-floor term.
    pub alpha: f64,
    /// Entropy floor.
    pub gamma: f64,
    /// Reparameterized samples per distribution.
    pub k: usize,
    pub log_tau_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl LossConfig {
    pub fn full() -> Self {
        Self {
            a: -0.005,
            b: 6.0,
            alpha: 0.01,
            gamma: 300.0,
            k: 5,
            log_tau_init: 0.07f64.ln(),
        }
    }

    /// Floor rescaled linearly with the feature dimension (300 at 768).
    pub fn toy_gamma(dim: usize) -> f64 {
        dim as f64 / 768.0 * 300.0
    }

    /// Full-width constants with the floor rescaled to `dim`.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            gamma: Self::toy_gamma(dim),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a < 0.0) || !self.a.is_finite() {
            return Err(Error::Config(format!("similarity scale a must be negative, got {}", self.a)));
        }
        if !self.b.is_finite() || !self.gamma.is_finite() || !self.log_tau_init.is_finite() {
            return Err(Error::Config("loss constants must be finite".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `a * W2^2 + b` for two detached tokens.
pub fn similarity_values(gi: &GaussianToken, gt: &GaussianToken, cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.a * w2_squared_values(gi, gt)? + cfg.b)
}

/// `a * W2^2 + b` for two `[D]` tokens on the tape.
pub fn similarity(tape: &Tape, gi: &DiagGaussianSeq, gt: &DiagGaussianSeq, cfg: &LossConfig) -> Result<Var> {
    tape.add_scalar(tape.scale(w2_squared(tape, gi, gt)?, cfg.a)?, cfg.b)
}

/// All-pairs similarity `[N, M]` between `[N, D]` and `[M, D]` tokens.
pub fn similarity_table(tape: &Tape, vis: &DiagGaussianSeq, txt: &DiagGaussianSeq, cfg: &LossConfig) -> Result<Var> {
    tape.add_scalar(tape.scale(w2_table(tape, vis, txt)?, cfg.a)?, cfg.b)
}

/// Mean cross-entropy of rows against the diagonal plus the same over
/// columns, with logits `sims / tau`.
pub fn infonce(tape: &Tape, sims: Var, log_tau: Var) -> Result<Var> {
    let shape = tape.shape(sims);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            lhs: shape,
            rhs: vec![0, 0],
        });
    }
    let n = shape[0];
    let diag: Vec<usize> = (0..n).collect();
    let logits = tape.mul(sims, tape.exp(tape.neg(log_tau)?)?)?;
    let rows = tape.gather_last(tape.log_softmax_rows(logits)?, &diag)?;
    let cols = tape.gather_last(tape.log_softmax_rows(tape.transpose(logits)?)?, &diag)?;
    let both = tape.add(tape.mean(rows)?, tape.mean(cols)?)?;
    tape.neg(both)
}

/// Contrastive loss over `N >= 2` aligned `[N, D]` unimodal `[CLS]` pairs.
pub fn dvlc_loss(
    tape: &Tape,
    vis: &DiagGaussianSeq,
    txt: &DiagGaussianSeq,
    cfg: &LossConfig,
    log_tau: Var,
) -> Result<Var> {
    let n = tape.shape(vis.mu).first().copied().unwrap_or(0);
    if tape.shape(vis.mu).len() != 2 || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 pairs, got shape {:?}",
            tape.shape(vis.mu)
        )));
    }
    infonce(tape, similarity_table(tape, vis, txt, cfg)?, log_tau)
}

/// `-sum_r w_r log softmax(logits)[r, y_r]`.
fn weighted_ce(tape: &Tape, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let picked = tape.gather_last(tape.log_softmax_rows(logits)?, labels)?;
    let w = tape.constant(Tensor::from_vec(weights.to_vec()));
    tape.neg(tape.sum(tape.mul(picked, w)?)?)
}

/// Stacks the mean and `k` samples of `[R, D]` rows into `[R (k + 1), D]`,
/// row-major by original row. Noise is drawn sample by sample.
fn stack_with_samples(tape: &Tape, g: &DiagGaussianSeq, k: usize, rng: &mut SeededRng) -> Result<Var> {
    let shape = tape.shape(g.mu);
    let mut parts = vec![g.mu];
    for _ in 0..k {
        parts.push(reparam_sample(tape, g, rng)?);
    }
    let rows = shape[..shape.len() - 1].iter().product::<usize>();
    let d = shape[shape.len() - 1];
    tape.reshape(tape.concat_last(&parts)?, &[rows * (k + 1), d])
}

/// Masked-position targets over a flattened `[B * T, D]` token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTargets {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    /// Averages over positions within an example, then over examples.
    pub weights: Vec<f64>,
}

impl MaskTargets {
    /// `positions[b]` index content tokens; `offset` is the number of
    /// leading positions (1 for `[CLS]`) in each `seq_len`-long row block.
    pub fn new(positions: &[Vec<usize>], labels: &[Vec<usize>], seq_len: usize, offset: usize) -> Result<Self> {
        let active = positions.iter().filter(|p| !p.is_empty()).count();
        if active == 0 {
            return Err(Error::InvalidArgument("no masked positions".into()));
        }
        let mut t = MaskTargets {
            rows: Vec::new(),
            labels: Vec::new(),
            weights: Vec::new(),
        };
        for (b, (pos, lab)) in positions.iter().zip(labels).enumerate() {
            if pos.len() != lab.len() {
                return Err(Error::InvalidArgument("mask positions and labels differ in length".into()));
            }
            for (&p, &y) in pos.iter().zip(lab) {
                if p + offset >= seq_len {
                    return Err(Error::InvalidArgument(format!("mask position {p} outside sequence")));
                }
                t.rows.push(b * seq_len + p + offset);
                t.labels.push(y);
                t.weights.push(1.0 / (active * pos.len()) as f64);
            }
        }
        Ok(t)
    }
}

/// Cross-entropy of `phi` over the mean and `k` samples of each masked
/// token, averaged with equal weight `1 / (k + 1)`.
pub fn dmlm_loss(
    tape: &Tape,
    g: &DiagGaussianSeq,
    targets: &MaskTargets,
    phi: Classifier,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Var> {
    if targets.rows.is_empty() {
        return Err(Error::InvalidArgument("no masked positions".into()));
    }
    let picked = g.rows(tape, &targets.rows)?;
    let feats = stack_with_samples(tape, &picked, k, rng)?;
    let (labels, weights) = expand(&targets.labels, &targets.weights, k);
    weighted_ce(tape, phi(feats)?, &labels, &weights)
}

fn expand(labels: &[usize], weights: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let scale = 1.0 / (k + 1) as f64;
    let l = labels.iter().flat_map(|&y| std::iter::repeat_n(y, k + 1)).collect();
    let w = weights.iter().flat_map(|&w| std::iter::repeat_n(w * scale, k + 1)).collect();
    (l, w)
}

/// Mean of `softmax(phi(.))` over the mean and `k` samples of one token.
pub fn dmlm_predict(
    tape: &Tape,
    g: &DiagGaussianSeq,
    phi: Classifier,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let d = g.dim(tape);
    if tape.value(g.mu).numel() != d {
        return Err(Error::InvalidArgument("prediction expects a single token".into()));
    }
    let flat = DiagGaussianSeq::new(tape, tape.reshape(g.mu, &[1, d])?, tape.reshape(g.log_sigma, &[1, d])?)?;
    let probs = tape.softmax_rows(phi(stack_with_samples(tape, &flat, k, rng)?)?)?;
    let p = tape.value(probs);
    let mut out = vec![0.0; p.last_dim()];
    for r in 0..=k {
        for (o, v) in out.iter_mut().zip(p.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= (k + 1) as f64);
    Ok(out)
}

/// Binary matching loss over concatenated `[v, w]` features of aligned
/// `[N, D]` vision and text tokens; labels are 1 for matched pairs.
pub fn ditm_loss(
    tape: &Tape,
    vis: &DiagGaussianSeq,
    txt: &DiagGaussianSeq,
    labels: &[usize],
    phi: Classifier,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Var> {
    let n = labels.len();
    if tape.shape(vis.mu) != tape.shape(txt.mu) || tape.value(vis.mu).rows() != n {
        return Err(Error::ShapeMismatch {
            op: "ditm_loss",
            lhs: tape.shape(vis.mu),
            rhs: tape.shape(txt.mu),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("matching labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument("matching batch must contain both matched and unmatched pairs".into()));
    }
    let mut parts = vec![tape.concat_last(&[vis.mu, txt.mu])?];
    for _ in 0..k {
        let zv = reparam_sample(tape, vis, rng)?;
        let zw = reparam_sample(tape, txt, rng)?;
        parts.push(tape.concat_last(&[zv, zw])?);
    }
    let d2 = 2 * vis.dim(tape);
    let feats = tape.reshape(tape.concat_last(&parts)?, &[n * (k + 1), d2])?;
    let (l, w) = expand(labels, &vec![1.0 / n as f64; n], k);
    weighted_ce(tape, phi(feats)?, &l, &w)
}

/// One step's scalar results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_dmlm: f64,
    pub loss_ditm: f64,
    pub loss_dvlc: f64,
    pub loss_reg: f64,
    pub mean_entropy: f64,
    pub tau: f64,
}

/// Base learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupLr {
    pub encoders: f64,
    pub fusion: f64,
    pub pde: f64,
    pub heads: f64,
}

impl Default for GroupLr {
    fn default() -> Self {
        Self {
            encoders: 1e-3,
            fusion: 1e-3,
            pde: 1e-3,
            heads: 1e-3,
        }
    }
}

impl GroupLr {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoders => self.encoders,
            ParamGroup::Fusion => self.fusion,
            ParamGroup::Pde => self.pde,
            ParamGroup::Heads => self.heads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub loss: LossConfig,
    pub lr: GroupLr,
    /// Schedule multiplier applied to every group rate this step.
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub mask: MaskPolicy,
    /// When false the entropy-floor term is still measured but left out of
    /// the optimized objective.
    pub reg_in_graph: bool,
}

impl StepConfig {
    pub fn new(loss: LossConfig) -> Self {
        Self {
            loss,
            lr: GroupLr::default(),
            lr_scale: 1.0,
            weight_decay: 0.01,
            mask: MaskPolicy::default(),
            reg_in_graph: true,
        }
    }
}

/// Accumulates entropy statistics over every PDE output of a step.
struct EntropyFloor {
    hinge: Vec<Var>,
    entropy_sum: f64,
    tokens: usize,
}

impl EntropyFloor {
    fn add(&mut self, tape: &Tape, g: &DiagGaussianSeq, gamma: f64) -> Result<()> {
        let h = entropy(tape, g)?;
        {
            let hv = tape.value(h);
            self.entropy_sum += hv.data().iter().sum::<f64>();
            self.tokens += hv.numel();
        }
        let gap = tape.relu(tape.add_scalar(tape.neg(h)?, gamma)?)?;
        self.hinge.push(tape.sum(gap)?);
        Ok(())
    }

    fn loss(&self, tape: &Tape) -> Result<Var> {
        let mut total = self.hinge[0];
        for &h in &self.hinge[1..] {
            total = tape.add(total, h)?;
        }
        tape.scale(total, 1.0 / self.tokens as f64)
    }
}

/// Selects whole sequences of a `[B, T, D]` stream.
fn select_sequences(tape: &Tape, x: Var, idx: &[usize]) -> Result<Var> {
    let s = tape.shape(x);
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.reshape(tape.index_rows(flat, idx)?, &[idx.len(), s[1], s[2]])
}

/// Scalar handles of one step's objective.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub dmlm: Var,
    pub ditm: Var,
    pub dvlc: Var,
    pub reg: Var,
    pub total: Var,
    pub mean_entropy: f64,
}

/// Inputs of one step after masking and re-pairing.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub masked: MaskedBatch,
    pub pairs: MatchPairs,
}

impl StepInputs {
    pub fn draw(model: &Model, batch: &[&PairedExample], mask: &MaskPolicy, seed: u64, step: u64) -> Result<Self> {
        let mut mask_rng = SeededRng::derived(seed, streams::MASK, step);
        let mut pair_rng = SeededRng::derived(seed, streams::ITM_NEGATIVES, step);
        Ok(Self {
            masked: mask_batch(batch, &mut mask_rng, mask, model.cfg.mask_id(), model.cfg.encoder.text_vocab)?,
            pairs: match_pairs(batch.len(), &mut pair_rng)?,
        })
    }
}

/// Builds `L_dmlm + L_ditm + L_dvlc + alpha * L_reg` on the session tape.
///
/// Three passes share the batch: masked text through the fusion stack for
/// D-MLM, re-paired examples for D-ITM, and unmasked unimodal `[CLS]`
/// distributions for D-VLC. Unimodal encodings are pure per-example
/// functions, so the vision and clean text encodings are computed once and
/// reused by every pass that needs them. The entropy floor covers every
/// PDE output produced here.
pub fn step_losses(
    s: &Session,
    m: &Model,
    inputs: &StepInputs,
    cfg: &StepConfig,
    noise_rng: &mut SeededRng,
) -> Result<StepLosses> {
    let tape = s.tape;
    let (masked, pairs) = (&inputs.masked, &inputs.pairs);
    let gamma = cfg.loss.gamma;
    let mut floor = EntropyFloor {
        hinge: Vec::new(),
        entropy_sum: 0.0,
        tokens: 0,
    };
    let vision = m.encode_vision(s, &masked.vision_tokens)?;
    let text = m.encode_text(s, &masked.text_tokens)?;

    // D-MLM: masked text against the unmasked image.
    let text_masked = m.encode_text(s, &masked.masked_text)?;
    let fused_text = m.fused_text(s, vision, text_masked)?;
    floor.add(tape, &fused_text, gamma)?;
    let t_len = tape.shape(fused_text.mu)[1];
    let targets = MaskTargets::new(&masked.mask_positions, &masked.labels, t_len, 1)?;
    let mlm_phi = |x: Var| m.mlm_logits(s, x);
    let dmlm = dmlm_loss(tape, &fused_text, &targets, &mlm_phi, cfg.loss.k, noise_rng)?;

    // D-ITM: half of the rows re-paired.
    let mut v_itm = vision;
    v_itm.hidden = select_sequences(tape, vision.hidden, &pairs.vision_idx)?;
    let mut t_itm = text;
    t_itm.hidden = select_sequences(tape, text.hidden, &pairs.text_idx)?;
    let (fv, ft) = m.fused(s, v_itm, t_itm)?;
    floor.add(tape, &fv, gamma)?;
    floor.add(tape, &ft, gamma)?;
    let itm_phi = |x: Var| m.itm_logits(s, x);
    let ditm = ditm_loss(
        tape,
        &cls_rows(s, &fv)?,
        &cls_rows(s, &ft)?,
        &pairs.labels,
        &itm_phi,
        cfg.loss.k,
        noise_rng,
    )?;

    // D-VLC: unimodal distributions before fusion.
    let (uv, ut) = m.unimodal(s, vision, text)?;
    floor.add(tape, &uv, gamma)?;
    floor.add(tape, &ut, gamma)?;
    let dvlc = dvlc_loss(tape, &cls_rows(s, &uv)?, &cls_rows(s, &ut)?, &cfg.loss, s.param(m.log_tau))?;

    let reg = floor.loss(tape)?;
    let mut total = tape.add(tape.add(dmlm, ditm)?, dvlc)?;
    if cfg.reg_in_graph {
        total = tape.add(total, tape.scale(reg, cfg.loss.alpha)?)?;
    }
    Ok(StepLosses {
        dmlm,
        ditm,
        dvlc,
        reg,
        total,
        mean_entropy: floor.entropy_sum / floor.tokens as f64,
    })
}

/// One optimization step of the full objective on `batch`. Masking,
/// re-pairing and sampling noise are drawn from streams keyed by
/// `(seed, step)`.
pub fn pretrain_step(
    model: &mut Model,
    batch: &[&PairedExample],
    cfg: &StepConfig,
    seed: u64,
    step: u64,
) -> Result<MetricsRecord> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be at least 2, got {}", batch.len())));
    }
    cfg.loss.validate()?;
    let inputs = StepInputs::draw(model, batch, &cfg.mask, seed, step)?;
    let mut noise_rng = SeededRng::derived(seed, streams::NOISE, step);
    let tape = Tape::new();
    let (mut rec, grads) = {
        let s = Session::train(&tape, &model.store);
        let l = step_losses(&s, model, &inputs, cfg, &mut noise_rng)?;
        tape.backward(l.total)?;
        let rec = MetricsRecord {
            step,
            loss_total: tape.item(l.total),
            loss_dmlm: tape.item(l.dmlm),
            loss_ditm: tape.item(l.ditm),
            loss_dvlc: tape.item(l.dvlc),
            loss_reg: tape.item(l.reg),
            mean_entropy: l.mean_entropy,
            tau: 0.0,
        };
        (rec, s.grads())
    };
    apply_update(model, grads, cfg)?;
    rec.tau = model.tau();
    Ok(rec)
}

/// Evaluates the objective without updating parameters. The recorded
/// temperature is the current one.
pub fn eval_step(model: &Model, batch: &[&PairedExample], cfg: &StepConfig, seed: u64, step: u64) -> Result<MetricsRecord> {
    let inputs = StepInputs::draw(model, batch, &cfg.mask, seed, step)?;
    let mut noise_rng = SeededRng::derived(seed, streams::NOISE, step);
    let tape = Tape::new();
    let s = Session::eval(&tape, &model.store);
    let l = step_losses(&s, model, &inputs, cfg, &mut noise_rng)?;
    Ok(MetricsRecord {
        step,
        loss_total: tape.item(l.total),
        loss_dmlm: tape.item(l.dmlm),
        loss_ditm: tape.item(l.ditm),
        loss_dvlc: tape.item(l.dvlc),
        loss_reg: tape.item(l.reg),
        mean_entropy: l.mean_entropy,
        tau: model.tau(),
    })
}

/// Installs fresh gradients (zeros for untouched parameters) and takes one
/// AdamW step with per-group rates. Matrices are decayed; vectors, scalars
/// and the temperature are not.
pub fn apply_update(model: &mut Model, grads: Vec<(ParamId, Tensor)>, cfg: &StepConfig) -> Result<()> {
    model.store.zero_grads();
    for (id, g) in grads {
        model.store.get_mut(id).grad = Some(g);
    }
    let base = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    adamw_step(model.store.iter_mut().map(|p| {
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.tensor.shape().to_vec()));
        }
        let opt = AdamW {
            lr: cfg.lr.get(Model::group_of(&p.name)) * cfg.lr_scale,
            weight_decay: if p.tensor.shape().len() >= 2 { base.weight_decay } else { 0.0 },
            ..base
        };
        (p, opt)
    }))
}
