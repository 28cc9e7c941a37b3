//! Toy unimodal encoders and the dual-stream cross-modal transformer.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Session, TraceEvent};
use crate::param::{ParamId, ParamStore};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        }
    }
}

/// A batch of token sequences `[B, T, D]`; position 0 is `[CLS]`.
#[derive(Debug, Clone, Copy)]
pub struct ModalityStream {
    pub hidden: Var,
    pub modality: Modality,
}

impl ModalityStream {
    pub const CLS_INDEX: usize = 0;
}

/// Multi-head attention with full-width projections `W_Q, W_K, W_V, W_O`.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub name: String,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {dim} is not divisible by {heads} attention heads"
            )));
        }
        let mut w = |p: &str| store.add_normal(format!("{name}.{p}"), &[dim, dim], rng);
        Ok(Self {
            wq: w("wq")?,
            wk: w("wk")?,
            wv: w("wv")?,
            wo: w("wo")?,
            heads,
            name: name.to_string(),
        })
    }

    /// Queries come from `q_src: [.., T, D]`, keys and values from
    /// `kv_src: [.., T', D]`.
    pub fn forward(&self, s: &Session, q_src: Var, kv_src: Var) -> Result<Var> {
        let t = s.tape;
        let (sq, skv) = (t.shape(q_src), t.shape(kv_src));
        if sq.len() != skv.len()
            || sq.last() != skv.last()
            || sq[..sq.len() - 2] != skv[..skv.len() - 2]
        {
            return Err(Error::ShapeMismatch {
                op: "mha",
                lhs: sq,
                rhs: skv,
            });
        }
        let q = t.split_last(t.matmul(q_src, s.param(self.wq))?, self.heads)?;
        let k = t.split_last(t.matmul(kv_src, s.param(self.wk))?, self.heads)?;
        let v = t.split_last(t.matmul(kv_src, s.param(self.wv))?, self.heads)?;
        let dk = (sq[sq.len() - 1] / self.heads) as f64;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let scores = t.scale(t.matmul(q[h], t.transpose(k[h])?)?, 1.0 / dk.sqrt())?;
            let w = t.softmax_rows(scores)?;
            if s.is_tracing() {
                s.record(|| TraceEvent::Attention {
                    site: format!("{}.head{h}", self.name),
                    weights: t.value(w).clone(),
                });
            }
            outs.push(t.matmul(w, v[h])?);
        }
        t.matmul(t.concat_last(&outs)?, s.param(self.wo))
    }
}

/// Pre-normalized self-attention block: attention then feed-forward, each
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: Mha,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: Mha::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_hidden, rng)?,
        })
    }

    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let t = s.tape;
        let n = self.ln_attn.forward(s, x)?;
        let x = t.add(x, self.attn.forward(s, n, n)?)?;
        let f = self.ffn.forward(s, self.ln_ffn.forward(s, x)?)?;
        t.add(x, f)
    }
}

/// One modality's half of a cross-modal layer.
#[derive(Debug, Clone)]
pub struct StreamBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Mha,
    pub ln_cross_q: LayerNorm,
    pub ln_cross_kv: LayerNorm,
    pub cross_attn: Mha,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl StreamBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (d, h) = (cfg.model_dim, cfg.attn_heads);
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d)?,
            self_attn: Mha::new(store, &format!("{name}.self_attn"), d, h, rng)?,
            ln_cross_q: LayerNorm::new(store, &format!("{name}.ln_cross_q"), d)?,
            ln_cross_kv: LayerNorm::new(store, &format!("{name}.ln_cross_kv"), d)?,
            cross_attn: Mha::new(store, &format!("{name}.cross_attn"), d, h, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, rng)?,
        })
    }

    fn self_attend(&self, s: &Session, x: Var) -> Result<Var> {
        let n = self.ln_self.forward(s, x)?;
        s.tape.add(x, self.self_attn.forward(s, n, n)?)
    }

    fn cross_attend(&self, s: &Session, x: Var, other: Var) -> Result<Var> {
        let q = self.ln_cross_q.forward(s, x)?;
        let kv = self.ln_cross_kv.forward(s, other)?;
        s.tape.add(x, self.cross_attn.forward(s, q, kv)?)
    }

    fn feed_forward(&self, s: &Session, x: Var) -> Result<Var> {
        let f = self.ffn.forward(s, self.ln_ffn.forward(s, x)?)?;
        s.tape.add(x, f)
    }

    /// The same weights arranged as a plain self-attention block, i.e. this
    /// stream with the cross-attention sublayer removed.
    pub fn without_cross_attention(&self) -> EncoderBlock {
        EncoderBlock {
            ln_attn: self.ln_self.clone(),
            attn: self.self_attn.clone(),
            ln_ffn: self.ln_ffn.clone(),
            ffn: self.ffn.clone(),
        }
    }
}

/// Two self-attention and two cross-attention blocks:
///
/// ```text
/// I' = SA(I, I, I)      T' = SA(T, T, T)
/// I_out = CA(I', T', T') T_out = CA(T', I', I')
/// ```
///
/// followed by a feed-forward sublayer on each stream.
#[derive(Debug, Clone)]
pub struct CrossModalLayer {
    pub vision: StreamBlock,
    pub text: StreamBlock,
    pub index: usize,
}

impl CrossModalLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        index: usize,
        cfg: &EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            vision: StreamBlock::new(store, &format!("{name}.vision"), cfg, rng)?,
            text: StreamBlock::new(store, &format!("{name}.text"), cfg, rng)?,
            index,
        })
    }

    pub fn forward(
        &self,
        s: &Session,
        vision: ModalityStream,
        text: ModalityStream,
    ) -> Result<(ModalityStream, ModalityStream)> {
        let (dv, dt) = (s.tape.value(vision.hidden).last_dim(), s.tape.value(text.hidden).last_dim());
        if dv != dt {
            return Err(Error::ShapeMismatch {
                op: "cross_modal_layer",
                lhs: s.tape.shape(vision.hidden),
                rhs: s.tape.shape(text.hidden),
            });
        }
        s.record(|| TraceEvent::CrossModalLayer { index: self.index });
        let i1 = self.vision.self_attend(s, vision.hidden)?;
        let t1 = self.text.self_attend(s, text.hidden)?;
        let i2 = self.vision.cross_attend(s, i1, t1)?;
        let t2 = self.text.cross_attend(s, t1, i1)?;
        Ok((
            ModalityStream {
                hidden: self.vision.feed_forward(s, i2)?,
                modality: vision.modality,
            },
            ModalityStream {
                hidden: self.text.feed_forward(s, t2)?,
                modality: text.modality,
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub attn_heads: usize,
    /// Cross-modal layers `N_L`.
    pub layers: usize,
    /// Self-attention layers inside each toy encoder.
    pub encoder_layers: usize,
    pub ffn_hidden: usize,
    pub vision_vocab: usize,
    pub text_vocab: usize,
    pub vision_len: usize,
    pub text_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.model_dim,
            self.attn_heads,
            self.layers,
            self.ffn_hidden,
            self.vision_vocab,
            self.text_vocab,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by attn_heads {}",
                self.model_dim, self.attn_heads
            )));
        }
        Ok(())
    }
}

/// Stand-in feature extractor: token and positional embeddings, a learned
/// `[CLS]` prepended at position 0, self-attention blocks and a final norm.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub modality: Modality,
    /// `[input_vocab + 1, D]`; the last row is the `[CLS]` embedding.
    pub embed: ParamId,
    /// `[max_len + 1, D]`.
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
    pub input_vocab: usize,
    pub max_len: usize,
}

impl ToyEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modality: Modality,
        input_vocab: usize,
        max_len: usize,
        cfg: &EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let embed = store.add_normal(format!("{name}.embed"), &[input_vocab + 1, d], rng)?;
        let pos = store.add_normal(format!("{name}.pos"), &[max_len + 1, d], rng)?;
        let blocks = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderBlock::new(store, &format!("{name}.block{i}"), d, cfg.attn_heads, cfg.ffn_hidden, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modality,
            embed,
            pos,
            blocks,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), d)?,
            input_vocab,
            max_len,
        })
    }

    pub fn cls_id(&self) -> usize {
        self.input_vocab
    }

    /// Encodes a batch of equal-length token sequences.
    pub fn forward<S: AsRef<[usize]>>(&self, s: &Session, batch: &[S]) -> Result<ModalityStream> {
        let t = s.tape;
        let len = batch.first().map(|b| b.as_ref().len()).ok_or_else(|| {
            Error::InvalidArgument("toy_encoder: empty batch".into())
        })?;
        if len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "toy_encoder: sequence length {len} exceeds maximum {}",
                self.max_len
            )));
        }
        let mut ids = Vec::with_capacity(batch.len() * (len + 1));
        for seq in batch {
            let seq = seq.as_ref();
            if seq.len() != len {
                return Err(Error::InvalidArgument("toy_encoder: ragged batch".into()));
            }
            ids.push(self.cls_id());
            for &id in seq {
                if id >= self.input_vocab {
                    return Err(Error::OutOfVocab {
                        id,
                        vocab: self.input_vocab,
                    });
                }
                ids.push(id);
            }
        }
        let d = t.value(s.param(self.embed)).last_dim();
        let x = t.index_rows(s.param(self.embed), &ids)?;
        let x = t.reshape(x, &[batch.len(), len + 1, d])?;
        let pos: Vec<usize> = (0..=len).collect();
        let mut x = t.add(x, t.index_rows(s.param(self.pos), &pos)?)?;
        for block in &self.blocks {
            x = block.forward(s, x)?;
        }
        Ok(ModalityStream {
            hidden: self.final_ln.forward(s, x)?,
            modality: self.modality,
        })
    }
}

/// `N_L` cross-modal layers with a final norm per stream.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub layers: Vec<CrossModalLayer>,
    pub final_ln_vision: LayerNorm,
    pub final_ln_text: LayerNorm,
}

impl FusionStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| CrossModalLayer::new(store, &format!("{name}.layer{i}"), i, cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_ln_vision: LayerNorm::new(store, &format!("{name}.final_ln_vision"), cfg.model_dim)?,
            final_ln_text: LayerNorm::new(store, &format!("{name}.final_ln_text"), cfg.model_dim)?,
        })
    }

    pub fn forward(
        &self,
        s: &Session,
        mut vision: ModalityStream,
        mut text: ModalityStream,
    ) -> Result<(ModalityStream, ModalityStream)> {
        for layer in &self.layers {
            (vision, text) = layer.forward(s, vision, text)?;
        }
        vision.hidden = self.final_ln_vision.forward(s, vision.hidden)?;
        text.hidden = self.final_ln_text.forward(s, text.hidden)?;
        Ok((vision, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            model_dim: 8,
            attn_heads: 2,
            layers: 2,
            encoder_layers: 2,
            ffn_hidden: 12,
            vision_vocab: 10,
            text_vocab: 10,
            vision_len: 5,
            text_len: 5,
        }
    }

    fn rand_input(tape: &Tape, rng: &mut SeededRng, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        tape.constant(Tensor::new(shape.to_vec(), rng.normals(n)).unwrap())
    }

    /// Scales every parameter so attention patterns are far from uniform.
    fn sharpen(store: &mut ParamStore) {
        for p in store.iter_mut() {
            if p.name.ends_with(".gain") {
                continue;
            }
            p.tensor = p.tensor.map(|v| v * 25.0);
        }
    }

    /// Straight-line multi-head attention over nested vectors.
    fn mha_oracle(q: &Tensor, kv: &Tensor, w: [&Tensor; 4], heads: usize) -> Vec<Vec<f64>> {
        let d = q.last_dim();
        let dk = d / heads;
        let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|r| (0..d).map(|c| (0..d).map(|i| x.row(r)[i] * w.row(i)[c]).sum()).collect())
                .collect()
        };
        let (qp, kp, vp) = (proj(q, w[0]), proj(kv, w[1]), proj(kv, w[2]));
        let mut cat = vec![vec![0.0; d]; q.rows()];
        for h in 0..heads {
            for (i, row) in cat.iter_mut().enumerate() {
                let scores: Vec<f64> = (0..kv.rows())
                    .map(|j| (0..dk).map(|c| qp[i][h * dk + c] * kp[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dk {
                    row[h * dk + c] = (0..kv.rows()).map(|j| e[j] / z * vp[j][h * dk + c]).sum();
                }
            }
        }
        cat.iter()
            .map(|r| (0..d).map(|c| (0..d).map(|i| r[i] * w[3].row(i)[c]).sum()).collect())
            .collect()
    }

    #[test]
    fn mha_matches_straight_line_reference() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(9, 0);
        let mha = Mha::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        sharpen(&mut store);
        let tape = Tape::new();
        let q = rand_input(&tape, &mut rng, &[2, 4]);
        let kv = rand_input(&tape, &mut rng, &[3, 4]);
        let s = Session::eval(&tape, &store);
        let out = tape.value(mha.forward(&s, q, kv).unwrap()).clone();
        let w = [mha.wq, mha.wk, mha.wv, mha.wo].map(|id| &store.get(id).tensor);
        let expect = mha_oracle(&tape.value(q), &tape.value(kv), w, 2);
        for (r, row) in expect.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((out.row(r)[c] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_single_key_ignores_scores() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(10, 0);
        let mha = Mha::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let q = rand_input(&tape, &mut rng, &[3, 4]);
        let kv = rand_input(&tape, &mut rng, &[1, 4]);
        let out = tape.value(mha.forward(&s, q, kv).unwrap()).clone();
        let v = tape.matmul(tape.matmul(kv, s.param(mha.wv)).unwrap(), s.param(mha.wo)).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.row(r)[c] - tape.value(v).row(0)[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mha_shape_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(10, 0);
        let mha = Mha::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let q = rand_input(&tape, &mut rng, &[3, 4]);
        let kv = rand_input(&tape, &mut rng, &[2, 6]);
        assert!(mha.forward(&s, q, kv).is_err());
    }

    #[test]
    fn symmetric_weights_give_identical_streams() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(11, 0);
        let layer = CrossModalLayer::new(&mut store, "x", 0, &c, &mut rng).unwrap();
        // Copy every vision weight onto its text counterpart.
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).filter(|n| n.contains(".vision.")).collect();
        for n in names {
            let v = store.by_name(&n).unwrap().tensor.clone();
            store.by_name_mut(&n.replace(".vision.", ".text.")).unwrap().tensor = v;
        }
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let x = rand_input(&tape, &mut rng, &[2, 4, 8]);
        let (vo, to) = layer
            .forward(
                &s,
                ModalityStream { hidden: x, modality: Modality::Vision },
                ModalityStream { hidden: x, modality: Modality::Text },
            )
            .unwrap();
        assert_eq!(*tape.value(vo.hidden), *tape.value(to.hidden));
    }

    #[test]
    fn zeroed_cross_projection_reduces_to_self_attention() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(12, 0);
        let layer = CrossModalLayer::new(&mut store, "x", 0, &c, &mut rng).unwrap();
        sharpen(&mut store);
        for id in [layer.vision.cross_attn.wo, layer.text.cross_attn.wo] {
            let p = store.get_mut(id);
            p.tensor = p.tensor.map(|_| 0.0);
        }
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let iv = rand_input(&tape, &mut rng, &[2, 5, 8]);
        let it = rand_input(&tape, &mut rng, &[2, 3, 8]);
        let (vo, to) = layer
            .forward(
                &s,
                ModalityStream { hidden: iv, modality: Modality::Vision },
                ModalityStream { hidden: it, modality: Modality::Text },
            )
            .unwrap();
        let vref = layer.vision.without_cross_attention().forward(&s, iv).unwrap();
        let tref = layer.text.without_cross_attention().forward(&s, it).unwrap();
        assert!(tape.value(vo.hidden).max_abs_diff(&tape.value(vref)) < 1e-12);
        assert!(tape.value(to.hidden).max_abs_diff(&tape.value(tref)) < 1e-12);
        assert_eq!(tape.shape(vo.hidden), vec![2, 5, 8]);
        assert_eq!(tape.shape(to.hidden), vec![2, 3, 8]);
    }

    #[test]
    fn toy_encoder_contract() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(13, 0);
        let enc = ToyEncoder::new(&mut store, "enc", Modality::Text, 11, 5, &c, &mut rng).unwrap();
        sharpen(&mut store);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let empty: Vec<Vec<usize>> = vec![vec![]];
        let cls_only = enc.forward(&s, &empty).unwrap();
        assert_eq!(tape.shape(cls_only.hidden), vec![1, 1, 8]);

        let a = enc.forward(&s, &[vec![1, 2, 3, 4]]).unwrap();
        let b = enc.forward(&s, &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(*tape.value(a.hidden), *tape.value(b.hidden));
        let p = enc.forward(&s, &[vec![4, 3, 2, 1]]).unwrap();
        assert!(tape.value(a.hidden).max_abs_diff(&tape.value(p.hidden)) > 1e-6);

        assert!(matches!(
            enc.forward(&s, &[vec![11]]),
            Err(Error::OutOfVocab { id: 11, vocab: 11 })
        ));
        assert!(enc.forward(&s, &[vec![0; 6]]).is_err());
    }

    #[test]
    fn stack_applies_each_layer_once_and_rows_normalize() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(14, 0);
        let stack = FusionStack::new(&mut store, "fusion", &c, &mut rng).unwrap();
        sharpen(&mut store);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store).traced();
        let iv = rand_input(&tape, &mut rng, &[2, 5, 8]);
        let it = rand_input(&tape, &mut rng, &[2, 3, 8]);
        stack
            .forward(
                &s,
                ModalityStream { hidden: iv, modality: Modality::Vision },
                ModalityStream { hidden: it, modality: Modality::Text },
            )
            .unwrap();
        let trace = s.take_trace();
        let layers: Vec<usize> = trace
            .iter()
            .filter_map(|e| match e {
                TraceEvent::CrossModalLayer { index } => Some(*index),
                _ => None,
            })
            .collect();
        assert_eq!(layers, vec![0, 1]);
        let mut sites = 0;
        for e in &trace {
            if let TraceEvent::Attention { weights, .. } = e {
                sites += 1;
                for r in 0..weights.rows() {
                    let sum: f64 = weights.row(r).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-6);
                }
            }
        }
        // 2 layers x 2 streams x (self + cross) x 2 heads
        assert_eq!(sites, 16);
    }
}
