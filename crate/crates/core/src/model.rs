//! The full network: toy encoders, unimodal and post-fusion PDEs, the
//! cross-modal stack and the pre-training heads.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fusion::{EncoderConfig, FusionStack, Modality, ModalityStream, ToyEncoder};
use crate::gaussian::DiagGaussianSeq;
use crate::nn::{Linear, Session};
use crate::param::{ParamId, ParamStore};
use crate::pde::{Act, Pde, PdeConfig};
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// PDE heads `k` per path.
    pub pde_heads: usize,
    #[serde(default)]
    pub pde_act: Act,
    pub pde_ffn_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                model_dim: 64,
                attn_heads: 4,
                layers: 2,
                encoder_layers: 2,
                ffn_hidden: 128,
                vision_vocab: 256,
                text_vocab: 256,
                vision_len: 12,
                text_len: 10,
            },
            pde_heads: 2,
            pde_act: Act::Softmax,
            pde_ffn_hidden: 128,
        }
    }

    /// Full-width settings: D = 768, 12 attention heads, 6 cross-modal
    /// layers, 6 PDE heads. Vocabularies and lengths follow the synthetic
    /// corpus, with 576 vision positions (a 24 x 24 patch grid).
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig {
                model_dim: 768,
                attn_heads: 12,
                layers: 6,
                encoder_layers: 2,
                ffn_hidden: 3072,
                vision_vocab: 256,
                text_vocab: 256,
                vision_len: 576,
                text_len: 50,
            },
            pde_heads: 6,
            pde_act: Act::Softmax,
            pde_ffn_hidden: 3072,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.encoder.model_dim
    }

    pub fn pde_config(&self) -> PdeConfig {
        PdeConfig {
            model_dim: self.encoder.model_dim,
            heads: self.pde_heads,
            act: self.pde_act,
            ffn_hidden: self.pde_ffn_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pde_config().validate()
    }

    /// Id of the `[MASK]` text token, just past the content vocabulary.
    pub fn mask_id(&self) -> usize {
        self.encoder.text_vocab
    }
}

/// Learning-rate groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoders,
    Fusion,
    Pde,
    Heads,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vision_encoder: ToyEncoder,
    pub text_encoder: ToyEncoder,
    pub vision_pde: Pde,
    pub text_pde: Pde,
    pub fusion: FusionStack,
    pub fused_pde: Pde,
    pub mlm_head: Linear,
    pub itm_head: Linear,
    pub log_tau: ParamId,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, log_tau_init: f64) -> Result<Self> {
        cfg.validate()?;
        if !log_tau_init.is_finite() {
            return Err(Error::Config("log_tau initial value must be finite".into()));
        }
        let mut rng = SeededRng::new(seed, streams::INIT);
        let mut store = ParamStore::new();
        let e = &cfg.encoder;
        let d = e.model_dim;
        let vision_encoder =
            ToyEncoder::new(&mut store, "vision_enc", Modality::Vision, e.vision_vocab, e.vision_len, e, &mut rng)?;
        // One extra input id for [MASK].
        let text_encoder =
            ToyEncoder::new(&mut store, "text_enc", Modality::Text, e.text_vocab + 1, e.text_len, e, &mut rng)?;
        let vision_pde = Pde::new(&mut store, "pde_vision", cfg.pde_config(), &mut rng)?;
        let text_pde = Pde::new(&mut store, "pde_text", cfg.pde_config(), &mut rng)?;
        let fusion = FusionStack::new(&mut store, "fusion", e, &mut rng)?;
        let fused_pde = Pde::new(&mut store, "pde_fused", cfg.pde_config(), &mut rng)?;
        let mlm_head = Linear::new(&mut store, "mlm_head", d, e.text_vocab, true, &mut rng)?;
        let itm_head = Linear::new(&mut store, "itm_head", 2 * d, 2, true, &mut rng)?;
        let log_tau = store.add("log_tau", Tensor::scalar(log_tau_init))?;
        Ok(Self {
            cfg,
            store,
            vision_encoder,
            text_encoder,
            vision_pde,
            text_pde,
            fusion,
            fused_pde,
            mlm_head,
            itm_head,
            log_tau,
        })
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("vision_enc") || name.starts_with("text_enc") {
            ParamGroup::Encoders
        } else if name.starts_with("fusion") {
            ParamGroup::Fusion
        } else if name.starts_with("pde_") {
            ParamGroup::Pde
        } else {
            ParamGroup::Heads
        }
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).tensor.item().exp()
    }

    pub fn encode_vision<S: AsRef<[usize]>>(&self, s: &Session, batch: &[S]) -> Result<ModalityStream> {
        self.vision_encoder.forward(s, batch)
    }

    pub fn encode_text<S: AsRef<[usize]>>(&self, s: &Session, batch: &[S]) -> Result<ModalityStream> {
        self.text_encoder.forward(s, batch)
    }

    /// Unimodal distributions for every token of each stream.
    pub fn unimodal(
        &self,
        s: &Session,
        vision: ModalityStream,
        text: ModalityStream,
    ) -> Result<(DiagGaussianSeq, DiagGaussianSeq)> {
        Ok((
            self.vision_pde.forward(s, vision.hidden)?,
            self.text_pde.forward(s, text.hidden)?,
        ))
    }

    /// Runs the cross-modal stack and the post-fusion PDE on both streams.
    pub fn fused(
        &self,
        s: &Session,
        vision: ModalityStream,
        text: ModalityStream,
    ) -> Result<(DiagGaussianSeq, DiagGaussianSeq)> {
        let (v, t) = self.fusion.forward(s, vision, text)?;
        Ok((self.fused_pde.forward(s, v.hidden)?, self.fused_pde.forward(s, t.hidden)?))
    }

    /// Cross-modal stack with the post-fusion PDE applied to the text stream
    /// only.
    pub fn fused_text(&self, s: &Session, vision: ModalityStream, text: ModalityStream) -> Result<DiagGaussianSeq> {
        let (_, t) = self.fusion.forward(s, vision, text)?;
        self.fused_pde.forward(s, t.hidden)
    }

    /// Applies the MLM classifier to `[.., D]` features, returning logits.
    pub fn mlm_logits(&self, s: &Session, x: Var) -> Result<Var> {
        self.mlm_head.forward(s, x)
    }

    /// Applies the matching classifier to `[.., 2D]` features.
    pub fn itm_logits(&self, s: &Session, x: Var) -> Result<Var> {
        self.itm_head.forward(s, x)
    }
}

/// `[CLS]` rows of a `[B, T, D]` distribution sequence, as `[B, D]`.
pub fn cls_rows(s: &Session, g: &DiagGaussianSeq) -> Result<DiagGaussianSeq> {
    let shape = s.tape.shape(g.mu);
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "cls_rows",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    }
    let idx: Vec<usize> = (0..shape[0]).map(|b| b * shape[1]).collect();
    g.rows(s.tape, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        let p = ModelConfig::full();
        p.validate().unwrap();
        assert_eq!(p.pde_config().head_dim(), 64);
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn groups_cover_every_parameter() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.model_dim = 8;
        cfg.encoder.attn_heads = 2;
        cfg.encoder.ffn_hidden = 8;
        cfg.pde_ffn_hidden = 8;
        let m = Model::new(cfg, 1, 0.07f64.ln()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in m.store.iter() {
            seen.insert(Model::group_of(&p.name));
        }
        assert_eq!(seen.len(), 4);
        assert_eq!(Model::group_of("log_tau"), ParamGroup::Heads);
        assert!((m.tau() - 0.07).abs() < 1e-15);
    }
}
