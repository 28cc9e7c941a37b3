//! 95% confidence ellipses from a 2-D distribution head.
//!
//! The head projects frozen unimodal encoder states to two dimensions and
//! runs its own PDE there, trained with the contrastive loss and entropy
//! floor on the exported items. Every item then yields one axis-aligned
//! ellipse per modality.

use super::config::EllipseSettings;
use crate::autograd::{Tape, Var};
use crate::data::{make_batches, PairedExample};
use crate::error::{Error, Result};
use crate::gaussian::{entropy_floor_loss, DiagGaussianSeq};
use crate::model::{cls_rows, Model};
use crate::nn::{Linear, Session};
use crate::objectives::{dvlc_loss, LossConfig};
use crate::param::{step_with, AdamW, ParamId, ParamStore};
use crate::pde::{Act, Pde, PdeConfig};
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;
use serde::Serialize;
use std::io::Write;

/// `sqrt(q)` for the 0.95 quantile `q = -2 ln 0.05` of chi-squared with two
/// degrees of freedom.
pub fn chi2_2_scale(confidence: f64) -> f64 {
    (-2.0 * (1.0 - confidence).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipseRecord {
    pub id: usize,
    pub modality: &'static str,
    pub label: usize,
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

pub struct VizHead {
    pub store: ParamStore,
    pub dim: usize,
    pub proj_vision: Linear,
    pub proj_text: Linear,
    pub pde: Pde,
    pub log_tau: ParamId,
}

impl VizHead {
    pub fn new(model_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed, streams::VIZ);
        let mut store = ParamStore::new();
        let proj_vision = Linear::new(&mut store, "viz.proj_vision", model_dim, dim, true, &mut rng)?;
        let proj_text = Linear::new(&mut store, "viz.proj_text", model_dim, dim, true, &mut rng)?;
        // Unit-scale projections so the 2-D plane starts spread out.
        for id in [proj_vision.weight, proj_text.weight] {
            let p = store.get_mut(id);
            p.tensor = p.tensor.map(|v| v * 50.0 / (model_dim as f64).sqrt());
        }
        let pde_cfg = PdeConfig {
            model_dim: dim,
            heads: 1,
            act: Act::Softmax,
            ffn_hidden: 8,
        };
        let pde = Pde::new(&mut store, "viz.pde", pde_cfg, &mut rng)?;
        let log_tau = store.add("viz.log_tau", Tensor::scalar(0.0))?;
        Ok(Self {
            store,
            dim,
            proj_vision,
            proj_text,
            pde,
            log_tau,
        })
    }

    fn forward(&self, s: &Session, vision: Var, text: Var) -> Result<(DiagGaussianSeq, DiagGaussianSeq)> {
        let v = self.pde.forward(s, self.proj_vision.forward(s, vision)?)?;
        let t = self.pde.forward(s, self.proj_text.forward(s, text)?)?;
        Ok((v, t))
    }
}

/// Frozen encoder states `[N, T, D]` for the items.
fn trunk_features(model: &Model, items: &[PairedExample]) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let s = Session::eval(&tape, &model.store);
    let v: Vec<&[usize]> = items.iter().map(|x| x.vision_tokens.as_slice()).collect();
    let t: Vec<&[usize]> = items.iter().map(|x| x.text_tokens.as_slice()).collect();
    let hv = model.encode_vision(&s, &v)?.hidden;
    let ht = model.encode_text(&s, &t)?.hidden;
    let out = (tape.value(hv).clone(), tape.value(ht).clone());
    Ok(out)
}

fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let per = s[1] * s[2];
    let data: Vec<f64> = idx.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect();
    Tensor::new(vec![idx.len(), s[1], s[2]], data)
}

/// Fits a fresh head on `items` and returns it.
pub fn fit_head(model: &Model, items: &[PairedExample], cfg: &EllipseSettings, seed: u64) -> Result<VizHead> {
    let mut head = VizHead::new(model.cfg.model_dim(), cfg.dim, seed)?;
    let (fv, ft) = trunk_features(model, items)?;
    let loss = LossConfig {
        a: cfg.a,
        b: 0.0,
        alpha: cfg.alpha,
        gamma: cfg.gamma.unwrap_or_else(|| LossConfig::toy_gamma(cfg.dim)),
        k: 0,
        log_tau_init: 0.0,
    };
    let batch = cfg.batch_size.min(items.len());
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let mut rng = SeededRng::derived(seed, streams::VIZ, epoch + 1);
        for idx in make_batches(items.len(), batch, &mut rng)? {
            if step >= cfg.steps {
                break;
            }
            let tape = Tape::new();
            let grads = {
                let s = Session::train(&tape, &head.store);
                let v = tape.constant(select(&fv, &idx)?);
                let t = tape.constant(select(&ft, &idx)?);
                let (gv, gt) = head.forward(&s, v, t)?;
                let contrast = dvlc_loss(&tape, &cls_rows(&s, &gv)?, &cls_rows(&s, &gt)?, &loss, s.param(head.log_tau))?;
                let reg = tape.add(entropy_floor_loss(&tape, &gv, loss.gamma)?, entropy_floor_loss(&tape, &gt, loss.gamma)?)?;
                let total = tape.add(contrast, tape.scale(reg, 0.5 * loss.alpha)?)?;
                tape.backward(total)?;
                s.grads()
            };
            step_with(
                &mut head.store,
                grads,
                AdamW {
                    lr: cfg.lr,
                    weight_decay: 0.0,
                    ..AdamW::default()
                },
            )?;
            step += 1;
        }
        epoch += 1;
    }
    Ok(head)
}

/// One record per item per modality, vision first.
pub fn export_records(model: &Model, head: &VizHead, items: &[PairedExample]) -> Result<Vec<EllipseRecord>> {
    if head.dim != 2 {
        return Err(Error::InvalidArgument(format!(
            "ellipse export needs a 2-dimensional head, got {}",
            head.dim
        )));
    }
    let (fv, ft) = trunk_features(model, items)?;
    let tape = Tape::new();
    let s = Session::eval(&tape, &head.store);
    let (gv, gt) = head.forward(&s, tape.constant(fv), tape.constant(ft))?;
    let scale = chi2_2_scale(0.95);
    let mut out = Vec::with_capacity(2 * items.len());
    for (modality, g) in [("vision", gv), ("text", gt)] {
        for (i, tok) in cls_rows(&s, &g)?.to_tokens(&tape).into_iter().enumerate() {
            let sigma = tok.sigma();
            out.push(EllipseRecord {
                id: i,
                modality,
                label: items[i].concept_id,
                cx: tok.mu[0],
                cy: tok.mu[1],
                ax: sigma[0] * scale,
                ay: sigma[1] * scale,
            });
        }
    }
    out.sort_by_key(|r| (r.id, r.modality != "vision"));
    Ok(out)
}

pub fn write_csv(w: impl Write, records: &[EllipseRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

/// A standalone SVG drawing; vision ellipses solid, text ellipses dashed,
/// hue by label.
pub fn write_svg(mut w: impl Write, records: &[EllipseRecord], labels: usize) -> Result<()> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in records {
        x0 = x0.min(r.cx - r.ax);
        x1 = x1.max(r.cx + r.ax);
        y0 = y0.min(r.cy - r.ay);
        y1 = y1.max(r.cy + r.ay);
    }
    let size = 800.0;
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let k = size / span;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#)?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    for r in records {
        let hue = 360.0 * r.label as f64 / labels.max(1) as f64;
        let dash = if r.modality == "text" { r#" stroke-dasharray="4 3""# } else { "" };
        writeln!(
            w,
            r#"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" fill="hsl({hue:.0},70%,50%)" fill-opacity="0.08" stroke="hsl({hue:.0},70%,40%)"{dash}/>"#,
            (r.cx - x0) * k,
            size - (r.cy - y0) * k,
            r.ax * k,
            r.ay * k,
        )?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}
