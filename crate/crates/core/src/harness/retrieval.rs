//! Cross-modal retrieval with the Wasserstein similarity over unimodal
//! `[CLS]` distributions.

use crate::autograd::Tape;
use crate::data::PairedExample;
use crate::error::{Error, Result};
use crate::gaussian::GaussianToken;
use crate::model::{cls_rows, Model};
use crate::nn::Session;
use crate::objectives::{similarity_values, LossConfig};
use serde::ser::{Serialize, SerializeMap, Serializer};
use std::ops::Index;

const CHUNK: usize = 64;

/// Unimodal `[CLS]` distributions of every example, in order.
pub fn cls_distributions(model: &Model, examples: &[PairedExample]) -> Result<(Vec<GaussianToken>, Vec<GaussianToken>)> {
    let e = &model.cfg.encoder;
    let (mut vis, mut txt) = (Vec::with_capacity(examples.len()), Vec::with_capacity(examples.len()));
    for chunk in examples.chunks(CHUNK) {
        for x in chunk {
            if x.vision_tokens.len() > e.vision_len || x.text_tokens.len() > e.text_len {
                return Err(Error::InvalidArgument("example is longer than the model accepts".into()));
            }
            if let Some(&id) = x.vision_tokens.iter().find(|&&t| t >= e.vision_vocab) {
                return Err(Error::OutOfVocab { id, vocab: e.vision_vocab });
            }
            if let Some(&id) = x.text_tokens.iter().find(|&&t| t >= e.text_vocab) {
                return Err(Error::OutOfVocab { id, vocab: e.text_vocab });
            }
        }
        let tape = Tape::new();
        let s = Session::eval(&tape, &model.store);
        let v: Vec<&[usize]> = chunk.iter().map(|x| x.vision_tokens.as_slice()).collect();
        let t: Vec<&[usize]> = chunk.iter().map(|x| x.text_tokens.as_slice()).collect();
        let (gv, gt) = model.unimodal(&s, model.encode_vision(&s, &v)?, model.encode_text(&s, &t)?)?;
        vis.extend(cls_rows(&s, &gv)?.to_tokens(&tape));
        txt.extend(cls_rows(&s, &gt)?.to_tokens(&tape));
    }
    Ok((vis, txt))
}

/// `table[i][j]` scores vision item `i` against text item `j`.
pub fn similarity_matrix(vis: &[GaussianToken], txt: &[GaussianToken], cfg: &LossConfig) -> Result<Vec<Vec<f64>>> {
    vis.iter()
        .map(|v| txt.iter().map(|t| similarity_values(v, t, cfg)).collect())
        .collect()
}

/// Zero-based rank of candidate `target` when candidates are ordered by
/// descending score, ties broken by lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// `r@K` values in the order the cut-offs were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallAtK(pub Vec<(String, f64)>);

impl Index<&str> for RecallAtK {
    type Output = f64;

    fn index(&self, key: &str) -> &f64 {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .unwrap_or_else(|| panic!("no recall entry {key}"))
    }
}

impl Serialize for RecallAtK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RecallTable {
    pub i2t: RecallAtK,
    pub t2i: RecallAtK,
    pub candidates: usize,
}

/// Recall@K in both directions for a square table whose diagonal holds the
/// true pairs.
pub fn recall_from_table(table: &[Vec<f64>], ks: &[usize]) -> Result<RecallTable> {
    let n = table.len();
    if n == 0 || table.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("retrieval needs a non-empty square table".into()));
    }
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(&table[i], i)).collect();
    let t2i: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = table.iter().map(|r| r[j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let recall = |ranks: &[usize]| {
        RecallAtK(
            ks.iter()
                .map(|&k| (format!("r@{k}"), ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64))
                .collect(),
        )
    };
    Ok(RecallTable {
        i2t: recall(&i2t),
        t2i: recall(&t2i),
        candidates: n,
    })
}

pub fn evaluate(model: &Model, test: &[PairedExample], cfg: &LossConfig, ks: &[usize]) -> Result<RecallTable> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let (v, t) = cls_distributions(model, test)?;
    recall_from_table(&similarity_matrix(&v, &t, cfg)?, ks)
}
