//! Synthetic paired corpus, masking and batching.
//!
//! Each concept owns a pool of `synonym_count` tokens per modality.
//! Concepts are paired as siblings `(2j, 2j + 1)`, and siblings share
//! `round(overlap * synonym_count)` of their pool tokens, so a token drawn
//! from the shared part is ambiguous between the two concepts.

use crate::error::{Error, Result};
use crate::rng::{streams, SeededRng};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub concepts: usize,
    pub vision_vocab: usize,
    pub text_vocab: usize,
    pub vision_len: usize,
    pub text_len: usize,
    pub synonym_count: usize,
    pub overlap: f64,
    pub noise_rate: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            concepts: 32,
            vision_vocab: 256,
            text_vocab: 256,
            vision_len: 12,
            text_len: 10,
            synonym_count: 4,
            overlap: 0.25,
            noise_rate: 0.1,
            train_size: 2048,
            test_size: 256,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts == 0 || self.synonym_count == 0 || self.vision_len == 0 || self.text_len == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        for (name, p) in [("overlap", self.overlap), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let need = self.concepts * self.synonym_count;
        for (name, vocab) in [("vision", self.vision_vocab), ("text", self.text_vocab)] {
            if need > vocab {
                return Err(Error::Config(format!(
                    "{} concepts x {} synonyms need {need} {name} tokens but the vocabulary has {vocab}",
                    self.concepts, self.synonym_count
                )));
            }
        }
        Ok(())
    }

    /// Pool tokens each concept shares with its sibling.
    pub fn shared_per_concept(&self) -> usize {
        ((self.overlap * self.synonym_count as f64).round() as usize).min(self.synonym_count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedExample {
    #[serde(rename = "concept")]
    pub concept_id: usize,
    #[serde(rename = "vision")]
    pub vision_tokens: Vec<usize>,
    #[serde(rename = "text")]
    pub text_tokens: Vec<usize>,
}

/// Token pools, indexed `[concept][k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptPools {
    pub vision: Vec<Vec<usize>>,
    pub text: Vec<Vec<usize>>,
}

fn modality_pools(cfg: &SyntheticCorpusConfig, vocab: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..vocab).collect();
    rng.shuffle(&mut ids);
    let mut next = ids.into_iter();
    let (s, r) = (cfg.synonym_count, cfg.shared_per_concept());
    let mut pools = Vec::with_capacity(cfg.concepts);
    let mut c = 0;
    while c < cfg.concepts {
        if c + 1 < cfg.concepts {
            let shared: Vec<usize> = next.by_ref().take(r).collect();
            for _ in 0..2 {
                let mut pool = shared.clone();
                pool.extend(next.by_ref().take(s - r));
                pools.push(pool);
            }
            c += 2;
        } else {
            pools.push(next.by_ref().take(s).collect());
            c += 1;
        }
    }
    pools
}

pub fn concept_pools(cfg: &SyntheticCorpusConfig) -> Result<ConceptPools> {
    cfg.validate()?;
    let mut rng = SeededRng::derived(cfg.seed, streams::CORPUS, 0);
    let vision = modality_pools(cfg, cfg.vision_vocab, &mut rng);
    let text = modality_pools(cfg, cfg.text_vocab, &mut rng);
    Ok(ConceptPools { vision, text })
}

fn draw(pool: &[usize], len: usize, vocab: usize, noise: f64, rng: &mut SeededRng) -> Vec<usize> {
    (0..len)
        .map(|_| {
            if rng.bernoulli(noise) {
                rng.below(vocab)
            } else {
                pool[rng.below(pool.len())]
            }
        })
        .collect()
}

/// `count` examples starting at global example index `first`. Every
/// example draws from its own stream, so any range is reproducible alone.
pub fn generate_examples(cfg: &SyntheticCorpusConfig, first: usize, count: usize) -> Result<Vec<PairedExample>> {
    let pools = concept_pools(cfg)?;
    Ok((first..first + count)
        .map(|i| {
            let mut rng = SeededRng::derived(cfg.seed, streams::CORPUS, i as u64 + 1);
            let concept = rng.below(cfg.concepts);
            PairedExample {
                concept_id: concept,
                vision_tokens: draw(&pools.vision[concept], cfg.vision_len, cfg.vision_vocab, cfg.noise_rate, &mut rng),
                text_tokens: draw(&pools.text[concept], cfg.text_len, cfg.text_vocab, cfg.noise_rate, &mut rng),
            }
        })
        .collect())
}

/// The full corpus, `train_size + test_size` examples.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<PairedExample>> {
    generate_examples(cfg, 0, cfg.train_size + cfg.test_size)
}

/// Train and test splits of [`generate_corpus`].
pub fn generate_splits(cfg: &SyntheticCorpusConfig) -> Result<(Vec<PairedExample>, Vec<PairedExample>)> {
    let mut all = generate_corpus(cfg)?;
    let test = all.split_off(cfg.train_size);
    Ok((all, test))
}

pub fn write_jsonl(path: &Path, examples: &[PairedExample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PairedExample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Selection probability and branch split for masked-token prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn keep_frac(&self) -> f64 {
        1.0 - self.mask_frac - self.random_frac
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.select_prob > 0.0 && ok(self.select_prob) && ok(self.mask_frac) && ok(self.random_frac))
            || self.mask_frac + self.random_frac > 1.0 + 1e-12
        {
            return Err(Error::Config(format!("invalid mask policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskBranch {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
    pub branches: Vec<MaskBranch>,
}

/// Selects positions independently, then replaces each selected token with
/// `mask_id`, a uniform content token or itself. At least one position is
/// always selected: an empty draw is retried once, after which position 0
/// is forced.
pub fn mask_tokens(
    tokens: &[usize],
    rng: &mut SeededRng,
    policy: &MaskPolicy,
    mask_id: usize,
    vocab: usize,
) -> Result<MaskedText> {
    if mask_id < vocab {
        return Err(Error::InvalidArgument(format!("mask id {mask_id} lies inside the vocabulary of {vocab}")));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot mask an empty sequence".into()));
    }
    let mut positions: Vec<usize> = Vec::new();
    for _ in 0..2 {
        positions = (0..tokens.len()).filter(|_| rng.bernoulli(policy.select_prob)).collect();
        if !positions.is_empty() {
            break;
        }
    }
    if positions.is_empty() {
        positions.push(0);
    }
    let mut out = tokens.to_vec();
    let mut branches = Vec::with_capacity(positions.len());
    for &p in &positions {
        let u = rng.uniform();
        let branch = if u < policy.mask_frac {
            out[p] = mask_id;
            MaskBranch::Mask
        } else if u < policy.mask_frac + policy.random_frac {
            out[p] = rng.below(vocab);
            MaskBranch::Random
        } else {
            MaskBranch::Keep
        };
        branches.push(branch);
    }
    let labels = positions.iter().map(|&p| tokens[p]).collect();
    Ok(MaskedText {
        tokens: out,
        positions,
        labels,
        branches,
    })
}

/// A batch prepared for one pre-training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub vision_tokens: Vec<Vec<usize>>,
    pub text_tokens: Vec<Vec<usize>>,
    pub masked_text: Vec<Vec<usize>>,
    pub mask_positions: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

pub fn mask_batch(
    examples: &[&PairedExample],
    rng: &mut SeededRng,
    policy: &MaskPolicy,
    mask_id: usize,
    vocab: usize,
) -> Result<MaskedBatch> {
    let mut b = MaskedBatch {
        vision_tokens: Vec::with_capacity(examples.len()),
        text_tokens: Vec::with_capacity(examples.len()),
        masked_text: Vec::with_capacity(examples.len()),
        mask_positions: Vec::with_capacity(examples.len()),
        labels: Vec::with_capacity(examples.len()),
    };
    for e in examples {
        let m = mask_tokens(&e.text_tokens, rng, policy, mask_id, vocab)?;
        b.vision_tokens.push(e.vision_tokens.clone());
        b.text_tokens.push(e.text_tokens.clone());
        b.masked_text.push(m.tokens);
        b.mask_positions.push(m.positions);
        b.labels.push(m.labels);
    }
    Ok(b)
}

/// Pairings for the matching pass: row `i` combines vision of
/// `vision_idx[i]` with text of `text_idx[i]`; `labels[i]` is 1 for a true
/// pair and 0 for a replaced one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchPairs {
    pub vision_idx: Vec<usize>,
    pub text_idx: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Half of the rows (rounded down) get a partner drawn uniformly from the
/// other rows, replacing either the image or the text with equal odds.
pub fn match_pairs(batch_size: usize, rng: &mut SeededRng) -> Result<MatchPairs> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("matching needs at least 2 rows, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..batch_size).collect();
    rng.shuffle(&mut order);
    let mut pairs = MatchPairs {
        vision_idx: (0..batch_size).collect(),
        text_idx: (0..batch_size).collect(),
        labels: vec![1; batch_size],
    };
    for &i in &order[..batch_size / 2] {
        let mut j = rng.below(batch_size - 1);
        if j >= i {
            j += 1;
        }
        if rng.bernoulli(0.5) {
            pairs.vision_idx[i] = j;
        } else {
            pairs.text_idx[i] = j;
        }
        pairs.labels[i] = 0;
    }
    Ok(pairs)
}

/// Shuffled index batches of exactly `batch_size`; the remainder is dropped.
pub fn make_batches(corpus_len: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be at least 2, got {batch_size}")));
    }
    if batch_size > corpus_len {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds corpus size {corpus_len}"
        )));
    }
    let mut idx: Vec<usize> = (0..corpus_len).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            train_size: 200,
            test_size: 50,
            ..Default::default()
        }
    }

    #[test]
    fn disjoint_pools_without_overlap() {
        let cfg = SyntheticCorpusConfig {
            overlap: 0.0,
            noise_rate: 0.0,
            ..small()
        };
        let pools = concept_pools(&cfg).unwrap();
        for modality in [&pools.vision, &pools.text] {
            let mut seen = HashSet::new();
            for pool in modality.iter() {
                assert_eq!(pool.len(), 4);
                for t in pool {
                    assert!(seen.insert(*t));
                }
            }
        }
        for e in generate_corpus(&cfg).unwrap() {
            assert!(e.vision_tokens.iter().all(|t| pools.vision[e.concept_id].contains(t)));
            assert!(e.text_tokens.iter().all(|t| pools.text[e.concept_id].contains(t)));
        }
    }

    #[test]
    fn generation_is_reproducible_and_in_range() {
        let cfg = small();
        let a = generate_corpus(&cfg).unwrap();
        assert_eq!(a, generate_corpus(&cfg).unwrap());
        assert_eq!(a.len(), 250);
        assert_eq!(generate_examples(&cfg, 10, 5).unwrap(), a[10..15].to_vec());
        for e in &a {
            assert_eq!(e.vision_tokens.len(), 12);
            assert_eq!(e.text_tokens.len(), 10);
            assert!(e.vision_tokens.iter().all(|&t| t < 256));
            assert!(e.concept_id < 32);
        }
        let other = generate_corpus(&SyntheticCorpusConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    /// Fraction of each concept's pool tokens that also occur in some other
    /// concept's pool, averaged over concepts.
    fn sharing_fraction(pools: &[Vec<usize>]) -> f64 {
        let mut owners: HashMap<usize, usize> = HashMap::new();
        for pool in pools {
            for t in pool {
                *owners.entry(*t).or_default() += 1;
            }
        }
        let per: Vec<f64> = pools
            .iter()
            .map(|p| p.iter().filter(|t| owners[t] > 1).count() as f64 / p.len() as f64)
            .collect();
        per.iter().sum::<f64>() / per.len() as f64
    }

    #[test]
    fn measured_overlap_matches_setting() {
        let cfg = SyntheticCorpusConfig {
            overlap: 0.5,
            ..small()
        };
        let pools = concept_pools(&cfg).unwrap();
        for modality in [&pools.vision, &pools.text] {
            assert!((sharing_fraction(modality) - 0.5).abs() <= 0.05);
        }
        let quarter = concept_pools(&small()).unwrap();
        assert!((sharing_fraction(&quarter.text) - 0.25).abs() <= 0.05);
    }

    #[test]
    fn infeasible_partition_and_ranges_rejected() {
        let bad = SyntheticCorpusConfig {
            synonym_count: 9,
            ..small()
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        assert!(generate_corpus(&SyntheticCorpusConfig { overlap: 1.5, ..small() }).is_err());
    }

    #[test]
    fn concepts_are_recoverable_from_histograms() {
        let cfg = SyntheticCorpusConfig {
            overlap: 0.0,
            noise_rate: 0.0,
            ..small()
        };
        let (train, test) = generate_splits(&cfg).unwrap();
        let hist = |e: &PairedExample| {
            let mut h = vec![0.0; cfg.vision_vocab + cfg.text_vocab];
            e.vision_tokens.iter().for_each(|&t| h[t] += 1.0);
            e.text_tokens.iter().for_each(|&t| h[cfg.vision_vocab + t] += 1.0);
            h
        };
        let mut centroids = vec![vec![0.0; cfg.vision_vocab + cfg.text_vocab]; cfg.concepts];
        let mut counts = vec![0.0_f64; cfg.concepts];
        for e in &train {
            counts[e.concept_id] += 1.0;
            for (c, v) in centroids[e.concept_id].iter_mut().zip(hist(e)) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n.max(1.0));
        }
        for e in &test {
            let h = hist(e);
            let best = (0..cfg.concepts)
                .min_by(|&a, &b| {
                    let d = |c: &Vec<f64>| c.iter().zip(&h).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    d(&centroids[a]).total_cmp(&d(&centroids[b]))
                })
                .unwrap();
            assert_eq!(best, e.concept_id);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = generate_examples(&small(), 0, 3).unwrap();
        write_jsonl(&path, &corpus).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"concept\":"));
        assert_eq!(read_jsonl(&path).unwrap(), corpus);
    }

    #[test]
    fn forced_policy_masks_everything() {
        let policy = MaskPolicy {
            select_prob: 1.0,
            mask_frac: 1.0,
            random_frac: 0.0,
        };
        let mut rng = SeededRng::new(3, 0);
        let m = mask_tokens(&[5, 6, 7], &mut rng, &policy, 256, 256).unwrap();
        assert_eq!(m.tokens, vec![256; 3]);
        assert_eq!(m.positions, vec![0, 1, 2]);
        assert_eq!(m.labels, vec![5, 6, 7]);
    }

    #[test]
    fn every_selection_is_labelled_and_never_empty() {
        let policy = MaskPolicy::default();
        let mut rng = SeededRng::new(4, 0);
        for _ in 0..2000 {
            let tokens: Vec<usize> = (0..3).map(|_| rng.below(256)).collect();
            let m = mask_tokens(&tokens, &mut rng, &policy, 256, 256).unwrap();
            assert!(!m.positions.is_empty());
            assert_eq!(m.labels.len(), m.positions.len());
            for (k, &p) in m.positions.iter().enumerate() {
                assert_eq!(m.labels[k], tokens[p]);
                if m.branches[k] == MaskBranch::Keep {
                    assert_eq!(m.tokens[p], tokens[p]);
                }
            }
            for p in 0..3 {
                if !m.positions.contains(&p) {
                    assert_eq!(m.tokens[p], tokens[p]);
                }
            }
        }
        assert!(mask_tokens(&[1], &mut rng, &policy, 10, 256).is_err());
    }

    #[test]
    fn batches_cover_without_repeats() {
        let mut rng = SeededRng::new(5, streams::BATCH);
        let b = make_batches(10, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 8);
        let mut again = SeededRng::new(5, streams::BATCH);
        assert_eq!(make_batches(10, 4, &mut again).unwrap(), b);
        assert!(make_batches(3, 4, &mut rng).is_err());
        assert!(make_batches(10, 1, &mut rng).is_err());
    }

    #[test]
    fn match_pairs_are_half_negative() {
        let mut rng = SeededRng::new(6, streams::ITM_NEGATIVES);
        for b in [2usize, 5, 8] {
            let p = match_pairs(b, &mut rng).unwrap();
            assert_eq!(p.labels.iter().filter(|&&l| l == 0).count(), b / 2);
            for i in 0..b {
                let swapped = p.vision_idx[i] != i || p.text_idx[i] != i;
                assert_eq!(swapped, p.labels[i] == 0);
                assert!(p.vision_idx[i] == i || p.text_idx[i] == i);
            }
        }
        assert!(match_pairs(1, &mut rng).is_err());
    }
}
