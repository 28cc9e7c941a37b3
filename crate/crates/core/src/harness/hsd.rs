//! Randomized Tukey HSD over a systems-by-items score table.
//!
//! Under the null hypothesis the system labels are exchangeable within
//! each item. Each trial permutes every item's scores across systems and
//! records the largest difference between system means; a pair's p-value is
//! the smoothed fraction of trials whose maximum reaches the pair's
//! observed difference.

use crate::error::{Error, Result};
use crate::rng::{streams, SeededRng};
use serde::Serialize;
use std::io::{Read, Write};

/// Slack when comparing permuted maxima with observed differences, so that
/// equal sums computed in a different order still count as ties.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub a: usize,
    pub b: usize,
    /// `mean_a - mean_b`.
    pub diff: f64,
    pub p: f64,
    /// Difference over the residual standard deviation; `None` when every
    /// system's scores are constant.
    pub effect: Option<f64>,
}

/// `scores[i][s]` is system `s` on item `i`.
pub fn system_means(scores: &[Vec<f64>]) -> Vec<f64> {
    let m = scores[0].len();
    let n = scores.len() as f64;
    (0..m).map(|s| scores.iter().map(|r| r[s]).sum::<f64>() / n).collect()
}

/// One-way ANOVA residual variance: squared deviations from each system's
/// own mean, over `m (n - 1)` degrees of freedom.
pub fn residual_variance(scores: &[Vec<f64>]) -> f64 {
    let means = system_means(scores);
    let (n, m) = (scores.len(), means.len());
    let ss: f64 = scores
        .iter()
        .map(|r| r.iter().zip(&means).map(|(x, mu)| (x - mu).powi(2)).sum::<f64>())
        .sum();
    ss / (m * (n - 1)) as f64
}

fn max_spread(means: &[f64]) -> f64 {
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

fn validate(scores: &[Vec<f64>]) -> Result<usize> {
    let n = scores.len();
    let m = scores.first().map_or(0, Vec::len);
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 systems and 2 items, got {m} and {n}")));
    }
    if scores.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("ragged score table".into()));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(m)
}

/// Pairwise results for every `a < b`. Trial `t` draws its permutations
/// from its own stream keyed by a base seed taken from `rng`, so results do
/// not depend on trial order.
pub fn tukey_hsd(scores: &[Vec<f64>], trials: usize, rng: &mut SeededRng) -> Result<Vec<PairResult>> {
    let m = validate(scores)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be positive".into()));
    }
    let base = rng.next_u64();
    let means = system_means(scores);
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            pairs.push((a, b, means[a] - means[b]));
        }
    }
    let mut counts = vec![0usize; pairs.len()];
    let mut row = vec![0.0; m];
    let n = scores.len() as f64;
    for t in 0..trials {
        let mut trng = SeededRng::derived(base, streams::HSD, t as u64);
        let mut sums = vec![0.0; m];
        for item in scores {
            row.copy_from_slice(item);
            trng.shuffle(&mut row);
            sums.iter_mut().zip(&row).for_each(|(s, v)| *s += v);
        }
        let perm_means: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let stat = max_spread(&perm_means);
        for (c, &(_, _, d)) in counts.iter_mut().zip(&pairs) {
            if stat >= d.abs() - TIE_EPS {
                *c += 1;
            }
        }
    }
    let ve = residual_variance(scores);
    Ok(pairs
        .into_iter()
        .zip(counts)
        .map(|((a, b, diff), c)| PairResult {
            a,
            b,
            diff,
            p: (c + 1) as f64 / (trials + 1) as f64,
            effect: (ve > 0.0).then(|| diff / ve.sqrt()),
        })
        .collect())
}

/// A parsed score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub systems: Vec<String>,
    pub items: Vec<String>,
    /// `scores[i][s]`.
    pub scores: Vec<Vec<f64>>,
}

/// Reads `item,sys1,sys2,...` rows. A first row whose score cells are not
/// all numeric is taken as the header naming the systems.
pub fn read_scores(r: impl Read) -> Result<ScoreTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut systems = Vec::new();
    let mut items = Vec::new();
    let mut scores = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::InvalidArgument(format!("row {} has no score columns", line + 1)));
        }
        let cells: Vec<&str> = rec.iter().collect();
        let parsed: std::result::Result<Vec<f64>, _> = cells[1..].iter().map(|c| c.parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                items.push(cells[0].to_string());
                scores.push(v);
            }
            Err(_) if line == 0 => systems = cells[1..].iter().map(|c| c.to_string()).collect(),
            Err(e) => return Err(Error::InvalidArgument(format!("row {}: {e}", line + 1))),
        }
    }
    let m = scores.first().map_or(systems.len(), Vec::len);
    if systems.is_empty() {
        systems = (1..=m).map(|i| format!("sys{i}")).collect();
    }
    if systems.len() != m {
        return Err(Error::InvalidArgument("header and score rows differ in width".into()));
    }
    Ok(ScoreTable { systems, items, scores })
}

#[derive(Serialize)]
struct Row<'a> {
    #[serde(rename = "sysA")]
    sys_a: &'a str,
    #[serde(rename = "sysB")]
    sys_b: &'a str,
    p: f64,
    effect: String,
}

/// Writes `sysA,sysB,p,effect`; an undefined effect size is written as
/// `undefined`.
pub fn write_results(w: impl Write, systems: &[String], results: &[PairResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(Row {
            sys_a: &systems[r.a],
            sys_b: &systems[r.b],
            p: r.p,
            effect: r.effect.map_or_else(|| "undefined".to_string(), |e| e.to_string()),
        })?;
    }
    out.flush()?;
    Ok(())
}
