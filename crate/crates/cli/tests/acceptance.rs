//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! test fails if any check fails.

use distvl_core::data::{mask_tokens, MaskBranch, MaskPolicy};
use distvl_core::gaussian::w2_squared_values;
use distvl_core::gradcheck::{module_suite, op_suite, pipeline_check};
use distvl_core::harness::hsd::tukey_hsd;
use distvl_core::harness::{checkpoint, retrieval, train};
use distvl_core::nn::{Linear, Session};
use distvl_core::objectives::dmlm_predict;
use distvl_core::{GaussianToken, MetricsRecord, Model, ParamStore, RunConfig, SeededRng, Tape, Tensor};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

struct Outcome {
    id: usize,
    pass: bool,
}

/// Writes straight to the process stdout so the lines survive output
/// capture.
fn report(out: &mut Vec<Outcome>, id: usize, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let line = format!(
        "{} criterion {id:>2} {name}: {detail} [{:.1}s]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stdout().write_all(line.as_bytes());
    let _ = std::io::stdout().flush();
    out.push(Outcome { id, pass });
}

fn gradient_soundness(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut reports = op_suite(101, 20).expect("op checks");
    reports.extend(module_suite(102, 20).expect("module checks"));
    reports.push(pipeline_check(103, 20, 2).expect("pipeline check"));
    let elapsed = t.elapsed();
    let worst = reports.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let pass = reports.iter().all(|r| r.worst <= 1e-4 && r.instances >= 20) && elapsed.as_secs_f64() <= 60.0;
    let detail = format!("{} checks x 20 instances, worst {:.2e} ({})", reports.len(), worst.worst, worst.name);
    report(out, 1, "gradient soundness", pass, detail, elapsed);
}

fn random_token(rng: &mut SeededRng, d: usize) -> GaussianToken {
    let mu = (0..d).map(|_| 2.0 * rng.normal()).collect();
    let ls = (0..d).map(|_| 4.0 * rng.uniform() - 2.0).collect();
    GaussianToken::new(mu, ls).unwrap()
}

fn metric_axioms(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rng = SeededRng::new(2, 0);
    let w = |a: &GaussianToken, b: &GaussianToken| w2_squared_values(a, b).unwrap();
    let (mut sym, mut selfd, mut tri) = (true, true, 0.0_f64);
    for _ in 0..1000 {
        let (a, b, c) = (random_token(&mut rng, 8), random_token(&mut rng, 8), random_token(&mut rng, 8));
        sym &= w(&a, &b) == w(&b, &a);
        selfd &= w(&a, &a) == 0.0;
        tri = tri.max(w(&a, &c).sqrt() - w(&a, &b).sqrt() - w(&b, &c).sqrt());
    }
    let elapsed = t.elapsed();
    let pass = sym && selfd && tri <= 1e-9 && elapsed.as_secs_f64() <= 5.0;
    let detail = format!("symmetry exact: {sym}, self-distance zero: {selfd}, max triangle excess {tri:.2e}");
    report(out, 2, "Wasserstein metric axioms", pass, detail, elapsed);
}

/// Acklam's rational approximation of the standard normal quantile.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < 0.02425 {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - 0.02425 {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Squared 2-Wasserstein distance between two 1-D normals from the
/// monotone coupling of their equal-mass quantile atoms.
fn quantile_ot(m1: f64, s1: f64, m2: f64, s2: f64, n: usize) -> f64 {
    let atoms = |m: f64, s: f64| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|i| m + s * normal_quantile((i as f64 + 0.5) / n as f64)).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (atoms(m1, s1), atoms(m2, s2));
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64
}

fn closed_form_oracles(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rng = SeededRng::new(3, 0);
    let mut ot_err = 0.0_f64;
    for _ in 0..20 {
        let (a, b) = (random_token(&mut rng, 1), random_token(&mut rng, 1));
        let exact = w2_squared_values(&a, &b).unwrap();
        let oracle = quantile_ot(a.mu[0], a.sigma()[0], b.mu[0], b.sigma()[0], 10_000);
        ot_err = ot_err.max((exact - oracle).abs() / oracle);
    }
    let mut h_err = 0.0_f64;
    for _ in 0..3 {
        let mu: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let ls: Vec<f64> = (0..4).map(|_| 1.5 * rng.uniform() - 0.5).collect();
        let g = GaussianToken::new(mu.clone(), ls.clone()).unwrap();
        let sigma = g.sigma();
        let n = 1_000_000;
        let mut nll = 0.0;
        for _ in 0..n {
            for j in 0..4 {
                let x = mu[j] + sigma[j] * rng.normal();
                let z = (x - mu[j]) / sigma[j];
                nll += 0.5 * (2.0 * std::f64::consts::PI).ln() + sigma[j].ln() + 0.5 * z * z;
            }
        }
        let mc = nll / n as f64;
        h_err = h_err.max((g.entropy() - mc).abs() / mc.abs());
    }
    let elapsed = t.elapsed();
    let pass = ot_err <= 0.02 && h_err <= 0.01 && elapsed.as_secs_f64() <= 30.0;
    let detail = format!("1-D W2 vs quantile OT max rel err {ot_err:.2e}; entropy vs Monte Carlo max rel err {h_err:.2e}");
    report(out, 3, "closed forms vs oracles", pass, detail, elapsed);
}

/// A `distvl train` run in a child process.
struct TrainRun {
    dir: PathBuf,
    elapsed: Duration,
}

impl TrainRun {
    fn metrics(&self) -> Vec<MetricsRecord> {
        std::fs::read_to_string(self.dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn cli_train(config: &Path, seed: u64, dir: &Path) -> TrainRun {
    let t = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_distvl"))
        .args(["train", "--config"])
        .arg(config)
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(dir)
        .output()
        .expect("run distvl");
    assert!(status.status.success(), "train failed: {}", String::from_utf8_lossy(&status.stderr));
    TrainRun { dir: dir.to_path_buf(), elapsed: t.elapsed() }
}

fn variance_collapse(out: &mut Vec<Outcome>, regularized: &TrainRun, unregularized: &TrainRun) {
    let gamma = RunConfig::default().loss_config().unwrap().gamma;
    let h_reg = regularized.metrics().last().unwrap().mean_entropy;
    let h_free = unregularized.metrics().last().unwrap().mean_entropy;
    let elapsed = regularized.elapsed + unregularized.elapsed;
    let pass = h_free <= h_reg - 2.0 && h_reg >= gamma - 1.0 && elapsed.as_secs_f64() <= 600.0;
    let detail = format!("final entropy alpha=0: {h_free:.2}, alpha=0.01: {h_reg:.2}, floor gamma-1 = {:.2}", gamma - 1.0);
    report(out, 4, "variance collapse without the entropy floor", pass, detail, elapsed);
}

/// Central 95% range of Binomial(n, p) counts.
fn binomial_bounds(n: usize, p: f64) -> (usize, usize) {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut cdf = 0.0;
    let mut lo = None;
    for k in 0..=n {
        cdf += pmf;
        if lo.is_none() && cdf >= 0.025 {
            lo = Some(k);
        }
        if cdf >= 0.975 {
            return (lo.unwrap(), k);
        }
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    (lo.unwrap_or(0), n)
}

fn retrieval_learnability(out: &mut Vec<Outcome>, trained: &TrainRun) {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let (_, test) = train::load_splits(&cfg).unwrap();
    let loss = cfg.loss_config().unwrap();
    let (model, _) = checkpoint::load(&trained.dir.join("model.ckpt")).unwrap();
    let r = retrieval::evaluate(&model, &test, &loss, &[1]).unwrap();
    let fresh = Model::new(cfg.model_config().unwrap(), 0, loss.log_tau_init).unwrap();
    let u = retrieval::evaluate(&fresh, &test, &loss, &[1]).unwrap();
    let n = test.len();
    let chance = 1.0 / n as f64;
    let (lo, hi) = binomial_bounds(n, chance);
    let in_bounds = |v: f64| {
        let hits = (v * n as f64).round() as usize;
        (lo..=hi).contains(&hits)
    };
    let elapsed = trained.elapsed + t.elapsed();
    let pass = r.i2t["r@1"] >= 10.0 * chance
        && r.t2i["r@1"] >= 10.0 * chance
        && in_bounds(u.i2t["r@1"])
        && in_bounds(u.t2i["r@1"])
        && elapsed.as_secs_f64() <= 600.0;
    let detail = format!(
        "trained R@1 i2t {:.4} t2i {:.4} (need >= {:.4}); untrained i2t {:.4} t2i {:.4} (chance band {}..={} of {n})",
        r.i2t["r@1"],
        r.t2i["r@1"],
        10.0 * chance,
        u.i2t["r@1"],
        u.t2i["r@1"],
        lo,
        hi
    );
    report(out, 5, "retrieval learnability", pass, detail, elapsed);
}

fn dmlm_degenerate(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let (d, vocab) = (64, 256);
    let mut rng = SeededRng::new(6, 0);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "phi", d, vocab, true, &mut rng).unwrap();
    let (mut exact, mut near) = (true, 0.0_f64);
    for i in 0..20 {
        let mu: Vec<f64> = rng.normals(d);
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let phi = |x| head.forward(&s, x);
        let reference = {
            let m = tape.constant(Tensor::new(vec![1, d], mu.clone()).unwrap());
            tape.value(tape.softmax_rows(phi(m).unwrap()).unwrap()).data().to_vec()
        };
        let wide = GaussianToken::new(mu.clone(), rng.normals(d)).unwrap();
        let k0 = dmlm_predict(&tape, &wide.leaf(&tape), &phi, 0, &mut SeededRng::new(i, 1)).unwrap();
        exact &= k0 == reference;
        let narrow = GaussianToken::new(mu, vec![-20.0; d]).unwrap();
        let k5 = dmlm_predict(&tape, &narrow.leaf(&tape), &phi, 5, &mut SeededRng::new(i, 2)).unwrap();
        near = near.max(k5.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let pass = exact && near <= 1e-6;
    let detail = format!("K=0 equals classifier on the mean exactly: {exact}; log sigma=-20, K=5 max deviation {near:.2e}");
    report(out, 6, "D-MLM degenerate equivalences", pass, detail, t.elapsed());
}

fn loss_bookkeeping(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let cfg = RunConfig { steps: 100, ..RunConfig::default() };
    let alpha = cfg.loss_config().unwrap().alpha;
    let (train_set, _) = train::load_splits(&cfg).unwrap();
    let mut worst = 0.0_f64;
    let mut steps = 0;
    train::train(&cfg, 7, &train_set, |r| {
        let sum = r.loss_dmlm + r.loss_ditm + r.loss_dvlc + alpha * r.loss_reg;
        worst = worst.max((r.loss_total - sum).abs());
        steps += 1;
        Ok(())
    })
    .unwrap();
    let pass = steps == 100 && worst <= 1e-9;
    let detail = format!("{steps} steps, max |total - components - alpha*reg| = {worst:.2e}");
    report(out, 7, "loss bookkeeping", pass, detail, t.elapsed());
}

fn masking_calibration(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    // Long sequences keep the at-least-one-mask guarantee from biasing the
    // selection rate.
    let (len, vocab) = (50, 256);
    let policy = MaskPolicy::default();
    let mut rng = SeededRng::new(8, 0);
    let (mut positions, mut selected) = (0usize, 0usize);
    let mut branch = [0usize; 3];
    while positions < 1_000_000 {
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(vocab)).collect();
        let m = mask_tokens(&tokens, &mut rng, &policy, vocab, vocab).unwrap();
        positions += len;
        selected += m.positions.len();
        for b in m.branches {
            branch[match b {
                MaskBranch::Mask => 0,
                MaskBranch::Random => 1,
                MaskBranch::Keep => 2,
            }] += 1;
        }
    }
    let rate = selected as f64 / positions as f64;
    let split: Vec<f64> = branch.iter().map(|&c| c as f64 / selected as f64).collect();
    let pass = (rate - 0.15).abs() <= 0.002
        && (split[0] - 0.8).abs() <= 0.01
        && (split[1] - 0.1).abs() <= 0.01
        && (split[2] - 0.1).abs() <= 0.01;
    let detail = format!(
        "{positions} positions, selection {rate:.4}, split {:.4}/{:.4}/{:.4}",
        split[0], split[1], split[2]
    );
    report(out, 8, "masking policy calibration", pass, detail, t.elapsed());
}

fn hsd_calibration(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let (reps, trials, items, systems) = (500, 1000, 20, 4);
    let mut rng = SeededRng::new(9, 0);
    let mut rejections = 0;
    for _ in 0..reps {
        let scores: Vec<Vec<f64>> = (0..items)
            .map(|_| {
                let item = rng.normal();
                (0..systems).map(|_| item + rng.normal()).collect()
            })
            .collect();
        let results = tukey_hsd(&scores, trials, &mut rng).unwrap();
        if results.iter().any(|r| r.p <= 0.05) {
            rejections += 1;
        }
    }
    let fpr = rejections as f64 / reps as f64;
    let separated: Vec<Vec<f64>> = (0..items)
        .map(|_| {
            let u = rng.uniform();
            vec![u, 1.0 + u, 2.0 + u]
        })
        .collect();
    let p_max = tukey_hsd(&separated, trials, &mut rng)
        .unwrap()
        .iter()
        .map(|r| r.p)
        .fold(0.0, f64::max);
    let pass = (fpr - 0.05).abs() <= 0.02 && p_max <= 0.01;
    let detail = format!("null family-wise false-positive rate {fpr:.3} over {reps} repetitions; separated systems max p {p_max:.4}");
    report(out, 9, "randomized Tukey HSD calibration", pass, detail, t.elapsed());
}

fn determinism(out: &mut Vec<Outcome>, a: &TrainRun, b: &TrainRun) {
    let read = |r: &TrainRun, f: &str| std::fs::read(r.dir.join(f)).unwrap();
    let metrics = read(a, "metrics.jsonl") == read(b, "metrics.jsonl");
    let ckpt = read(a, "model.ckpt") == read(b, "model.ckpt");
    let detail = format!("metrics identical: {metrics}, checkpoints identical: {ckpt}");
    report(out, 10, "determinism of full training runs", metrics && ckpt, detail, a.elapsed + b.elapsed);
}

#[test]
fn acceptance_criteria() {
    let mut out = Vec::new();
    gradient_soundness(&mut out);
    metric_axioms(&mut out);
    closed_form_oracles(&mut out);

    let dir = tempfile::tempdir().unwrap();
    let default_cfg = dir.path().join("default.json");
    std::fs::write(&default_cfg, "{}").unwrap();
    let no_floor_cfg = dir.path().join("no_floor.json");
    std::fs::write(&no_floor_cfg, r#"{"loss": {"alpha": 0.0}}"#).unwrap();
    let run_a = cli_train(&default_cfg, 0, &dir.path().join("a"));
    let run_free = cli_train(&no_floor_cfg, 0, &dir.path().join("free"));
    variance_collapse(&mut out, &run_a, &run_free);
    retrieval_learnability(&mut out, &run_a);

    dmlm_degenerate(&mut out);
    loss_bookkeeping(&mut out);
    masking_calibration(&mut out);
    hsd_calibration(&mut out);

    let run_b = cli_train(&default_cfg, 0, &dir.path().join("b"));
    determinism(&mut out, &run_a, &run_b);

    let failed: Vec<usize> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert_eq!(out.len(), 10);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
