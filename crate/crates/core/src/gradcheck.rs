//! Finite-difference gradient checking and the standard check suite.
//!
//! Derivatives are estimated with the five-point central stencil
//! `D(h) = (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` at steps `h` and
//! `h/2`, combined by Richardson extrapolation into `(16 D(h/2) - D(h)) / 15`.
//! The truncation error is then `O(h^6)`, which lets `h` stay large enough
//! to keep round-off small.

use crate::autograd::{Tape, Var};
use crate::data::PairedExample;
use crate::error::{invalid, Error, Result};
use crate::fusion::{CrossModalLayer, EncoderBlock, EncoderConfig, Mha, Modality, ModalityStream, ToyEncoder};
use crate::gaussian::{entropy, entropy_floor_loss, reparam_sample_with_noise, w2_squared, w2_table, DiagGaussianSeq};
use crate::model::{Model, ModelConfig};
use crate::nn::{Linear, Session};
use crate::objectives::{ditm_loss, dmlm_loss, dvlc_loss, infonce, step_losses, LossConfig, MaskTargets, StepConfig, StepInputs};
use crate::param::ParamStore;
use crate::pde::{Act, Pde, PdeConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Step used by the check suite.
pub const SUITE_STEP: f64 = 1e-3;

/// Smallest denominator of the relative error. Components below it are
/// judged on absolute error, since evaluation round-off (about `1e-12` for
/// losses of order 10) would otherwise dominate.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// Like [`finite_diff_check`], perturbing every coordinate of every input.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = xs
        .iter()
        .enumerate()
        .flat_map(|(k, x)| (0..x.numel()).map(move |i| (k, i)))
        .collect();
    finite_diff_check_coords(f, xs, h, &coords)
}

/// Checks only the listed `(input, flat index)` coordinates.
pub fn finite_diff_check_coords<F>(f: F, xs: &[Tensor], h: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(invalid(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&tape, &vars)?;
        tape.backward(root)?;
        vars.iter()
            .zip(xs)
            .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let v = tape.item(f(&tape, &vars)?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "finite_diff_check" })
        }
    };
    let mut worst = 0.0_f64;
    let mut inputs = xs.to_vec();
    for &(k, i) in coords {
        let x0 = xs[k].data()[i];
        let mut at = |dx: f64| -> Result<f64> {
            inputs[k].data_mut()[i] = x0 + dx;
            eval(&inputs)
        };
        let (p2, p1, p05) = (at(2.0 * h)?, at(h)?, at(0.5 * h)?);
        let (m05, m1, m2) = (at(-0.5 * h)?, at(-h)?, at(-2.0 * h)?);
        inputs[k].data_mut()[i] = x0;
        let coarse = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        let fine = (-p1 + 8.0 * p05 - 8.0 * m05 + m1) / (6.0 * h);
        let numeric = (16.0 * fine - coarse) / 15.0;
        let a = analytic[k].data()[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Worst relative error of one check over its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

fn normal(rng: &mut SeededRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|v| v * scale).collect()).unwrap()
}

/// Entries bounded away from zero, for kinked operations.
fn off_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0).map(|v| v.signum() * (0.1 + v.abs()))
}

fn positive(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0).map(|v| 0.3 + v.abs())
}

/// `sum(out * C)` with a fixed random `C` drawn from `seed`, so every output
/// coordinate contributes its own weight.
fn project(t: &Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(out);
    let c = normal(&mut SeededRng::new(seed, 0), &shape, 1.0);
    t.sum(t.mul(out, t.constant(c))?)
}

fn seq(v: &[Var], i: usize) -> DiagGaussianSeq {
    DiagGaussianSeq { mu: v[i], log_sigma: v[i + 1] }
}

type Case = (&'static str, Box<dyn Fn(&mut SeededRng) -> Result<f64>>);

fn run_cases(cases: Vec<Case>, seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    cases
        .into_iter()
        .enumerate()
        .map(|(c, (name, check))| {
            let mut worst = 0.0_f64;
            for i in 0..instances {
                let mut rng = SeededRng::derived(seed, c as u64, i as u64);
                worst = worst.max(check(&mut rng)?);
            }
            Ok(CheckReport { name: name.to_string(), instances, worst })
        })
        .collect()
}

/// Checks a unary elementwise op on a `[2, 3, 4]` input.
fn unary(op: fn(&Tape, Var) -> Result<Var>, input: fn(&mut SeededRng, &[usize]) -> Tensor) -> Box<dyn Fn(&mut SeededRng) -> Result<f64>> {
    Box::new(move |rng| {
        let x = input(rng, &[2, 3, 4]);
        let c = rng.next_u64();
        finite_diff_check(|t, v| project(t, op(t, v)?, c), &x, SUITE_STEP)
    })
}

/// Every differentiable primitive of the engine.
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let n1 = |r: &mut SeededRng, s: &[usize]| normal(r, s, 1.0);
    let cases: Vec<Case> = vec![
        ("add_broadcast", Box::new(|rng| {
            let xs = [normal(rng, &[2, 3, 4], 1.0), normal(rng, &[4], 1.0)];
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, t.add(v[0], v[1])?, c), &xs, SUITE_STEP)
        })),
        ("sub", Box::new(|rng| {
            let xs = [normal(rng, &[3, 4], 1.0), normal(rng, &[3, 4], 1.0)];
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, t.sub(v[0], v[1])?, c), &xs, SUITE_STEP)
        })),
        ("mul_broadcast", Box::new(|rng| {
            let xs = [normal(rng, &[2, 3, 4], 1.0), normal(rng, &[4], 1.0), normal(rng, &[2, 3, 4], 1.0)];
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, t.mul(t.mul(v[0], v[1])?, v[2])?, c), &xs, SUITE_STEP)
        })),
        ("scale_shift_neg", unary(|t, v| t.neg(t.add_scalar(t.scale(v, 1.7)?, -0.4)?), n1)),
        ("square", unary(|t, v| t.square(v), n1)),
        ("exp", unary(|t, v| t.exp(v), |r, s| normal(r, s, 0.7))),
        ("log", unary(|t, v| t.log(v), positive)),
        ("relu", unary(|t, v| t.relu(v), off_zero)),
        ("sigmoid", unary(|t, v| t.sigmoid(v), |r, s| normal(r, s, 2.0))),
        ("gelu", unary(|t, v| t.gelu(v), |r, s| normal(r, s, 2.0))),
        ("softmax_rows", unary(|t, v| t.softmax_rows(v), |r, s| normal(r, s, 2.0))),
        ("log_softmax_rows", unary(|t, v| t.log_softmax_rows(v), |r, s| normal(r, s, 2.0))),
        ("layer_norm", unary(|t, v| t.layer_norm(v), n1)),
        ("row_normalize", unary(|t, v| t.row_normalize(v, 1e-6), positive)),
        ("transpose", unary(|t, v| t.transpose(v), n1)),
        ("reshape", unary(|t, v| t.reshape(v, &[6, 4]), n1)),
        ("slice_last", unary(|t, v| t.slice_last(v, 1, 2), n1)),
        ("sum_last", unary(|t, v| t.sum_last(v), n1)),
        ("sum_mean", Box::new(|rng| {
            let x = normal(rng, &[3, 4], 1.0);
            finite_diff_check(|t, v| t.add(t.square(t.sum(v)?)?, t.exp(t.mean(v)?)?), &x, SUITE_STEP)
        })),
        ("matmul_batched", Box::new(|rng| {
            let xs = [normal(rng, &[2, 3, 4], 1.0), normal(rng, &[2, 4, 5], 1.0)];
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, t.matmul(v[0], v[1])?, c), &xs, SUITE_STEP)
        })),
        ("matmul_shared_rhs", Box::new(|rng| {
            let xs = [normal(rng, &[2, 3, 4], 1.0), normal(rng, &[4, 5], 1.0)];
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, t.matmul(v[0], v[1])?, c), &xs, SUITE_STEP)
        })),
        ("concat_last", Box::new(|rng| {
            let xs = [normal(rng, &[2, 3, 2], 1.0), normal(rng, &[2, 3, 4], 1.0)];
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, t.concat_last(&[v[0], v[1], v[0]])?, c), &xs, SUITE_STEP)
        })),
        ("split_last", Box::new(|rng| {
            let x = normal(rng, &[3, 6], 1.0);
            let c = rng.next_u64();
            finite_diff_check(
                |t, v| {
                    let p = t.split_last(v, 3)?;
                    t.add(project(t, t.mul(p[0], p[2])?, c)?, project(t, p[1], c + 1)?)
                },
                &x,
                SUITE_STEP,
            )
        })),
        ("index_rows", Box::new(|rng| {
            let x = normal(rng, &[5, 3], 1.0);
            let c = rng.next_u64();
            let idx: Vec<usize> = (0..6).map(|_| rng.below(5)).collect();
            finite_diff_check(|t, v| project(t, t.index_rows(v, &idx)?, c), &x, SUITE_STEP)
        })),
        ("gather_last", Box::new(|rng| {
            let x = normal(rng, &[4, 5], 1.0);
            let idx: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            finite_diff_check(|t, v| t.sum(t.square(t.gather_last(v, &idx)?)?), &x, SUITE_STEP)
        })),
    ];
    run_cases(cases, seed, instances)
}

/// Values of every parameter in `store` followed by `extra`.
fn with_params(store: &ParamStore, scale: f64, extra: Vec<Tensor>) -> Vec<Tensor> {
    let mut xs: Vec<Tensor> = store.iter().map(|p| p.tensor.map(|v| v * scale)).collect();
    xs.extend(extra);
    xs
}

/// A session on `t` whose parameters are the leading `vars`; returns the
/// remaining inputs.
fn bind<'a>(t: &'a Tape, store: &'a ParamStore, vars: &'a [Var]) -> (Session<'a>, &'a [Var]) {
    let s = Session::eval(t, store);
    let n = store.len();
    for (id, v) in store.ids().zip(vars) {
        s.bind(id, *v);
    }
    (s, &vars[n..])
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        model_dim: 8,
        attn_heads: 2,
        layers: 1,
        encoder_layers: 1,
        ffn_hidden: 8,
        vision_vocab: 10,
        text_vocab: 10,
        vision_len: 4,
        text_len: 4,
    }
}

/// Gaussian primitives, the PDE, the attention and fusion modules, and each
/// loss term on its own.
pub fn module_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let cases: Vec<Case> = vec![
        ("w2_squared", Box::new(|rng| {
            let xs: Vec<Tensor> = (0..4).map(|_| normal(rng, &[3, 5], 1.0)).collect();
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, w2_squared(t, &seq(v, 0), &seq(v, 2))?, c), &xs, SUITE_STEP)
        })),
        ("w2_table", Box::new(|rng| {
            let xs: Vec<Tensor> = (0..4).map(|_| normal(rng, &[3, 5], 1.0)).collect();
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, w2_table(t, &seq(v, 0), &seq(v, 2))?, c), &xs, SUITE_STEP)
        })),
        ("entropy", Box::new(|rng| {
            let xs: Vec<Tensor> = (0..2).map(|_| normal(rng, &[3, 5], 1.0)).collect();
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, entropy(t, &seq(v, 0))?, c), &xs, SUITE_STEP)
        })),
        ("entropy_floor", Box::new(|rng| {
            let xs: Vec<Tensor> = (0..2).map(|_| normal(rng, &[6, 5], 1.0)).collect();
            // Floor between the row entropies, kept off every hinge point.
            let tape = Tape::new();
            let g = DiagGaussianSeq { mu: tape.constant(xs[0].clone()), log_sigma: tape.constant(xs[1].clone()) };
            let mut h = tape.value(entropy(&tape, &g)?).data().to_vec();
            h.sort_by(f64::total_cmp);
            let gamma = 0.5 * (h[2] + h[3]);
            finite_diff_check_many(|t, v| entropy_floor_loss(t, &seq(v, 0), gamma), &xs, SUITE_STEP)
        })),
        ("reparam_sample", Box::new(|rng| {
            let xs: Vec<Tensor> = (0..2).map(|_| normal(rng, &[3, 5], 1.0)).collect();
            let eps = normal(rng, &[3, 5], 1.0);
            let c = rng.next_u64();
            finite_diff_check_many(|t, v| project(t, reparam_sample_with_noise(t, &seq(v, 0), eps.clone())?, c), &xs, SUITE_STEP)
        })),
        ("pde", Box::new(|rng| {
            let acts = [Act::Softmax, Act::ReluNorm, Act::Relu2Norm, Act::SigmoidNorm, Act::MlpOnly];
            let act = acts[rng.below(acts.len())];
            let mut store = ParamStore::new();
            let pde = Pde::new(&mut store, "pde", PdeConfig { model_dim: 8, heads: 2, act, ffn_hidden: 6 }, rng)?;
            let xs = with_params(&store, 4.0, vec![normal(rng, &[2, 3, 8], 1.0)]);
            let (c1, c2) = (rng.next_u64(), rng.next_u64());
            // The stencil must not straddle a ReLU kink in the attention scores.
            let h = if matches!(act, Act::ReluNorm | Act::Relu2Norm) { 1e-5 } else { SUITE_STEP };
            finite_diff_check_many(
                |t, v| {
                    let (s, rest) = bind(t, &store, v);
                    let g = pde.forward(&s, rest[0])?;
                    t.add(project(t, g.mu, c1)?, project(t, g.log_sigma, c2)?)
                },
                &xs,
                h,
            )
        })),
        ("attention", Box::new(|rng| {
            let mut store = ParamStore::new();
            let mha = Mha::new(&mut store, "mha", 8, 2, rng)?;
            let xs = with_params(&store, 1.0, vec![normal(rng, &[2, 3, 8], 1.0), normal(rng, &[2, 5, 8], 1.0)]);
            let c = rng.next_u64();
            finite_diff_check_many(
                |t, v| {
                    let (s, rest) = bind(t, &store, v);
                    project(t, mha.forward(&s, rest[0], rest[1])?, c)
                },
                &xs,
                SUITE_STEP,
            )
        })),
        ("encoder_block", Box::new(|rng| {
            let mut store = ParamStore::new();
            let block = EncoderBlock::new(&mut store, "blk", 8, 2, 8, rng)?;
            let xs = with_params(&store, 1.0, vec![normal(rng, &[2, 4, 8], 1.0)]);
            let c = rng.next_u64();
            finite_diff_check_many(
                |t, v| {
                    let (s, rest) = bind(t, &store, v);
                    project(t, block.forward(&s, rest[0])?, c)
                },
                &xs,
                SUITE_STEP,
            )
        })),
        ("cross_modal_layer", Box::new(|rng| {
            let mut store = ParamStore::new();
            let layer = CrossModalLayer::new(&mut store, "x", 0, &tiny_encoder(), rng)?;
            let xs = with_params(&store, 1.0, vec![normal(rng, &[2, 5, 8], 1.0), normal(rng, &[2, 3, 8], 1.0)]);
            let (c1, c2) = (rng.next_u64(), rng.next_u64());
            finite_diff_check_many(
                |t, v| {
                    let (s, rest) = bind(t, &store, v);
                    let (i, w) = layer.forward(
                        &s,
                        ModalityStream { hidden: rest[0], modality: Modality::Vision },
                        ModalityStream { hidden: rest[1], modality: Modality::Text },
                    )?;
                    t.add(project(t, i.hidden, c1)?, project(t, w.hidden, c2)?)
                },
                &xs,
                SUITE_STEP,
            )
        })),
        ("toy_encoder", Box::new(|rng| {
            let mut store = ParamStore::new();
            let cfg = tiny_encoder();
            let enc = ToyEncoder::new(&mut store, "enc", Modality::Text, 11, 4, &cfg, rng)?;
            let xs = with_params(&store, 1.0, Vec::new());
            let tokens: Vec<Vec<usize>> = (0..2).map(|_| (0..4).map(|_| rng.below(11)).collect()).collect();
            let c = rng.next_u64();
            finite_diff_check_many(
                |t, v| {
                    let (s, _) = bind(t, &store, v);
                    project(t, enc.forward(&s, &tokens)?.hidden, c)
                },
                &xs,
                SUITE_STEP,
            )
        })),
        ("infonce", Box::new(|rng| {
            let xs = [normal(rng, &[4, 4], 1.0), Tensor::scalar(0.07_f64.ln() + 0.3 * rng.normal())];
            finite_diff_check_many(|t, v| infonce(t, v[0], v[1]), &xs, SUITE_STEP)
        })),
        ("dvlc_loss", Box::new(|rng| {
            let mut xs: Vec<Tensor> = (0..4).map(|_| normal(rng, &[4, 6], 1.0)).collect();
            xs.push(Tensor::scalar(0.07_f64.ln()));
            let cfg = LossConfig { a: -0.05, ..LossConfig::for_dim(6) };
            finite_diff_check_many(|t, v| dvlc_loss(t, &seq(v, 0), &seq(v, 2), &cfg, v[4]), &xs, SUITE_STEP)
        })),
        ("dmlm_loss", Box::new(|rng| {
            let mut store = ParamStore::new();
            let head = Linear::new(&mut store, "phi", 6, 7, true, rng)?;
            let xs = with_params(&store, 1.0, vec![normal(rng, &[2, 4, 6], 1.0), normal(rng, &[2, 4, 6], 0.5)]);
            let targets = MaskTargets::new(&[vec![0, 2], vec![1]], &[vec![3, 6], vec![0]], 4, 1)?;
            let noise = rng.next_u64();
            finite_diff_check_many(
                |t, v| {
                    let (s, rest) = bind(t, &store, v);
                    let phi = |x: Var| head.forward(&s, x);
                    dmlm_loss(t, &seq(rest, 0), &targets, &phi, 2, &mut SeededRng::new(noise, 0))
                },
                &xs,
                SUITE_STEP,
            )
        })),
        ("ditm_loss", Box::new(|rng| {
            let mut store = ParamStore::new();
            let head = Linear::new(&mut store, "phi", 12, 2, true, rng)?;
            let extra = (0..4).map(|i| normal(rng, &[4, 6], if i % 2 == 0 { 1.0 } else { 0.5 })).collect();
            let xs = with_params(&store, 1.0, extra);
            let noise = rng.next_u64();
            finite_diff_check_many(
                |t, v| {
                    let (s, rest) = bind(t, &store, v);
                    let phi = |x: Var| head.forward(&s, x);
                    ditm_loss(t, &seq(rest, 0), &seq(rest, 2), &[1, 0, 1, 0], &phi, 2, &mut SeededRng::new(noise, 0))
                },
                &xs,
                SUITE_STEP,
            )
        })),
    ];
    run_cases(cases, seed, instances)
}

fn random_examples(rng: &mut SeededRng, cfg: &EncoderConfig, n: usize) -> Vec<PairedExample> {
    (0..n)
        .map(|i| PairedExample {
            concept_id: i,
            vision_tokens: (0..cfg.vision_len).map(|_| rng.below(cfg.vision_vocab)).collect(),
            text_tokens: (0..cfg.text_len).map(|_| rng.below(cfg.text_vocab)).collect(),
        })
        .collect()
}

/// The total pre-training objective (encoders, fusion, every PDE, all four
/// loss terms) at toy shapes, differentiated with respect to every
/// parameter tensor. `coords_per_tensor` coordinates of each tensor are
/// sampled per instance.
pub fn pipeline_check(seed: u64, instances: usize, coords_per_tensor: usize) -> Result<CheckReport> {
    let mcfg = ModelConfig {
        encoder: tiny_encoder(),
        pde_heads: 2,
        pde_act: Act::Softmax,
        pde_ffn_hidden: 8,
    };
    let mut worst = 0.0_f64;
    for i in 0..instances {
        let mut rng = SeededRng::derived(seed, 0, i as u64);
        let model = Model::new(mcfg, rng.next_u64(), 0.07_f64.ln())?;
        let examples = random_examples(&mut rng, &mcfg.encoder, 4);
        let batch: Vec<&PairedExample> = examples.iter().collect();
        // A floor above every entropy keeps the hinge on its linear side.
        let loss = LossConfig { gamma: 100.0, k: 2, ..LossConfig::for_dim(8) };
        let cfg = StepConfig::new(loss);
        let inputs = StepInputs::draw(&model, &batch, &cfg.mask, rng.next_u64(), 0)?;
        let noise = rng.next_u64();
        let xs = with_params(&model.store, 1.0, Vec::new());
        let mut coords = Vec::new();
        for (k, x) in xs.iter().enumerate() {
            for _ in 0..coords_per_tensor.min(x.numel()) {
                coords.push((k, rng.below(x.numel())));
            }
        }
        let err = finite_diff_check_coords(
            |t, v| {
                let (s, _) = bind(t, &model.store, v);
                Ok(step_losses(&s, &model, &inputs, &cfg, &mut SeededRng::new(noise, 0))?.total)
            },
            &xs,
            SUITE_STEP,
            &coords,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckReport { name: "pretraining_objective".into(), instances, worst })
}
