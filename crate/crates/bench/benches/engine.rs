use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use distvl_core::gaussian::{w2_table, DiagGaussianSeq};
use distvl_core::nn::Session;
use distvl_core::pde::{Act, Pde, PdeConfig};
use distvl_core::{ParamStore, SeededRng, Tape, Tensor};

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normals(shape.iter().product())).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = SeededRng::new(1, 0);
    let (a, b) = (random(&mut rng, &[8, 12, 64]), random(&mut rng, &[64, 128]));
    c.bench_function("matmul_fwd_bwd_8x12x64x128", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (x, w) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let y = tape.sum(tape.matmul(x, w).unwrap()).unwrap();
            tape.backward(y).unwrap();
            black_box(tape.grad(w))
        })
    });
}

fn pde(c: &mut Criterion) {
    let mut rng = SeededRng::new(2, 0);
    let mut store = ParamStore::new();
    let cfg = PdeConfig { model_dim: 64, heads: 2, act: Act::Softmax, ffn_hidden: 128 };
    let pde = Pde::new(&mut store, "pde", cfg, &mut rng).unwrap();
    let h = random(&mut rng, &[8, 13, 64]);
    c.bench_function("pde_fwd_bwd_b8_t13_d64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let s = Session::train(&tape, &store);
            let g = pde.forward(&s, tape.constant(h.clone())).unwrap();
            let l = tape.add(tape.sum(g.mu).unwrap(), tape.sum(g.log_sigma).unwrap()).unwrap();
            tape.backward(l).unwrap();
            black_box(s.grads().len())
        })
    });
}

fn wasserstein(c: &mut Criterion) {
    let mut rng = SeededRng::new(3, 0);
    let xs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[256, 64])).collect();
    c.bench_function("w2_table_256x256_d64", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let a = DiagGaussianSeq { mu: tape.constant(xs[0].clone()), log_sigma: tape.constant(xs[1].clone()) };
            let b = DiagGaussianSeq { mu: tape.constant(xs[2].clone()), log_sigma: tape.constant(xs[3].clone()) };
            let t = w2_table(&tape, &a, &b).unwrap();
            black_box(tape.item(tape.sum(t).unwrap()))
        })
    });
}

criterion_group!(benches, matmul, pde, wasserstein);
criterion_main!(benches);
