use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gvt2rpm::autodiff::{RelBias, Tape};
use gvt2rpm::metrics::{hr_from_signal, DEFAULT_BAND};
use gvt2rpm::training::{train_step, AdamW, AdamWState};
use gvt2rpm::{Model, ModelConfig, Tensor};
use gvt2rpm_bench::{examples, toy_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // 60×8×8 token grid, width 32, 2 heads
    let grid = [60, 8, 8];
    let (l, d, heads) = (3840, 32, 2);
    let q = Tensor::randn(&[1, l, d], 1.0, &mut rng);
    let k = Tensor::randn(&[1, l, d], 1.0, &mut rng);
    let v = Tensor::randn(&[1, l, d], 1.0, &mut rng);
    let tables: Vec<Tensor> = grid.iter().map(|&e| Tensor::randn(&[heads, 2 * e - 1], 0.1, &mut rng)).collect();
    let mut g = c.benchmark_group("attention");
    g.sample_size(10);
    for backward in [false, true] {
        let name = if backward { "forward+backward 3840 tokens" } else { "forward 3840 tokens" };
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let [qv, kv, vv] = [&q, &k, &v].map(|t| tape.leaf(t.clone(), backward));
                let rel = RelBias {
                    grid,
                    t_table: tape.leaf(tables[0].clone(), backward),
                    h_table: tape.leaf(tables[1].clone(), backward),
                    w_table: tape.leaf(tables[2].clone(), backward),
                };
                let y = tape.attention_core(qv, kv, vv, heads, Some(rel)).unwrap();
                let s = tape.sum(y);
                if backward {
                    black_box(tape.backward(s).unwrap());
                } else {
                    black_box(tape.value(s).item());
                }
            })
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 3, 120, 64, 64], 1.0, &mut rng);
    let w = Tensor::randn(&[16, 3, 3, 7, 7], 0.02, &mut rng);
    let mut g = c.benchmark_group("conv3d");
    g.sample_size(10);
    g.bench_function("patchify stem 120x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv3d(xv, wv, None, [2, 4, 4], [1, 3, 3]).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, cfg) in [("tiny 8x8x8 batch 4", ModelConfig::tiny()), ("toy 120x64x64 batch 1", toy_config())] {
        let batch_len = if cfg.input_dims[0] == 8 { 4 } else { 1 };
        let ex = examples(&cfg, batch_len);
        let refs: Vec<_> = ex.iter().collect();
        let mut model = Model::new(&cfg, 0).unwrap();
        let hp = AdamW::new(1e-3, 1e-4);
        let mut opt = AdamWState::new(model.params().tensors());
        g.bench_function(name, |b| b.iter(|| black_box(train_step(&mut model, &mut opt, &hp, &refs).unwrap())));
    }
    g.finish();
}

fn hr(c: &mut Criterion) {
    let x: Vec<f64> = (0..600).map(|i| (i as f64 * 0.3).sin()).collect();
    c.bench_function("hr_from_signal 600 samples", |b| b.iter(|| hr_from_signal(black_box(&x), 30.0, DEFAULT_BAND).unwrap()));
}

criterion_group!(benches, attention, conv, training, hr);
criterion_main!(benches);
