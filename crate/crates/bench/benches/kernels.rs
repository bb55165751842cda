use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use idat_core::data::generate_synthetic;
use idat_core::data::Split;
use idat_core::experiment::{build_state, DataSource};
use idat_core::model::{AdapterSpec, AdapterVariant, Model};
use idat_core::presets::{preset, student_arch};
use idat_core::rng::stream_rng;
use idat_core::{Tape, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 0);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for (m, k, n) in [(17, 64, 64), (544, 64, 256), (544, 256, 64)] {
        let (a, b) = (random(&[m, k], 1), random(&[k, n], 2));
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            &(a, b),
            |bench, (a, b)| {
                bench.iter(|| {
                    let mut tape = Tape::inference();
                    let (x, y) = (
                        tape.constant(a.clone()).unwrap(),
                        tape.constant(b.clone()).unwrap(),
                    );
                    tape.matmul(x, y).unwrap()
                })
            },
        );
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let images = random(&[32, 32, 32, 3], 3);
    let mut g = c.benchmark_group("student_forward_b32");
    for v in AdapterVariant::ALL {
        let mut model = Model::new(student_arch(), &mut stream_rng(0, 1)).unwrap();
        model
            .inject_adapters(AdapterSpec::new(v), &mut stream_rng(0, 2))
            .unwrap();
        g.bench_function(v.short_name(), |bench| {
            bench.iter(|| model.logits(&images).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_b32");
    g.sample_size(20);
    for name in ["baseline-par", "idat-P-kl"] {
        let mut cfg = preset(name).unwrap();
        cfg.pretext.epochs = 0;
        let DataSource::Synthetic { spec, .. } = &cfg.data else {
            unreachable!()
        };
        let data = generate_synthetic(spec, Split::Train).unwrap();
        let batch = data.gather(&(0..32).collect::<Vec<_>>()).unwrap();
        let mut state = build_state(&cfg, 32).unwrap();
        g.bench_function(name, |bench| {
            bench.iter(|| state.train_step(&batch).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, forward, train_step);
criterion_main!(benches);
