use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use taylorformer::attention::{build_tmsa, AttentionConfig};
use taylorformer::costmodel::AttentionPath;
use taylorformer::nn::Bound;
use taylorformer::Tape;
use taylorformer_bench::{image, qkv};

fn paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    g.sample_size(10);
    for n in [256, 1024, 4096] {
        let [q, k, v] = qkv(16, n, 1);
        g.throughput(Throughput::Elements(n as u64));
        for path in AttentionPath::ALL {
            g.bench_with_input(BenchmarkId::new(path.name(), n), &n, |b, _| {
                b.iter(|| path.run(&q, &k, &v).unwrap())
            });
        }
    }
    g.finish();
}

fn tmsa_block(c: &mut Criterion) {
    let (m, store) = build_tmsa::<f32>(&AttentionConfig::new(16, 2), 0).unwrap();
    let x = image(16, 32, 32, 2);
    c.bench_function("tmsa_forward_16x32x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = Bound::constants(&tape, &store);
            m.forward(&p, tape.constant(x.clone())).unwrap().value()
        })
    });
}

criterion_group!(benches, paths, tmsa_block);
criterion_main!(benches);
