use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use otc_core::corpus::{generate_corpus, CorpusConfig};
use otc_core::encoder::Model;
use otc_core::eval_stats::{evaluate, probe_retrieval};
use otc_core::par::{map_slice, ExecMode};
use otc_core::sampler::plan;
use otc_core::trainer::{batch_objective, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [
    ("parallel", ExecMode::Parallel),
    ("sequential", ExecMode::Sequential),
];

fn bench(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap().split;
    let cfg = RunConfig::desk_scale();
    let model =
        Model::init_aligned(&cfg.resolved_model(&corpus).unwrap(), 0, &corpus.alignment).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = plan(&corpus, &cfg.sampler(), &mut rng).unwrap();
    let batches = &batches[..8];

    let mut g = c.benchmark_group("modes");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::new("evaluate", name), &mode, |b, &m| {
            b.iter(|| evaluate(&model, &corpus.test, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("probe_retrieval", name), &mode, |b, &m| {
            b.iter(|| probe_retrieval(&model, &corpus, "en", m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("batch_gradients", name), &mode, |b, &m| {
            b.iter(|| {
                map_slice(m, batches, |batch| {
                    batch_objective(&model, batch, &cfg.otc(), None)
                        .unwrap()
                        .loss_total
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
