use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lrpabn::pooling::{compare_pair, PoolWeights, PoolingConfig, PoolingVariant, ProjectionBank};
use lrpabn_bench::feature_pair;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CHANNELS: usize = 64;
const POSITIONS: usize = 441;

fn pair_forward(c: &mut Criterion) {
    let (q, k) = feature_pair(CHANNELS, POSITIONS, 0);
    let mut group = c.benchmark_group("pair_forward");
    group.sample_size(10);
    for dim in [64, 512] {
        let bank = ProjectionBank::random(CHANNELS, dim, &mut ChaCha8Rng::seed_from_u64(1));
        let full = bank.full_projections();
        for (variant, weights) in [
            (PoolingVariant::LowrankFactorized, PoolWeights::Factorized(&bank)),
            (PoolingVariant::LowrankFull, PoolWeights::Full(&full)),
        ] {
            let config = PoolingConfig {
                variant,
                dim,
                ..PoolingConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(variant.to_string(), dim), &dim, |b, _| {
                b.iter(|| compare_pair(&config, weights, &q, &k, (0, 0)).unwrap())
            });
        }
    }
    for variant in [PoolingVariant::PairwiseOuter, PoolingVariant::ConcatBaseline] {
        let config = PoolingConfig {
            variant,
            ..PoolingConfig::default()
        };
        group.bench_function(variant.to_string(), |b| {
            b.iter(|| compare_pair(&config, PoolWeights::None, &q, &k, (0, 0)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pair_forward);
criterion_main!(benches);
