use criterion::{criterion_group, criterion_main, Criterion};
use lrpabn::encoder::AlignMode;
use lrpabn::model::{Model, ModelConfig};
use lrpabn::pooling::{PoolingConfig, PoolingVariant};
use lrpabn_bench::image;

fn embed(c: &mut Criterion) {
    // Alignment off keeps construction cheap; the encoder is identical.
    let mut config = ModelConfig {
        pooling: PoolingConfig {
            variant: PoolingVariant::PairwiseOuter,
            ..PoolingConfig::default()
        },
        ..ModelConfig::default()
    };
    config.encoder.align = AlignMode::None;
    let model = Model::new(config, 0).unwrap();
    let img = image(84, 0);
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    group.bench_function("embed_84x84", |b| b.iter(|| model.embed(&img).unwrap()));
    group.finish();
}

criterion_group!(benches, embed);
criterion_main!(benches);
