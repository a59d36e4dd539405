//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the report is always printed.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrpabn::data::{generate_synthetic, SynthSpec};
use lrpabn::episodes::{ClassSplit, EpisodeSampler, Sample, Source};
use lrpabn::model::RandomScorer;
use lrpabn::pooling::{
    compare_pair, lowrank_factorized_grid, lowrank_full_grid, pairwise_outer_matrix, self_bilinear_oracle, PoolWeights,
};
use lrpabn::sweep::{run_sweep, time_pair_forward, SweepConfig};
use lrpabn::train::{evaluate, run_training, EvalReport, CHECKPOINT_FILE, METRICS_FILE};
use lrpabn::verify::{full_suite, DEFAULT_SAMPLES, DEFAULT_TOLERANCE};
use lrpabn::{
    AlignMode, EncoderConfig, EpisodeSpec, FeatureMap, LabeledDataset, Model, ModelConfig, Normalization, PoolingConfig,
    PoolingVariant, ProjectionBank, Tensor, TrainConfig,
};

const GRADCHECK_BUDGET_SECS: f64 = 120.0;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_INSTANCES: usize = 100;
const RANK1_BUDGET_SECS: f64 = 10.0;
const EPISODE_DRAWS: usize = 10_000;
const IDENTITY_TOL: f64 = 1e-6;
const LEARNING_TARGET: f64 = 85.0;
const LEARNING_GAP: f64 = 5.0;
const ALIGN_SLACK: f64 = 1.0;
const LEARNING_BUDGET_SECS: f64 = 3600.0;
const MAX_TRAIN_EPISODES: usize = 5000;
const EVAL_EPISODES: usize = 600;
const RANDOM_EPISODES: usize = 1000;
const RANDOM_SE_BAND: f64 = 3.0;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn random_map(c: usize, hw: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::from_array(Array2::from_shape_fn((c, hw), |_| rng.random_range(-1.0..1.0)))
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let rows = full_suite(DEFAULT_TOLERANCE, DEFAULT_SAMPLES, 0).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = rows.iter().filter(|row| !row.report.passed()).map(|row| row.name.as_str()).collect();
    let thin = rows.iter().filter(|row| row.report.checked < DEFAULT_SAMPLES).count();
    let worst = rows.iter().map(|row| row.report.worst_relative).fold(0.0, f64::max);
    r.line(
        1,
        "gradient suite",
        failed.is_empty() && thin == 0 && secs < GRADCHECK_BUDGET_SECS,
        format!(
            "{} cases, worst rel {worst:.2e} < {DEFAULT_TOLERANCE:e}, {thin} under {DEFAULT_SAMPLES} coords, failed {failed:?}, {secs:.1}s",
            rows.len()
        ),
    );
}

fn rank_one_equivalence(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let (c, n, hw) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=9));
        let (a, b) = (random_map(c, hw, &mut rng), random_map(c, hw, &mut rng));
        let bank = ProjectionBank::random(c, n, &mut rng);
        let full = bank.full_projections();
        let zf = lowrank_factorized_grid(&a, &b, &bank).unwrap();
        let zw = lowrank_full_grid(&a, &b, &full).unwrap();
        worst = worst.max(max_abs_diff(&flat(&zf), &flat(&zw)));
        for normalization in [Normalization::None, Normalization::SignedSqrtL2] {
            let cfg = |variant| PoolingConfig {
                variant,
                dim: n,
                normalization,
                projection_norm: false,
            };
            let f = compare_pair(&cfg(PoolingVariant::LowrankFactorized), PoolWeights::Factorized(&bank), &a, &b, (0, 0));
            let g = compare_pair(&cfg(PoolingVariant::LowrankFull), PoolWeights::Full(&full), &a, &b, (0, 0));
            worst = worst.max(max_abs_diff(&f.unwrap().values, &g.unwrap().values));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        2,
        "rank-1 equivalence",
        worst < ORACLE_TOL && secs < RANK1_BUDGET_SECS,
        format!("{ORACLE_INSTANCES} instances, max |diff| {worst:.2e} < {ORACLE_TOL:e}, {secs:.3}s"),
    );
}

fn outer_product_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut self_worst, mut loop_worst): (f64, f64) = (0.0, 0.0);
    let cfg = PoolingConfig {
        variant: PoolingVariant::PairwiseOuter,
        normalization: Normalization::None,
        ..PoolingConfig::default()
    };
    for _ in 0..ORACLE_INSTANCES {
        let (c, hw) = (rng.random_range(1..=8), rng.random_range(1..=9));
        let (x, y) = (random_map(c, hw, &mut rng), random_map(c, hw, &mut rng));
        let own = compare_pair(&cfg, PoolWeights::None, &x, &x, (0, 0)).unwrap().values;
        let oracle = self_bilinear_oracle(&x) * hw as f64;
        self_worst = self_worst.max(max_abs_diff(&own, &flat(&oracle)));

        let got = pairwise_outer_matrix(&x, &y).unwrap();
        let (xv, yv) = (x.values(), y.values());
        let mut naive = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                for j in 0..hw {
                    naive[a * c + b] += xv[[a, j]] * yv[[b, j]];
                }
            }
        }
        loop_worst = loop_worst.max(max_abs_diff(&flat(&got), &naive));
        let pooled = compare_pair(&cfg, PoolWeights::None, &x, &y, (0, 0)).unwrap().values;
        loop_worst = loop_worst.max(max_abs_diff(&pooled, &naive));
    }
    r.line(
        3,
        "outer-product oracle",
        self_worst < ORACLE_TOL && loop_worst < ORACLE_TOL,
        format!("self vs hw*oracle {self_worst:.2e}, vs triple loop {loop_worst:.2e}, tol {ORACLE_TOL:e}"),
    );
}

fn parameter_counts(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank = ProjectionBank::random(64, 512, &mut rng);
    let cfg = SweepConfig {
        dims: vec![512],
        variants: vec![PoolingVariant::LowrankFactorized, PoolingVariant::LowrankFull],
        positions: 1,
        ..SweepConfig::default()
    };
    let rows = run_sweep(&cfg).expect("sweep runs");
    let count = |v| rows.iter().find(|row| row.variant == v).map(|row| row.params).unwrap();
    let (fact, full) = (count(PoolingVariant::LowrankFactorized), count(PoolingVariant::LowrankFull));
    let small_bank_ok = (1..=8).all(|c| (1..=8).all(|n| ProjectionBank::random(c, n, &mut rng).param_count() == 2 * n * c));
    let t_fact = time_pair_forward(PoolingVariant::LowrankFactorized, 512, 64, 441, 5, 0).unwrap();
    let t_full = time_pair_forward(PoolingVariant::LowrankFull, 512, 64, 441, 5, 0).unwrap();
    r.line(
        4,
        "parameter counts",
        bank.param_count() == 65_536 && fact == 65_536 && full == 2_097_152 && small_bank_ok && t_fact < t_full,
        format!(
            "bank {} (2nc), bench {fact} vs {full}, pair forward {:.1}us vs {:.1}us",
            bank.param_count(),
            t_fact * 1e6,
            t_full * 1e6
        ),
    );
}

fn shape_contract(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Tensor::from_fn(&[3, 84, 84], |_| rng.random_range(0.0..1.0));
    let mut bad = Vec::new();
    for variant in PoolingVariant::ALL {
        for align in AlignMode::ALL {
            let config = ModelConfig {
                encoder: EncoderConfig {
                    align,
                    ..EncoderConfig::default()
                },
                pooling: PoolingConfig {
                    variant,
                    ..PoolingConfig::default()
                },
                ..ModelConfig::default()
            };
            let model = Model::new(config, 0).expect("default model builds");
            let map = model.embed(&image).expect("embed runs");
            if (map.channels(), map.positions()) != (64, 441) {
                bad.push(format!("{variant}/{align}: ({}, {})", map.channels(), map.positions()));
            }
        }
    }
    r.line(
        5,
        "shape contract",
        bad.is_empty(),
        format!("3x84x84 -> (64, 441) over 16 configurations, mismatches {bad:?}"),
    );
}

fn episode_invariants(r: &mut Report) {
    let (classes, per_class) = (30, 25);
    let samples = (0..classes * per_class)
        .map(|i| Sample {
            image: Tensor::zeros(&[1, 1, 1]),
            label: i % classes,
        })
        .collect();
    let ds = LabeledDataset::from_samples(samples);
    let sampler = EpisodeSampler::new(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..EPISODE_DRAWS {
        let pool_size = rng.random_range(2..=classes);
        let pool: Vec<usize> = rand::seq::index::sample(&mut rng, classes, pool_size).into_vec();
        let spec = EpisodeSpec::new(
            rng.random_range(2..=pool_size.min(10)),
            rng.random_range(1..=5),
            rng.random_range(1..=per_class - 5),
            Source::Train,
        )
        .unwrap();
        let ep = sampler.sample(&pool, &spec, &mut rng).expect("feasible episode");
        let label = |i: usize| ds.samples()[i].label;
        let class_set: BTreeSet<usize> = ep.classes.iter().copied().collect();
        let support: BTreeSet<usize> = ep.support.iter().copied().collect();
        let query: BTreeSet<usize> = ep.query.iter().copied().collect();
        let ok = ep.classes.len() == spec.way
            && class_set.len() == spec.way
            && ep.classes.iter().all(|c| pool.contains(c))
            && support.len() == ep.support.len()
            && query.len() == ep.query.len()
            && support.is_disjoint(&query)
            && (0..spec.way).all(|k| {
                ep.support_classes.iter().filter(|&&c| c == k).count() == spec.shot
                    && ep.query_classes.iter().filter(|&&c| c == k).count() == spec.query
            })
            && ep.support.iter().zip(&ep.support_classes).all(|(&i, &k)| label(i) == ep.classes[k])
            && ep.query.iter().zip(&ep.query_classes).all(|(&i, &k)| label(i) == ep.classes[k])
            && ep.support.iter().map(|&i| label(i)).collect::<BTreeSet<_>>() == class_set
            && ep.query.iter().map(|&i| label(i)).collect::<BTreeSet<_>>() == class_set;
        if !ok {
            violations += 1;
        }
    }
    r.line(
        6,
        "episode invariants",
        violations == 0,
        format!("{EPISODE_DRAWS} episodes, {violations} violations"),
    );
}

struct LearningRun {
    report: EvalReport,
    secs: f64,
}

fn learning_benchmark() -> (SynthSpec, ClassSplit) {
    let spec = SynthSpec {
        classes: 25,
        per_class: 30,
        image_size: 20,
        families: 5,
        patch: 6,
        jitter: 3,
        sigma: 0.05,
    };
    (spec, ClassSplit::with_counts(25, 20, 0, 5, 0).unwrap())
}

fn learning_model(variant: PoolingVariant, align: AlignMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 20,
            filters: 32,
            align,
            ..EncoderConfig::default()
        },
        pooling: PoolingConfig {
            variant,
            dim: 128,
            ..PoolingConfig::default()
        },
        comparator_hidden: 8,
        class_mean: false,
    }
}

fn learning_train_config() -> TrainConfig {
    TrainConfig {
        episodes: 1000,
        lr: 1e-3,
        seed: 0,
        episode: EpisodeSpec::new(5, 1, 10, Source::Train).unwrap(),
        ..TrainConfig::default()
    }
}

fn learn(variant: PoolingVariant, align: AlignMode, ds: &LabeledDataset, split: &ClassSplit) -> LearningRun {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut out = run_training(&learning_model(variant, align), &learning_train_config(), ds, &split.train, dir.path())
        .expect("training runs");
    let test = EpisodeSpec::new(5, 1, 15, Source::Test).unwrap();
    let report = evaluate(&mut out.model, ds, &split.test, &test, EVAL_EPISODES, 1).expect("evaluation runs");
    let secs = start.elapsed().as_secs_f64();
    println!("      {variant}/{align}: {} in {secs:.0}s", report.summary());
    LearningRun { report, secs }
}

fn learning_and_alignment(r: &mut Report) {
    let (spec, split) = learning_benchmark();
    let ds = generate_synthetic(&spec, 0).unwrap().dataset;
    let budget = learning_train_config().episodes;

    let cpt = learn(PoolingVariant::LowrankFactorized, AlignMode::Cpt, &ds, &split);
    let concat = learn(PoolingVariant::ConcatBaseline, AlignMode::Cpt, &ds, &split);
    r.line(
        7,
        "learning check",
        cpt.report.mean >= LEARNING_TARGET
            && budget <= MAX_TRAIN_EPISODES
            && cpt.secs < LEARNING_BUDGET_SECS
            && cpt.report.mean - concat.report.mean >= LEARNING_GAP,
        format!(
            "factorized n=128 cpt {:.2}% (>= {LEARNING_TARGET}%), concat {:.2}% (gap >= {LEARNING_GAP}pp), {budget} episodes, {:.0}s",
            cpt.report.mean, concat.report.mean, cpt.secs
        ),
    );

    let none = learn(PoolingVariant::LowrankFactorized, AlignMode::None, &ds, &split);
    let model = Model::new(learning_model(PoolingVariant::LowrankFactorized, AlignMode::Cpt), 0).unwrap();
    let mut deviation: f64 = 0.0;
    for sample in ds.samples().iter().step_by(97) {
        let map = model.embed(&sample.image).unwrap();
        let t = model.generate_transform(&map).unwrap().expect("cpt has a generator");
        deviation = deviation.max(t.max_deviation_from_identity());
    }
    r.line(
        8,
        "alignment effect",
        cpt.report.mean >= none.report.mean - ALIGN_SLACK && deviation < IDENTITY_TOL,
        format!(
            "cpt {:.2}% vs none {:.2}% (slack {ALIGN_SLACK}pp), init max |T-I| {deviation:.1e} < {IDENTITY_TOL:e}",
            cpt.report.mean, none.report.mean
        ),
    );
}

fn evaluation_statistics(r: &mut Report) {
    let hand = EvalReport::from_accuracies(vec![60.0, 80.0, 40.0, 100.0, 70.0]);
    // mean 70, sample variance 2000/4 = 500, half-width 1.96 * sqrt(500 / 5)
    let hand_ok = (hand.mean - 70.0).abs() < ORACLE_TOL && (hand.ci - 19.6).abs() < ORACLE_TOL;

    let spec = SynthSpec {
        classes: 10,
        per_class: 20,
        image_size: 4,
        patch: 2,
        jitter: 1,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec, 9).unwrap().dataset;
    let pool: Vec<usize> = (0..10).collect();
    let test = EpisodeSpec::new(5, 1, 15, Source::Test).unwrap();
    let random = evaluate(&mut RandomScorer::new(9), &ds, &pool, &test, RANDOM_EPISODES, 9).unwrap();
    let se = random.ci / 1.96;
    let random_ok = (random.mean - 20.0).abs() <= RANDOM_SE_BAND * se;
    r.line(
        9,
        "evaluation statistics",
        hand_ok && random_ok,
        format!(
            "hand ci {:.12} (19.6), random scorer {:.2}% +- {:.2} ({RANDOM_SE_BAND} se) over {RANDOM_EPISODES}",
            hand.ci,
            random.mean,
            RANDOM_SE_BAND * se
        ),
    );
}

fn reproducibility(r: &mut Report) {
    let spec = SynthSpec {
        classes: 8,
        per_class: 6,
        image_size: 8,
        patch: 3,
        jitter: 1,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec, 10).unwrap().dataset;
    let mut model = learning_model(PoolingVariant::LowrankFactorized, AlignMode::Cpt);
    model.encoder.image_size = 8;
    model.encoder.filters = 4;
    model.pooling.dim = 8;
    let train = TrainConfig {
        episodes: 30,
        seed: 10,
        episode: EpisodeSpec::new(3, 1, 2, Source::Train).unwrap(),
        hflip: true,
        ..TrainConfig::default()
    };
    let pool: Vec<usize> = (0..8).collect();
    let runs: Vec<(Vec<u8>, Vec<u8>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            run_training(&model, &train, &ds, &pool, dir.path()).expect("training runs");
            (
                std::fs::read(dir.path().join(METRICS_FILE)).unwrap(),
                std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
            )
        })
        .collect();
    let (metrics_same, ckpt_same) = (runs[0].0 == runs[1].0, runs[0].1 == runs[1].1);
    r.line(
        10,
        "reproducibility",
        metrics_same && ckpt_same,
        format!(
            "metrics identical {metrics_same} ({} bytes), checkpoint identical {ckpt_same} ({} bytes)",
            runs[0].0.len(),
            runs[0].1.len()
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    gradient_suite(&mut r);
    rank_one_equivalence(&mut r);
    outer_product_oracle(&mut r);
    parameter_counts(&mut r);
    shape_contract(&mut r);
    episode_invariants(&mut r);
    learning_and_alignment(&mut r);
    evaluation_statistics(&mut r);
    reproducibility(&mut r);
    println!("acceptance: {} of 10 criteria failed", r.failures);
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
