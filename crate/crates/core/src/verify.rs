//! Finite-difference gradient suites for every tape operator and for the
//! assembled network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment;
use crate::encoder::{AlignMode, EncoderConfig};
use crate::episodes::{sample_episode, EpisodeSpec, LabeledDataset, Sample, Source};
use crate::error::Result;
use crate::model::{EpisodeBatch, Model, ModelConfig};
use crate::params::{Bound, ModelParams};
use crate::pooling::{Normalization, PoolingConfig, PoolingVariant};
use crate::tensor::{finite_diff_check, GradReport, Tape, Tensor, Var};

/// Gradient check tolerance used unless a caller overrides it.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per case.
pub const DEFAULT_SAMPLES: usize = 64;

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub report: GradReport,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for operators with a kink or pole there.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts an output with fixed random weights so every entry matters.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let prod = tape.hadamard(out, w)?;
    Ok(tape.sum(prod))
}

fn params_of(inputs: Vec<(&str, Tensor)>) -> ModelParams {
    let mut p = ModelParams::new();
    for (name, t) in inputs {
        p.insert(name, t).expect("distinct names");
    }
    p
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn operator_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ModelParams, OpFn)> {
    let mut cases: Vec<(&'static str, ModelParams, OpFn)> = Vec::new();
    let mut add = |name, inputs, f: OpFn| cases.push((name, params_of(inputs), f));

    add(
        "conv2d",
        vec![
            ("x", random(&[2, 2, 5, 5], -1.0, 1.0, rng)),
            ("k", random(&[3, 2, 3, 3], -1.0, 1.0, rng)),
            ("b", random(&[3], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
    );
    add(
        "conv2d_valid",
        vec![
            ("x", random(&[1, 3, 6, 6], -1.0, 1.0, rng)),
            ("k", random(&[2, 3, 3, 3], -1.0, 1.0, rng)),
            ("b", random(&[2], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 0)),
    );
    add(
        "batchnorm2d",
        vec![
            ("x", random(&[3, 4, 3, 3], -2.0, 2.0, rng)),
            ("gamma", random(&[4], 0.5, 1.5, rng)),
            ("beta", random(&[4], -0.5, 0.5, rng)),
        ],
        Box::new(|t, v| t.batchnorm2d(v[0], v[1], v[2], 1e-5)),
    );
    add(
        "relu",
        vec![("x", away_from_zero(&[8, 9], rng))],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    );
    add(
        "sigmoid",
        vec![("x", random(&[8, 9], -3.0, 3.0, rng))],
        Box::new(|t, v| Ok(t.sigmoid(v[0]))),
    );
    add(
        "signed_sqrt",
        vec![("x", away_from_zero(&[8, 9], rng))],
        Box::new(|t, v| Ok(t.signed_sqrt(v[0]))),
    );
    add(
        "scale_add_scalar",
        vec![("x", random(&[8, 9], -1.0, 1.0, rng))],
        Box::new(|t, v| {
            let s = t.scale(v[0], -1.7);
            Ok(t.add_scalar(s, 0.3))
        }),
    );
    // Distinct values keep the argmax of each window stable under the step.
    let distinct = {
        let mut vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        Tensor::new(&[2, 2, 6, 6], vals).expect("sized")
    };
    add("maxpool2x2", vec![("x", distinct)], Box::new(|t, v| t.maxpool2x2(v[0])));
    add(
        "linear",
        vec![
            ("x", random(&[6, 5], -1.0, 1.0, rng)),
            ("w", random(&[7, 5], -1.0, 1.0, rng)),
            ("b", random(&[7], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
    );
    add(
        "add_sub_hadamard",
        vec![
            ("a", random(&[4, 9], -1.0, 1.0, rng)),
            ("b", random(&[4, 9], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            t.hadamard(s, d)
        }),
    );
    add(
        "matmul",
        vec![
            ("a", random(&[5, 6], -1.0, 1.0, rng)),
            ("b", random(&[6, 7], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    );
    add(
        "batched_matmul",
        vec![
            ("a", random(&[3, 4, 5], -1.0, 1.0, rng)),
            ("b", random(&[3, 5, 2], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.batched_matmul(v[0], v[1])),
    );
    add(
        "sum_axis",
        vec![("x", random(&[3, 5, 6], -1.0, 1.0, rng))],
        Box::new(|t, v| t.sum_axis(v[0], 1)),
    );
    add(
        "mse",
        vec![
            ("a", random(&[6, 6], -1.0, 1.0, rng)),
            ("b", random(&[6, 6], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.mse(v[0], v[1])),
    );
    add(
        "reshape_permute",
        vec![("x", random(&[4, 3, 6], -1.0, 1.0, rng))],
        Box::new(|t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            t.reshape(p, &[6, 12])
        }),
    );
    add(
        "index_select",
        vec![("x", random(&[5, 3, 5], -1.0, 1.0, rng))],
        Box::new(|t, v| t.index_select(v[0], &[4, 0, 0, 2, 4, 1])),
    );
    add(
        "concat",
        vec![
            ("a", random(&[3, 4, 4], -1.0, 1.0, rng)),
            ("b", random(&[3, 2, 4], -1.0, 1.0, rng)),
        ],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
    );
    add(
        "l2_normalize_rows",
        vec![("x", random(&[6, 11], -1.0, 1.0, rng))],
        Box::new(|t, v| t.l2_normalize_rows(v[0])),
    );
    add(
        "orthogonality_penalty",
        vec![("t", random(&[2, 6, 6], -1.0, 1.0, rng))],
        Box::new(|t, v| alignment::penalty_on_tape(t, v[0])),
    );
    for (name, mode) in [
        ("align_loss_niv", AlignMode::Niv),
        ("align_loss_cpt", AlignMode::Cpt),
        ("align_loss_cosine", AlignMode::Cosine),
    ] {
        add(
            name,
            vec![
                ("query", random(&[3, 4, 6], -1.0, 1.0, rng)),
                ("aligned", random(&[3, 4, 6], -1.0, 1.0, rng)),
            ],
            Box::new(move |t, v| Ok(alignment::loss_on_tape(t, mode, v[0], v[1])?.expect("enabled mode"))),
        );
    }
    cases
}

/// Runs one case; the closure output is probed unless already scalar.
fn check(
    name: &str,
    mut params: ModelParams,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<SuiteRow> {
    let report = finite_diff_check(
        |tape, vars| {
            let out = f(tape, vars)?;
            if tape.value(out).is_scalar() {
                Ok(out)
            } else {
                probe(tape, out, seed)
            }
        },
        &mut params,
        tol,
        samples,
        seed,
    )?;
    Ok(SuiteRow {
        name: name.to_string(),
        report,
    })
}

pub fn operator_suite(tol: f64, samples: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    operator_cases(&mut rng)
        .into_iter()
        .map(|(name, params, f)| check(name, params, &*f, tol, samples, seed))
        .collect()
}

/// Small network used for whole-model checks.
pub fn tiny_model_config(align: AlignMode, variant: PoolingVariant) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 8,
            filters: 4,
            blocks: 4,
            pooled_blocks: 2,
            align,
            ortho_lambda: 0.01,
            ..EncoderConfig::default()
        },
        pooling: PoolingConfig {
            variant,
            dim: 6,
            normalization: Normalization::SignedSqrtL2,
            projection_norm: true,
        },
        comparator_hidden: 5,
        class_mean: false,
    }
}

fn tiny_batch(seed: u64) -> Result<EpisodeBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..12)
        .map(|i| Sample {
            image: random(&[3, 8, 8], 0.0, 1.0, &mut rng),
            label: i % 3,
        })
        .collect();
    let ds = LabeledDataset::from_samples(samples);
    let ep = sample_episode(&ds, &[0, 1, 2], &EpisodeSpec::new(3, 2, 2, Source::Train)?, seed)?;
    EpisodeBatch::gather(&ds, &ep, None)
}

/// Relation loss of every pooling variant, and the alignment objective of
/// every alignment mode, through the whole network.
pub fn model_suite(tol: f64, samples: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let batch = tiny_batch(seed)?;
    let mut rows = Vec::new();
    let mut run = |name: String, model: Model, relation: bool| -> Result<()> {
        let mut params = model.params().clone();
        // Move the generator off its exact identity start so its weights
        // receive non-trivial gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id) == "align.fc2.weight" {
                let t = params.tensor_mut(id);
                for v in t.data_mut() {
                    *v = rng.random_range(-0.05..0.05);
                }
            }
        }
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let bound = Bound::from_vars(vars);
            if relation {
                model.relation_objective(tape, &bound, &batch)
            } else {
                Ok(model
                    .alignment_phase_objective(tape, &bound, &batch)?
                    .expect("alignment enabled"))
            }
        };
        let report = finite_diff_check(f, &mut params, tol, samples, seed)?;
        rows.push(SuiteRow { name, report });
        Ok(())
    };
    for variant in PoolingVariant::ALL {
        let mut config = tiny_model_config(AlignMode::Cpt, variant);
        // Concatenated maps keep the exact zeros of the final ReLU, where the
        // signed square root has no derivative.
        if variant == PoolingVariant::ConcatBaseline {
            config.pooling.normalization = Normalization::L2Only;
        }
        let model = Model::new(config, seed)?;
        run(format!("model_relation_{variant}"), model, true)?;
    }
    for mode in [AlignMode::Niv, AlignMode::Cpt, AlignMode::Cosine] {
        let model = Model::new(tiny_model_config(mode, PoolingVariant::LowrankFactorized), seed)?;
        run(format!("model_alignment_{mode}"), model, false)?;
    }
    Ok(rows)
}

pub fn full_suite(tol: f64, samples: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = operator_suite(tol, samples, seed)?;
    rows.extend(model_suite(tol, samples, seed)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_pass_at_default_tolerance() {
        for row in operator_suite(DEFAULT_TOLERANCE, DEFAULT_SAMPLES, 1).unwrap() {
            assert!(row.report.passed(), "{}: {:?}", row.name, row.report);
            assert!(row.report.checked >= DEFAULT_SAMPLES, "{}", row.name);
        }
    }

    #[test]
    fn whole_model_passes_at_default_tolerance() {
        for row in model_suite(DEFAULT_TOLERANCE, DEFAULT_SAMPLES, 3).unwrap() {
            assert!(row.report.passed(), "{}: {:?}", row.name, row.report);
        }
    }

    #[test]
    fn unattainable_tolerance_fails_somewhere() {
        let rows = operator_suite(1e-14, 16, 2).unwrap();
        assert!(rows.iter().any(|r| !r.report.passed()));
    }
}
