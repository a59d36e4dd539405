//! Dual-update episodic training, Adam with step decay, checkpointing and
//! evaluation with 95% confidence intervals.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::comparator::{predict, RelationMatrix};
use crate::episodes::{EpisodeSampler, EpisodeSpec, LabeledDataset, Source};
use crate::error::{Error, Result};
use crate::model::{EpisodeBatch, EpisodeScorer, Model, ModelConfig, ALIGNMENT_PHASE_PREFIXES};
use crate::params::{ModelParams, ParamId};
use crate::tensor::{Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.lrpc";
pub const METRICS_HEADER: &str = "episode,align_loss,relation_loss,lr";

/// z-value of a two-sided 95% interval.
pub const CI_Z: f64 = 1.96;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Episodes sampled and stepped on per training iteration.
    pub tasks_per_episode: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
    pub episode: EpisodeSpec,
    /// Checkpoint period in episodes; 0 writes only the initial and final ones.
    pub checkpoint_every: usize,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 5_000,
            tasks_per_episode: 1,
            lr: 1e-3,
            decay_every: 10_000,
            decay_factor: 0.5,
            seed: 0,
            episode: EpisodeSpec {
                way: 5,
                shot: 1,
                query: 15,
                source: Source::Train,
            },
            checkpoint_every: 0,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} outside (0, 1]", self.decay_factor)));
        }
        if self.decay_every == 0 || self.tasks_per_episode == 0 {
            return Err(Error::Config("decay period and tasks per episode must be >= 1".into()));
        }
        self.episode.validate()
    }

    /// `lr · factor^⌊episode / decay_every⌋`.
    pub fn learning_rate(&self, episode: usize) -> f64 {
        self.lr * self.decay_factor.powi((episode / self.decay_every) as i32)
    }
}

/// Adaptive moment estimation with one step counter per parameter, so a
/// parameter skipped by an update phase keeps its own bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let i = params.ids().position(|p| p == *id).expect("parameter of this model");
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(*id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub align_loss: Option<f64>,
    pub relation_loss: f64,
    /// Optimizer updates applied: 2 with alignment, 1 without.
    pub updates: usize,
}

fn non_finite(params: &ModelParams, what: &str) -> Error {
    let dump: Vec<String> = params.norms().into_iter().map(|(n, v)| format!("{n}={v:.6e}")).collect();
    error!("non-finite {what}; parameter norms: {}", dump.join(" "));
    Error::NonFinite(format!("{what}; parameter norms: {}", dump.join(", ")))
}

fn gradients_for(
    model: &Model,
    tape: &Tape,
    loss: crate::tensor::Var,
    bound: &crate::params::Bound,
    filter: impl Fn(&str) -> bool,
) -> Result<Vec<(ParamId, Tensor)>> {
    let grads = tape.backward(loss)?;
    let out: Vec<(ParamId, Tensor)> = model
        .params()
        .ids()
        .filter(|&id| filter(model.params().name(id)))
        .map(|id| (id, grads.wrt(bound.var(id))))
        .collect();
    if out.iter().any(|(_, g)| !g.is_finite()) {
        return Err(non_finite(model.params(), "gradient"));
    }
    Ok(out)
}

/// One iteration: the alignment update (when enabled), then a fresh forward
/// pass and the relation update on all parameters.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &EpisodeBatch, lr: f64) -> Result<StepOutcome> {
    let mut updates = 0;
    let mut align_loss = None;
    {
        let mut tape = Tape::new();
        let bound = model.params().attach(&mut tape);
        if let Some(loss) = model.alignment_phase_objective(&mut tape, &bound, batch)? {
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(non_finite(model.params(), "alignment loss"));
            }
            let grads = gradients_for(model, &tape, loss, &bound, |n| {
                ALIGNMENT_PHASE_PREFIXES.iter().any(|p| n.starts_with(p))
            })?;
            drop(tape);
            adam.step(model.params_mut(), &grads, lr);
            align_loss = Some(value);
            updates += 1;
        }
    }
    let mut tape = Tape::new();
    let bound = model.params().attach(&mut tape);
    let loss = model.relation_objective(&mut tape, &bound, batch)?;
    let relation_loss = tape.value(loss).item();
    if !relation_loss.is_finite() {
        return Err(non_finite(model.params(), "relation loss"));
    }
    let grads = gradients_for(model, &tape, loss, &bound, |_| true)?;
    drop(tape);
    adam.step(model.params_mut(), &grads, lr);
    updates += 1;
    Ok(StepOutcome {
        align_loss,
        relation_loss,
        updates,
    })
}

pub fn metrics_row(episode: usize, align: Option<f64>, relation: f64, lr: f64) -> String {
    let align = align.map(|a| a.to_string()).unwrap_or_default();
    format!("{episode},{align},{relation},{lr}")
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub last: Option<StepOutcome>,
}

/// Trains on episodes drawn from `pool` classes, writing `metrics.csv` and
/// `model.lrpc` into `out`.
pub fn run_training(
    model_config: &ModelConfig,
    config: &TrainConfig,
    dataset: &LabeledDataset,
    pool: &[usize],
    out: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let mut adam = Adam::new(model.params());
    let sampler = EpisodeSampler::new(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let metrics_path = out.join(METRICS_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    save_checkpoint(&ckpt_path, model.params())?;

    let mut last = None;
    let result = (|| -> Result<()> {
        for ep in 0..config.episodes {
            let lr = config.learning_rate(ep);
            let (mut align_sum, mut rel_sum) = (0.0, 0.0);
            let mut outcome = None;
            for _ in 0..config.tasks_per_episode {
                let episode = sampler.sample(pool, &config.episode, &mut rng)?;
                let batch = if config.hflip {
                    EpisodeBatch::gather(dataset, &episode, Some(&mut rng))?
                } else {
                    EpisodeBatch::gather(dataset, &episode, None)?
                };
                let o = train_step(&mut model, &mut adam, &batch, lr)?;
                align_sum += o.align_loss.unwrap_or(0.0);
                rel_sum += o.relation_loss;
                outcome = Some(o);
            }
            let tasks = config.tasks_per_episode as f64;
            let o = outcome.expect("at least one task");
            let align = o.align_loss.map(|_| align_sum / tasks);
            writeln!(metrics, "{}", metrics_row(ep, align, rel_sum / tasks, lr))?;
            last = Some(o);
            if config.checkpoint_every > 0 && (ep + 1) % config.checkpoint_every == 0 {
                metrics.flush()?;
                save_checkpoint(&ckpt_path, model.params())?;
                info!("episode {}: relation loss {:.4}", ep + 1, rel_sum / tasks);
            }
        }
        Ok(())
    })();
    let flushed = metrics.flush();
    result?;
    flushed?;
    save_checkpoint(&ckpt_path, model.params())?;
    Ok(TrainOutcome {
        model,
        metrics: metrics_path,
        checkpoint: ckpt_path,
        last,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean accuracy in percent.
    pub mean: f64,
    /// Half-width of the 95% interval, `1.96 · s / √N` with the sample
    /// standard deviation `s`.
    pub ci: f64,
    pub episodes: usize,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        let mean = if n == 0 { 0.0 } else { accuracies.iter().sum::<f64>() / n as f64 };
        let ci = if n < 2 {
            0.0
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            CI_Z * var.sqrt() / (n as f64).sqrt()
        };
        EvalReport {
            mean,
            ci,
            episodes: n,
            accuracies,
        }
    }

    pub fn summary(&self) -> String {
        format!("acc={:.2}% ci={:.2} n={}", self.mean, self.ci, self.episodes)
    }

    pub fn metrics_row(&self) -> String {
        format!("eval,{},{},{}", self.mean, self.ci, self.episodes)
    }
}

/// Percentage of queries whose top-scoring class is their own.
pub fn episode_accuracy(scores: &RelationMatrix, query_classes: &[usize]) -> f64 {
    let hits = predict(scores).iter().zip(query_classes).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / query_classes.len() as f64
}

pub fn evaluate(
    scorer: &mut dyn EpisodeScorer,
    dataset: &LabeledDataset,
    pool: &[usize],
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let sampler = EpisodeSampler::new(dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let episode = sampler.sample(pool, spec, &mut rng)?;
        let batch = EpisodeBatch::gather(dataset, &episode, None)?;
        let scores = scorer.score(&batch)?;
        accs.push(episode_accuracy(&scores, &batch.query_classes));
    }
    Ok(EvalReport::from_accuracies(accs))
}

pub fn append_eval_row(metrics: &Path, report: &EvalReport) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(metrics)?;
    writeln!(f, "{}", report.metrics_row())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AlignMode, EncoderConfig};
    use crate::episodes::{sample_episode, Sample};
    use crate::model::{OracleScorer, RandomScorer};
    use crate::pooling::{PoolingConfig, PoolingVariant};
    use rand::Rng;

    fn tiny_model(align: AlignMode) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                filters: 4,
                blocks: 2,
                pooled_blocks: 1,
                align,
                ..EncoderConfig::default()
            },
            pooling: PoolingConfig {
                variant: PoolingVariant::LowrankFactorized,
                dim: 6,
                ..PoolingConfig::default()
            },
            comparator_hidden: 5,
            class_mean: false,
        }
    }

    fn tiny_data() -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = (0..24)
            .map(|i| Sample {
                image: Tensor::from_fn(&[3, 8, 8], |j| {
                    let signal = if j % 5 == i % 3 { 0.8 } else { 0.2 };
                    signal + 0.05 * rng.random::<f64>()
                }),
                label: i % 3,
            })
            .collect();
        LabeledDataset::from_samples(samples)
    }

    fn batch(ds: &LabeledDataset, seed: u64) -> EpisodeBatch {
        let spec = EpisodeSpec::new(3, 1, 2, Source::Train).unwrap();
        let ep = sample_episode(ds, &[0, 1, 2], &spec, seed).unwrap();
        EpisodeBatch::gather(ds, &ep, None).unwrap()
    }

    #[test]
    fn schedule_halves_every_period() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate(0), 0.001);
        assert_eq!(c.learning_rate(9_999), 0.001);
        assert_eq!(c.learning_rate(25_000), 0.00025);
    }

    #[test]
    fn update_count_follows_alignment_mode() {
        let ds = tiny_data();
        let b = batch(&ds, 1);
        for (align, expected) in [(AlignMode::None, 1), (AlignMode::Cpt, 2), (AlignMode::Niv, 2)] {
            let mut m = Model::new(tiny_model(align), 0).unwrap();
            let mut adam = Adam::new(m.params());
            let o = train_step(&mut m, &mut adam, &b, 1e-3).unwrap();
            assert_eq!(o.updates, expected);
            assert_eq!(o.align_loss.is_some(), expected == 2);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let ds = tiny_data();
        let mut m = Model::new(tiny_model(AlignMode::Cpt), 0).unwrap();
        let before = m.params().clone();
        let mut adam = Adam::new(m.params());
        train_step(&mut m, &mut adam, &batch(&ds, 2), 0.0).unwrap();
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn alignment_phase_leaves_head_untouched() {
        let ds = tiny_data();
        let b = batch(&ds, 3);
        let mut m = Model::new(tiny_model(AlignMode::Cpt), 0).unwrap();
        let before = m.params().clone();
        let mut tape = Tape::new();
        let bound = m.params().attach(&mut tape);
        let loss = m.alignment_phase_objective(&mut tape, &bound, &b).unwrap().unwrap();
        let grads = gradients_for(&m, &tape, loss, &bound, |n| {
            ALIGNMENT_PHASE_PREFIXES.iter().any(|p| n.starts_with(p))
        })
        .unwrap();
        drop(tape);
        Adam::new(m.params()).step(m.params_mut(), &grads, 1e-2);
        for (name, t) in m.params().iter() {
            let unchanged = t == before.get(name).unwrap();
            if name.starts_with("pool.") || name.starts_with("comparator.") {
                assert!(unchanged, "{name} moved in the alignment phase");
            }
        }
        assert_ne!(m.params(), &before);
    }

    #[test]
    fn repeated_steps_reduce_smoothed_loss() {
        let ds = tiny_data();
        let b = batch(&ds, 4);
        let mut m = Model::new(tiny_model(AlignMode::Cpt), 5).unwrap();
        let mut adam = Adam::new(m.params());
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut m, &mut adam, &b, 1e-3).unwrap().relation_loss)
            .collect();
        let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "smoothed loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn ci_hand_example() {
        let r = EvalReport::from_accuracies(vec![60.0, 80.0, 40.0, 100.0, 70.0]);
        assert_eq!(r.mean, 70.0);
        // Sample variance 500, s = 22.3607, 1.96 s / sqrt 5 = 19.6.
        assert!((r.ci - 19.6).abs() < 1e-12);
        assert_eq!(r.summary(), "acc=70.00% ci=19.60 n=5");
    }

    #[test]
    fn perfect_scorer_has_zero_width() {
        let ds = tiny_data();
        let spec = EpisodeSpec::new(3, 1, 2, Source::Test).unwrap();
        let r = evaluate(&mut OracleScorer, &ds, &[0, 1, 2], &spec, 20, 0).unwrap();
        assert_eq!((r.mean, r.ci, r.episodes), (100.0, 0.0, 20));
        let r = evaluate(&mut RandomScorer::new(1), &ds, &[0, 1, 2], &spec, 20, 0).unwrap();
        assert!(r.accuracies.iter().all(|a| (0.0..=100.0).contains(a)));
    }

    #[test]
    fn zero_episodes_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            episodes: 0,
            episode: EpisodeSpec::new(3, 1, 2, Source::Train).unwrap(),
            ..TrainConfig::default()
        };
        let out = run_training(&tiny_model(AlignMode::Cpt), &cfg, &tiny_data(), &[0, 1, 2], dir.path()).unwrap();
        assert!(out.last.is_none());
        assert_eq!(fs::read_to_string(out.metrics).unwrap(), format!("{METRICS_HEADER}\n"));
        let fresh = Model::new(tiny_model(AlignMode::Cpt), cfg.seed).unwrap();
        let saved = crate::checkpoint::load_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(crate::checkpoint::encode(&saved).unwrap(), crate::checkpoint::encode(fresh.params()).unwrap());
    }

    #[test]
    fn metrics_rows() {
        assert_eq!(metrics_row(3, None, 0.5, 0.001), "3,,0.5,0.001");
        assert_eq!(metrics_row(0, Some(0.25), 1.0, 0.001), "0,0.25,1,0.001");
    }
}
