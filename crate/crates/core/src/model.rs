//! The assembled network: encoder, optional alignment layer, pairwise pooling
//! and comparator, wired over whole episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, AlignmentTransform, TransformGenerator};
use crate::comparator::{self, Comparator, RelationMatrix};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::episodes::{Episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::pooling::{PoolingConfig, PoolingLayer};
use crate::tensor::{Tape, Tensor, Var};

/// Parameter-name prefixes updated by the alignment phase.
pub const ALIGNMENT_PHASE_PREFIXES: [&str; 2] = ["encoder.", "align."];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub comparator_hidden: usize,
    /// Average instead of sum the support maps of a class.
    pub class_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            pooling: PoolingConfig::default(),
            comparator_hidden: 8,
            class_mean: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pooling.validate()?;
        if self.comparator_hidden == 0 {
            return Err(Error::Config("comparator hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stacked images of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub way: usize,
    /// `[way*shot, C, H, W]`.
    pub support: Tensor,
    pub support_classes: Vec<usize>,
    /// `[way*query, C, H, W]`.
    pub query: Tensor,
    pub query_classes: Vec<usize>,
}

impl EpisodeBatch {
    /// Collects the episode's images; with `flip` each image is mirrored
    /// horizontally with probability one half.
    pub fn gather(dataset: &LabeledDataset, episode: &Episode, mut flip: Option<&mut dyn rand::RngCore>) -> Result<Self> {
        let mut stack = |indices: &[usize]| -> Result<Tensor> {
            let first = dataset
                .samples()
                .get(indices[0])
                .ok_or_else(|| Error::InvalidEpisode(format!("sample {} out of range", indices[0])))?;
            let shape = first.image.shape().to_vec();
            if shape.len() != 3 {
                return Err(Error::shape("episode_batch", format!("image of shape {shape:?}")));
            }
            let mut data = Vec::with_capacity(indices.len() * first.image.len());
            for &i in indices {
                let img = &dataset
                    .samples()
                    .get(i)
                    .ok_or_else(|| Error::InvalidEpisode(format!("sample {i} out of range")))?
                    .image;
                if img.shape() != shape.as_slice() {
                    return Err(Error::shape("episode_batch", format!("{:?} vs {shape:?}", img.shape())));
                }
                let mirror = match flip.as_mut() {
                    Some(rng) => rng.random_bool(0.5),
                    None => false,
                };
                if mirror {
                    let w = shape[2];
                    for row in img.data().chunks(w) {
                        data.extend(row.iter().rev());
                    }
                } else {
                    data.extend_from_slice(img.data());
                }
            }
            let mut full = vec![indices.len()];
            full.extend(shape);
            Tensor::new(&full, data)
        };
        Ok(EpisodeBatch {
            way: episode.way(),
            support: stack(&episode.support)?,
            support_classes: episode.support_classes.clone(),
            query: stack(&episode.query)?,
            query_classes: episode.query_classes.clone(),
        })
    }

    pub fn queries(&self) -> usize {
        self.query_classes.len()
    }
}

/// Tape nodes of one episode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeGraph {
    /// `[m, c, hw]` query maps.
    pub queries: Var,
    /// `[k, c, hw]` class maps after alignment (before, when alignment is off).
    pub classes: Var,
    /// `[k, hw, hw]`, present with alignment.
    pub transforms: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    encoder: Encoder,
    generator: Option<TransformGenerator>,
    pooling: PoolingLayer,
    comparator: Comparator,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let encoder = Encoder::init(&config.encoder, &mut params, &mut rng)?;
        let (c, hw) = (config.encoder.filters, config.encoder.positions());
        let generator = if config.encoder.align.is_enabled() {
            Some(TransformGenerator::init(hw, &mut params, &mut rng)?)
        } else {
            None
        };
        let pooling = PoolingLayer::init(&config.pooling, c, hw, &mut params, &mut rng)?;
        let comparator = Comparator::init(pooling.feature_dim(), config.comparator_hidden, &mut params, &mut rng)?;
        Ok(Model {
            config,
            params,
            encoder,
            generator,
            pooling,
            comparator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn pooling(&self) -> &PoolingLayer {
        &self.pooling
    }

    pub fn has_alignment(&self) -> bool {
        self.generator.is_some()
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn load_params(&mut self, loaded: ModelParams) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} parameters, model has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        let mut next = self.params.clone();
        for (name, value) in loaded.iter() {
            next.set(name, value.clone())?;
        }
        self.params = next;
        Ok(())
    }

    /// Embeds both halves of an episode and builds (aligned) class maps.
    pub fn episode_graph(&self, tape: &mut Tape, bound: &Bound, batch: &EpisodeBatch) -> Result<EpisodeGraph> {
        let k = batch.way;
        let n_support = batch.support_classes.len();
        if batch.support.shape()[0] != n_support || batch.query.shape()[0] != batch.queries() {
            return Err(Error::InvalidEpisode("label lists do not match image stacks".into()));
        }
        if let Some(bad) = batch.support_classes.iter().chain(&batch.query_classes).find(|&&c| c >= k) {
            return Err(Error::InvalidEpisode(format!("class index {bad} in a {k}-way episode")));
        }
        let (c, hw) = (self.config.encoder.filters, self.config.encoder.positions());

        let support_in = tape.constant(batch.support.clone());
        let support = self.encoder.embed(tape, bound, support_in)?;
        let query_in = tape.constant(batch.query.clone());
        let queries = self.encoder.embed(tape, bound, query_in)?;

        let mut counts = vec![0usize; k];
        for &s in &batch.support_classes {
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidEpisode(format!("class {empty} has no support sample")));
        }
        let mean = self.config.class_mean;
        let assign = Tensor::from_fn(&[k, n_support], |i| {
            let (cls, s) = (i / n_support, i % n_support);
            match (batch.support_classes[s] == cls, mean) {
                (false, _) => 0.0,
                (true, false) => 1.0,
                (true, true) => 1.0 / counts[cls] as f64,
            }
        });
        let assign = tape.constant(assign);
        let flat = tape.reshape(support, &[n_support, c * hw])?;
        let classes = tape.matmul(assign, flat)?;
        let classes = tape.reshape(classes, &[k, c, hw])?;

        let (classes, transforms) = match &self.generator {
            Some(g) => {
                let t = g.generate(tape, bound, classes)?;
                (tape.batched_matmul(classes, t)?, Some(t))
            }
            None => (classes, None),
        };
        Ok(EpisodeGraph {
            queries,
            classes,
            transforms,
        })
    }

    /// Mean alignment loss over (query, own class) pairs plus the weighted
    /// orthogonality penalty. `None` when alignment is off.
    pub fn alignment_objective(&self, tape: &mut Tape, graph: &EpisodeGraph, batch: &EpisodeBatch) -> Result<Option<Var>> {
        let Some(t) = graph.transforms else {
            return Ok(None);
        };
        let paired = tape.index_select(graph.classes, &batch.query_classes)?;
        let Some(loss) = alignment::loss_on_tape(tape, self.config.encoder.align, graph.queries, paired)? else {
            return Ok(None);
        };
        let penalty = alignment::penalty_on_tape(tape, t)?;
        let penalty = tape.scale(penalty, self.config.encoder.ortho_lambda);
        Ok(Some(tape.add(loss, penalty)?))
    }

    /// `[m*k, d]` comparative features and `[m, k]` relation scores.
    pub fn relation_graph(&self, tape: &mut Tape, bound: &Bound, graph: &EpisodeGraph, batch: &EpisodeBatch) -> Result<(Var, Var)> {
        let feats = self.pooling.forward(tape, bound, graph.queries, graph.classes)?;
        let scores = self.comparator.forward(tape, bound, feats, batch.queries(), batch.way)?;
        Ok((feats, scores))
    }

    /// Summed squared relation error of the episode.
    pub fn relation_objective(&self, tape: &mut Tape, bound: &Bound, batch: &EpisodeBatch) -> Result<Var> {
        let graph = self.episode_graph(tape, bound, batch)?;
        let (_, scores) = self.relation_graph(tape, bound, &graph, batch)?;
        comparator::loss_on_tape(tape, scores, &batch.query_classes)
    }

    pub fn alignment_phase_objective(&self, tape: &mut Tape, bound: &Bound, batch: &EpisodeBatch) -> Result<Option<Var>> {
        let graph = self.episode_graph(tape, bound, batch)?;
        self.alignment_objective(tape, &graph, batch)
    }

    /// Relation scores and comparative features `[m*k, d]`.
    pub fn score_with_features(&self, batch: &EpisodeBatch) -> Result<(RelationMatrix, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.attach(&mut tape);
        let graph = self.episode_graph(&mut tape, &bound, batch)?;
        let (feats, scores) = self.relation_graph(&mut tape, &bound, &graph, batch)?;
        let rm = RelationMatrix::new(batch.queries(), batch.way, tape.value(scores).data().to_vec())?;
        Ok((rm, tape.value(feats).clone()))
    }

    /// Feature map of one `[C, H, W]` image.
    pub fn embed(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut tape = Tape::new();
        let bound = self.params.attach(&mut tape);
        let x = tape.constant(image.reshape(&shape)?);
        let maps = self.encoder.embed(&mut tape, &bound, x)?;
        FeatureMap::from_batch(tape.value(maps), 0)
    }

    /// Alignment transform for a support (class) map, when alignment is on.
    pub fn generate_transform(&self, support: &FeatureMap) -> Result<Option<AlignmentTransform>> {
        self.generator
            .as_ref()
            .map(|g| g.transform(&self.params, support))
            .transpose()
    }
}

/// Anything that can score an episode, so evaluation can be checked
/// against reference scorers.
pub trait EpisodeScorer {
    fn score(&mut self, batch: &EpisodeBatch) -> Result<RelationMatrix>;
}

impl EpisodeScorer for Model {
    fn score(&mut self, batch: &EpisodeBatch) -> Result<RelationMatrix> {
        Ok(self.score_with_features(batch)?.0)
    }
}

/// Uniform random scores.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    rng: ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        RandomScorer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl EpisodeScorer for RandomScorer {
    fn score(&mut self, batch: &EpisodeBatch) -> Result<RelationMatrix> {
        let scores = (0..batch.queries() * batch.way).map(|_| self.rng.random()).collect();
        RelationMatrix::new(batch.queries(), batch.way, scores)
    }
}

/// Scores 1 for the true class, 0 elsewhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleScorer;

impl EpisodeScorer for OracleScorer {
    fn score(&mut self, batch: &EpisodeBatch) -> Result<RelationMatrix> {
        RelationMatrix::new(
            batch.queries(),
            batch.way,
            comparator::indicator(&batch.query_classes, batch.way).into_data(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AlignMode;
    use crate::episodes::{sample_episode, EpisodeSpec, Sample, Source};
    use crate::pooling::PoolingVariant;

    pub(crate) fn tiny_config(align: AlignMode, variant: PoolingVariant) -> ModelConfig {
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
                variant,
                dim: 6,
                ..PoolingConfig::default()
            },
            comparator_hidden: 5,
            class_mean: false,
        }
    }

    fn tiny_batch(seed: u64) -> EpisodeBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..12)
            .map(|i| Sample {
                image: Tensor::from_fn(&[3, 8, 8], |_| rng.random()),
                label: i % 3,
            })
            .collect();
        let ds = LabeledDataset::from_samples(samples);
        let ep = sample_episode(&ds, &[0, 1, 2], &EpisodeSpec::new(3, 2, 2, Source::Train).unwrap(), seed).unwrap();
        EpisodeBatch::gather(&ds, &ep, None).unwrap()
    }

    #[test]
    fn scores_have_episode_shape_and_range() {
        for variant in PoolingVariant::ALL {
            for align in AlignMode::ALL {
                let mut model = Model::new(tiny_config(align, variant), 1).unwrap();
                let batch = tiny_batch(2);
                let rm = model.score(&batch).unwrap();
                assert_eq!((rm.queries(), rm.classes()), (6, 3));
                assert!(rm.scores().iter().all(|&s| s > 0.0 && s < 1.0));
            }
        }
    }

    #[test]
    fn generator_exists_only_with_alignment() {
        let none = Model::new(tiny_config(AlignMode::None, PoolingVariant::LowrankFactorized), 0).unwrap();
        assert!(!none.has_alignment());
        assert_eq!(none.params().count_with_prefix("align."), 0);
        let cpt = Model::new(tiny_config(AlignMode::Cpt, PoolingVariant::LowrankFactorized), 0).unwrap();
        let map = cpt.embed(&Tensor::full(&[3, 8, 8], 0.3)).unwrap();
        let t = cpt.generate_transform(&map).unwrap().unwrap();
        assert_eq!(t.max_deviation_from_identity(), 0.0);
    }

    #[test]
    fn identity_alignment_leaves_class_maps_untouched() {
        let batch = tiny_batch(5);
        let a = Model::new(tiny_config(AlignMode::Niv, PoolingVariant::PairwiseOuter), 3).unwrap();
        let mut tape = Tape::new();
        let bound = a.params().attach(&mut tape);
        let g = a.episode_graph(&mut tape, &bound, &batch).unwrap();
        let aligned = tape.value(g.classes).clone();
        // Without the generator the class map is the raw support sum.
        let mut b = Model::new(tiny_config(AlignMode::None, PoolingVariant::PairwiseOuter), 3).unwrap();
        for (name, value) in a.params().iter() {
            if !name.starts_with("align.") {
                b.params_mut().set(name, value.clone()).unwrap();
            }
        }
        let mut tape = Tape::new();
        let bound = b.params().attach(&mut tape);
        let g = b.episode_graph(&mut tape, &bound, &batch).unwrap();
        assert!(aligned.max_abs_diff(tape.value(g.classes)) < 1e-12);
    }

    #[test]
    fn load_params_rejects_mismatch() {
        let mut a = Model::new(tiny_config(AlignMode::Cpt, PoolingVariant::LowrankFactorized), 0).unwrap();
        let b = Model::new(tiny_config(AlignMode::None, PoolingVariant::LowrankFactorized), 0).unwrap();
        assert!(matches!(a.load_params(b.params().clone()), Err(Error::Incompatible(_))));
        let c = Model::new(tiny_config(AlignMode::Cpt, PoolingVariant::LowrankFactorized), 9).unwrap();
        a.load_params(c.params().clone()).unwrap();
        assert_eq!(a.params(), c.params());
    }

    #[test]
    fn oracle_and_random_scorers() {
        let batch = tiny_batch(1);
        let rm = OracleScorer.score(&batch).unwrap();
        assert_eq!(comparator::predict(&rm), batch.query_classes);
        let r1 = RandomScorer::new(4).score(&batch).unwrap();
        let r2 = RandomScorer::new(4).score(&batch).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn hflip_mirrors_rows() {
        let samples = vec![
            Sample {
                image: Tensor::from_fn(&[1, 1, 3], |i| i as f64),
                label: 0,
            },
            Sample {
                image: Tensor::from_fn(&[1, 1, 3], |i| i as f64),
                label: 1,
            },
        ];
        let ds = LabeledDataset::from_samples(samples);
        let ep = Episode {
            classes: vec![0, 1],
            support: vec![0],
            support_classes: vec![0],
            query: vec![1],
            query_classes: vec![1],
        };
        let mut saw_flip = false;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = EpisodeBatch::gather(&ds, &ep, Some(&mut rng)).unwrap();
            let d = b.support.data();
            assert!(d == [0.0, 1.0, 2.0] || d == [2.0, 1.0, 0.0]);
            saw_flip |= d == [2.0, 1.0, 0.0];
        }
        assert!(saw_flip);
    }
}
