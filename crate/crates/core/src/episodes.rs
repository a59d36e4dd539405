//! C-way K-shot episodic data model: class partitions, episode sampling and
//! class-feature construction.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bound on class re-draws when a drawn class cannot supply `K + Q` samples.
pub const MAX_EPISODE_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, height, width]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::Config(format!(
                "label {} outside class inventory of {}",
                s.label,
                class_names.len()
            )));
        }
        Ok(LabeledDataset { samples, class_names })
    }

    /// Class names default to the decimal label.
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        LabeledDataset {
            samples,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per class label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitScheme {
    /// Auxiliary / target, no validation pool.
    Pcm,
    /// Train / validation / target.
    Val,
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm" | "pcm_split" => Ok(SplitScheme::Pcm),
            "val" | "val_split" => Ok(SplitScheme::Val),
            other => Err(Error::Config(format!("unknown split scheme {other}"))),
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitScheme::Pcm => "pcm",
            SplitScheme::Val => "val",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    /// Shuffles `0..classes` and cuts it into the given partition sizes.
    pub fn with_counts(classes: usize, train: usize, val: usize, test: usize, seed: u64) -> Result<Self> {
        if train + val + test != classes {
            return Err(Error::Config(format!(
                "partition sizes {train}/{val}/{test} do not cover {classes} classes"
            )));
        }
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let sorted = |range: std::ops::Range<usize>| {
            let mut v = order[range].to_vec();
            v.sort_unstable();
            v
        };
        Ok(ClassSplit {
            train: sorted(0..train),
            val: sorted(train..train + val),
            test: sorted(train + val..classes),
        })
    }

    pub fn pool(&self, source: Source) -> &[usize] {
        match source {
            Source::Train => &self.train,
            Source::Val => &self.val,
            Source::Test => &self.test,
        }
    }
}

/// Partitions sized after the published CUB / DOGS / CARS / NABirds splits
/// when the class count matches one of them, proportionally otherwise.
pub fn split_classes(classes: usize, scheme: SplitScheme, seed: u64) -> Result<ClassSplit> {
    let known = match (scheme, classes) {
        (SplitScheme::Pcm, 200) => Some((150, 0, 50)),
        (SplitScheme::Pcm, 120) => Some((90, 0, 30)),
        (SplitScheme::Pcm, 196) => Some((147, 0, 49)),
        (SplitScheme::Pcm, 555) => Some((416, 0, 139)),
        (SplitScheme::Val, 200) => Some((120, 30, 50)),
        (SplitScheme::Val, 120) => Some((70, 20, 30)),
        (SplitScheme::Val, 196) => Some((130, 17, 49)),
        (SplitScheme::Val, 555) => Some((350, 66, 139)),
        _ => None,
    };
    let (train, val, test) = match known {
        Some(counts) => counts,
        None => {
            let test = (classes as f64 * 0.25).round() as usize;
            let val = match scheme {
                SplitScheme::Pcm => 0,
                SplitScheme::Val => (classes as f64 * 0.15).round() as usize,
            };
            (classes.saturating_sub(test + val), val, test)
        }
    };
    let needs_val = scheme == SplitScheme::Val;
    if train == 0 || test == 0 || (needs_val && val == 0) || train + val + test != classes {
        return Err(Error::Config(format!(
            "{classes} classes are too few for a {scheme} split"
        )));
    }
    ClassSplit::with_counts(classes, train, val, test, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    /// Queries per class.
    pub query: usize,
    pub source: Source,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize, query: usize, source: Source) -> Result<Self> {
        let spec = EpisodeSpec {
            way,
            shot,
            query,
            source,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.query < 1 {
            return Err(Error::Config(format!(
                "episode needs way >= 2, shot >= 1, query >= 1 (got {}/{}/{})",
                self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One task. Support and query lists are class-major; `*_classes` hold the
/// episode-local class index (position in `classes`) of each entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_classes: Vec<usize>,
    pub query: Vec<usize>,
    pub query_classes: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }
}

/// Draws episodes from a fixed dataset.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    by_class: Vec<Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(dataset: &LabeledDataset) -> Self {
        EpisodeSampler {
            by_class: dataset.by_class(),
        }
    }

    /// Uniform class choice without replacement from `pool`, then uniform
    /// sample choice without replacement within each class.
    pub fn sample(&self, pool: &[usize], spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
        spec.validate()?;
        if pool.len() < spec.way {
            return Err(Error::InvalidEpisode(format!(
                "{}-way episode from a pool of {} classes",
                spec.way,
                pool.len()
            )));
        }
        if let Some(&bad) = pool.iter().find(|&&c| c >= self.by_class.len()) {
            return Err(Error::InvalidEpisode(format!("class {bad} not in dataset")));
        }
        let per_class = spec.shot + spec.query;
        for _ in 0..MAX_EPISODE_RETRIES {
            let classes: Vec<usize> = index::sample(rng, pool.len(), spec.way)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            if classes.iter().any(|&c| self.by_class[c].len() < per_class) {
                continue;
            }
            let mut ep = Episode {
                classes: classes.clone(),
                support: Vec::with_capacity(spec.way * spec.shot),
                support_classes: Vec::with_capacity(spec.way * spec.shot),
                query: Vec::with_capacity(spec.way * spec.query),
                query_classes: Vec::with_capacity(spec.way * spec.query),
            };
            for (local, &c) in classes.iter().enumerate() {
                let members = &self.by_class[c];
                let picks = index::sample(rng, members.len(), per_class);
                for (n, i) in picks.into_iter().enumerate() {
                    if n < spec.shot {
                        ep.support.push(members[i]);
                        ep.support_classes.push(local);
                    } else {
                        ep.query.push(members[i]);
                        ep.query_classes.push(local);
                    }
                }
            }
            return Ok(ep);
        }
        Err(Error::InvalidEpisode(format!(
            "no {}-way draw with {per_class} samples per class after {MAX_EPISODE_RETRIES} attempts",
            spec.way
        )))
    }
}

pub fn sample_episode(dataset: &LabeledDataset, pool: &[usize], spec: &EpisodeSpec, seed: u64) -> Result<Episode> {
    EpisodeSampler::new(dataset).sample(pool, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Elementwise sum of one class's support maps.
pub fn class_feature(support_maps: &[FeatureMap]) -> Result<FeatureMap> {
    let (first, rest) = support_maps
        .split_first()
        .ok_or_else(|| Error::shape("class_feature", "no support maps"))?;
    let mut acc = first.values().clone();
    for m in rest {
        first.check_same(m, "class_feature")?;
        acc += m.values();
    }
    Ok(FeatureMap::from_array(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn dataset(classes: usize, per_class: usize) -> LabeledDataset {
        let samples = (0..classes * per_class)
            .map(|i| Sample {
                image: Tensor::scalar(i as f64),
                label: i % classes,
            })
            .collect();
        LabeledDataset::from_samples(samples)
    }

    #[test]
    fn published_split_sizes() {
        let s = split_classes(200, SplitScheme::Pcm, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (150, 0, 50));
        let s = split_classes(200, SplitScheme::Val, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (120, 30, 50));
        let s = split_classes(555, SplitScheme::Pcm, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (416, 139));
    }

    #[test]
    fn split_is_a_reproducible_partition() {
        for scheme in [SplitScheme::Pcm, SplitScheme::Val] {
            let s = split_classes(37, scheme, 9).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
            assert_eq!(s, split_classes(37, scheme, 9).unwrap());
        }
        assert!(split_classes(1, SplitScheme::Pcm, 0).is_err());
        assert!(split_classes(3, SplitScheme::Val, 0).is_err());
    }

    #[test]
    fn episode_counts_match_protocol() {
        let ds = dataset(10, 25);
        let pool: Vec<usize> = (0..10).collect();
        let e = sample_episode(&ds, &pool, &EpisodeSpec::new(5, 1, 15, Source::Train).unwrap(), 1).unwrap();
        assert_eq!(e.support.len() + e.query.len(), 80);
        let e = sample_episode(&ds, &pool, &EpisodeSpec::new(5, 5, 15, Source::Train).unwrap(), 1).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (25, 75));
        let support: HashSet<_> = e.support.iter().collect();
        assert!(e.query.iter().all(|q| !support.contains(q)));
    }

    #[test]
    fn seeds_control_episodes() {
        let ds = dataset(10, 25);
        let pool: Vec<usize> = (0..10).collect();
        let spec = EpisodeSpec::new(5, 1, 3, Source::Train).unwrap();
        assert_eq!(
            sample_episode(&ds, &pool, &spec, 5).unwrap(),
            sample_episode(&ds, &pool, &spec, 5).unwrap()
        );
        assert_ne!(
            sample_episode(&ds, &pool, &spec, 5).unwrap(),
            sample_episode(&ds, &pool, &spec, 6).unwrap()
        );
    }

    #[test]
    fn underpopulated_classes_fail_after_retries() {
        let ds = dataset(4, 3);
        let pool: Vec<usize> = (0..4).collect();
        let spec = EpisodeSpec::new(2, 1, 5, Source::Train).unwrap();
        assert!(matches!(sample_episode(&ds, &pool, &spec, 0), Err(Error::InvalidEpisode(_))));
        assert!(sample_episode(&ds, &[0], &EpisodeSpec::new(2, 1, 1, Source::Train).unwrap(), 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(EpisodeSpec::new(1, 1, 1, Source::Train).is_err());
        assert!(EpisodeSpec::new(5, 0, 1, Source::Train).is_err());
        assert!(EpisodeSpec::new(5, 1, 0, Source::Train).is_err());
    }

    #[test]
    fn class_feature_sums() {
        let one = FeatureMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(class_feature(std::slice::from_ref(&one)).unwrap(), one);
        let two = class_feature(&[one.clone(), one.clone()]).unwrap();
        assert_eq!(two, FeatureMap::new(2, 2, vec![2.0; 4]).unwrap());
        assert!(class_feature(&[]).is_err());
        assert!(class_feature(&[one, FeatureMap::zeros(2, 3)]).is_err());
    }
}
