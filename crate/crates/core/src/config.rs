//! Plain-text `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DataFormat, SynthSpec};
use crate::episodes::{EpisodeSpec, SplitScheme};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Name of the resolved configuration written next to training outputs.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub data_format: DataFormat,
    pub split: SplitScheme,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub synth_seed: u64,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            data_format: DataFormat::Synth,
            split: SplitScheme::Pcm,
            split_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            synth_seed: 0,
            eval_episodes: 600,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{value}'")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{key}: set more than once")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "data.root" => self.data_root = PathBuf::from(v),
            "data.format" => self.data_format = parse_enum(key, v)?,
            "split.scheme" => self.split = parse_enum(key, v)?,
            "split.seed" => self.split_seed = parse(key, v)?,
            "episode.way" => t.episode.way = parse(key, v)?,
            "episode.shot" => t.episode.shot = parse(key, v)?,
            "episode.query" => t.episode.query = parse(key, v)?,
            "model.pooling" => m.pooling.variant = parse_enum(key, v)?,
            "model.bilinear_dim" => m.pooling.dim = parse(key, v)?,
            "model.normalization" => m.pooling.normalization = parse_enum(key, v)?,
            "model.projection_norm" => m.pooling.projection_norm = parse(key, v)?,
            "model.align" => m.encoder.align = parse_enum(key, v)?,
            "model.ortho_lambda" => m.encoder.ortho_lambda = parse(key, v)?,
            "model.comparator_hidden" => m.comparator_hidden = parse(key, v)?,
            "model.image_size" => m.encoder.image_size = parse(key, v)?,
            "model.filters" => m.encoder.filters = parse(key, v)?,
            "model.class_mean" => m.class_mean = parse(key, v)?,
            "train.episodes" => t.episodes = parse(key, v)?,
            "train.tasks_per_episode" => t.tasks_per_episode = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.decay_every" => t.decay_every = parse(key, v)?,
            "train.decay_factor" => t.decay_factor = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.hflip" => t.hflip = parse(key, v)?,
            "synth.classes" => s.classes = parse(key, v)?,
            "synth.per_class" => s.per_class = parse(key, v)?,
            "synth.families" => s.families = parse(key, v)?,
            "synth.patch" => s.patch = parse(key, v)?,
            "synth.jitter" => s.jitter = parse(key, v)?,
            "synth.sigma" => s.sigma = parse(key, v)?,
            "synth.seed" => self.synth_seed = parse(key, v)?,
            "eval.episodes" => self.eval_episodes = parse(key, v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data_format == DataFormat::Synth {
            self.synth_for_model().validate()?;
        }
        Ok(())
    }

    /// Synthetic spec rendered at the model's input size.
    pub fn synth_for_model(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.model.encoder.image_size,
            ..self.synth.clone()
        }
    }

    pub fn episode(&self) -> EpisodeSpec {
        self.train.episode
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let rows: Vec<(&str, String)> = vec![
            ("data.root", self.data_root.display().to_string()),
            ("data.format", self.data_format.to_string()),
            ("split.scheme", self.split.to_string()),
            ("split.seed", self.split_seed.to_string()),
            ("episode.way", t.episode.way.to_string()),
            ("episode.shot", t.episode.shot.to_string()),
            ("episode.query", t.episode.query.to_string()),
            ("model.pooling", m.pooling.variant.to_string()),
            ("model.bilinear_dim", m.pooling.dim.to_string()),
            ("model.normalization", m.pooling.normalization.to_string()),
            ("model.projection_norm", m.pooling.projection_norm.to_string()),
            ("model.align", m.encoder.align.to_string()),
            ("model.ortho_lambda", m.encoder.ortho_lambda.to_string()),
            ("model.comparator_hidden", m.comparator_hidden.to_string()),
            ("model.image_size", m.encoder.image_size.to_string()),
            ("model.filters", m.encoder.filters.to_string()),
            ("model.class_mean", m.class_mean.to_string()),
            ("train.episodes", t.episodes.to_string()),
            ("train.tasks_per_episode", t.tasks_per_episode.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.decay_every", t.decay_every.to_string()),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.hflip", t.hflip.to_string()),
            ("synth.classes", s.classes.to_string()),
            ("synth.per_class", s.per_class.to_string()),
            ("synth.families", s.families.to_string()),
            ("synth.patch", s.patch.to_string()),
            ("synth.jitter", s.jitter.to_string()),
            ("synth.sigma", s.sigma.to_string()),
            ("synth.seed", self.synth_seed.to_string()),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("out.dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
