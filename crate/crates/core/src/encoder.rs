//! Conv4 embedding network producing `c x hw` feature maps.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ModelParams, ParamId};
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

/// An embedded image: column `j` is the channel vector at spatial position `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Array2<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, positions: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || positions == 0 {
            return Err(Error::shape("feature_map", "empty feature map"));
        }
        let values = Array2::from_shape_vec((channels, positions), data)
            .map_err(|e| Error::shape("feature_map", e.to_string()))?;
        Ok(FeatureMap { values })
    }

    pub fn from_array(values: Array2<f64>) -> Self {
        FeatureMap { values }
    }

    pub fn zeros(channels: usize, positions: usize) -> Self {
        FeatureMap {
            values: Array2::zeros((channels, positions)),
        }
    }

    /// Map `index` of a `[batch, c, hw]` tensor.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 3 || index >= s[0] {
            return Err(Error::shape(
                "feature_map",
                format!("cannot take map {index} from {s:?}"),
            ));
        }
        let len = s[1] * s[2];
        Self::new(s[1], s[2], batch.data()[index * len..(index + 1) * len].to_vec())
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn positions(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Row-major flattening, channel-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    /// Sum over channels, one value per position.
    pub fn channel_sum(&self) -> Vec<f64> {
        self.values.sum_axis(ndarray::Axis(0)).to_vec()
    }

    pub(crate) fn check_same(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.values.dim(), other.values.dim()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignMode {
    None,
    Niv,
    Cpt,
    Cosine,
}

impl AlignMode {
    pub const ALL: [AlignMode; 4] = [AlignMode::None, AlignMode::Niv, AlignMode::Cpt, AlignMode::Cosine];

    pub fn is_enabled(self) -> bool {
        self != AlignMode::None
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AlignMode::None),
            "niv" => Ok(AlignMode::Niv),
            "cpt" => Ok(AlignMode::Cpt),
            "cosine" => Ok(AlignMode::Cosine),
            other => Err(Error::Config(format!("unknown alignment mode {other}"))),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::None => "none",
            AlignMode::Niv => "niv",
            AlignMode::Cpt => "cpt",
            AlignMode::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Square input side length.
    pub image_size: usize,
    pub in_channels: usize,
    pub blocks: usize,
    pub filters: usize,
    /// Number of leading blocks followed by 2x2 max pooling.
    pub pooled_blocks: usize,
    pub align: AlignMode,
    /// Weight of the orthogonality penalty on the alignment transform.
    pub ortho_lambda: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 84,
            in_channels: 3,
            blocks: 4,
            filters: 64,
            pooled_blocks: 2,
            align: AlignMode::Cpt,
            ortho_lambda: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.filters == 0 || self.in_channels == 0 {
            return Err(Error::Config("encoder needs at least one block, filter and channel".into()));
        }
        if self.pooled_blocks > self.blocks {
            return Err(Error::Config(format!(
                "pooled blocks {} exceed block count {}",
                self.pooled_blocks, self.blocks
            )));
        }
        if self.output_side() == 0 {
            return Err(Error::Config(format!(
                "image size {} vanishes after {} poolings",
                self.image_size, self.pooled_blocks
            )));
        }
        if self.ortho_lambda < 0.0 {
            return Err(Error::Config("orthogonality weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Spatial side length of the encoder output.
    pub fn output_side(&self) -> usize {
        (0..self.pooled_blocks).fold(self.image_size, |s, _| s / 2)
    }

    /// `hw` of the encoder output.
    pub fn positions(&self) -> usize {
        self.output_side() * self.output_side()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug)]
struct Block {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    pooled: bool,
}

/// Parameter handles for the Conv4 stack.
///
/// Convolutions carry no learned bias: every one is followed by batch
/// normalization, which cancels a per-channel offset exactly, so a bias would
/// only add parameters with identically zero gradient.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn init(config: &EncoderConfig, params: &mut ModelParams, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut c_in = config.in_channels;
        for i in 0..config.blocks {
            let f = config.filters;
            let kernel = params.insert(
                format!("encoder.block{i}.conv.weight"),
                fan_in_uniform(&[f, c_in, 3, 3], c_in * 9, rng),
            )?;
            let gamma = params.insert(format!("encoder.block{i}.bn.gamma"), Tensor::full(&[f], 1.0))?;
            let beta = params.insert(format!("encoder.block{i}.bn.beta"), Tensor::zeros(&[f]))?;
            blocks.push(Block {
                kernel,
                gamma,
                beta,
                pooled: i < config.pooled_blocks,
            });
            c_in = f;
        }
        Ok(Encoder {
            config: config.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Embeds `[b, 3, H, W]` images into `[b, c, hw]` feature maps.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        let expected = self.config.input_shape();
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::shape(
                "embed",
                format!("images {s:?}, expected [batch, {}, {}, {}]", expected[0], expected[1], expected[2]),
            ));
        }
        let batch = s[0];
        let zero_bias = tape.constant(Tensor::zeros(&[self.config.filters]));
        let mut x = images;
        for block in &self.blocks {
            x = tape.conv2d(x, bound.var(block.kernel), zero_bias, 1)?;
            x = tape.batchnorm2d(x, bound.var(block.gamma), bound.var(block.beta), BN_EPS)?;
            x = tape.relu(x);
            if block.pooled {
                x = tape.maxpool2x2(x)?;
            }
        }
        tape.reshape(x, &[batch, self.config.filters, self.config.positions()])
    }
}
