//! Comparative pooling of (query, class) feature-map pairs.
//!
//! Four variants are available:
//!
//! * `PairwiseOuter`: `X_A X_Bᵀ`, flattened to `c*c` values.
//! * `LowrankFull`: `z_{i,j} = (x_jᴬ)ᵀ W_i x_jᴮ` with `n` full `c x c`
//!   projections.
//! * `LowrankFactorized`: `z_{i,j} = (U_iᵀ x_jᴬ)(V_iᵀ x_jᴮ)`, i.e. two `c -> n`
//!   projections followed by a Hadamard product. Holds `2nc` parameters
//!   instead of `nc²`.
//! * `ConcatBaseline`: channel-wise stacking of both maps, no interaction.
//!
//! The `n x hw` grid `Z` of the low-rank variants is averaged over positions
//! before normalization, so the comparator sees an `n`-vector.
//!
//! The free functions here operate on single pairs and serve as reference
//! routes; [`PoolingLayer`] is the batched, differentiable path used by the
//! network.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::encoder::{FeatureMap, BN_EPS};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ModelParams, ParamId};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingVariant {
    PairwiseOuter,
    LowrankFull,
    LowrankFactorized,
    ConcatBaseline,
}

impl PoolingVariant {
    pub const ALL: [PoolingVariant; 4] = [
        PoolingVariant::PairwiseOuter,
        PoolingVariant::LowrankFull,
        PoolingVariant::LowrankFactorized,
        PoolingVariant::ConcatBaseline,
    ];
}

impl FromStr for PoolingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" | "pairwise_outer" => Ok(PoolingVariant::PairwiseOuter),
            "lowrank_full" => Ok(PoolingVariant::LowrankFull),
            "lowrank_fact" | "lowrank_factorized" => Ok(PoolingVariant::LowrankFactorized),
            "concat" | "concat_baseline" => Ok(PoolingVariant::ConcatBaseline),
            other => Err(Error::Config(format!("unknown pooling variant {other}"))),
        }
    }
}

impl fmt::Display for PoolingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingVariant::PairwiseOuter => "pairwise",
            PoolingVariant::LowrankFull => "lowrank_full",
            PoolingVariant::LowrankFactorized => "lowrank_fact",
            PoolingVariant::ConcatBaseline => "concat",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Normalization {
    SignedSqrtL2,
    L2Only,
    None,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed_sqrt_l2" => Ok(Normalization::SignedSqrtL2),
            "l2_only" => Ok(Normalization::L2Only),
            "none" => Ok(Normalization::None),
            other => Err(Error::Config(format!("unknown normalization {other}"))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::SignedSqrtL2 => "signed_sqrt_l2",
            Normalization::L2Only => "l2_only",
            Normalization::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingConfig {
    pub variant: PoolingVariant,
    /// Bilinear dimension `n` of the low-rank variants.
    pub dim: usize,
    pub normalization: Normalization,
    /// Batch normalization + ReLU on the factorized projections `UᵀX`, `VᵀX`.
    pub projection_norm: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            variant: PoolingVariant::LowrankFactorized,
            dim: 512,
            normalization: Normalization::SignedSqrtL2,
            projection_norm: true,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("bilinear dimension must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the comparative feature handed to the comparator.
    pub fn feature_dim(&self, channels: usize, positions: usize) -> usize {
        match self.variant {
            PoolingVariant::PairwiseOuter => channels * channels,
            PoolingVariant::LowrankFull | PoolingVariant::LowrankFactorized => self.dim,
            PoolingVariant::ConcatBaseline => 2 * channels * positions,
        }
    }

    /// Size figure reported in complexity sweeps: learned projection values
    /// for the low-rank variants (`n c²` full, `2 n c` factorized), the `c²`
    /// outer-product width for pairwise pooling, zero for concatenation.
    pub fn complexity_count(&self, channels: usize) -> usize {
        match self.variant {
            PoolingVariant::PairwiseOuter => channels * channels,
            PoolingVariant::LowrankFull => self.dim * channels * channels,
            PoolingVariant::LowrankFactorized => 2 * self.dim * channels,
            PoolingVariant::ConcatBaseline => 0,
        }
    }
}

/// Rank-one factors `U`, `V` (both `c x n`; column `i` is `U_i` / `V_i`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBank {
    u: Array2<f64>,
    v: Array2<f64>,
}

impl ProjectionBank {
    pub fn new(u: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        if u.dim() != v.dim() {
            return Err(Error::shape("projection_bank", format!("U {:?} vs V {:?}", u.dim(), v.dim())));
        }
        Ok(ProjectionBank { u, v })
    }

    /// Uniform in `[-1/sqrt(c), 1/sqrt(c)]`.
    pub fn random(channels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (channels as f64).sqrt();
        ProjectionBank {
            u: Array2::from_shape_fn((channels, dim), |_| rng.random_range(-b..=b)),
            v: Array2::from_shape_fn((channels, dim), |_| rng.random_range(-b..=b)),
        }
    }

    pub fn channels(&self) -> usize {
        self.u.nrows()
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len()
    }

    /// The equivalent full projections `W_i = U_i V_iᵀ`.
    pub fn full_projections(&self) -> Vec<Array2<f64>> {
        (0..self.dim())
            .map(|i| {
                let ui = self.u.column(i).insert_axis(Axis(1));
                let vi = self.v.column(i).insert_axis(Axis(0));
                ui.dot(&vi)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparativeFeature {
    pub values: Vec<f64>,
    pub query: usize,
    pub class: usize,
}

impl ComparativeFeature {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Self-bilinear statistic `(1/hw) Σ_i f_i f_iᵀ`.
pub fn self_bilinear_oracle(x: &FeatureMap) -> Array2<f64> {
    let v = x.values();
    v.dot(&v.t()) / x.positions() as f64
}

/// `X_A X_Bᵀ`, before normalization.
pub fn pairwise_outer_matrix(query: &FeatureMap, class_feat: &FeatureMap) -> Result<Array2<f64>> {
    query.check_same(class_feat, "pairwise_outer")?;
    Ok(query.values().dot(&class_feat.values().t()))
}

/// `n x hw` grid with `z_{i,j} = (x_jᴬ)ᵀ W_i x_jᴮ`.
pub fn lowrank_full_grid(query: &FeatureMap, class_feat: &FeatureMap, w: &[Array2<f64>]) -> Result<Array2<f64>> {
    query.check_same(class_feat, "lowrank_full")?;
    let c = query.channels();
    if w.is_empty() {
        return Err(Error::shape("lowrank_full", "no projection matrices"));
    }
    if let Some(bad) = w.iter().find(|wi| wi.dim() != (c, c)) {
        return Err(Error::shape("lowrank_full", format!("projection {:?} for {c} channels", bad.dim())));
    }
    let hw = query.positions();
    let mut z = Array2::zeros((w.len(), hw));
    for (i, wi) in w.iter().enumerate() {
        // (W_i X_B) then column-wise dot with X_A
        let proj = wi.dot(class_feat.values());
        let prod = &proj * query.values();
        z.row_mut(i).assign(&prod.sum_axis(Axis(0)));
    }
    Ok(z)
}

/// `n x hw` grid `(UᵀX_A) ∘ (VᵀX_B)`.
pub fn lowrank_factorized_grid(
    query: &FeatureMap,
    class_feat: &FeatureMap,
    bank: &ProjectionBank,
) -> Result<Array2<f64>> {
    query.check_same(class_feat, "lowrank_factorized")?;
    if bank.channels() != query.channels() {
        return Err(Error::shape(
            "lowrank_factorized",
            format!("bank over {} channels for maps with {}", bank.channels(), query.channels()),
        ));
    }
    let pa = bank.u().t().dot(query.values());
    let pb = bank.v().t().dot(class_feat.values());
    Ok(pa * pb)
}

/// `[X_A; X_B]` stacked along channels and flattened.
pub fn concat_features(query: &FeatureMap, class_feat: &FeatureMap) -> Result<Vec<f64>> {
    query.check_same(class_feat, "concat_baseline")?;
    let mut out = query.flatten();
    out.extend(class_feat.flatten());
    Ok(out)
}

/// Mean over positions (columns) of an `n x hw` grid.
pub fn reduce_positions(grid: &Array2<f64>) -> Vec<f64> {
    grid.mean_axis(Axis(1)).expect("non-empty grid").to_vec()
}

pub fn normalize(feature: &[f64], mode: Normalization) -> Vec<f64> {
    let mut y: Vec<f64> = match mode {
        Normalization::None => return feature.to_vec(),
        Normalization::SignedSqrtL2 => feature.iter().map(|v| v.signum() * v.abs().sqrt()).collect(),
        Normalization::L2Only => feature.to_vec(),
    };
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        y.iter_mut().for_each(|v| *v /= n);
    }
    y
}

/// Learned weights a pooling variant needs.
#[derive(Clone, Copy, Debug)]
pub enum PoolWeights<'a> {
    None,
    Full(&'a [Array2<f64>]),
    Factorized(&'a ProjectionBank),
}

/// Single-pair comparative feature, without the projection batch norm of the
/// network path.
pub fn compare_pair(
    config: &PoolingConfig,
    weights: PoolWeights<'_>,
    query: &FeatureMap,
    class_feat: &FeatureMap,
    ids: (usize, usize),
) -> Result<ComparativeFeature> {
    let raw = match (config.variant, weights) {
        (PoolingVariant::PairwiseOuter, _) => {
            pairwise_outer_matrix(query, class_feat)?.iter().copied().collect()
        }
        (PoolingVariant::LowrankFull, PoolWeights::Full(w)) => {
            reduce_positions(&lowrank_full_grid(query, class_feat, w)?)
        }
        (PoolingVariant::LowrankFactorized, PoolWeights::Factorized(bank)) => {
            reduce_positions(&lowrank_factorized_grid(query, class_feat, bank)?)
        }
        (PoolingVariant::ConcatBaseline, _) => concat_features(query, class_feat)?,
        (variant, _) => {
            return Err(Error::Config(format!("weights do not match pooling variant {variant}")))
        }
    };
    Ok(ComparativeFeature {
        values: normalize(&raw, config.normalization),
        query: ids.0,
        class: ids.1,
    })
}

#[derive(Clone, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
enum LayerIds {
    None,
    Full { w: ParamId },
    Factorized {
        u: ParamId,
        v: ParamId,
        norm: Option<(NormIds, NormIds)>,
    },
}

/// Batched, differentiable pooling over every (query, class) pair.
#[derive(Clone, Debug)]
pub struct PoolingLayer {
    config: PoolingConfig,
    channels: usize,
    positions: usize,
    ids: LayerIds,
}

impl PoolingLayer {
    /// Parameters: `pool.u`, `pool.v` stored as `[n, c]` (row `i` is `U_i`),
    /// `pool.w` as `[n, c*c]` (row `i` is `W_i` row-major).
    pub fn init(
        config: &PoolingConfig,
        channels: usize,
        positions: usize,
        params: &mut ModelParams,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (n, c) = (config.dim, channels);
        let ids = match config.variant {
            PoolingVariant::PairwiseOuter | PoolingVariant::ConcatBaseline => LayerIds::None,
            PoolingVariant::LowrankFull => LayerIds::Full {
                w: params.insert("pool.w", uniform(&[n, c * c], 1.0 / c as f64, rng))?,
            },
            PoolingVariant::LowrankFactorized => {
                let bank = ProjectionBank::random(c, n, rng);
                let u = params.insert("pool.u", bank_rows(bank.u()))?;
                let v = params.insert("pool.v", bank_rows(bank.v()))?;
                let norm = if config.projection_norm {
                    let mut bn = |name: &str| -> Result<NormIds> {
                        Ok(NormIds {
                            gamma: params.insert(format!("pool.{name}.gamma"), Tensor::full(&[n], 1.0))?,
                            beta: params.insert(format!("pool.{name}.beta"), Tensor::zeros(&[n]))?,
                        })
                    };
                    Some((bn("bn_u")?, bn("bn_v")?))
                } else {
                    None
                };
                LayerIds::Factorized { u, v, norm }
            }
        };
        Ok(PoolingLayer {
            config: config.clone(),
            channels,
            positions,
            ids,
        })
    }

    pub fn config(&self) -> &PoolingConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim(self.channels, self.positions)
    }

    /// The factorized bank currently held in `params`, if this layer has one.
    pub fn projection_bank(&self, params: &ModelParams) -> Option<ProjectionBank> {
        match &self.ids {
            LayerIds::Factorized { u, v, .. } => {
                let rows = |id: ParamId| {
                    ArrayView2::from_shape((self.config.dim, self.channels), params.tensor(id).data())
                        .expect("parameter shape")
                        .t()
                        .to_owned()
                };
                ProjectionBank::new(rows(*u), rows(*v)).ok()
            }
            _ => None,
        }
    }

    /// Full projections `W_i` currently held in `params`, if any.
    pub fn full_projections(&self, params: &ModelParams) -> Option<Vec<Array2<f64>>> {
        match &self.ids {
            LayerIds::Full { w } => {
                let c = self.channels;
                Some(
                    params
                        .tensor(*w)
                        .data()
                        .chunks(c * c)
                        .map(|row| Array2::from_shape_vec((c, c), row.to_vec()).expect("c*c"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    fn project(&self, tape: &mut Tape, bound: &Bound, maps: Var, weight: ParamId, norm: Option<&NormIds>) -> Result<Var> {
        let s = tape.shape(maps).to_vec();
        let (b, c, hw, n) = (s[0], s[1], s[2], self.config.dim);
        let rows = tape.permute(maps, &[0, 2, 1])?;
        let rows = tape.reshape(rows, &[b * hw, c])?;
        let mut p = tape.linear(rows, bound.var(weight), None)?;
        if let Some(ids) = norm {
            p = tape.reshape(p, &[b * hw, n, 1, 1])?;
            p = tape.batchnorm2d(p, bound.var(ids.gamma), bound.var(ids.beta), BN_EPS)?;
            p = tape.relu(p);
        }
        tape.reshape(p, &[b, hw, n])
    }

    /// Comparative features for `[m, c, hw]` queries against `[k, c, hw]`
    /// class maps, shape `[m*k, d]` with pair `(i, j)` at row `i*k + j`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, queries: Var, classes: Var) -> Result<Var> {
        let (qs, cs) = (tape.shape(queries).to_vec(), tape.shape(classes).to_vec());
        if qs.len() != 3 || cs.len() != 3 || qs[1..] != cs[1..] || qs[1..] != [self.channels, self.positions] {
            return Err(Error::shape(
                "pooling",
                format!(
                    "queries {qs:?} and classes {cs:?} for maps of {}x{}",
                    self.channels, self.positions
                ),
            ));
        }
        let (m, k, c, hw) = (qs[0], cs[0], self.channels, self.positions);
        let pairs = m * k;
        let q_index: Vec<usize> = (0..pairs).map(|p| p / k).collect();
        let k_index: Vec<usize> = (0..pairs).map(|p| p % k).collect();

        let raw = match &self.ids {
            LayerIds::Factorized { u, v, norm } => {
                let pa = self.project(tape, bound, queries, *u, norm.as_ref().map(|n| &n.0))?;
                let pb = self.project(tape, bound, classes, *v, norm.as_ref().map(|n| &n.1))?;
                // Σ_j pa[i,j,:] ∘ pb[k,j,:] as a batched product over channels.
                let pa = tape.permute(pa, &[2, 0, 1])?;
                let pb = tape.permute(pb, &[2, 1, 0])?;
                let z = tape.batched_matmul(pa, pb)?;
                let z = tape.permute(z, &[1, 2, 0])?;
                let z = tape.reshape(z, &[pairs, self.config.dim])?;
                tape.scale(z, 1.0 / hw as f64)
            }
            LayerIds::Full { w } => {
                let outer = self.pair_outer(tape, queries, classes, &q_index, &k_index)?;
                let mean = tape.scale(outer, 1.0 / hw as f64);
                tape.linear(mean, bound.var(*w), None)?
            }
            LayerIds::None => match self.config.variant {
                PoolingVariant::ConcatBaseline => {
                    let a = tape.index_select(queries, &q_index)?;
                    let b = tape.index_select(classes, &k_index)?;
                    let cat = tape.concat(&[a, b], 1)?;
                    tape.reshape(cat, &[pairs, 2 * c * hw])?
                }
                _ => self.pair_outer(tape, queries, classes, &q_index, &k_index)?,
            },
        };
        match self.config.normalization {
            Normalization::None => Ok(raw),
            Normalization::L2Only => tape.l2_normalize_rows(raw),
            Normalization::SignedSqrtL2 => {
                let r = tape.signed_sqrt(raw);
                tape.l2_normalize_rows(r)
            }
        }
    }

    fn pair_outer(&self, tape: &mut Tape, queries: Var, classes: Var, qi: &[usize], ki: &[usize]) -> Result<Var> {
        let c = self.channels;
        let a = tape.index_select(queries, qi)?;
        let b = tape.index_select(classes, ki)?;
        let bt = tape.permute(b, &[0, 2, 1])?;
        let m = tape.batched_matmul(a, bt)?;
        tape.reshape(m, &[qi.len(), c * c])
    }
}

fn bank_rows(m: &Array2<f64>) -> Tensor {
    let t = m.t();
    Tensor::new(&[t.nrows(), t.ncols()], t.iter().copied().collect()).expect("bank shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(c: usize, hw: usize, data: &[f64]) -> FeatureMap {
        FeatureMap::new(c, hw, data.to_vec()).unwrap()
    }

    fn random_map(c: usize, hw: usize, rng: &mut impl Rng) -> FeatureMap {
        FeatureMap::new(c, hw, (0..c * hw).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn self_bilinear_examples() {
        let x = fmap(2, 1, &[1.0, 2.0]);
        assert_eq!(self_bilinear_oracle(&x), array![[1.0, 2.0], [2.0, 4.0]]);
        assert_eq!(self_bilinear_oracle(&FeatureMap::zeros(3, 4)), Array2::<f64>::zeros((3, 3)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = self_bilinear_oracle(&random_map(4, 6, &mut rng));
        assert_eq!(s, s.t());
    }

    #[test]
    fn pairwise_outer_examples() {
        let xb = fmap(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = fmap(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pairwise_outer_matrix(&eye, &xb).unwrap(), array![[1.0, 3.0], [2.0, 4.0]]);
        assert_eq!(pairwise_outer_matrix(&xb, &xb).unwrap(), array![[5.0, 11.0], [11.0, 25.0]]);
        assert!(pairwise_outer_matrix(&xb, &FeatureMap::zeros(2, 3)).is_err());
    }

    #[test]
    fn lowrank_full_examples() {
        let w = vec![array![[0.0, 1.0], [0.0, 0.0]]];
        let z = lowrank_full_grid(&fmap(2, 1, &[2.0, 3.0]), &fmap(2, 1, &[5.0, 7.0]), &w).unwrap();
        assert_eq!(z, array![[14.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(3, 4, &mut rng);
        let z = lowrank_full_grid(&x, &x, &[Array2::eye(3)]).unwrap();
        for j in 0..4 {
            let sq: f64 = x.column(j).iter().map(|v| v * v).sum();
            assert!((z[[0, j]] - sq).abs() < 1e-12);
        }
    }

    #[test]
    fn lowrank_factorized_examples() {
        let bank = ProjectionBank::new(array![[1.0], [0.0]], array![[0.0], [1.0]]).unwrap();
        let z = lowrank_factorized_grid(&fmap(2, 1, &[2.0, 3.0]), &fmap(2, 1, &[5.0, 7.0]), &bank).unwrap();
        assert_eq!(z, array![[14.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_map(3, 4, &mut rng), random_map(3, 4, &mut rng));
        let zero = ProjectionBank::new(Array2::zeros((3, 2)), ProjectionBank::random(3, 2, &mut rng).v().clone()).unwrap();
        assert!(lowrank_factorized_grid(&a, &b, &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factorized_equals_full_with_rank_one_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (c, n, hw) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=9));
            let (a, b) = (random_map(c, hw, &mut rng), random_map(c, hw, &mut rng));
            let bank = ProjectionBank::random(c, n, &mut rng);
            let fact = lowrank_factorized_grid(&a, &b, &bank).unwrap();
            let full = lowrank_full_grid(&a, &b, &bank.full_projections()).unwrap();
            assert!(max_diff(&fact, &full) < 1e-12);
        }
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(ProjectionBank::random(64, 512, &mut rng).param_count(), 65_536);
        let cfg = |variant| PoolingConfig {
            variant,
            ..PoolingConfig::default()
        };
        assert_eq!(cfg(PoolingVariant::LowrankFactorized).complexity_count(64), 65_536);
        assert_eq!(cfg(PoolingVariant::LowrankFull).complexity_count(64), 2_097_152);
        assert_eq!(cfg(PoolingVariant::PairwiseOuter).complexity_count(64), 4096);
    }

    #[test]
    fn concat_examples() {
        let v = concat_features(&fmap(1, 1, &[3.0]), &fmap(1, 1, &[5.0])).unwrap();
        assert_eq!(v, vec![3.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random_map(3, 5, &mut rng), random_map(3, 5, &mut rng));
        let v = concat_features(&a, &b).unwrap();
        assert_eq!(v.len(), 2 * 3 * 5);
        assert_eq!(&v[..15], a.flatten().as_slice());
        assert_eq!(&v[15..], b.flatten().as_slice());
    }

    #[test]
    fn normalize_examples() {
        let y = normalize(&[4.0, -9.0], Normalization::SignedSqrtL2);
        let r = 13f64.sqrt();
        assert!((y[0] - 2.0 / r).abs() < 1e-15 && (y[1] + 3.0 / r).abs() < 1e-15);
        assert!((y[0] - 0.5547).abs() < 1e-4);
        for mode in [Normalization::SignedSqrtL2, Normalization::L2Only, Normalization::None] {
            assert_eq!(normalize(&[0.0; 3], mode), vec![0.0; 3]);
        }
        assert_eq!(normalize(&[4.0, -9.0], Normalization::None), vec![4.0, -9.0]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PoolingVariant::ALL {
            assert_eq!(v.to_string().parse::<PoolingVariant>().unwrap(), v);
        }
        assert!("bilinear".parse::<PoolingVariant>().is_err());
    }

    fn layer_vs_pairs(variant: PoolingVariant, normalization: Normalization) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, hw, n, m, k) = (3, 4, 5, 3, 2);
        let cfg = PoolingConfig {
            variant,
            dim: n,
            normalization,
            projection_norm: false,
        };
        let mut params = ModelParams::new();
        let layer = PoolingLayer::init(&cfg, c, hw, &mut params, &mut rng).unwrap();
        let queries: Vec<FeatureMap> = (0..m).map(|_| random_map(c, hw, &mut rng)).collect();
        let classes: Vec<FeatureMap> = (0..k).map(|_| random_map(c, hw, &mut rng)).collect();
        let stack = |maps: &[FeatureMap]| {
            Tensor::new(&[maps.len(), c, hw], maps.iter().flat_map(FeatureMap::flatten).collect()).unwrap()
        };
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape);
        let (qv, cv) = (tape.constant(stack(&queries)), tape.constant(stack(&classes)));
        let out = layer.forward(&mut tape, &bound, qv, cv).unwrap();
        let d = layer.feature_dim();
        assert_eq!(tape.shape(out), [m * k, d]);

        let bank = layer.projection_bank(&params);
        let full = layer.full_projections(&params);
        let weights = match (&bank, &full) {
            (Some(b), _) => PoolWeights::Factorized(b),
            (_, Some(w)) => PoolWeights::Full(w),
            _ => PoolWeights::None,
        };
        for i in 0..m {
            for j in 0..k {
                let f = compare_pair(&cfg, weights, &queries[i], &classes[j], (i, j)).unwrap();
                let row = &tape.value(out).data()[(i * k + j) * d..(i * k + j + 1) * d];
                for (a, b) in f.values.iter().zip(row) {
                    assert!((a - b).abs() < 1e-12, "{variant} pair ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn batched_layer_matches_single_pair_route() {
        for variant in PoolingVariant::ALL {
            for norm in [Normalization::None, Normalization::SignedSqrtL2, Normalization::L2Only] {
                layer_vs_pairs(variant, norm);
            }
        }
    }
}
