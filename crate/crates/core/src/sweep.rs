//! Bilinear-dimension sweep: parameter counts and per-pair forward timing
//! of each pooling variant.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::pooling::{compare_pair, PoolWeights, PoolingConfig, PoolingVariant, ProjectionBank};

pub const DEFAULT_DIMS: [usize; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];
pub const MIN_REPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    pub variants: Vec<PoolingVariant>,
    pub channels: usize,
    pub positions: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dims: DEFAULT_DIMS.to_vec(),
            variants: PoolingVariant::ALL.to_vec(),
            channels: 64,
            positions: 441,
            reps: MIN_REPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub variant: PoolingVariant,
    pub dim: usize,
    pub params: usize,
    pub median_secs: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn random_map(c: usize, hw: usize, rng: &mut impl Rng) -> FeatureMap {
    FeatureMap::from_array(Array2::from_shape_fn((c, hw), |_| rng.random_range(0.0..1.0)))
}

/// Median wall time of one (query, class) comparative feature, computed on
/// the full `n x hw` grid for the low-rank variants.
pub fn time_pair_forward(variant: PoolingVariant, dim: usize, channels: usize, positions: usize, reps: usize, seed: u64) -> Result<f64> {
    if reps == 0 {
        return Err(Error::Config("at least one repetition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, k) = (random_map(channels, positions, &mut rng), random_map(channels, positions, &mut rng));
    let config = PoolingConfig {
        variant,
        dim,
        ..PoolingConfig::default()
    };
    let bank = ProjectionBank::random(channels, dim, &mut rng);
    let full = match variant {
        PoolingVariant::LowrankFull => bank.full_projections(),
        _ => Vec::new(),
    };
    let weights = match variant {
        PoolingVariant::LowrankFull => PoolWeights::Full(&full),
        PoolingVariant::LowrankFactorized => PoolWeights::Factorized(&bank),
        _ => PoolWeights::None,
    };
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let f = compare_pair(&config, weights, &q, &k, (0, 0))?;
        std::hint::black_box(&f);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    if config.dims.iter().any(|&d| d == 0) || config.channels == 0 || config.positions == 0 {
        return Err(Error::Config("sweep dimensions must be positive".into()));
    }
    if config.reps < MIN_REPS {
        return Err(Error::Config(format!("sweep needs >= {MIN_REPS} repetitions")));
    }
    let mut rows = Vec::new();
    for &variant in &config.variants {
        // Outer-product and concatenation cost does not depend on n.
        let mut fixed = None;
        for &dim in &config.dims {
            let pool = PoolingConfig {
                variant,
                dim,
                ..PoolingConfig::default()
            };
            let depends_on_dim = matches!(variant, PoolingVariant::LowrankFull | PoolingVariant::LowrankFactorized);
            let secs = match fixed {
                Some(t) if !depends_on_dim => t,
                _ => {
                    let t = time_pair_forward(variant, dim, config.channels, config.positions, config.reps, config.seed)?;
                    fixed = Some(t);
                    t
                }
            };
            rows.push(SweepRow {
                variant,
                dim,
                params: pool.complexity_count(config.channels),
                median_secs: secs,
            });
        }
    }
    Ok(rows)
}

pub fn format_table(rows: &[SweepRow]) -> String {
    let mut out = format!("{:<14} {:>6} {:>12} {:>14}\n", "variant", "dim", "params", "median_us");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>12} {:>14.3}",
            r.variant.to_string(),
            r.dim,
            r.params,
            r.median_secs * 1e6
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn counts_at_default_scale() {
        let cfg = SweepConfig {
            dims: vec![512],
            positions: 4,
            ..SweepConfig::default()
        };
        let rows = run_sweep(&cfg).unwrap();
        let count = |v| rows.iter().find(|r| r.variant == v).unwrap().params;
        assert_eq!(count(PoolingVariant::LowrankFactorized), 65_536);
        assert_eq!(count(PoolingVariant::LowrankFull), 2_097_152);
        assert_eq!(count(PoolingVariant::PairwiseOuter), 4_096);
        assert!(format_table(&rows).contains("lowrank_fact"));
    }

    #[test]
    fn too_few_reps_rejected() {
        let cfg = SweepConfig {
            reps: 10,
            ..SweepConfig::default()
        };
        assert!(run_sweep(&cfg).is_err());
    }
}
