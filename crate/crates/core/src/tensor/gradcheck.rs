use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::params::ModelParams;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub checked: usize,
    pub worst_relative: f64,
    /// Parameter name and flat coordinate of the worst entry.
    pub worst_at: Option<(String, usize)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst_relative < self.tolerance
    }
}

/// Compares tape gradients of `f` against central finite differences at
/// `samples` coordinates drawn uniformly from all parameter entries.
///
/// `f` receives a fresh tape with `params` attached (in insertion order) and
/// must return a scalar loss. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut ModelParams,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.attach(&mut tape);
    let loss = f(&mut tape, bound.vars())?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .map(|&v| grads.wrt(v).into_data())
        .collect();
    drop(tape);

    let ids: Vec<_> = params.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| params.tensor(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, samples).into_vec()
    };
    coords.sort_unstable();

    let mut eval = |params: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape);
        let loss = f(&mut tape, bound.vars())?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradReport {
        tolerance: tol,
        checked: coords.len(),
        worst_relative: 0.0,
        worst_at: None,
    };
    for flat in coords {
        let (mut p, mut offset) = (0, flat);
        while offset >= sizes[p] {
            offset -= sizes[p];
            p += 1;
        }
        let id = ids[p];
        let orig = params.tensor(id).data()[offset];
        params.tensor_mut(id).data_mut()[offset] = orig + FD_STEP;
        let up = eval(params)?;
        params.tensor_mut(id).data_mut()[offset] = orig - FD_STEP;
        let down = eval(params)?;
        params.tensor_mut(id).data_mut()[offset] = orig;

        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[p][offset];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if report.worst_at.is_none() || rel > report.worst_relative {
            report.worst_relative = rel;
            report.worst_at = Some((params.name(id).to_string(), offset));
        }
    }
    Ok(report)
}
