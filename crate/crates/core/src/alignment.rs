//! Position-rearrangement layer for support feature maps and the alignment
//! losses that supervise it.
//!
//! A two-layer perceptron reads the channel-summed support descriptor
//! (length `hw`) and emits an `hw x hw` matrix `T`. The support map is then
//! recombined column-wise as `X' = X T`; query maps are never transformed.
//! Orthogonality of `T` is encouraged with the soft penalty `||T Tᵀ - I||²_F`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::encoder::{AlignMode, FeatureMap};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ModelParams, ParamId};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTransform {
    matrix: Array2<f64>,
    penalty: f64,
}

impl AlignmentTransform {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape("alignment", format!("transform {:?} is not square", matrix.dim())));
        }
        let penalty = orthogonality_penalty(matrix.view());
        Ok(AlignmentTransform { matrix, penalty })
    }

    pub fn identity(positions: usize) -> Self {
        AlignmentTransform {
            matrix: Array2::eye(positions),
            penalty: 0.0,
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn positions(&self) -> usize {
        self.matrix.nrows()
    }

    /// `||T Tᵀ - I||²_F`.
    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    /// Largest `|T - I|` entry.
    pub fn max_deviation_from_identity(&self) -> f64 {
        self.matrix
            .indexed_iter()
            .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }
}

pub fn orthogonality_penalty(t: ArrayView2<'_, f64>) -> f64 {
    let mut gram = t.dot(&t.t());
    gram.diag_mut().mapv_inplace(|v| v - 1.0);
    gram.iter().map(|v| v * v).sum()
}

/// `X' = X T`.
pub fn apply_alignment(support: &FeatureMap, transform: &AlignmentTransform) -> Result<FeatureMap> {
    if transform.positions() != support.positions() {
        return Err(Error::shape(
            "apply_alignment",
            format!("transform of size {} for {} positions", transform.positions(), support.positions()),
        ));
    }
    Ok(FeatureMap::from_array(support.values().dot(transform.matrix())))
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared difference over all `c*hw` entries.
pub fn align_loss_niv(query: &FeatureMap, aligned_support: &FeatureMap) -> Result<f64> {
    query.check_same(aligned_support, "align_loss_niv")?;
    Ok(mean_sq_diff(&query.flatten(), &aligned_support.flatten()))
}

/// Mean squared difference between the channel sums `o_A` and `o_B T`.
pub fn align_loss_cpt(query: &FeatureMap, support: &FeatureMap, transform: &AlignmentTransform) -> Result<f64> {
    query.check_same(support, "align_loss_cpt")?;
    if transform.positions() != support.positions() {
        return Err(Error::shape("align_loss_cpt", "transform size differs from positions"));
    }
    let o_b = Array1::from(support.channel_sum()).dot(transform.matrix());
    Ok(mean_sq_diff(&query.channel_sum(), o_b.as_slice().expect("contiguous")))
}

/// `1 - cos(flat(query), flat(aligned_support))`.
pub fn align_loss_cosine(query: &FeatureMap, aligned_support: &FeatureMap) -> Result<f64> {
    query.check_same(aligned_support, "align_loss_cosine")?;
    let (a, b) = (query.flatten(), aligned_support.flatten());
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine loss of a zero feature map".into()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Parameter handles for the transform generator `hw -> hw -> hw*hw`.
#[derive(Clone, Debug)]
pub struct TransformGenerator {
    positions: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl TransformGenerator {
    /// The output layer starts with zero weights and the flattened identity
    /// as bias, so every generated transform is exactly `I` before training.
    pub fn init(positions: usize, params: &mut ModelParams, rng: &mut impl Rng) -> Result<Self> {
        let hw = positions;
        let w1 = params.insert("align.fc1.weight", fan_in_uniform(&[hw, hw], hw, rng))?;
        let b1 = params.insert("align.fc1.bias", fan_in_uniform(&[hw], hw, rng))?;
        let w2 = params.insert("align.fc2.weight", Tensor::zeros(&[hw * hw, hw]))?;
        let eye = Tensor::from_fn(&[hw * hw], |k| if k / hw == k % hw { 1.0 } else { 0.0 });
        let b2 = params.insert("align.fc2.bias", eye)?;
        Ok(TransformGenerator {
            positions,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    /// Direct evaluation for a single support map.
    pub fn transform(&self, params: &ModelParams, support: &FeatureMap) -> Result<AlignmentTransform> {
        let hw = self.positions;
        if support.positions() != hw {
            return Err(Error::shape(
                "generate_transform",
                format!("support has {} positions, generator expects {hw}", support.positions()),
            ));
        }
        let mat = |id: ParamId, r: usize, c: usize| {
            ArrayView2::from_shape((r, c), params.tensor(id).data()).expect("parameter shape")
        };
        let o = Array1::from(support.channel_sum());
        let mut h = mat(self.w1, hw, hw).dot(&o) + Array1::from(params.tensor(self.b1).data().to_vec());
        h.mapv_inplace(|v| v.max(0.0));
        let t = mat(self.w2, hw * hw, hw).dot(&h) + Array1::from(params.tensor(self.b2).data().to_vec());
        let t = t.into_shape_with_order((hw, hw)).expect("hw*hw outputs");
        AlignmentTransform::new(t)
    }

    /// Transforms for a `[k, c, hw]` batch of support maps, shape `[k, hw, hw]`.
    pub fn generate(&self, tape: &mut Tape, bound: &Bound, maps: Var) -> Result<Var> {
        let s = tape.shape(maps).to_vec();
        if s.len() != 3 || s[2] != self.positions {
            return Err(Error::shape(
                "generate_transform",
                format!("maps {s:?} for generator over {} positions", self.positions),
            ));
        }
        let o = tape.sum_axis(maps, 1)?;
        let h = tape.linear(o, bound.var(self.w1), Some(bound.var(self.b1)))?;
        let h = tape.relu(h);
        let t = tape.linear(h, bound.var(self.w2), Some(bound.var(self.b2)))?;
        tape.reshape(t, &[s[0], self.positions, self.positions])
    }
}

/// Mean of `||T_k T_kᵀ - I||²_F` over a `[k, hw, hw]` stack.
pub fn penalty_on_tape(tape: &mut Tape, transforms: Var) -> Result<Var> {
    let s = tape.shape(transforms).to_vec();
    let (k, hw) = (s[0], s[1]);
    let tt = tape.permute(transforms, &[0, 2, 1])?;
    let gram = tape.batched_matmul(transforms, tt)?;
    let eye = tape.constant(Tensor::from_fn(&[k, hw, hw], |i| {
        let r = i % (hw * hw);
        if r / hw == r % hw {
            1.0
        } else {
            0.0
        }
    }));
    let diff = tape.sub(gram, eye)?;
    let sq = tape.hadamard(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / k as f64))
}

/// Alignment loss between `[m, c, hw]` query maps and the aligned support
/// maps paired with them (same shape). `None` for [`AlignMode::None`].
pub fn loss_on_tape(tape: &mut Tape, mode: AlignMode, query: Var, aligned: Var) -> Result<Option<Var>> {
    let loss = match mode {
        AlignMode::None => return Ok(None),
        AlignMode::Niv => tape.mse(query, aligned)?,
        AlignMode::Cpt => {
            let oa = tape.sum_axis(query, 1)?;
            let ob = tape.sum_axis(aligned, 1)?;
            tape.mse(oa, ob)?
        }
        AlignMode::Cosine => {
            let s = tape.shape(query).to_vec();
            let flat = [s[0], s[1] * s[2]];
            let q = tape.reshape(query, &flat)?;
            let a = tape.reshape(aligned, &flat)?;
            for v in [q, a] {
                let zero_row = tape
                    .value(v)
                    .data()
                    .chunks(flat[1])
                    .any(|row| row.iter().all(|&x| x == 0.0));
                if zero_row {
                    return Err(Error::DegenerateInput("cosine loss of a zero feature map".into()));
                }
            }
            let qn = tape.l2_normalize_rows(q)?;
            let an = tape.l2_normalize_rows(a)?;
            let prod = tape.hadamard(qn, an)?;
            let total = tape.sum(prod);
            let mean = tape.scale(total, -1.0 / s[0] as f64);
            tape.add_scalar(mean, 1.0)
        }
    };
    Ok(Some(loss))
}
