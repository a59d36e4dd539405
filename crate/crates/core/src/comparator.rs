//! Relation network `sigmoid(W2 relu(W1 z + b1) + b2)` and the episodic
//! squared-error objective.

use ndarray::{Array1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ModelParams, ParamId};
use crate::tensor::{Tape, Tensor, Var};

/// Relation scores for `queries` rows against `classes` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    queries: usize,
    classes: usize,
    scores: Vec<f64>,
}

impl RelationMatrix {
    pub fn new(queries: usize, classes: usize, scores: Vec<f64>) -> Result<Self> {
        if classes == 0 || scores.len() != queries * classes {
            return Err(Error::shape(
                "relation_matrix",
                format!("{} scores for {queries}x{classes}", scores.len()),
            ));
        }
        Ok(RelationMatrix {
            queries,
            classes,
            scores,
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, query: usize, class: usize) -> f64 {
        self.scores[query * self.classes + class]
    }

    pub fn row(&self, query: usize) -> &[f64] {
        &self.scores[query * self.classes..(query + 1) * self.classes]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// `Σ_i Σ_j (r_ij - [y_i == y_j])²`, summed rather than averaged.
pub fn episode_loss(scores: &RelationMatrix, query_labels: &[usize], class_labels: &[usize]) -> Result<f64> {
    if query_labels.len() != scores.queries() || class_labels.len() != scores.classes() {
        return Err(Error::InvalidEpisode(format!(
            "{} query and {} class labels for a {}x{} relation matrix",
            query_labels.len(),
            class_labels.len(),
            scores.queries(),
            scores.classes()
        )));
    }
    let mut loss = 0.0;
    for (i, y) in query_labels.iter().enumerate() {
        if !class_labels.contains(y) {
            return Err(Error::InvalidEpisode(format!("query label {y} is not among the episode classes")));
        }
        for (j, c) in class_labels.iter().enumerate() {
            let target = if y == c { 1.0 } else { 0.0 };
            let d = scores.get(i, j) - target;
            loss += d * d;
        }
    }
    Ok(loss)
}

/// Argmax class per query; ties go to the lowest index.
pub fn predict(scores: &RelationMatrix) -> Vec<usize> {
    (0..scores.queries())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Comparator {
    input_dim: usize,
    hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Comparator {
    pub fn init(input_dim: usize, hidden: usize, params: &mut ModelParams, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 || input_dim == 0 {
            return Err(Error::Config("comparator widths must be >= 1".into()));
        }
        Ok(Comparator {
            input_dim,
            hidden,
            w1: params.insert("comparator.fc1.weight", fan_in_uniform(&[hidden, input_dim], input_dim, rng))?,
            b1: params.insert("comparator.fc1.bias", fan_in_uniform(&[hidden], input_dim, rng))?,
            w2: params.insert("comparator.fc2.weight", fan_in_uniform(&[1, hidden], hidden, rng))?,
            b2: params.insert("comparator.fc2.bias", fan_in_uniform(&[1], hidden, rng))?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Score of a single comparative feature.
    pub fn relation_score(&self, params: &ModelParams, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.input_dim {
            return Err(Error::shape(
                "relation_score",
                format!("feature of width {} for comparator input {}", feature.len(), self.input_dim),
            ));
        }
        let w1 = ArrayView2::from_shape((self.hidden, self.input_dim), params.tensor(self.w1).data())
            .expect("parameter shape");
        let h = w1.dot(&Array1::from(feature.to_vec())) + Array1::from(params.tensor(self.b1).data().to_vec());
        let h = h.mapv(|v| v.max(0.0));
        let w2 = params.tensor(self.w2).data();
        let logit = h.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + params.tensor(self.b2).item();
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    /// Scores `[m*k, d]` features into an `[m, k]` matrix.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var, queries: usize, classes: usize) -> Result<Var> {
        let s = tape.shape(features).to_vec();
        if s != [queries * classes, self.input_dim] {
            return Err(Error::shape(
                "comparator",
                format!("features {s:?} for {queries}x{classes} pairs of width {}", self.input_dim),
            ));
        }
        let h = tape.linear(features, bound.var(self.w1), Some(bound.var(self.b1)))?;
        let h = tape.relu(h);
        let logits = tape.linear(h, bound.var(self.w2), Some(bound.var(self.b2)))?;
        let r = tape.sigmoid(logits);
        tape.reshape(r, &[queries, classes])
    }
}

/// One-hot targets `[m, k]` for episode-local class indices.
pub fn indicator(query_classes: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn(&[query_classes.len(), classes], |i| {
        if query_classes[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    })
}

/// Summed squared error of `[m, k]` scores against one-hot targets.
pub fn loss_on_tape(tape: &mut Tape, scores: Var, query_classes: &[usize]) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != query_classes.len() {
        return Err(Error::shape("episode_loss", format!("scores {s:?} for {} queries", query_classes.len())));
    }
    if let Some(bad) = query_classes.iter().find(|&&c| c >= s[1]) {
        return Err(Error::InvalidEpisode(format!("query class {bad} outside {} episode classes", s[1])));
    }
    let target = tape.constant(indicator(query_classes, s[1]));
    let mse = tape.mse(scores, target)?;
    Ok(tape.scale(mse, (s[0] * s[1]) as f64))
}
