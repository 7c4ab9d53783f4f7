//! Channel importance scores and kept-index selection.
//!
//! Both compression methods consume the same [`KeptIndexSet`]s, so the
//! keep/drop decision is shared by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardUniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dim, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

/// A compressible axis of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// The residual stream, scored once for the whole model.
    ModelWidth,
    /// The FFN hidden axis of one layer.
    FfnHidden(usize),
}

impl Axis {
    fn dim(self) -> Dim {
        match self {
            Axis::ModelWidth => Dim::Width,
            Axis::FfnHidden(l) => Dim::Ffn(l),
        }
    }

    pub fn size(self, config: &ModelConfig) -> usize {
        match self {
            Axis::ModelWidth => config.d_model,
            Axis::FfnHidden(_) => config.d_ff,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Axis::ModelWidth => 0,
            Axis::FfnHidden(l) => l as u64 + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    Magnitude,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub axis: Axis,
    pub method: ImportanceMethod,
    scores: Vec<f64>,
}

impl ImportanceScores {
    pub fn new(axis: Axis, method: ImportanceMethod, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Config("importance scores must be non-empty".into()));
        }
        if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "importance scores must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            axis,
            method,
            scores,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Sorted, unique channel indices kept out of `original_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptIndexSet {
    indices: Vec<usize>,
    original_dim: usize,
}

impl KeptIndexSet {
    pub fn new(mut indices: Vec<usize>, original_dim: usize) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::Config("kept indices must be unique".into()));
        }
        if indices.is_empty() || indices.len() > original_dim {
            return Err(Error::Config(format!(
                "kept set of size {} invalid for dimension {original_dim}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= original_dim) {
            return Err(Error::Index {
                what: "kept channel",
                index: bad,
                limit: original_dim,
            });
        }
        Ok(Self {
            indices,
            original_dim,
        })
    }

    pub fn all(dim: usize) -> Self {
        Self {
            indices: (0..dim).collect(),
            original_dim: dim,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn original_dim(&self) -> usize {
        self.original_dim
    }

    pub fn kept_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn is_identity(&self) -> bool {
        self.indices.len() == self.original_dim
    }
}

/// Which side of a matrix indexes the scored channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixSide {
    Rows,
    Cols,
}

/// `score[c] = sqrt(Σ_M Σ_other M[c,·]² or M[·,c]²)` over the given
/// matrices.
pub fn aggregate_l2(dim: usize, parts: &[(&Tensor, MatrixSide)]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    for &(m, side) in parts {
        let (r, c) = (m.rows(), m.cols());
        let along = if side == MatrixSide::Rows { r } else { c };
        if m.shape().len() != 2 || along != dim {
            return Err(Error::shape("aggregate_l2", m.shape(), &[dim]));
        }
        for (i, row) in m.data().chunks(c).enumerate() {
            match side {
                MatrixSide::Rows => acc[i] += row.iter().map(|v| v * v).sum::<f64>(),
                MatrixSide::Cols => acc.iter_mut().zip(row).for_each(|(a, v)| *a += v * v),
            }
        }
    }
    Ok(acc.into_iter().map(f64::sqrt).collect())
}

/// Aggregated L2 magnitude of every matrix that reads from or writes to
/// `axis`.
pub fn magnitude_scores(weights: &TransformerWeights, axis: Axis) -> Result<ImportanceScores> {
    let target = axis.dim();
    let mut parts = Vec::new();
    for (name, t) in weights.iter() {
        let dims = name.dims();
        if dims.len() != 2 {
            continue;
        }
        if dims[0] == target {
            parts.push((t, MatrixSide::Rows));
        }
        if dims[1] == target {
            parts.push((t, MatrixSide::Cols));
        }
    }
    if parts.is_empty() {
        return Err(Error::Config(format!("axis {axis:?} not present in model")));
    }
    let dim = match parts[0].1 {
        MatrixSide::Rows => parts[0].0.rows(),
        MatrixSide::Cols => parts[0].0.cols(),
    };
    ImportanceScores::new(
        axis,
        ImportanceMethod::Magnitude,
        aggregate_l2(dim, &parts)?,
    )
}

/// Seeded uniform(0, 1) scores. Each axis draws from its own ChaCha stream so
/// per-layer FFN scores are independent under one seed.
pub fn random_scores(axis: Axis, dim: usize, seed: u64) -> Result<ImportanceScores> {
    if dim == 0 {
        return Err(Error::Config("random_scores: dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(axis.stream());
    let scores = (0..dim).map(|_| StandardUniform.sample(&mut rng)).collect();
    ImportanceScores::new(axis, ImportanceMethod::Random { seed }, scores)
}

/// Indices of the `k` largest scores, ties broken toward the lower index,
/// returned ascending.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<KeptIndexSet> {
    let dim = scores.len();
    if k == 0 || k > dim {
        return Err(Error::Config(format!(
            "top-k: k={k} out of range 1..={dim}"
        )));
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    KeptIndexSet::new(order, dim)
}

/// Scores for the width axis and every layer's FFN axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub width: ImportanceScores,
    pub ffn: Vec<ImportanceScores>,
}

impl ModelScores {
    pub fn compute(
        weights: &TransformerWeights,
        config: &ModelConfig,
        method: ImportanceMethod,
    ) -> Result<Self> {
        let score = |axis: Axis| match method {
            ImportanceMethod::Magnitude => magnitude_scores(weights, axis),
            ImportanceMethod::Random { seed } => random_scores(axis, axis.size(config), seed),
        };
        Ok(Self {
            width: score(Axis::ModelWidth)?,
            ffn: (0..config.n_layers)
                .map(|l| score(Axis::FfnHidden(l)))
                .collect::<Result<_>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let m = Tensor::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]);
        assert_eq!(
            aggregate_l2(2, &[(&m, MatrixSide::Cols)]).unwrap(),
            vec![5.0, 0.0]
        );
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            select_top_k(&[0.1, 0.9, 0.5], 2).unwrap().indices(),
            &[1, 2]
        );
        assert_eq!(select_top_k(&[1.0; 4], 2).unwrap().indices(), &[0, 1]);
        assert!(select_top_k(&[1.0; 4], 0).is_err());
        assert!(select_top_k(&[1.0; 4], 5).is_err());
    }

    #[test]
    fn random_scores_are_seeded() {
        let a = random_scores(Axis::ModelWidth, 16, 3).unwrap();
        let b = random_scores(Axis::ModelWidth, 16, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.scores().iter().all(|&s| (0.0..1.0).contains(&s)));
        let one = random_scores(Axis::ModelWidth, 1, 3).unwrap();
        assert_eq!(select_top_k(one.scores(), 1).unwrap().indices(), &[0]);
        assert!(random_scores(Axis::ModelWidth, 0, 3).is_err());
    }

    #[test]
    fn different_seeds_pick_different_sets() {
        let a = random_scores(Axis::ModelWidth, 256, 1).unwrap();
        let b = random_scores(Axis::ModelWidth, 256, 2).unwrap();
        assert_ne!(
            select_top_k(a.scores(), 128).unwrap(),
            select_top_k(b.scores(), 128).unwrap()
        );
    }

    #[test]
    fn kept_set_validation() {
        assert!(KeptIndexSet::new(vec![0, 0], 3).is_err());
        assert!(KeptIndexSet::new(vec![3], 3).is_err());
        assert!(KeptIndexSet::new(vec![], 3).is_err());
        assert_eq!(KeptIndexSet::new(vec![2, 0], 3).unwrap().indices(), &[0, 2]);
    }

    #[test]
    fn scores_reject_negative() {
        assert!(
            ImportanceScores::new(Axis::ModelWidth, ImportanceMethod::Magnitude, vec![-1.0])
                .is_err()
        );
    }
}
