//! Projection modules over frozen base matrices.
//!
//! A module holds a frozen `W [d_in×d_out]`, optional trainable
//! `P1 [dS_in×d_in]` and `P2 [d_out×dS_out]`, and an optional trainable
//! residual `W_r` with the materialized shape. The compressed matrix is
//! `W_C = P1·W·P2 + W_r`, rebuilt on the tape once per optimizer step so
//! gradients flow into the projections and never into `W`.

use crate::autodiff::{FlopCategory, Tape, Var};
use crate::error::{Error, Result};
use crate::importance::KeptIndexSet;
use crate::model::{Bound, ModelConfig, ParamName, Trainable, TransformerWeights, Weights};
use crate::plan::{CompressionPlan, Sides};
use crate::pruning::slice_param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModule {
    base: Tensor,
    left: Option<Tensor>,
    right: Option<Tensor>,
    residual: Option<Tensor>,
}

/// Tape handles for one materialization.
#[derive(Debug, Clone, Copy)]
pub struct MaterializedVars {
    pub value: Var,
    pub base: Var,
    pub left: Option<Var>,
    pub right: Option<Var>,
    pub residual: Option<Var>,
}

impl ProjectionModule {
    /// Validates shapes, freezes `base` and marks every other part trainable.
    pub fn new(
        base: Tensor,
        left: Option<Tensor>,
        right: Option<Tensor>,
        residual: Option<Tensor>,
    ) -> Result<Self> {
        let [d_in, d_out] = matrix_shape(&base, "projection base")?;
        if left.is_none() && right.is_none() {
            return Err(Error::Config("projection module needs P1 or P2".into()));
        }
        let mut rows = d_in;
        if let Some(p1) = &left {
            let [r, c] = matrix_shape(p1, "P1")?;
            if c != d_in {
                return Err(Error::shape("P1·W", p1.shape(), base.shape()));
            }
            rows = r;
        }
        let mut cols = d_out;
        if let Some(p2) = &right {
            let [r, c] = matrix_shape(p2, "P2")?;
            if r != d_out {
                return Err(Error::shape("W·P2", base.shape(), p2.shape()));
            }
            cols = c;
        }
        if let Some(wr) = &residual {
            if wr.shape() != [rows, cols] {
                return Err(Error::shape("W_r", wr.shape(), &[rows, cols]));
            }
        }
        let train = |t: Option<Tensor>| t.map(|t| t.with_requires_grad(true));
        Ok(Self {
            base: base.with_requires_grad(false),
            left: train(left),
            right: train(right),
            residual: train(residual),
        })
    }

    /// Selection matrices picking `rows` of the input axis and `cols` of
    /// the output axis; `W_r` starts at zero when requested.
    pub fn selection_init(
        base: Tensor,
        rows: Option<&KeptIndexSet>,
        cols: Option<&KeptIndexSet>,
        residual: bool,
    ) -> Result<Self> {
        let [d_in, d_out] = matrix_shape(&base, "projection base")?;
        let left = rows
            .map(|k| {
                check_dim(k, d_in, "input")?;
                let mut p = Tensor::zeros(&[k.kept_dim(), d_in]);
                for (r, &i) in k.indices().iter().enumerate() {
                    p.data_mut()[r * d_in + i] = 1.0;
                }
                Ok(p)
            })
            .transpose()?;
        let right = cols
            .map(|k| {
                check_dim(k, d_out, "output")?;
                let ds = k.kept_dim();
                let mut p = Tensor::zeros(&[d_out, ds]);
                for (c, &j) in k.indices().iter().enumerate() {
                    p.data_mut()[j * ds + c] = 1.0;
                }
                Ok(p)
            })
            .transpose()?;
        let shape = [
            rows.map_or(d_in, KeptIndexSet::kept_dim),
            cols.map_or(d_out, KeptIndexSet::kept_dim),
        ];
        let wr = residual.then(|| Tensor::zeros(&shape));
        Self::new(base, left, right, wr)
    }

    pub fn sides(&self) -> Sides {
        match (self.left.is_some(), self.right.is_some()) {
            (true, true) => Sides::Both,
            (true, false) => Sides::Left,
            _ => Sides::Right,
        }
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn left(&self) -> Option<&Tensor> {
        self.left.as_ref()
    }

    pub fn right(&self) -> Option<&Tensor> {
        self.right.as_ref()
    }

    pub fn residual(&self) -> Option<&Tensor> {
        self.residual.as_ref()
    }

    /// `[dS_in, dS_out]`.
    pub fn output_shape(&self) -> [usize; 2] {
        [
            self.left.as_ref().map_or(self.base.rows(), Tensor::rows),
            self.right.as_ref().map_or(self.base.cols(), Tensor::cols),
        ]
    }

    /// Records `W_C` on the tape. Matmul work is booked as materialization.
    pub fn materialize(&self, tape: &mut Tape) -> Result<MaterializedVars> {
        tape.set_flop_category(FlopCategory::Materialize);
        let out = self.record(tape);
        tape.set_flop_category(FlopCategory::Forward);
        out
    }

    fn record(&self, tape: &mut Tape) -> Result<MaterializedVars> {
        let base = tape.leaf(&self.base);
        let left = self.left.as_ref().map(|t| tape.leaf(t));
        let right = self.right.as_ref().map(|t| tape.leaf(t));
        let residual = self.residual.as_ref().map(|t| tape.leaf(t));
        let mut value = base;
        if let Some(p1) = left {
            value = tape.matmul(p1, value)?;
        }
        if let Some(p2) = right {
            value = tape.matmul(value, p2)?;
        }
        if let Some(wr) = residual {
            value = tape.add(value, wr)?;
        }
        Ok(MaterializedVars {
            value,
            base,
            left,
            right,
            residual,
        })
    }

    /// `W_C` as a plain tensor, computed by the same kernels as
    /// [`materialize`](Self::materialize).
    pub fn materialize_tensor(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape)?;
        Ok(tape.tensor(vars.value))
    }

    /// Matmul FLOPs of one materialization (`W_r` addition excluded).
    pub fn materialize_flops(&self) -> u64 {
        site_flops(
            self.base.rows(),
            self.base.cols(),
            self.left.as_ref().map(Tensor::rows),
            self.right.as_ref().map(Tensor::cols),
        )
    }

    pub fn trainable_params(&self) -> usize {
        [&self.left, &self.right, &self.residual]
            .into_iter()
            .flatten()
            .map(Tensor::numel)
            .sum()
    }

    /// Named parts in storage order: base, P1, P2, W_r.
    fn parts(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("w", &self.base)];
        out.extend(self.left.as_ref().map(|t| ("p1", t)));
        out.extend(self.right.as_ref().map(|t| ("p2", t)));
        out.extend(self.residual.as_ref().map(|t| ("wr", t)));
        out
    }

    fn parts_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("w", &mut self.base)];
        out.extend(self.left.as_mut().map(|t| ("p1", t)));
        out.extend(self.right.as_mut().map(|t| ("p2", t)));
        out.extend(self.residual.as_mut().map(|t| ("wr", t)));
        out
    }
}

/// `2·dS_in·d_in·d_out` for `P1·W` plus `2·rows·d_out·dS_out` for the right
/// product, where `rows` is `dS_in` when a left projection precedes it.
pub fn site_flops(d_in: usize, d_out: usize, ds_in: Option<usize>, ds_out: Option<usize>) -> u64 {
    let mut f = 0u64;
    let mut rows = d_in as u64;
    if let Some(r) = ds_in {
        f += 2 * r as u64 * d_in as u64 * d_out as u64;
        rows = r as u64;
    }
    if let Some(c) = ds_out {
        f += 2 * rows * d_out as u64 * c as u64;
    }
    f
}

/// Evaluates `x·W_C` and `((x·P1)·W)·P2 + x·W_r` for `x [n×dS_in]`.
pub fn projected_forward_equivalence(
    x: &Tensor,
    module: &ProjectionModule,
) -> Result<(Tensor, Tensor)> {
    let [_, ds_in] = matrix_shape(x, "x")?;
    let [rows, _] = module.output_shape();
    if ds_in != rows {
        return Err(Error::shape("x·W_C", x.shape(), &module.output_shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().with_requires_grad(false));
    let wc = module.record(&mut tape)?;
    let lhs = tape.matmul(xv, wc.value)?;

    let mut h = xv;
    if let Some(p1) = wc.left {
        h = tape.matmul(h, p1)?;
    }
    h = tape.matmul(h, wc.base)?;
    if let Some(p2) = wc.right {
        h = tape.matmul(h, p2)?;
    }
    if let Some(wr) = wc.residual {
        let r = tape.matmul(xv, wr)?;
        h = tape.add(h, r)?;
    }
    Ok((tape.tensor(lhs), tape.tensor(h)))
}

fn matrix_shape(t: &Tensor, what: &'static str) -> Result<[usize; 2]> {
    match t.shape() {
        &[r, c] => Ok([r, c]),
        other => Err(Error::shape(what, other, &[0, 0])),
    }
}

fn check_dim(k: &KeptIndexSet, dim: usize, axis: &str) -> Result<()> {
    if k.original_dim() != dim {
        return Err(Error::PlanMismatch(format!(
            "kept set over {} channels applied to {axis} axis of size {dim}",
            k.original_dim()
        )));
    }
    Ok(())
}

/// One parameter slot of a projected model.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectedParam {
    Projected(ProjectionModule),
    /// Vectors are hard-sliced and trained directly; the frozen base copy is
    /// kept so the full source model stays recoverable.
    Sliced {
        trainable: Tensor,
        base: Tensor,
    },
}

impl ProjectedParam {
    fn parts(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            ProjectedParam::Projected(m) => m.parts(),
            ProjectedParam::Sliced { trainable, base } => vec![("base", base), ("", trainable)],
        }
    }

    fn parts_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            ProjectedParam::Projected(m) => m.parts_mut(),
            ProjectedParam::Sliced { trainable, base } => vec![("base", base), ("", trainable)],
        }
    }
}

fn part_name(name: ParamName, part: &str) -> String {
    if part.is_empty() {
        name.to_string()
    } else {
        format!("{name}.{part}")
    }
}

/// The source model wrapped in projection modules according to a plan.
/// Its forward pass is the plain decoder at the target config.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedModel {
    pub plan: CompressionPlan,
    pub weights: Weights<ProjectedParam>,
}

/// Wraps every matrix of `base` per the plan's site map and slices the
/// vectors. With `residual`, each module gets a zero `W_r`.
pub fn attach_projections(
    base: &TransformerWeights,
    plan: &CompressionPlan,
    residual: bool,
) -> Result<ProjectedModel> {
    base.validate(&plan.source_config)?;
    let weights = base.try_map(|name, w| {
        let frozen = w.clone().with_requires_grad(false);
        if !name.is_matrix() {
            let trainable = slice_param(name, w, plan)?.with_requires_grad(true);
            return Ok(ProjectedParam::Sliced {
                trainable,
                base: frozen,
            });
        }
        let sides = plan
            .site_map
            .get(&name)
            .ok_or_else(|| Error::PlanMismatch(format!("no site entry for {name}")))?;
        let dims = name.dims();
        let rows = if sides.left() {
            plan.kept_for(dims[0])
        } else {
            None
        };
        let cols = if sides.right() {
            plan.kept_for(dims[1])
        } else {
            None
        };
        if rows.is_some() != sides.left() || cols.is_some() != sides.right() {
            return Err(Error::PlanMismatch(format!(
                "site {name} projects an uncompressed axis"
            )));
        }
        ProjectionModule::selection_init(frozen, rows, cols, residual)
            .map(ProjectedParam::Projected)
    })?;
    Ok(ProjectedModel {
        plan: plan.clone(),
        weights,
    })
}

impl ProjectedModel {
    /// Same layout as [`attach_projections`] over an all-zero base; used to
    /// receive a checkpoint.
    pub fn skeleton(plan: &CompressionPlan, residual: bool) -> Result<Self> {
        let cfg = &plan.source_config;
        let zeros = Weights::from_fn(cfg.n_layers, cfg.tied_embeddings, |n| {
            Ok(Tensor::zeros(&n.shape(cfg)))
        })?;
        attach_projections(&zeros, plan, residual)
    }

    pub fn has_residual(&self) -> bool {
        self.weights.iter().any(|(_, p)| match p {
            ProjectedParam::Projected(m) => m.residual.is_some(),
            ProjectedParam::Sliced { .. } => false,
        })
    }

    /// Iterates over the projection modules.
    pub fn modules(&self) -> impl Iterator<Item = (ParamName, &ProjectionModule)> {
        self.weights.iter().filter_map(|(n, p)| match p {
            ProjectedParam::Projected(m) => Some((n, m)),
            ProjectedParam::Sliced { .. } => None,
        })
    }

    /// Frozen base tensors in canonical order, as a full source model.
    pub fn base_weights(&self) -> TransformerWeights {
        self.weights
            .try_map(|_, p| {
                Ok(match p {
                    ProjectedParam::Projected(m) => m.base.clone(),
                    ProjectedParam::Sliced { base, .. } => base.clone(),
                })
            })
            .expect("infallible")
    }

    /// Materializes every site once into a standalone model at the target
    /// config. All exported parameters are trainable.
    pub fn export_compressed(&self) -> Result<(ModelConfig, TransformerWeights)> {
        let w = self.weights.try_map(|_, p| {
            let t = match p {
                ProjectedParam::Projected(m) => m.materialize_tensor()?,
                ProjectedParam::Sliced { trainable, .. } => {
                    Tensor::new(trainable.shape().to_vec(), trainable.data().to_vec())?
                }
            };
            Ok(t.with_requires_grad(true))
        })?;
        w.validate(&self.plan.target_config)?;
        Ok((self.plan.target_config, w))
    }

    /// Sum of materialization FLOPs over all sites.
    pub fn materialize_flops(&self) -> u64 {
        self.modules().map(|(_, m)| m.materialize_flops()).sum()
    }
}

impl Trainable for ProjectedModel {
    fn forward_config(&self) -> &ModelConfig {
        &self.plan.target_config
    }

    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut leaves = Vec::new();
        let weights = self.weights.try_map(|_, p| match p {
            ProjectedParam::Projected(m) => {
                let v = m.materialize(tape)?;
                leaves.push(Some(v.base));
                leaves.extend(
                    [v.left, v.right, v.residual]
                        .into_iter()
                        .flatten()
                        .map(Some),
                );
                Ok(v.value)
            }
            ProjectedParam::Sliced { trainable, .. } => {
                let v = tape.leaf(trainable);
                leaves.push(None);
                leaves.push(Some(v));
                Ok(v)
            }
        })?;
        Ok(Bound { weights, leaves })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        self.weights
            .iter()
            .flat_map(|(n, p)| {
                p.parts()
                    .into_iter()
                    .map(move |(part, t)| (part_name(n, part), t))
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.weights
            .iter_mut()
            .into_iter()
            .flat_map(|(n, p)| {
                p.parts_mut()
                    .into_iter()
                    .map(move |(part, t)| (part_name(n, part), t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_materialize() {
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let m = ProjectionModule::new(
            w,
            Some(Tensor::from_rows(&[&[1.0, 0.0]])),
            Some(Tensor::from_rows(&[&[1.0], &[0.0]])),
            Some(Tensor::zeros(&[1, 1])),
        )
        .unwrap();
        assert_eq!(m.materialize_tensor().unwrap().data(), &[1.0]);
        assert!(!m.base().requires_grad());
        assert_eq!(m.materialize_flops(), 2 * 2 * 2 + 2 * 2);
    }

    #[test]
    fn slice_equivalence_4x4() {
        let w = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let rows = KeptIndexSet::new(vec![0, 2], 4).unwrap();
        let cols = KeptIndexSet::new(vec![1, 3], 4).unwrap();
        let m =
            ProjectionModule::selection_init(w.clone(), Some(&rows), Some(&cols), true).unwrap();
        let wc = m.materialize_tensor().unwrap();
        assert_eq!(wc.data(), &[w.at(0, 1), w.at(0, 3), w.at(2, 1), w.at(2, 3)]);
        assert_eq!(m.materialize_flops(), 96);
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(ProjectionModule::new(w.clone(), None, None, None).is_err());
        assert!(
            ProjectionModule::new(w.clone(), Some(Tensor::zeros(&[1, 3])), None, None).is_err()
        );
        assert!(ProjectionModule::new(
            w.clone(),
            None,
            Some(Tensor::zeros(&[3, 2])),
            Some(Tensor::zeros(&[2, 3]))
        )
        .is_err());
        let k = KeptIndexSet::new(vec![0], 5).unwrap();
        assert!(ProjectionModule::selection_init(w, Some(&k), None, false).is_err());
    }
}
