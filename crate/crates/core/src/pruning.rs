//! Hard pruning: slice every parameter at the plan's kept channels.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamName, TransformerWeights};
use crate::plan::CompressionPlan;
use crate::tensor::Tensor;

/// Slices one parameter along each of its compressed axes.
pub fn slice_param(name: ParamName, t: &Tensor, plan: &CompressionPlan) -> Result<Tensor> {
    let dims = name.dims();
    match dims.as_slice() {
        [d] => match plan.kept_for(*d) {
            Some(k) => t.select(k.indices()),
            None => Ok(t.clone()),
        },
        [r, c] => {
            let mut out = match plan.kept_for(*r) {
                Some(k) => t.select_rows(k.indices())?,
                None => t.clone(),
            };
            if let Some(k) = plan.kept_for(*c) {
                out = out.select_cols(k.indices())?;
            }
            Ok(out)
        }
        _ => Err(Error::PlanMismatch(format!("unexpected rank for {name}"))),
    }
}

/// The baseline: a standard smaller model whose every parameter is
/// trainable.
pub fn hard_prune(
    base: &TransformerWeights,
    plan: &CompressionPlan,
) -> Result<(ModelConfig, TransformerWeights)> {
    base.validate(&plan.source_config)?;
    let w = base.try_map(|name, t| Ok(slice_param(name, t, plan)?.with_requires_grad(true)))?;
    w.validate(&plan.target_config)?;
    Ok((plan.target_config, w))
}
