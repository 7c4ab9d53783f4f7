//! Target sizes and kept channels for one compression run.
//!
//! A plan is computed once from importance scores and then drives both the
//! projected model and the hard-pruned baseline, so the two methods always
//! agree on which channels survive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{select_top_k, ImportanceMethod, KeptIndexSet, ModelScores};
use crate::model::{Dim, ModelConfig, ParamName};

/// Which sides of a weight matrix carry a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    /// `P1 · W`: the input (row) axis is compressed.
    Left,
    /// `W · P2`: the output (column) axis is compressed.
    Right,
    Both,
}

impl Sides {
    pub fn left(self) -> bool {
        matches!(self, Sides::Left | Sides::Both)
    }

    pub fn right(self) -> bool {
        matches!(self, Sides::Right | Sides::Both)
    }
}

/// Named compression presets accepted wherever a level is parsed.
pub const LEVEL_PRESETS: [(&str, f64); 3] = [("35", 0.35), ("50", 0.5), ("65", 0.65)];

/// Parses `0.5`, `50%` or a preset alias such as `50`.
pub fn parse_level(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((_, v)) = LEVEL_PRESETS.iter().find(|(name, _)| *name == s) {
        return Ok(*v);
    }
    let value = match s.strip_suffix('%') {
        Some(pct) => pct.trim().parse::<f64>().map(|p| p / 100.0),
        None => s.parse::<f64>(),
    }
    .map_err(|_| Error::Config(format!("invalid compression level {s:?}")))?;
    check_level(value)?;
    Ok(value)
}

fn check_level(c: f64) -> Result<()> {
    if c > 0.0 && c < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "compression level {c} outside (0, 1)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    pub source_config: ModelConfig,
    pub target_config: ModelConfig,
    pub compression_level: f64,
    pub importance: ImportanceMethod,
    /// `round((1 - c) · d_model)` before flooring to a head multiple.
    pub nominal_width: usize,
    pub width_kept: KeptIndexSet,
    pub ffn_kept: Vec<KeptIndexSet>,
    pub site_map: BTreeMap<ParamName, Sides>,
    /// `1 - count_params(target) / count_params(source)`.
    pub achieved_reduction: f64,
}

/// Target width: the largest multiple of `n_heads` not above
/// `round((1 - c) · d_model)`.
pub fn target_width(config: &ModelConfig, level: f64) -> Result<(usize, usize)> {
    check_level(level)?;
    let nominal = ((1.0 - level) * config.d_model as f64).round() as usize;
    let width = nominal / config.n_heads * config.n_heads;
    if width < config.n_heads {
        return Err(Error::OverCompression(format!(
            "level {level} leaves width {nominal} below n_heads {}",
            config.n_heads
        )));
    }
    Ok((nominal, width))
}

pub fn target_ffn(config: &ModelConfig, level: f64) -> Result<usize> {
    check_level(level)?;
    let ff = ((1.0 - level) * config.d_ff as f64).round() as usize;
    if ff == 0 {
        return Err(Error::OverCompression(format!(
            "level {level} removes every FFN channel (d_ff {})",
            config.d_ff
        )));
    }
    Ok(ff)
}

pub fn plan_compression(
    config: &ModelConfig,
    level: f64,
    scores: &ModelScores,
) -> Result<CompressionPlan> {
    config.validate()?;
    let (nominal, width) = target_width(config, level)?;
    let ff = target_ffn(config, level)?;
    if scores.width.len() != config.d_model || scores.ffn.len() != config.n_layers {
        return Err(Error::PlanMismatch(
            "importance scores do not match config".into(),
        ));
    }
    let width_kept = select_top_k(scores.width.scores(), width)?;
    let ffn_kept = scores
        .ffn
        .iter()
        .map(|s| {
            if s.len() != config.d_ff {
                return Err(Error::PlanMismatch(
                    "FFN scores length differs from d_ff".into(),
                ));
            }
            select_top_k(s.scores(), ff)
        })
        .collect::<Result<Vec<_>>>()?;
    CompressionPlan::from_kept_sets(
        config,
        level,
        scores.width.method,
        nominal,
        width_kept,
        ffn_kept,
    )
}

impl CompressionPlan {
    /// Builds a plan from explicit kept sets. All FFN sets must have the same
    /// size, since the target is a uniform config.
    pub fn from_kept_sets(
        config: &ModelConfig,
        level: f64,
        importance: ImportanceMethod,
        nominal_width: usize,
        width_kept: KeptIndexSet,
        ffn_kept: Vec<KeptIndexSet>,
    ) -> Result<Self> {
        config.validate()?;
        if width_kept.original_dim() != config.d_model {
            return Err(Error::PlanMismatch(
                "width set dimension differs from d_model".into(),
            ));
        }
        if ffn_kept.len() != config.n_layers {
            return Err(Error::PlanMismatch(format!(
                "{} FFN sets for {} layers",
                ffn_kept.len(),
                config.n_layers
            )));
        }
        let ff = ffn_kept
            .first()
            .map(KeptIndexSet::kept_dim)
            .unwrap_or(config.d_ff);
        if ffn_kept
            .iter()
            .any(|k| k.original_dim() != config.d_ff || k.kept_dim() != ff)
        {
            return Err(Error::PlanMismatch(
                "FFN sets must share one size over d_ff".into(),
            ));
        }
        let target_config = ModelConfig {
            d_model: width_kept.kept_dim(),
            d_ff: ff,
            ..*config
        };
        if target_config.d_model % target_config.n_heads != 0 {
            return Err(Error::OverCompression(format!(
                "target width {} not divisible by n_heads {}",
                target_config.d_model, target_config.n_heads
            )));
        }
        let site_map = ParamName::all(config)
            .into_iter()
            .filter(|n| n.is_matrix())
            .map(|n| {
                let d = n.dims();
                let sides = match (compressible(d[0]), compressible(d[1])) {
                    (true, true) => Sides::Both,
                    (true, false) => Sides::Left,
                    (false, true) => Sides::Right,
                    (false, false) => unreachable!("every matrix touches width or FFN"),
                };
                (n, sides)
            })
            .collect();
        let achieved_reduction =
            1.0 - target_config.count_params() as f64 / config.count_params() as f64;
        Ok(Self {
            source_config: *config,
            target_config,
            compression_level: level,
            importance,
            nominal_width,
            width_kept,
            ffn_kept,
            site_map,
            achieved_reduction,
        })
    }

    /// Kept channels along a semantic axis; `None` when the axis is not
    /// compressed.
    pub fn kept_for(&self, dim: Dim) -> Option<&KeptIndexSet> {
        match dim {
            Dim::Vocab | Dim::Positions => None,
            Dim::Width => Some(&self.width_kept),
            Dim::Ffn(l) => self.ffn_kept.get(l),
        }
    }

    /// Achieved width ratio `dS_model / d_model`.
    pub fn width_ratio(&self) -> f64 {
        self.target_config.d_model as f64 / self.source_config.d_model as f64
    }

    /// Checks that the plan was made for `config`.
    pub fn check_source(&self, config: &ModelConfig) -> Result<()> {
        if &self.source_config != config {
            return Err(Error::PlanMismatch(format!(
                "plan built for {:?}, model is {:?}",
                self.source_config, config
            )));
        }
        Ok(())
    }

    /// Structural validation, used after deserializing a manifest.
    pub fn validate(&self) -> Result<()> {
        check_level(self.compression_level)?;
        let recheck = |k: &KeptIndexSet| KeptIndexSet::new(k.indices().to_vec(), k.original_dim());
        let rebuilt = Self::from_kept_sets(
            &self.source_config,
            self.compression_level,
            self.importance,
            self.nominal_width,
            recheck(&self.width_kept)?,
            self.ffn_kept.iter().map(recheck).collect::<Result<_>>()?,
        )?;
        if rebuilt != *self {
            return Err(Error::PlanMismatch(
                "manifest is internally inconsistent".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("plan manifest: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }
}

fn compressible(d: Dim) -> bool {
    matches!(d, Dim::Width | Dim::Ffn(_))
}
