//! Adapter parameter accounting for full-size architectures.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::micromodel::{LayerSelection, ModelConfig, Sublayer};
use crate::modulation::GraspMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Published total parameter count, the `%` denominator.
    pub total_params: f64,
    pub fused_qkv: bool,
}

impl ArchSpec {
    pub fn roberta_base() -> Self {
        Self {
            name: "roberta-base".into(),
            n_blocks: 12,
            d_model: 768,
            d_ff: 3072,
            total_params: 125e6,
            fused_qkv: false,
        }
    }

    pub fn roberta_large() -> Self {
        Self {
            name: "roberta-large".into(),
            n_blocks: 24,
            d_model: 1024,
            d_ff: 4096,
            total_params: 355e6,
            fused_qkv: false,
        }
    }

    /// One combined `QKV` projection per block.
    pub fn gpt2_medium() -> Self {
        Self {
            name: "gpt2-medium".into(),
            n_blocks: 24,
            d_model: 1024,
            d_ff: 4096,
            total_params: 354.9e6,
            fused_qkv: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "roberta-base" => Ok(Self::roberta_base()),
            "roberta-large" => Ok(Self::roberta_large()),
            "gpt2-medium" => Ok(Self::gpt2_medium()),
            other => Err(LabError::config(
                "arch",
                format!("unknown architecture `{other}` (expected roberta-base, roberta-large, gpt2-medium)"),
            )),
        }
    }

    /// Accounting view of a toy model. `total_params` is its base size.
    pub fn from_model_config(cfg: &ModelConfig, total_params: f64) -> Self {
        Self {
            name: "toy".into(),
            n_blocks: cfg.n_blocks,
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            total_params,
            fused_qkv: cfg.fused_qkv,
        }
    }

    fn as_model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_blocks: self.n_blocks,
            fused_qkv: self.fused_qkv,
            ..ModelConfig::default()
        }
    }

    /// `(name, D_in, D_out)` of each linear sub-layer in one block.
    pub fn layout(&self) -> Vec<(Sublayer, usize, usize)> {
        let cfg = self.as_model_config();
        cfg.sublayers()
            .into_iter()
            .map(|s| {
                let (i, o) = cfg.dims(s);
                (s, i, o)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMethod {
    Grasp,
    StochShared,
    StochPerRow,
    /// One trainable shift per output unit of each selected layer.
    BitfitLike,
}

impl CountMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grasp" => Ok(CountMethod::Grasp),
            "stoch_shared" | "stoch" => Ok(CountMethod::StochShared),
            "stoch_per_row" => Ok(CountMethod::StochPerRow),
            "bitfit_like" | "bitfit" => Ok(CountMethod::BitfitLike),
            other => Err(LabError::config(
                "method",
                format!("unknown method `{other}` (expected grasp, stoch_shared, stoch_per_row, bitfit_like)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub arch: String,
    pub count: usize,
    /// `100 * count / total_params`, unrounded.
    pub percent: f64,
}

/// Adapter parameters for `method` at `k` groups over the selected layers.
/// Classifier heads are excluded.
pub fn count_adapter_params(
    arch: &ArchSpec,
    method: CountMethod,
    k: usize,
    selection: LayerSelection,
    mode: GraspMode,
) -> Result<ParamCount> {
    if k == 0 {
        return Err(LabError::config("k", "must be >= 1"));
    }
    if !(arch.total_params > 0.0) {
        return Err(LabError::config("total_params", "must be > 0"));
    }
    let layout = arch.layout();
    let chosen = selection.resolve(&layout.iter().map(|l| l.0).collect::<Vec<_>>());
    let per_block: usize = layout
        .iter()
        .filter(|(s, _, _)| chosen.contains(s))
        .map(|&(_, d_in, d_out)| match method {
            CountMethod::Grasp => mode.param_count(k),
            CountMethod::StochShared => 2 * k,
            CountMethod::StochPerRow => 2 * d_in * k,
            CountMethod::BitfitLike => d_out,
        })
        .sum();
    let count = per_block * arch.n_blocks;
    Ok(ParamCount {
        arch: arch.name.clone(),
        count,
        percent: 100.0 * count as f64 / arch.total_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roberta_base_k128() {
        let c = count_adapter_params(
            &ArchSpec::roberta_base(),
            CountMethod::Grasp,
            128,
            LayerSelection::AllLinear,
            GraspMode::Both,
        )
        .unwrap();
        assert_eq!(c.count, 18_432);
        assert!((c.percent - 0.014_745_6).abs() < 1e-12);
    }

    #[test]
    fn zero_k_rejected() {
        assert!(count_adapter_params(
            &ArchSpec::roberta_base(),
            CountMethod::Grasp,
            0,
            LayerSelection::AllLinear,
            GraspMode::Both,
        )
        .is_err());
    }

    #[test]
    fn per_row_scales_with_input_dim() {
        let c = count_adapter_params(
            &ArchSpec::roberta_base(),
            CountMethod::StochPerRow,
            2,
            LayerSelection::Ff2Only,
            GraspMode::Both,
        )
        .unwrap();
        assert_eq!(c.count, 12 * 2 * 3072 * 2);
    }

    #[test]
    fn unknown_preset_names_field() {
        assert!(matches!(ArchSpec::preset("bert"), Err(LabError::Config { field, .. }) if field == "arch"));
    }
}
