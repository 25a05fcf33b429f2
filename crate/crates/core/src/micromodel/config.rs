use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub max_seq: usize,
    pub n_classes: usize,
    /// One `QKV` projection per block instead of separate `Q`, `K`, `V`.
    pub fused_qkv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_model: 32,
            n_heads: 2,
            d_ff: 128,
            n_blocks: 2,
            max_seq: 16,
            n_classes: 4,
            fused_qkv: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_blocks", self.n_blocks),
            ("max_seq", self.max_seq),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(LabError::config(name, "must be >= 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LabError::config(
                "n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    /// Linear sub-layers of one block, in registry order.
    pub fn sublayers(&self) -> Vec<Sublayer> {
        if self.fused_qkv {
            vec![Sublayer::Qkv, Sublayer::AttnOut, Sublayer::Ff1, Sublayer::Ff2]
        } else {
            vec![
                Sublayer::Q,
                Sublayer::K,
                Sublayer::V,
                Sublayer::AttnOut,
                Sublayer::Ff1,
                Sublayer::Ff2,
            ]
        }
    }

    /// `(D_in, D_out)` of a sub-layer.
    pub fn dims(&self, s: Sublayer) -> (usize, usize) {
        let d = self.d_model;
        match s {
            Sublayer::Q | Sublayer::K | Sublayer::V | Sublayer::AttnOut => (d, d),
            Sublayer::Qkv => (d, 3 * d),
            Sublayer::Ff1 => (d, self.d_ff),
            Sublayer::Ff2 => (self.d_ff, d),
        }
    }

    /// Stable registry names `block{b}.{Q|K|V|AttnOut|FF1|FF2}`.
    pub fn registry(&self) -> Vec<String> {
        (0..self.n_blocks)
            .flat_map(|b| self.sublayers().into_iter().map(move |s| layer_name(b, s)))
            .collect()
    }
}

pub fn layer_name(block: usize, s: Sublayer) -> String {
    format!("block{block}.{}", s.label())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sublayer {
    Q,
    K,
    V,
    #[serde(rename = "QKV")]
    Qkv,
    AttnOut,
    #[serde(rename = "FF1")]
    Ff1,
    #[serde(rename = "FF2")]
    Ff2,
}

impl Sublayer {
    pub fn label(self) -> &'static str {
        match self {
            Sublayer::Q => "Q",
            Sublayer::K => "K",
            Sublayer::V => "V",
            Sublayer::Qkv => "QKV",
            Sublayer::AttnOut => "AttnOut",
            Sublayer::Ff1 => "FF1",
            Sublayer::Ff2 => "FF2",
        }
    }
}

/// Which linear sub-layers receive adapters. LayerNorm is never selected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    AllLinear,
    KVFf2,
    Ff2Only,
}

impl LayerSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all_linear" | "all-linear" => Ok(LayerSelection::AllLinear),
            "k_v_ff2" | "kv_ff2" | "k-v-ff2" => Ok(LayerSelection::KVFf2),
            "ff2_only" | "ff2" | "ff2-only" => Ok(LayerSelection::Ff2Only),
            other => Err(LabError::config(
                "layers",
                format!("unknown selection `{other}` (expected all_linear, k_v_ff2, ff2_only)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerSelection::AllLinear => "all_linear",
            LayerSelection::KVFf2 => "k_v_ff2",
            LayerSelection::Ff2Only => "ff2_only",
        }
    }

    /// Selected sub-layers of a block with the given layout. Under a fused
    /// `QKV` projection, `K` and `V` resolve to `QKV`.
    pub fn resolve(self, layout: &[Sublayer]) -> Vec<Sublayer> {
        let fused = layout.contains(&Sublayer::Qkv);
        let wanted: Vec<Sublayer> = match self {
            LayerSelection::AllLinear => layout.to_vec(),
            LayerSelection::KVFf2 if fused => vec![Sublayer::Qkv, Sublayer::Ff2],
            LayerSelection::KVFf2 => vec![Sublayer::K, Sublayer::V, Sublayer::Ff2],
            LayerSelection::Ff2Only => vec![Sublayer::Ff2],
        };
        layout.iter().copied().filter(|s| wanted.contains(s)).collect()
    }
}
