use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grouping::{GroupMap, RowMode};
use crate::micromodel::config::{layer_name, LayerSelection};
use crate::micromodel::model::{Adapter, Model};
use crate::modulation::{GraspLayer, GraspMode, StochLayer};
use crate::numkit::{derive_seed, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grasp,
    Stoch,
    DeterministicBaseline,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grasp" => Ok(Method::Grasp),
            "stoch" | "stochgrasp" => Ok(Method::Stoch),
            "deterministic_baseline" | "baseline" => Ok(Method::DeterministicBaseline),
            other => Err(LabError::config(
                "method",
                format!("unknown method `{other}` (expected grasp, stoch, deterministic_baseline)"),
            )),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Grasp => "grasp",
            Method::Stoch => "stoch",
            Method::DeterministicBaseline => "deterministic_baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub method: Method,
    pub k: usize,
    pub selection: LayerSelection,
    /// GRASP only.
    pub mode: GraspMode,
    /// StochGRASP only; the deterministic baseline is always per-row.
    pub row_mode: RowMode,
    /// Grouping seed. Layer `i` of the registry uses `derive_seed(seed, i)`.
    pub seed: u64,
}

impl AdapterSpec {
    pub fn grasp(k: usize, selection: LayerSelection, mode: GraspMode, seed: u64) -> Self {
        Self {
            method: Method::Grasp,
            k,
            selection,
            mode,
            row_mode: RowMode::Shared,
            seed,
        }
    }

    pub fn stoch(k: usize, selection: LayerSelection, row_mode: RowMode, seed: u64) -> Self {
        Self {
            method: Method::Stoch,
            k,
            selection,
            mode: GraspMode::Both,
            row_mode,
            seed,
        }
    }

    pub fn baseline(k: usize, selection: LayerSelection, seed: u64) -> Self {
        Self {
            method: Method::DeterministicBaseline,
            k,
            selection,
            mode: GraspMode::Both,
            row_mode: RowMode::PerRow,
            seed,
        }
    }
}

/// Names of the selected layers, in registry order.
pub fn selected_layers(model: &Model, selection: LayerSelection) -> Vec<String> {
    let layout = model.config.sublayers();
    let chosen = selection.resolve(&layout);
    (0..model.config.n_blocks)
        .flat_map(|b| chosen.iter().map(move |&s| layer_name(b, s)))
        .collect()
}

/// Wraps every selected sub-layer, freezes the base, and leaves only the
/// adapters and the classifier head trainable. Existing adapters are replaced.
pub fn attach_adapters(model: &mut Model, spec: &AdapterSpec) -> Result<()> {
    if spec.k == 0 {
        return Err(LabError::Parameter("K must be >= 1".into()));
    }
    let registry = model.registry();
    let layers = selected_layers(model, spec.selection);
    for name in &layers {
        let w = &model.linear(name).expect("registered layer").weight;
        let (d_in, d_out) = (w.rows(), w.cols());
        // GRASP groups input dims; StochGRASP groups output columns.
        let grouped = match spec.method {
            Method::Grasp => d_in,
            _ => d_out,
        };
        if spec.k > d_in.min(grouped) {
            return Err(LabError::Parameter(format!(
                "{name}: K = {} exceeds the layer's input dimension {d_in}",
                spec.k
            )));
        }
    }
    let mut adapters = std::collections::BTreeMap::new();
    for name in &layers {
        let idx = registry.iter().position(|n| n == name).expect("registered");
        let seed = derive_seed(spec.seed, idx as u64);
        let w = &model.linear(name).expect("registered layer").weight;
        let (d_in, d_out) = (w.rows(), w.cols());
        let adapter = match spec.method {
            Method::Grasp => Adapter::Grasp(GraspLayer::new(
                name.clone(),
                GroupMap::build(d_in, spec.k, seed)?,
                spec.mode,
            )),
            Method::Stoch => {
                let mut rng = RngStream::with_stream(seed, 1);
                Adapter::Stoch(StochLayer::new(
                    name.clone(),
                    d_in,
                    GroupMap::build(d_out, spec.k, seed)?,
                    spec.row_mode,
                    &mut rng,
                ))
            }
            Method::DeterministicBaseline => Adapter::Stoch(StochLayer::deterministic_baseline(
                name.clone(),
                d_in,
                d_out,
                spec.k,
                seed,
            )?),
        };
        adapters.insert(name.clone(), adapter);
    }
    model.adapters = adapters;
    model.freeze_base();
    Ok(())
}
