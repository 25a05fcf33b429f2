//! Single-file JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "grasp-lab-checkpoint",
//!   "version": 1,
//!   "config": { ModelConfig },
//!   "layers": [ registry names ],
//!   "tensors": [ { "name", "shape", "trainable", "data" } ],   // base tensors
//!   "adapters": [ { "layer", "kind": "grasp" | "stoch", ... } ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so every `f64` reloads
//! bit-exactly. Adapters carry their group maps (`dim`, `groups`, `seed`,
//! `perm`) and their `gamma`/`beta` or `mu`/`sigma` arrays with trainable flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::micromodel::config::ModelConfig;
use crate::micromodel::model::{build_model, Adapter, Model};
use crate::numkit::{RngStream, Tensor};

pub const FORMAT: &str = "grasp-lab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    layers: Vec<String>,
    tensors: Vec<NamedTensor>,
    adapters: Vec<Adapter>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    data: Vec<f64>,
}

pub fn to_json(model: &Model) -> Result<String> {
    let mut tensors = Vec::new();
    model.visit_base(|name, t| {
        tensors.push(NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
            data: t.data().to_vec(),
        })
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        layers: model.registry(),
        tensors,
        adapters: model.adapters.values().cloned().collect(),
    };
    Ok(serde_json::to_string_pretty(&manifest)?)
}

fn check_shape(field: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want || t.len() != want.iter().product::<usize>() || t.data().len() != t.len()
    {
        return Err(LabError::checkpoint(
            field,
            format!("expected shape {want:?}, found {:?} with {} values", t.shape(), t.data().len()),
        ));
    }
    Ok(())
}

fn adapter_name(a: &Adapter) -> &str {
    match a {
        Adapter::Grasp(g) => &g.layer,
        Adapter::Stoch(s) => &s.layer,
    }
}

fn validate_adapter(model: &Model, a: &Adapter) -> Result<()> {
    let name = adapter_name(a);
    let field = format!("adapters.{name}");
    let Some(lin) = model.linear(name) else {
        return Err(LabError::checkpoint(field, "no such layer"));
    };
    let (d_in, d_out) = (lin.weight.rows(), lin.weight.cols());
    match a {
        Adapter::Grasp(g) => {
            if g.map.dim() != d_in {
                return Err(LabError::checkpoint(
                    format!("{field}.map.dim"),
                    format!("expected {d_in}, found {}", g.map.dim()),
                ));
            }
            let k = g.groups();
            check_shape(&format!("{field}.gamma"), &g.gamma, &[k])?;
            check_shape(&format!("{field}.beta"), &g.beta, &[k])?;
        }
        Adapter::Stoch(s) => {
            if s.d_in != d_in || s.d_out() != d_out {
                return Err(LabError::checkpoint(
                    format!("{field}.d_in"),
                    format!("expected {d_in}x{d_out}, found {}x{}", s.d_in, s.d_out()),
                ));
            }
            let shape = [s.stored_rows(), s.groups()];
            check_shape(&format!("{field}.mu"), &s.mu, &shape)?;
            check_shape(&format!("{field}.sigma"), &s.sigma, &shape)?;
        }
    }
    Ok(())
}

pub fn from_json(text: &str) -> Result<Model> {
    let manifest: Manifest = serde_json::from_str(text)
        .map_err(|e| LabError::checkpoint("manifest", e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(LabError::checkpoint(
            "format",
            format!("expected `{FORMAT}`, found `{}`", manifest.format),
        ));
    }
    if manifest.version != VERSION {
        return Err(LabError::checkpoint(
            "version",
            format!("expected {VERSION}, found {}", manifest.version),
        ));
    }
    manifest
        .config
        .validate()
        .map_err(|e| LabError::checkpoint("config", e.to_string()))?;
    // The template fixes names and shapes; its random values are all overwritten.
    let mut model = build_model(&manifest.config, &mut RngStream::new(0))?;
    if manifest.layers != model.registry() {
        return Err(LabError::checkpoint("layers", "registry does not match config"));
    }
    let mut stored: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for t in manifest.tensors {
        if stored.contains_key(&t.name) {
            return Err(LabError::checkpoint(format!("tensors.{}", t.name), "duplicate"));
        }
        stored.insert(t.name.clone(), t);
    }
    let mut err = None;
    model.visit_base_mut(|name, slot| {
        if err.is_some() {
            return;
        }
        let field = format!("tensors.{name}");
        let Some(t) = stored.remove(name) else {
            err = Some(LabError::checkpoint(field, "missing"));
            return;
        };
        if t.shape != slot.shape() {
            err = Some(LabError::checkpoint(
                field,
                format!("expected shape {:?}, found {:?}", slot.shape(), t.shape),
            ));
            return;
        }
        match Tensor::new(t.shape, t.data) {
            Ok(v) => *slot = v.with_grad(t.trainable),
            Err(_) => err = Some(LabError::checkpoint(field, "data length does not match shape")),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(LabError::checkpoint(format!("tensors.{extra}"), "unknown tensor"));
    }
    for a in manifest.adapters {
        validate_adapter(&model, &a)?;
        let name = adapter_name(&a).to_string();
        if model.adapters.insert(name.clone(), a).is_some() {
            return Err(LabError::checkpoint(format!("adapters.{name}"), "duplicate"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let text = to_json(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micromodel::{attach_adapters, AdapterSpec, LayerSelection};
    use crate::grouping::RowMode;

    fn adapted() -> Model {
        let mut m = build_model(&ModelConfig::default(), &mut RngStream::new(4)).unwrap();
        attach_adapters(
            &mut m,
            &AdapterSpec::stoch(4, LayerSelection::KVFf2, RowMode::PerRow, 2),
        )
        .unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = adapted();
        let text = to_json(&m).unwrap();
        let back = from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_json(&back).unwrap(), text);
        assert_eq!(back.trainable_param_count(), m.trainable_param_count());
    }

    #[test]
    fn version_mismatch_names_field() {
        let text = to_json(&adapted()).unwrap().replace("\"version\": 1", "\"version\": 7");
        let err = from_json(&text).unwrap_err();
        assert!(matches!(err, LabError::Checkpoint { ref field, .. } if field == "version"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let text = to_json(&adapted()).unwrap();
        let err = from_json(&text[..text.len() / 2]).unwrap_err();
        assert!(matches!(err, LabError::Checkpoint { ref field, .. } if field == "manifest"));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let m = adapted();
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&m).unwrap()).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([31, 32]);
        let err = from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, LabError::Checkpoint { ref field, .. } if field == "tensors.embed.tok"));
    }
}
