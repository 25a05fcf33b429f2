//! Inference-time weight noise and multi-seed sweeps.
//!
//! Injection deploys each wrapped layer first: StochGRASP and the
//! deterministic baseline fold their means into the weight (`W + M`), and
//! shift-only GRASP folds its shift into the bias. Scale-carrying GRASP layers
//! keep their activation modulation. Every deployed weight then receives
//! `eps * rho * std(W_eff)` with `eps ~ N(0, 1)` i.i.d.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::harness::eval::evaluate;
use crate::micromodel::{load_checkpoint, Adapter, Model, Split};
use crate::modulation::GraspMode;
use crate::numkit::{normal_sample, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    /// Only layers that carry an adapter.
    #[default]
    Modulated,
    /// Every linear sub-layer of every block.
    AllLinear,
}

/// Returns a mean-deployed copy of `model` with noise injected; the source
/// is never touched.
pub fn inject_noise(model: &Model, rho: f64, seed: u64, scope: NoiseScope) -> Result<Model> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(LabError::Domain(format!("noise ratio must be >= 0, got {rho}")));
    }
    let mut out = model.clone();
    let registry = out.registry();
    let targets: Vec<(usize, String)> = registry
        .iter()
        .enumerate()
        .filter(|(_, n)| scope == NoiseScope::AllLinear || model.adapters.contains_key(*n))
        .map(|(i, n)| (i, n.clone()))
        .collect();

    for name in &registry {
        let Some(adapter) = out.adapters.get(name).cloned() else {
            continue;
        };
        let lin = out.linear_mut(name).expect("registered layer");
        match adapter {
            Adapter::Stoch(s) => {
                let m = s.mean_delta();
                for (w, d) in lin.weight.data_mut().iter_mut().zip(m.data()) {
                    *w += d;
                }
                out.adapters.remove(name);
            }
            Adapter::Grasp(g) if g.mode == GraspMode::ShiftOnly => {
                let b = g.effective_bias(&lin.weight, &lin.bias)?;
                lin.bias.data_mut().copy_from_slice(b.data());
                out.adapters.remove(name);
            }
            Adapter::Grasp(_) => {}
        }
    }

    if rho > 0.0 {
        for (i, name) in targets {
            let lin = out.linear_mut(&name).expect("registered layer");
            let sd = lin.weight.std();
            let mut rng = RngStream::with_stream(seed, i as u64);
            let eps = normal_sample(&mut rng, lin.weight.shape(), 0.0, 1.0)?;
            for (w, e) in lin.weight.data_mut().iter_mut().zip(eps.data()) {
                *w += e * rho * sd;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepSpec {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scope: NoiseScope,
}

impl NoiseSweepSpec {
    /// Sorted, de-duplicated copy; rejects negative levels, a missing `0`
    /// control, and an empty seed list.
    pub fn normalized(&self) -> Result<Self> {
        if let Some(bad) = self.levels.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(LabError::config("levels", format!("noise ratio must be >= 0, got {bad}")));
        }
        if !self.levels.contains(&0.0) {
            return Err(LabError::config("levels", "must include 0 as the control level"));
        }
        if self.seeds.is_empty() {
            return Err(LabError::config("seeds", "at least one seed is required"));
        }
        let mut levels = self.levels.clone();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        Ok(Self {
            levels,
            seeds,
            scope: self.scope,
        })
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(bytes)[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub rho: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub model: String,
    pub rho: f64,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub spec: NoiseSweepSpec,
    pub spec_hash: String,
    pub model_hashes: BTreeMap<String, String>,
    pub cells: Vec<SweepCell>,
    pub aggregates: Vec<SweepAggregate>,
}

impl NoiseSweepReport {
    pub fn aggregate(&self, model: &str, rho: f64) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.model == model && a.rho == rho)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluates every `(model, rho, seed)` cell in parallel. Cells are ordered by
/// model (as given), then rho ascending, then seed ascending.
pub fn noise_sweep(spec: &NoiseSweepSpec, models: &[(String, Model)], data: &Split) -> Result<NoiseSweepReport> {
    let spec = spec.normalized()?;
    if models.is_empty() {
        return Err(LabError::config("models", "at least one model is required"));
    }
    let mut jobs = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for &rho in &spec.levels {
            for &seed in &spec.seeds {
                jobs.push((mi, rho, seed));
            }
        }
    }
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(mi, rho, seed)| {
            let (name, model) = &models[mi];
            let noisy = inject_noise(model, rho, seed, spec.scope)?;
            Ok(SweepCell {
                model: name.clone(),
                rho,
                seed,
                accuracy: evaluate(&noisy, data, None)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut aggregates = Vec::new();
    for (name, _) in models {
        for &rho in &spec.levels {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| &c.model == name && c.rho == rho)
                .map(|c| c.accuracy)
                .collect();
            let (mean, std) = mean_std(&accs);
            aggregates.push(SweepAggregate {
                model: name.clone(),
                rho,
                mean,
                std,
                n: accs.len(),
            });
        }
    }
    Ok(NoiseSweepReport {
        spec_hash: spec.hash(),
        model_hashes: models.iter().map(|(n, m)| (n.clone(), m.checksum())).collect(),
        spec,
        cells,
        aggregates,
    })
}

/// Loads every checkpoint before evaluating anything, so a missing file fails
/// fast. Models are named by file stem.
pub fn noise_sweep_checkpoints(
    spec: &NoiseSweepSpec,
    paths: &[PathBuf],
    data: &Split,
) -> Result<NoiseSweepReport> {
    spec.normalized()?;
    let models = paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok((name, load_checkpoint(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    noise_sweep(spec, &models, data)
}
