use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::eval::evaluate_split;
use crate::micromodel::{argmax_rows, Adapter, Dataset, Model, NoiseSource};
use crate::modulation::{noise_aware_penalty, NoiseAwareLossConfig, PenaltyTerm};
use crate::numkit::{RngStream, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub loss_cfg: Option<NoiseAwareLossConfig>,
    /// Step size for sigma tensors; `lr` when unset.
    pub sigma_lr: Option<f64>,
    /// Cross-entropy on the training data. Off leaves only the penalty.
    pub task_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch: 32,
            epochs: 10,
            optimizer: Optimizer::default(),
            loss_cfg: None,
            sigma_lr: None,
            task_loss: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LabError::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if let Some(s) = self.sigma_lr {
            if !(s > 0.0) || !s.is_finite() {
                return Err(LabError::config("sigma_lr", format!("must be > 0, got {s}")));
            }
        }
        if self.epochs == 0 {
            return Err(LabError::config("epochs", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(LabError::config("batch", "must be >= 1"));
        }
        if let Some(l) = &self.loss_cfg {
            l.validate()?;
        }
        if !self.task_loss && self.loss_cfg.is_none() {
            return Err(LabError::config("task_loss", "no objective: task loss off and no loss_cfg"));
        }
        Ok(())
    }
}

/// One row per epoch; epoch 0 is measured before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accumulated over the epoch's training forward passes (epoch 0: one
    /// pass in mean deployment).
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub penalty: f64,
    /// `max |sigma - target|` over trainable sigmas; 0 when there are none.
    pub sigma_dev: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
}

impl TrainReport {
    pub fn initial(&self) -> &EpochMetrics {
        &self.metrics[0]
    }

    pub fn last(&self) -> &EpochMetrics {
        self.metrics.last().expect("epoch 0 row")
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Sigma targets per stochastic layer, keyed by registry name.
fn sigma_targets(model: &Model, cfg: &NoiseAwareLossConfig) -> BTreeMap<String, f64> {
    model
        .stoch_layers()
        .filter(|(_, s)| !s.deterministic)
        .map(|(name, _)| {
            let w = &model.linear(name).expect("adapter on a registered layer").weight;
            (name.clone(), cfg.target_for(w.std()))
        })
        .collect()
}

fn sigma_dev(model: &Model, targets: &BTreeMap<String, f64>) -> f64 {
    model
        .stoch_layers()
        .filter_map(|(n, s)| targets.get(n).map(|t| (s, *t)))
        .flat_map(|(s, t)| s.sigma.data().iter().map(move |x| (x - t).abs()))
        .fold(0.0, f64::max)
}

fn penalty_var(
    model: &Model,
    tape: &mut Tape,
    sigmas: &[(String, Var)],
    targets: &BTreeMap<String, f64>,
    lambda: f64,
) -> Result<Option<Var>> {
    let terms: Vec<PenaltyTerm<'_>> = model
        .stoch_layers()
        .filter_map(|(name, layer)| {
            let target = *targets.get(name)?;
            let sigma = sigmas.iter().find(|(n, _)| n == name)?.1;
            Some(PenaltyTerm { layer, sigma, target })
        })
        .collect();
    if terms.is_empty() {
        return Ok(None);
    }
    noise_aware_penalty(tape, &terms, lambda).map(Some)
}

fn has_noise(model: &Model) -> bool {
    model.stoch_layers().any(|(_, s)| !s.deterministic)
}

/// Penalty value at the current parameters.
fn penalty_value(model: &Model, targets: &BTreeMap<String, f64>, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let sigmas: Vec<(String, Var)> = model
        .stoch_layers()
        .map(|(n, s)| (n.clone(), tape.leaf(&s.sigma)))
        .collect();
    Ok(penalty_var(model, &mut tape, &sigmas, targets, lambda)?
        .map_or(0.0, |p| tape.scalar_value(p)))
}

fn clamp(model: &mut Model) {
    for a in model.adapters.values_mut() {
        match a {
            Adapter::Grasp(g) => g.clamp_gamma(),
            Adapter::Stoch(s) => s.clamp_sigma(),
        }
    }
}

fn apply_update(model: &mut Model, cfg: &TrainConfig, adam: &mut Option<Adam>) {
    if let Some(a) = adam.as_mut() {
        a.t += 1;
    }
    model.visit_params_mut(|name, t| {
        if !t.requires_grad() {
            return;
        }
        let lr = match cfg.sigma_lr {
            Some(s) if name.ends_with(".sigma") => s,
            _ => cfg.lr,
        };
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            return;
        };
        match adam.as_mut() {
            None => {
                for (x, gi) in t.data_mut().iter_mut().zip(&g) {
                    *x -= lr * gi;
                }
            }
            Some(a) => {
                let (m, v) = a
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let bc1 = 1.0 - a.beta1.powi(a.t);
                let bc2 = 1.0 - a.beta2.powi(a.t);
                for i in 0..g.len() {
                    m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * g[i];
                    v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    t.data_mut()[i] -= lr * mh / (vh.sqrt() + a.eps);
                }
            }
        }
        t.zero_grad();
    });
    clamp(model);
}

/// Runs one optimizer step on a batch and returns `(task_loss, penalty, correct)`.
fn step(
    model: &mut Model,
    tokens: &[Vec<usize>],
    labels: &[usize],
    cfg: &TrainConfig,
    targets: &BTreeMap<String, f64>,
    noise_rng: &mut RngStream,
    adam: &mut Option<Adam>,
) -> Result<(f64, f64, usize)> {
    let lambda = cfg.loss_cfg.map_or(0.0, |l| l.lambda);
    let mut correct = 0;
    let (task, pen) = if cfg.task_loss {
        let noise = if has_noise(model) {
            NoiseSource::Sample(noise_rng)
        } else {
            NoiseSource::Mean
        };
        let mut pass = model.forward(tokens, noise)?;
        let ce = pass.tape.cross_entropy(pass.logits, labels)?;
        correct = argmax_rows(&pass.tape.tensor(pass.logits))
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let sigmas: Vec<(String, Var)> = pass
            .bindings
            .iter()
            .filter_map(|(n, v)| n.strip_suffix(".sigma").map(|l| (l.to_string(), *v)))
            .collect();
        let pen = if cfg.loss_cfg.is_some() {
            penalty_var(model, &mut pass.tape, &sigmas, targets, lambda)?
        } else {
            None
        };
        let loss = match pen {
            Some(p) => pass.tape.add(ce, p)?,
            None => ce,
        };
        let (task, pen) = (
            pass.tape.scalar_value(ce),
            pen.map_or(0.0, |p| pass.tape.scalar_value(p)),
        );
        if task.is_finite() && pen.is_finite() {
            model.accumulate_grads(&pass, loss)?;
        }
        (task, pen)
    } else {
        let mut tape = Tape::new();
        let sigmas: Vec<(String, Var)> = model
            .stoch_layers()
            .map(|(n, s)| (n.clone(), tape.leaf(&s.sigma)))
            .collect();
        let Some(p) = penalty_var(model, &mut tape, &sigmas, targets, lambda)? else {
            return Err(LabError::Contract(
                "penalty-only training needs a stochastic layer".into(),
            ));
        };
        let grads = tape.backward(p)?;
        let pen = tape.scalar_value(p);
        for s in model.stoch_layers_mut() {
            if let Some((_, v)) = sigmas.iter().find(|(n, _)| *n == s.layer) {
                grads.accumulate_into(*v, &mut s.sigma)?;
            }
        }
        (0.0, pen)
    };
    if task.is_finite() && pen.is_finite() {
        apply_update(model, cfg, adam);
    }
    Ok((task, pen, correct))
}

/// Fine-tunes every trainable tensor of `model` in place.
///
/// Batches are reshuffled each epoch from stream 0 of `cfg.seed`; stochastic
/// layers draw fresh noise on every forward call from stream 1. On a
/// non-finite loss the model is rolled back to the end of the last completed
/// epoch and [`LabError::Diverged`] carries that state.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(LabError::Contract("training split is empty".into()));
    }
    if model.trainable_param_count() == 0 {
        return Err(LabError::Contract("model has no trainable tensors".into()));
    }
    let targets = cfg
        .loss_cfg
        .map(|l| sigma_targets(model, &l))
        .unwrap_or_default();
    let lambda = cfg.loss_cfg.map_or(0.0, |l| l.lambda);
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { beta1, beta2, eps } => Some(Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            state: BTreeMap::new(),
        }),
        Optimizer::Sgd => None,
    };
    let mut order_rng = RngStream::with_stream(cfg.seed, 0);
    let mut noise_rng = RngStream::with_stream(cfg.seed, 1);
    model.zero_grad();

    let metrics_row = |model: &Model, epoch: usize, train_loss: f64, train_acc: f64| -> Result<EpochMetrics> {
        let (val_loss, val_acc) = if data.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate_split(model, &data.val)?
        };
        Ok(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            penalty: penalty_value(model, &targets, lambda)?,
            sigma_dev: sigma_dev(model, &targets),
        })
    };

    let mut report = TrainReport::default();
    let (l0, a0) = if cfg.task_loss {
        evaluate_split(model, &data.train)?
    } else {
        (0.0, f64::NAN)
    };
    report.metrics.push(metrics_row(model, 0, l0, a0)?);

    let mut last_good = model.clone();
    let n = data.train.len();
    let mut idx: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for (b, chunk) in idx.chunks(cfg.batch).enumerate() {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|&i| data.train.tokens[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let (task, pen, c) = step(model, &tokens, &labels, cfg, &targets, &mut noise_rng, &mut adam)?;
            let loss = task + pen;
            if !loss.is_finite() {
                *model = last_good.clone();
                return Err(LabError::Diverged {
                    epoch,
                    step: b,
                    loss,
                    last_good: Box::new(last_good),
                });
            }
            loss_sum += loss;
            correct += c;
            batches += 1;
            report.steps += 1;
        }
        let train_acc = if cfg.task_loss {
            correct as f64 / n as f64
        } else {
            f64::NAN
        };
        report
            .metrics
            .push(metrics_row(model, epoch, loss_sum / batches as f64, train_acc)?);
        last_good = model.clone();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micromodel::{build_model, ModelConfig, SynthTaskSpec, Task};

    fn tiny() -> (Model, Dataset) {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_blocks: 1,
            n_classes: 2,
            ..ModelConfig::default()
        };
        let m = build_model(&cfg, &mut RngStream::new(1)).unwrap();
        let ds = crate::micromodel::gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 64, 32, 0))
            .unwrap();
        (m, ds)
    }

    #[test]
    fn config_errors_name_field() {
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(LabError::Config { field, .. }) if field == "lr"));
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(LabError::Config { field, .. }) if field == "epochs"));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            batch: 16,
            ..TrainConfig::default()
        };
        let (mut a, ds) = tiny();
        let mut b = a.clone();
        let ra = train(&mut a, &ds, &cfg).unwrap();
        let rb = train(&mut b, &ds, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra.metrics.len(), 3);
        assert_eq!(ra.steps, 8);
    }

    #[test]
    fn divergence_rolls_back() {
        let (mut m, ds) = tiny();
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 3,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let before = m.clone();
        match train(&mut m, &ds, &cfg) {
            Err(LabError::Diverged { last_good, .. }) => assert_eq!(m, *last_good),
            Ok(_) => panic!("expected divergence"),
            Err(e) => panic!("{e}"),
        }
        assert_eq!(before.config, m.config);
    }
}
