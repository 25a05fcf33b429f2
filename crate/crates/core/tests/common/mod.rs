//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use grasp_lab::grouping::RowMode;
use grasp_lab::harness::{train, TrainConfig};
use grasp_lab::micromodel::{
    attach_adapters, build_model, gen_dataset, AdapterSpec, Dataset, LayerSelection, Model,
    ModelConfig, NoiseSource, SynthTaskSpec, Task,
};
use grasp_lab::modulation::{noise_aware_penalty, GraspMode, PenaltyTerm};
use grasp_lab::numkit::{normal_sample, RngStream, Tensor};

/// The majority-task model every fine-tuning test starts from, with a fresh
/// two-class head.
pub fn pretrained() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let pre = gen_dataset(&SynthTaskSpec::new(Task::PretrainMajority, 1, 4000, 500, 0)).unwrap();
        let mut m = build_model(&ModelConfig::default(), &mut RngStream::new(0)).unwrap();
        train(&mut m, &pre, &TrainConfig { lr: 3e-3, epochs: 2, ..Default::default() }).unwrap();
        m.reset_head(2, &mut RngStream::new(9)).unwrap();
        m
    })
}

pub fn bigram_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 2000, 500, 1000)).unwrap()
    })
}

pub fn tiny_config(rng: &mut RngStream) -> ModelConfig {
    let n_heads = 2;
    ModelConfig {
        vocab: 8,
        d_model: n_heads * (2 + rng.below(3)),
        n_heads,
        d_ff: 6 + rng.below(7),
        n_blocks: 1 + rng.below(2),
        max_seq: 3 + rng.below(3),
        n_classes: 2 + rng.below(2),
        fused_qkv: rng.bernoulli(0.5),
    }
}

/// Which parameter family a tensor name belongs to.
pub fn param_class(name: &str) -> &'static str {
    if name.ends_with(".gamma") {
        "gamma"
    } else if name.ends_with(".beta") {
        "beta"
    } else if name.ends_with(".mu") {
        "mu"
    } else if name.ends_with(".sigma") {
        "sigma"
    } else if name == "head.weight" {
        "head.weight"
    } else if name == "head.bias" {
        "head.bias"
    } else {
        "other"
    }
}

/// A random small model with one adapter family attached and its adapter
/// values moved away from their initial identity.
pub struct GradCase {
    pub model: Model,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub noise: BTreeMap<String, Tensor>,
    pub lambda: f64,
    pub target: f64,
}

pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = RngStream::new(seed);
    let cfg = tiny_config(&mut rng);
    let mut model = build_model(&cfg, &mut rng).unwrap();
    let selection = [LayerSelection::AllLinear, LayerSelection::KVFf2, LayerSelection::Ff2Only][rng.below(3)];
    let min_dim = cfg.d_model.min(cfg.d_ff);
    let k = 1 + rng.below(min_dim);
    let spec = match seed % 3 {
        0 => AdapterSpec::grasp(k, selection, GraspMode::Both, seed),
        1 => AdapterSpec::stoch(k, selection, RowMode::PerRow, seed),
        _ => AdapterSpec::stoch(k, selection, RowMode::Shared, seed),
    };
    attach_adapters(&mut model, &spec).unwrap();
    model.visit_params_mut(|name, t| match param_class(name) {
        "gamma" => t.data_mut().iter_mut().for_each(|g| *g = 1.0 + 0.3 * rng.standard_normal()),
        "beta" | "mu" => t.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.standard_normal()),
        "sigma" => t.data_mut().iter_mut().for_each(|s| *s = rng.uniform_range(0.01, 0.2)),
        _ => {}
    });
    let mut noise = BTreeMap::new();
    for (name, s) in model.stoch_layers() {
        noise.insert(name.clone(), normal_sample(&mut rng, &[s.d_in, s.d_out()], 0.0, 1.0).unwrap());
    }
    let tokens = (0..3)
        .map(|_| (0..cfg.max_seq).map(|_| rng.below(cfg.vocab)).collect())
        .collect();
    let labels = (0..3).map(|_| rng.below(cfg.n_classes)).collect();
    GradCase { model, tokens, labels, noise, lambda: 0.3, target: 0.05 }
}

impl GradCase {
    /// Cross-entropy under the frozen noise plus the sigma penalty, with the
    /// model's gradients accumulated when `grads` is set.
    pub fn loss(&self, model: &mut Model, grads: bool) -> f64 {
        let mut pass = model.forward(&self.tokens, NoiseSource::Fixed(&self.noise)).unwrap();
        let mut total = pass.tape.cross_entropy(pass.logits, &self.labels).unwrap();
        let sigmas: Vec<_> = model
            .stoch_layers()
            .filter_map(|(n, s)| pass.binding(&format!("{n}.sigma")).map(|v| (s, v)))
            .collect();
        if !sigmas.is_empty() {
            let terms: Vec<PenaltyTerm<'_>> = sigmas
                .iter()
                .map(|&(layer, sigma)| PenaltyTerm { layer, sigma, target: self.target })
                .collect();
            let p = noise_aware_penalty(&mut pass.tape, &terms, self.lambda).unwrap();
            total = pass.tape.add(total, p).unwrap();
        }
        let value = pass.tape.scalar_value(total);
        if grads {
            model.zero_grad();
            model.accumulate_grads(&pass, total).unwrap();
        }
        value
    }

    /// Worst central-difference relative error per parameter class, checking
    /// up to `per_tensor` entries of every trainable tensor.
    pub fn check(&self, per_tensor: usize, h: f64) -> BTreeMap<&'static str, f64> {
        let mut analytic = self.model.clone();
        self.loss(&mut analytic, true);
        let mut grads = Vec::new();
        analytic.visit_params(|name, t| {
            if t.requires_grad() {
                grads.push((name.to_string(), t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])));
            }
        });
        let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
        for (name, g) in &grads {
            let stride = (g.len() / per_tensor).max(1);
            for i in (0..g.len()).step_by(stride).take(per_tensor) {
                let eval = |delta: f64| {
                    let mut m = self.model.clone();
                    m.visit_params_mut(|n, t| {
                        if n == name {
                            t.data_mut()[i] += delta;
                        }
                    });
                    self.loss(&mut m, false)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = relative_error(fd, g[i]);
                let e = worst.entry(param_class(name)).or_insert(0.0);
                *e = e.max(rel);
            }
        }
        worst
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps vanishing gradients from
/// turning round-off into large ratios.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Direct Gaussian kernel sum at one point, an oracle for `kde`.
pub fn direct_kde(samples: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    norm * samples.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>()
}
