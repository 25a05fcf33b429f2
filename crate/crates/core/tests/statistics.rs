mod common;

use std::path::PathBuf;

use grasp_lab::grouping::RowMode;
use grasp_lab::harness::{evaluate, inject_noise, noise_sweep, noise_sweep_checkpoints, NoiseScope, NoiseSweepSpec};
use grasp_lab::insight::{count_modes, integral, kde};
use grasp_lab::micromodel::{
    argmax_rows, attach_adapters, build_model, gen_dataset, AdapterSpec, LayerSelection, Model,
    ModelConfig, Split, SynthTaskSpec, Task,
};
use grasp_lab::numkit::RngStream;

fn random_split(n: usize, seed: u64) -> Split {
    let mut rng = RngStream::new(seed);
    Split {
        tokens: (0..n).map(|_| (0..16).map(|_| rng.below(32)).collect()).collect(),
        labels: (0..n).map(|_| rng.below(2)).collect(),
    }
}

fn stoch_model(seed: u64) -> Model {
    let cfg = ModelConfig { n_classes: 2, ..ModelConfig::default() };
    let mut m = build_model(&cfg, &mut RngStream::new(seed)).unwrap();
    attach_adapters(&mut m, &AdapterSpec::stoch(4, LayerSelection::KVFf2, RowMode::PerRow, seed)).unwrap();
    let mut rng = RngStream::new(seed + 1);
    for s in m.stoch_layers_mut() {
        s.mu.data_mut().iter_mut().for_each(|v| *v = 0.05 * rng.standard_normal());
    }
    m
}

#[test]
fn datasets_are_balanced_at_scale() {
    let ds = gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 5, 10_000, 0, 0)).unwrap();
    let pos = ds.train.labels.iter().sum::<usize>() as f64 / 1e4;
    assert!((pos - 0.5).abs() <= 0.02, "positive rate {pos}");
    let ds = gen_dataset(&SynthTaskSpec::new(Task::PretrainMajority, 5, 10_000, 0, 0)).unwrap();
    for c in 0..4 {
        let f = ds.train.labels.iter().filter(|&&l| l == c).count() as f64 / 1e4;
        assert!((f - 0.25).abs() <= 0.02, "class {c} rate {f}");
    }
}

#[test]
fn evaluate_oracle_and_chance() {
    let model = stoch_model(1);
    let split = random_split(2000, 4);
    let acc = evaluate(&model, &split, None).unwrap();
    assert!((acc - 0.5).abs() <= 3.0 / (2000f64).sqrt(), "random-label accuracy {acc}");
    assert_eq!(acc, evaluate(&model, &split, None).unwrap());

    let oracle = Split {
        labels: argmax_rows(&model.logits(&split.tokens).unwrap()),
        tokens: split.tokens.clone(),
    };
    assert_eq!(evaluate(&model, &oracle, None).unwrap(), 1.0);
}

#[test]
fn noisy_weights_are_unbiased() {
    let model = stoch_model(2);
    let rho = 0.5;
    let deployed = inject_noise(&model, 0.0, 0, NoiseScope::Modulated).unwrap();
    let name = "block0.FF2";
    let w_eff = deployed.linear(name).unwrap().weight.clone();
    let se = rho * w_eff.std() / (1e4f64).sqrt();
    let mut sum = vec![0.0; w_eff.len()];
    for seed in 0..10_000u64 {
        let noisy = inject_noise(&model, rho, seed, NoiseScope::Modulated).unwrap();
        for (s, w) in sum.iter_mut().zip(noisy.linear(name).unwrap().weight.data()) {
            *s += w;
        }
    }
    for (s, w) in sum.iter().zip(w_eff.data()) {
        let z = (s / 1e4 - w) / se;
        assert!(z.abs() < 5.0, "mean off by {z} standard errors");
    }
}

#[test]
fn zero_noise_matches_mean_deployment() {
    let model = stoch_model(3);
    let split = random_split(300, 5);
    let deployed = inject_noise(&model, 0.0, 9, NoiseScope::AllLinear).unwrap();
    assert!(deployed.adapters.is_empty());
    assert_eq!(deployed.logits(&split.tokens).unwrap(), model.logits(&split.tokens).unwrap());
    assert!(inject_noise(&model, -0.1, 0, NoiseScope::Modulated).is_err());
}

#[test]
fn sweep_controls() {
    let model = stoch_model(4);
    let split = random_split(300, 6);
    let models = vec![("m".to_string(), model.clone())];
    let zero = NoiseSweepSpec { levels: vec![0.0], seeds: vec![1, 2, 3], scope: NoiseScope::Modulated };
    let report = noise_sweep(&zero, &models, &split).unwrap();
    let plain = evaluate(&model, &split, None).unwrap();
    assert!(report.cells.iter().all(|c| c.accuracy == plain));
    assert_eq!(report.aggregate("m", 0.0).unwrap().mean, plain);

    let fwd = NoiseSweepSpec { levels: vec![0.0, 0.3, 1.0], seeds: vec![1, 2, 3], scope: NoiseScope::Modulated };
    let rev = NoiseSweepSpec { levels: vec![1.0, 0.3, 0.0], seeds: vec![3, 1, 2], ..fwd.clone() };
    assert_eq!(noise_sweep(&fwd, &models, &split).unwrap(), noise_sweep(&rev, &models, &split).unwrap());
}

#[test]
fn sweep_fails_before_evaluating_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    grasp_lab::micromodel::save_checkpoint(&stoch_model(5), &good).unwrap();
    let spec = NoiseSweepSpec { levels: vec![0.0], seeds: vec![1], scope: NoiseScope::Modulated };
    let paths = vec![good, PathBuf::from("/nonexistent/ckpt.json")];
    assert!(noise_sweep_checkpoints(&spec, &paths, &random_split(10, 1)).is_err());
}

#[test]
fn kde_matches_analytic_density() {
    let mut rng = RngStream::new(11);
    let s: Vec<f64> = (0..10_000).map(|_| rng.standard_normal()).collect();
    let c = kde(&s, 512).unwrap();
    let at_zero = common::direct_kde(&s, c.bandwidth, 0.0);
    let truth = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    assert!((at_zero - truth).abs() <= 0.1 * truth, "density at 0: {at_zero}");
    for i in (0..512).step_by(37) {
        let oracle = common::direct_kde(&s, c.bandwidth, c.grid[i]);
        assert!((c.density[i] - oracle).abs() <= 1e-12 * oracle.max(1e-12));
    }
    assert!((integral(&c) - 1.0).abs() <= 1e-3);
    assert_eq!(count_modes(&c), 1);
}

#[test]
fn constructed_mixture_has_two_modes() {
    let mut rng = RngStream::new(12);
    let s: Vec<f64> = (0..1000)
        .map(|_| if rng.bernoulli(0.5) { -1.0 } else { 1.0 } + 0.05 * rng.standard_normal())
        .collect();
    let c = kde(&s, 512).unwrap();
    assert_eq!(count_modes(&c), 2);
    assert!((integral(&c) - 1.0).abs() <= 1e-3);
}
