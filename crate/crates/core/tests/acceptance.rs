//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! `cargo test --release --test acceptance`

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{direct_kde, grad_case, pretrained};
use grasp_lab::grouping::{GroupMap, RowMode};
use grasp_lab::harness::{noise_sweep, train, NoiseScope, NoiseSweepSpec, Optimizer, TrainConfig};
use grasp_lab::insight::{count_adapter_params, count_modes, integral, kde, ArchSpec, CountMethod};
use grasp_lab::micromodel::{
    attach_adapters, build_model, gen_dataset, AdapterSpec, Dataset, LayerSelection, Model,
    ModelConfig, SynthTaskSpec, Task,
};
use grasp_lab::modulation::{grasp_forward, linear, GraspLayer, GraspMode, NoiseAwareLossConfig};
use grasp_lab::numkit::{normal_sample, RngStream, Tape};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Frozen-tensor checksums recorded around every fine-tuning run below.
#[derive(Default)]
struct FrozenLog(Vec<(String, bool)>);

impl FrozenLog {
    fn finetune(&mut self, label: &str, model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> grasp_lab::harness::TrainReport {
        let before = model.frozen_checksum();
        let report = train(model, data, cfg).unwrap();
        self.0.push((label.to_string(), model.frozen_checksum() == before));
        report
    }
}

fn finetune_data(n_train: usize) -> Dataset {
    gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, n_train, 500, 1000)).unwrap()
}

fn c1_param_counts() -> Outcome {
    let base = ArchSpec::roberta_base();
    let large = ArchSpec::roberta_large();
    let gpt = ArchSpec::gpt2_medium();
    // (arch, K, selection, expected count, published percent, published decimals)
    let rows = [
        (&base, 128, LayerSelection::AllLinear, 18_432, 0.015, 3),
        (&base, 32, LayerSelection::AllLinear, 4_608, 0.004, 3),
        (&large, 64, LayerSelection::AllLinear, 18_432, 0.005, 3),
        (&base, 128, LayerSelection::KVFf2, 9_216, 0.008, 3),
        (&base, 128, LayerSelection::Ff2Only, 3_072, 0.003, 3),
        (&gpt, 384, LayerSelection::AllLinear, 73_728, 0.02, 2),
        (&gpt, 64, LayerSelection::AllLinear, 12_288, 0.003, 3),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (arch, k, sel, count, published, decimals) in rows {
        let c = count_adapter_params(arch, CountMethod::Grasp, k, sel, GraspMode::Both).unwrap();
        let within = (c.percent - published).abs() <= 0.001 + 1e-12;
        let rounded = format!("{:.*}", decimals, c.percent) == format!("{:.*}", decimals, published);
        pass &= c.count == count && within;
        notes.push(format!(
            "{} K={k} {}: {} = {:.5}% (published {published}%, rounding {})",
            arch.name,
            sel.as_str(),
            c.count,
            c.percent,
            if rounded { "agrees" } else { "differs" }
        ));
    }
    outcome(pass, notes.join("; "))
}

fn c2_identity_at_init() -> Outcome {
    let base = pretrained();
    let data = finetune_data(1);
    let tokens = &data.test.tokens[..64];
    let before = base.logits(tokens).unwrap();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let selections = [LayerSelection::AllLinear, LayerSelection::KVFf2, LayerSelection::Ff2Only];
    for k in [1, 4, 8, 17, 32, 128] {
        // K = 128 spans the feed-forward width; the other layers are 32 wide.
        for sel in selections.into_iter().filter(|&s| k <= 32 || s == LayerSelection::Ff2Only) {
            for mode in [GraspMode::Both, GraspMode::ScaleOnly, GraspMode::ShiftOnly] {
                for seed in [0, 7, 1234] {
                    let mut m = base.clone();
                    attach_adapters(&mut m, &AdapterSpec::grasp(k, sel, mode, seed)).unwrap();
                    let after = m.logits(tokens).unwrap();
                    let dev = before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst = worst.max(dev);
                    cases += 1;
                }
            }
        }
    }
    outcome(worst == 0.0, format!("{cases} attachments, max |delta logit| = {worst:e}"))
}

fn c3_effective_bias() -> Outcome {
    let mut rng = RngStream::new(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let d = 4 + rng.below(61);
        let k = 1 + rng.below(d);
        let d_out = 1 + rng.below(32);
        let w = normal_sample(&mut rng, &[d, d_out], 0.0, 1.0).unwrap();
        let b = normal_sample(&mut rng, &[d_out], 0.0, 1.0).unwrap();
        let x = normal_sample(&mut rng, &[8, d], 0.0, 1.0).unwrap();
        let mut layer = GraspLayer::new("c3", GroupMap::build(d, k, case).unwrap(), GraspMode::ShiftOnly);
        layer.beta.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-2.0, 2.0));
        let b_eff = layer.effective_bias(&w, &b).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv, be) = (tape.constant(x), tape.constant(w), tape.constant(b), tape.constant(b_eff));
        let (y, _) = grasp_forward(&mut tape, &layer, xv, wv, bv).unwrap();
        let z = linear(&mut tape, xv, wv, be).unwrap();
        let gap = tape.value(y).iter().zip(tape.value(z)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    outcome(worst < 1e-9, format!("100 configurations, max gap = {worst:e}"))
}

fn c4_gradients() -> Outcome {
    let mut worst: std::collections::BTreeMap<&'static str, f64> = Default::default();
    for seed in 0..21 {
        for (class, e) in grad_case(seed).check(6, 1e-5) {
            let w = worst.entry(class).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let required = ["gamma", "beta", "mu", "sigma", "head.weight"];
    let covered = required.iter().all(|c| worst.contains_key(c));
    let pass = covered && worst.values().all(|&e| e < 1e-4);
    let detail: Vec<String> = worst.iter().map(|(c, e)| format!("{c} {e:.1e}")).collect();
    outcome(pass, format!("21 configurations, worst relative error: {}", detail.join(", ")))
}

fn c5_sigma_convergence() -> Outcome {
    let (lambda, target) = (0.05, 0.05);
    let cfg = ModelConfig { n_classes: 2, ..ModelConfig::default() };
    let mut model = build_model(&cfg, &mut RngStream::new(0)).unwrap();
    attach_adapters(&mut model, &AdapterSpec::stoch(4, LayerSelection::AllLinear, RowMode::PerRow, 1)).unwrap();
    let w_max = model.stoch_layers().flat_map(|(_, s)| s.coverage_weights()).fold(0.0, f64::max);
    let data = gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 8, 8, 0)).unwrap();
    let step = TrainConfig {
        lr: 1.0 / (4.0 * lambda * w_max),
        batch: 8,
        epochs: 1,
        optimizer: Optimizer::Sgd,
        loss_cfg: Some(NoiseAwareLossConfig::new(lambda, target)),
        task_loss: false,
        ..Default::default()
    };
    let sigmas = |m: &Model| -> Vec<f64> { m.stoch_layers().flat_map(|(_, s)| s.sigma.data().to_vec()).collect() };
    let mut dist: Vec<f64> = sigmas(&model).iter().map(|s| (s - target).abs()).collect();
    let mut monotone = true;
    let mut reached = None;
    for n in 1..=2000 {
        train(&mut model, &data, &step).unwrap();
        let next: Vec<f64> = sigmas(&model).iter().map(|s| (s - target).abs()).collect();
        monotone &= next.iter().zip(&dist).all(|(a, b)| a <= b);
        dist = next;
        if reached.is_none() && dist.iter().all(|&d| d <= 1e-3) {
            reached = Some(n);
        }
    }
    let max = dist.iter().cloned().fold(0.0, f64::max);
    outcome(
        monotone && reached.is_some(),
        format!(
            "{} entries, within 1e-3 after {} steps, final max distance {max:e}, monotone {monotone}",
            dist.len(),
            reached.map_or("more than 2000".to_string(), |n| n.to_string())
        ),
    )
}

fn c7_robustness(log: &mut FrozenLog) -> Outcome {
    let data = finetune_data(C7_TRAIN);
    let mut models = Vec::new();
    for (name, spec, loss) in [
        ("baseline", AdapterSpec::baseline(8, LayerSelection::AllLinear, 3), None),
        (
            "stoch",
            AdapterSpec::stoch(8, LayerSelection::AllLinear, RowMode::PerRow, 3),
            Some(NoiseAwareLossConfig::relative(C7_LAMBDA, 0.05)),
        ),
    ] {
        let mut m = pretrained().clone();
        attach_adapters(&mut m, &spec).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: C7_EPOCHS,
            loss_cfg: loss,
            sigma_lr: Some(C7_SIGMA_LR),
            seed: 5,
            ..Default::default()
        };
        log.finetune(&format!("c7 {name}"), &mut m, &data, &cfg);
        models.push((name.to_string(), m));
    }
    let levels = vec![0.0, 0.01, 0.02, 0.05, 0.1];
    let spec = NoiseSweepSpec { levels: levels.clone(), seeds: vec![1, 2, 3, 4, 5], scope: NoiseScope::Modulated };
    let report = noise_sweep(&spec, &models, &data.test).unwrap();
    let row = |rho: f64| (report.aggregate("baseline", rho).unwrap(), report.aggregate("stoch", rho).unwrap());
    let mut detail = Vec::new();
    for &rho in &levels {
        let (b, s) = row(rho);
        detail.push(format!("rho {rho}: baseline {:.4}±{:.4} stoch {:.4}±{:.4}", b.mean, b.std, s.mean, s.std));
    }
    let (b0, s0) = row(0.0);
    let mut pass = (b0.mean - s0.mean).abs() <= 0.02;
    for rho in [0.05, 0.1] {
        let (b, s) = row(rho);
        let pooled_se = (b.std.powi(2) / b.n as f64 + s.std.powi(2) / s.n as f64).sqrt();
        pass &= s.mean > b.mean && s.mean - b.mean > pooled_se;
    }
    outcome(pass, detail.join("; "))
}

fn c8_mode_counter() -> Outcome {
    let mut rng = RngStream::new(8);
    let mixture: Vec<f64> = (0..2000).map(|i| if i % 2 == 0 { -3.0 } else { 3.0 } + 0.5 * rng.standard_normal()).collect();
    let single: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
    let (cm, cs) = (kde(&mixture, 512).unwrap(), kde(&single, 512).unwrap());
    let cd = kde(&[0.25; 10], 512).unwrap();
    let oracle_gap = cs
        .grid
        .iter()
        .zip(&cs.density)
        .map(|(&x, &d)| (d - direct_kde(&single, cs.bandwidth, x)).abs())
        .fold(0.0, f64::max);
    let (im, is) = (integral(&cm), integral(&cs));
    let modes = (count_modes(&cm), count_modes(&cs), count_modes(&cd));
    let pass = modes == (2, 1, 1) && (im - 1.0).abs() <= 1e-3 && (is - 1.0).abs() <= 1e-3 && oracle_gap < 1e-12;
    outcome(
        pass,
        format!("modes mixture/single/degenerate = {modes:?}, integrals {im:.6} {is:.6}, max |kde - direct| {oracle_gap:e}"),
    )
}

fn c9_grouping_seeds(log: &mut FrozenLog) -> Outcome {
    let data = finetune_data(C9_TRAIN);
    let mut accs = Vec::new();
    for seed in [11, 22, 33] {
        let mut m = pretrained().clone();
        attach_adapters(&mut m, &AdapterSpec::grasp(8, C9_LAYERS, GraspMode::Both, seed)).unwrap();
        let cfg = TrainConfig { lr: C9_LR, epochs: C9_EPOCHS, seed: 5, ..Default::default() };
        let r = log.finetune(&format!("c9 grouping seed {seed}"), &mut m, &data, &cfg);
        accs.push(r.last().val_acc);
    }
    let (mean, std) = grasp_lab::harness::mean_std(&accs);
    outcome(std <= 0.02, format!("val accuracies {accs:?}, mean {mean:.4}, std {:.2} pp", 100.0 * std))
}

fn c10_scale_shift(log: &mut FrozenLog) -> Outcome {
    let data = finetune_data(C9_TRAIN);
    let mut csv = String::from("mode,params,frozen_val_acc,final_val_acc\n");
    let mut pass = true;
    for mode in [GraspMode::ScaleOnly, GraspMode::ShiftOnly] {
        let mut m = pretrained().clone();
        attach_adapters(&mut m, &AdapterSpec::grasp(8, C9_LAYERS, mode, 3)).unwrap();
        let cfg = TrainConfig { lr: C9_LR, epochs: C9_EPOCHS, seed: 5, ..Default::default() };
        let r = log.finetune(&format!("c10 {mode:?}"), &mut m, &data, &cfg);
        let (frozen, last) = (r.initial().val_acc, r.last().val_acc);
        pass &= last > frozen;
        csv.push_str(&format!("{mode:?},{},{frozen},{last}\n", m.adapter_param_count()));
    }
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("scale_shift_ablation.csv");
    std::fs::write(&path, &csv).unwrap();
    outcome(pass, format!("{} -> {}", csv.trim_end().replace('\n', " | "), path.display()))
}

fn c11_cli_determinism() -> Outcome {
    const CONFIG: &str = r#"
seed = 4
[pretrain.data]
n_train = 300
n_val = 60
n_test = 60
[pretrain.train]
epochs = 1
[finetune.data]
n_train = 200
n_val = 60
n_test = 100
[finetune.train]
epochs = 2
[sweep]
levels = [0.0, 0.05, 0.1]
seeds = [1, 2, 3]
"#;
    let files = [
        "pretrain_metrics.csv",
        "pretrained.json",
        "finetune_metrics.csv",
        "finetuned.json",
        "eval.json",
        "noise_sweep.csv",
        "noise_sweep.json",
        "dist_report.json",
    ];
    let run_all = |dir: &Path| -> Result<Vec<Vec<u8>>, String> {
        let cfg = dir.join("run.toml");
        std::fs::write(&cfg, CONFIG).unwrap();
        let out = dir.join("out");
        let ck = |f: &str| out.join(f).to_string_lossy().into_owned();
        let steps: [&[&str]; 5] = [
            &["pretrain"],
            &["finetune", "--checkpoint", &ck("pretrained.json"), "--method", "stoch", "--k", "4"],
            &["eval", "--checkpoint", &ck("finetuned.json")],
            &["noise-sweep", "--checkpoint", &ck("finetuned.json")],
            &["analyze-dist", "--checkpoint", &ck("finetuned.json")],
        ];
        for step in steps {
            let status = Command::new(env!("CARGO_BIN_EXE_grasp-lab"))
                .args(step)
                .args(["--config", &cfg.to_string_lossy(), "--out", &out.to_string_lossy()])
                .output()
                .unwrap();
            if !status.status.success() {
                return Err(format!("{step:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        Ok(files.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run_all(a.path()), run_all(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&str> = files.iter().zip(x.iter().zip(&y)).filter(|(_, (p, q))| p != q).map(|(f, _)| *f).collect();
            outcome(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", files.len()))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

const C7_TRAIN: usize = 5000;
const C7_EPOCHS: usize = 25;
const C7_LAMBDA: f64 = 5.0;
const C7_SIGMA_LR: f64 = 1e-4;
const C9_TRAIN: usize = 5000;
const C9_EPOCHS: usize = 15;
const C9_LR: f64 = 0.01;
const C9_LAYERS: LayerSelection = LayerSelection::Ff2Only;

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let took = t.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            o.pass = false;
            o.detail.push_str(&format!(" [over the {}s budget]", limit.as_secs()));
        }
    }
    o.detail.push_str(&format!(" ({:.1}s)", took.as_secs_f64()));
    o
}

fn main() {
    let secs = Duration::from_secs;
    let mut log = FrozenLog::default();
    let mut results = vec![(1, timed(Some(secs(1)), c1_param_counts))];
    // The shared pretrained model is built outside any budget.
    pretrained();
    results.push((2, timed(Some(secs(10)), c2_identity_at_init)));
    results.push((3, timed(Some(secs(30)), c3_effective_bias)));
    results.push((4, timed(Some(secs(120)), c4_gradients)));
    results.push((5, timed(Some(secs(30)), c5_sigma_convergence)));
    let c7 = timed(Some(secs(15 * 60)), || c7_robustness(&mut log));
    let c8 = timed(Some(secs(5)), c8_mode_counter);
    let c9 = timed(Some(secs(10 * 60)), || c9_grouping_seeds(&mut log));
    let c10 = timed(None, || c10_scale_shift(&mut log));
    let changed: Vec<&str> = log.0.iter().filter(|(_, same)| !same).map(|(l, _)| l.as_str()).collect();
    let c6 = outcome(
        changed.is_empty(),
        format!("{} fine-tuning runs checked, changed: {changed:?}", log.0.len()),
    );
    results.push((6, c6));
    results.push((7, c7));
    results.push((8, c8));
    results.push((9, c9));
    results.push((10, c10));
    results.push((11, timed(None, c11_cli_determinism)));
    results.sort_by_key(|(n, _)| *n);

    let mut failed = 0;
    for (n, o) in &results {
        println!("{} criterion {n:>2}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
