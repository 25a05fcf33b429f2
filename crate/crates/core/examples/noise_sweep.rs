//! StochGRASP against the deterministic per-row baseline under inference noise.
//!
//! `cargo run --release --example noise_sweep`

use grasp_lab::grouping::RowMode;
use grasp_lab::harness::{noise_sweep, sweep_csv, train, NoiseScope, NoiseSweepSpec, TrainConfig};
use grasp_lab::micromodel::{
    attach_adapters, build_model, gen_dataset, AdapterSpec, LayerSelection, ModelConfig,
    SynthTaskSpec, Task,
};
use grasp_lab::modulation::NoiseAwareLossConfig;
use grasp_lab::numkit::RngStream;

fn main() -> grasp_lab::Result<()> {
    let pre = gen_dataset(&SynthTaskSpec::new(Task::PretrainMajority, 1, 4000, 500, 0))?;
    let mut base = build_model(&ModelConfig::default(), &mut RngStream::new(0))?;
    train(&mut base, &pre, &TrainConfig { lr: 3e-3, epochs: 2, ..Default::default() })?;
    base.reset_head(2, &mut RngStream::new(9))?;

    let ft = gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 5000, 500, 1000))?;
    let runs = [
        ("baseline", AdapterSpec::baseline(8, LayerSelection::AllLinear, 3), None),
        (
            "stoch",
            AdapterSpec::stoch(8, LayerSelection::AllLinear, RowMode::PerRow, 3),
            Some(NoiseAwareLossConfig::relative(5.0, 0.05)),
        ),
    ];
    let mut models = Vec::new();
    for (name, spec, loss_cfg) in runs {
        let mut m = base.clone();
        attach_adapters(&mut m, &spec)?;
        let r = train(&mut m, &ft, &TrainConfig { lr: 3e-3, epochs: 25, loss_cfg, sigma_lr: Some(1e-4), seed: 5, ..Default::default() })?;
        println!("{name}: val acc {:.3}", r.last().val_acc);
        models.push((name.to_string(), m));
    }
    let spec = NoiseSweepSpec {
        levels: vec![0.0, 0.01, 0.02, 0.05, 0.1],
        seeds: vec![1, 2, 3, 4, 5],
        scope: NoiseScope::Modulated,
    };
    let report = noise_sweep(&spec, &models, &ft.test)?;
    for a in &report.aggregates {
        println!("{:<9} rho {:<5} mean {:.4} std {:.4}", a.model, a.rho, a.mean, a.std);
    }
    print!("{}", sweep_csv(&report));
    Ok(())
}
