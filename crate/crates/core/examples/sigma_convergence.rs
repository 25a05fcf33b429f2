//! Penalty-only training pulls every sigma to its target.
//!
//! Each stored sigma is weighted by the number of weight entries it covers, so
//! the step is sized from the largest weight: `lr = 1 / (4 λ w_max)` halves
//! the heaviest entry's distance every step and shrinks the others more slowly.

use grasp_lab::grouping::RowMode;
use grasp_lab::harness::{train, Optimizer, TrainConfig};
use grasp_lab::micromodel::{
    attach_adapters, build_model, gen_dataset, AdapterSpec, LayerSelection, ModelConfig,
    SynthTaskSpec, Task,
};
use grasp_lab::modulation::NoiseAwareLossConfig;
use grasp_lab::numkit::RngStream;

fn main() -> grasp_lab::Result<()> {
    let (lambda, target) = (0.05, 0.05);
    let cfg = ModelConfig { n_classes: 2, ..ModelConfig::default() };
    let mut model = build_model(&cfg, &mut RngStream::new(0))?;
    attach_adapters(&mut model, &AdapterSpec::stoch(4, LayerSelection::Ff2Only, RowMode::Shared, 1))?;
    let w_max = model
        .stoch_layers()
        .flat_map(|(_, s)| s.coverage_weights())
        .fold(0.0, f64::max);
    let data = gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 64, 8, 0))?;
    let report = train(
        &mut model,
        &data,
        &TrainConfig {
            lr: 1.0 / (4.0 * lambda * w_max),
            batch: 64,
            epochs: 400,
            optimizer: Optimizer::Sgd,
            loss_cfg: Some(NoiseAwareLossConfig::new(lambda, target)),
            task_loss: false,
            ..Default::default()
        },
    )?;
    for m in report.metrics.iter().step_by(50) {
        println!("step {:>3}  penalty {:.3e}  max |sigma - target| {:.3e}", m.epoch, m.penalty, m.sigma_dev);
    }
    for (name, s) in model.stoch_layers() {
        println!("{name}: sigma {:?}", s.sigma.data());
    }
    Ok(())
}
