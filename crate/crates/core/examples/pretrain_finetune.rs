//! Pretrain on the majority task, then fine-tune GRASP adapters on the bigram task.
//!
//! `cargo run --release --example pretrain_finetune`

use grasp_lab::harness::{evaluate, train, TrainConfig};
use grasp_lab::micromodel::{
    attach_adapters, build_model, gen_dataset, AdapterSpec, LayerSelection, ModelConfig,
    SynthTaskSpec, Task,
};
use grasp_lab::modulation::GraspMode;
use grasp_lab::numkit::RngStream;

fn main() -> grasp_lab::Result<()> {
    let pre = gen_dataset(&SynthTaskSpec::new(Task::PretrainMajority, 1, 4000, 500, 500))?;
    let mut model = build_model(&ModelConfig::default(), &mut RngStream::new(0))?;
    let report = train(&mut model, &pre, &TrainConfig { lr: 3e-3, epochs: 2, ..Default::default() })?;
    println!("pretrain val acc {:.3}, test acc {:.3}", report.last().val_acc, evaluate(&model, &pre.test, None)?);

    model.reset_head(2, &mut RngStream::new(9))?;
    attach_adapters(&mut model, &AdapterSpec::grasp(8, LayerSelection::Ff2Only, GraspMode::Both, 3))?;
    println!(
        "adapter params {} of {} base params",
        model.adapter_param_count(),
        model.base_param_count()
    );
    let ft = gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 5000, 500, 1000))?;
    let frozen = model.frozen_checksum();
    let report = train(&mut model, &ft, &TrainConfig { lr: 1e-2, epochs: 15, seed: 5, ..Default::default() })?;
    for m in &report.metrics {
        println!("epoch {:>2}  train loss {:.4}  val acc {:.3}", m.epoch, m.train_loss, m.val_acc);
    }
    println!("frozen base unchanged: {}", frozen == model.frozen_checksum());
    println!("test acc {:.3}", evaluate(&model, &ft.test, None)?);
    Ok(())
}
