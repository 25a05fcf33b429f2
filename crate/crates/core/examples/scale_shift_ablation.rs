//! Scale-only versus shift-only GRASP on the bigram task, emitted as CSV.
//!
//! `cargo run --release --example scale_shift_ablation`

use grasp_lab::harness::{train, TrainConfig};
use grasp_lab::micromodel::{
    attach_adapters, build_model, gen_dataset, AdapterSpec, LayerSelection, ModelConfig,
    SynthTaskSpec, Task,
};
use grasp_lab::modulation::GraspMode;
use grasp_lab::numkit::RngStream;

fn main() -> grasp_lab::Result<()> {
    let pre = gen_dataset(&SynthTaskSpec::new(Task::PretrainMajority, 1, 4000, 500, 0))?;
    let mut base = build_model(&ModelConfig::default(), &mut RngStream::new(0))?;
    train(&mut base, &pre, &TrainConfig { lr: 3e-3, epochs: 2, ..Default::default() })?;
    base.reset_head(2, &mut RngStream::new(9))?;
    let ft = gen_dataset(&SynthTaskSpec::new(Task::FinetuneBigram, 2, 5000, 500, 1000))?;

    println!("mode,params,frozen_val_acc,final_val_acc");
    for mode in [GraspMode::ScaleOnly, GraspMode::ShiftOnly, GraspMode::Both] {
        let mut m = base.clone();
        attach_adapters(&mut m, &AdapterSpec::grasp(8, LayerSelection::Ff2Only, mode, 3))?;
        let r = train(&mut m, &ft, &TrainConfig { lr: 1e-2, epochs: 15, seed: 5, ..Default::default() })?;
        println!(
            "{mode:?},{},{},{}",
            m.adapter_param_count(),
            r.initial().val_acc,
            r.last().val_acc
        );
    }
    Ok(())
}
