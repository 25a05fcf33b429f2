//! Save a model with adapters, reload it, and compare bytes and logits.

use grasp_lab::micromodel::{
    attach_adapters, build_model, from_json, to_json, AdapterSpec, LayerSelection, ModelConfig,
};
use grasp_lab::modulation::GraspMode;
use grasp_lab::numkit::RngStream;

fn main() -> grasp_lab::Result<()> {
    let mut model = build_model(&ModelConfig::default(), &mut RngStream::new(1))?;
    attach_adapters(&mut model, &AdapterSpec::grasp(8, LayerSelection::KVFf2, GraspMode::Both, 2))?;
    let text = to_json(&model)?;
    let back = from_json(&text)?;
    let tokens = vec![(0..16).collect::<Vec<usize>>()];
    let same = model.logits(&tokens)?.data() == back.logits(&tokens)?.data();
    println!("manifest bytes: {}", text.len());
    println!("re-serialized identical: {}", to_json(&back)? == text);
    println!("logits identical: {same}");
    println!("checksum: {}", back.checksum());
    Ok(())
}
