//! Adapter parameter counts and percentages for the published architectures.

use grasp_lab::insight::{count_adapter_params, ArchSpec, CountMethod};
use grasp_lab::micromodel::LayerSelection;
use grasp_lab::modulation::GraspMode;

fn main() -> grasp_lab::Result<()> {
    let rows = [
        (ArchSpec::roberta_base(), 128, LayerSelection::AllLinear),
        (ArchSpec::roberta_base(), 32, LayerSelection::AllLinear),
        (ArchSpec::roberta_base(), 128, LayerSelection::KVFf2),
        (ArchSpec::roberta_base(), 128, LayerSelection::Ff2Only),
        (ArchSpec::roberta_large(), 64, LayerSelection::AllLinear),
        (ArchSpec::gpt2_medium(), 384, LayerSelection::AllLinear),
        (ArchSpec::gpt2_medium(), 64, LayerSelection::AllLinear),
    ];
    println!("{:<14} {:>4} {:<11} {:>8} {:>10}", "arch", "K", "layers", "count", "percent");
    for (arch, k, sel) in rows {
        let c = count_adapter_params(&arch, CountMethod::Grasp, k, sel, GraspMode::Both)?;
        println!("{:<14} {:>4} {:<11} {:>8} {:>9.4}%", arch.name, k, sel.as_str(), c.count, c.percent);
    }
    let base = ArchSpec::roberta_base();
    for method in [CountMethod::StochShared, CountMethod::StochPerRow, CountMethod::BitfitLike] {
        let c = count_adapter_params(&base, method, 32, LayerSelection::AllLinear, GraspMode::Both)?;
        println!("roberta-base {method:?} K=32: {} ({:.4}%)", c.count, c.percent);
    }
    Ok(())
}
