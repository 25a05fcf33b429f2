//! Random group maps: balanced sizes, expansion and contraction.

use grasp_lab::grouping::GroupMap;

fn main() -> grasp_lab::Result<()> {
    let map = GroupMap::build(10, 3, 7)?;
    println!("assign: {:?}", map.assign());
    println!("sizes:  {:?}", map.group_sizes());

    let params = [1.0, 2.0, 3.0];
    let expanded = map.expand_values(&params)?;
    println!("expand {params:?} -> {expanded:?}");
    println!("contract(ones) -> {:?}", map.contract_values(&[1.0; 10])?);

    for seed in 0..3 {
        println!("seed {seed}: {:?}", GroupMap::build(10, 3, seed)?.assign());
    }
    Ok(())
}
