//! Kernel density estimates and mode counts on constructed samples.

use grasp_lab::insight::{count_modes, integral, kde};
use grasp_lab::numkit::RngStream;

fn main() -> grasp_lab::Result<()> {
    let mut rng = RngStream::new(5);
    let single: Vec<f64> = (0..2000).map(|_| rng.standard_normal()).collect();
    let mixture: Vec<f64> = (0..1000)
        .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 } + 0.05 * rng.standard_normal())
        .collect();
    for (name, s) in [("N(0,1)", &single), ("mixture", &mixture)] {
        let c = kde(s, 512)?;
        println!(
            "{name:<8} bandwidth {:.4}  integral {:.6}  modes {}",
            c.bandwidth,
            integral(&c),
            count_modes(&c)
        );
    }
    let flat = kde(&[0.25; 8], 512)?;
    println!("constant degenerate={} modes {}", flat.degenerate, count_modes(&flat));
    Ok(())
}
