//! A shift-only GRASP layer folds into the frozen bias: `(x - β̂)·W + b = x·W + b_eff`.

use grasp_lab::grouping::GroupMap;
use grasp_lab::modulation::{grasp_forward, linear, GraspLayer, GraspMode};
use grasp_lab::numkit::{normal_sample, RngStream, Tape};

fn main() -> grasp_lab::Result<()> {
    let (d_in, d_out, k) = (12, 5, 4);
    let mut rng = RngStream::new(3);
    let w = normal_sample(&mut rng, &[d_in, d_out], 0.0, 0.3)?;
    let b = normal_sample(&mut rng, &[d_out], 0.0, 0.1)?;
    let x = normal_sample(&mut rng, &[6, d_in], 0.0, 1.0)?;

    let mut layer = GraspLayer::new("demo", GroupMap::build(d_in, k, 11)?, GraspMode::ShiftOnly);
    for v in layer.beta.data_mut() {
        *v = rng.uniform_range(-1.0, 1.0);
    }
    let b_eff = layer.effective_bias(&w, &b)?;

    let mut tape = Tape::new();
    let (xv, wv, bv, bev) = (tape.constant(x), tape.constant(w), tape.constant(b), tape.constant(b_eff.clone()));
    let (modulated, _) = grasp_forward(&mut tape, &layer, xv, wv, bv)?;
    let folded = linear(&mut tape, xv, wv, bev)?;
    let gap = tape
        .value(modulated)
        .iter()
        .zip(tape.value(folded))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("b_eff = {:?}", b_eff.data());
    println!("max |modulated - folded| = {gap:e}");
    Ok(())
}
