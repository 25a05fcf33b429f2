//! Central finite differences against the tape gradient of a model with
//! stochastic adapters under frozen noise.

use std::collections::BTreeMap;

use grasp_lab::grouping::RowMode;
use grasp_lab::micromodel::{attach_adapters, build_model, AdapterSpec, LayerSelection, Model, ModelConfig, NoiseSource};
use grasp_lab::numkit::{normal_sample, RngStream, Tensor};

fn loss(model: &Model, tokens: &[Vec<usize>], labels: &[usize], noise: &BTreeMap<String, Tensor>) -> f64 {
    let mut pass = model.forward(tokens, NoiseSource::Fixed(noise)).unwrap();
    let l = pass.tape.cross_entropy(pass.logits, labels).unwrap();
    pass.tape.scalar_value(l)
}

fn main() -> grasp_lab::Result<()> {
    let cfg = ModelConfig { vocab: 8, d_model: 8, n_heads: 2, d_ff: 16, n_blocks: 1, max_seq: 4, n_classes: 2, fused_qkv: false };
    let mut rng = RngStream::new(4);
    let mut model = build_model(&cfg, &mut rng)?;
    attach_adapters(&mut model, &AdapterSpec::stoch(3, LayerSelection::Ff2Only, RowMode::PerRow, 1))?;
    for s in model.stoch_layers_mut() {
        s.mu.data_mut().iter_mut().for_each(|m| *m = 0.1 * rng.standard_normal());
    }
    let mut noise = BTreeMap::new();
    noise.insert("block0.FF2".to_string(), normal_sample(&mut rng, &[16, 8], 0.0, 1.0)?);
    let tokens = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 0]];
    let labels = [0, 1];

    let mut pass = model.forward(&tokens, NoiseSource::Fixed(&noise))?;
    let l = pass.tape.cross_entropy(pass.logits, &labels)?;
    let mut analytic = model.clone();
    analytic.zero_grad();
    analytic.accumulate_grads(&pass, l)?;

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    analytic.visit_params(|name, t| {
        if let Some(g) = t.grad() {
            names.push((name.to_string(), g.to_vec()));
        }
    });
    for (name, grad) in &names {
        for (i, &g) in grad.iter().enumerate().take(4) {
            let nudge = |delta: f64| {
                let mut m = model.clone();
                m.visit_params_mut(|n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                loss(&m, &tokens, &labels, &noise)
            };
            let fd = (nudge(h) - nudge(-h)) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            worst = worst.max(rel);
            println!("{name}[{i}]  tape {g:+.6e}  fd {fd:+.6e}  rel {rel:.1e}");
        }
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
