use crate::error::Result;
use crate::micromodel::{argmax_rows, Model, NoiseSource, Split};
use crate::numkit::RngStream;

const EVAL_BATCH: usize = 256;

/// Mean 0/1 accuracy. Stochastic layers deploy their means unless `rng` is
/// given, in which case every batch draws fresh noise from it.
pub fn evaluate(model: &Model, data: &Split, mut rng: Option<&mut RngStream>) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for (toks, labels) in data.tokens.chunks(EVAL_BATCH).zip(data.labels.chunks(EVAL_BATCH)) {
        let noise = match rng.as_deref_mut() {
            Some(r) => NoiseSource::Sample(r),
            None => NoiseSource::Mean,
        };
        let pass = model.forward(toks, noise)?;
        let pred = argmax_rows(&pass.tape.tensor(pass.logits));
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy and accuracy in mean deployment.
pub fn evaluate_split(model: &Model, data: &Split) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (toks, labels) in data.tokens.chunks(EVAL_BATCH).zip(data.labels.chunks(EVAL_BATCH)) {
        let mut pass = model.forward(toks, NoiseSource::Mean)?;
        let ce = pass.tape.cross_entropy(pass.logits, labels)?;
        loss += pass.tape.scalar_value(ce) * toks.len() as f64;
        let pred = argmax_rows(&pass.tape.tensor(pass.logits));
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
