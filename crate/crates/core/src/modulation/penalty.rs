use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::modulation::StochLayer;
use crate::numkit::{Tape, Tensor, Var};

/// How `sigma_target` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScale {
    /// In weight units.
    #[default]
    Absolute,
    /// A multiple of the wrapped weight's standard deviation.
    RelativeToWeightStd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseAwareLossConfig {
    pub lambda: f64,
    pub sigma_target: f64,
    #[serde(default)]
    pub target_scale: TargetScale,
}

impl NoiseAwareLossConfig {
    pub fn new(lambda: f64, sigma_target: f64) -> Self {
        Self {
            lambda,
            sigma_target,
            target_scale: TargetScale::Absolute,
        }
    }

    pub fn relative(lambda: f64, ratio: f64) -> Self {
        Self {
            lambda,
            sigma_target: ratio,
            target_scale: TargetScale::RelativeToWeightStd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LabError::config("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma_target > 0.0) || !self.sigma_target.is_finite() {
            return Err(LabError::config(
                "sigma_target",
                format!("must be > 0, got {}", self.sigma_target),
            ));
        }
        Ok(())
    }

    /// Target sigma for a layer whose frozen weight has std `weight_std`.
    pub fn target_for(&self, weight_std: f64) -> f64 {
        match self.target_scale {
            TargetScale::Absolute => self.sigma_target,
            TargetScale::RelativeToWeightStd => self.sigma_target * weight_std,
        }
    }
}

/// One stochastic layer's contribution to the penalty.
pub struct PenaltyTerm<'a> {
    pub layer: &'a StochLayer,
    pub sigma: Var,
    pub target: f64,
}

/// `λ · Σ_layers Σ_i Σ_j (σ[f(i), g(j)] - σ_target)²`.
///
/// Each stored sigma is weighted by the number of weight entries it covers,
/// so the sum runs over every `(i, j)` of the weight, not over stored values.
pub fn noise_aware_penalty(tape: &mut Tape, terms: &[PenaltyTerm<'_>], lambda: f64) -> Result<Var> {
    if terms.is_empty() {
        return Err(LabError::Contract(
            "noise-aware penalty needs at least one stochastic layer".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for term in terms {
        let shape = tape.shape(term.sigma).to_vec();
        let weights = Tensor::new(shape, term.layer.coverage_weights())?;
        let dev = tape.add_scalar(term.sigma, -term.target);
        let sq = tape.mul(dev, dev)?;
        let w = tape.constant(weights);
        let weighted = tape.mul(sq, w)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{GroupMap, RowMode};
    use crate::numkit::RngStream;

    fn shared_layer(d_in: usize, d_out: usize, k: usize, sigma: f64) -> StochLayer {
        let mut rng = RngStream::new(0);
        let mut l = StochLayer::new(
            "l",
            d_in,
            GroupMap::build(d_out, k, 1).unwrap(),
            RowMode::Shared,
            &mut rng,
        );
        l.sigma.data_mut().iter_mut().for_each(|s| *s = sigma);
        l
    }

    #[test]
    fn exact_target_gives_zero() {
        let l = shared_layer(3, 4, 2, 0.05);
        let mut tape = Tape::new();
        let sigma = tape.leaf(&l.sigma);
        let p = noise_aware_penalty(
            &mut tape,
            &[PenaltyTerm { layer: &l, sigma, target: 0.05 }],
            0.1,
        )
        .unwrap();
        assert_eq!(tape.scalar_value(p), 0.0);
    }

    #[test]
    fn weighted_hand_example() {
        let l = shared_layer(2, 2, 1, 0.03);
        let mut tape = Tape::new();
        let sigma = tape.leaf(&l.sigma);
        let p = noise_aware_penalty(
            &mut tape,
            &[PenaltyTerm { layer: &l, sigma, target: 0.05 }],
            0.1,
        )
        .unwrap();
        assert!((tape.scalar_value(p) - 1.6e-4).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradient() {
        let l = shared_layer(3, 5, 2, 0.02);
        let mut tape = Tape::new();
        let sigma = tape.leaf(&l.sigma);
        let lambda = 0.05;
        let p = noise_aware_penalty(
            &mut tape,
            &[PenaltyTerm { layer: &l, sigma, target: 0.05 }],
            lambda,
        )
        .unwrap();
        let g = tape.backward(p).unwrap();
        let w = l.coverage_weights();
        for (gi, wi) in g.get(sigma).unwrap().iter().zip(&w) {
            let want = 2.0 * lambda * wi * (0.02 - 0.05);
            assert!((gi - want).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_terms_rejected() {
        let mut tape = Tape::new();
        assert!(noise_aware_penalty(&mut tape, &[], 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NoiseAwareLossConfig::new(0.05, 0.05).validate().is_ok());
        assert!(NoiseAwareLossConfig::new(-0.1, 0.05).validate().is_err());
        assert!(NoiseAwareLossConfig::new(0.1, 0.0).validate().is_err());
        let rel = NoiseAwareLossConfig::relative(0.05, 0.05);
        assert!((rel.target_for(0.2) - 0.01).abs() < 1e-15);
    }
}
