use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grouping::{GroupMap, RowMode};
use crate::modulation::grasp::linear;
use crate::numkit::{normal_sample, RngStream, Tape, Tensor, Var};

/// Lower bound kept on every trainable sigma after each optimizer step.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Initial sigma range; means start at zero.
pub const SIGMA_INIT: (f64, f64) = (0.001, 0.005);

/// Gaussian perturbation of a frozen weight `W: [D_in×D_out]`:
/// `ΔW[i, j] ~ N(mu[f(i), g(j)], sigma[f(i), g(j)])`, where `g` is the column
/// group map and `f` the row mode. Sigma is a standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochLayer {
    pub layer: String,
    pub d_in: usize,
    pub row_mode: RowMode,
    pub col_map: GroupMap,
    /// `sigma ≡ 0` and frozen: the deterministic per-row-shift comparator.
    pub deterministic: bool,
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct StochVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Where the perturbation noise comes from in a forward pass.
pub enum Noise<'a> {
    /// Deploy the means only.
    Mean,
    /// Fresh standard-normal draws.
    Sample(&'a mut RngStream),
    /// A caller-held `[D_in×D_out]` draw, for frozen-noise gradient checks.
    Fixed(&'a Tensor),
}

impl StochLayer {
    pub fn new(
        layer: impl Into<String>,
        d_in: usize,
        col_map: GroupMap,
        row_mode: RowMode,
        rng: &mut RngStream,
    ) -> Self {
        let rows = row_mode.stored_rows(d_in);
        let k = col_map.groups();
        let sigma = (0..rows * k)
            .map(|_| rng.uniform_range(SIGMA_INIT.0, SIGMA_INIT.1))
            .collect();
        Self {
            layer: layer.into(),
            d_in,
            row_mode,
            col_map,
            deterministic: false,
            mu: Tensor::zeros(&[rows, k]).with_grad(true),
            sigma: Tensor::matrix(rows, k, sigma)
                .expect("sigma shape")
                .with_grad(true),
        }
    }

    /// Per-row trainable shifts with zero variance.
    pub fn deterministic_baseline(
        layer: impl Into<String>,
        d_in: usize,
        d_out: usize,
        groups: usize,
        seed: u64,
    ) -> Result<Self> {
        let col_map = GroupMap::build(d_out, groups, seed)?;
        Ok(Self {
            layer: layer.into(),
            d_in,
            row_mode: RowMode::PerRow,
            col_map,
            deterministic: true,
            mu: Tensor::zeros(&[d_in, groups]).with_grad(true),
            sigma: Tensor::zeros(&[d_in, groups]),
        })
    }

    pub fn d_out(&self) -> usize {
        self.col_map.dim()
    }

    pub fn groups(&self) -> usize {
        self.col_map.groups()
    }

    pub fn stored_rows(&self) -> usize {
        self.row_mode.stored_rows(self.d_in)
    }

    pub fn trainable_count(&self) -> usize {
        let n = self.stored_rows() * self.groups();
        if self.deterministic {
            n
        } else {
            2 * n
        }
    }

    /// Flat `[D_in×D_out]` index into the stored `[R×K]` arrays.
    pub fn index_map(&self) -> Vec<usize> {
        let (d_out, k) = (self.d_out(), self.groups());
        let mut idx = Vec::with_capacity(self.d_in * d_out);
        for i in 0..self.d_in {
            let r = self.row_mode.row_of(i);
            idx.extend(self.col_map.assign().iter().map(|&g| r * k + g));
        }
        idx
    }

    /// Mean perturbation `M[i, j] = mu[f(i), g(j)]`.
    pub fn mean_delta(&self) -> Tensor {
        let mu = self.mu.data();
        let data = self.index_map().into_iter().map(|i| mu[i]).collect();
        Tensor::matrix(self.d_in, self.d_out(), data).expect("mean delta shape")
    }

    /// Per-entry std `S[i, j] = sigma[f(i), g(j)]`.
    pub fn std_map(&self) -> Tensor {
        let s = self.sigma.data();
        let data = self.index_map().into_iter().map(|i| s[i]).collect();
        Tensor::matrix(self.d_in, self.d_out(), data).expect("std map shape")
    }

    /// Number of weight entries each stored sigma stands for.
    pub fn coverage_weights(&self) -> Vec<f64> {
        let rows_each = match self.row_mode {
            RowMode::Shared => self.d_in,
            RowMode::PerRow => 1,
        };
        let sizes = self.col_map.group_sizes();
        let mut w = Vec::with_capacity(self.stored_rows() * sizes.len());
        for _ in 0..self.stored_rows() {
            w.extend(sizes.iter().map(|&s| (rows_each * s) as f64));
        }
        w
    }

    pub fn clamp_sigma(&mut self) {
        if self.deterministic {
            return;
        }
        for s in self.sigma.data_mut() {
            if !(*s >= SIGMA_FLOOR) {
                *s = SIGMA_FLOOR;
            }
        }
    }

    fn check(&self, w_shape: &[usize]) -> Result<()> {
        if w_shape != [self.d_in, self.d_out()] {
            return Err(LabError::shape("stoch_forward", w_shape, &[self.d_in, self.d_out()]));
        }
        if let Some(s) = self.sigma.data().iter().find(|s| !(**s >= 0.0)) {
            return Err(LabError::Domain(format!(
                "{}: sigma must be >= 0, found {s}",
                self.layer
            )));
        }
        Ok(())
    }

    /// Perturbed weight `W + ΔW` on the tape. Registers mu/sigma as leaves.
    pub fn perturbed_weight(
        &self,
        tape: &mut Tape,
        w: Var,
        noise: Noise<'_>,
    ) -> Result<(Var, StochVars)> {
        self.check(tape.shape(w))?;
        let shape = vec![self.d_in, self.d_out()];
        let idx = self.index_map();
        let mu = tape.leaf(&self.mu);
        let sigma = tape.leaf(&self.sigma);
        let m = tape.gather(mu, idx.clone(), shape.clone())?;
        let eps = match noise {
            Noise::Mean => None,
            Noise::Sample(_) if self.deterministic => None,
            Noise::Sample(rng) => Some(normal_sample(rng, &shape, 0.0, 1.0)?),
            Noise::Fixed(e) => {
                if e.shape() != shape.as_slice() {
                    return Err(LabError::shape("stoch_forward", e.shape(), &shape));
                }
                Some(e.clone())
            }
        };
        let delta = match eps {
            None => m,
            Some(e) => {
                let s = tape.gather(sigma, idx, shape)?;
                let e = tape.constant(e);
                let se = tape.mul(s, e)?;
                tape.add(m, se)?
            }
        };
        let wt = tape.add(w, delta)?;
        Ok((wt, StochVars { mu, sigma }))
    }
}

/// `X·(W + ΔW) + b` with `W`, `b` frozen.
pub fn stoch_forward(
    tape: &mut Tape,
    layer: &StochLayer,
    x: Var,
    w: Var,
    b: Var,
    noise: Noise<'_>,
) -> Result<(Var, StochVars)> {
    let (wt, vars) = layer.perturbed_weight(tape, w, noise)?;
    Ok((linear(tape, x, wt, b)?, vars))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_shared_mean_half() {
        let mut rng = RngStream::new(1);
        let mut layer = StochLayer::new(
            "l",
            2,
            GroupMap::identity(2, 1).unwrap(),
            RowMode::Shared,
            &mut rng,
        );
        layer.mu.data_mut()[0] = 0.5;
        layer.sigma.data_mut()[0] = 0.0;
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let (wt, _) = layer.perturbed_weight(&mut tape, w, Noise::Sample(&mut rng)).unwrap();
        assert_eq!(tape.value(wt), &[0.5; 4]);
    }

    #[test]
    fn mean_mode_is_deterministic() {
        let mut rng = RngStream::new(2);
        let mut layer = StochLayer::new(
            "l",
            3,
            GroupMap::build(4, 2, 9).unwrap(),
            RowMode::PerRow,
            &mut rng,
        );
        layer.mu.data_mut().iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 0.1);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
            let w = tape.constant(Tensor::full(&[3, 4], 0.2));
            let b = tape.constant(Tensor::zeros(&[4]));
            let (y, _) = stoch_forward(&mut tape, &layer, x, w, b, Noise::Mean).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut rng = RngStream::new(3);
        let mut layer = StochLayer::new(
            "l",
            2,
            GroupMap::identity(2, 1).unwrap(),
            RowMode::Shared,
            &mut rng,
        );
        layer.sigma.data_mut()[0] = -0.1;
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            layer.perturbed_weight(&mut tape, w, Noise::Mean),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn deterministic_baseline_counts() {
        let layer = StochLayer::deterministic_baseline("l", 4, 6, 2, 11).unwrap();
        assert_eq!(layer.trainable_count(), 8);
        assert!(!layer.sigma.requires_grad());
        assert!(layer.sigma.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn deterministic_baseline_ignores_rng() {
        let mut layer = StochLayer::deterministic_baseline("l", 2, 3, 2, 5).unwrap();
        layer.mu.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.4]);
        let out = |seed| {
            let mut rng = RngStream::new(seed);
            let mut tape = Tape::new();
            let w = tape.constant(Tensor::zeros(&[2, 3]));
            let (wt, _) = layer.perturbed_weight(&mut tape, w, Noise::Sample(&mut rng)).unwrap();
            tape.value(wt).to_vec()
        };
        assert_eq!(out(1), out(2));
        assert_eq!(out(1), layer.mean_delta().data());
    }

    #[test]
    fn sigma_init_range_and_clamp() {
        let mut rng = RngStream::new(4);
        let mut layer = StochLayer::new(
            "l",
            5,
            GroupMap::build(6, 3, 1).unwrap(),
            RowMode::PerRow,
            &mut rng,
        );
        assert!(layer
            .sigma
            .data()
            .iter()
            .all(|&s| (SIGMA_INIT.0..=SIGMA_INIT.1).contains(&s)));
        assert!(layer.mu.data().iter().all(|&m| m == 0.0));
        layer.sigma.data_mut()[0] = -3.0;
        layer.clamp_sigma();
        assert_eq!(layer.sigma.data()[0], SIGMA_FLOOR);
        assert_eq!(layer.trainable_count(), 2 * 5 * 3);
    }
}
