use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grouping::GroupMap;
use crate::numkit::{Tape, Tensor, Var};

/// Smallest admissible `|gamma|`; the optimizer clamps to it after each step.
pub const GAMMA_GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspMode {
    ScaleOnly,
    ShiftOnly,
    Both,
}

impl GraspMode {
    pub fn learns_scale(self) -> bool {
        matches!(self, GraspMode::ScaleOnly | GraspMode::Both)
    }

    pub fn learns_shift(self) -> bool {
        matches!(self, GraspMode::ShiftOnly | GraspMode::Both)
    }

    /// Trainable values for a layer with `groups` groups.
    pub fn param_count(self, groups: usize) -> usize {
        match self {
            GraspMode::Both => 2 * groups,
            _ => groups,
        }
    }
}

/// Grouped scale/shift applied to the input of a frozen linear sub-layer:
/// `x̃[l, i] = (x[l, i] - beta[g(i)]) / gamma[g(i)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspLayer {
    pub layer: String,
    pub mode: GraspMode,
    pub map: GroupMap,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Tape handles for one GRASP layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GraspVars {
    pub gamma: Var,
    pub beta: Var,
}

impl GraspLayer {
    /// Fresh layer at the identity: `gamma = 1`, `beta = 0`.
    pub fn new(layer: impl Into<String>, map: GroupMap, mode: GraspMode) -> Self {
        let k = map.groups();
        Self {
            layer: layer.into(),
            mode,
            map,
            gamma: Tensor::full(&[k], 1.0).with_grad(mode.learns_scale()),
            beta: Tensor::zeros(&[k]).with_grad(mode.learns_shift()),
        }
    }

    pub fn groups(&self) -> usize {
        self.map.groups()
    }

    pub fn trainable_count(&self) -> usize {
        self.mode.param_count(self.groups())
    }

    /// Keeps every `|gamma|` at or above [`GAMMA_GUARD`], preserving sign.
    pub fn clamp_gamma(&mut self) {
        for g in self.gamma.data_mut() {
            if g.abs() < GAMMA_GUARD {
                *g = if *g < 0.0 { -GAMMA_GUARD } else { GAMMA_GUARD };
            }
        }
    }

    /// Re-applies the mode's frozen values and trainable flags.
    pub fn enforce_mode(&mut self) {
        if !self.mode.learns_scale() {
            self.gamma.data_mut().iter_mut().for_each(|g| *g = 1.0);
        }
        if !self.mode.learns_shift() {
            self.beta.data_mut().iter_mut().for_each(|b| *b = 0.0);
        }
        self.gamma.set_requires_grad(self.mode.learns_scale());
        self.beta.set_requires_grad(self.mode.learns_shift());
    }

    fn check_gamma(&self) -> Result<()> {
        if let Some((i, g)) = self
            .gamma
            .data()
            .iter()
            .enumerate()
            .find(|(_, g)| !(g.abs() >= GAMMA_GUARD))
        {
            return Err(LabError::Domain(format!(
                "{}: gamma[{i}] = {g} is below the division guard {GAMMA_GUARD}",
                self.layer
            )));
        }
        Ok(())
    }

    /// Modulated input `x̃` for `x: [L×D_in]`. Registers gamma/beta as leaves.
    pub fn modulate(&self, tape: &mut Tape, x: Var) -> Result<(Var, GraspVars)> {
        self.check_gamma()?;
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.map.dim() {
            return Err(LabError::shape("grasp_forward", &s, &[self.map.dim()]));
        }
        let rows = s[0];
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        let g_hat = self.map.expand(tape, gamma)?;
        let b_hat = self.map.expand(tape, beta)?;
        let g_rows = tape.broadcast_rows(g_hat, rows)?;
        let b_rows = tape.broadcast_rows(b_hat, rows)?;
        let centered = tape.sub(x, b_rows)?;
        let xt = tape.div(centered, g_rows)?;
        Ok((xt, GraspVars { gamma, beta }))
    }

    /// Effective-bias form of a shift-only layer: `b + t·W` with `t = -expand(beta)`.
    pub fn effective_bias(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        if self.mode != GraspMode::ShiftOnly {
            return Err(LabError::Mode(format!(
                "{}: effective bias is only defined for shift-only layers, not {:?}",
                self.layer, self.mode
            )));
        }
        let (d_in, d_out) = (w.rows(), w.cols());
        if w.shape().len() != 2 || d_in != self.map.dim() || b.len() != d_out {
            return Err(LabError::shape("effective_bias", w.shape(), b.shape()));
        }
        let shift = self.map.expand_values(self.beta.data())?;
        let mut out = b.data().to_vec();
        for i in 0..d_in {
            let t = -shift[i];
            for j in 0..d_out {
                out[j] += t * w.at(i, j);
            }
        }
        Tensor::new(vec![d_out], out)
    }
}

/// Frozen linear map `x·W + b`, the path every wrapped layer ends in.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// `((X - β̂) / γ̂)·W + b` with `W`, `b` frozen.
pub fn grasp_forward(
    tape: &mut Tape,
    layer: &GraspLayer,
    x: Var,
    w: Var,
    b: Var,
) -> Result<(Var, GraspVars)> {
    let (xt, vars) = layer.modulate(tape, x)?;
    Ok((linear(tape, xt, w, b)?, vars))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn hand_example_both_modes() {
        let mut layer = GraspLayer::new("l", GroupMap::identity(2, 1).unwrap(), GraspMode::Both);
        layer.gamma.data_mut()[0] = 2.0;
        layer.beta.data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 2, &[4.0, 6.0]));
        let (xt, _) = layer.modulate(&mut tape, x).unwrap();
        assert_eq!(tape.value(xt), &[1.5, 2.5]);
        let w = tape.constant(t2(2, 1, &[1.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = linear(&mut tape, xt, w, b).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
    }

    #[test]
    fn init_is_identity() {
        let layer = GraspLayer::new("l", GroupMap::build(3, 2, 4).unwrap(), GraspMode::Both);
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[0.1, -0.7, 3.3, 1e-3, 2.0, -9.5]));
        let w = tape.constant(t2(3, 2, &[0.3, 0.2, -0.1, 0.7, 1.1, -0.4]));
        let b = tape.constant(Tensor::from_vec(vec![0.01, -0.02]));
        let plain = linear(&mut tape, x, w, b).unwrap();
        let (mod_y, _) = grasp_forward(&mut tape, &layer, x, w, b).unwrap();
        assert_eq!(tape.value(plain), tape.value(mod_y));
    }

    #[test]
    fn zero_gamma_is_guarded() {
        let mut layer = GraspLayer::new("l", GroupMap::identity(2, 1).unwrap(), GraspMode::Both);
        layer.gamma.data_mut()[0] = 0.0;
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 2, &[1.0, 1.0]));
        assert!(matches!(layer.modulate(&mut tape, x), Err(LabError::Domain(_))));
        layer.clamp_gamma();
        assert_eq!(layer.gamma.data()[0], GAMMA_GUARD);
        assert!(layer.modulate(&mut tape, x).is_ok());
    }

    #[test]
    fn effective_bias_hand_example() {
        let mut layer =
            GraspLayer::new("l", GroupMap::identity(2, 1).unwrap(), GraspMode::ShiftOnly);
        let w = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(layer.effective_bias(&w, &b).unwrap().data(), b.data());
        layer.beta.data_mut()[0] = 1.0;
        assert_eq!(layer.effective_bias(&w, &b).unwrap().data(), &[-4.0, -6.0]);
    }

    #[test]
    fn effective_bias_requires_shift_only() {
        let layer = GraspLayer::new("l", GroupMap::identity(2, 1).unwrap(), GraspMode::Both);
        let w = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            layer.effective_bias(&w, &Tensor::zeros(&[2])),
            Err(LabError::Mode(_))
        ));
    }

    #[test]
    fn modes_fix_the_other_parameter() {
        let s = GraspLayer::new("l", GroupMap::identity(4, 2).unwrap(), GraspMode::ScaleOnly);
        assert!(s.gamma.requires_grad() && !s.beta.requires_grad());
        assert_eq!(s.trainable_count(), 2);
        let t = GraspLayer::new("l", GroupMap::identity(4, 2).unwrap(), GraspMode::ShiftOnly);
        assert!(!t.gamma.requires_grad() && t.beta.requires_grad());
        let b = GraspLayer::new("l", GroupMap::identity(4, 2).unwrap(), GraspMode::Both);
        assert_eq!(b.trainable_count(), 4);
    }
}
