//! Random grouping of a `D`-dimensional axis into `K` shared-parameter groups.
//!
//! The base pattern tiles `[0, 1, .., K-1]` `ceil(D/K)` times and truncates it
//! to length `D`. A Fisher–Yates permutation `perm` then reorders it, so that
//! dimension `d` belongs to group `tiled[perm[d]] = perm[d] mod K`. Group sizes
//! are therefore `ceil(D/K)` or `floor(D/K)` whatever the permutation.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numkit::{RngStream, Tape, Tensor, Var};

/// How the rows of a perturbed weight matrix map onto stored distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMode {
    /// One distribution row shared by every input row.
    Shared,
    /// A separate distribution row per input row.
    PerRow,
}

impl RowMode {
    /// Number of stored rows for a weight with `d_in` input rows.
    pub fn stored_rows(self, d_in: usize) -> usize {
        match self {
            RowMode::Shared => 1,
            RowMode::PerRow => d_in,
        }
    }

    /// Stored row index for input row `i`.
    pub fn row_of(self, i: usize) -> usize {
        match self {
            RowMode::Shared => 0,
            RowMode::PerRow => i,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GroupMapRepr", into = "GroupMapRepr")]
pub struct GroupMap {
    dim: usize,
    groups: usize,
    seed: u64,
    perm: Vec<usize>,
    assign: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GroupMapRepr {
    dim: usize,
    groups: usize,
    seed: u64,
    perm: Vec<usize>,
}

impl TryFrom<GroupMapRepr> for GroupMap {
    type Error = LabError;

    fn try_from(r: GroupMapRepr) -> Result<Self> {
        GroupMap::from_perm(r.dim, r.groups, r.seed, r.perm)
    }
}

impl From<GroupMap> for GroupMapRepr {
    fn from(m: GroupMap) -> Self {
        GroupMapRepr {
            dim: m.dim,
            groups: m.groups,
            seed: m.seed,
            perm: m.perm,
        }
    }
}

fn check_dims(dim: usize, groups: usize) -> Result<()> {
    if groups == 0 || groups > dim {
        return Err(LabError::Parameter(format!(
            "group count must satisfy 1 <= K <= D, got K={groups}, D={dim}"
        )));
    }
    Ok(())
}

impl GroupMap {
    /// Builds the map with a permutation drawn from `RngStream::new(seed)`.
    pub fn build(dim: usize, groups: usize, seed: u64) -> Result<Self> {
        check_dims(dim, groups)?;
        let mut perm: Vec<usize> = (0..dim).collect();
        RngStream::new(seed).shuffle(&mut perm);
        Self::from_perm(dim, groups, seed, perm)
    }

    /// Builds the map from an explicit permutation, validating it.
    pub fn from_perm(dim: usize, groups: usize, seed: u64, perm: Vec<usize>) -> Result<Self> {
        check_dims(dim, groups)?;
        if perm.len() != dim {
            return Err(LabError::Parameter(format!(
                "permutation has length {}, expected {dim}",
                perm.len()
            )));
        }
        let mut seen = vec![false; dim];
        for &p in &perm {
            if p >= dim || std::mem::replace(&mut seen[p], true) {
                return Err(LabError::Parameter(format!(
                    "permutation is not a bijection on 0..{dim} (entry {p})"
                )));
            }
        }
        let assign = perm.iter().map(|&p| p % groups).collect();
        Ok(Self {
            dim,
            groups,
            seed,
            perm,
            assign,
        })
    }

    /// Map with the identity permutation.
    pub fn identity(dim: usize, groups: usize) -> Result<Self> {
        Self::from_perm(dim, groups, 0, (0..dim).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn assign(&self) -> &[usize] {
        &self.assign
    }

    pub fn group_of(&self, d: usize) -> usize {
        self.assign[d]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in &self.assign {
            sizes[g] += 1;
        }
        sizes
    }

    /// `out[d] = params[assign[d]]` on plain values.
    pub fn expand_values(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.groups {
            return Err(LabError::shape("expand", &[self.groups], &[params.len()]));
        }
        Ok(self.assign.iter().map(|&g| params[g]).collect())
    }

    /// Group-wise sum; the adjoint of [`GroupMap::expand_values`].
    pub fn contract_values(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(LabError::shape("contract", &[self.dim], &[v.len()]));
        }
        let mut out = vec![0.0; self.groups];
        for (&g, x) in self.assign.iter().zip(v) {
            out[g] += x;
        }
        Ok(out)
    }

    /// Differentiable expansion of a `[K]` parameter to `[D]`.
    pub fn expand(&self, tape: &mut Tape, params: Var) -> Result<Var> {
        if tape.shape(params) != [self.groups] {
            return Err(LabError::shape("expand", &[self.groups], tape.shape(params)));
        }
        tape.gather(params, self.assign.clone(), vec![self.dim])
    }

    /// Non-differentiable expansion of a tensor.
    pub fn expand_tensor(&self, params: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.expand_values(params.data())?))
    }
}
