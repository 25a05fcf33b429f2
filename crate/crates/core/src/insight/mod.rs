//! Parameter accounting, density analysis of learned adapter values, and the
//! command-line front end.

pub mod cli;
mod kde;
mod params;

pub use kde::{
    count_modes, count_modes_with, dist_report, integral, kde, silverman_bandwidth, DistReport,
    KdeCurve, BANDWIDTH_FLOOR, DEFAULT_GRID, DEFAULT_PROMINENCE,
};
pub use params::{count_adapter_params, ArchSpec, CountMethod, ParamCount};

use crate::error::Result;
use crate::micromodel::{Adapter, Model};

/// One report per learned parameter per adapter: expanded `gamma` and/or
/// `beta` for GRASP layers, expanded `mu` for stochastic layers.
pub fn analyze_model(model: &Model, grid_points: usize) -> Result<Vec<DistReport>> {
    let mut out = Vec::new();
    for (name, a) in &model.adapters {
        match a {
            Adapter::Grasp(g) => {
                if g.mode.learns_scale() {
                    let v = g.map.expand_values(g.gamma.data())?;
                    out.push(dist_report(name, "gamma", &v, grid_points)?);
                }
                if g.mode.learns_shift() {
                    let v = g.map.expand_values(g.beta.data())?;
                    out.push(dist_report(name, "beta", &v, grid_points)?);
                }
            }
            Adapter::Stoch(s) => {
                let m = s.mean_delta();
                out.push(dist_report(name, "mu", m.data(), grid_points)?);
            }
        }
    }
    Ok(out)
}
