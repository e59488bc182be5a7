//! CSV writers for trajectories, weight snapshots and gradient profiles.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! results give byte-identical files.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::sim::TrajectoryLog;

fn join(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// `t,x_1..x_n,xd_1..xd_n,e_norm,u_norm,f_err_norm`.
pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, mut w: W) -> io::Result<()> {
    let n = log.x.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("xd_{i}")));
    header.extend(["e_norm", "u_norm", "f_err_norm"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    let e = log.error_norms();
    let u = log.input_norms();
    let f = log.approximation_error_norms();
    for k in 0..log.len() {
        let row = std::iter::once(log.t[k])
            .chain(log.x[k].iter().copied())
            .chain(log.xd[k].iter().copied())
            .chain([e[k], u[k], f[k]]);
        writeln!(w, "{}", join(row))?;
    }
    Ok(())
}

/// `t,w_<i>...` for the selected weight indices.
pub fn write_snapshot_csv<W: Write>(
    log: &TrajectoryLog,
    indices: &[usize],
    mut w: W,
) -> Result<()> {
    let len = log.final_theta.len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(Error::InvalidConfig(format!(
            "snapshot index {bad} out of range for {len} weights"
        )));
    }
    let io = |e: io::Error| Error::InvalidConfig(format!("writing snapshots: {e}"));
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(indices.iter().map(|i| format!("w_{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (t, theta) in &log.snapshots {
        let row = std::iter::once(*t).chain(indices.iter().map(|&i| theta[i]));
        writeln!(w, "{}", join(row)).map_err(io)?;
    }
    Ok(())
}

pub const GRADIENT_PROFILE_HEADER: &str = "block_index,frobenius_norm_resnet,frobenius_norm_fc";

/// One row per block, 1-based block index.
pub fn write_gradient_profile_csv<W: Write>(
    resnet: &[f64],
    fc: &[f64],
    mut w: W,
) -> io::Result<()> {
    assert_eq!(resnet.len(), fc.len(), "gradient profiles differ in length");
    writeln!(w, "{GRADIENT_PROFILE_HEADER}")?;
    for (p, (a, b)) in resnet.iter().zip(fc).enumerate() {
        writeln!(w, "{},{a:?},{b:?}", p + 1)?;
    }
    Ok(())
}
