//! Trajectory error metrics and trajectory CSV files.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Pose2D};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub mae_x: f64,
    pub mae_y: f64,
    /// Mean absolute wrapped heading error (rad).
    pub mae_theta: f64,
    /// Mean over steps of the position error norm (m).
    pub avg_rmse: f64,
    /// Per-step `(dx, dy, wrapped dtheta)`.
    #[serde(skip)]
    pub errors: Vec<[f64; 3]>,
}

pub fn compute_metrics(estimate: &[Pose2D], reference: &[Pose2D]) -> Result<Metrics> {
    if estimate.len() != reference.len() {
        return Err(Error::domain(format!(
            "trajectory lengths differ: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::domain("empty trajectories"));
    }
    let errors: Vec<[f64; 3]> = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| [e.x - r.x, e.y - r.y, wrap_angle(e.theta - r.theta)])
        .collect();
    let n = errors.len() as f64;
    let mean = |f: &dyn Fn(&[f64; 3]) -> f64| errors.iter().map(f).sum::<f64>() / n;
    Ok(Metrics {
        mae_x: mean(&|e| e[0].abs()),
        mae_y: mean(&|e| e[1].abs()),
        mae_theta: mean(&|e| e[2].abs()),
        avg_rmse: mean(&|e| e[0].hypot(e[1])),
        errors,
    })
}

/// Timestamped pose sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Pose2D>,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,x,y,theta")?;
        for (t, p) in self.times.iter().zip(&self.poses) {
            writeln!(out, "{t},{},{},{}", p.x, p.y, p.theta)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut traj = Trajectory::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("invalid number '{f}'"),
                    })
                })
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 4 columns, got {}", v.len()),
                });
            }
            traj.times.push(v[0]);
            traj.poses.push(Pose2D { x: v[1], y: v[2], theta: v[3] });
        }
        Ok(traj)
    }
}
