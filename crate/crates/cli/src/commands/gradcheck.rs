use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use difftrack::io::{load_mask, load_volume, save_gradients};
use difftrack::{gradcheck, GradcheckConfig, NewtonConstants};

use crate::args::{parse_coordinate, parse_vec3, Coordinate, TrackingFlags};

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub fod: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Seed position "x,y,z" in mm.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub seed: [f64; 3],
    /// Initial direction "dx,dy,dz" (normalized before use).
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub dir: [f64; 3],
    /// Differentiated coordinate "t,axis", e.g. "20,x".
    #[arg(long, value_parser = parse_coordinate)]
    pub coordinate: Coordinate,
    /// Central-difference half step.
    #[arg(long, default_value_t = 1e-4)]
    pub fd_step: f64,
    /// Largest relative error that passes.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[command(flatten)]
    pub tracking: TrackingFlags,
    /// Gradient table (voxel, coefficient, analytic, numeric, rel_err).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> anyhow::Result<bool> {
    let start = Instant::now();
    let fod = load_volume(&a.fod)?;
    let mask = load_mask(&a.mask)?;
    let n = a.dir.iter().map(|c| c * c).sum::<f64>().sqrt();
    if n == 0.0 {
        anyhow::bail!("--dir must be a nonzero vector");
    }
    let dir = a.dir.map(|c| c / n);
    let config = GradcheckConfig {
        fd_step: a.fd_step,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let report = gradcheck(
        &fod,
        &mask,
        a.seed,
        dir,
        a.coordinate.step,
        a.coordinate.axis,
        &a.tracking.params(0),
        &NewtonConstants::default(),
        &config,
    )
    .context("gradient check failed")?;
    save_gradients(&a.out, &report.entries)?;

    if !report.excluded.is_empty() {
        writeln!(
            err,
            "warning: {} coefficients excluded because perturbing them changed the termination or branch pattern",
            report.excluded.len()
        )?;
    }
    writeln!(out, "streamline: {} points ({})", report.valid_length, report.reason)?;
    writeln!(out, "partials checked: {}", report.entries.len())?;
    writeln!(out, "excluded: {}", report.excluded.len())?;
    writeln!(out, "tape: {} nodes, {} bytes", report.tape_nodes, report.tape_bytes)?;
    writeln!(out, "forward: {:.3} s", report.forward_time.as_secs_f64())?;
    writeln!(out, "backward: {:.3} s", report.backward_time.as_secs_f64())?;
    writeln!(out, "max rel_err: {:.3e}", report.max_rel_err)?;
    writeln!(out, "wall time: {:.3} s", start.elapsed().as_secs_f64())?;
    let ok = report.passed(a.tolerance);
    writeln!(out, "{}", if ok { "PASS" } else { "FAIL" })?;
    Ok(ok)
}
