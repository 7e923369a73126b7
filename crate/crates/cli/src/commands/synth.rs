use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use difftrack::io::{save_mask, save_volume};
use difftrack::{SynthKind, SynthParams};

use crate::args::{parse_dims, parse_vec3};

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: difftrack::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// isotropic, single-lobe, bent-lobe or two-crossing.
    #[arg(long, value_parser = parse_kind)]
    pub kind: SynthKind,
    /// Grid size "nx,ny,nz".
    #[arg(long, value_parser = parse_dims, default_value = "16,16,16")]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 8)]
    pub lmax: usize,
    /// Lobe axis "x,y,z".
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "0,0,1")]
    pub axis: [f64; 3],
    /// Second lobe axis for two-crossing.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "1,0,0")]
    pub second_axis: [f64; 3],
    /// Voxel size "sx,sy,sz" in mm.
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    pub voxel_size: [f64; 3],
    /// World position of voxel (0,0,0) in mm.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "0,0,0")]
    pub origin: [f64; 3],
    /// Peak amplitude at x = 0.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub amplitude: f64,
    /// Amplitude decrease per voxel along x.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub amplitude_slope: f64,
    /// First voxel column where the bent lobe starts turning.
    #[arg(long, default_value_t = 8)]
    pub bend_start: usize,
    /// Bend rotation about z per voxel column, in degrees.
    #[arg(long, default_value_t = 0.3f64.to_degrees(), allow_hyphen_values = true)]
    pub bend_rate: f64,
    /// Output FOD image.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a mask of the grid minus its outermost voxel layer.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

pub fn run(a: &SynthArgs, out: &mut dyn Write) -> anyhow::Result<bool> {
    let sp = SynthParams {
        kind: a.kind,
        dims: a.dims,
        lmax: a.lmax,
        axis: a.axis,
        second_axis: a.second_axis,
        voxel_size: a.voxel_size,
        origin: a.origin,
        amplitude: a.amplitude,
        amplitude_slope: a.amplitude_slope,
        bend_start: a.bend_start,
        bend_rate: a.bend_rate.to_radians(),
    };
    let v = sp.volume()?;
    save_volume(&a.out, &v)?;
    if let Some(p) = &a.mask_out {
        save_mask(p, &sp.interior_mask()?)?;
    }
    writeln!(
        out,
        "wrote {} field {}x{}x{}, {} coefficients per voxel",
        a.kind,
        a.dims[0],
        a.dims[1],
        a.dims[2],
        v.num_coefficients()
    )?;
    Ok(true)
}
