//! Value parsers and flags shared between subcommands.

use clap::Args;
use difftrack::{default_max_points, TrackingParams};

fn parse_list<T: std::str::FromStr, const N: usize>(s: &str, what: &str) -> Result<[T; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated {what}, got {s:?}"));
    }
    let mut out = Vec::with_capacity(N);
    for p in parts {
        out.push(p.parse().map_err(|_| format!("{p:?} is not a valid {what}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

/// `"x,y,z"` with finite components.
pub fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let v: [f64; 3] = parse_list(s, "numbers")?;
    if v.iter().any(|c| !c.is_finite()) {
        return Err(format!("{s:?} has non-finite components"));
    }
    Ok(v)
}

/// `"nx,ny,nz"` with positive sizes.
pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let d: [usize; 3] = parse_list(s, "sizes")?;
    if d.contains(&0) {
        return Err(format!("grid sizes must be positive, got {s:?}"));
    }
    Ok(d)
}

/// A tracked coordinate: point index and axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub step: usize,
    pub axis: usize,
}

/// `"t,axis"` where axis is `x`, `y`, `z` or `0`, `1`, `2`.
pub fn parse_coordinate(s: &str) -> Result<Coordinate, String> {
    let (t, a) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"t,axis\", got {s:?}"))?;
    let step = t.trim().parse().map_err(|_| format!("{t:?} is not a point index"))?;
    let axis = match a.trim() {
        "x" | "0" => 0,
        "y" | "1" => 1,
        "z" | "2" => 2,
        other => return Err(format!("axis must be x, y or z, got {other:?}")),
    };
    Ok(Coordinate { step, axis })
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite number, got {s:?}")),
    }
}

/// Tracking parameters in millimetres and degrees.
#[derive(Debug, Clone, Args)]
pub struct TrackingFlags {
    /// Step size in mm.
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub step: f64,
    /// FOD amplitude below which tracking stops.
    #[arg(long, default_value_t = 0.1, value_parser = finite)]
    pub cutoff: f64,
    /// Largest angle between consecutive steps, in degrees.
    #[arg(long, default_value_t = 45.0, value_parser = positive)]
    pub angle: f64,
    /// Shortest streamline kept, in mm.
    #[arg(long, default_value_t = 50.0, value_parser = non_negative)]
    pub minlen: f64,
    /// Longest streamline, in mm.
    #[arg(long, default_value_t = 100.0, value_parser = positive)]
    pub maxlen: f64,
    /// Track in both directions from each seed.
    #[arg(long)]
    pub bidirectional: bool,
}

impl TrackingFlags {
    pub fn params(&self, rng_seed: u64) -> TrackingParams {
        TrackingParams {
            step_size: self.step,
            amplitude_threshold: self.cutoff,
            angle_threshold: self.angle.to_radians(),
            max_points: default_max_points(self.step, self.maxlen),
            min_length: self.minlen,
            max_length: self.maxlen,
            bidirectional: self.bidirectional,
            rng_seed,
        }
    }
}
