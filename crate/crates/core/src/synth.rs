//! Analytic FOD fields with known peak directions, used as test fixtures.
//!
//! A lobe is the band-limited projection of an axial delta function,
//! rescaled so its maximum (at the axis) is exactly the requested amplitude.
//! At `lmax = 8` the main lobe has a half-width near 13.5 degrees and the
//! strongest side ring peaks around 0.08 of the main amplitude.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sh::{cartesian_to_angles, num_coefficients, ShBasis};
use crate::volume::{Affine, BinaryMask, FodVolume};
use crate::Vec3;

pub(crate) fn normalize(v: Vec3) -> Result<Vec3> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidDirection(v));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Coefficients of a unit-peak lobe along `axis` (normalized internally).
pub fn lobe_coefficients(lmax: usize, axis: Vec3) -> Result<Vec<f64>> {
    let a = cartesian_to_angles(normalize(axis)?)?;
    let basis = ShBasis::new(lmax)?;
    let total: f64 = (0..=lmax).step_by(2).map(|l| (2 * l + 1) as f64).sum();
    let scale = 4.0 * PI / total;
    Ok(basis.eval(a.el, a.az).into_iter().map(|y| y * scale).collect())
}

/// Coefficients of a constant function with the given amplitude.
pub fn isotropic_coefficients(lmax: usize, amplitude: f64) -> Result<Vec<f64>> {
    let mut c = vec![0.0; num_coefficients(lmax)?];
    c[0] = amplitude * (4.0 * PI).sqrt();
    Ok(c)
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Ok(u) = normalize(v) {
            return u;
        }
    }
}

/// A random band-limited FOD: one to three lobes with weights in
/// `[0.3, 1)` plus Gaussian noise of standard deviation `noise` on every
/// coefficient above order 0.
pub fn random_coefficients(lmax: usize, noise: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut c = vec![0.0; num_coefficients(lmax)?];
    for _ in 0..rng.random_range(1..=3) {
        let w = rng.random_range(0.3..1.0);
        for (ci, li) in c.iter_mut().zip(lobe_coefficients(lmax, random_unit(rng))?) {
            *ci += w * li;
        }
    }
    for ci in &mut c[1..] {
        *ci += noise * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(c)
}

/// Volume of independent [`random_coefficients`] voxels on a 1 mm grid.
pub fn random_volume(dims: [usize; 3], lmax: usize, noise: f64, rng_seed: u64) -> Result<FodVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut err = None;
    let v = FodVolume::from_fn(dims, lmax, [1.0; 3], Affine::identity(), |_| {
        random_coefficients(lmax, noise, &mut rng).unwrap_or_else(|e| {
            err = Some(e);
            vec![0.0; num_coefficients(lmax).unwrap_or(1)]
        })
    });
    match err {
        Some(e) => Err(e),
        None => v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Isotropic,
    SingleLobe,
    BentLobe,
    TwoCrossing,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(Self::Isotropic),
            "single-lobe" => Ok(Self::SingleLobe),
            "bent-lobe" => Ok(Self::BentLobe),
            "two-crossing" => Ok(Self::TwoCrossing),
            other => Err(Error::InvalidParameter(format!(
                "unknown field kind '{other}' (expected isotropic, single-lobe, bent-lobe or two-crossing)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Isotropic => "isotropic",
            Self::SingleLobe => "single-lobe",
            Self::BentLobe => "bent-lobe",
            Self::TwoCrossing => "two-crossing",
        })
    }
}

/// Description of a synthetic field.
///
/// The amplitude at voxel column `x` is `amplitude - amplitude_slope * x`.
/// For [`SynthKind::BentLobe`] the axis is rotated about +z by
/// `bend_rate * max(0, x - bend_start)` radians.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub dims: [usize; 3],
    pub lmax: usize,
    pub axis: Vec3,
    pub second_axis: Vec3,
    pub voxel_size: Vec3,
    pub origin: Vec3,
    pub amplitude: f64,
    pub amplitude_slope: f64,
    pub bend_start: usize,
    pub bend_rate: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            kind: SynthKind::SingleLobe,
            dims: [16, 16, 16],
            lmax: 8,
            axis: [0.0, 0.0, 1.0],
            second_axis: [1.0, 0.0, 0.0],
            voxel_size: [1.0; 3],
            origin: [0.0; 3],
            amplitude: 1.0,
            amplitude_slope: 0.0,
            bend_start: 8,
            bend_rate: 0.3,
        }
    }
}

fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

impl SynthParams {
    /// Peak axis of the (first) lobe at voxel column `x`.
    pub fn axis_at(&self, x: usize) -> Vec3 {
        match self.kind {
            SynthKind::BentLobe => {
                let steps = x.saturating_sub(self.bend_start) as f64;
                rotate_z(self.axis, self.bend_rate * steps)
            }
            _ => self.axis,
        }
    }

    pub fn amplitude_at(&self, x: usize) -> f64 {
        self.amplitude - self.amplitude_slope * x as f64
    }

    pub fn affine(&self) -> Result<Affine> {
        Affine::scaling(self.voxel_size, self.origin)
    }

    pub fn volume(&self) -> Result<FodVolume> {
        let k = num_coefficients(self.lmax)?;
        let affine = self.affine()?;
        // coefficients depend only on the x column
        let mut columns = Vec::with_capacity(self.dims[0]);
        for x in 0..self.dims[0] {
            let a = self.amplitude_at(x);
            let c = match self.kind {
                SynthKind::Isotropic => isotropic_coefficients(self.lmax, a)?,
                SynthKind::SingleLobe | SynthKind::BentLobe => lobe_coefficients(self.lmax, self.axis_at(x))?
                    .into_iter()
                    .map(|v| v * a)
                    .collect(),
                SynthKind::TwoCrossing => {
                    let p = lobe_coefficients(self.lmax, self.axis)?;
                    let q = lobe_coefficients(self.lmax, self.second_axis)?;
                    p.iter().zip(&q).map(|(u, v)| (u + v) * a).collect()
                }
            };
            debug_assert_eq!(c.len(), k);
            columns.push(c);
        }
        FodVolume::from_fn(self.dims, self.lmax, self.voxel_size, affine, |v| columns[v[0]].clone())
    }

    /// A mask covering the whole grid.
    pub fn full_mask(&self) -> Result<BinaryMask> {
        Ok(BinaryMask::from_fn(self.dims, self.affine()?, |_| true))
    }

    /// The grid without its outermost voxel layer, so that streamlines
    /// leave the mask before they can leave the image.
    pub fn interior_mask(&self) -> Result<BinaryMask> {
        let d = self.dims;
        Ok(BinaryMask::from_fn(d, self.affine()?, |v| {
            (0..3).all(|i| v[i] >= 1 && v[i] + 1 < d[i])
        }))
    }
}
