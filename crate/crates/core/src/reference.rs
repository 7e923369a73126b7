//! Early-terminating scalar versions of peak finding and tracking.
//!
//! These follow the classic single-direction formulation: Newton iteration
//! returns as soon as a step is shorter than the tolerance, gives up with
//! NaN after the iteration budget, and a streamline is grown one point at a
//! time until the first stopping criterion fires. They exist to check the
//! batched versions, which must agree with them bit for bit.

use crate::error::Result;
use crate::peak::{check_unit, step, NewtonConstants};
use crate::propagate::{TerminationReason, TrackingParams};
use crate::sh::ShBasis;
use crate::volume::{BinaryMask, FodVolume};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePeak {
    /// NaN when not converged.
    pub direction: Vec3,
    pub amplitude: f64,
    pub converged: bool,
}

const NAN3: Vec3 = [f64::NAN; 3];

pub(crate) fn sequential_peak(basis: &ShBasis, coeffs: &[f64], init: Vec3, k: &NewtonConstants) -> ReferencePeak {
    let mut u = init;
    for _ in 0..k.max_iterations {
        let s = step(basis, coeffs, u, k);
        if !s.finite {
            break;
        }
        if s.dt < k.angle_tolerance {
            return ReferencePeak {
                direction: u,
                amplitude: s.amplitude,
                converged: true,
            };
        }
        u = s.direction;
    }
    ReferencePeak {
        direction: NAN3,
        amplitude: f64::NAN,
        converged: false,
    }
}

/// Single-direction Newton search with early return.
pub fn find_peaks_sequential_reference(
    volume: &FodVolume,
    position: Vec3,
    init_direction: Vec3,
    constants: &NewtonConstants,
) -> Result<ReferencePeak> {
    constants.validate()?;
    check_unit(init_direction)?;
    let c = volume.interpolate_coeffs(position)?;
    Ok(sequential_peak(volume.basis(), c.values(), init_direction, constants))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStreamline {
    pub points: Vec<Vec3>,
    pub reason: TerminationReason,
}

fn peak_at(volume: &FodVolume, x: Vec3, d: Vec3, k: &NewtonConstants) -> ReferencePeak {
    match volume.interpolate_coeffs(x) {
        Ok(c) => sequential_peak(volume.basis(), c.values(), d, k),
        Err(_) => ReferencePeak {
            direction: NAN3,
            amplitude: f64::NAN,
            converged: false,
        },
    }
}

fn angle_between(a: Vec3, b: Vec3) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

/// One streamline grown point by point, stopping at the first criterion.
///
/// A failed peak search yields a NaN amplitude, which stops the streamline
/// under the amplitude criterion at the next point.
pub fn track_sequential_reference(
    volume: &FodVolume,
    mask: &BinaryMask,
    seed: Vec3,
    init_direction: Vec3,
    params: &TrackingParams,
    constants: &NewtonConstants,
) -> Result<ReferenceStreamline> {
    params.validate()?;
    constants.validate()?;
    check_unit(init_direction)?;
    let stop = |reason| {
        Ok(ReferenceStreamline {
            points: vec![seed],
            reason,
        })
    };
    if !volume.contains_world(seed) {
        return stop(TerminationReason::ExitImage);
    }
    let p = peak_at(volume, seed, init_direction, constants);
    if !(p.amplitude > params.amplitude_threshold) {
        return stop(TerminationReason::SeedRejected);
    }
    let (mut d, mut a) = (p.direction, p.amplitude);
    let mut x = seed;
    let mut d_prev: Option<Vec3> = None;
    let mut points = vec![seed];
    let reason = loop {
        if points.len() >= params.max_points {
            break TerminationReason::LengthExceed;
        }
        if !volume.contains_world(x) {
            break TerminationReason::ExitImage;
        }
        if !(a >= params.amplitude_threshold) {
            break TerminationReason::Model;
        }
        if let Some(prev) = d_prev {
            if angle_between(prev, d) > params.angle_threshold {
                break TerminationReason::HighCurvature;
            }
        }
        let s = params.step_size;
        let next = [x[0] + d[0] * s, x[1] + d[1] * s, x[2] + d[2] * s];
        if !mask.contains(next) {
            break TerminationReason::ExitMask;
        }
        points.push(next);
        x = next;
        d_prev = Some(d);
        if volume.contains_world(x) {
            let p = peak_at(volume, x, d, constants);
            d = p.direction;
            a = p.amplitude;
        }
    };
    Ok(ReferenceStreamline { points, reason })
}
