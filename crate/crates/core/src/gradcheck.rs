//! Finite-difference verification of streamline coordinate gradients.
//!
//! One streamline is tracked on a tape and a single coordinate is
//! differentiated. Each coefficient with a nonzero partial is then perturbed
//! by `±h` and the streamline re-tracked without a tape. The gradient is
//! defined with the branch pattern held fixed, so a perturbation that
//! changes the pattern (termination step, Newton freeze iteration, step
//! clamping, interpolation cell) is excluded and reported rather than
//! compared.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::autodiff::{backward, CoeffKey, OutputId, Tape};
use crate::error::{Error, Result};
use crate::peak::NewtonConstants;
use crate::propagate::{propagate_single_taped, SeedBatch, TerminationReason, TrackingParams};
use crate::volume::{BinaryMask, FodVolume};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference half step in coefficient units.
    pub fd_step: f64,
    /// Denominator floor in the relative error.
    pub rel_floor: f64,
    /// Largest relative error that passes.
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            rel_floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckEntry {
    pub key: CoeffKey,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub output: OutputId,
    pub valid_length: usize,
    pub reason: TerminationReason,
    pub entries: Vec<GradcheckEntry>,
    /// Coefficients whose perturbation changed the branch pattern.
    pub excluded: Vec<CoeffKey>,
    pub max_rel_err: f64,
    pub tape_nodes: usize,
    pub tape_bytes: usize,
    pub forward_time: Duration,
    pub backward_time: Duration,
    pub check_time: Duration,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Tracked coordinate `(step, axis)` and the streamline's pattern signature,
/// or `None` if the streamline no longer reaches `step`.
fn probe(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
    out: OutputId,
) -> Result<(Option<f64>, u64)> {
    let b = if params.bidirectional {
        crate::propagate::propagate_bidirectional(volume, mask, seeds, params, constants)?
    } else {
        crate::propagate::propagate_batch(volume, mask, seeds, params, constants)?
    };
    let v = (out.step < b.valid_lengths[0]).then(|| b.valid(0)[out.step][out.axis]);
    Ok((v, b.signatures[0]))
}

/// Checks the gradient of coordinate `axis` of point `step` of the
/// streamline from `seed` along `direction`.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck(
    volume: &FodVolume,
    mask: &BinaryMask,
    seed: Vec3,
    direction: Vec3,
    step: usize,
    axis: usize,
    params: &TrackingParams,
    constants: &NewtonConstants,
    config: &GradcheckConfig,
) -> Result<GradcheckReport> {
    if axis > 2 {
        return Err(Error::InvalidParameter(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    if !(config.fd_step > 0.0 && config.fd_step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {}",
            config.fd_step
        )));
    }
    let output = OutputId {
        streamline: 0,
        step,
        axis,
    };

    let t0 = Instant::now();
    let tape = Tape::new();
    let prop = propagate_single_taped(&tape, volume, mask, seed, direction, params, constants)?;
    let forward_time = t0.elapsed();
    let valid_length = prop.batch.valid_lengths[0];
    let reason = prop.batch.termination_reasons[0];
    let signature = prop.batch.signatures[0];
    if step >= valid_length {
        return Err(Error::InvalidParameter(format!(
            "step {step} is beyond the streamline's {valid_length} valid points ({reason})"
        )));
    }

    let t1 = Instant::now();
    let mut grad = backward(&tape, prop.points[0][step][axis])?;
    grad.output = Some(output);
    let backward_time = t1.elapsed();
    let (tape_nodes, tape_bytes) = (tape.len(), tape.memory_bytes());
    drop(prop);

    let t2 = Instant::now();
    let seeds = SeedBatch::new(vec![seed], vec![direction])?;
    let h = config.fd_step;
    let keys: Vec<(CoeffKey, f64)> = grad.partials.iter().map(|(k, v)| (*k, *v)).collect();
    let checked = keys
        .par_iter()
        .map_init(
            || volume.clone(),
            |vol, &(key, analytic)| -> Result<std::result::Result<GradcheckEntry, CoeffKey>> {
                let orig = vol.coefficient(key);
                *vol.coefficient_mut(key) = orig + h;
                let plus = probe(vol, mask, &seeds, params, constants, output);
                *vol.coefficient_mut(key) = orig - h;
                let minus = probe(vol, mask, &seeds, params, constants, output);
                *vol.coefficient_mut(key) = orig;
                match (plus?, minus?) {
                    ((Some(fp), sp), (Some(fm), sm)) if sp == signature && sm == signature => {
                        let numeric = (fp - fm) / (2.0 * h);
                        Ok(Ok(GradcheckEntry {
                            key,
                            analytic,
                            numeric,
                            rel_err: relative_error(analytic, numeric, config.rel_floor),
                        }))
                    }
                    _ => Ok(Err(key)),
                }
            },
        )
        .collect::<Result<Vec<_>>>()?;
    let check_time = t2.elapsed();

    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for c in checked {
        match c {
            Ok(e) => entries.push(e),
            Err(k) => excluded.push(k),
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        output,
        valid_length,
        reason,
        entries,
        excluded,
        max_rel_err,
        tape_nodes,
        tape_bytes,
        forward_time,
        backward_time,
        check_time,
    })
}
