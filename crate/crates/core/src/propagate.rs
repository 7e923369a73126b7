//! Batched fixed-step streamline propagation.
//!
//! A batch advances in lockstep over `t = 0 .. max_points - 1`. At each step
//! every active streamline is tested, in order, for leaving the image domain,
//! a peak amplitude below threshold and excessive curvature; survivors take
//! a step along their current peak direction, refine the peak at the new
//! position starting from that direction, and are deactivated if the new
//! point leaves the tracking mask. Only then is the new point written.
//! Deactivated streamlines keep their slots; everything past their valid
//! length stays exactly zero.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{Recorder, Scalar, Tape, Untaped};
use crate::error::{Error, Result};
use crate::metrics::Streamline;
use crate::peak::{cell_event, check_unit, fold, refine, NewtonConstants};
use crate::volume::{BinaryMask, FodVolume};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingParams {
    /// Millimetres per step.
    pub step_size: f64,
    pub amplitude_threshold: f64,
    /// Radians between consecutive directions.
    pub angle_threshold: f64,
    /// Upper bound on points per direction, seed included.
    pub max_points: usize,
    /// Millimetres, applied by [`crop_to_valid`].
    pub min_length: f64,
    pub max_length: f64,
    pub bidirectional: bool,
    pub rng_seed: u64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self::with_lengths(1.0, 50.0, 100.0)
    }
}

impl TrackingParams {
    /// Defaults with `max_points = ceil(max_length / step_size) + 1`.
    pub fn with_lengths(step_size: f64, min_length: f64, max_length: f64) -> Self {
        Self {
            step_size,
            amplitude_threshold: 0.1,
            angle_threshold: 45f64.to_radians(),
            max_points: default_max_points(step_size, max_length),
            min_length,
            max_length,
            bidirectional: false,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if self.max_points < 2 {
            return bad(format!("max_points must be at least 2, got {}", self.max_points));
        }
        if !(self.min_length >= 0.0 && self.min_length <= self.max_length) || !self.max_length.is_finite() {
            return bad(format!(
                "need 0 <= min_length <= max_length, got {} and {}",
                self.min_length, self.max_length
            ));
        }
        if !(self.angle_threshold > 0.0 && self.angle_threshold < std::f64::consts::PI) {
            return bad(format!(
                "angle threshold must lie in (0, pi), got {}",
                self.angle_threshold
            ));
        }
        if !self.amplitude_threshold.is_finite() {
            return bad("amplitude threshold must be finite".into());
        }
        Ok(())
    }
}

pub fn default_max_points(step_size: f64, max_length: f64) -> usize {
    (max_length / step_size).ceil().max(1.0) as usize + 1
}

/// Seed positions and initial directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedBatch {
    pub positions: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    /// Seeds with a flag cleared are passed through as rejected.
    pub accepted: Vec<bool>,
}

impl SeedBatch {
    /// A batch with every seed flagged for tracking.
    pub fn new(positions: Vec<Vec3>, directions: Vec<Vec3>) -> Result<Self> {
        if positions.len() != directions.len() {
            return Err(Error::DimensionMismatch {
                expected: positions.len(),
                actual: directions.len(),
            });
        }
        if let Some(p) = positions.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("seed position {p:?} is not finite")));
        }
        for d in &directions {
            check_unit(*d)?;
        }
        let accepted = vec![true; positions.len()];
        Ok(Self {
            positions,
            directions,
            accepted,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> SeedBatch {
        SeedBatch {
            positions: self.positions[range.clone()].to_vec(),
            directions: self.directions[range.clone()].to_vec(),
            accepted: self.accepted[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TerminationReason {
    ExitImage,
    Model,
    HighCurvature,
    ExitMask,
    LengthExceed,
    SeedRejected,
}

impl TerminationReason {
    pub const ALL: [TerminationReason; 6] = [
        Self::ExitImage,
        Self::Model,
        Self::HighCurvature,
        Self::ExitMask,
        Self::LengthExceed,
        Self::SeedRejected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ExitImage => "ExitImage",
            Self::Model => "Model",
            Self::HighCurvature => "HighCurvature",
            Self::ExitMask => "ExitMask",
            Self::LengthExceed => "LengthExceed",
            Self::SeedRejected => "SeedRejected",
        }
    }
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Zero-padded streamline coordinates with per-streamline bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamlineBatch {
    /// Row-major `N x stride` points.
    pub points: Vec<Vec3>,
    pub stride: usize,
    pub valid_lengths: Vec<usize>,
    pub termination_reasons: Vec<TerminationReason>,
    /// Index of the seed within each streamline (nonzero only for
    /// bidirectional batches).
    pub seed_indices: Vec<usize>,
    /// Reason the backward half stopped, for bidirectional batches.
    pub backward_reasons: Option<Vec<TerminationReason>>,
    /// Branch-pattern hash per streamline: equal values mean the same
    /// termination step and reason and the same Newton branch history.
    pub signatures: Vec<u64>,
}

impl StreamlineBatch {
    pub fn len(&self) -> usize {
        self.valid_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_lengths.is_empty()
    }

    /// All `stride` rows of streamline `i`, padding included.
    pub fn row(&self, i: usize) -> &[Vec3] {
        &self.points[i * self.stride..(i + 1) * self.stride]
    }

    /// The valid points of streamline `i`.
    pub fn valid(&self, i: usize) -> &[Vec3] {
        &self.row(i)[..self.valid_lengths[i]]
    }

    /// Counts per reason, in [`TerminationReason::ALL`] order.
    pub fn reason_counts(&self) -> Vec<(TerminationReason, usize)> {
        TerminationReason::ALL
            .iter()
            .map(|&r| (r, self.termination_reasons.iter().filter(|&&x| x == r).count()))
            .collect()
    }

    fn concat(parts: Vec<StreamlineBatch>) -> StreamlineBatch {
        let stride = parts.first().map_or(0, |p| p.stride);
        let backward = parts.first().is_some_and(|p| p.backward_reasons.is_some());
        let mut out = StreamlineBatch {
            points: Vec::new(),
            stride,
            valid_lengths: Vec::new(),
            termination_reasons: Vec::new(),
            seed_indices: Vec::new(),
            backward_reasons: backward.then(Vec::new),
            signatures: Vec::new(),
        };
        for p in parts {
            out.points.extend(p.points);
            out.valid_lengths.extend(p.valid_lengths);
            out.termination_reasons.extend(p.termination_reasons);
            out.seed_indices.extend(p.seed_indices);
            if let (Some(o), Some(b)) = (out.backward_reasons.as_mut(), p.backward_reasons) {
                o.extend(b);
            }
            out.signatures.extend(p.signatures);
        }
        out
    }
}

/// Seed positions drawn uniformly from the set voxels of `mask`.
pub fn sample_seeds(mask: &BinaryMask, n: usize, rng_seed: u64) -> Result<Vec<Vec3>> {
    let voxels = mask.set_voxels();
    if voxels.is_empty() {
        return Err(Error::InvalidInput("seed mask has no set voxels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..n)
        .map(|_| {
            let v = voxels[rng.random_range(0..voxels.len())];
            let p: Vec3 = std::array::from_fn(|i| v[i] as f64 + rng.random_range(-0.5..0.5));
            mask.affine().voxel_to_world(p)
        })
        .collect())
}

/// Directions uniform on the sphere (normalized Gaussian triples).
pub fn sample_directions(n: usize, rng_seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(1);
    (0..n)
        .map(|_| loop {
            let v: Vec3 = std::array::from_fn(|_| rng.sample(StandardNormal));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 1e-12 {
                break [v[0] / norm, v[1] / norm, v[2] / norm];
            }
        })
        .collect()
}

/// Result of seed acceptance for one seed.
#[derive(Debug, Clone, Copy)]
struct SeedState<T> {
    position: [T; 3],
    direction: [T; 3],
    amplitude: T,
    rejected: Option<TerminationReason>,
    signature: u64,
}

fn value3<T: Scalar>(v: [T; 3]) -> Vec3 {
    [v[0].value(), v[1].value(), v[2].value()]
}

fn angle_between(a: Vec3, b: Vec3) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

fn refine_at<R: Recorder>(
    volume: &FodVolume,
    rec: &R,
    x: [R::Value; 3],
    d: [R::Value; 3],
    k: &NewtonConstants,
) -> Result<([R::Value; 3], R::Value, u64)> {
    let (c, base) = volume.interpolate(rec, x)?;
    let e = refine(volume.basis(), &c, d, k);
    Ok((e.direction, e.amplitude, fold(e.signature, cell_event(base))))
}

fn accept<R: Recorder>(
    volume: &FodVolume,
    rec: &R,
    seeds: &SeedBatch,
    params: &TrackingParams,
    k: &NewtonConstants,
) -> Result<Vec<SeedState<R::Value>>> {
    let mut out = Vec::with_capacity(seeds.len());
    for i in 0..seeds.len() {
        let position = seeds.positions[i].map(|c| rec.input(c));
        let direction = seeds.directions[i].map(|c| rec.input(c));
        let mut s = SeedState {
            position,
            direction,
            amplitude: R::Value::constant(0.0),
            rejected: None,
            signature: 0,
        };
        if !volume.contains_world(seeds.positions[i]) {
            s.rejected = Some(TerminationReason::ExitImage);
        } else if !seeds.accepted[i] {
            s.rejected = Some(TerminationReason::SeedRejected);
        } else {
            let (d, a, sig) = refine_at(volume, rec, position, direction, k)?;
            s.direction = d;
            s.amplitude = a;
            s.signature = sig;
            if !(a.value() > params.amplitude_threshold) {
                s.rejected = Some(TerminationReason::SeedRejected);
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Refines seed directions and flags seeds whose peak amplitude exceeds the
/// threshold. Rejected seeds keep their original direction.
pub fn accept_seeds(
    volume: &FodVolume,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
) -> Result<SeedBatch> {
    params.validate()?;
    constants.validate()?;
    let states = accept(volume, &Untaped, seeds, params, constants)?;
    let mut out = seeds.clone();
    for (i, s) in states.iter().enumerate() {
        out.accepted[i] = s.rejected.is_none();
        if s.rejected.is_none() {
            out.directions[i] = s.direction;
        }
    }
    Ok(out)
}

/// One direction's worth of tracking for one streamline.
#[derive(Debug, Clone)]
struct Track<T> {
    points: Vec<[T; 3]>,
    reason: TerminationReason,
    signature: u64,
}

fn check_inputs(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    k: &NewtonConstants,
) -> Result<()> {
    params.validate()?;
    k.validate()?;
    mask.check_compatible(volume)?;
    if seeds.accepted.len() != seeds.len() || seeds.directions.len() != seeds.len() {
        return Err(Error::DimensionMismatch {
            expected: seeds.len(),
            actual: seeds.accepted.len().min(seeds.directions.len()),
        });
    }
    for d in &seeds.directions {
        check_unit(*d)?;
    }
    Ok(())
}

/// The lockstep loop, starting from refined seed states.
fn track<R: Recorder>(
    volume: &FodVolume,
    mask: &BinaryMask,
    rec: &R,
    starts: &[([R::Value; 3], [R::Value; 3], R::Value)],
    params: &TrackingParams,
    k: &NewtonConstants,
) -> Result<Vec<Track<R::Value>>> {
    struct State<T> {
        x: [T; 3],
        d: [T; 3],
        d_prev: Vec3,
        a: T,
        active: bool,
        track: Track<T>,
    }
    let mut states: Vec<State<R::Value>> = starts
        .iter()
        .map(|&(x, d, a)| State {
            x,
            d,
            d_prev: value3(d),
            a,
            active: true,
            track: Track {
                points: vec![x],
                reason: TerminationReason::LengthExceed,
                signature: 0,
            },
        })
        .collect();
    let s = params.step_size;
    for t in 0..params.max_points - 1 {
        for st in states.iter_mut().filter(|st| st.active) {
            let reason = if !volume.contains_world(value3(st.x)) {
                Some(TerminationReason::ExitImage)
            } else if !(st.a.value() >= params.amplitude_threshold) {
                Some(TerminationReason::Model)
            } else if t > 0 && angle_between(st.d_prev, value3(st.d)) > params.angle_threshold {
                Some(TerminationReason::HighCurvature)
            } else {
                None
            };
            if let Some(r) = reason {
                st.active = false;
                st.track.reason = r;
                continue;
            }
            let x_next = [st.x[0] + st.d[0] * s, st.x[1] + st.d[1] * s, st.x[2] + st.d[2] * s];
            let xv = value3(x_next);
            // out-of-domain points are caught at the next step
            let peak = if volume.contains_world(xv) {
                Some(refine_at(volume, rec, x_next, st.d, k)?)
            } else {
                None
            };
            if !mask.contains(xv) {
                st.active = false;
                st.track.reason = TerminationReason::ExitMask;
                continue;
            }
            st.track.points.push(x_next);
            st.d_prev = value3(st.d);
            st.x = x_next;
            if let Some((d, a, sig)) = peak {
                st.d = d;
                st.a = a;
                st.track.signature = fold(st.track.signature, sig);
            }
        }
    }
    Ok(states
        .into_iter()
        .map(|mut st| {
            let len = st.track.points.len() as u64;
            st.track.signature = fold(fold(st.track.signature, len), st.track.reason as u64);
            st.track
        })
        .collect())
}

/// Taped or untaped tracking output: the padded batch plus the valid points
/// as recorder values (tape nodes when recording).
pub struct Propagation<T> {
    pub batch: StreamlineBatch,
    pub points: Vec<Vec<[T; 3]>>,
}

fn assemble<T: Scalar>(
    seeds: &[SeedState<T>],
    forward: Vec<Option<Track<T>>>,
    backward: Option<Vec<Option<Track<T>>>>,
    max_points: usize,
) -> Propagation<T> {
    let bidirectional = backward.is_some();
    let stride = if bidirectional { 2 * max_points - 1 } else { max_points };
    let n = seeds.len();
    let mut batch = StreamlineBatch {
        points: vec![[0.0; 3]; n * stride],
        stride,
        valid_lengths: Vec::with_capacity(n),
        termination_reasons: Vec::with_capacity(n),
        seed_indices: Vec::with_capacity(n),
        backward_reasons: bidirectional.then(|| Vec::with_capacity(n)),
        signatures: Vec::with_capacity(n),
    };
    let mut taped = Vec::with_capacity(n);
    let mut backward = backward.map(|b| b.into_iter());
    for (i, (seed, fwd)) in seeds.iter().zip(forward).enumerate() {
        let bwd = backward.as_mut().and_then(|b| b.next().flatten());
        let (pts, reason, back_reason, seed_index, sig) = match (seed.rejected, fwd) {
            (None, Some(f)) => match bwd {
                None => (f.points, f.reason, f.reason, 0, fold(seed.signature, f.signature)),
                Some(b) => {
                    let seed_index = b.points.len() - 1;
                    let mut pts: Vec<[T; 3]> = b.points[1..].iter().rev().copied().collect();
                    pts.extend(f.points);
                    let sig = fold(fold(seed.signature, f.signature), b.signature);
                    (pts, f.reason, b.reason, seed_index, sig)
                }
            },
            (r, _) => {
                let r = r.unwrap_or(TerminationReason::SeedRejected);
                (vec![seed.position], r, r, 0, fold(seed.signature, r as u64))
            }
        };
        assert!(pts.len() <= stride, "combined streamline exceeds the padded length");
        for (t, p) in pts.iter().enumerate() {
            batch.points[i * stride + t] = value3(*p);
        }
        batch.valid_lengths.push(pts.len());
        batch.termination_reasons.push(reason);
        batch.seed_indices.push(seed_index);
        if let Some(b) = batch.backward_reasons.as_mut() {
            b.push(back_reason);
        }
        batch.signatures.push(sig);
        taped.push(pts);
    }
    Propagation { batch, points: taped }
}

fn propagate_impl<R: Recorder>(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    k: &NewtonConstants,
    rec: &R,
    bidirectional: bool,
) -> Result<Propagation<R::Value>> {
    check_inputs(volume, mask, seeds, params, k)?;
    let states = accept(volume, rec, seeds, params, k)?;
    let live: Vec<usize> = (0..states.len()).filter(|&i| states[i].rejected.is_none()).collect();
    let starts: Vec<_> = live
        .iter()
        .map(|&i| (states[i].position, states[i].direction, states[i].amplitude))
        .collect();
    let scatter = |tracks: Vec<Track<R::Value>>| {
        let mut out: Vec<Option<Track<R::Value>>> = vec![None; states.len()];
        for (&i, t) in live.iter().zip(tracks) {
            out[i] = Some(t);
        }
        out
    };
    let forward = scatter(track(volume, mask, rec, &starts, params, k)?);
    let backward = if bidirectional {
        let reversed: Vec<_> = starts.iter().map(|&(x, d, a)| (x, d.map(|c| -c), a)).collect();
        Some(scatter(track(volume, mask, rec, &reversed, params, k)?))
    } else {
        None
    };
    Ok(assemble(&states, forward, backward, params.max_points))
}

/// Unidirectional tracking on plain values.
pub fn propagate_batch(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
) -> Result<StreamlineBatch> {
    Ok(propagate_impl(volume, mask, seeds, params, constants, &Untaped, false)?.batch)
}

/// Unidirectional tracking recording onto `rec`.
///
/// Seed directions are refined inside the call, so gradients flow through
/// the seed peak as well. Seed coordinates are unregistered inputs, so the
/// gradient of a seed coordinate is empty.
pub fn propagate_batch_with<R: Recorder>(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
    rec: &R,
) -> Result<Propagation<R::Value>> {
    propagate_impl(volume, mask, seeds, params, constants, rec, false)
}

/// Tracks from each seed along `d_0` and `-d_0` and joins the halves as
/// `reverse(backward[1..]) ++ forward`.
pub fn propagate_bidirectional(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
) -> Result<StreamlineBatch> {
    Ok(propagate_impl(volume, mask, seeds, params, constants, &Untaped, true)?.batch)
}

pub fn propagate_bidirectional_with<R: Recorder>(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
    rec: &R,
) -> Result<Propagation<R::Value>> {
    propagate_impl(volume, mask, seeds, params, constants, rec, true)
}

/// Splits the batch into `chunk`-sized sub-batches tracked on the rayon
/// pool and merges them by index. Output does not depend on the pool size.
pub fn propagate_parallel(
    volume: &FodVolume,
    mask: &BinaryMask,
    seeds: &SeedBatch,
    params: &TrackingParams,
    constants: &NewtonConstants,
    chunk: usize,
) -> Result<StreamlineBatch> {
    check_inputs(volume, mask, seeds, params, constants)?;
    let chunk = chunk.max(1);
    let ranges: Vec<_> = (0..seeds.len())
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(seeds.len()))
        .collect();
    let parts = ranges
        .into_par_iter()
        .map(|r| {
            let sub = seeds.slice(r);
            propagate_impl(volume, mask, &sub, params, constants, &Untaped, params.bidirectional).map(|p| p.batch)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        let stride = if params.bidirectional {
            2 * params.max_points - 1
        } else {
            params.max_points
        };
        return Ok(StreamlineBatch {
            points: vec![],
            stride,
            valid_lengths: vec![],
            termination_reasons: vec![],
            seed_indices: vec![],
            backward_reasons: params.bidirectional.then(Vec::new),
            signatures: vec![],
        });
    }
    Ok(StreamlineBatch::concat(parts))
}

/// Records one streamline on a fresh tape and returns its taped points.
pub fn propagate_single_taped<'t>(
    tape: &'t Tape,
    volume: &FodVolume,
    mask: &BinaryMask,
    seed: Vec3,
    direction: Vec3,
    params: &TrackingParams,
    constants: &NewtonConstants,
) -> Result<Propagation<crate::autodiff::DiffValue<'t>>> {
    let seeds = SeedBatch::new(vec![seed], vec![direction])?;
    propagate_impl(volume, mask, &seeds, params, constants, &tape, params.bidirectional)
}

/// Polylines of at least two points whose arc length `(L - 1) * step_size`
/// lies within the length bounds, with their batch indices.
pub fn crop_to_valid_indexed(batch: &StreamlineBatch, params: &TrackingParams) -> Vec<(usize, Streamline)> {
    (0..batch.len())
        .filter_map(|i| {
            let l = batch.valid_lengths[i];
            let len_mm = (l.saturating_sub(1)) as f64 * params.step_size;
            if l < 2 || len_mm < params.min_length || len_mm > params.max_length {
                return None;
            }
            Streamline::new(batch.valid(i).to_vec()).ok().map(|s| (i, s))
        })
        .collect()
}

pub fn crop_to_valid(batch: &StreamlineBatch, params: &TrackingParams) -> Vec<Streamline> {
    crop_to_valid_indexed(batch, params)
        .into_iter()
        .map(|(_, s)| s)
        .collect()
}
