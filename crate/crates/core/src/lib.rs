//! Differentiable deterministic streamline tractography.
//!
//! Streamlines are propagated through a volume of fiber orientation
//! distributions stored as real, even-order spherical-harmonic coefficients.
//! Every numerical routine is generic over [`Scalar`], so the same code runs
//! on plain `f64` or records onto a [`Tape`] for reverse-mode gradients of
//! streamline coordinates with respect to the FOD coefficients.

// Negated comparisons are deliberate: they send NaN down the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod peak;
pub mod propagate;
pub mod reference;
pub mod sh;
pub mod synth;
pub mod volume;

/// A world-space or voxel-space 3-vector.
pub type Vec3 = [f64; 3];

pub use autodiff::{
    backward, stop_gradient, CoeffKey, DiffValue, GradientResult, OutputId, Recorder, Scalar, Tape, Untaped,
};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckEntry, GradcheckReport};
pub use metrics::{directed_hausdorff, hausdorff, percentile_report, DistanceReport, Streamline};
pub use peak::{find_peaks_batch, find_peaks_batch_with, newton_step, NewtonConstants, NewtonStep, PeakBatch};
pub use propagate::{
    accept_seeds, crop_to_valid, crop_to_valid_indexed, default_max_points, propagate_batch, propagate_bidirectional,
    propagate_parallel, sample_directions, sample_seeds, SeedBatch, StreamlineBatch, TerminationReason, TrackingParams,
};
pub use reference::{find_peaks_sequential_reference, track_sequential_reference, ReferencePeak, ReferenceStreamline};
pub use sh::{
    cartesian_to_angles, eval_basis, eval_basis_derivatives, num_coefficients, BasisDerivatives, ShBasis,
    ShCoefficients, SphericalAngles,
};
pub use synth::{random_coefficients, random_volume, SynthKind, SynthParams};
pub use volume::{mask_contains, Affine, BinaryMask, FodVolume, InterpolationStencil};
