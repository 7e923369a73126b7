//! Newton ascent on the sphere towards the nearest FOD maximum.
//!
//! Each step works in the orthonormal tangent frame `(ê_el, ê_az)` at the
//! current direction. The ascent direction is the metric-corrected gradient
//! `(∂A/∂el, ∂A/∂az / sin el)`, the step length is `g / |A''|` where `A''` is
//! the second derivative of the amplitude along the great circle leaving in
//! the gradient direction (clamped to `max_dir_change`), and the update moves
//! along that great circle.
//!
//! The batched finder always runs `max_iterations` iterations. An element
//! whose step falls below `angle_tolerance` is frozen for the rest of the
//! call: its direction is kept bit for bit and contributes nothing further
//! to the gradient.

use crate::autodiff::{Recorder, Scalar};
use crate::error::{Error, Result};
use crate::sh::{amplitude_generic, direction_angles, ShBasis, ShCoefficients};
use crate::volume::FodVolume;
use crate::Vec3;

/// Lower clamp on `sin(el)` in the azimuthal metric factor.
pub const POLE_EPS: f64 = 1e-6;
/// Curvatures below this magnitude take a clamped gradient step instead.
pub const DEGENERATE_CURVATURE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConstants {
    pub max_iterations: usize,
    /// Radians; a step shorter than this freezes the element.
    pub angle_tolerance: f64,
    /// Radians; upper clamp on a single step.
    pub max_dir_change: f64,
}

impl Default for NewtonConstants {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            angle_tolerance: 1e-4,
            max_dir_change: 0.2,
        }
    }
}

impl NewtonConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.angle_tolerance > 0.0
            && self.angle_tolerance < self.max_dir_change
            && self.max_dir_change < std::f64::consts::FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "need max_iterations > 0 and 0 < angle_tolerance < max_dir_change < pi/2, got {self:?}"
            )))
        }
    }
}

pub(crate) const CLAMPED: u64 = 1;
pub(crate) const DEGENERATE: u64 = 2;
pub(crate) const ZERO_GRADIENT: u64 = 4;

/// Amplitude and its first two derivatives along the ascent great circle.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LocalModel<T> {
    pub amplitude: T,
    /// Gradient components in the `(ê_el, ê_az)` frame.
    pub grad: [T; 2],
    pub g2: T,
    pub e_el: [T; 3],
    pub e_az: [T; 3],
    /// Hessian entries in the same frame: `[ee, ea, aa]`.
    pub hessian: [T; 3],
}

pub(crate) fn local_model<T: Scalar>(basis: &ShBasis, coeffs: &[T], u: [T; 3]) -> LocalModel<T> {
    let (el, az) = direction_angles(u);
    let b = basis.eval_derivatives(el, az);
    let amplitude = T::dot(&b.value, coeffs);
    let a_e = T::dot(&b.d_el, coeffs);
    let a_a = T::dot(&b.d_az, coeffs);
    let a_ee = T::dot(&b.d2_el, coeffs);
    let a_aa = T::dot(&b.d2_az, coeffs);
    let a_ea = T::dot(&b.d_el_az, coeffs);

    let (sin_el, cos_el) = (el.sin(), el.cos());
    let (sin_az, cos_az) = (az.sin(), az.cos());
    let s = sin_el.clamp(POLE_EPS, 1.0);
    let cot = cos_el / s;
    let ge = a_e;
    let ga = a_a / s;
    // covariant second derivatives in the orthonormal frame
    let h_ee = a_ee;
    let h_ea = (a_ea - cot * a_a) / s;
    let h_aa = a_aa / (s * s) + cot * a_e;
    LocalModel {
        amplitude,
        grad: [ge, ga],
        g2: ge * ge + ga * ga,
        e_el: [cos_el * cos_az, cos_el * sin_az, -sin_el],
        e_az: [-sin_az, cos_az, T::constant(0.0)],
        hessian: [h_ee, h_ea, h_aa],
    }
}

impl<T: Scalar> LocalModel<T> {
    /// Second derivative along the unit gradient direction; `None` if the
    /// gradient vanishes.
    pub fn directional_curvature(&self) -> Option<T> {
        if !(self.g2.value() > 0.0) {
            return None;
        }
        let [ge, ga] = self.grad;
        let [h_ee, h_ea, h_aa] = self.hessian;
        Some((ge * ge * h_ee + ge * ga * h_ea * 2.0 + ga * ga * h_aa) / self.g2)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Step<T> {
    pub direction: [T; 3],
    pub dt: T,
    pub amplitude: T,
    pub flags: u64,
    pub finite: bool,
}

/// One Newton update from `u` (not applied if the caller's mask says so).
pub(crate) fn step<T: Scalar>(basis: &ShBasis, coeffs: &[T], u: [T; 3], k: &NewtonConstants) -> Step<T> {
    let m = local_model(basis, coeffs, u);
    let zero = T::constant(0.0);
    let Some(curv) = m.directional_curvature() else {
        return Step {
            direction: u,
            dt: zero,
            amplitude: m.amplitude,
            flags: ZERO_GRADIENT,
            finite: m.amplitude.value().is_finite() && m.g2.value() == 0.0,
        };
    };
    let g = m.g2.sqrt();
    let h = curv.abs();
    let max = k.max_dir_change;
    let [ge, ga] = m.grad;
    // (se, sa) = dt * unit gradient, formed without dividing by g where possible
    let (dt, se, sa, flags) = if h.value() < DEGENERATE_CURVATURE {
        let f = T::constant(max) / g;
        (T::constant(max), ge * f, ga * f, DEGENERATE)
    } else {
        let raw = g / h;
        if raw.value() > max {
            let f = T::constant(max) / g;
            (T::constant(max), ge * f, ga * f, CLAMPED)
        } else {
            (raw, ge / h, ga / h, 0)
        }
    };
    if !(dt.value() > 0.0) {
        return Step {
            direction: u,
            dt: zero,
            amplitude: m.amplitude,
            flags: ZERO_GRADIENT,
            finite: dt.value() == 0.0,
        };
    }
    let cos_dt = dt.cos();
    let sinc = dt.sin() / dt;
    let t = [
        se * m.e_el[0] + sa * m.e_az[0],
        se * m.e_el[1] + sa * m.e_az[1],
        se * m.e_el[2],
    ];
    let w = [
        u[0] * cos_dt + t[0] * sinc,
        u[1] * cos_dt + t[1] * sinc,
        u[2] * cos_dt + t[2] * sinc,
    ];
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let direction = [w[0] / n, w[1] / n, w[2] / n];
    let finite = direction.iter().all(|c| c.value().is_finite()) && m.amplitude.value().is_finite();
    Step {
        direction,
        dt,
        amplitude: m.amplitude,
        flags,
        finite,
    }
}

/// Result of a single public Newton step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStep {
    pub direction: Vec3,
    /// Angular step taken, radians.
    pub dt: f64,
    /// Amplitude at the starting direction.
    pub amplitude: f64,
}

pub(crate) fn check_unit(d: Vec3) -> Result<()> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if d.iter().all(|c| c.is_finite()) && (n - 1.0).abs() <= 1e-6 {
        Ok(())
    } else {
        Err(Error::InvalidDirection(d))
    }
}

/// One Newton update of `direction` towards a local maximum of `coeffs`.
pub fn newton_step(coeffs: &ShCoefficients, direction: Vec3, constants: &NewtonConstants) -> Result<NewtonStep> {
    check_unit(direction)?;
    constants.validate()?;
    let basis = ShBasis::new(coeffs.lmax())?;
    let s = step(&basis, coeffs.values(), direction, constants);
    if !s.finite {
        return Err(Error::PoisonedDirection(direction));
    }
    Ok(NewtonStep {
        direction: s.direction,
        dt: s.dt,
        amplitude: s.amplitude,
    })
}

#[inline]
pub(crate) fn fold(sig: u64, event: u64) -> u64 {
    (sig ^ event).wrapping_mul(0x0000_0100_0000_01b3)
}

/// Outcome of the fixed-iteration loop for one element.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ElementPeak<T> {
    pub direction: [T; 3],
    pub amplitude: T,
    pub active: bool,
    pub poisoned: bool,
    pub signature: u64,
}

/// Runs the full `max_iterations` loop for one element.
///
/// While active, steps are computed on `coeffs` (taped if `T` is). Once
/// frozen, the step is still evaluated, on detached values, and discarded.
pub(crate) fn refine<T: Scalar>(basis: &ShBasis, coeffs: &[T], u0: [T; 3], k: &NewtonConstants) -> ElementPeak<T> {
    let mut u = u0;
    let mut active = true;
    let mut poisoned = false;
    let mut sig = 0xcbf2_9ce4_8422_2325u64;
    let mut detached: Option<Vec<f64>> = None;
    for i in 0..k.max_iterations {
        if active {
            let s = step(basis, coeffs, u, k);
            if !s.finite {
                poisoned = true;
                active = false;
                sig = fold(sig, (i as u64) << 8 | 0xff);
                continue;
            }
            sig = fold(sig, (i as u64) << 8 | s.flags);
            if s.dt.value() >= k.angle_tolerance {
                u = s.direction;
            } else {
                active = false;
                sig = fold(sig, (i as u64) << 8 | 0x80);
            }
        } else {
            let c = detached.get_or_insert_with(|| coeffs.iter().map(|c| c.value()).collect());
            let _ = step(basis, c, u.map(|x| x.value()), k);
        }
    }
    let amplitude = amplitude_generic(basis, coeffs, u);
    if !amplitude.value().is_finite() {
        poisoned = true;
    }
    ElementPeak {
        direction: u,
        amplitude,
        active,
        poisoned,
        signature: sig,
    }
}

/// Refined directions and amplitudes for a batch of positions.
#[derive(Debug, Clone)]
pub struct PeakBatch<T = f64> {
    pub directions: Vec<[T; 3]>,
    pub amplitudes: Vec<T>,
    /// Still set if the element never met the tolerance.
    pub update_mask: Vec<bool>,
    pub iterations_run: usize,
    /// Set where an iteration produced a non-finite value; the element kept
    /// its last finite direction.
    pub poisoned: Vec<bool>,
    /// Hash of each element's branch pattern (freeze iteration, clamp and
    /// degenerate-curvature hits, interpolation cell). Equal signatures mean
    /// the same piecewise-smooth branch was followed.
    pub signatures: Vec<u64>,
    /// Basis-derivative evaluations performed (`B * max_iterations`) plus
    /// the final amplitude pass (`B`).
    pub basis_evaluations: usize,
}

/// Batched Newton peak finding on untaped values.
pub fn find_peaks_batch(
    volume: &FodVolume,
    positions: &[Vec3],
    init_directions: &[Vec3],
    constants: &NewtonConstants,
) -> Result<PeakBatch> {
    find_peaks_batch_with(volume, &crate::autodiff::Untaped, positions, init_directions, constants)
}

/// Batched Newton peak finding, recording onto `rec` when it is a tape.
pub fn find_peaks_batch_with<R: Recorder>(
    volume: &FodVolume,
    rec: &R,
    positions: &[[R::Value; 3]],
    init_directions: &[[R::Value; 3]],
    constants: &NewtonConstants,
) -> Result<PeakBatch<R::Value>> {
    constants.validate()?;
    if positions.len() != init_directions.len() {
        return Err(Error::DimensionMismatch {
            expected: positions.len(),
            actual: init_directions.len(),
        });
    }
    for d in init_directions {
        check_unit(d.map(|c| c.value()))?;
    }
    let mut coeffs = Vec::with_capacity(positions.len());
    for &p in positions {
        coeffs.push(volume.interpolate(rec, p)?);
    }
    let basis = volume.basis();
    let n = positions.len();
    let mut out = PeakBatch {
        directions: Vec::with_capacity(n),
        amplitudes: Vec::with_capacity(n),
        update_mask: Vec::with_capacity(n),
        iterations_run: constants.max_iterations,
        poisoned: Vec::with_capacity(n),
        signatures: Vec::with_capacity(n),
        basis_evaluations: n * (constants.max_iterations + 1),
    };
    for ((c, base), &u0) in coeffs.iter().zip(init_directions) {
        let e = refine(basis, c, u0, constants);
        out.directions.push(e.direction);
        out.amplitudes.push(e.amplitude);
        out.update_mask.push(e.active);
        out.poisoned.push(e.poisoned);
        out.signatures.push(fold(e.signature, cell_event(*base)));
    }
    Ok(out)
}

pub(crate) fn cell_event(base: [usize; 3]) -> u64 {
    (base[0] as u64) | (base[1] as u64) << 21 | (base[2] as u64) << 42
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};
    use crate::sh::amplitude;
    use crate::synth::{isotropic_coefficients, lobe_coefficients};
    use crate::volume::Affine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn angle(a: Vec3, b: Vec3) -> f64 {
        (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
    }

    fn tilt(axis_el: f64, az: f64) -> Vec3 {
        [axis_el.sin() * az.cos(), axis_el.sin() * az.sin(), axis_el.cos()]
    }

    fn random_field(rng: &mut ChaCha8Rng, lmax: usize) -> ShCoefficients {
        let k = crate::sh::num_coefficients(lmax).unwrap();
        let mut v: Vec<f64> = (0..k)
            .map(|i| {
                let l = crate::sh::lmax_for_count(i + 1).unwrap_or(lmax) as f64;
                rng.random_range(-1.0..1.0) / (1.0 + l)
            })
            .collect();
        v[0] += 1.0;
        ShCoefficients::new(lmax, v).unwrap()
    }

    fn fibonacci(n: usize) -> Vec<Vec3> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                [r * t.cos(), r * t.sin(), z]
            })
            .collect()
    }

    #[test]
    fn isotropic_step_is_zero() {
        let c = ShCoefficients::new(8, isotropic_coefficients(8, 1.0).unwrap()).unwrap();
        let u = tilt(0.7, 0.3);
        let s = newton_step(&c, u, &NewtonConstants::default()).unwrap();
        assert_eq!(s.dt, 0.0);
        assert_eq!(s.direction, u);
        assert!((s.amplitude - 1.0).abs() < 1e-12);
        let mut c2 = vec![0.0; 45];
        c2[0] = 2.5;
        let c2 = ShCoefficients::new(8, c2).unwrap();
        let s = newton_step(&c2, u, &NewtonConstants::default()).unwrap();
        assert!((s.amplitude - 2.5 * 0.28209479177387814).abs() < 1e-12);
    }

    #[test]
    fn single_step_approaches_lobe() {
        let c = ShCoefficients::new(8, lobe_coefficients(8, [0.0, 0.0, 1.0]).unwrap()).unwrap();
        for az in [0.0, 1.0, -2.5] {
            let u = tilt(5f64.to_radians(), az);
            let s = newton_step(&c, u, &NewtonConstants::default()).unwrap();
            assert!(angle(s.direction, [0.0, 0.0, 1.0]) < angle(u, [0.0, 0.0, 1.0]));
        }
    }

    #[test]
    fn rejects_bad_direction() {
        let c = ShCoefficients::new(2, vec![1.0; 6]).unwrap();
        assert!(newton_step(&c, [0.0, 0.0, 2.0], &NewtonConstants::default()).is_err());
        assert!(newton_step(&c, [f64::NAN, 0.0, 1.0], &NewtonConstants::default()).is_err());
    }

    #[test]
    fn curvature_matches_great_circle_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 50 {
            let c = random_field(&mut rng, 8);
            let basis = ShBasis::new(8).unwrap();
            let el = rng.random_range(0.2..std::f64::consts::PI - 0.2);
            let az = rng.random_range(-3.0..3.0);
            let u = tilt(el, az);
            let m = local_model(&basis, c.values(), u);
            let g = m.g2.sqrt();
            let Some(curv) = m.directional_curvature() else {
                continue;
            };
            let [ge, ga] = m.grad;
            let t: Vec3 = std::array::from_fn(|i| (ge * m.e_el[i] + ga * m.e_az[i]) / g);
            let at = |h: f64| {
                let d: Vec3 = std::array::from_fn(|i| h.cos() * u[i] + h.sin() * t[i]);
                amplitude(&c, d).unwrap()
            };
            let h = 1e-4;
            let fd2 = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
            let fd1 = (at(h) - at(-h)) / (2.0 * h);
            if curv.abs() < 1e-2 {
                continue;
            }
            assert!((fd2 - curv).abs() / curv.abs() <= 1e-4, "{fd2} vs {curv}");
            assert!((fd1 - g).abs() / g.max(1e-3) <= 1e-6);
            checked += 1;
        }
    }

    fn lobe_volume(axes: &[Vec3]) -> FodVolume {
        let n = axes.len();
        FodVolume::from_fn([n, 1, 1], 8, [1.0; 3], Affine::identity(), |v| {
            lobe_coefficients(8, axes[v[0]]).unwrap()
        })
        .unwrap()
    }

    #[test]
    fn batch_reaches_lobe_axes() {
        let axes = fibonacci(64);
        let vol = lobe_volume(&axes);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positions: Vec<Vec3> = (0..64).map(|i| [i as f64, 0.0, 0.0]).collect();
        let inits: Vec<Vec3> = axes
            .iter()
            .map(|&a| {
                let off = rng.random_range(0.0..10f64.to_radians());
                let p = crate::synth::normalize([a[1] - a[2], a[2] - a[0], a[0] - a[1]]).unwrap();
                let d: Vec3 = std::array::from_fn(|i| off.cos() * a[i] + off.sin() * p[i]);
                d
            })
            .collect();
        let out = find_peaks_batch(&vol, &positions, &inits, &NewtonConstants::default()).unwrap();
        assert_eq!(out.iterations_run, 50);
        assert_eq!(out.basis_evaluations, 64 * 51);
        for (i, d) in out.directions.iter().enumerate() {
            assert!(angle(*d, axes[i]).to_degrees() < 0.5);
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!(!out.update_mask[i]);
            assert!((out.amplitudes[i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_equals_independent_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let axes: Vec<Vec3> = (0..16)
            .map(|_| tilt(rng.random_range(0.0..3.1), rng.random_range(-3.0..3.0)))
            .collect();
        let vol = lobe_volume(&axes);
        let positions: Vec<Vec3> = (0..16).map(|i| [i as f64, 0.0, 0.0]).collect();
        let inits: Vec<Vec3> = (0..16)
            .map(|_| tilt(rng.random_range(0.0..3.1), rng.random_range(-3.0..3.0)))
            .collect();
        let k = NewtonConstants::default();
        let batch = find_peaks_batch(&vol, &positions, &inits, &k).unwrap();
        for i in 0..16 {
            let single = find_peaks_batch(&vol, &positions[i..=i], &inits[i..=i], &k).unwrap();
            assert_eq!(single.directions[0], batch.directions[i]);
            assert_eq!(single.amplitudes[0].to_bits(), batch.amplitudes[i].to_bits());
        }
    }

    #[test]
    fn isotropic_batch_keeps_direction() {
        let vol = FodVolume::from_fn([2, 2, 2], 8, [1.0; 3], Affine::identity(), |_| {
            isotropic_coefficients(8, 1.0).unwrap()
        })
        .unwrap();
        let u = tilt(1.0, 2.0);
        let out = find_peaks_batch(&vol, &[[0.5; 3]], &[u], &NewtonConstants::default()).unwrap();
        assert_eq!(out.directions[0], u);
        assert!(!out.update_mask[0]);
    }

    #[test]
    fn out_of_bounds_position_is_an_error() {
        let vol = lobe_volume(&[[0.0, 0.0, 1.0]; 2]);
        let r = find_peaks_batch(
            &vol,
            &[[5.0, 0.0, 0.0]],
            &[[0.0, 0.0, 1.0]],
            &NewtonConstants::default(),
        );
        assert!(matches!(r, Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn ascent_on_single_lobes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = NewtonConstants::default();
        for _ in 0..200 {
            let axis = tilt(rng.random_range(0.0..3.1), rng.random_range(-3.0..3.0));
            let c = ShCoefficients::new(8, lobe_coefficients(8, axis).unwrap()).unwrap();
            let off = rng.random_range(0.01..0.2);
            let p = crate::synth::normalize([axis[1] + 0.3, -axis[0], 0.7]).unwrap();
            let p = crate::synth::normalize(std::array::from_fn(|i| {
                p[i] - axis[i] * (p[0] * axis[0] + p[1] * axis[1] + p[2] * axis[2])
            }))
            .unwrap();
            let u: Vec3 = std::array::from_fn(|i| off.cos() * axis[i] + off.sin() * p[i]);
            let s = newton_step(&c, u, &k).unwrap();
            if s.dt < k.max_dir_change {
                assert!(amplitude(&c, s.direction).unwrap() >= s.amplitude - 1e-9);
            }
        }
    }

    #[test]
    fn taped_directions_match_untaped_and_have_gradients() {
        let axes = [tilt(0.4, 0.2), tilt(0.5, 0.1)];
        let vol = lobe_volume(&axes);
        let k = NewtonConstants::default();
        let p = [0.3, 0.0, 0.0];
        let u = tilt(0.6, 0.0);
        let plain = find_peaks_batch(&vol, &[p], &[u], &k).unwrap();
        let tape = Tape::new();
        let pt = p.map(|x| tape.var(x));
        let ut = u.map(|x| tape.var(x));
        let taped = find_peaks_batch_with(&vol, &&tape, &[pt], &[ut], &k).unwrap();
        for i in 0..3 {
            assert_eq!(
                taped.directions[0][i].value().to_bits(),
                plain.directions[0][i].to_bits()
            );
        }
        assert_eq!(taped.signatures, plain.signatures);
        let g = backward(&tape, taped.directions[0][0]).unwrap();
        assert!(!g.partials.is_empty());
        assert!(g.voxels().len() <= 8);
    }

    #[test]
    fn constants_validation() {
        assert!(NewtonConstants::default().validate().is_ok());
        let bad = NewtonConstants {
            angle_tolerance: 0.3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
