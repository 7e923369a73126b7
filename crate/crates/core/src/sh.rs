//! Real, even-order spherical-harmonic basis.
//!
//! Coefficients are stored in the usual CSD layout: for every even `l` up to
//! `lmax`, `m` runs from `-l` to `l`, and the flat index is `l(l+1)/2 + m`.
//! Basis functions use orthonormal associated Legendre functions `P̄_l^m`
//! (no Condon-Shortley phase):
//!
//! * `m = 0`: `P̄_l^0(cos el)`
//! * `m > 0`: `√2 · cos(m·az) · P̄_l^m(cos el)`
//! * `m < 0`: `√2 · sin(|m|·az) · P̄_l^|m|(cos el)`
//!
//! The Legendre table is filled with the standard stable three-term
//! recurrences; derivatives with respect to elevation are obtained by
//! differentiating the recurrences themselves, so no `1/sin(el)` factor
//! appears at this layer.

use std::f64::consts::{PI, SQRT_2};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::Vec3;

pub const MAX_LMAX: usize = 16;

/// Number of coefficients of an even-order expansion up to `lmax`.
pub fn num_coefficients(lmax: usize) -> Result<usize> {
    if !lmax.is_multiple_of(2) || lmax > MAX_LMAX {
        return Err(Error::InvalidParameter(format!(
            "lmax must be even and at most {MAX_LMAX}, got {lmax}"
        )));
    }
    Ok((lmax / 2 + 1) * (lmax + 1))
}

/// Largest even `lmax` whose coefficient count is `k`, if any.
pub fn lmax_for_count(k: usize) -> Option<usize> {
    (0..=MAX_LMAX).step_by(2).find(|&l| (l / 2 + 1) * (l + 1) == k)
}

/// Flat coefficient index of `(l, m)`; `l` must be even.
#[inline]
pub fn sh_index(l: usize, m: isize) -> usize {
    ((l * (l + 1) / 2) as isize + m) as usize
}

/// One band-limited coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoefficients {
    lmax: usize,
    values: Vec<f64>,
}

impl ShCoefficients {
    pub fn new(lmax: usize, values: Vec<f64>) -> Result<Self> {
        let k = num_coefficients(lmax)?;
        if values.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: values.len(),
            });
        }
        Ok(Self { lmax, values })
    }

    pub fn zeros(lmax: usize) -> Result<Self> {
        let k = num_coefficients(lmax)?;
        Ok(Self {
            lmax,
            values: vec![0.0; k],
        })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Elevation in `[0, π]` and azimuth in `(-π, π]`, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalAngles {
    pub el: f64,
    pub az: f64,
}

impl SphericalAngles {
    pub fn new(el: f64, az: f64) -> Result<Self> {
        if !el.is_finite() || !az.is_finite() || !(0.0..=PI).contains(&el) {
            return Err(Error::InvalidParameter(format!(
                "angles out of range: el={el}, az={az}"
            )));
        }
        Ok(Self { el, az })
    }

    /// Unit vector pointing along these angles.
    pub fn to_cartesian(self) -> Vec3 {
        let (se, ce) = self.el.sin_cos();
        let (sa, ca) = self.az.sin_cos();
        [se * ca, se * sa, ce]
    }
}

/// `el = acos(d_z)`, `az = atan2(d_y, d_x)`.
pub fn cartesian_to_angles(d: Vec3) -> Result<SphericalAngles> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDirection(d));
    }
    let (el, az) = direction_angles(d);
    Ok(SphericalAngles { el, az })
}

/// Angle computation shared by every code path. The elevation is taken as
/// `atan2(hypot(d_x, d_y), d_z)`, which equals `acos(d_z)` on the unit sphere
/// but keeps full precision near the poles.
#[inline]
pub(crate) fn direction_angles<T: Scalar>(d: [T; 3]) -> (T, T) {
    let rho = (d[0] * d[0] + d[1] * d[1]).clamp(1e-30, f64::INFINITY).sqrt();
    (rho.atan2(d[2]), d[1].atan2(d[0]))
}

/// Per-coefficient basis values and their angular derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisDerivatives<T = f64> {
    pub value: Vec<T>,
    pub d_el: Vec<T>,
    pub d_az: Vec<T>,
    pub d2_el: Vec<T>,
    pub d2_az: Vec<T>,
    pub d_el_az: Vec<T>,
}

/// Precomputed recurrence tables for one `lmax`.
#[derive(Debug, Clone)]
pub struct ShBasis {
    lmax: usize,
    k: usize,
    // sqrt((2m+1)/(2m)) for the diagonal P_m^m, index m
    diag: Vec<f64>,
    // sqrt(2m+3) for P_{m+1}^m, index m
    sub: Vec<f64>,
    // a_lm and b_lm, indexed by legendre_index(l, m)
    a: Vec<f64>,
    b: Vec<f64>,
}

#[inline]
fn legendre_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

// (value, d/del, d²/del²)
type Triple<T> = (T, T, T);

impl ShBasis {
    pub fn new(lmax: usize) -> Result<Self> {
        let k = num_coefficients(lmax)?;
        let n = legendre_index(lmax, lmax) + 1;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for m in 0..=lmax {
            for l in (m + 2)..=lmax {
                let (lf, mf) = (l as f64, m as f64);
                a[legendre_index(l, m)] = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
                let l1 = lf - 1.0;
                b[legendre_index(l, m)] = ((l1 * l1 - mf * mf) / (4.0 * l1 * l1 - 1.0)).sqrt();
            }
        }
        let diag = (0..=lmax)
            .map(|m| {
                if m == 0 {
                    0.0
                } else {
                    ((2 * m + 1) as f64 / (2 * m) as f64).sqrt()
                }
            })
            .collect();
        let sub = (0..=lmax).map(|m| ((2 * m + 3) as f64).sqrt()).collect();
        Ok(Self {
            lmax,
            k,
            diag,
            sub,
            a,
            b,
        })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn num_coefficients(&self) -> usize {
        self.k
    }

    // Orthonormal P̄_l^m(cos el) for all l, m <= lmax, with el-derivatives
    // when `derivs` is set (otherwise those slots hold zeros).
    fn legendre<T: Scalar>(&self, el: T, derivs: bool) -> Vec<Triple<T>> {
        let zero = T::constant(0.0);
        let n = legendre_index(self.lmax, self.lmax) + 1;
        let mut p = vec![(zero, zero, zero); n];
        let x = el.cos();
        let s = el.sin();
        // x' = -s, x'' = -x, s' = x, s'' = -s
        p[0] = (T::constant((0.25 / PI).sqrt()), zero, zero);
        for m in 0..=self.lmax {
            if m > 0 {
                let (q, dq, ddq) = p[legendre_index(m - 1, m - 1)];
                let f = self.diag[m];
                let v = s * q * f;
                let (d, dd) = if derivs {
                    ((x * q + s * dq) * f, (-(s * q) + x * dq * 2.0 + s * ddq) * f)
                } else {
                    (zero, zero)
                };
                p[legendre_index(m, m)] = (v, d, dd);
            }
            if m + 1 > self.lmax {
                continue;
            }
            let (q, dq, ddq) = p[legendre_index(m, m)];
            let g = self.sub[m];
            let v = x * q * g;
            let (d, dd) = if derivs {
                ((x * dq - s * q) * g, (x * ddq - s * dq * 2.0 - x * q) * g)
            } else {
                (zero, zero)
            };
            p[legendre_index(m + 1, m)] = (v, d, dd);
            for l in (m + 2)..=self.lmax {
                let i = legendre_index(l, m);
                let (a, b) = (self.a[i], self.b[i]);
                let (p1, d1, dd1) = p[legendre_index(l - 1, m)];
                let (p2, d2, dd2) = p[legendre_index(l - 2, m)];
                let v = (x * p1 - p2 * b) * a;
                let (d, dd) = if derivs {
                    (
                        (x * d1 - s * p1 - d2 * b) * a,
                        (x * dd1 - s * d1 * 2.0 - x * p1 - dd2 * b) * a,
                    )
                } else {
                    (zero, zero)
                };
                p[i] = (v, d, dd);
            }
        }
        p
    }

    fn azimuth_terms<T: Scalar>(&self, az: T) -> Vec<(T, T)> {
        (0..=self.lmax)
            .map(|m| {
                if m == 0 {
                    (T::constant(1.0), T::constant(0.0))
                } else {
                    let arg = az * m as f64;
                    (arg.cos(), arg.sin())
                }
            })
            .collect()
    }

    /// Basis values at `(el, az)` in storage order.
    pub fn eval<T: Scalar>(&self, el: T, az: T) -> Vec<T> {
        let p = self.legendre(el, false);
        let trig = self.azimuth_terms(az);
        let mut out = vec![T::constant(0.0); self.k];
        for l in (0..=self.lmax).step_by(2) {
            out[sh_index(l, 0)] = p[legendre_index(l, 0)].0;
            for m in 1..=l {
                let pl = p[legendre_index(l, m)].0 * SQRT_2;
                let (c, s) = trig[m];
                out[sh_index(l, m as isize)] = c * pl;
                out[sh_index(l, -(m as isize))] = s * pl;
            }
        }
        out
    }

    /// Basis values plus first and second partials in elevation and azimuth.
    pub fn eval_derivatives<T: Scalar>(&self, el: T, az: T) -> BasisDerivatives<T> {
        let p = self.legendre(el, true);
        let trig = self.azimuth_terms(az);
        let zero = T::constant(0.0);
        let mut out = BasisDerivatives {
            value: vec![zero; self.k],
            d_el: vec![zero; self.k],
            d_az: vec![zero; self.k],
            d2_el: vec![zero; self.k],
            d2_az: vec![zero; self.k],
            d_el_az: vec![zero; self.k],
        };
        for l in (0..=self.lmax).step_by(2) {
            let (v, d, dd) = p[legendre_index(l, 0)];
            let i = sh_index(l, 0);
            out.value[i] = v;
            out.d_el[i] = d;
            out.d2_el[i] = dd;
            for m in 1..=l {
                let (v, d, dd) = p[legendre_index(l, m)];
                let (v, d, dd) = (v * SQRT_2, d * SQRT_2, dd * SQRT_2);
                let (c, s) = trig[m];
                let mf = m as f64;
                let mm = mf * mf;

                let ip = sh_index(l, m as isize);
                out.value[ip] = c * v;
                out.d_el[ip] = c * d;
                out.d2_el[ip] = c * dd;
                out.d_az[ip] = -(s * v) * mf;
                out.d2_az[ip] = -(c * v) * mm;
                out.d_el_az[ip] = -(s * d) * mf;

                let im = sh_index(l, -(m as isize));
                out.value[im] = s * v;
                out.d_el[im] = s * d;
                out.d2_el[im] = s * dd;
                out.d_az[im] = c * v * mf;
                out.d2_az[im] = -(s * v) * mm;
                out.d_el_az[im] = c * d * mf;
            }
        }
        out
    }
}

/// Basis values for `lmax` at `angles` (convenience wrapper).
pub fn eval_basis(angles: SphericalAngles, lmax: usize) -> Result<Vec<f64>> {
    Ok(ShBasis::new(lmax)?.eval(angles.el, angles.az))
}

pub fn eval_basis_derivatives(angles: SphericalAngles, lmax: usize) -> Result<BasisDerivatives> {
    Ok(ShBasis::new(lmax)?.eval_derivatives(angles.el, angles.az))
}

/// FOD amplitude along `direction`.
pub fn amplitude(coeffs: &ShCoefficients, direction: Vec3) -> Result<f64> {
    let basis = ShBasis::new(coeffs.lmax())?;
    amplitude_with(&basis, coeffs.values(), direction)
}

pub(crate) fn amplitude_with(basis: &ShBasis, coeffs: &[f64], direction: Vec3) -> Result<f64> {
    if coeffs.len() != basis.num_coefficients() {
        return Err(Error::DimensionMismatch {
            expected: basis.num_coefficients(),
            actual: coeffs.len(),
        });
    }
    let a = cartesian_to_angles(direction)?;
    Ok(f64::dot(&basis.eval(a.el, a.az), coeffs))
}

/// Amplitude along a (possibly taped) direction.
pub(crate) fn amplitude_generic<T: Scalar>(basis: &ShBasis, coeffs: &[T], direction: [T; 3]) -> T {
    let (el, az) = direction_angles(direction);
    T::dot(&basis.eval(el, az), coeffs)
}
