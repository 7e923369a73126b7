//! FOD coefficient grids, binary masks and trilinear interpolation.
//!
//! Tracking runs in world millimetres. Positions are mapped to continuous
//! voxel coordinates (voxel centres at integer indices) only inside
//! interpolation and mask lookup. The image domain is the set of positions
//! whose full trilinear stencil exists: `0 <= p_i <= dim_i - 1` on each axis.

use crate::autodiff::{CoeffKey, Recorder, Scalar};
use crate::error::{Error, Result};
use crate::sh::{num_coefficients, ShBasis, ShCoefficients};
use crate::Vec3;

/// Voxel-index to world-mm transform with its cached inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    m: [[f64; 4]; 4],
    inv: [[f64; 3]; 3],
}

impl Affine {
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("affine has non-finite entries".into()));
        }
        let a = |r: usize, c: usize| m[r][c];
        let det = a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
            + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
        let scale = m[..3]
            .iter()
            .flat_map(|r| r[..3].iter())
            .fold(0.0f64, |s, v| s.max(v.abs()));
        if det.abs() <= 1e-12 * scale.powi(3) || scale == 0.0 {
            return Err(Error::InvalidParameter("affine is not invertible".into()));
        }
        let inv = [
            [
                (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) / det,
                (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) / det,
                (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) / det,
            ],
            [
                (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) / det,
                (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) / det,
                (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) / det,
            ],
            [
                (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) / det,
                (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) / det,
                (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) / det,
            ],
        ];
        Ok(Self { m, inv })
    }

    /// Axis-aligned scaling with the given origin (world position of voxel 0,0,0).
    pub fn scaling(voxel_size: Vec3, origin: Vec3) -> Result<Self> {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][i] = voxel_size[i];
            m[i][3] = origin[i];
        }
        m[3][3] = 1.0;
        Self::new(m)
    }

    pub fn identity() -> Self {
        Self::scaling([1.0; 3], [0.0; 3]).expect("identity is invertible")
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn voxel_to_world(&self, v: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.m[r][0] * v[0] + self.m[r][1] * v[1] + self.m[r][2] * v[2] + self.m[r][3];
        }
        out
    }

    pub fn world_to_voxel<T: Scalar>(&self, p: [T; 3]) -> [T; 3] {
        let d = [p[0] - self.m[0][3], p[1] - self.m[1][3], p[2] - self.m[2][3]];
        let row = |r: usize| d[0] * self.inv[r][0] + d[1] * self.inv[r][1] + d[2] * self.inv[r][2];
        [row(0), row(1), row(2)]
    }

    /// Entry-wise comparison of the full 4x4 matrices.
    pub fn approx_eq(&self, other: &Affine, tol: f64) -> bool {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Eight corners and weights of a trilinear stencil. Corner `c` has offset
/// `(c & 1, (c >> 1) & 1, (c >> 2) & 1)` from `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationStencil<T = f64> {
    pub base: [usize; 3],
    pub corner_indices: [[usize; 3]; 8],
    pub weights: [T; 8],
}

fn in_domain(dims: [usize; 3], v: Vec3) -> bool {
    (0..3).all(|i| v[i] >= 0.0 && v[i] <= (dims[i] - 1) as f64)
}

fn stencil<T: Scalar>(dims: [usize; 3], v: [T; 3]) -> InterpolationStencil<T> {
    let mut base = [0usize; 3];
    let mut upper = [0usize; 3];
    let mut frac = [T::constant(0.0); 3];
    for i in 0..3 {
        let b = if dims[i] < 2 {
            0
        } else {
            (v[i].value().floor().max(0.0) as usize).min(dims[i] - 2)
        };
        base[i] = b;
        upper[i] = (b + 1).min(dims[i] - 1);
        frac[i] = v[i] - b as f64;
    }
    let one_minus: [T; 3] = [-frac[0] + 1.0, -frac[1] + 1.0, -frac[2] + 1.0];
    let pick = |axis: usize, bit: usize| if bit == 1 { frac[axis] } else { one_minus[axis] };
    let mut corner_indices = [[0usize; 3]; 8];
    let mut weights = [T::constant(0.0); 8];
    for c in 0..8 {
        let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        for i in 0..3 {
            corner_indices[c][i] = if bits[i] == 1 { upper[i] } else { base[i] };
        }
        weights[c] = pick(0, bits[0]) * pick(1, bits[1]) * pick(2, bits[2]);
    }
    InterpolationStencil {
        base,
        corner_indices,
        weights,
    }
}

/// A grid of SH coefficient vectors with voxel/world geometry.
#[derive(Debug, Clone)]
pub struct FodVolume {
    dims: [usize; 3],
    lmax: usize,
    k: usize,
    // voxel-major: ((z * ny + y) * nx + x) * k + coeff
    coeffs: Vec<f64>,
    voxel_size: Vec3,
    affine: Affine,
    basis: ShBasis,
}

impl FodVolume {
    pub fn new(dims: [usize; 3], lmax: usize, coeffs: Vec<f64>, voxel_size: Vec3, affine: Affine) -> Result<Self> {
        let k = num_coefficients(lmax)?;
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("empty grid {dims:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2] * k;
        if coeffs.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: coeffs.len(),
            });
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "voxel sizes must be positive, got {voxel_size:?}"
            )));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite coefficient at flat index {i}")));
        }
        Ok(Self {
            dims,
            lmax,
            k,
            coeffs,
            voxel_size,
            affine,
            basis: ShBasis::new(lmax)?,
        })
    }

    /// Builds a volume by evaluating `f` at every voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        lmax: usize,
        voxel_size: Vec3,
        affine: Affine,
        mut f: impl FnMut([usize; 3]) -> Vec<f64>,
    ) -> Result<Self> {
        let k = num_coefficients(lmax)?;
        let mut coeffs = Vec::with_capacity(dims[0] * dims[1] * dims[2] * k);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let c = f([x, y, z]);
                    if c.len() != k {
                        return Err(Error::DimensionMismatch {
                            expected: k,
                            actual: c.len(),
                        });
                    }
                    coeffs.extend(c);
                }
            }
        }
        Self::new(dims, lmax, coeffs, voxel_size, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn num_coefficients(&self) -> usize {
        self.k
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.voxel_size
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn basis(&self) -> &ShBasis {
        &self.basis
    }

    /// Raw coefficient storage, voxel-major.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    fn offset(&self, v: [usize; 3]) -> usize {
        ((v[2] * self.dims[1] + v[1]) * self.dims[0] + v[0]) * self.k
    }

    pub fn voxel(&self, v: [usize; 3]) -> &[f64] {
        let o = self.offset(v);
        &self.coeffs[o..o + self.k]
    }

    pub fn voxel_mut(&mut self, v: [usize; 3]) -> &mut [f64] {
        let o = self.offset(v);
        let k = self.k;
        &mut self.coeffs[o..o + k]
    }

    pub fn coefficient(&self, key: CoeffKey) -> f64 {
        self.voxel(key.voxel)[key.coeff]
    }

    pub fn coefficient_mut(&mut self, key: CoeffKey) -> &mut f64 {
        let o = self.offset(key.voxel);
        &mut self.coeffs[o + key.coeff]
    }

    pub fn world_to_voxel(&self, pos: Vec3) -> Vec3 {
        self.affine.world_to_voxel(pos)
    }

    pub fn voxel_to_world(&self, v: Vec3) -> Vec3 {
        self.affine.voxel_to_world(v)
    }

    /// True iff the full trilinear stencil around `voxel_pos` lies in the grid.
    pub fn in_bounds(&self, voxel_pos: Vec3) -> bool {
        in_domain(self.dims, voxel_pos)
    }

    /// World-space variant of [`in_bounds`](Self::in_bounds).
    pub fn contains_world(&self, pos: Vec3) -> bool {
        self.in_bounds(self.world_to_voxel(pos))
    }

    pub fn trilinear_stencil(&self, voxel_pos: Vec3) -> Result<InterpolationStencil> {
        if !self.in_bounds(voxel_pos) {
            return Err(self.domain_error(self.voxel_to_world(voxel_pos), voxel_pos));
        }
        Ok(stencil(self.dims, voxel_pos))
    }

    fn domain_error(&self, position: Vec3, voxel: Vec3) -> Error {
        Error::OutOfDomain { position, voxel }
    }

    /// Interpolated coefficients at world position `pos`.
    pub fn interpolate_coeffs(&self, pos: Vec3) -> Result<ShCoefficients> {
        let (c, _) = self.interpolate(&crate::autodiff::Untaped, pos)?;
        ShCoefficients::new(self.lmax, c)
    }

    /// Generic interpolation; also returns the stencil base cell.
    ///
    /// Under a tape, the result depends on the eight corner coefficient
    /// vectors (registered as inputs) and on `pos` through the weights.
    pub fn interpolate<R: Recorder>(&self, rec: &R, pos: [R::Value; 3]) -> Result<(Vec<R::Value>, [usize; 3])> {
        let v = self.affine.world_to_voxel(pos);
        let vv = [v[0].value(), v[1].value(), v[2].value()];
        if !in_domain(self.dims, vv) {
            let p = [pos[0].value(), pos[1].value(), pos[2].value()];
            return Err(self.domain_error(p, vv));
        }
        let st = stencil(self.dims, v);
        let offsets: [usize; 8] = std::array::from_fn(|c| self.offset(st.corner_indices[c]));
        let mut out = Vec::with_capacity(self.k);
        let mut corner = [R::Value::constant(0.0); 8];
        for coeff in 0..self.k {
            for c in 0..8 {
                let key = CoeffKey {
                    voxel: st.corner_indices[c],
                    coeff,
                };
                corner[c] = rec.coefficient(key, self.coeffs[offsets[c] + coeff]);
            }
            out.push(R::Value::dot(&st.weights, &corner));
        }
        Ok((out, st.base))
    }
}

/// One bit per voxel, paired with a voxel-to-world transform.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: [usize; 3],
    values: Vec<bool>,
    affine: Affine,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], values: Vec<bool>, affine: Affine) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        Ok(Self { dims, values, affine })
    }

    pub fn from_fn(dims: [usize; 3], affine: Affine, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f([x, y, z]));
                }
            }
        }
        Self { dims, values, affine }
    }

    /// A mask with every voxel of `volume`'s grid set.
    pub fn full_like(volume: &FodVolume) -> Self {
        Self::from_fn(volume.dims(), volume.affine().clone(), |_| true)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, v: [usize; 3]) -> bool {
        self.values[(v[2] * self.dims[1] + v[1]) * self.dims[0] + v[0]]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    /// Indices of set voxels in storage order.
    pub fn set_voxels(&self) -> Vec<[usize; 3]> {
        let [nx, ny, _] = self.dims;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| [i % nx, (i / nx) % ny, i / (nx * ny)])
            .collect()
    }

    /// Nearest-neighbour lookup; positions off the grid are outside.
    pub fn contains(&self, pos: Vec3) -> bool {
        let v = self.affine.world_to_voxel(pos);
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let r = (v[i] + 0.5).floor();
            if !(r >= 0.0 && r < self.dims[i] as f64) {
                return false;
            }
            idx[i] = r as usize;
        }
        self.get(idx)
    }

    /// Rejects masks whose grid differs from the volume's.
    pub fn check_compatible(&self, volume: &FodVolume) -> Result<()> {
        if self.dims != volume.dims() {
            return Err(Error::InvalidInput(format!(
                "mask grid {:?} does not match volume grid {:?}",
                self.dims,
                volume.dims()
            )));
        }
        if !self.affine.approx_eq(volume.affine(), 1e-5) {
            return Err(Error::InvalidInput("mask affine differs from volume affine".into()));
        }
        Ok(())
    }
}

pub fn mask_contains(mask: &BinaryMask, pos: Vec3) -> bool {
    mask.contains(pos)
}
