//! Single-file NIfTI-1 (`.nii`) subset: little-endian, uncompressed,
//! 352-byte data offset.
//!
//! FOD volumes are 4-D float32 images with the SH coefficients along the
//! fourth axis. Masks are 3-D (or 4-D with a single volume) uint8 or float32
//! images; any nonzero value is set. The voxel-to-world transform is taken
//! from the sform rows when `sform_code > 0`, otherwise from the voxel sizes
//! alone. qform parameters are ignored.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::sh::lmax_for_count;
use crate::volume::{Affine, BinaryMask, FodVolume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

fn datatype_name(code: i16) -> &'static str {
    match code {
        DT_UINT8 => "uint8",
        DT_INT16 => "int16",
        DT_INT32 => "int32",
        DT_FLOAT32 => "float32",
        DT_FLOAT64 => "float64",
        _ => "unknown",
    }
}

/// Parsed header fields this subset uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [usize; 7],
    pub ndim: usize,
    pub datatype: i16,
    pub pixdim: [f64; 3],
    pub vox_offset: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub affine: Affine,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes([self.bytes[at], self.bytes[at + 1]])
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes[at..at + 4].try_into().unwrap())
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes[at..at + 4].try_into().unwrap())
    }
}

/// Parses and validates the 348-byte header.
pub fn parse_header(path: &Path, bytes: &[u8]) -> Result<NiftiHeader> {
    let err = |m: String| Error::format(path, m);
    if bytes.len() < HEADER_SIZE {
        return Err(err(format!(
            "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
            bytes.len()
        )));
    }
    let r = Reader { bytes };
    let sizeof_hdr = r.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(err("big-endian files are not supported (byte 0)".into()));
        }
        return Err(err(format!(
            "sizeof_hdr at byte 0 is {sizeof_hdr}, expected {HEADER_SIZE}"
        )));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(err(format!(
            "bad magic {:?} at byte {OFF_MAGIC}, expected single-file \"n+1\"",
            &bytes[OFF_MAGIC..OFF_MAGIC + 4]
        )));
    }
    let ndim = r.i16(OFF_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(err(format!("dim[0] at byte {OFF_DIM} is {ndim}, expected 1..7")));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(OFF_DIM + 2 * (i + 1));
        if v < 1 {
            return Err(err(format!(
                "dim[{}] at byte {} is {v}, expected >= 1",
                i + 1,
                OFF_DIM + 2 * (i + 1)
            )));
        }
        *d = v as usize;
    }
    let datatype = r.i16(OFF_DATATYPE);
    let bitpix = r.i16(OFF_BITPIX);
    let expected_bits = match datatype {
        DT_UINT8 => 8,
        DT_FLOAT32 => 32,
        _ => {
            return Err(err(format!(
                "unsupported datatype {datatype} ({}) at byte {OFF_DATATYPE}",
                datatype_name(datatype)
            )))
        }
    };
    if bitpix != expected_bits {
        return Err(err(format!(
            "bitpix at byte {OFF_BITPIX} is {bitpix}, expected {expected_bits} for {}",
            datatype_name(datatype)
        )));
    }
    let mut pixdim = [0.0; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        let at = OFF_PIXDIM + 4 * (i + 1);
        let v = r.f32(at) as f64;
        if !(v > 0.0 && v.is_finite()) {
            return Err(err(format!(
                "pixdim[{}] at byte {at} is {v}, expected a positive voxel size",
                i + 1
            )));
        }
        *p = v;
    }
    let vox = r.f32(OFF_VOX_OFFSET);
    if !(vox >= DATA_OFFSET as f32) || vox.fract() != 0.0 || vox > 1e9 {
        return Err(err(format!(
            "vox_offset at byte {OFF_VOX_OFFSET} is {vox}, expected an integer >= {DATA_OFFSET}"
        )));
    }
    let slope = r.f32(OFF_SCL_SLOPE) as f64;
    let inter = r.f32(OFF_SCL_INTER) as f64;
    if !slope.is_finite() || !inter.is_finite() {
        return Err(err(format!("non-finite intensity scaling at byte {OFF_SCL_SLOPE}")));
    }
    let affine = if r.i16(OFF_SFORM_CODE) > 0 {
        let mut m = [[0.0; 4]; 4];
        for (row, mr) in m.iter_mut().enumerate().take(3) {
            for (col, v) in mr.iter_mut().enumerate() {
                *v = r.f32(OFF_SROW + 16 * row + 4 * col) as f64;
            }
        }
        m[3][3] = 1.0;
        Affine::new(m).map_err(|e| err(format!("sform at byte {OFF_SROW}: {e}")))?
    } else {
        Affine::scaling(pixdim, [0.0; 3])?
    };
    Ok(NiftiHeader {
        dim,
        ndim: ndim as usize,
        datatype,
        pixdim,
        vox_offset: vox as usize,
        scl_slope: slope,
        scl_inter: inter,
        affine,
    })
}

fn read_values(path: &Path, bytes: &[u8], h: &NiftiHeader, count: usize) -> Result<Vec<f64>> {
    let width = if h.datatype == DT_UINT8 { 1 } else { 4 };
    let need = count * width;
    let have = bytes.len().saturating_sub(h.vox_offset);
    if have < need {
        return Err(Error::format(
            path,
            format!(
                "data block truncated: expected {need} bytes from offset {}, found {have}",
                h.vox_offset
            ),
        ));
    }
    let data = &bytes[h.vox_offset..h.vox_offset + need];
    let scale = |v: f64| {
        if h.scl_slope != 0.0 {
            v * h.scl_slope + h.scl_inter
        } else {
            v
        }
    };
    let values: Vec<f64> = if h.datatype == DT_UINT8 {
        data.iter().map(|&b| scale(b as f64)).collect()
    } else {
        data.chunks_exact(4)
            .map(|c| scale(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    };
    Ok(values)
}

/// Loads a 4-D float32 FOD image.
pub fn load_volume(path: impl AsRef<Path>) -> Result<FodVolume> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = parse_header(path, &bytes)?;
    let err = |m: String| Error::format(path, m);
    if h.ndim != 4 {
        return Err(err(format!(
            "dim[0] at byte {OFF_DIM} is {}, expected 4 for an FOD image",
            h.ndim
        )));
    }
    if h.datatype != DT_FLOAT32 {
        return Err(err(format!(
            "unsupported datatype {} ({}) at byte {OFF_DATATYPE} for an FOD image, expected float32",
            h.datatype,
            datatype_name(h.datatype)
        )));
    }
    let [nx, ny, nz, k] = [h.dim[0], h.dim[1], h.dim[2], h.dim[3]];
    let lmax =
        lmax_for_count(k).ok_or_else(|| err(format!("dim[4] = {k} is not a valid even-order SH coefficient count")))?;
    let n = nx * ny * nz;
    let values = read_values(path, &bytes, &h, n * k)?;
    // file order is x fastest, then y, z, coefficient; memory is coefficient fastest
    let mut coeffs = vec![0.0; n * k];
    for c in 0..k {
        for v in 0..n {
            coeffs[v * k + c] = values[c * n + v];
        }
    }
    if let Some(i) = coeffs.iter().position(|v| !v.is_finite()) {
        return Err(err(format!(
            "non-finite coefficient at voxel {}, coefficient {}",
            i / k,
            i % k
        )));
    }
    FodVolume::new([nx, ny, nz], lmax, coeffs, h.pixdim, h.affine)
}

/// Loads a 3-D binary mask (uint8 or float32; nonzero is set).
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let h = parse_header(path, &bytes)?;
    if !(h.ndim == 3 || (h.ndim == 4 && h.dim[3] == 1)) {
        return Err(Error::format(
            path,
            format!("mask must be 3-D, found dim[0] = {} with dim[4] = {}", h.ndim, h.dim[3]),
        ));
    }
    let dims = [h.dim[0], h.dim[1], h.dim[2]];
    let values = read_values(path, &bytes, &h, dims[0] * dims[1] * dims[2])?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "mask contains non-finite values"));
    }
    BinaryMask::new(dims, values.iter().map(|&v| v != 0.0).collect(), h.affine)
}

fn header(dim: &[usize], datatype: i16, pixdim: [f64; 3], affine: &Affine, descrip: &str) -> Result<Vec<u8>> {
    let mut b = vec![0u8; DATA_OFFSET];
    let put_i16 = |b: &mut [u8], at: usize, v: i16| b[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |b: &mut [u8], at: usize, v: f32| b[at..at + 4].copy_from_slice(&v.to_le_bytes());
    b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut b, OFF_DIM, dim.len() as i16);
    for (i, &d) in dim.iter().enumerate() {
        let d = i16::try_from(d)
            .map_err(|_| Error::InvalidParameter(format!("dimension {d} exceeds the NIfTI-1 limit")))?;
        put_i16(&mut b, OFF_DIM + 2 * (i + 1), d);
    }
    for i in dim.len()..7 {
        put_i16(&mut b, OFF_DIM + 2 * (i + 1), 1);
    }
    put_i16(&mut b, OFF_DATATYPE, datatype);
    put_i16(&mut b, OFF_BITPIX, if datatype == DT_UINT8 { 8 } else { 32 });
    put_f32(&mut b, OFF_PIXDIM, 1.0);
    for i in 0..3 {
        put_f32(&mut b, OFF_PIXDIM + 4 * (i + 1), pixdim[i] as f32);
    }
    for i in 3..7 {
        put_f32(&mut b, OFF_PIXDIM + 4 * (i + 1), 1.0);
    }
    put_f32(&mut b, OFF_VOX_OFFSET, DATA_OFFSET as f32);
    put_f32(&mut b, OFF_SCL_SLOPE, 1.0);
    // millimetres, seconds
    b[OFF_XYZT_UNITS] = 2 | 8;
    let d = descrip.as_bytes();
    let n = d.len().min(79);
    b[OFF_DESCRIP..OFF_DESCRIP + n].copy_from_slice(&d[..n]);
    put_i16(&mut b, OFF_QFORM_CODE, 0);
    put_i16(&mut b, OFF_SFORM_CODE, 1);
    let m = affine.matrix();
    for row in 0..3 {
        for col in 0..4 {
            put_f32(&mut b, OFF_SROW + 16 * row + 4 * col, m[row][col] as f32);
        }
    }
    b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    Ok(b)
}

/// Serializes a volume as float32; coefficients are rounded to f32.
pub fn volume_to_bytes(volume: &FodVolume) -> Result<Vec<u8>> {
    let [nx, ny, nz] = volume.dims();
    let k = volume.num_coefficients();
    let mut b = header(
        &[nx, ny, nz, k],
        DT_FLOAT32,
        volume.voxel_size(),
        volume.affine(),
        "FOD SH coefficients",
    )?;
    let n = nx * ny * nz;
    b.reserve(n * k * 4);
    let c = volume.coeffs();
    for coeff in 0..k {
        for v in 0..n {
            b.extend_from_slice(&(c[v * k + coeff] as f32).to_le_bytes());
        }
    }
    Ok(b)
}

pub fn save_volume(path: impl AsRef<Path>, volume: &FodVolume) -> Result<()> {
    write_file(path.as_ref(), &volume_to_bytes(volume)?)
}

pub fn mask_to_bytes(mask: &BinaryMask) -> Result<Vec<u8>> {
    let dims = mask.dims();
    let a = mask.affine().matrix();
    let pixdim = std::array::from_fn(|c| (0..3).map(|r| a[r][c] * a[r][c]).sum::<f64>().sqrt());
    let mut b = header(&dims, DT_UINT8, pixdim, mask.affine(), "binary mask")?;
    b.extend(mask.values().iter().map(|&v| v as u8));
    Ok(b)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_file(path.as_ref(), &mask_to_bytes(mask)?)
}
