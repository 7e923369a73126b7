//! MRtrix `.tck` streamline files.
//!
//! ```text
//! mrtrix tracks
//! count: <N>
//! datatype: Float32LE
//! file: . <offset>
//! END
//! ```
//!
//! followed at `offset` by float32 triplets. Streamlines are separated by a
//! NaN triplet and the stream ends with an Inf triplet. The reader accepts
//! extra `key: value` lines but is otherwise strict: the offset must point
//! at the first byte after `END`, sentinels must be canonical, and nothing
//! may follow the terminator.

use std::collections::BTreeMap;
use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::metrics::Streamline;

const FIRST_LINE: &str = "mrtrix tracks";
const NAN_BITS: u32 = 0x7fc0_0000;
const INF_BITS: u32 = 0x7f80_0000;

fn header_text(count: usize) -> String {
    let body = |offset: usize| format!("{FIRST_LINE}\ncount: {count}\ndatatype: Float32LE\nfile: . {offset}\nEND\n");
    // the offset's digit count feeds back into the header length
    let mut offset = body(0).len();
    loop {
        let len = body(offset).len();
        if len == offset {
            return body(offset);
        }
        offset = len;
    }
}

/// Encodes streamlines; coordinates are rounded to f32.
pub fn tracks_to_bytes(streamlines: &[Streamline]) -> Vec<u8> {
    let mut out = header_text(streamlines.len()).into_bytes();
    let points: usize = streamlines.iter().map(Streamline::len).sum();
    out.reserve((points + streamlines.len() + 1) * 12);
    let triplet = |out: &mut Vec<u8>, bits: [u32; 3]| {
        for b in bits {
            out.extend_from_slice(&b.to_le_bytes());
        }
    };
    for s in streamlines {
        for p in s.points() {
            triplet(&mut out, p.map(|c| (c as f32).to_bits()));
        }
        triplet(&mut out, [NAN_BITS; 3]);
    }
    triplet(&mut out, [INF_BITS; 3]);
    out
}

pub fn save_tracks(path: impl AsRef<Path>, streamlines: &[Streamline]) -> Result<()> {
    write_file(path.as_ref(), &tracks_to_bytes(streamlines))
}

pub fn load_tracks(path: impl AsRef<Path>) -> Result<Vec<Streamline>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    parse_tracks(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_count(value: &str, what: &str) -> std::result::Result<usize, String> {
    let canonical =
        !value.is_empty() && value.bytes().all(|b| b.is_ascii_digit()) && !(value.len() > 1 && value.starts_with('0'));
    if !canonical {
        return Err(format!("{what} {value:?} is not a plain decimal integer"));
    }
    value.parse().map_err(|_| format!("{what} {value:?} is out of range"))
}

struct Header {
    count: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let mut pos = 0;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut first = true;
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(format!("header ends at byte {} without an END line", bytes.len()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| format!("header line at byte {pos} is not valid UTF-8"))?;
        let line_start = pos;
        pos += nl + 1;
        if first {
            if line != FIRST_LINE {
                return Err(format!("file does not start with {FIRST_LINE:?}"));
            }
            first = false;
            continue;
        }
        if line == "END" {
            break;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| format!("malformed header line {line:?} at byte {line_start}"))?;
        if key.is_empty() || key.trim() != key || value.trim() != value {
            return Err(format!("malformed header line {line:?} at byte {line_start}"));
        }
        if fields.insert(key.to_string(), value.to_string()).is_some() {
            return Err(format!("duplicate header key {key:?} at byte {line_start}"));
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| format!("header has no {k:?} line"));
    let datatype = get("datatype")?;
    if datatype != "Float32LE" {
        return Err(format!("unsupported datatype {datatype:?}, expected \"Float32LE\""));
    }
    let count = parse_count(get("count")?, "count")?;
    let file = get("file")?;
    let offset = file
        .strip_prefix(". ")
        .ok_or_else(|| format!("file field {file:?} does not name the same file ('. <offset>')"))?;
    let offset = parse_count(offset, "data offset")?;
    if offset != pos {
        return Err(format!(
            "data offset {offset} does not match the end of the header at byte {pos}"
        ));
    }
    Ok(Header { count, offset })
}

/// Decodes a tck byte stream; the error is a message without the path.
pub fn parse_tracks(bytes: &[u8]) -> std::result::Result<Vec<Streamline>, String> {
    let h = parse_header(bytes)?;
    let data = &bytes[h.offset..];
    if !data.len().is_multiple_of(12) {
        return Err(format!(
            "data block of {} bytes from offset {} is not a whole number of float32 triplets",
            data.len(),
            h.offset
        ));
    }
    let mut tracks = Vec::new();
    let mut current = Vec::new();
    let mut terminated = false;
    for (i, chunk) in data.chunks_exact(12).enumerate() {
        let at = h.offset + 12 * i;
        if terminated {
            return Err(format!("data continues after the terminator at byte {at}"));
        }
        let bits: [u32; 3] = std::array::from_fn(|k| u32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap()));
        let v = bits.map(f32::from_bits);
        if v.iter().all(|c| c.is_finite()) {
            current.push(v.map(f64::from));
        } else if bits == [NAN_BITS; 3] {
            if current.is_empty() {
                return Err(format!("empty streamline ends at byte {at}"));
            }
            tracks.push(Streamline::new(std::mem::take(&mut current)).map_err(|e| e.to_string())?);
        } else if bits == [INF_BITS; 3] {
            if !current.is_empty() {
                return Err(format!("terminator at byte {at} interrupts a streamline"));
            }
            terminated = true;
        } else {
            return Err(format!("invalid non-finite triplet at byte {at}"));
        }
    }
    if !terminated {
        return Err(format!("missing terminator triplet; file ends at byte {}", bytes.len()));
    }
    if tracks.len() != h.count {
        return Err(format!(
            "header declares {} streamlines, data holds {}",
            h.count,
            tracks.len()
        ));
    }
    Ok(tracks)
}
