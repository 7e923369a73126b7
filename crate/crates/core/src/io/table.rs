//! CSV tables: seed/direction pairs, gradient dumps and distance dumps.
//!
//! Floats are written in shortest round-trip form, so a seed table read back
//! reproduces the exact seeds that were saved.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{create_file, open_file};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckEntry;
use crate::propagate::SeedBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub voxel_x: usize,
    pub voxel_y: usize,
    pub voxel_z: usize,
    pub coeff: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl From<&GradcheckEntry> for GradientRow {
    fn from(e: &GradcheckEntry) -> Self {
        let [voxel_x, voxel_y, voxel_z] = e.key.voxel;
        Self {
            voxel_x,
            voxel_y,
            voxel_z,
            coeff: e.key.coeff,
            analytic: e.analytic,
            numeric: e.numeric,
            rel_err: e.rel_err,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub pair: usize,
    pub distance_mm: f64,
}

/// A CSV row type with a fixed header, so that empty tables keep it.
pub trait Row: Serialize {
    const HEADER: &'static [&'static str];
}

impl Row for SeedRow {
    const HEADER: &'static [&'static str] = &["index", "x", "y", "z", "dx", "dy", "dz"];
}

impl Row for GradientRow {
    const HEADER: &'static [&'static str] = &[
        "voxel_x", "voxel_y", "voxel_z", "coeff", "analytic", "numeric", "rel_err",
    ];
}

impl Row for DistanceRow {
    const HEADER: &'static [&'static str] = &["pair", "distance_mm"];
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e
        .position()
        .map(|p| format!(" (line {})", p.line()))
        .unwrap_or_default();
    Error::format(path, format!("{e}{line}"))
}

pub fn write_rows<T: Row, W: Write>(out: W, rows: &[T]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_rows<T: Row>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    write_rows(create_file(path)?, rows).map_err(|e| csv_error(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(path: &Path, input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

pub fn seed_rows(seeds: &SeedBatch) -> Vec<SeedRow> {
    seeds
        .positions
        .iter()
        .zip(&seeds.directions)
        .enumerate()
        .map(|(index, (p, d))| SeedRow {
            index,
            x: p[0],
            y: p[1],
            z: p[2],
            dx: d[0],
            dy: d[1],
            dz: d[2],
        })
        .collect()
}

pub fn save_seeds(path: impl AsRef<Path>, seeds: &SeedBatch) -> Result<()> {
    save_rows(path, &seed_rows(seeds))
}

/// Reads a seed table; rows keep file order and every seed is accepted.
pub fn load_seeds(path: impl AsRef<Path>) -> Result<SeedBatch> {
    let path = path.as_ref();
    let rows: Vec<SeedRow> = read_rows(path, open_file(path)?)?;
    let mut positions = Vec::with_capacity(rows.len());
    let mut directions = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let d = [r.dx, r.dy, r.dz];
        let n = d.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::format(
                path,
                format!(
                    "row {} (seed {}): direction norm {n} is not 1 within 1e-6",
                    i + 1,
                    r.index
                ),
            ));
        }
        positions.push([r.x, r.y, r.z]);
        directions.push(d);
    }
    SeedBatch::new(positions, directions).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_gradients(path: impl AsRef<Path>, entries: &[GradcheckEntry]) -> Result<()> {
    save_rows(path, &entries.iter().map(GradientRow::from).collect::<Vec<_>>())
}

pub fn save_distances(path: impl AsRef<Path>, distances: &[f64]) -> Result<()> {
    let rows: Vec<DistanceRow> = distances
        .iter()
        .enumerate()
        .map(|(pair, &distance_mm)| DistanceRow { pair, distance_mm })
        .collect();
    save_rows(path, &rows)
}
