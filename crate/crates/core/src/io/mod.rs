//! File formats: NIfTI-1 volumes and masks, MRtrix tck streamlines and CSV
//! tables.

use std::fs::{self, File};
use std::path::Path;

use crate::error::{Error, Result};

pub mod nifti;
pub mod table;
pub mod tck;

pub use nifti::{load_mask, load_volume, save_mask, save_volume};
pub use table::{load_seeds, save_distances, save_gradients, save_seeds, DistanceRow, GradientRow, SeedRow};
pub use tck::{load_tracks, save_tracks};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub(crate) fn open_file(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::file(path, e))
}

pub(crate) fn create_file(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::file(path, e))
}
