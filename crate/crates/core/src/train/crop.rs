//! Random windows for partial-reconstruction training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::Crop;

/// With probability `p_part` draws a window whose size is uniform in
/// `[crop_min, native]` per axis and whose position is uniform among valid
/// placements; otherwise returns `None` (the full slice).
pub fn sample_crop(native: (usize, usize), p_part: f64, crop_min: (usize, usize), rng: &mut impl Rng) -> Result<Option<Crop>> {
    if !(0.0..=1.0).contains(&p_part) {
        return Err(Error::param(format!("p_part {p_part} outside [0, 1]")));
    }
    if crop_min.0 < 2 || crop_min.1 < 2 || crop_min.0 > native.0 || crop_min.1 > native.1 {
        return Err(Error::param(format!(
            "crop_min {crop_min:?} must lie in [2, native {native:?}]"
        )));
    }
    if p_part == 0.0 || !rng.random_bool(p_part) {
        return Ok(None);
    }
    let rows = rng.random_range(crop_min.0..=native.0);
    let cols = rng.random_range(crop_min.1..=native.1);
    let row0 = rng.random_range(0..=native.0 - rows);
    let col0 = rng.random_range(0..=native.1 - cols);
    Ok(Some(Crop { row0, col0, rows, cols }))
}
