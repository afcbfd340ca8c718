//! Digitally reconstructed radiographs.
//!
//! Each detector pixel integrates attenuation along the ray from the source
//! through that pixel with fixed-step midpoint sampling and trilinear
//! interpolation (zero outside the voxel grid). The pixel intensity is
//! `1 - exp(-P)`, then the image is min-max normalized to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::geometry::{BiplanarRig, CameraPose, Vec3, View};
use crate::rawio::{self, RawHeader};
use crate::volume::Volume;

pub const DEFAULT_STEP: f64 = 1.0 / 128.0;
pub const DEFAULT_RES: (usize, usize) = (64, 64);

/// A rendered X-ray of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct DrrImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
    pub pose: CameraPose,
    pub step: f64,
}

impl DrrImage {
    pub fn view(&self) -> View {
        self.pose.view
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        rawio::write_raw(path, &RawHeader::image(self.rows, self.cols), &self.pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        rawio::write_png(path, self.rows, self.cols, &self.pixels)
    }

    /// Reads pixels written by [`save_raw`](Self::save_raw); the pose is not
    /// part of the file and must be supplied.
    pub fn load_raw(path: &Path, pose: CameraPose, step: f64) -> Result<Self> {
        let (header, pixels) = rawio::read_raw(path)?;
        if header.dims[0] != 1 {
            return Err(Error::Format(format!("expected a [1,H,W] image, got {:?}", header.dims)));
        }
        Ok(DrrImage {
            rows: header.dims[1],
            cols: header.dims[2],
            pixels,
            pose,
            step,
        })
    }
}

/// Trilinear attenuation lookup at a normalized world point; zero outside
/// the voxel-center box.
pub fn sample_trilinear(vol: &Volume, p: Vec3) -> f64 {
    let g = vol.geometry();
    let [dn, hn, wn] = g.dims;
    let [d, h, w] = g.world_to_voxel(p);
    let max = [(dn - 1) as f64, (hn - 1) as f64, (wn - 1) as f64];
    if !(d >= 0.0 && h >= 0.0 && w >= 0.0 && d <= max[0] && h <= max[1] && w <= max[2]) {
        return 0.0;
    }
    let d0 = (d.floor() as usize).min(dn - 2);
    let h0 = (h.floor() as usize).min(hn - 2);
    let w0 = (w.floor() as usize).min(wn - 2);
    let fd = d - d0 as f64;
    let fh = h - h0 as f64;
    let fw = w - w0 as f64;
    let data = vol.data();
    let at = |dd: usize, hh: usize, ww: usize| data[((d0 + dd) * hn + h0 + hh) * wn + w0 + ww] as f64;
    let c00 = at(0, 0, 0) * (1.0 - fw) + at(0, 0, 1) * fw;
    let c01 = at(0, 1, 0) * (1.0 - fw) + at(0, 1, 1) * fw;
    let c10 = at(1, 0, 0) * (1.0 - fw) + at(1, 0, 1) * fw;
    let c11 = at(1, 1, 0) * (1.0 - fw) + at(1, 1, 1) * fw;
    let c0 = c00 * (1.0 - fh) + c01 * fh;
    let c1 = c10 * (1.0 - fh) + c11 * fh;
    c0 * (1.0 - fd) + c1 * fd
}

/// Slab intersection of the ray with the voxel-center box. Returns the
/// `(entry, exit)` ray parameters, or `None` on a miss.
pub fn ray_box(origin: Vec3, dir: Vec3, half: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut ta = (-half[a] - origin[a]) * inv;
        let mut tb = (half[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

/// Attenuation path integral `P = sum mu(p_k) * step` over midpoints
/// `p_k = entry + (k + 1/2) step` lying strictly before the exit.
pub fn cast_ray(vol: &Volume, origin: Vec3, dir: Vec3, step: f64) -> Result<f64> {
    let n = crate::geometry::norm(dir);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::param("ray direction has zero length"));
    }
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("ray direction must be unit length, |d| = {n}")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param(format!("step {step} must be positive")));
    }
    Ok(march(vol, origin, dir, step))
}

fn march(vol: &Volume, origin: Vec3, dir: Vec3, step: f64) -> f64 {
    let Some((t0, t1)) = ray_box(origin, dir, vol.geometry().half_extent()) else {
        return 0.0;
    };
    let mut sum = 0.0;
    let mut k = 0usize;
    loop {
        let t = t0 + (k as f64 + 0.5) * step;
        if t >= t1 {
            break;
        }
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        sum += sample_trilinear(vol, p);
        k += 1;
    }
    sum * step
}

/// Detector coordinate of pixel `(r, c)` on a `rows x cols` detector.
#[inline]
pub fn pixel_to_detector(r: usize, c: usize, rows: usize, cols: usize) -> [f64; 2] {
    [
        -1.0 + 2.0 * c as f64 / (cols - 1) as f64,
        -1.0 + 2.0 * r as f64 / (rows - 1) as f64,
    ]
}

/// Per-pixel path integrals `P(u)` before any intensity mapping.
pub fn path_integrals(vol: &Volume, pose: &CameraPose, res: (usize, usize), step: f64, exec: Exec) -> Result<Vec<f64>> {
    pose.validate()?;
    let (rows, cols) = res;
    if rows < 8 || cols < 8 {
        return Err(Error::param(format!("DRR resolution {rows}x{cols} must be at least 8x8")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param(format!("step {step} must be positive")));
    }
    let source = pose.source_position();
    let mut out = vec![0.0f64; rows * cols];
    exec::for_each_chunk(exec, &mut out, cols, |r, row| {
        for (c, px) in row.iter_mut().enumerate() {
            let dir = pose.ray_direction(pixel_to_detector(r, c, rows, cols));
            *px = march(vol, source, dir, step);
        }
    });
    Ok(out)
}

/// Maps path integrals to `1 - exp(-P)` and min-max normalizes. A constant
/// image becomes all zeros.
pub fn normalize_intensity(integrals: &[f64]) -> Vec<f32> {
    let raw: Vec<f64> = integrals.iter().map(|p| 1.0 - (-p).exp()).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    raw.iter()
        .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect()
}

pub fn render_drr_with(vol: &Volume, pose: &CameraPose, res: (usize, usize), step: f64, exec: Exec) -> Result<DrrImage> {
    let p = path_integrals(vol, pose, res, step, exec)?;
    Ok(DrrImage {
        rows: res.0,
        cols: res.1,
        pixels: normalize_intensity(&p),
        pose: *pose,
        step,
    })
}

pub fn render_drr(vol: &Volume, pose: &CameraPose, res: (usize, usize), step: f64) -> Result<DrrImage> {
    render_drr_with(vol, pose, res, step, Exec::default())
}

/// Renders the PA and lateral views with a shared rig.
pub fn render_pair(vol: &Volume, rig: &BiplanarRig, res: (usize, usize), step: f64) -> Result<(DrrImage, DrrImage)> {
    Ok((render_drr(vol, &rig.pa, res, step)?, render_drr(vol, &rig.lat, res, step)?))
}
