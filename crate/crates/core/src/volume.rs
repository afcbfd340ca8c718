//! Attenuation volumes, procedural phantoms and slice extraction.
//!
//! Voxel data is stored `D x H x W` (D-major, then row-major). The voxel axes
//! map to world axes as `w -> x` (left/right), `h -> y` (posterior/anterior)
//! and `d -> z` (inferior/superior), so an axial slice is a fixed `d`.
//!
//! All geometry works in a normalized world frame: the volume is centered at
//! the origin and the longest center-to-center physical extent spans
//! `[-1, 1]`. Voxel centers are grid nodes (align-corners).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawio::{self, RawHeader};

/// Smallest crop accepted by default, per axis.
pub const DEFAULT_CROP_MIN: usize = 16;

/// Shape and physical sampling of a volume, without the voxel data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    /// `[D, H, W]`
    pub dims: [usize; 3],
    /// mm per voxel along `[x, y, z]`, i.e. along `[W, H, D]`.
    pub spacing: [f64; 3],
    /// World mm of voxel `(0, 0, 0)`, `[x, y, z]`.
    pub origin: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::param(format!("volume dims {dims:?} must each be >= 2")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::param(format!("spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("origin must be finite"));
        }
        Ok(VolumeGeometry {
            dims,
            spacing,
            origin,
        })
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel counts along `[x, y, z]`.
    fn counts_xyz(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    /// Multiplier from physical mm to normalized units.
    pub fn scale(&self) -> f64 {
        let c = self.counts_xyz();
        let longest = (0..3)
            .map(|a| (c[a] - 1) as f64 * self.spacing[a])
            .fold(0.0, f64::max);
        2.0 / longest
    }

    /// Distance between neighbouring voxel centers in normalized units, `[x, y, z]`.
    pub fn voxel_step(&self) -> [f64; 3] {
        let s = self.scale();
        [self.spacing[0] * s, self.spacing[1] * s, self.spacing[2] * s]
    }

    /// Half-extent of the voxel-center box in normalized units, `[x, y, z]`.
    /// The largest component is exactly 1.
    pub fn half_extent(&self) -> [f64; 3] {
        let c = self.counts_xyz();
        let step = self.voxel_step();
        [
            0.5 * (c[0] - 1) as f64 * step[0],
            0.5 * (c[1] - 1) as f64 * step[1],
            0.5 * (c[2] - 1) as f64 * step[2],
        ]
    }

    /// Normalized world position of a (fractional) voxel index `(d, h, w)`.
    pub fn voxel_to_world(&self, d: f64, h: f64, w: f64) -> [f64; 3] {
        let step = self.voxel_step();
        [
            (w - 0.5 * (self.dims[2] - 1) as f64) * step[0],
            (h - 0.5 * (self.dims[1] - 1) as f64) * step[1],
            (d - 0.5 * (self.dims[0] - 1) as f64) * step[2],
        ]
    }

    /// Inverse of [`voxel_to_world`](Self::voxel_to_world): returns `(d, h, w)`.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let step = self.voxel_step();
        [
            p[2] / step[2] + 0.5 * (self.dims[0] - 1) as f64,
            p[1] / step[1] + 0.5 * (self.dims[1] - 1) as f64,
            p[0] / step[0] + 0.5 * (self.dims[2] - 1) as f64,
        ]
    }

    /// Number of slices along the plane normal.
    pub fn slice_count(&self, plane: Plane) -> usize {
        match plane {
            Plane::Axial => self.dims[0],
            Plane::Coronal => self.dims[1],
            Plane::Sagittal => self.dims[2],
        }
    }

    /// Native `(rows, cols)` of a slice in `plane`.
    pub fn slice_shape(&self, plane: Plane) -> (usize, usize) {
        match plane {
            Plane::Axial => (self.dims[1], self.dims[2]),
            Plane::Coronal => (self.dims[0], self.dims[2]),
            Plane::Sagittal => (self.dims[0], self.dims[1]),
        }
    }

    /// Fractional voxel index `(d, h, w)` of slice pixel `(row, col)`.
    fn slice_to_voxel(plane: Plane, index: usize, row: f64, col: f64) -> [f64; 3] {
        let n = index as f64;
        match plane {
            Plane::Axial => [n, row, col],
            Plane::Coronal => [row, n, col],
            Plane::Sagittal => [row, col, n],
        }
    }
}

/// A scalar attenuation grid with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: VolumeGeometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: VolumeGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::param(format!(
                "volume of dims {:?} needs {} values, got {}",
                geometry.dims,
                geometry.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel at element {i}")));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        let geometry = VolumeGeometry::new(dims, [1.0; 3], [0.0; 3])?;
        Volume::new(geometry, vec![value; geometry.len()])
    }

    /// Builds a unit-spaced volume by evaluating `f` at every voxel's
    /// normalized world position.
    pub fn from_fn(dims: [usize; 3], f: impl Fn([f64; 3]) -> f32) -> Result<Self> {
        let geometry = VolumeGeometry::new(dims, [1.0; 3], [0.0; 3])?;
        let [d_n, h_n, w_n] = dims;
        let mut data = Vec::with_capacity(geometry.len());
        for d in 0..d_n {
            for h in 0..h_n {
                for w in 0..w_n {
                    data.push(f(geometry.voxel_to_world(d as f64, h as f64, w as f64)));
                }
            }
        }
        Volume::new(geometry, data)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        let [_, hn, wn] = self.geometry.dims;
        self.data[(d * hn + h) * wn + w]
    }

    /// Multiplies every voxel by `k`.
    pub fn scaled(&self, k: f32) -> Volume {
        Volume {
            geometry: self.geometry,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Native slice `n` of `plane` as a row-major image.
    pub fn native_slice(&self, plane: Plane, index: usize) -> Result<(usize, usize, Vec<f32>)> {
        let count = self.geometry.slice_count(plane);
        if index >= count {
            return Err(Error::Bounds(format!(
                "{plane:?} slice {index} outside 0..{count}"
            )));
        }
        let (rows, cols) = self.geometry.slice_shape(plane);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = match plane {
                    Plane::Axial => self.get(index, r, c),
                    Plane::Coronal => self.get(r, index, c),
                    Plane::Sagittal => self.get(r, c, index),
                };
                out.push(v);
            }
        }
        Ok((rows, cols, out))
    }

    pub fn header(&self) -> RawHeader {
        RawHeader::new(self.geometry.dims, self.geometry.spacing, self.geometry.origin)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        rawio::encode(&self.header(), &self.data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data) = rawio::decode(bytes)?;
        Self::from_raw(header, data)
    }

    fn from_raw(header: RawHeader, data: Vec<f32>) -> Result<Self> {
        let geometry = VolumeGeometry::new(header.dims, header.spacing, header.origin)
            .map_err(|e| Error::Format(e.to_string()))?;
        Volume::new(geometry, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        rawio::write_raw(path, &self.header(), &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data) = rawio::read_raw(path)?;
        Self::from_raw(header, data)
    }
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    vol.save(path)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    Volume::load(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::param(format!("unknown plane `{other}`"))),
        }
    }
}

/// Window inside a slice, in native slice pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Crop {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Crop {
    pub fn full(rows: usize, cols: usize) -> Self {
        Crop {
            row0: 0,
            col0: 0,
            rows,
            cols,
        }
    }

    /// Centered window of the given size.
    pub fn centered(native: (usize, usize), rows: usize, cols: usize) -> Self {
        Crop {
            row0: native.0.saturating_sub(rows) / 2,
            col0: native.1.saturating_sub(cols) / 2,
            rows,
            cols,
        }
    }
}

impl std::fmt::Display for Crop {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}@{},{}", self.rows, self.cols, self.row0, self.col0)
    }
}

/// Identifies the target slice and how it is sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceSpec {
    pub plane: Plane,
    pub index: usize,
    pub crop: Option<Crop>,
    /// `(rows, cols)` of the ground-truth / predicted image.
    pub out_res: (usize, usize),
}

impl SliceSpec {
    pub fn new(plane: Plane, index: usize, out_res: (usize, usize)) -> Self {
        SliceSpec {
            plane,
            index,
            crop: None,
            out_res,
        }
    }

    pub fn with_crop(mut self, crop: Crop) -> Self {
        self.crop = Some(crop);
        self
    }

    /// Checks the spec against `geom` and returns the effective window.
    pub fn window(&self, geom: &VolumeGeometry, crop_min: (usize, usize)) -> Result<Crop> {
        let count = geom.slice_count(self.plane);
        if self.index >= count {
            return Err(Error::Bounds(format!(
                "{:?} slice {} outside 0..{count}",
                self.plane, self.index
            )));
        }
        if self.out_res.0 < 2 || self.out_res.1 < 2 {
            return Err(Error::param("out_res must be at least 2x2"));
        }
        let (rows, cols) = geom.slice_shape(self.plane);
        let Some(c) = self.crop else {
            return Ok(Crop::full(rows, cols));
        };
        if c.row0 + c.rows > rows || c.col0 + c.cols > cols {
            return Err(Error::Bounds(format!(
                "crop {c} exceeds {rows}x{cols} slice"
            )));
        }
        if c.rows < crop_min.0.min(rows) || c.cols < crop_min.1.min(cols) || c.rows < 2 || c.cols < 2 {
            return Err(Error::Bounds(format!(
                "crop {c} smaller than minimum {}x{}",
                crop_min.0, crop_min.1
            )));
        }
        Ok(c)
    }
}

/// Row-major grid of normalized world coordinates `{x_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<[f64; 3]>,
}

impl CoordinateGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> [f64; 3] {
        self.points[r * self.cols + c]
    }
}

/// Position of sample `i` of `n` spread over `[start, start + len - 1]`,
/// both ends inclusive.
#[inline]
fn align_corners(start: usize, len: usize, i: usize, n: usize) -> f64 {
    if n == 1 {
        return start as f64 + 0.5 * (len - 1) as f64;
    }
    start as f64 + i as f64 * (len - 1) as f64 / (n - 1) as f64
}

/// The world coordinate grid covering the (possibly cropped) window of
/// `spec` at feature resolution `feature_res`.
pub fn slice_grid(
    geom: &VolumeGeometry,
    spec: &SliceSpec,
    feature_res: (usize, usize),
    crop_min: (usize, usize),
) -> Result<CoordinateGrid> {
    let win = spec.window(geom, crop_min)?;
    let (fr, fc) = feature_res;
    if fr == 0 || fc == 0 {
        return Err(Error::param("feature resolution must be non-zero"));
    }
    let mut points = Vec::with_capacity(fr * fc);
    for i in 0..fr {
        let row = align_corners(win.row0, win.rows, i, fr);
        for j in 0..fc {
            let col = align_corners(win.col0, win.cols, j, fc);
            let [d, h, w] = VolumeGeometry::slice_to_voxel(spec.plane, spec.index, row, col);
            points.push(geom.voxel_to_world(d, h, w));
        }
    }
    Ok(CoordinateGrid {
        rows: fr,
        cols: fc,
        points,
    })
}

/// Ground-truth image plus the matching coordinate grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedSlice {
    pub rows: usize,
    pub cols: usize,
    pub image: Vec<f32>,
    pub grid: CoordinateGrid,
}

/// Bilinear sample of a row-major image at fractional `(row, col)` inside it.
fn bilinear_2d(img: &[f32], rows: usize, cols: usize, row: f64, col: f64) -> f32 {
    let r0 = (row.floor().max(0.0) as usize).min(rows.saturating_sub(2));
    let c0 = (col.floor().max(0.0) as usize).min(cols.saturating_sub(2));
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let fy = row - r0 as f64;
    let fx = col - c0 as f64;
    let v00 = img[r0 * cols + c0] as f64;
    let v01 = img[r0 * cols + c1] as f64;
    let v10 = img[r1 * cols + c0] as f64;
    let v11 = img[r1 * cols + c1] as f64;
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bottom = v10 * (1.0 - fx) + v11 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Resamples the slice window to `spec.out_res` and builds the coordinate
/// grid at `feature_res`.
pub fn extract_slice(
    vol: &Volume,
    spec: &SliceSpec,
    feature_res: (usize, usize),
    crop_min: (usize, usize),
) -> Result<ExtractedSlice> {
    let geom = vol.geometry();
    let win = spec.window(geom, crop_min)?;
    let (rows, cols, native) = vol.native_slice(spec.plane, spec.index)?;
    let (out_r, out_c) = spec.out_res;
    let mut image = Vec::with_capacity(out_r * out_c);
    for i in 0..out_r {
        let row = align_corners(win.row0, win.rows, i, out_r);
        for j in 0..out_c {
            let col = align_corners(win.col0, win.cols, j, out_c);
            image.push(bilinear_2d(&native, rows, cols, row, col));
        }
    }
    let grid = slice_grid(geom, spec, feature_res, crop_min)?;
    Ok(ExtractedSlice {
        rows: out_r,
        cols: out_c,
        image,
        grid,
    })
}

/// Density ranges `[lo, hi]` of the phantom's structures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityRanges {
    pub body: [f64; 2],
    pub organ: [f64; 2],
    pub spine: [f64; 2],
}

impl Default for DensityRanges {
    fn default() -> Self {
        DensityRanges {
            body: [0.2, 0.35],
            organ: [0.3, 0.7],
            spine: [0.9, 0.9],
        }
    }
}

/// Parameters of an ellipsoid/cylinder torso phantom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_organs: usize,
    /// Body ellipsoid semi-axes `[x, y, z]` as fractions of the volume extent.
    pub body_axes: [f64; 3],
    pub density_ranges: DensityRanges,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            n_organs: 6,
            body_axes: [0.42, 0.32, 0.46],
            density_ranges: DensityRanges::default(),
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.body_axes.iter().any(|&a| !(a > 0.0 && a <= 0.5)) {
            return Err(Error::param(format!(
                "body semi-axes {:?} must lie in (0, 0.5]",
                self.body_axes
            )));
        }
        let r = &self.density_ranges;
        for (name, [lo, hi]) in [("body", r.body), ("organ", r.organ), ("spine", r.spine)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::param(format!(
                    "{name} density range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
                )));
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    density: f32,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Torso-like phantom: a body ellipsoid, `n_organs` random interior
/// ellipsoids and a dense posterior cylinder running along z. Background is 0.
/// Pure function of `(spec, dims)`.
pub fn generate_phantom(spec: &PhantomSpec, dims: [usize; 3]) -> Result<Volume> {
    if dims.iter().any(|&n| n < 16) {
        return Err(Error::param(format!("phantom dims {dims:?} must each be >= 16")));
    }
    spec.validate()?;
    let geometry = VolumeGeometry::new(dims, [1.0; 3], [0.0; 3])?;
    let half = geometry.half_extent();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let body = Ellipsoid {
        center: [0.0; 3],
        axes: [
            spec.body_axes[0] * 2.0 * half[0],
            spec.body_axes[1] * 2.0 * half[1],
            spec.body_axes[2] * 2.0 * half[2],
        ],
        density: draw(&mut rng, spec.density_ranges.body) as f32,
    };

    let mut organs = Vec::with_capacity(spec.n_organs);
    for _ in 0..spec.n_organs {
        // center uniformly inside the inner 55% of the body
        let center = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if c.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break std::array::from_fn(|a| c[a] * 0.55 * body.axes[a]);
            }
        };
        let axes = std::array::from_fn(|a| rng.random_range(0.12..0.32) * body.axes[a]);
        let density = draw(&mut rng, spec.density_ranges.organ) as f32;
        organs.push(Ellipsoid {
            center,
            axes,
            density,
        });
    }

    let spine_density = draw(&mut rng, spec.density_ranges.spine) as f32;
    let spine_center = [0.0, -0.6 * body.axes[1]];
    let spine_radius = 0.14 * body.axes[0].min(body.axes[1]);
    let spine_half_len = 0.9 * body.axes[2];

    let [dn, hn, wn] = dims;
    let mut data = vec![0.0f32; geometry.len()];
    for d in 0..dn {
        for h in 0..hn {
            for w in 0..wn {
                let p = geometry.voxel_to_world(d as f64, h as f64, w as f64);
                if !body.contains(p) {
                    continue;
                }
                let mut v = body.density;
                for o in &organs {
                    if o.contains(p) {
                        v = o.density;
                    }
                }
                let dx = p[0] - spine_center[0];
                let dy = p[1] - spine_center[1];
                if dx * dx + dy * dy <= spine_radius * spine_radius && p[2].abs() <= spine_half_len {
                    v = spine_density;
                }
                data[(d * hn + h) * wn + w] = v;
            }
        }
    }
    Volume::new(geometry, data)
}
