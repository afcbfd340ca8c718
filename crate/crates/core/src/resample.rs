//! Placing 2D detector features at 3D slice coordinates.
//!
//! Every slice coordinate is projected into a view and the view's feature map
//! is read there by bilinear interpolation. Detector coordinates follow the
//! align-corners convention: `u = (-1, -1)` is the centre of the top-left
//! node, `u = (1, 1)` the centre of the bottom-right one; `u[0]` runs along
//! columns and `u[1]` along rows.
//!
//! Because the cameras are fixed, the sampling locations never change during
//! training; a [`SamplePlan`] precomputes the four taps of every point once
//! and then acts as a sparse linear operator (and its adjoint) on feature maps.

use std::path::Path;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::geometry::{project_point, project_point_orthogonal, CameraPose, View};
use crate::rawio::{write_raw, RawHeader};
use crate::volume::CoordinateGrid;

/// Behaviour for detector coordinates outside `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Clamp to the nearest border node.
    #[default]
    Border,
    /// Nodes outside the map contribute zero.
    Zeros,
}

/// Channel-major `C x H x W` feature grid over the detector square.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 || channels == 0 {
            return Err(Error::param(format!(
                "feature map must be at least 1x2x2, got {channels}x{rows}x{cols}"
            )));
        }
        if data.len() != channels * rows * cols {
            return Err(Error::PayloadSize {
                expected: channels * rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn filled(channels: usize, rows: usize, cols: usize, v: f64) -> Result<Self> {
        Self::new(channels, rows, cols, vec![v; channels * rows * cols])
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.rows + r) * self.cols + col]
    }
}

/// Features gathered on a slice grid, channel-major `C x rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampledFeatures {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ResampledFeatures {
    /// Feature vector at grid point `(r, c)`.
    pub fn vector(&self, r: usize, c: usize) -> Vec<f64> {
        let n = self.rows * self.cols;
        (0..self.channels).map(|ch| self.data[ch * n + r * self.cols + c]).collect()
    }

    /// Dumps the grid as a raw f32le file with dims `[C, rows, cols]`.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let header = RawHeader::new([self.channels, self.rows, self.cols], [1.0; 3], [0.0; 3]);
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        write_raw(path, &header, &data)
    }
}

/// Four bilinear taps: flat node indices into an `H x W` plane and weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

fn axis_taps(u: f64, n: usize, padding: Padding) -> ([usize; 2], [f64; 2]) {
    let last = (n - 1) as f64;
    match padding {
        Padding::Border => {
            let x = (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * last;
            let i0 = (x.floor() as usize).min(n - 2);
            let f = x - i0 as f64;
            ([i0, i0 + 1], [1.0 - f, f])
        }
        Padding::Zeros => {
            let x = (u + 1.0) * 0.5 * last;
            let fl = x.floor();
            let f = x - fl;
            let mut idx = [0usize; 2];
            let mut w = [0.0; 2];
            for (k, (node, wk)) in [(fl, 1.0 - f), (fl + 1.0, f)].into_iter().enumerate() {
                if node >= 0.0 && node <= last {
                    idx[k] = node as usize;
                    w[k] = wk;
                }
            }
            (idx, w)
        }
    }
}

/// Bilinear taps of detector point `u` on an `rows x cols` node grid.
pub fn bilinear_taps(u: [f64; 2], rows: usize, cols: usize, padding: Padding) -> Tap {
    let (cx, wx) = axis_taps(u[0], cols, padding);
    let (ry, wy) = axis_taps(u[1], rows, padding);
    Tap {
        index: [
            ry[0] * cols + cx[0],
            ry[0] * cols + cx[1],
            ry[1] * cols + cx[0],
            ry[1] * cols + cx[1],
        ],
        weight: [wy[0] * wx[0], wy[0] * wx[1], wy[1] * wx[0], wy[1] * wx[1]],
    }
}

/// Feature vector at detector point `u`, border-clamped.
pub fn bilinear_sample(fm: &FeatureMap, u: [f64; 2]) -> Vec<f64> {
    bilinear_sample_with(fm, u, Padding::Border)
}

pub fn bilinear_sample_with(fm: &FeatureMap, u: [f64; 2], padding: Padding) -> Vec<f64> {
    let tap = bilinear_taps(u, fm.rows, fm.cols, padding);
    let plane = fm.rows * fm.cols;
    (0..fm.channels)
        .map(|c| {
            let p = &fm.data[c * plane..(c + 1) * plane];
            (0..4).map(|k| tap.weight[k] * p[tap.index[k]]).sum()
        })
        .collect()
}

/// Precomputed bilinear gather from one `H x W` source plane onto `groups`
/// output grids of `rows x cols` points each.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    src: (usize, usize),
    grid: (usize, usize),
    groups: usize,
    taps: Vec<Tap>,
}

impl SamplePlan {
    /// Plan for explicit detector points laid out row-major on a
    /// `rows x cols` grid.
    pub fn from_points(points: &[[f64; 2]], grid: (usize, usize), src: (usize, usize), padding: Padding) -> Result<Self> {
        if src.0 < 2 || src.1 < 2 {
            return Err(Error::param(format!("source map must be at least 2x2, got {src:?}")));
        }
        if points.len() != grid.0 * grid.1 {
            return Err(Error::param(format!(
                "{} points do not fill a {}x{} grid",
                points.len(),
                grid.0,
                grid.1
            )));
        }
        if points.iter().any(|u| !u[0].is_finite() || !u[1].is_finite()) {
            return Err(Error::param("non-finite detector coordinate"));
        }
        Ok(SamplePlan {
            src,
            grid,
            groups: 1,
            taps: points.iter().map(|&u| bilinear_taps(u, src.0, src.1, padding)).collect(),
        })
    }

    /// Plan for a slice grid seen through a pinhole camera.
    pub fn perspective(pose: &CameraPose, grid: &CoordinateGrid, src: (usize, usize), padding: Padding) -> Result<Self> {
        let points = grid
            .points
            .iter()
            .map(|&x| project_point(pose, x).map(|p| p.u))
            .collect::<Result<Vec<_>>>()?;
        Self::from_points(&points, (grid.rows, grid.cols), src, padding)
    }

    /// Plan for a slice grid under parallel-beam projection.
    pub fn orthogonal(view: View, grid: &CoordinateGrid, src: (usize, usize), padding: Padding) -> Result<Self> {
        let points: Vec<[f64; 2]> = grid.points.iter().map(|&x| project_point_orthogonal(view, x)).collect();
        Self::from_points(&points, (grid.rows, grid.cols), src, padding)
    }

    /// Stacks plans that share source and grid dimensions into one
    /// multi-group plan.
    pub fn stack(plans: &[SamplePlan]) -> Result<Self> {
        let first = plans.first().ok_or_else(|| Error::param("cannot stack zero plans"))?;
        let mut taps = Vec::with_capacity(plans.iter().map(|p| p.taps.len()).sum());
        let mut groups = 0;
        for p in plans {
            if p.src != first.src || p.grid != first.grid {
                return Err(Error::param("stacked plans must share source and grid dims"));
            }
            taps.extend_from_slice(&p.taps);
            groups += p.groups;
        }
        Ok(SamplePlan {
            src: first.src,
            grid: first.grid,
            groups,
            taps,
        })
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.src
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    fn points_per_group(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Gathers `src` (`C x H x W`) into `groups x C x points`.
    pub fn apply<T: Real>(&self, src: &[T], channels: usize, exec: Exec) -> Vec<T> {
        let plane = self.src.0 * self.src.1;
        let n = self.points_per_group();
        assert_eq!(src.len(), channels * plane, "source length");
        let mut out = vec![T::zero(); self.groups * channels * n];
        if n == 0 {
            return out;
        }
        exec::for_each_chunk(exec, &mut out, n, |gc, dst| {
            let (g, c) = (gc / channels, gc % channels);
            let p = &src[c * plane..(c + 1) * plane];
            for (d, tap) in dst.iter_mut().zip(&self.taps[g * n..(g + 1) * n]) {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc = acc + T::of(tap.weight[k]) * p[tap.index[k]];
                }
                *d = acc;
            }
        });
        out
    }

    /// Transpose of [`apply`](Self::apply): scatters `groups x C x points`
    /// back onto `C x H x W`. Channels run in parallel; within a channel the
    /// accumulation order is fixed, so the result is deterministic.
    pub fn adjoint<T: Real>(&self, upstream: &[T], channels: usize, exec: Exec) -> Vec<T> {
        let plane = self.src.0 * self.src.1;
        let n = self.points_per_group();
        assert_eq!(upstream.len(), self.groups * channels * n, "upstream length");
        let mut out = vec![T::zero(); channels * plane];
        exec::for_each_chunk(exec, &mut out, plane, |c, dst| {
            for g in 0..self.groups {
                let up = &upstream[(g * channels + c) * n..(g * channels + c + 1) * n];
                for (&u, tap) in up.iter().zip(&self.taps[g * n..(g + 1) * n]) {
                    for k in 0..4 {
                        dst[tap.index[k]] = dst[tap.index[k]] + T::of(tap.weight[k]) * u;
                    }
                }
            }
        });
        out
    }
}

fn gather(fm: &FeatureMap, plan: &SamplePlan) -> ResampledFeatures {
    let (rows, cols) = plan.grid_dims();
    ResampledFeatures {
        channels: fm.channels,
        rows,
        cols,
        data: plan.apply(&fm.data, fm.channels, Exec::default()),
    }
}

/// Feature vectors of `fm` at the perspective projections of every grid point.
pub fn resample_local_features(fm: &FeatureMap, pose: &CameraPose, grid: &CoordinateGrid) -> Result<ResampledFeatures> {
    let plan = SamplePlan::perspective(pose, grid, (fm.rows, fm.cols), Padding::Border)?;
    Ok(gather(fm, &plan))
}

/// Parallel-beam counterpart of [`resample_local_features`].
pub fn resample_orthogonal(fm: &FeatureMap, view: View, grid: &CoordinateGrid) -> ResampledFeatures {
    let plan = SamplePlan::orthogonal(view, grid, (fm.rows, fm.cols), Padding::Border)
        .expect("orthogonal projection of a finite grid is always valid");
    gather(fm, &plan)
}

/// Gradient of `<resample(fm), upstream>` with respect to `fm`.
pub fn resample_backward(fm: &FeatureMap, pose: &CameraPose, grid: &CoordinateGrid, upstream: &ResampledFeatures) -> Result<FeatureMap> {
    if upstream.channels != fm.channels || upstream.rows != grid.rows || upstream.cols != grid.cols {
        return Err(Error::param(format!(
            "upstream gradient is {}x{}x{}, expected {}x{}x{}",
            upstream.channels, upstream.rows, upstream.cols, fm.channels, grid.rows, grid.cols
        )));
    }
    let plan = SamplePlan::perspective(pose, grid, (fm.rows, fm.cols), Padding::Border)?;
    let data = plan.adjoint(&upstream.data, fm.channels, Exec::default());
    Ok(FeatureMap {
        channels: fm.channels,
        rows: fm.rows,
        cols: fm.cols,
        data,
    })
}
