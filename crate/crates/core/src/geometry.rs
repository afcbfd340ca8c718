//! Pinhole cameras for the biplanar rig.
//!
//! A world point `x` maps to the camera frame as `p = R x + t`; the third
//! camera axis is the viewing direction, so `p[2]` is the depth. Detector
//! coordinates are `u = c + f * (p[0], p[1]) / p[2]`, normalized so that the
//! detector spans `[-1, 1]^2` with its extreme pixel centers on the edges
//! (align-corners, same convention as the feature sampler).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Points closer to the source than this are rejected.
pub const MIN_DEPTH: f64 = 1e-6;

/// Radius of the sphere bounding the normalized volume cube.
pub const VOLUME_BOUNDING_RADIUS: f64 = 1.732_050_807_568_877_2;

pub const DEFAULT_SOURCE_DIST: f64 = 3.0;
pub const DEFAULT_FOCAL: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "Lat")]
    Lat,
}

impl View {
    pub const BOTH: [View; 2] = [View::Pa, View::Lat];

    pub fn name(self) -> &'static str {
        match self {
            View::Pa => "PA",
            View::Lat => "Lat",
        }
    }
}

/// How slice coordinates are mapped onto the detector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Perspective,
    Orthogonal,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Perspective => "perspective",
            Projection::Orthogonal => "orthogonal",
        }
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perspective" => Ok(Projection::Perspective),
            "orthogonal" => Ok(Projection::Orthogonal),
            other => Err(Error::param(format!("unknown projection `{other}`"))),
        }
    }
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[inline]
fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|j| m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2])
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn transpose(m: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[j][i]))
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation by `angle` radians about `axis` (Rodrigues).
pub fn rotation_about(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

/// Extrinsics plus pinhole intrinsics of one X-ray source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Rows are the camera axes expressed in world coordinates.
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Source-to-detector distance in normalized units.
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub view: View,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionPoint {
    pub u: [f64; 2],
    pub depth: f64,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3, focal: f64, principal_point: [f64; 2], view: View) -> Result<Self> {
        let pose = CameraPose {
            rotation,
            translation,
            focal,
            principal_point,
            view,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Geometry(format!("focal {} must be positive", self.focal)));
        }
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let off = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        if !(off <= 1e-9) {
            return Err(Error::Geometry(format!("rotation is not orthonormal (|R^T R - I| = {off:e})")));
        }
        let d = det(&self.rotation);
        if !((d - 1.0).abs() <= 1e-9) {
            return Err(Error::Geometry(format!("rotation determinant {d} != 1")));
        }
        if self.translation.iter().chain(&self.principal_point).any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite translation or principal point".into()));
        }
        Ok(())
    }

    /// Camera pose looking from `source` along unit `axis`, with `up_hint`
    /// the world direction of decreasing detector rows.
    fn look_from(source: Vec3, axis: Vec3, up_hint: Vec3, focal: f64, view: View) -> Result<Self> {
        let z = axis;
        let y = [-up_hint[0], -up_hint[1], -up_hint[2]];
        let x = [
            y[1] * z[2] - y[2] * z[1],
            y[2] * z[0] - y[0] * z[2],
            y[0] * z[1] - y[1] * z[0],
        ];
        let rotation = [x, y, z];
        let rs = mat_vec(&rotation, source);
        CameraPose::new(rotation, [-rs[0], -rs[1], -rs[2]], focal, [0.0, 0.0], view)
    }

    /// World position of the X-ray source, `-R^T t`.
    pub fn source_position(&self) -> Vec3 {
        let s = mat_t_vec(&self.rotation, self.translation);
        [-s[0], -s[1], -s[2]]
    }

    /// World viewing direction (unit).
    pub fn axis(&self) -> Vec3 {
        self.rotation[2]
    }

    pub fn to_camera(&self, x: Vec3) -> Vec3 {
        let p = mat_vec(&self.rotation, x);
        [p[0] + self.translation[0], p[1] + self.translation[1], p[2] + self.translation[2]]
    }

    /// Unit world direction of the ray from the source through detector point `u`.
    pub fn ray_direction(&self, u: [f64; 2]) -> Vec3 {
        let c = [
            (u[0] - self.principal_point[0]) / self.focal,
            (u[1] - self.principal_point[1]) / self.focal,
            1.0,
        ];
        let d = mat_t_vec(&self.rotation, c);
        let n = norm(d);
        [d[0] / n, d[1] / n, d[2] / n]
    }

    /// The same camera after rotating the world by `q`: projecting `q x`
    /// with the returned pose equals projecting `x` with `self`.
    pub fn rotated(&self, q: &Mat3) -> CameraPose {
        CameraPose {
            rotation: mat_mul(&self.rotation, &transpose(q)),
            ..*self
        }
    }
}

/// Perspective projection of `x` onto the camera's detector.
pub fn project_point(pose: &CameraPose, x: Vec3) -> Result<ProjectionPoint> {
    let p = pose.to_camera(x);
    let depth = p[2];
    if !(depth > MIN_DEPTH) {
        return Err(Error::Projection { depth });
    }
    Ok(ProjectionPoint {
        u: [
            pose.principal_point[0] + pose.focal * p[0] / depth,
            pose.principal_point[1] + pose.focal * p[1] / depth,
        ],
        depth,
    })
}

/// Parallel-beam projection: drops the coordinate along the view axis and
/// keeps the two transverse ones, oriented like the rig's camera for that
/// view so it is the telecentric limit of [`project_point`].
pub fn project_point_orthogonal(view: View, x: Vec3) -> [f64; 2] {
    match view {
        View::Pa => [x[0], -x[2]],
        View::Lat => [x[1], -x[2]],
    }
}

/// The two perpendicular source/detector pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiplanarRig {
    pub pa: CameraPose,
    pub lat: CameraPose,
}

impl Default for BiplanarRig {
    fn default() -> Self {
        make_biplanar_rig(DEFAULT_SOURCE_DIST, DEFAULT_FOCAL).expect("default rig is valid")
    }
}

impl BiplanarRig {
    pub fn pose(&self, view: View) -> &CameraPose {
        match view {
            View::Pa => &self.pa,
            View::Lat => &self.lat,
        }
    }
}

/// PA source on -y looking +y, lateral source on +x looking -x, both at
/// `source_dist` from the origin. Detector rows run towards -z on both.
pub fn make_biplanar_rig(source_dist: f64, focal: f64) -> Result<BiplanarRig> {
    if !(source_dist > VOLUME_BOUNDING_RADIUS && source_dist.is_finite()) {
        return Err(Error::Geometry(format!(
            "source distance {source_dist} lies inside the volume bounding sphere (radius {VOLUME_BOUNDING_RADIUS:.4})"
        )));
    }
    if !(focal > 0.0 && focal.is_finite()) {
        return Err(Error::Geometry(format!("focal {focal} must be positive")));
    }
    let up = [0.0, 0.0, 1.0];
    let pa = CameraPose::look_from([0.0, -source_dist, 0.0], [0.0, 1.0, 0.0], up, focal, View::Pa)?;
    let lat = CameraPose::look_from([source_dist, 0.0, 0.0], [-1.0, 0.0, 0.0], up, focal, View::Lat)?;
    Ok(BiplanarRig { pa, lat })
}
