//! Pinhole cameras, voxel lattices, bilinear sampling and depth binning.
//!
//! Pixel coordinates are continuous with pixel `(0, 0)` covering
//! `[0, 1) x [0, 1)`, so its centre sits at `(0.5, 0.5)`.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Coordinates written for voxels that do not project into the image.
pub const INVALID_PIXEL: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRaw", into = "CameraModelRaw")]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    cam_from_world: Matrix4<f64>,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraModelRaw {
    intrinsics: [[f64; 3]; 3],
    cam_from_world: [[f64; 4]; 4],
    width: usize,
    height: usize,
}

impl TryFrom<CameraModelRaw> for CameraModel {
    type Error = Error;

    fn try_from(raw: CameraModelRaw) -> Result<Self> {
        let k = Matrix3::from_fn(|r, c| raw.intrinsics[r][c]);
        let t = Matrix4::from_fn(|r, c| raw.cam_from_world[r][c]);
        CameraModel::new(k, t, raw.width, raw.height)
    }
}

impl From<CameraModel> for CameraModelRaw {
    fn from(cam: CameraModel) -> Self {
        CameraModelRaw {
            intrinsics: std::array::from_fn(|r| std::array::from_fn(|c| cam.intrinsics[(r, c)])),
            cam_from_world: std::array::from_fn(|r| std::array::from_fn(|c| cam.cam_from_world[(r, c)])),
            width: cam.width,
            height: cam.height,
        }
    }
}

impl CameraModel {
    pub fn new(intrinsics: Matrix3<f64>, cam_from_world: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera("intrinsics must be [fx 0 cx; 0 fy cy; 0 0 1]".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image must be non-empty".into()));
        }
        let r = cam_from_world.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!("rotation is not orthonormal (error {err:e})")));
        }
        let bottom = cam_from_world.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::InvalidCamera("extrinsics must be a rigid 4x4 transform".into()));
        }
        if !intrinsics.iter().chain(cam_from_world.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite entries".into()));
        }
        Ok(CameraModel { intrinsics, cam_from_world, width, height })
    }

    /// Camera at `eye` looking at `target`; image `y` points along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::InvalidCamera("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye.coords);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        CameraModel::new(k, m, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn cam_from_world(&self) -> &Matrix4<f64> {
        &self.cam_from_world
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn center(&self) -> Point3<f64> {
        let r = self.cam_from_world.fixed_view::<3, 3>(0, 0);
        let t = self.cam_from_world.fixed_view::<3, 1>(0, 3);
        Point3::from(-(r.transpose() * t))
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        let m = &self.cam_from_world;
        Vector3::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
        )
    }

    /// World-frame unit direction of the ray through continuous pixel
    /// coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        let r = self.cam_from_world.fixed_view::<3, 3>(0, 0);
        (r.transpose() * d_cam).normalize()
    }

    pub fn project(&self, p: &Point3<f64>) -> Projection {
        let pc = self.to_camera(p);
        let depth = pc.z;
        if depth <= 0.0 {
            return Projection::invalid(depth);
        }
        let u = self.fx() * pc.x / depth + self.cx();
        let v = self.fy() * pc.y / depth + self.cy();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Projection { u, v, depth, valid: true }
        } else {
            Projection::invalid(depth)
        }
    }

    /// Same camera translated by `offset` metres along its own x axis.
    pub fn shifted_along_x(&self, offset: f64) -> CameraModel {
        let mut m = self.cam_from_world;
        m[(0, 3)] -= offset;
        CameraModel { intrinsics: self.intrinsics, cam_from_world: m, width: self.width, height: self.height }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Projection {
    fn invalid(depth: f64) -> Self {
        Projection { u: INVALID_PIXEL, v: INVALID_PIXEL, depth, valid: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub left: CameraModel,
    pub right: CameraModel,
}

impl CameraRig {
    pub fn new(left: CameraModel, right: CameraModel) -> Result<Self> {
        if left.width != right.width || left.height != right.height {
            return Err(Error::InvalidCamera("stereo cameras must share image dimensions".into()));
        }
        Ok(CameraRig { left, right })
    }

    /// Rectified pair: the right camera sits `baseline` metres along the
    /// left camera's x axis.
    pub fn rectified(left: CameraModel, baseline: f64) -> Result<Self> {
        let right = left.shifted_along_x(baseline);
        CameraRig::new(left, right)
    }

    pub fn cameras(&self) -> [&CameraModel; 2] {
        [&self.left, &self.right]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VoxelGridRaw", into = "VoxelGridRaw")]
pub struct VoxelGridSpec {
    origin: [f64; 3],
    dims: [usize; 3],
    voxel_size: f64,
}

#[derive(Serialize, Deserialize)]
struct VoxelGridRaw {
    origin: [f64; 3],
    dims: [usize; 3],
    voxel_size: f64,
}

impl TryFrom<VoxelGridRaw> for VoxelGridSpec {
    type Error = Error;
    fn try_from(r: VoxelGridRaw) -> Result<Self> {
        VoxelGridSpec::new(r.origin, r.dims, r.voxel_size)
    }
}

impl From<VoxelGridSpec> for VoxelGridRaw {
    fn from(g: VoxelGridSpec) -> Self {
        VoxelGridRaw { origin: g.origin, dims: g.dims, voxel_size: g.voxel_size }
    }
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims {dims:?} must all be >= 1")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidGrid(format!("voxel size {voxel_size} must be positive")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(VoxelGridSpec { origin, dims, voxel_size })
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major voxel index, `k` fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let j = (index / self.dims[2]) % self.dims[1];
        let i = index / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn centroid(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        let s = self.voxel_size;
        Point3::new(
            self.origin[0] + (i as f64 + 0.5) * s,
            self.origin[1] + (j as f64 + 0.5) * s,
            self.origin[2] + (k as f64 + 0.5) * s,
        )
    }

    pub fn centroids(&self) -> impl Iterator<Item = Point3<f64>> + '_ {
        (0..self.n_voxels()).map(move |n| {
            let [i, j, k] = self.coords(n);
            self.centroid(i, j, k)
        })
    }

    /// Upper corner of the lattice.
    pub fn extent_max(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }
}

/// Projects every voxel centroid into `cam`, in voxel index order.
pub fn project_voxels(grid: &VoxelGridSpec, cam: &CameraModel) -> Vec<Projection> {
    grid.centroids().map(|p| cam.project(&p)).collect()
}

/// Bilinear taps for continuous pixel `(u, v)` on a `height x width` map,
/// or `None` when the point lies outside the image. Taps are clamped to the
/// border, so every returned index is in bounds.
pub fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
        return None;
    }
    let fx = u - 0.5;
    let fy = v - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let clamp_x = |x: f64| x.clamp(0.0, (width - 1) as f64) as usize;
    let clamp_y = |y: f64| y.clamp(0.0, (height - 1) as f64) as usize;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    Some([
        (ya * width + xa, (1.0 - tx) * (1.0 - ty)),
        (ya * width + xb, tx * (1.0 - ty)),
        (yb * width + xa, (1.0 - tx) * ty),
        (yb * width + xb, tx * ty),
    ])
}

/// A channels-last 2D feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn constant(height: usize, width: usize, value: &[f64]) -> Self {
        let data = (0..height * width).flat_map(|_| value.iter().copied()).collect();
        FeatureMap { height, width, channels: value.len(), data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// Bilinear sample at `(u, v)`; the zero vector when `valid` is false or
/// the point lies outside the map.
pub fn sample_bilinear(map: &FeatureMap, u: f64, v: f64, valid: bool) -> Vec<f64> {
    let c = map.channels;
    let mut out = vec![0.0; c];
    if !valid {
        return out;
    }
    if let Some(taps) = bilinear_taps(u, v, map.width, map.height) {
        for (p, w) in taps {
            for (o, x) in out.iter_mut().zip(&map.data[p * c..(p + 1) * c]) {
                *o += w * x;
            }
        }
    }
    out
}

/// Per-pixel metric depth; zero (or any non-positive value) marks a hole.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("depth map {height}x{width} needs {} values", height * width)));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Self {
        DepthMap { height, width, data: vec![depth; height * width] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let d = self.get(x, y);
        d.is_finite() && d > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// Uniform bin widths.
    Ud,
    /// Widths growing linearly with the bin index.
    Lid,
    /// Log-spaced bins.
    Sid,
}

impl Discretization {
    pub const ALL: [Discretization; 3] = [Discretization::Ud, Discretization::Lid, Discretization::Sid];

    pub fn name(self) -> &'static str {
        match self {
            Discretization::Ud => "ud",
            Discretization::Lid => "lid",
            Discretization::Sid => "sid",
        }
    }
}

impl std::str::FromStr for Discretization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ud" => Ok(Discretization::Ud),
            "lid" => Ok(Discretization::Lid),
            "sid" => Ok(Discretization::Sid),
            other => Err(Error::Config(format!("unknown discretization '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DepthBinRaw", into = "DepthBinRaw")]
pub struct DepthBinSpec {
    d_min: f64,
    d_max: f64,
    bins: usize,
    mode: Discretization,
}

#[derive(Serialize, Deserialize)]
struct DepthBinRaw {
    d_min: f64,
    d_max: f64,
    bins: usize,
    mode: Discretization,
}

impl TryFrom<DepthBinRaw> for DepthBinSpec {
    type Error = Error;
    fn try_from(r: DepthBinRaw) -> Result<Self> {
        DepthBinSpec::new(r.d_min, r.d_max, r.bins, r.mode)
    }
}

impl From<DepthBinSpec> for DepthBinRaw {
    fn from(s: DepthBinSpec) -> Self {
        DepthBinRaw { d_min: s.d_min, d_max: s.d_max, bins: s.bins, mode: s.mode }
    }
}

impl DepthBinSpec {
    /// `d_min` may be zero for UD and LID; SID needs it strictly positive.
    pub fn new(d_min: f64, d_max: f64, bins: usize, mode: Discretization) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite() && d_min >= 0.0 && d_min < d_max) {
            return Err(Error::InvalidBins(format!("need 0 <= d_min < d_max, got [{d_min}, {d_max}]")));
        }
        if mode == Discretization::Sid && d_min <= 0.0 {
            return Err(Error::InvalidBins("SID needs d_min > 0".into()));
        }
        if bins < 2 {
            return Err(Error::InvalidBins(format!("need at least 2 bins, got {bins}")));
        }
        Ok(DepthBinSpec { d_min, d_max, bins, mode })
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mode(&self) -> Discretization {
        self.mode
    }

    pub fn with_mode(&self, mode: Discretization) -> Result<Self> {
        DepthBinSpec::new(self.d_min, self.d_max, self.bins, mode)
    }

    /// Depth at continuous bin coordinate `t` in `[0, D]`; bin `k` spans
    /// `[k, k + 1]` and its centre sits at `k + 0.5`.
    pub fn depth_at(&self, t: f64) -> f64 {
        let d = self.bins as f64;
        match self.mode {
            Discretization::Ud => self.d_min + (self.d_max - self.d_min) * t / d,
            Discretization::Lid => lid_center(self, t),
            Discretization::Sid => self.d_min * (self.d_max / self.d_min).powf(t / d),
        }
    }

    /// Inverse of [`depth_at`](Self::depth_at) for depths in range.
    pub fn coordinate(&self, depth: f64) -> Result<f64> {
        if !(depth >= self.d_min && depth <= self.d_max) {
            return Err(Error::DepthOutOfRange { depth, min: self.d_min, max: self.d_max });
        }
        Ok(self.coordinate_unchecked(depth))
    }

    /// Continuous bin coordinate without the range check; values outside
    /// `[0, D]` mean the depth is outside the discretized range.
    pub fn coordinate_unchecked(&self, depth: f64) -> f64 {
        let d = self.bins as f64;
        match self.mode {
            Discretization::Ud => (depth - self.d_min) / (self.d_max - self.d_min) * d,
            Discretization::Lid => lid_coordinate(self, depth),
            Discretization::Sid => {
                if depth <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    d * (depth / self.d_min).ln() / (self.d_max / self.d_min).ln()
                }
            }
        }
    }
}

/// Linear-increasing discretization: depth at (possibly fractional) bin
/// index `d_i`. Evaluates the formula regardless of `spec.mode()`.
pub fn lid_center(spec: &DepthBinSpec, d_i: f64) -> f64 {
    let d = spec.bins as f64;
    // interpolation form keeps both endpoints exact
    let f = d_i * (d_i + 1.0) / (d * (d + 1.0));
    spec.d_min * (1.0 - f) + spec.d_max * f
}

/// Nonnegative root of [`lid_center`] for `d_c` in `[d_min, d_max]`.
pub fn lid_inverse(spec: &DepthBinSpec, d_c: f64) -> Result<f64> {
    if !(d_c >= spec.d_min && d_c <= spec.d_max) {
        return Err(Error::DepthOutOfRange { depth: d_c, min: spec.d_min, max: spec.d_max });
    }
    Ok(lid_coordinate(spec, d_c))
}

fn lid_coordinate(spec: &DepthBinSpec, d_c: f64) -> f64 {
    let d = spec.bins as f64;
    let t = (d_c - spec.d_min) * d * (d + 1.0) / (spec.d_max - spec.d_min);
    if t < -0.25 {
        // below the parabola's vertex; no real root, clearly out of range
        return -1.0;
    }
    (-1.0 + (1.0 + 4.0 * t).sqrt()) / 2.0
}

/// The `D` bin centres in metres, strictly increasing.
pub fn bin_centers(spec: &DepthBinSpec) -> Vec<f64> {
    (0..spec.bins).map(|k| spec.depth_at(k as f64 + 0.5)).collect()
}

/// Index of the nearest bin centre; ties go to the lower index and depths
/// outside the range clamp to the end bins.
pub fn depth_to_bin(spec: &DepthBinSpec, d: f64) -> Result<usize> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::Domain(format!("depth must be finite and positive, got {d}")));
    }
    Ok(nearest_center(&bin_centers(spec), d))
}

pub(crate) fn nearest_center(centers: &[f64], d: f64) -> usize {
    let upper = centers.partition_point(|&c| c < d);
    if upper == 0 {
        return 0;
    }
    if upper == centers.len() {
        return centers.len() - 1;
    }
    let lo = upper - 1;
    if d - centers[lo] <= centers[upper] - d {
        lo
    } else {
        upper
    }
}
