//! Brute-force reference implementations shared by the property and
//! acceptance targets. Each one is written from the definitions with plain
//! loops and arrays, without calling the library routine it checks.
#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereo_ssc::camera::{CameraModel, CameraRig, DepthBinSpec, Discretization, VoxelGridSpec};
use stereo_ssc::losses::{VoxelLabels, IGNORE_LABEL};

#[derive(Clone)]
pub struct RawCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 3x3 rotation, world to camera.
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl RawCamera {
    pub fn random(rng: &mut ChaCha8Rng) -> RawCamera {
        let width = rng.random_range(4..96);
        let height = rng.random_range(4..96);
        let rot = Rotation3::from_euler_angles(
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.1..3.1),
        );
        let m = rot.matrix();
        RawCamera {
            fx: rng.random_range(5.0..120.0),
            fy: rng.random_range(5.0..120.0),
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            rot: [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]],
            trans: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            width,
            height,
        }
    }

    /// Random camera whose optical axis passes near `target`, which sits
    /// between 1 and 8 metres in front of it.
    pub fn aimed(rng: &mut ChaCha8Rng, target: [f64; 3]) -> RawCamera {
        let mut cam = RawCamera::random(rng);
        let in_cam = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..8.0)];
        for r in 0..3 {
            let rotated: f64 = (0..3).map(|c| cam.rot[r][c] * target[c]).sum();
            cam.trans[r] = in_cam[r] - rotated;
        }
        cam
    }

    pub fn model(&self) -> CameraModel {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..3 {
                m[(r, c)] = self.rot[r][c];
            }
            m[(r, 3)] = self.trans[r];
        }
        CameraModel::new(k, m, self.width, self.height).expect("valid random camera")
    }

    /// `(u, v, depth, inside)` of a world point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64, bool) {
        let mut c = [0.0; 3];
        for r in 0..3 {
            c[r] = self.rot[r][0] * p[0] + self.rot[r][1] * p[1] + self.rot[r][2] * p[2] + self.trans[r];
        }
        if c[2] <= 0.0 {
            return (-1.0, -1.0, c[2], false);
        }
        let u = self.fx * c[0] / c[2] + self.cx;
        let v = self.fy * c[1] / c[2] + self.cy;
        let inside = u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64;
        (u, v, c[2], inside)
    }

    /// Distance in pixels from `(u, v)` to the nearest image border.
    pub fn border_distance(&self, u: f64, v: f64) -> f64 {
        [u.abs(), v.abs(), (u - self.width as f64).abs(), (v - self.height as f64).abs()].into_iter().fold(f64::INFINITY, f64::min)
    }
}

pub fn random_grid(rng: &mut ChaCha8Rng) -> (VoxelGridSpec, [f64; 3], [usize; 3], f64) {
    let origin = [rng.random_range(-4.0..0.0), rng.random_range(-4.0..0.0), rng.random_range(-4.0..0.0)];
    let dims = [rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7)];
    let size = rng.random_range(0.05..1.0);
    (VoxelGridSpec::new(origin, dims, size).unwrap(), origin, dims, size)
}

pub fn grid_center(origin: [f64; 3], dims: [usize; 3], size: f64) -> [f64; 3] {
    [0, 1, 2].map(|a| origin[a] + dims[a] as f64 * size / 2.0)
}

pub fn centroid(origin: [f64; 3], size: f64, i: usize, j: usize, k: usize) -> [f64; 3] {
    [origin[0] + (i as f64 + 0.5) * size, origin[1] + (j as f64 + 0.5) * size, origin[2] + (k as f64 + 0.5) * size]
}

/// Rectified pair from a random left camera aimed at `target`, with raw copies of both.
pub fn random_rig(rng: &mut ChaCha8Rng, target: [f64; 3]) -> (CameraRig, RawCamera, RawCamera) {
    let left = RawCamera::aimed(rng, target);
    let baseline = rng.random_range(0.0..1.0);
    let rig = CameraRig::rectified(left.model(), baseline).unwrap();
    let mut right = left.clone();
    right.trans[0] -= baseline;
    (rig, left, right)
}

/// Bin centre `k` written directly from each mode's definition.
pub fn oracle_center(d_min: f64, d_max: f64, bins: usize, mode: Discretization, k: usize) -> f64 {
    let d = bins as f64;
    let t = k as f64 + 0.5;
    match mode {
        Discretization::Ud => d_min + (d_max - d_min) * t / d,
        Discretization::Lid => {
            let f = t * (t + 1.0) / (d * (d + 1.0));
            d_min * (1.0 - f) + d_max * f
        }
        Discretization::Sid => d_min * (d_max / d_min).powf(t / d),
    }
}

/// Linear scan for the nearest centre, ties to the lower index.
pub fn oracle_depth_to_bin(spec: &DepthBinSpec, depth: f64) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for k in 0..spec.bins() {
        let dist = (depth - oracle_center(spec.d_min(), spec.d_max(), spec.bins(), spec.mode(), k)).abs();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

pub fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], n_classes: usize, p_ignore: f64) -> VoxelLabels {
    let n = dims[0] * dims[1] * dims[2];
    let data = (0..n)
        .map(|_| if rng.random_bool(p_ignore) { IGNORE_LABEL } else { rng.random_range(0..=n_classes as u8) })
        .collect();
    VoxelLabels::new(dims, n_classes, data).unwrap()
}

pub struct OracleMetrics {
    pub sc_iou: f64,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Triple-nested-loop IoU counting over an `X x Y x Z` volume.
pub fn oracle_metrics(pred: &VoxelLabels, gt: &VoxelLabels) -> OracleMetrics {
    let [nx, ny, nz] = gt.dims();
    let n = gt.n_classes();
    let (mut occ_tp, mut occ_fp, mut occ_fn) = (0u64, 0u64, 0u64);
    let mut tp = vec![0u64; n + 1];
    let mut fp = vec![0u64; n + 1];
    let mut fn_ = vec![0u64; n + 1];
    let mut present = vec![false; n + 1];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let g = gt.get(i, j, k);
                if g == IGNORE_LABEL {
                    continue;
                }
                // a prediction carrying the ignore label names no class
                let p = match pred.get(i, j, k) {
                    IGNORE_LABEL => 0,
                    p => p,
                };
                match (p != 0, g != 0) {
                    (true, true) => occ_tp += 1,
                    (true, false) => occ_fp += 1,
                    (false, true) => occ_fn += 1,
                    _ => {}
                }
                for c in 1..=n {
                    let (pc, gc) = (p as usize == c, g as usize == c);
                    if gc {
                        present[c] = true;
                    }
                    match (pc, gc) {
                        (true, true) => tp[c] += 1,
                        (true, false) => fp[c] += 1,
                        (false, true) => fn_[c] += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    let iou = |a: u64, b: u64, c: u64| if a + b + c == 0 { None } else { Some(a as f64 / (a + b + c) as f64) };
    let sc_iou = iou(occ_tp, occ_fp, occ_fn).unwrap_or(0.0);
    let per_class: Vec<Option<f64>> =
        (1..=n).map(|c| if present[c] { iou(tp[c], fp[c], fn_[c]) } else { None }).collect();
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    OracleMetrics { sc_iou, per_class, miou }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
