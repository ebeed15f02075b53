//! Stereo soft feature assignment: sample multi-scale 2D features at each
//! voxel's projection in both views, gate the stereo mean by the cosine
//! correlation of the two samples, and sum over scales.

use std::rc::Rc;

use crate::autograd::{GatherPlan, Graph, Var};
use crate::camera::{bilinear_taps, CameraModel, CameraRig, FeatureMap, VoxelGridSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCALES: [usize; 4] = [1, 2, 4, 8];

/// Norm floor used by the cosine weight.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    maps: [FeatureMap; 4],
}

impl FeaturePyramid {
    /// Maps ordered as [`SCALES`]; map `s` must be `(H/s) x (W/s) x C`.
    pub fn new(maps: [FeatureMap; 4]) -> Result<Self> {
        let (h, w, c) = (maps[0].height, maps[0].width, maps[0].channels);
        for (map, s) in maps.iter().zip(SCALES) {
            if map.channels != c || map.height * s != h || map.width * s != w {
                return Err(Error::shape(format!(
                    "scale {s} map is {}x{}x{}, expected {}x{}x{c}",
                    map.height,
                    map.width,
                    map.channels,
                    h / s,
                    w / s
                )));
            }
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn maps(&self) -> &[FeatureMap; 4] {
        &self.maps
    }

    pub fn scale(&self, s: usize) -> Option<&FeatureMap> {
        SCALES.iter().position(|&x| x == s).map(|i| &self.maps[i])
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels
    }
}

/// Per-voxel features, `[X, Y, Z, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub values: Tensor,
    pub grid: VoxelGridSpec,
}

impl FeatureVolume {
    pub fn new(values: Tensor, grid: VoxelGridSpec) -> Result<Self> {
        let d = grid.dims();
        let s = values.shape();
        if s.len() != 4 || s[..3] != d {
            return Err(Error::shape(format!("volume shape {s:?} does not match grid {d:?}")));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("feature volume has non-finite entries".into()));
        }
        Ok(FeatureVolume { values, grid })
    }

    pub fn channels(&self) -> usize {
        self.values.last_dim()
    }

    pub fn voxel(&self, n: usize) -> &[f64] {
        self.values.row(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Cosine-gated stereo mean with one-view pass-through.
    SoftAssignment { clamp_negative: bool },
    /// Plain average of the two views.
    Mean,
}

impl Default for Fusion {
    fn default() -> Self {
        Fusion::SoftAssignment { clamp_negative: true }
    }
}

/// Sampling plan taking a `(H/scale) x (W/scale) x C` map to the grid.
pub fn lift_plan(grid: &VoxelGridSpec, cam: &CameraModel, scale: usize, channels: usize) -> Rc<GatherPlan> {
    let (mh, mw) = (cam.height() / scale, cam.width() / scale);
    let d = grid.dims();
    let mut offsets = Vec::with_capacity(grid.n_voxels() + 1);
    let mut taps = Vec::with_capacity(grid.n_voxels() * 4);
    offsets.push(0);
    for p in grid.centroids() {
        let proj = cam.project(&p);
        if proj.valid {
            let s = scale as f64;
            if let Some(t) = bilinear_taps(proj.u / s, proj.v / s, mw, mh) {
                taps.extend(t.into_iter().filter(|&(_, w)| w != 0.0));
            }
        }
        offsets.push(taps.len());
    }
    Rc::new(GatherPlan { src_rows: mh * mw, channels, out_shape: vec![d[0], d[1], d[2], channels], offsets, taps })
}

fn check_map(map: &FeatureMap, scale: usize, cam: &CameraModel) -> Result<()> {
    if map.height * scale != cam.height() || map.width * scale != cam.width() {
        return Err(Error::shape(format!(
            "scale {scale} map {}x{} does not match a {}x{} image",
            map.height,
            map.width,
            cam.height(),
            cam.width()
        )));
    }
    Ok(())
}

/// Sample one feature map at every voxel centroid's projection.
pub fn lift_single(map: &FeatureMap, scale: usize, grid: &VoxelGridSpec, cam: &CameraModel) -> Result<FeatureVolume> {
    check_map(map, scale, cam)?;
    let plan = lift_plan(grid, cam, scale, map.channels);
    FeatureVolume::new(plan.apply(&map.data), grid.clone())
}

pub fn fuse_stereo(left: &FeatureVolume, right: &FeatureVolume) -> Result<FeatureVolume> {
    fuse_stereo_with(left, right, Fusion::default())
}

pub fn fuse_stereo_with(left: &FeatureVolume, right: &FeatureVolume, mode: Fusion) -> Result<FeatureVolume> {
    if left.grid != right.grid || left.values.shape() != right.values.shape() {
        return Err(Error::shape("stereo volumes must share grid and channels"));
    }
    let values = fuse_forward(&left.values, &right.values, mode);
    Ok(FeatureVolume { values, grid: left.grid.clone() })
}

pub fn lift_and_fuse(
    left: &FeaturePyramid,
    right: &FeaturePyramid,
    grid: &VoxelGridSpec,
    rig: &CameraRig,
) -> Result<FeatureVolume> {
    lift_and_fuse_with(left, right, grid, rig, Fusion::default())
}

pub fn lift_and_fuse_with(
    left: &FeaturePyramid,
    right: &FeaturePyramid,
    grid: &VoxelGridSpec,
    rig: &CameraRig,
    mode: Fusion,
) -> Result<FeatureVolume> {
    if left.channels() != right.channels() {
        return Err(Error::shape("stereo pyramids differ in channel count"));
    }
    let d = grid.dims();
    let mut total = Tensor::zeros(&[d[0], d[1], d[2], left.channels()]);
    for (i, &s) in SCALES.iter().enumerate() {
        let l = lift_single(&left.maps[i], s, grid, &rig.left)?;
        let r = lift_single(&right.maps[i], s, grid, &rig.right)?;
        total.add_assign(&fuse_forward(&l.values, &r.values, mode));
    }
    FeatureVolume::new(total, grid.clone())
}

/// Cosine similarity with norms floored at [`COSINE_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a).max(COSINE_EPS);
    let nb = norm(b).max(COSINE_EPS);
    dot(a, b) / (na * nb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn is_zero(a: &[f64]) -> bool {
    a.iter().all(|&x| x == 0.0)
}

fn fuse_row(l: &[f64], r: &[f64], mode: Fusion, out: &mut [f64]) {
    match mode {
        Fusion::Mean => {
            for ((o, a), b) in out.iter_mut().zip(l).zip(r) {
                *o = 0.5 * (a + b);
            }
        }
        Fusion::SoftAssignment { clamp_negative } => {
            if is_zero(r) {
                out.copy_from_slice(l);
            } else if is_zero(l) {
                out.copy_from_slice(r);
            } else {
                let c = cosine(l, r);
                let w = if clamp_negative { c.max(0.0) } else { c };
                for ((o, a), b) in out.iter_mut().zip(l).zip(r) {
                    *o = w * 0.5 * (a + b);
                }
            }
        }
    }
}

fn fuse_row_backward(l: &[f64], r: &[f64], g: &[f64], mode: Fusion, gl: &mut [f64], gr: &mut [f64]) {
    match mode {
        Fusion::Mean => {
            for ((a, b), x) in gl.iter_mut().zip(gr.iter_mut()).zip(g) {
                *a = 0.5 * x;
                *b = 0.5 * x;
            }
        }
        Fusion::SoftAssignment { clamp_negative } => {
            if is_zero(r) {
                gl.copy_from_slice(g);
                return;
            }
            if is_zero(l) {
                gr.copy_from_slice(g);
                return;
            }
            let (nl_raw, nr_raw) = (norm(l), norm(r));
            let (nl, nr) = (nl_raw.max(COSINE_EPS), nr_raw.max(COSINE_EPS));
            let c = dot(l, r) / (nl * nr);
            let active = !clamp_negative || c > 0.0;
            let w = if active { c } else { 0.0 };
            // g . m with m = (l + r) / 2
            let gm: f64 = g.iter().zip(l.iter().zip(r)).map(|(x, (a, b))| x * 0.5 * (a + b)).sum();
            for i in 0..l.len() {
                let mut da = 0.5 * w * g[i];
                let mut db = 0.5 * w * g[i];
                if active {
                    let mut dcl = r[i] / (nl * nr);
                    if nl_raw > COSINE_EPS {
                        dcl -= c * l[i] / (nl_raw * nl_raw);
                    }
                    let mut dcr = l[i] / (nl * nr);
                    if nr_raw > COSINE_EPS {
                        dcr -= c * r[i] / (nr_raw * nr_raw);
                    }
                    da += gm * dcl;
                    db += gm * dcr;
                }
                gl[i] = da;
                gr[i] = db;
            }
        }
    }
}

fn fuse_forward(l: &Tensor, r: &Tensor, mode: Fusion) -> Tensor {
    let mut out = Tensor::zeros(l.shape());
    for n in 0..l.rows() {
        fuse_row(l.row(n), r.row(n), mode, out.row_mut(n));
    }
    out
}

/// Stereo fusion recorded on the tape.
pub fn fuse_stereo_op(g: &mut Graph, left: Var, right: Var, mode: Fusion) -> Var {
    assert_eq!(g.value(left).shape(), g.value(right).shape(), "fuse shape");
    let out = fuse_forward(g.value(left), g.value(right), mode);
    g.custom(
        out,
        &[left, right],
        Box::new(move |ctx| {
            let (l, r) = (ctx.inputs[0], ctx.inputs[1]);
            let mut gl = Tensor::zeros(l.shape());
            let mut gr = Tensor::zeros(r.shape());
            for n in 0..l.rows() {
                fuse_row_backward(l.row(n), r.row(n), ctx.grad.row(n), mode, gl.row_mut(n), gr.row_mut(n));
            }
            vec![ctx.needs[0].then_some(gl), ctx.needs[1].then_some(gr)]
        }),
    )
}

/// Precomputed sampling plans for both views at every scale.
#[derive(Clone, Debug)]
pub struct LiftPlans {
    pub left: [Rc<GatherPlan>; 4],
    pub right: [Rc<GatherPlan>; 4],
}

impl LiftPlans {
    pub fn new(grid: &VoxelGridSpec, rig: &CameraRig, channels: usize) -> Self {
        LiftPlans {
            left: SCALES.map(|s| lift_plan(grid, &rig.left, s, channels)),
            right: SCALES.map(|s| lift_plan(grid, &rig.right, s, channels)),
        }
    }
}

/// Multi-scale lift-and-fuse on the tape. `left` and `right` hold the
/// pyramid levels ordered as [`SCALES`].
pub fn lift_and_fuse_op(g: &mut Graph, left: &[Var; 4], right: &[Var; 4], plans: &LiftPlans, mode: Fusion) -> Var {
    let mut fused = Vec::with_capacity(4);
    for i in 0..4 {
        let l = g.gather(left[i], plans.left[i].clone());
        let r = g.gather(right[i], plans.right[i].clone());
        fused.push(fuse_stereo_op(g, l, r, mode));
    }
    g.add_n(&fused)
}
