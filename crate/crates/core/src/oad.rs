//! Occupancy-aware depth: per-pixel categorical depth, its resampling into
//! the voxel grid, the stereo overlap mask, occupancy weighting of lifted
//! features, and one-hot depth targets for distillation.

use std::rc::Rc;

use crate::autograd::{softmax_rows, GatherPlan, Graph, Var};
use crate::camera::{depth_to_bin, CameraModel, CameraRig, DepthBinSpec, DepthMap, VoxelGridSpec};
use crate::error::{Error, Result};
use crate::lifting::FeatureVolume;
use crate::tensor::Tensor;

/// Downsampling factor of the depth branch.
pub const DEPTH_SCALE: usize = 8;

/// Net_D output, `[h, w, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLogits {
    pub logits: Tensor,
}

impl DepthLogits {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 3 {
            return Err(Error::shape("depth logits must be [h, w, D]"));
        }
        if !logits.all_finite() {
            return Err(Error::Numeric("depth logits must be finite".into()));
        }
        Ok(DepthLogits { logits })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrustumDistribution {
    pub probs: Tensor,
    pub spec: DepthBinSpec,
    pub scale: usize,
}

impl FrustumDistribution {
    pub fn new(probs: Tensor, spec: DepthBinSpec, scale: usize) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 3 || s[2] != spec.bins() {
            return Err(Error::shape(format!("distribution {s:?} does not match {} bins", spec.bins())));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("pixel {r} is not a distribution (sum {sum})")));
            }
        }
        Ok(FrustumDistribution { probs, spec, scale })
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// Voxel-space occupancy probability prior, `[X, Y, Z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyPrior {
    pub values: Tensor,
}

/// `0.5` where both cameras see the voxel centroid, `1.0` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMask {
    pub values: Tensor,
}

pub fn depth_softmax(logits: &DepthLogits, spec: DepthBinSpec, scale: usize) -> Result<FrustumDistribution> {
    if logits.logits.last_dim() != spec.bins() {
        return Err(Error::shape("logit channels must equal the bin count"));
    }
    FrustumDistribution::new(softmax_rows(&logits.logits), spec, scale)
}

/// Trilinear sampling plan from an `h x w x D` frustum volume into the grid.
///
/// Pixel axes follow the pixel-centre convention; along depth, bin `k` sits
/// at continuous coordinate `k + 0.5`. Taps are clamped to the volume, and
/// voxels that do not project or fall outside `[0, D]` get no taps.
pub fn frustum_plan(
    grid: &VoxelGridSpec,
    cam: &CameraModel,
    spec: &DepthBinSpec,
    height: usize,
    width: usize,
    scale: usize,
) -> Rc<GatherPlan> {
    let bins = spec.bins();
    let d = grid.dims();
    let mut offsets = Vec::with_capacity(grid.n_voxels() + 1);
    let mut taps = Vec::with_capacity(grid.n_voxels() * 8);
    offsets.push(0);
    for p in grid.centroids() {
        let proj = cam.project(&p);
        if proj.valid {
            let t = spec.coordinate_unchecked(proj.depth);
            if (0.0..=bins as f64).contains(&t) {
                let s = scale as f64;
                let axes = [
                    axis_taps(proj.v / s - 0.5, height),
                    axis_taps(proj.u / s - 0.5, width),
                    axis_taps(t - 0.5, bins),
                ];
                for &(y, wy) in &axes[0] {
                    for &(x, wx) in &axes[1] {
                        for &(z, wz) in &axes[2] {
                            let w = wy * wx * wz;
                            if w != 0.0 {
                                taps.push(((y * width + x) * bins + z, w));
                            }
                        }
                    }
                }
            }
        }
        offsets.push(taps.len());
    }
    Rc::new(GatherPlan { src_rows: height * width * bins, channels: 1, out_shape: vec![d[0], d[1], d[2]], offsets, taps })
}

/// Linear interpolation taps at lattice coordinate `x`, clamped to `[0, n)`.
fn axis_taps(x: f64, n: usize) -> [(usize, f64); 2] {
    let x0 = x.floor();
    let t = x - x0;
    let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64) as usize;
    [(clamp(x0), 1.0 - t), (clamp(x0 + 1.0), t)]
}

pub fn frustum_to_voxel(dist: &FrustumDistribution, grid: &VoxelGridSpec, cam: &CameraModel) -> OccupancyPrior {
    let plan = frustum_plan(grid, cam, &dist.spec, dist.height(), dist.width(), dist.scale);
    OccupancyPrior { values: plan.apply(dist.probs.data()) }
}

pub fn overlap_mask(grid: &VoxelGridSpec, rig: &CameraRig) -> OverlapMask {
    let d = grid.dims();
    let data = grid
        .centroids()
        .map(|p| if rig.left.project(&p).valid && rig.right.project(&p).valid { 0.5 } else { 1.0 })
        .collect();
    OverlapMask { values: Tensor::from_vec(&d, data).expect("grid size") }
}

/// Scale every voxel's features by `mask * sum(priors)`.
pub fn occupancy_weight(priors: &[OccupancyPrior], mask: &OverlapMask, features: &FeatureVolume) -> Result<FeatureVolume> {
    let dims = features.grid.dims();
    if mask.values.shape() != dims || priors.iter().any(|p| p.values.shape() != dims) {
        return Err(Error::shape("priors, mask and features must share the grid"));
    }
    let mut values = features.values.clone();
    for n in 0..features.grid.n_voxels() {
        let w = mask.values.data()[n] * priors.iter().map(|p| p.values.data()[n]).sum::<f64>();
        for v in values.row_mut(n) {
            *v *= w;
        }
    }
    FeatureVolume::new(values, features.grid.clone())
}

/// Occupancy weighting on the tape; `priors` are `[X, Y, Z]` vars and
/// `features` is `[X, Y, Z, C]`.
pub fn occupancy_weight_op(g: &mut Graph, priors: &[Var], mask: &OverlapMask, features: Var) -> Var {
    let summed = g.add_n(priors);
    let weight = g.mul_const(summed, &mask.values);
    g.scale_rows(weight, features)
}

/// One-hot depth supervision at the depth-branch resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthTarget {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Target bin per cell; `None` for cells without a valid pixel.
    pub cells: Vec<Option<usize>>,
}

impl DepthTarget {
    pub fn valid(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.height, self.width, self.bins]);
        for (i, c) in self.cells.iter().enumerate() {
            if let Some(k) = c {
                t.data_mut()[i * self.bins + k] = 1.0;
            }
        }
        t
    }
}

/// Min-pool valid depths over `scale x scale` cells, then bin the result.
pub fn build_depth_target(gt_depth: &DepthMap, spec: &DepthBinSpec, scale: usize) -> Result<DepthTarget> {
    if scale == 0 || gt_depth.height % scale != 0 || gt_depth.width % scale != 0 {
        return Err(Error::shape(format!(
            "depth map {}x{} is not divisible by {scale}",
            gt_depth.height, gt_depth.width
        )));
    }
    let (h, w) = (gt_depth.height / scale, gt_depth.width / scale);
    let mut cells = Vec::with_capacity(h * w);
    for cy in 0..h {
        for cx in 0..w {
            let mut best = f64::INFINITY;
            for y in cy * scale..(cy + 1) * scale {
                for x in cx * scale..(cx + 1) * scale {
                    if gt_depth.is_valid(x, y) {
                        best = best.min(gt_depth.get(x, y));
                    }
                }
            }
            cells.push(if best.is_finite() { Some(depth_to_bin(spec, best)?) } else { None });
        }
    }
    Ok(DepthTarget { height: h, width: w, bins: spec.bins(), cells })
}
