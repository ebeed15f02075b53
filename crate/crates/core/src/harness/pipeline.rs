use std::rc::Rc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TrainConfig;
use crate::autograd::{GatherPlan, Graph, Var};
use crate::camera::DepthMap;
use crate::error::Result;
use crate::lifting::{lift_and_fuse_op, LiftPlans};
use crate::losses::{
    collapse_occupancy_op, cross_entropy_op, gamma, loss_total, scal_op, LossComponents, LossReport, VoxelLabels,
};
use crate::oad::{build_depth_target, frustum_plan, occupancy_weight_op, overlap_mask, OverlapMask, DEPTH_SCALE};
use crate::scenes::SceneSample;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::toynet::{Bound, ToyNet};

pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(&[h, w, 3], data).expect("rgb buffer")
}

/// Depth map with Gaussian noise on valid pixels; holes stay holes and
/// noisy depths are floored just above zero so they remain valid.
fn noisy_teacher(depth: &DepthMap, sigma: f64, seed: u64) -> DepthMap {
    if sigma == 0.0 {
        return depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = depth
        .data
        .iter()
        .map(|&d| if d > 0.0 { (d + sigma * rng.sample::<f64, _>(StandardNormal)).max(1e-3) } else { d })
        .collect();
    DepthMap { data, ..*depth }
}

/// Everything about a sample that does not depend on the parameters:
/// input tensors, sampling plans, the overlap mask and loss targets.
pub struct Prepared {
    pub sample_id: String,
    pub images: [Tensor; 2],
    pub plans: LiftPlans,
    pub frustum: [Rc<GatherPlan>; 2],
    pub mask: OverlapMask,
    pub depth_targets: [Rc<Vec<Option<usize>>>; 2],
    pub occ_targets: Rc<Vec<Option<usize>>>,
    pub sem_targets: Rc<Vec<Option<usize>>>,
    pub scal_targets: Rc<Vec<Option<usize>>>,
    pub labels: VoxelLabels,
}

impl Prepared {
    pub fn new(sample: &SceneSample, cfg: &TrainConfig) -> Result<Self> {
        let spec = cfg.bin_spec()?;
        let grid = &sample.grid;
        let (h, w) = (sample.rig.left.height() / DEPTH_SCALE, sample.rig.left.width() / DEPTH_SCALE);
        let cams = sample.rig.cameras();
        let depth_target = |d: &DepthMap, view: u64| -> Result<Rc<Vec<Option<usize>>>> {
            let teacher = noisy_teacher(d, cfg.teacher_noise, derive_seed(cfg.seed, &format!("teacher/{}", sample.sample_id), view));
            Ok(Rc::new(build_depth_target(&teacher, &spec, DEPTH_SCALE)?.cells))
        };
        Ok(Prepared {
            sample_id: sample.sample_id.clone(),
            images: [image_tensor(&sample.left_image), image_tensor(&sample.right_image)],
            plans: LiftPlans::new(grid, &sample.rig, cfg.channels),
            frustum: cams.map(|c| frustum_plan(grid, c, &spec, h, w, DEPTH_SCALE)),
            mask: overlap_mask(grid, &sample.rig),
            depth_targets: [depth_target(&sample.left_depth, 0)?, depth_target(&sample.right_depth, 1)?],
            occ_targets: Rc::new(sample.labels.occupancy_targets()),
            sem_targets: Rc::new(sample.labels.semantic_targets(cfg.sem_ignore_empty)),
            scal_targets: Rc::new(sample.labels.semantic_targets(false)),
            labels: sample.labels.clone(),
        })
    }

    /// Swap in new images (augmentation leaves geometry untouched).
    pub fn with_images(&self, sample: &SceneSample) -> [Tensor; 2] {
        [image_tensor(&sample.left_image), image_tensor(&sample.right_image)]
    }
}

pub struct Forward {
    pub occ_logits: Var,
    pub sem_logits: Var,
    /// Left and right depth logits, present when the depth branch runs.
    pub depth_logits: Option<[Var; 2]>,
}

/// Both encoders, stereo lifting, optional occupancy weighting and the
/// refiner.
pub fn forward(net: &ToyNet, g: &mut Graph, b: &Bound, prep: &Prepared, images: &[Tensor; 2], cfg: &TrainConfig) -> Result<Forward> {
    let left_img = g.constant(images[0].clone());
    let right_img = g.constant(images[1].clone());
    let left = net.encode_2d_op(g, b, left_img)?;
    let right = net.encode_2d_op(g, b, right_img)?;
    let mut volume = lift_and_fuse_op(g, &left, &right, &prep.plans, cfg.fusion());
    let depth_logits = if cfg.oad || cfg.distill {
        Some([net.depth_head_op(g, b, left[3]), net.depth_head_op(g, b, right[3])])
    } else {
        None
    };
    if cfg.oad {
        let logits = depth_logits.expect("depth branch runs with OAD");
        let priors: Vec<Var> = (0..2)
            .map(|v| {
                let probs = g.softmax_last(logits[v]);
                g.gather(probs, prep.frustum[v].clone())
            })
            .collect();
        volume = occupancy_weight_op(g, &priors, &prep.mask, volume);
    }
    let (_, occ_logits, sem_logits) = net.refine_3d_op(g, b, volume)?;
    Ok(Forward { occ_logits, sem_logits, depth_logits })
}

/// The full objective on the tape. Returns the scalar loss and its
/// component report.
pub fn objective(g: &mut Graph, fwd: &Forward, prep: &Prepared, cfg: &TrainConfig, step: u64) -> Result<(Var, LossReport)> {
    let l_occ = cross_entropy_op(g, fwd.occ_logits, prep.occ_targets.clone(), None)?;
    let l_sem = cross_entropy_op(g, fwd.sem_logits, prep.sem_targets.clone(), None)?;
    let probs = g.softmax_last(fwd.sem_logits);
    let l_scal_sem = scal_op(g, probs, prep.scal_targets.clone())?;
    let collapsed = collapse_occupancy_op(g, probs);
    let l_scal_geo = scal_op(g, collapsed, prep.occ_targets.clone())?;
    let mut depth_terms = Vec::new();
    if cfg.distill {
        let logits = fwd.depth_logits.expect("depth branch runs with distillation");
        for v in 0..2 {
            if prep.depth_targets[v].iter().any(Option::is_some) {
                depth_terms.push(cross_entropy_op(g, logits[v], prep.depth_targets[v].clone(), None)?);
            }
        }
    }
    let total_steps = cfg.steps.max(1);
    let gam = gamma(step.min(total_steps), total_steps)?;
    let mut terms = vec![(l_occ, 1.0), (l_sem, 1.0), (l_scal_sem, gam), (l_scal_geo, 1.0)];
    let depth_weight = 1.0 / depth_terms.len().max(1) as f64;
    terms.extend(depth_terms.iter().map(|&v| (v, depth_weight)));
    let total = g.weighted_sum(&terms);
    let l_depth = depth_terms.iter().map(|&v| g.value(v).item()).sum::<f64>() * depth_weight;
    let comps = LossComponents {
        l_occ: g.value(l_occ).item(),
        l_sem: g.value(l_sem).item(),
        l_depth,
        l_scal_sem: g.value(l_scal_sem).item(),
        l_scal_geo: g.value(l_scal_geo).item(),
    };
    let report = loss_total(comps, step.min(total_steps), total_steps)?;
    debug_assert!(
        !report.l_total.is_finite()
            || (report.l_total - g.value(total).item()).abs() <= 1e-9 * report.l_total.abs().max(1.0)
    );
    Ok((total, report))
}
