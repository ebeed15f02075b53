//! Central finite-difference checks of every differentiable operation.

use std::rc::Rc;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::camera::{CameraModel, CameraRig, DepthBinSpec, Discretization, VoxelGridSpec};
use crate::error::{Error, Result};
use crate::lifting::{fuse_stereo_op, lift_and_fuse_op, Fusion, LiftPlans, SCALES};
use crate::losses::{collapse_occupancy_op, cross_entropy_op, scal_op};
use crate::oad::{frustum_plan, occupancy_weight_op, overlap_mask};
use crate::tensor::Tensor;

/// Maximum relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Lifting,
    Oad,
    Losses,
    Toynet,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Lifting, Module::Oad, Module::Losses, Module::Toynet];

    pub fn name(self) -> &'static str {
        match self {
            Module::Lifting => "lifting",
            Module::Oad => "oad",
            Module::Losses => "losses",
            Module::Toynet => "toynet",
        }
    }
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown module {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub module: Module,
    pub operation: String,
    /// `max |analytic - numeric| / max |numeric|` over every input entry.
    pub max_rel_error: f64,
    /// Largest numeric gradient entry; a vanishing gradient fails the check.
    pub max_gradient: f64,
    pub passed: bool,
}

/// Compare the tape gradient of `f` with central differences in every
/// entry of every input. Non-scalar outputs are contracted with a fixed
/// random weight first.
pub fn check_operation(
    module: Module,
    operation: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let mut probe: Option<Tensor> = None;
    let mut eval = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let mut out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            let w = probe.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let s = g.value(out).shape().to_vec();
                let n = g.value(out).len();
                Tensor::from_vec(&s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            });
            out = g.dot_const(out, w);
        }
        let value = g.value(out).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(out);
        Ok((value, vars.iter().zip(values).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut max_diff: f64 = 0.0;
    let mut max_numeric: f64 = 0.0;
    let mut values = inputs.to_vec();
    for i in 0..values.len() {
        for j in 0..values[i].len() {
            let x = values[i].data()[j];
            values[i].data_mut()[j] = x + STEP;
            let (fp, _) = eval(&values, false)?;
            values[i].data_mut()[j] = x - STEP;
            let (fm, _) = eval(&values, false)?;
            values[i].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * STEP);
            max_diff = max_diff.max((analytic[i].data()[j] - numeric).abs());
            max_numeric = max_numeric.max(numeric.abs());
        }
    }
    let max_rel_error = max_diff / max_numeric.max(1e-8);
    Ok(CheckResult {
        module,
        operation: operation.into(),
        max_rel_error,
        max_gradient: max_numeric,
        passed: max_rel_error <= TOLERANCE && max_numeric > 1e-8,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn fixture_rig() -> CameraRig {
    let left =
        CameraModel::look_at(Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, -0.05, 4.0), Vector3::y(), 9.0, 9.0, 8.0, 8.0, 16, 16)
            .unwrap();
    CameraRig::rectified(left, 0.4).unwrap()
}

fn fixture_grid() -> VoxelGridSpec {
    VoxelGridSpec::new([-0.9, -0.6, 1.5], [3, 2, 3], 0.6).unwrap()
}

/// Right view correlated with the left so fusion weights stay away from
/// the cosine clamp.
fn correlated(rng: &mut ChaCha8Rng, left: &Tensor) -> Tensor {
    let data = left.data().iter().map(|x| x + rng.random_range(-0.3..0.3)).collect();
    Tensor::from_vec(left.shape(), data).unwrap()
}

fn lifting_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let l = random(rng, &[2, 2, 2, 4], 0.2, 1.0);
    let r = correlated(rng, &l);
    for (name, mode) in [("fuse_stereo", Fusion::default()), ("fuse_stereo_mean", Fusion::Mean)] {
        out.push(check_operation(Module::Lifting, name, &[l.clone(), r.clone()], &move |g, v| {
            Ok(fuse_stereo_op(g, v[0], v[1], mode))
        })?);
    }
    let rig = fixture_rig();
    let grid = fixture_grid();
    let c = 3;
    let plans = Rc::new(LiftPlans::new(&grid, &rig, c));
    let mut inputs = Vec::new();
    for _view in 0..2 {
        for s in SCALES {
            inputs.push(random(rng, &[16 / s, 16 / s, c], 0.2, 1.0));
        }
    }
    for k in 0..4 {
        inputs[4 + k] = correlated(rng, &inputs[k]);
    }
    out.push(check_operation(Module::Lifting, "lift_and_fuse", &inputs, &move |g, v| {
        Ok(lift_and_fuse_op(g, &[v[0], v[1], v[2], v[3]], &[v[4], v[5], v[6], v[7]], &plans, Fusion::default()))
    })?);
    Ok(out)
}

fn oad_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let rig = fixture_rig();
    let grid = fixture_grid();
    let spec = DepthBinSpec::new(0.5, 6.0, 5, Discretization::Lid)?;
    let plans: Vec<_> = rig.cameras().iter().map(|c| frustum_plan(&grid, c, &spec, 2, 2, 8)).collect();
    let mask = overlap_mask(&grid, &rig);
    let inputs = [random(rng, &[2, 2, 5], -2.0, 2.0), random(rng, &[2, 2, 5], -2.0, 2.0), random(rng, &[3, 2, 3, 4], -1.0, 1.0)];
    let op = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let priors: Vec<Var> = (0..2)
            .map(|i| {
                let p = g.softmax_last(v[i]);
                g.gather(p, plans[i].clone())
            })
            .collect();
        Ok(occupancy_weight_op(g, &priors, &mask, v[2]))
    };
    Ok(vec![check_operation(Module::Oad, "depth_softmax_frustum_occupancy_weight", &inputs, &op)?])
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let n = 12;
    let k = 4;
    let sem: Rc<Vec<Option<usize>>> =
        Rc::new((0..n).map(|i| if i == 5 { None } else { Some(rng.random_range(0..k)) }).collect());
    let occ: Rc<Vec<Option<usize>>> = Rc::new(sem.iter().map(|t| t.map(|c| (c > 0) as usize)).collect());
    let depth: Rc<Vec<Option<usize>>> = Rc::new((0..6).map(|i| (i != 2).then(|| rng.random_range(0..5))).collect());
    let mut out = Vec::new();
    let logits2 = random(rng, &[n, 1, 1, 2], -2.0, 2.0);
    let logits = random(rng, &[n, 1, 1, k], -2.0, 2.0);
    let dlogits = random(rng, &[2, 3, 5], -2.0, 2.0);
    let t = occ.clone();
    out.push(check_operation(Module::Losses, "loss_occ", &[logits2], &move |g, v| cross_entropy_op(g, v[0], t.clone(), None))?);
    let t = sem.clone();
    out.push(check_operation(Module::Losses, "loss_sem", &[logits.clone()], &move |g, v| {
        cross_entropy_op(g, v[0], t.clone(), None)
    })?);
    let t = depth.clone();
    out.push(check_operation(Module::Losses, "loss_depth", &[dlogits], &move |g, v| cross_entropy_op(g, v[0], t.clone(), None))?);
    let t = sem.clone();
    out.push(check_operation(Module::Losses, "loss_scal_sem", &[logits.clone()], &move |g, v| {
        let p = g.softmax_last(v[0]);
        scal_op(g, p, t.clone())
    })?);
    let t = occ.clone();
    out.push(check_operation(Module::Losses, "loss_scal_geo", &[logits], &move |g, v| {
        let p = g.softmax_last(v[0]);
        let c = collapse_occupancy_op(g, p);
        scal_op(g, c, t.clone())
    })?);
    Ok(out)
}

fn toynet_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let x = random(rng, &[5, 4, 2], -1.0, 1.0);
    let w = random(rng, &[9, 2, 3], -1.0, 1.0);
    let b = random(rng, &[3], -1.0, 1.0);
    for stride in [1, 2] {
        out.push(check_operation(Module::Toynet, &format!("conv2d_stride{stride}"), &[x.clone(), w.clone(), b.clone()], &move |g, v| {
            Ok(g.conv2d(v[0], v[1], v[2], stride))
        })?);
    }
    let x = random(rng, &[2, 3, 2, 2], -1.0, 1.0);
    let w = random(rng, &[27, 2, 2], -1.0, 1.0);
    let b = random(rng, &[2], -1.0, 1.0);
    out.push(check_operation(Module::Toynet, "conv3d", &[x, w, b], &|g, v| Ok(g.conv3d(v[0], v[1], v[2])))?);
    let x = random(rng, &[2, 2, 4, 3], -1.0, 1.0);
    out.push(check_operation(Module::Toynet, "pool_upsample", &[x], &|g, v| {
        let p = g.avg_pool3d_2(v[0]);
        Ok(g.upsample3d_2(p))
    })?);
    let a = random(rng, &[3, 2], -1.0, 1.0);
    let b = random(rng, &[3, 4], -1.0, 1.0);
    let w = random(rng, &[2, 3], -1.0, 1.0);
    let bias = random(rng, &[3], -1.0, 1.0);
    out.push(check_operation(Module::Toynet, "concat_pointwise_softmax", &[a, b, w.clone(), bias.clone()], &|g, v| {
        let p = g.pointwise(v[0], v[2], v[3]);
        let c = g.concat_last(p, v[1]);
        Ok(g.softmax_last(c))
    })?);
    Ok(out)
}

/// Run the checks for one module (fixed seed, small instances).
pub fn run_module(module: Module) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024 + module as u64);
    match module {
        Module::Lifting => lifting_checks(&mut rng),
        Module::Oad => oad_checks(&mut rng),
        Module::Losses => loss_checks(&mut rng),
        Module::Toynet => toynet_checks(&mut rng),
    }
}

pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for m in Module::ALL {
        out.extend(run_module(m)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let bad = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let y = g.value(v[0]).map(|t| t * t);
            Ok(g.custom(y, &[v[0]], Box::new(|ctx| vec![Some(ctx.grad.clone())])))
        };
        assert!(!check_operation(Module::Toynet, "square", &[x], &bad).unwrap().passed);
    }

    #[test]
    fn every_module_passes() {
        for r in run_all().unwrap() {
            assert!(r.passed, "{} {}: {:e}", r.module.name(), r.operation, r.max_rel_error);
        }
    }
}
