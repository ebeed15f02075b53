//! Training objectives: occupancy and semantic cross-entropy, depth
//! distillation, scene-class affinity terms, the annealed weight on the
//! semantic affinity term, and the total.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::oad::{DepthLogits, DepthTarget};
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

/// Floor applied to every log argument in the affinity loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Semantic voxel labels: `0` is empty, `1..=N` are classes and
/// [`IGNORE_LABEL`] marks unobserved voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelLabels {
    dims: [usize; 3],
    n_classes: usize,
    data: Vec<u8>,
}

impl VoxelLabels {
    pub fn new(dims: [usize; 3], n_classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("labels for {dims:?} need {} entries", dims.iter().product::<usize>())));
        }
        if n_classes == 0 || n_classes >= IGNORE_LABEL as usize {
            return Err(Error::Domain(format!("class count {n_classes} out of range")));
        }
        if let Some(bad) = data.iter().find(|&&l| l != IGNORE_LABEL && l as usize > n_classes) {
            return Err(Error::Domain(format!("label {bad} exceeds {n_classes} classes")));
        }
        Ok(VoxelLabels { dims, n_classes, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of semantic (non-empty) classes `N`.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Per-voxel semantic targets, `None` where ignored. With
    /// `ignore_empty`, empty voxels are dropped as well.
    pub fn semantic_targets(&self, ignore_empty: bool) -> Vec<Option<usize>> {
        self.data
            .iter()
            .map(|&l| match l {
                IGNORE_LABEL => None,
                0 if ignore_empty => None,
                l => Some(l as usize),
            })
            .collect()
    }

    /// Per-voxel occupancy targets (`0` empty, `1` occupied).
    pub fn occupancy_targets(&self) -> Vec<Option<usize>> {
        self.data
            .iter()
            .map(|&l| match l {
                IGNORE_LABEL => None,
                0 => Some(0),
                _ => Some(1),
            })
            .collect()
    }
}

/// Options for the cross-entropy terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CeOptions {
    /// Per-class weights; uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
    /// Drop empty voxels from the semantic term.
    pub ignore_empty: bool,
}

/// Inverse-log-frequency class weights, normalized to mean 1 over the
/// classes that occur.
pub fn class_frequency_weights(labels: &[&VoxelLabels], n_outputs: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_outputs];
    for l in labels {
        for &v in l.data() {
            if (v as usize) < n_outputs {
                counts[v as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut w: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / (1.02 + c as f64 / total as f64).ln() })
        .collect();
    let present = w.iter().filter(|&&x| x > 0.0).count().max(1);
    let mean = w.iter().sum::<f64>() / present as f64;
    for x in &mut w {
        *x /= mean;
    }
    w
}

/// Mean (optionally class-weighted) cross-entropy over rows with a target.
/// Returns the loss and its gradient with respect to the logits.
fn cross_entropy(logits: &Tensor, targets: &[Option<usize>], weights: Option<&[f64]>) -> Result<(f64, Tensor)> {
    let k = logits.last_dim();
    if logits.rows() != targets.len() {
        return Err(Error::shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    if let Some(w) = weights {
        if w.len() != k {
            return Err(Error::shape("class weight count differs from logit width"));
        }
    }
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (r, t) in targets.iter().enumerate() {
        let Some(y) = *t else { continue };
        if y >= k {
            return Err(Error::Domain(format!("target {y} out of range for {k} classes")));
        }
        let w = weights.map_or(1.0, |w| w[y]);
        if w == 0.0 {
            continue;
        }
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += w * (lse - row[y]);
        norm += w;
        let g = grad.row_mut(r);
        for (gi, p) in g.iter_mut().zip(probs.row(r)) {
            *gi = w * p;
        }
        g[y] -= w;
    }
    if norm == 0.0 {
        return Err(Error::DegenerateBatch("no supervised voxels or cells"));
    }
    for g in grad.data_mut() {
        *g /= norm;
    }
    Ok((total / norm, grad))
}

fn check_labels(logits: &Tensor, labels: &VoxelLabels, width: usize) -> Result<()> {
    let s = logits.shape();
    if s.len() != 4 || s[..3] != labels.dims() || s[3] != width {
        return Err(Error::shape(format!(
            "logits {s:?} do not match labels {:?} with {width} outputs",
            labels.dims()
        )));
    }
    Ok(())
}

/// Binary occupancy cross-entropy over non-ignored voxels; `logits` is
/// `[X, Y, Z, 2]`.
pub fn loss_occ(logits: &Tensor, labels: &VoxelLabels) -> Result<f64> {
    check_labels(logits, labels, 2)?;
    Ok(cross_entropy(logits, &labels.occupancy_targets(), None)?.0)
}

/// Semantic cross-entropy over classes `0..=N`; `logits` is
/// `[X, Y, Z, N + 1]`.
pub fn loss_sem(logits: &Tensor, labels: &VoxelLabels) -> Result<f64> {
    loss_sem_with(logits, labels, &CeOptions::default())
}

pub fn loss_sem_with(logits: &Tensor, labels: &VoxelLabels, opts: &CeOptions) -> Result<f64> {
    check_labels(logits, labels, labels.n_classes() + 1)?;
    let targets = labels.semantic_targets(opts.ignore_empty);
    Ok(cross_entropy(logits, &targets, opts.class_weights.as_deref())?.0)
}

/// Depth distillation: cross-entropy between the predicted per-cell depth
/// distribution and the one-hot target, averaged over valid cells.
pub fn loss_depth(logits: &DepthLogits, target: &DepthTarget) -> Result<f64> {
    let s = logits.logits.shape();
    if s != [target.height, target.width, target.bins] {
        return Err(Error::shape(format!("depth logits {s:?} do not match the target")));
    }
    Ok(cross_entropy(&logits.logits, &target.cells, None)?.0)
}

/// Cross-entropy recorded on the tape.
pub fn cross_entropy_op(
    g: &mut Graph,
    logits: Var,
    targets: Rc<Vec<Option<usize>>>,
    weights: Option<Rc<Vec<f64>>>,
) -> Result<Var> {
    let (loss, grad) = cross_entropy(g.value(logits), &targets, weights.as_deref().map(|w| w.as_slice()))?;
    Ok(g.custom(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |ctx| vec![Some(grad.scaled(ctx.grad.item()))]),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalMode {
    Sem,
    Geo,
}

/// Collapse class probabilities to `[p_empty, 1 - p_empty]` rows.
pub fn collapse_occupancy(probs: &Tensor) -> Tensor {
    let rows = probs.rows();
    let mut out = Tensor::zeros(&[rows, 2]);
    for r in 0..rows {
        let p = probs.row(r);
        out.row_mut(r).copy_from_slice(&[p[0], p[1..].iter().sum()]);
    }
    out
}

pub fn collapse_occupancy_op(g: &mut Graph, probs: Var) -> Var {
    let out = collapse_occupancy(g.value(probs));
    g.custom(
        out,
        &[probs],
        Box::new(|ctx| {
            let p = ctx.inputs[0];
            let mut grad = Tensor::zeros(p.shape());
            for r in 0..p.rows() {
                let (g0, g1) = (ctx.grad.row(r)[0], ctx.grad.row(r)[1]);
                let row = grad.row_mut(r);
                row[0] = g0;
                for v in &mut row[1..] {
                    *v = g1;
                }
            }
            vec![Some(grad)]
        }),
    )
}

fn neg_log_grad(x: f64) -> (f64, f64) {
    // value of -ln(max(x, floor)) and its derivative in x
    if x > LOG_FLOOR {
        (-x.ln(), -1.0 / x)
    } else {
        (-LOG_FLOOR.ln(), 0.0)
    }
}

/// Soft precision / recall / specificity loss over the classes present in
/// `targets`. Returns the loss and its gradient in `probs`.
fn scal(probs: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor)> {
    let k = probs.last_dim();
    if probs.rows() != targets.len() {
        return Err(Error::shape("probability rows differ from target count"));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let n_valid = targets.iter().filter(|t| t.is_some()).count();
    let mut present = 0usize;
    let mut total = 0.0;
    let mut per_class = Vec::new();
    for c in 0..k {
        let n_c = targets.iter().filter(|&&t| t == Some(c)).count();
        if n_c == 0 {
            continue;
        }
        present += 1;
        let n_not = n_valid - n_c;
        let (mut hit, mut mass, mut spec_sum) = (0.0, 0.0, 0.0);
        for (r, t) in targets.iter().enumerate() {
            let Some(y) = *t else { continue };
            let p = probs.row(r)[c];
            mass += p;
            if y == c {
                hit += p;
            } else {
                spec_sum += 1.0 - p;
            }
        }
        let precision = if mass > 0.0 { hit / mass } else { 0.0 };
        let recall = hit / n_c as f64;
        let (lp, gp) = neg_log_grad(precision);
        let (lr, gr) = neg_log_grad(recall);
        let (ls, gs) = if n_not > 0 { neg_log_grad(spec_sum / n_not as f64) } else { (0.0, 0.0) };
        total += (lp + lr + ls) / 3.0;
        per_class.push((c, n_c, n_not, precision, mass, gp, gr, gs));
    }
    if present == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / (3.0 * present as f64);
    for (c, n_c, n_not, precision, mass, gp, gr, gs) in per_class {
        for (r, t) in targets.iter().enumerate() {
            let Some(y) = *t else { continue };
            let is_c = (y == c) as u8 as f64;
            let d_precision = if mass > 0.0 { (is_c - precision) / mass } else { 0.0 };
            let d_recall = is_c / n_c as f64;
            let d_spec = if n_not > 0 { -(1.0 - is_c) / n_not as f64 } else { 0.0 };
            grad.row_mut(r)[c] += inv * (gp * d_precision + gr * d_recall + gs * d_spec);
        }
    }
    Ok((total / present as f64, grad))
}

/// Scene-class affinity loss on per-voxel class probabilities
/// (`[X, Y, Z, K]`). `Geo` collapses the classes to empty / occupied first.
pub fn loss_scal(probs: &Tensor, labels: &VoxelLabels, mode: ScalMode) -> Result<f64> {
    if probs.shape().len() != 4 || probs.shape()[..3] != labels.dims() {
        return Err(Error::shape("probabilities do not match the label grid"));
    }
    match mode {
        ScalMode::Sem => {
            if probs.last_dim() != labels.n_classes() + 1 {
                return Err(Error::shape("semantic affinity needs N + 1 class probabilities"));
            }
            Ok(scal(probs, &labels.semantic_targets(false))?.0)
        }
        ScalMode::Geo => Ok(scal(&collapse_occupancy(probs), &labels.occupancy_targets())?.0),
    }
}

/// Affinity loss recorded on the tape; `probs` already carries the class
/// layout that `targets` index into.
pub fn scal_op(g: &mut Graph, probs: Var, targets: Rc<Vec<Option<usize>>>) -> Result<Var> {
    let (loss, grad) = scal(g.value(probs), &targets)?;
    Ok(g.custom(
        Tensor::scalar(loss),
        &[probs],
        Box::new(move |ctx| vec![Some(grad.scaled(ctx.grad.item()))]),
    ))
}

/// Annealed weight `max(0.2, 1 - step / total_steps)`.
pub fn gamma(step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Domain("total_steps must be positive".into()));
    }
    Ok((1.0 - step as f64 / total_steps as f64).max(0.2))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_occ: f64,
    pub l_sem: f64,
    pub l_depth: f64,
    pub l_scal_sem: f64,
    pub l_scal_geo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_occ: f64,
    pub l_sem: f64,
    pub l_depth: f64,
    pub l_scal_sem: f64,
    pub l_scal_geo: f64,
    pub gamma: f64,
    pub l_total: f64,
    /// Additional named terms added to the total by training hooks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<(String, f64)>,
}

pub fn loss_total(c: LossComponents, step: u64, total_steps: u64) -> Result<LossReport> {
    loss_total_with_extra(c, step, total_steps, Vec::new())
}

pub fn loss_total_with_extra(
    c: LossComponents,
    step: u64,
    total_steps: u64,
    extra: Vec<(String, f64)>,
) -> Result<LossReport> {
    let gamma = gamma(step, total_steps)?;
    let l_total = c.l_occ + c.l_sem + c.l_depth + gamma * c.l_scal_sem + c.l_scal_geo + extra.iter().map(|e| e.1).sum::<f64>();
    Ok(LossReport {
        l_occ: c.l_occ,
        l_sem: c.l_sem,
        l_depth: c.l_depth,
        l_scal_sem: c.l_scal_sem,
        l_scal_geo: c.l_scal_geo,
        gamma,
        l_total,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(data: Vec<u8>, n: usize) -> VoxelLabels {
        VoxelLabels::new([data.len(), 1, 1], n, data).unwrap()
    }

    fn logits(rows: Vec<Vec<f64>>) -> Tensor {
        let k = rows[0].len();
        Tensor::from_vec(&[rows.len(), 1, 1, k], rows.concat()).unwrap()
    }

    #[test]
    fn label_validation() {
        assert!(VoxelLabels::new([2, 1, 1], 3, vec![4, 0]).is_err());
        assert!(VoxelLabels::new([2, 1, 1], 3, vec![3, 255]).is_ok());
        assert!(VoxelLabels::new([3, 1, 1], 3, vec![3, 255]).is_err());
    }

    #[test]
    fn occ_uniform_is_ln2() {
        let l = labels(vec![0, 1, 2, 255], 2);
        let v = loss_occ(&Tensor::zeros(&[4, 1, 1, 2]), &l).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn occ_two_voxel_hand_case() {
        let l = labels(vec![0, 2], 2);
        let z = logits(vec![vec![1.0, 0.0], vec![0.5, -0.5]]);
        // voxel 0: -ln(e/(e+1)); voxel 1: -ln(e^-0.5/(e^0.5+e^-0.5))
        let a = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let b = -((-0.5f64).exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
        assert!((loss_occ(&z, &l).unwrap() - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn occ_perfect_is_tiny() {
        let l = labels(vec![0, 1], 1);
        let z = logits(vec![vec![30.0, -30.0], vec![-30.0, 30.0]]);
        assert!(loss_occ(&z, &l).unwrap() < 1e-6);
    }

    #[test]
    fn all_ignored_is_degenerate() {
        let l = labels(vec![255, 255], 2);
        assert!(matches!(loss_occ(&Tensor::zeros(&[2, 1, 1, 2]), &l), Err(Error::DegenerateBatch(_))));
        assert!(matches!(loss_sem(&Tensor::zeros(&[2, 1, 1, 3]), &l), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn sem_uniform_is_ln_classes() {
        let l = labels(vec![0, 1, 3], 3);
        let v = loss_sem(&Tensor::zeros(&[3, 1, 1, 4]), &l).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sem_three_voxel_hand_case() {
        let l = labels(vec![0, 1, 2], 2);
        let z = logits(vec![vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0], vec![2.0, 0.0, 0.0]]);
        let lse = |r: [f64; 3]| r.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        let expected = ((lse([0.0, 1.0, 2.0]) - 0.0) + (lse([1.0; 3]) - 1.0) + (lse([2.0, 0.0, 0.0]) - 0.0)) / 3.0;
        assert!((loss_sem(&z, &l).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn sem_mask_toggle_drops_empty() {
        let l = labels(vec![0, 1], 1);
        let z = logits(vec![vec![0.0, 5.0], vec![0.0, 5.0]]);
        let opts = CeOptions { ignore_empty: true, ..Default::default() };
        let masked = loss_sem_with(&z, &l, &opts).unwrap();
        let expected = (1.0 + 5f64.exp()).ln() - 5.0;
        assert!((masked - expected).abs() < 1e-12);
    }

    #[test]
    fn class_weights_change_the_mean() {
        let l = labels(vec![0, 1], 1);
        let z = logits(vec![vec![0.0, 0.0], vec![0.0, 3.0]]);
        let a = 2f64.ln();
        let b = (1.0 + 3f64.exp()).ln() - 3.0;
        let opts = CeOptions { class_weights: Some(vec![3.0, 1.0]), ..Default::default() };
        let v = loss_sem_with(&z, &l, &opts).unwrap();
        assert!((v - (3.0 * a + b) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_cases() {
        let t = DepthTarget { height: 1, width: 2, bins: 4, cells: vec![Some(1), None] };
        let uniform = DepthLogits::new(Tensor::zeros(&[1, 2, 4])).unwrap();
        assert!((loss_depth(&uniform, &t).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut v = vec![0.0; 8];
        v[1] = 40.0;
        let sat = DepthLogits::new(Tensor::from_vec(&[1, 2, 4], v).unwrap()).unwrap();
        assert!(loss_depth(&sat, &t).unwrap() < 1e-6);
        let hand = DepthLogits::new(Tensor::from_vec(&[1, 2, 4], vec![0.0, 1.0, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0]).unwrap()).unwrap();
        let expected = (1f64 + 1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 1.0;
        assert!((loss_depth(&hand, &t).unwrap() - expected).abs() < 1e-12);
        let none = DepthTarget { height: 1, width: 2, bins: 4, cells: vec![None, None] };
        assert!(loss_depth(&uniform, &none).is_err());
    }

    fn probs(rows: Vec<Vec<f64>>) -> Tensor {
        logits(rows)
    }

    #[test]
    fn scal_perfect_is_exactly_zero() {
        let l = labels(vec![0, 1, 2, 255], 2);
        let p = probs(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.2, 0.3, 0.5]]);
        assert_eq!(loss_scal(&p, &l, ScalMode::Sem).unwrap(), 0.0);
        assert_eq!(loss_scal(&p, &l, ScalMode::Geo).unwrap(), 0.0);
    }

    #[test]
    fn scal_uniform_four_voxel_hand_case() {
        // labels 0,0,1,2 with uniform probs 1/3 everywhere.
        let l = labels(vec![0, 0, 1, 2], 2);
        let p = probs(vec![vec![1.0 / 3.0; 3]; 4]);
        // class 0: P = (2/3)/(4/3) = 1/2, R = (2/3)/2 = 1/3, S = (2*2/3)/2 = 2/3
        // class 1: P = (1/3)/(4/3) = 1/4, R = 1/3, S = (3*2/3)/3 = 2/3
        // class 2: same as class 1
        let c0 = -((0.5f64).ln() + (1.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln()) / 3.0;
        let c1 = -((0.25f64).ln() + (1.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln()) / 3.0;
        let expected = (c0 + 2.0 * c1) / 3.0;
        assert!((loss_scal(&p, &l, ScalMode::Sem).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn scal_geo_collapse_hand_case() {
        // empty, occupied: probs collapse to [0.5, 0.5] and [0.25, 0.75]
        let l = labels(vec![0, 1], 2);
        let p = probs(vec![vec![0.5, 0.25, 0.25], vec![0.25, 0.5, 0.25]]);
        // empty: P = 0.5/0.75, R = 0.5, S = 0.75
        // occupied: P = 0.75/1.25, R = 0.75, S = 0.5
        let e = -((0.5f64 / 0.75).ln() + 0.5f64.ln() + 0.75f64.ln()) / 3.0;
        let o = -((0.75f64 / 1.25).ln() + 0.75f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((loss_scal(&p, &l, ScalMode::Geo).unwrap() - (e + o) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn scal_precision_half_with_perfect_recall() {
        // Class 1 has recall 1 and precision 1/2; the only way to halve its
        // precision is mass on a non-class voxel, which drives specificity to
        // the log floor. Class 0 receives no mass at all.
        let p = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (v, _) = scal(&p, &[Some(1), Some(0)]).unwrap();
        let floor = LOG_FLOOR.ln();
        let c1 = -(0.5f64.ln() + 0.0 + floor) / 3.0;
        let c0 = -(floor + floor + 0.0) / 3.0;
        assert!((v - (c0 + c1) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn scal_ignores_unlabelled_rows() {
        let p = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(scal(&p, &[Some(1), None]).unwrap().0, 0.0);
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(gamma(0, 100).unwrap(), 1.0);
        assert_eq!(gamma(100, 100).unwrap(), 0.2);
        assert_eq!(gamma(50, 100).unwrap(), 0.5);
        assert_eq!(gamma(1000, 100).unwrap(), 0.2);
        assert!(gamma(1, 0).is_err());
    }

    #[test]
    fn total_examples() {
        let ones = LossComponents { l_occ: 1.0, l_sem: 1.0, l_depth: 1.0, l_scal_sem: 1.0, l_scal_geo: 1.0 };
        assert_eq!(loss_total(LossComponents::default(), 0, 10).unwrap().l_total, 0.0);
        assert_eq!(loss_total(ones, 0, 10).unwrap().l_total, 5.0);
        assert!((loss_total(ones, 10, 10).unwrap().l_total - 4.2).abs() < 1e-12);
    }
}
