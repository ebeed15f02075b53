//! Completion metrics and ablation comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{VoxelLabels, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Per-voxel argmax of `[X, Y, Z, N + 1]` logits; ties go to the lowest
/// class.
pub fn predict_labels(logits: &Tensor, n_classes: usize) -> Result<VoxelLabels> {
    let s = logits.shape();
    if s.len() != 4 || s[3] != n_classes + 1 {
        return Err(Error::Shape(format!("logits {s:?} do not carry {} classes", n_classes + 1)));
    }
    let data = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    VoxelLabels::new([s[0], s[1], s[2]], n_classes, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Raw confusion counts; reports are derived from these so that
/// aggregation over samples is exact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub n_classes: usize,
    pub occupancy: Counts,
    /// Index `c - 1` holds class `c`.
    pub per_class: Vec<Counts>,
    /// Whether class `c` occurs in the ground truth.
    pub present: Vec<bool>,
}

impl MetricCounts {
    pub fn new(n_classes: usize) -> Self {
        MetricCounts {
            n_classes,
            occupancy: Counts::default(),
            per_class: vec![Counts::default(); n_classes],
            present: vec![false; n_classes],
        }
    }

    pub fn accumulate(&mut self, other: &MetricCounts) {
        self.occupancy.add(&other.occupancy);
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        for (a, b) in self.present.iter_mut().zip(&other.present) {
            *a |= *b;
        }
    }

    pub fn report(&self) -> MetricReport {
        let mut per_class_iou = BTreeMap::new();
        for (i, c) in self.per_class.iter().enumerate() {
            if self.present[i] {
                per_class_iou.insert(i + 1, c.iou().unwrap_or(0.0));
            }
        }
        let ssc_miou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        MetricReport { sc_iou: self.occupancy.iou().unwrap_or(0.0), per_class_iou, ssc_miou, counts: self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sc_iou: f64,
    /// IoU of each semantic class present in the ground truth.
    pub per_class_iou: BTreeMap<usize, f64>,
    pub ssc_miou: f64,
    pub counts: MetricCounts,
}

pub fn count_metrics(pred: &VoxelLabels, gt: &VoxelLabels) -> Result<MetricCounts> {
    if pred.dims() != gt.dims() || pred.n_classes() != gt.n_classes() {
        return Err(Error::Shape(format!(
            "prediction {:?}/{} does not match ground truth {:?}/{}",
            pred.dims(),
            pred.n_classes(),
            gt.dims(),
            gt.n_classes()
        )));
    }
    let mut m = MetricCounts::new(gt.n_classes());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (po, go) = (p != 0 && p != IGNORE_LABEL, g != 0);
        match (po, go) {
            (true, true) => m.occupancy.tp += 1,
            (true, false) => m.occupancy.fp += 1,
            (false, true) => m.occupancy.fn_ += 1,
            (false, false) => {}
        }
        if g != 0 {
            m.present[g as usize - 1] = true;
        }
        if p == g {
            if g != 0 {
                m.per_class[g as usize - 1].tp += 1;
            }
        } else {
            if g != 0 {
                m.per_class[g as usize - 1].fn_ += 1;
            }
            if p != 0 && p != IGNORE_LABEL {
                m.per_class[p as usize - 1].fp += 1;
            }
        }
    }
    Ok(m)
}

pub fn compute_metrics(pred: &VoxelLabels, gt: &VoxelLabels) -> Result<MetricReport> {
    Ok(count_metrics(pred, gt)?.report())
}

/// One evaluated run: per-sample reports on a named split, tagged by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub split: String,
    pub sample_ids: Vec<String>,
    /// Report over the pooled counts of every sample.
    pub aggregate: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub sc_iou: f64,
    pub ssc_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    /// Mean of `a - b` over seeds.
    pub mean_sc_iou_delta: f64,
    pub mean_ssc_miou_delta: f64,
    pub mean_a: (f64, f64),
    pub mean_b: (f64, f64),
    pub per_seed: Vec<SeedDelta>,
}

/// Signed deltas `a - b` paired by seed.
pub fn ablation_compare(label_a: &str, a: &[RunMetrics], label_b: &str, b: &[RunMetrics]) -> Result<Comparison> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Comparison(format!("run counts differ or are empty ({} vs {})", a.len(), b.len())));
    }
    let mut per_seed = Vec::new();
    for ra in a {
        let rb = b
            .iter()
            .find(|r| r.seed == ra.seed)
            .ok_or_else(|| Error::Comparison(format!("seed {} missing from {label_b}", ra.seed)))?;
        if ra.split != rb.split || ra.sample_ids != rb.sample_ids {
            return Err(Error::Comparison(format!("seed {} was evaluated on different samples", ra.seed)));
        }
        per_seed.push(SeedDelta {
            seed: ra.seed,
            sc_iou: ra.aggregate.sc_iou - rb.aggregate.sc_iou,
            ssc_miou: ra.aggregate.ssc_miou - rb.aggregate.ssc_miou,
        });
    }
    let n = a.len() as f64;
    let mean = |runs: &[RunMetrics]| {
        (runs.iter().map(|r| r.aggregate.sc_iou).sum::<f64>() / n, runs.iter().map(|r| r.aggregate.ssc_miou).sum::<f64>() / n)
    };
    Ok(Comparison {
        label_a: label_a.into(),
        label_b: label_b.into(),
        mean_sc_iou_delta: per_seed.iter().map(|d| d.sc_iou).sum::<f64>() / n,
        mean_ssc_miou_delta: per_seed.iter().map(|d| d.ssc_miou).sum::<f64>() / n,
        mean_a: mean(a),
        mean_b: mean(b),
        per_seed,
    })
}

/// Plain-text table, one row per comparison.
pub fn comparison_table(rows: &[Comparison]) -> String {
    let mut out = String::from("variant_a\tvariant_b\tmiou_a\tmiou_b\tdelta_miou\tsc_iou_a\tsc_iou_b\tdelta_sc_iou\n");
    for c in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:+.4}\t{:.4}\t{:.4}\t{:+.4}\n",
            c.label_a, c.label_b, c.mean_a.1, c.mean_b.1, c.mean_ssc_miou_delta, c.mean_a.0, c.mean_b.0, c.mean_sc_iou_delta
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(data: Vec<u8>, n: usize) -> VoxelLabels {
        VoxelLabels::new([data.len(), 1, 1], n, data).unwrap()
    }

    #[test]
    fn argmax_cases() {
        let mut z = vec![0.0; 6];
        z[3] = 1.0;
        let t = Tensor::from_vec(&[1, 1, 1, 6], z).unwrap();
        assert_eq!(predict_labels(&t, 5).unwrap().data(), &[3]);
        let t = Tensor::from_vec(&[1, 1, 1, 6], vec![0.0, 0.0, 2.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(predict_labels(&t, 5).unwrap().data(), &[2]);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = labels(vec![0, 1, 2, 2, 255], 2);
        let r = compute_metrics(&gt, &gt).unwrap();
        assert_eq!((r.sc_iou, r.ssc_miou), (1.0, 1.0));
        let r = compute_metrics(&labels(vec![0; 5], 2), &gt).unwrap();
        assert_eq!(r.sc_iou, 0.0);
    }

    #[test]
    fn four_voxel_hand_case() {
        // 2 TP, 1 FP, 1 FN
        let gt = labels(vec![1, 1, 0, 1], 1);
        let pred = labels(vec![1, 1, 1, 0], 1);
        let r = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(r.sc_iou, 0.5);
        assert_eq!(r.counts.occupancy, Counts { tp: 2, fp: 1, fn_: 1 });
    }

    #[test]
    fn ignored_voxels_do_not_count() {
        let gt = labels(vec![1, 255], 1);
        let pred = labels(vec![1, 1], 1);
        assert_eq!(compute_metrics(&pred, &gt).unwrap().counts.occupancy, Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = labels(vec![1, 1, 0], 3);
        let pred = labels(vec![1, 3, 0], 3);
        let r = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(r.per_class_iou.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(r.ssc_miou, 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(compute_metrics(&labels(vec![0, 1], 1), &labels(vec![0], 1)).is_err());
    }

    fn run(seed: u64, sc: f64, miou: f64) -> RunMetrics {
        let mut aggregate = MetricCounts::new(1).report();
        aggregate.sc_iou = sc;
        aggregate.ssc_miou = miou;
        RunMetrics { seed, split: "test".into(), sample_ids: vec!["a".into()], aggregate }
    }

    #[test]
    fn comparison_arithmetic() {
        let a = vec![run(0, 0.5, 0.4), run(1, 0.6, 0.5), run(2, 0.7, 0.3)];
        let b = vec![run(2, 0.5, 0.3), run(0, 0.5, 0.1), run(1, 0.3, 0.5)];
        let c = ablation_compare("a", &a, "b", &b).unwrap();
        assert!((c.mean_ssc_miou_delta - (0.3 + 0.0 + 0.0) / 3.0).abs() < 1e-12);
        assert!((c.mean_sc_iou_delta - (0.0 + 0.3 + 0.2) / 3.0).abs() < 1e-12);
        assert!((c.mean_a.1 - 0.4).abs() < 1e-12);
        let same = ablation_compare("a", &a, "a", &a).unwrap();
        assert_eq!((same.mean_sc_iou_delta, same.mean_ssc_miou_delta), (0.0, 0.0));
        let mut other = b.clone();
        other[0].split = "val".into();
        assert!(matches!(ablation_compare("a", &a, "b", &other), Err(Error::Comparison(_))));
    }
}
