mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use stereo_ssc::camera::{
    bin_centers, depth_to_bin, lid_inverse, project_voxels, DepthBinSpec, Discretization, VoxelGridSpec,
};
use stereo_ssc::eval::compute_metrics;
use stereo_ssc::lifting::{fuse_stereo, fuse_stereo_with, FeatureVolume, Fusion};
use stereo_ssc::losses::{gamma, VoxelLabels, IGNORE_LABEL};
use stereo_ssc::oad::{depth_softmax, frustum_to_voxel, overlap_mask, DepthLogits};
use stereo_ssc::scenes::io::{StoredTensor, TensorData};
use stereo_ssc::seed::derive_seed;
use stereo_ssc::Tensor;

fn random_spec(rng: &mut rand_chacha::ChaCha8Rng) -> DepthBinSpec {
    let mode = *Discretization::ALL.choose(rng).unwrap();
    let d_min = rng.random_range(0.05..3.0);
    let d_max = d_min + rng.random_range(0.5..40.0);
    DepthBinSpec::new(d_min, d_max, rng.random_range(2..65), mode).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_matches_oracle(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (grid, origin, dims, size) = random_grid(&mut rng);
        let cam = RawCamera::aimed(&mut rng, grid_center(origin, dims, size));
        let got = project_voxels(&grid, &cam.model());
        for (n, p) in got.iter().enumerate() {
            let [i, j, k] = grid.coords(n);
            let (u, v, depth, inside) = cam.project(centroid(origin, size, i, j, k));
            prop_assert!((p.depth - depth).abs() <= 1e-9 * depth.abs().max(1.0));
            if cam.border_distance(u, v) > 1e-6 && depth.abs() > 1e-9 {
                prop_assert_eq!(p.valid, inside);
            }
            if p.valid && inside {
                prop_assert!((p.u - u).abs() <= 1e-6 && (p.v - v).abs() <= 1e-6, "{:?} vs ({u}, {v})", p);
            }
        }
    }

    #[test]
    fn depth_to_bin_matches_oracle(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let spec = random_spec(&mut rng);
        for _ in 0..20 {
            let d = rng.random_range(1e-3..spec.d_max() * 1.2);
            prop_assert_eq!(depth_to_bin(&spec, d).unwrap(), oracle_depth_to_bin(&spec, d));
        }
        prop_assert!(depth_to_bin(&spec, 0.0).is_err());
        prop_assert!(depth_to_bin(&spec, f64::NAN).is_err());
    }

    #[test]
    fn overlap_mask_matches_oracle(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (grid, origin, dims, size) = random_grid(&mut rng);
        let (rig, left, right) = random_rig(&mut rng, grid_center(origin, dims, size));
        let mask = overlap_mask(&grid, &rig);
        for n in 0..grid.n_voxels() {
            let [i, j, k] = grid.coords(n);
            let c = centroid(origin, size, i, j, k);
            let (ul, vl, _, in_l) = left.project(c);
            let (ur, vr, _, in_r) = right.project(c);
            if left.border_distance(ul, vl) < 1e-9 || right.border_distance(ur, vr) < 1e-9 {
                continue;
            }
            let expected = if in_l && in_r { 0.5 } else { 1.0 };
            prop_assert_eq!(mask.values.data()[n], expected);
        }
    }

    #[test]
    fn metrics_match_oracle(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n_classes = rng.random_range(1..10);
        let gt = random_labels(&mut rng, [8, 8, 8], n_classes, 0.1);
        let pred = random_labels(&mut rng, [8, 8, 8], n_classes, 0.02);
        let got = compute_metrics(&pred, &gt).unwrap();
        let want = oracle_metrics(&pred, &gt);
        prop_assert_eq!(got.sc_iou, want.sc_iou);
        prop_assert_eq!(got.ssc_miou, want.miou);
        for c in 1..=n_classes {
            prop_assert_eq!(got.per_class_iou.get(&c).copied(), want.per_class[c - 1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn frustum_rows_normalized_and_priors_bounded(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let spec = random_spec(&mut rng);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let spread = rng.random_range(0.1..80.0);
        let logits: Vec<f64> = (0..h * w * spec.bins()).map(|_| rng.random_range(-spread..spread)).collect();
        let logits = DepthLogits::new(Tensor::from_vec(&[h, w, spec.bins()], logits).unwrap()).unwrap();
        let dist = depth_softmax(&logits, spec.clone(), 8).unwrap();
        for r in 0..dist.probs.rows() {
            let row = dist.probs.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        let (grid, origin, dims, size) = random_grid(&mut rng);
        let mut cam = RawCamera::aimed(&mut rng, grid_center(origin, dims, size));
        cam.width = w * 8;
        cam.height = h * 8;
        cam.cx = rng.random_range(0.0..cam.width as f64);
        cam.cy = rng.random_range(0.0..cam.height as f64);
        let prior = frustum_to_voxel(&dist, &grid, &cam.model());
        prop_assert!(prior.values.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn mask_values_are_half_or_one(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (grid, origin, dims, size) = random_grid(&mut rng);
        let (rig, _, _) = random_rig(&mut rng, grid_center(origin, dims, size));
        prop_assert!(overlap_mask(&grid, &rig).values.data().iter().all(|&m| m == 0.5 || m == 1.0));
    }

    #[test]
    fn metrics_invariant_under_relabeling(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n_classes = rng.random_range(2..10);
        let gt = random_labels(&mut rng, [6, 5, 7], n_classes, 0.1);
        let pred = random_labels(&mut rng, [6, 5, 7], n_classes, 0.0);
        let mut perm: Vec<u8> = (1..=n_classes as u8).collect();
        perm.shuffle(&mut rng);
        let relabel = |l: &VoxelLabels| {
            let data = l.data().iter().map(|&c| if c == 0 || c == IGNORE_LABEL { c } else { perm[c as usize - 1] }).collect();
            VoxelLabels::new(l.dims(), n_classes, data).unwrap()
        };
        let a = compute_metrics(&pred, &gt).unwrap();
        let b = compute_metrics(&relabel(&pred), &relabel(&gt)).unwrap();
        prop_assert_eq!(a.sc_iou, b.sc_iou);
        prop_assert!((a.ssc_miou - b.ssc_miou).abs() <= 1e-12);
    }

    #[test]
    fn sc_iou_ignores_semantic_swaps(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let n_classes = rng.random_range(2..10);
        let gt = random_labels(&mut rng, [5, 5, 5], n_classes, 0.1);
        let pred = random_labels(&mut rng, [5, 5, 5], n_classes, 0.0);
        let swapped: Vec<u8> = pred
            .data()
            .iter()
            .map(|&c| if c != 0 && rng.random_bool(0.5) { rng.random_range(1..=n_classes as u8) } else { c })
            .collect();
        let swapped = VoxelLabels::new(pred.dims(), n_classes, swapped).unwrap();
        prop_assert_eq!(compute_metrics(&pred, &gt).unwrap().sc_iou, compute_metrics(&swapped, &gt).unwrap().sc_iou);
    }

    #[test]
    fn lid_identities(d_min in 0.0f64..5.0, span in 0.1f64..60.0, bins in 2usize..80, t in 0.0f64..1.0) {
        let spec = DepthBinSpec::new(d_min, d_min + span, bins, Discretization::Lid).unwrap();
        prop_assert_eq!(spec.depth_at(0.0), spec.d_min());
        prop_assert_eq!(spec.depth_at(bins as f64), spec.d_max());
        let c = bin_centers(&spec);
        for w in c.windows(3) {
            prop_assert!(w[1] > w[0] && w[2] - w[1] > w[1] - w[0]);
        }
        let d = spec.d_min() + t * span;
        let back = spec.depth_at(lid_inverse(&spec, d).unwrap());
        prop_assert!((back - d).abs() < 1e-9);
    }

    #[test]
    fn ud_gaps_constant_and_sid_ratio_constant(d_min in 0.05f64..5.0, span in 0.1f64..60.0, bins in 2usize..80) {
        let ud = bin_centers(&DepthBinSpec::new(d_min, d_min + span, bins, Discretization::Ud).unwrap());
        let gap = span / bins as f64;
        prop_assert!(ud.windows(2).all(|w| (w[1] - w[0] - gap).abs() <= 1e-12 * (d_min + span)));
        let sid = bin_centers(&DepthBinSpec::new(d_min, d_min + span, bins, Discretization::Sid).unwrap());
        let ratio = ((d_min + span) / d_min).powf(1.0 / bins as f64);
        prop_assert!(sid.windows(2).all(|w| (w[1] / w[0] - ratio).abs() <= 1e-9));
    }

    #[test]
    fn gamma_schedule_bounded_and_nonincreasing(total in 1u64..100_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (s0, s1) = ((lo * total as f64) as u64, (hi * total as f64) as u64);
        let (g0, g1) = (gamma(s0, total).unwrap(), gamma(s1, total).unwrap());
        prop_assert!(g1 <= g0 && (0.2..=1.0).contains(&g1));
        prop_assert_eq!(gamma(0, total).unwrap(), 1.0);
        prop_assert_eq!(gamma(total, total).unwrap(), 0.2);
    }

    #[test]
    fn fusion_is_symmetric_and_shrinks_the_mean(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let grid = VoxelGridSpec::new([0.0; 3], [2, 3, 2], 0.5).unwrap();
        let c = rng.random_range(1..6);
        let vol = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..12 * c).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(-2.0..2.0) }).collect();
            FeatureVolume::new(Tensor::from_vec(&[2, 3, 2, c], data).unwrap(), grid.clone()).unwrap()
        };
        let (l, r) = (vol(&mut rng), vol(&mut rng));
        let lr = fuse_stereo(&l, &r).unwrap();
        let rl = fuse_stereo(&r, &l).unwrap();
        prop_assert_eq!(&lr.values, &rl.values);
        let mean = fuse_stereo_with(&l, &r, Fusion::Mean).unwrap();
        for n in 0..12 {
            let (lv, rv) = (l.voxel(n), r.voxel(n));
            let one_sided = lv.iter().all(|&x| x == 0.0) || rv.iter().all(|&x| x == 0.0);
            for ch in 0..c {
                let (f, m) = (lr.voxel(n)[ch], mean.voxel(n)[ch]);
                if one_sided {
                    prop_assert_eq!(f, lv[ch] + rv[ch]);
                } else {
                    prop_assert!(f.abs() <= m.abs() + 1e-15 && f * m >= 0.0);
                }
            }
        }
    }

    #[test]
    fn tensor_container_round_trips(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let rank = rng.random_range(0..5);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
        let n: usize = shape.iter().product();
        let data = if rng.random_bool(0.5) {
            TensorData::U8((0..n).map(|_| rng.random()).collect())
        } else {
            TensorData::F64((0..n).map(|_| rng.random_range(-1e9..1e9)).collect())
        };
        let t = StoredTensor { shape, data };
        let bytes = t.encode();
        prop_assert_eq!(StoredTensor::decode(&bytes).unwrap(), t);
        let flip = rng.random_range(0..bytes.len());
        let mut corrupt = bytes.clone();
        corrupt[flip] ^= 1 << rng.random_range(0..8);
        prop_assert!(StoredTensor::decode(&corrupt).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_label_and_index(master in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive_seed(master, "scene", i), derive_seed(master, "scene", i));
        prop_assert_ne!(derive_seed(master, "scene", i), derive_seed(master, "scene", i + 1));
        prop_assert_ne!(derive_seed(master, "scene", i), derive_seed(master, "init", i));
    }
}
