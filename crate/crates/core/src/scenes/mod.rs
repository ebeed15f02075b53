//! Procedural indoor scenes: a closed voxel-aligned room with labelled
//! boxes, rendered exactly from a rectified stereo rig.

mod augment;
pub mod io;
mod stereo;

pub use augment::{augment, AugmentParams};
pub use stereo::{virtual_stereo, VirtualView};

use image::{Rgb, RgbImage};
use nalgebra::{Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CameraRig, DepthMap, VoxelGridSpec};
use crate::error::{Error, Result};
use crate::losses::{VoxelLabels, IGNORE_LABEL};
use crate::seed::rng_for;

pub const CLASS_FLOOR: u8 = 1;
pub const CLASS_WALL: u8 = 2;
pub const CLASS_CEILING: u8 = 3;
/// Lowest class id available to furniture boxes.
pub const FIRST_OBJECT_CLASS: u8 = 4;

const CLASS_NAMES: [&str; 15] = [
    "empty", "floor", "wall", "ceiling", "table", "chair", "sofa", "cabinet", "bed", "shelf", "tv", "desk", "window",
    "plant", "lamp",
];

/// Names for classes `0..=n_classes`.
pub fn class_names(n_classes: usize) -> Vec<String> {
    (0..=n_classes).map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())).collect()
}

/// Flat colour of a class.
pub fn class_color(class: u8) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 15] = [
        [0, 0, 0],
        [150, 110, 70],
        [200, 200, 190],
        [240, 240, 250],
        [180, 60, 40],
        [40, 120, 200],
        [90, 160, 60],
        [220, 180, 40],
        [150, 60, 160],
        [30, 170, 160],
        [60, 60, 60],
        [230, 120, 170],
        [120, 200, 240],
        [20, 100, 40],
        [250, 140, 20],
    ];
    match PALETTE.get(class as usize) {
        Some(c) => Rgb(*c),
        None => {
            let h = (class as u32).wrapping_mul(2_654_435_761);
            Rgb([(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8])
        }
    }
}

/// Axis-aligned solid spanning voxel index ranges `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolidBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub class: u8,
}

impl SolidBox {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= v[a] && v[a] < self.max[a])
    }

    fn overlaps(&self, other: &SolidBox) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    fn world_bounds(&self, grid: &VoxelGridSpec) -> ([f64; 3], [f64; 3]) {
        let (o, s) = (grid.origin(), grid.voxel_size());
        (
            std::array::from_fn(|a| o[a] + self.min[a] as f64 * s),
            std::array::from_fn(|a| o[a] + self.max[a] as f64 * s),
        )
    }

    /// Entry distance of the ray `origin + t * dir`, if it hits at `t > 0`.
    fn ray_entry(&self, grid: &VoxelGridSpec, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let (lo, hi) = self.world_bounds(grid);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub baseline: f64,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Standard deviation of additive per-pixel colour noise (0..255 scale).
    pub color_noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            grid_dims: [32, 16, 32],
            voxel_size: 0.2,
            image_width: 64,
            image_height: 64,
            fov_deg: 90.0,
            baseline: 0.3,
            n_classes: 8,
            min_objects: 2,
            max_objects: 6,
            color_noise: 0.0,
        }
    }
}

impl SceneParams {
    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new([0.0; 3], self.grid_dims, self.voxel_size)
    }

    fn validate(&self) -> Result<()> {
        let [x, y, z] = self.grid_dims;
        if x < 6 || y < 5 || z < 6 {
            return Err(Error::Generation(format!("room {:?} is too small for walls and a camera", self.grid_dims)));
        }
        if self.n_classes < 3 || self.n_classes >= IGNORE_LABEL as usize {
            return Err(Error::Generation(format!("{} classes cannot hold floor, wall and ceiling", self.n_classes)));
        }
        if self.max_objects > 0 && self.n_classes < FIRST_OBJECT_CLASS as usize {
            return Err(Error::Generation("objects need at least one furniture class".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Generation("min_objects exceeds max_objects".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) || !(self.baseline >= 0.0) {
            return Err(Error::Generation("field of view or baseline out of range".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Generation("empty image".into()));
        }
        if !(self.color_noise >= 0.0) {
            return Err(Error::Generation("colour noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Camera intrinsics shared by both views.
    pub fn focal(&self) -> f64 {
        self.image_width as f64 / 2.0 / (self.fov_deg.to_radians() / 2.0).tan()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    pub left_image: RgbImage,
    pub right_image: RgbImage,
    /// Metric z-depth; `0` marks an invalid pixel.
    pub left_depth: DepthMap,
    pub right_depth: DepthMap,
    pub labels: VoxelLabels,
    pub rig: CameraRig,
    pub grid: VoxelGridSpec,
    /// Every solid in the scene, room shell first.
    pub solids: Vec<SolidBox>,
}

/// Floor, ceiling and four walls, one voxel thick and mutually disjoint.
pub fn room_shell(dims: [usize; 3]) -> Vec<SolidBox> {
    let [x, y, z] = dims;
    let b = |min, max, class| SolidBox { min, max, class };
    vec![
        b([0, 0, 0], [x, 1, z], CLASS_FLOOR),
        b([0, y - 1, 0], [x, y, z], CLASS_CEILING),
        b([0, 1, 0], [1, y - 1, z], CLASS_WALL),
        b([x - 1, 1, 0], [x, y - 1, z], CLASS_WALL),
        b([1, 1, 0], [x - 1, y - 1, 1], CLASS_WALL),
        b([1, 1, z - 1], [x - 1, y - 1, z], CLASS_WALL),
    ]
}

/// Free-space corridor reserved for the cameras, in voxel indices.
fn camera_keepout(dims: [usize; 3]) -> SolidBox {
    let [x, y, z] = dims;
    SolidBox { min: [x / 2 - x / 5, 0, 0], max: [x / 2 + x / 5 + 1, y, z / 4 + 1], class: 0 }
}

pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneSample> {
    generate_scene_with_id(seed, params, format!("scene-{seed:016x}"))
}

pub fn generate_scene_with_id(seed: u64, params: &SceneParams, sample_id: String) -> Result<SceneSample> {
    params.validate()?;
    let grid = params.grid()?;
    let dims = params.grid_dims;
    let mut rng = rng_for(seed, "scene", 0);

    let mut solids = room_shell(dims);
    let n_objects = rng.random_range(params.min_objects..=params.max_objects);
    let keepout = camera_keepout(dims);
    let size_max = [(dims[0] / 4).max(2), (dims[1] / 2).max(2), (dims[2] / 4).max(2)];
    if size_max[0] + 2 > dims[0] || size_max[1] + 2 > dims[1] || size_max[2] + 2 > dims[2] {
        return Err(Error::Generation("objects do not fit inside the room".into()));
    }
    let n_classes = params.n_classes as u8;
    for _ in 0..n_objects {
        for _attempt in 0..64 {
            let size: [usize; 3] = std::array::from_fn(|a| rng.random_range(2..=size_max[a]));
            let i = rng.random_range(1..=dims[0] - 1 - size[0]);
            let k = rng.random_range(1..=dims[2] - 1 - size[2]);
            let class = rng.random_range(FIRST_OBJECT_CLASS..=n_classes);
            let b = SolidBox { min: [i, 1, k], max: [i + size[0], 1 + size[1], k + size[2]], class };
            if !b.overlaps(&keepout) && solids[6..].iter().all(|o| !o.overlaps(&b)) {
                solids.push(b);
                break;
            }
        }
    }

    let s = params.voxel_size;
    let room = grid.extent_max();
    let eye = Point3::new(
        room[0] / 2.0 + rng.random_range(-0.5..0.5) * s * 2.0,
        (rng.random_range(1.2..1.6f64)).min(room[1] - 2.0 * s),
        s * 1.5 + rng.random_range(0.0..1.0) * s,
    );
    let target = Point3::new(
        eye.x + rng.random_range(-0.15..0.15) * room[0],
        eye.y - rng.random_range(0.1..0.4) * room[1],
        room[2],
    );
    let f = params.focal();
    let (w, h) = (params.image_width, params.image_height);
    let left = CameraModel::look_at(eye, target, Vector3::y(), f, f, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
    let rig = CameraRig::rectified(left, params.baseline)?;

    let mut noise_rng = rng_for(seed, "color-noise", 0);
    let (left_image, left_depth) = render(&grid, &solids, &rig.left, params.color_noise, &mut noise_rng);
    let (right_image, right_depth) = render(&grid, &solids, &rig.right, params.color_noise, &mut noise_rng);
    let labels = voxelize(&grid, &solids, &rig, params.n_classes)?;
    Ok(SceneSample { sample_id, left_image, right_image, left_depth, right_depth, labels, rig, grid, solids })
}

/// First solid hit by the ray through continuous pixel `(u, v)`:
/// `(z-depth, class)`.
pub fn cast_pixel(grid: &VoxelGridSpec, solids: &[SolidBox], cam: &CameraModel, u: f64, v: f64) -> Option<(f64, u8)> {
    let origin = cam.center();
    let dir = cam.ray_direction(u, v);
    let mut best: Option<(f64, u8)> = None;
    for b in solids {
        if let Some(t) = b.ray_entry(grid, &origin, &dir) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, b.class));
            }
        }
    }
    best.map(|(t, c)| (cam.to_camera(&(origin + dir * t)).z, c))
}

/// Exact per-pixel depth and flat class colour.
pub fn render(
    grid: &VoxelGridSpec,
    solids: &[SolidBox],
    cam: &CameraModel,
    noise: f64,
    rng: &mut impl Rng,
) -> (RgbImage, DepthMap) {
    let (w, h) = (cam.width(), cam.height());
    let mut img = RgbImage::new(w as u32, h as u32);
    let mut depth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some((d, class)) = cast_pixel(grid, solids, cam, x as f64 + 0.5, y as f64 + 0.5) {
                depth[y * w + x] = d;
                let mut c = class_color(class);
                if noise > 0.0 {
                    for ch in c.0.iter_mut() {
                        let n: f64 = rng.sample(rand_distr::StandardNormal);
                        *ch = (*ch as f64 + noise * n).round().clamp(0.0, 255.0) as u8;
                    }
                }
                img.put_pixel(x as u32, y as u32, c);
            }
        }
    }
    (img, DepthMap { height: h, width: w, data: depth })
}

/// Whether any corner of voxel `(i, j, k)` projects into either view.
pub fn voxel_observed(grid: &VoxelGridSpec, rig: &CameraRig, v: [usize; 3]) -> bool {
    let (o, s) = (grid.origin(), grid.voxel_size());
    (0..8).any(|c| {
        let p = Point3::new(
            o[0] + (v[0] + (c & 1)) as f64 * s,
            o[1] + (v[1] + ((c >> 1) & 1)) as f64 * s,
            o[2] + (v[2] + ((c >> 2) & 1)) as f64 * s,
        );
        rig.cameras().iter().any(|cam| cam.project(&p).valid)
    })
}

/// Voxels inside either camera's view: a corner projects into the image or
/// some pixel-centre ray crosses the voxel. The second test catches voxels
/// close to a camera, including the one that contains it.
pub fn observed_voxels(grid: &VoxelGridSpec, rig: &CameraRig) -> Vec<bool> {
    let mut seen: Vec<bool> = (0..grid.n_voxels()).map(|n| voxel_observed(grid, rig, grid.coords(n))).collect();
    for cam in rig.cameras() {
        for y in 0..cam.height() {
            for x in 0..cam.width() {
                walk_ray(grid, cam.center(), cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5), |v, _| {
                    seen[grid.index(v[0], v[1], v[2])] = true;
                    false
                });
            }
        }
    }
    seen
}

/// Centroid-in-solid labels; voxels outside both views are ignored.
pub fn voxelize(grid: &VoxelGridSpec, solids: &[SolidBox], rig: &CameraRig, n_classes: usize) -> Result<VoxelLabels> {
    let seen = observed_voxels(grid, rig);
    let data = (0..grid.n_voxels())
        .map(|n| {
            let v = grid.coords(n);
            if !seen[n] {
                IGNORE_LABEL
            } else {
                solids.iter().find(|b| b.contains(v)).map_or(0, |b| b.class)
            }
        })
        .collect();
    VoxelLabels::new(grid.dims(), n_classes, data)
}

/// Visit the cells a ray crosses, in order, with the ray parameter at which
/// it enters each; `visit` returns true to stop. Rays starting outside the
/// grid visit nothing.
fn walk_ray(grid: &VoxelGridSpec, origin: Point3<f64>, dir: Vector3<f64>, mut visit: impl FnMut([usize; 3], f64) -> bool) {
    let (o, s, dims) = (grid.origin(), grid.voxel_size(), grid.dims());
    let mut cell = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let local = (origin[a] - o[a]) / s;
        if local < 0.0 || local >= dims[a] as f64 {
            return;
        }
        cell[a] = local.floor() as isize;
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((cell[a] + 1) as f64 - local) * s / dir[a];
            t_delta[a] = s / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - local) * s / dir[a];
            t_delta[a] = -s / dir[a];
        }
    }
    let mut t_entry = 0.0;
    loop {
        if visit([cell[0] as usize, cell[1] as usize, cell[2] as usize], t_entry) {
            return;
        }
        let a = (0..3).min_by(|&p, &q| t_max[p].total_cmp(&t_max[q])).unwrap();
        t_entry = t_max[a];
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= dims[a] as isize {
            return;
        }
        t_max[a] += t_delta[a];
    }
}

/// Z-depth of the first solid voxel along the pixel ray, found by walking
/// the label grid cell by cell. Ignored voxels do not stop the ray.
pub fn raycast_labels(labels: &VoxelLabels, grid: &VoxelGridSpec, cam: &CameraModel, u: f64, v: f64) -> Option<f64> {
    let origin = cam.center();
    let dir = cam.ray_direction(u, v);
    let mut hit = None;
    walk_ray(grid, origin, dir, |c, t| {
        let label = labels.get(c[0], c[1], c[2]);
        if label != 0 && label != IGNORE_LABEL {
            hit = Some(t);
        }
        hit.is_some()
    });
    hit.map(|t| cam.to_camera(&(origin + dir * t)).z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub valid_pixels: usize,
    pub agreeing: usize,
}

impl Consistency {
    pub fn fraction(&self) -> f64 {
        if self.valid_pixels == 0 {
            1.0
        } else {
            self.agreeing as f64 / self.valid_pixels as f64
        }
    }
}

/// Ray-cast the label grid from both cameras and count valid pixels whose
/// rendered depth agrees within one voxel size.
pub fn check_consistency(sample: &SceneSample) -> Consistency {
    let tol = sample.grid.voxel_size();
    let mut c = Consistency { valid_pixels: 0, agreeing: 0 };
    for (cam, depth) in [(&sample.rig.left, &sample.left_depth), (&sample.rig.right, &sample.right_depth)] {
        for y in 0..depth.height {
            for x in 0..depth.width {
                if !depth.is_valid(x, y) {
                    continue;
                }
                c.valid_pixels += 1;
                let hit = raycast_labels(&sample.labels, &sample.grid, cam, x as f64 + 0.5, y as f64 + 0.5);
                if hit.is_some_and(|d| (d - depth.get(x, y)).abs() <= tol) {
                    c.agreeing += 1;
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SceneParams {
        SceneParams { grid_dims: [16, 8, 16], voxel_size: 0.4, image_width: 32, image_height: 32, ..Default::default() }
    }

    #[test]
    fn empty_room_has_only_shell_labels() {
        let p = SceneParams { min_objects: 0, max_objects: 0, ..params() };
        let s = generate_scene(3, &p).unwrap();
        assert_eq!(s.solids.len(), 6);
        assert!(s.labels.data().iter().all(|&l| [0, CLASS_FLOOR, CLASS_WALL, CLASS_CEILING, IGNORE_LABEL].contains(&l)));
        assert!(s.labels.data().contains(&CLASS_FLOOR));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(generate_scene(11, &params()).unwrap(), generate_scene(11, &params()).unwrap());
        assert_ne!(generate_scene(11, &params()).unwrap(), generate_scene(12, &params()).unwrap());
    }

    #[test]
    fn unit_box_footprint() {
        // one 0.4 m box at world [2.0, 2.4] x [0.4, 0.8] x [3.2, 3.6] fills
        // exactly voxel (5, 1, 8)
        let p = params();
        let grid = p.grid().unwrap();
        let mut solids = room_shell(p.grid_dims);
        solids.push(SolidBox { min: [5, 1, 8], max: [6, 2, 9], class: 5 });
        let s = generate_scene(0, &SceneParams { min_objects: 0, max_objects: 0, ..p.clone() }).unwrap();
        let labels = voxelize(&grid, &solids, &s.rig, p.n_classes).unwrap();
        for n in 0..grid.n_voxels() {
            let v = grid.coords(n);
            let inside = v == [5, 1, 8];
            assert_eq!(labels.data()[n] == 5, inside, "{v:?}");
        }
        let c = grid.centroid(5, 1, 8);
        assert!((c.x - 2.2).abs() < 1e-12 && (c.y - 0.6).abs() < 1e-12 && (c.z - 3.4).abs() < 1e-12);
    }

    #[test]
    fn generated_scenes_are_consistent() {
        for seed in 0..4 {
            let s = generate_scene(seed, &params()).unwrap();
            let c = check_consistency(&s);
            assert_eq!(c.valid_pixels, 2 * 32 * 32);
            assert!(c.fraction() >= 0.99, "seed {seed}: {c:?}");
        }
    }

    #[test]
    fn infeasible_params_fail() {
        let p = SceneParams { grid_dims: [4, 4, 4], ..params() };
        assert!(matches!(generate_scene(0, &p), Err(Error::Generation(_))));
        let p = SceneParams { n_classes: 3, ..params() };
        assert!(generate_scene(0, &p).is_err());
    }

    #[test]
    fn left_right_depths_agree_under_reprojection() {
        let s = generate_scene(5, &params()).unwrap();
        let (mut checked, mut agree) = (0, 0);
        for y in 0..32 {
            for x in 0..32 {
                let d = s.left_depth.get(x, y);
                let dir = s.rig.left.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                let t = d / s.rig.left.to_camera(&(s.rig.left.center() + dir)).z;
                let p = s.rig.left.center() + dir * t;
                let pr = s.rig.right.project(&p);
                if !pr.valid {
                    continue;
                }
                let rd = s.right_depth.get(pr.u as usize, pr.v as usize);
                if rd < pr.depth - s.grid.voxel_size() {
                    continue; // occluded in the right view
                }
                checked += 1;
                if (rd - pr.depth).abs() <= s.grid.voxel_size() {
                    agree += 1;
                }
            }
        }
        assert!(checked > 500);
        assert!(agree as f64 >= 0.97 * checked as f64, "{agree}/{checked}");
    }
}
