use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SceneSample;
use crate::seed::rng_for;

/// Photometric augmentation probabilities and strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub p_blur: f64,
    pub p_grayscale: f64,
    pub p_hue: f64,
    pub max_blur_sigma: f32,
    /// Hue rotation is drawn uniformly from `[-max_hue_deg, max_hue_deg]`.
    pub max_hue_deg: i32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { p_blur: 0.5, p_grayscale: 0.2, p_hue: 0.5, max_blur_sigma: 1.0, max_hue_deg: 30 }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        AugmentParams { p_blur: 0.0, p_grayscale: 0.0, p_hue: 0.0, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Draw {
    blur: Option<f32>,
    grayscale: bool,
    hue: Option<i32>,
}

fn apply(img: &RgbImage, d: Draw) -> RgbImage {
    let mut out = img.clone();
    if let Some(h) = d.hue {
        out = imageops::huerotate(&out, h);
    }
    if d.grayscale {
        let g = imageops::grayscale(&out);
        out = RgbImage::from_fn(out.width(), out.height(), |x, y| {
            let l = g.get_pixel(x, y)[0];
            Rgb([l, l, l])
        });
    }
    if let Some(s) = d.blur {
        out = imageops::blur(&out, s);
    }
    out
}

/// Photometric augmentation with one draw shared by both views; depth,
/// labels and geometry are untouched.
pub fn augment(sample: &SceneSample, params: &AugmentParams, seed: u64) -> SceneSample {
    let mut rng = rng_for(seed, "augment", 0);
    let mut coin = |p: f64| rng.random::<f64>() < p;
    let (blur, gray, hue) = (coin(params.p_blur), coin(params.p_grayscale), coin(params.p_hue));
    let draw = Draw {
        blur: (blur && params.max_blur_sigma > 0.0).then(|| rng.random_range(0.1..=params.max_blur_sigma.max(0.1))),
        grayscale: gray,
        hue: (hue && params.max_hue_deg > 0).then(|| rng.random_range(-params.max_hue_deg..=params.max_hue_deg)),
    };
    let mut out = sample.clone();
    out.left_image = apply(&sample.left_image, draw);
    out.right_image = apply(&sample.right_image, draw);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, SceneParams};

    fn sample() -> SceneSample {
        let p = SceneParams { grid_dims: [12, 6, 12], voxel_size: 0.5, image_width: 16, image_height: 16, ..Default::default() };
        generate_scene(1, &p).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = sample();
        assert_eq!(augment(&s, &AugmentParams::disabled(), 9), s);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let s = sample();
        let p = AugmentParams { p_grayscale: 1.0, ..AugmentParams::disabled() };
        let a = augment(&s, &p, 3);
        for px in a.left_image.pixels().chain(a.right_image.pixels()) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        assert_eq!(a.labels, s.labels);
        assert_eq!(a.left_depth, s.left_depth);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let s = sample();
        let p = AugmentParams { p_blur: 1.0, p_grayscale: 0.0, p_hue: 1.0, ..Default::default() };
        assert_eq!(augment(&s, &p, 4), augment(&s, &p, 4));
        assert_ne!(augment(&s, &p, 4).left_image, s.left_image);
    }
}
