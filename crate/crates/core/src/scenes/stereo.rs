use image::RgbImage;

use crate::camera::{CameraModel, DepthMap};
use crate::error::{Error, Result};

/// A synthesized right view and its per-pixel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualView {
    pub image: RgbImage,
    /// Row-major; `false` where no source pixel landed (disocclusion).
    pub valid: Vec<bool>,
    /// Depth of the pixel that won each target location, `0` if none.
    pub depth: DepthMap,
}

/// Forward-warp a left view into a rectified right camera `baseline` metres
/// to the right. Each valid pixel moves left by `fx * baseline / depth`;
/// collisions keep the nearest source.
pub fn virtual_stereo(image: &RgbImage, depth: &DepthMap, cam: &CameraModel, baseline: f64) -> Result<VirtualView> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if depth.width != w || depth.height != h {
        return Err(Error::Shape(format!("depth {}x{} does not match image {w}x{h}", depth.width, depth.height)));
    }
    if !(baseline >= 0.0 && baseline.is_finite()) {
        return Err(Error::Domain(format!("baseline {baseline} must be non-negative")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(x, y) {
                continue;
            }
            let d = depth.get(x, y);
            let target = (x as f64 + 0.5 - cam.fx() * baseline / d).floor();
            if target < 0.0 || target >= w as f64 {
                continue;
            }
            let idx = y * w + target as usize;
            if d < zbuf[idx] {
                zbuf[idx] = d;
                out.put_pixel(target as u32, y as u32, *image.get_pixel(x as u32, y as u32));
            }
        }
    }
    let valid = zbuf.iter().map(|z| z.is_finite()).collect();
    let data = zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect();
    Ok(VirtualView { image: out, valid, depth: DepthMap::new(h, w, data)? })
}
