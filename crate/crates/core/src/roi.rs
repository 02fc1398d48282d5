//! Bilinear crop-and-resize of box regions (single-sample RoI-Align).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;

/// Axis-aligned box `[x0, x1) x [y0, y1)` in continuous coordinates where
/// pixel `(i, j)` covers `[j, j+1) x [i, i+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self { x0: self.x0 * sx, y0: self.y0 * sy, x1: self.x1 * sx, y1: self.y1 * sy }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }
}

/// Crops the output of [`roi_crop`].
#[derive(Debug, Clone)]
pub struct RoiCrops {
    /// `[M, C, out_h, out_w]`, one slab per non-degenerate box.
    pub crops: Option<Tensor>,
    /// Zero-area boxes that were dropped.
    pub skipped: usize,
}

impl RoiCrops {
    pub fn count(&self) -> usize {
        self.crops.as_ref().map_or(0, |t| t.shape()[0])
    }
}

/// Bilinear value of one plane at continuous pixel-center coordinates,
/// clamped to the plane.
pub fn bilinear(plane: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let y0 = libm::floor(fy) as usize;
    let x0 = libm::floor(fx) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = fy - y0 as f64;
    let wx = fx - x0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
    top * (1.0 - wy) + bot * wy
}

/// Resamples each box of each image to `out_h x out_w`, one bilinear sample
/// at every output cell center. `boxes[n]` lists the boxes of image `n` in
/// feature coordinates.
pub fn roi_crop(feature: &Tensor, boxes: &[Vec<RoiBox>], out_h: usize, out_w: usize) -> Result<RoiCrops> {
    let (n, c, h, w) = feature.dims4("roi_crop")?;
    if boxes.len() != n {
        return Err(crate::error::dim_err(
            "roi_crop",
            alloc::format!("batch axis: {} images but {} box lists", n, boxes.len()),
        ));
    }
    let plane = h * w;
    let fd = feature.data();
    let mut out = Vec::new();
    let mut count = 0;
    let mut skipped = 0;
    for (ni, img_boxes) in boxes.iter().enumerate() {
        for b in img_boxes {
            if b.is_degenerate() {
                skipped += 1;
                continue;
            }
            let bh = (b.y1 - b.y0) / out_h as f64;
            let bw = (b.x1 - b.x0) / out_w as f64;
            let mut slab = vec![0.0; c * out_h * out_w];
            for ci in 0..c {
                let src = &fd[(ni * c + ci) * plane..][..plane];
                for i in 0..out_h {
                    let fy = b.y0 + (i as f64 + 0.5) * bh - 0.5;
                    for j in 0..out_w {
                        let fx = b.x0 + (j as f64 + 0.5) * bw - 0.5;
                        slab[(ci * out_h + i) * out_w + j] = bilinear(src, h, w, fy, fx);
                    }
                }
            }
            out.extend(slab);
            count += 1;
        }
    }
    let crops = if count == 0 { None } else { Some(Tensor::new([count, c, out_h, out_w], out)?) };
    Ok(RoiCrops { crops, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_box_at_native_size_is_identity() {
        let f = Tensor::new([1, 2, 4, 4], (0..32).map(|v| libm::cos(v as f64)).collect()).unwrap();
        let r = roi_crop(&f, &[vec![RoiBox::new(0.0, 0.0, 4.0, 4.0)]], 4, 4).unwrap();
        assert!(r.crops.unwrap().max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn constant_feature_gives_constant_crop() {
        let f = Tensor::full([2, 3, 8, 8], 1.25);
        let boxes = vec![vec![RoiBox::new(1.3, 0.2, 5.1, 7.9)], vec![RoiBox::new(6.0, 6.0, 8.0, 8.0), RoiBox::new(0.0, 0.0, 1.0, 1.0)]];
        let r = roi_crop(&f, &boxes, 4, 4).unwrap();
        assert_eq!(r.count(), 3);
        assert!(r.crops.unwrap().data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn linear_ramp_matches_pointwise_bilinear_formula() {
        // f(i, j) = 0.5 i - 2 j + 3 is reproduced exactly by bilinear sampling.
        let (h, w) = (8, 8);
        let ramp = |fy: f64, fx: f64| 0.5 * fy - 2.0 * fx + 3.0;
        let data = (0..h * w).map(|k| ramp((k / w) as f64, (k % w) as f64)).collect();
        let f = Tensor::new([1, 1, h, w], data).unwrap();
        let b = RoiBox::new(2.0, 1.0, 6.0, 5.0);
        let r = roi_crop(&f, &[vec![b]], 4, 4).unwrap().crops.unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let fy = b.y0 + (i as f64 + 0.5) - 0.5;
                let fx = b.x0 + (j as f64 + 0.5) - 0.5;
                assert!((r.data()[i * 4 + j] - ramp(fy, fx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_boxes_are_counted_and_skipped() {
        let f = Tensor::full([1, 1, 4, 4], 1.0);
        let r = roi_crop(&f, &[vec![RoiBox::new(1.0, 1.0, 1.0, 3.0), RoiBox::new(0.0, 0.0, 2.0, 2.0)]], 2, 2).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.count(), 1);
        let none = roi_crop(&f, &[vec![RoiBox::new(2.0, 2.0, 2.0, 2.0)]], 2, 2).unwrap();
        assert!(none.crops.is_none());
    }
}
