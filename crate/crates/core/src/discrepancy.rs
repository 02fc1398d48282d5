//! Per-channel feature discrepancy between a target batch and source means.
//!
//! The image-level term compares whole feature maps with the source mean map,
//! the instance-level term compares RoI crops with the source mean crop. Both
//! are normalized and summed into one score per channel; the layer score is
//! the channel mean.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{boxes_to_feature, LayerStats, INSTANCE_SIZE};
use crate::error::{dim_err, Error, Result};
use crate::roi::{roi_crop, RoiBox};
use crate::tensor::Tensor;

/// Guard on normalization denominators.
pub const NORM_EPS: f64 = 1e-12;

/// Distance between a target feature plane and the source mean plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Mean absolute difference.
    #[default]
    L1,
    /// Root-mean-square difference.
    L2,
    /// One minus cosine similarity.
    Cosine,
}

/// How the image and instance terms are brought to a common scale before
/// they are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Divide each vector by its own channel mean.
    UnitMean,
    /// Divide both vectors by the layer's mean source standard deviation.
    #[default]
    SourceScale,
}

fn plane_distance(metric: Metric, t: &[f64], s: &[f64]) -> f64 {
    let n = t.len() as f64;
    match metric {
        Metric::L1 => t.iter().zip(s).map(|(a, b)| libm::fabs(a - b)).sum::<f64>() / n,
        Metric::L2 => libm::sqrt(t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n),
        Metric::Cosine => {
            let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
            let nt = libm::sqrt(t.iter().map(|a| a * a).sum::<f64>());
            let ns = libm::sqrt(s.iter().map(|b| b * b).sum::<f64>());
            if nt <= NORM_EPS || ns <= NORM_EPS {
                if nt <= NORM_EPS && ns <= NORM_EPS { 0.0 } else { 1.0 }
            } else {
                (1.0 - dot / (nt * ns)).max(0.0)
            }
        }
    }
}

/// Per-channel distance of `[N, C, H, W]` samples to a `[C, H, W]` mean,
/// averaged over samples.
fn per_channel(op: &'static str, x: &Tensor, mean: &Tensor, metric: Metric) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4(op)?;
    if mean.shape() != [c, h, w] {
        return Err(dim_err(op, format!("samples {:?} against mean {:?}", x.shape(), mean.shape())));
    }
    let plane = h * w;
    let (xd, md) = (x.data(), mean.data());
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += plane_distance(metric, &xd[(ni * c + ci) * plane..][..plane], &md[ci * plane..][..plane]);
        }
    }
    if n > 0 {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Tensor::from_vec(out))
}

/// `D^I_c = sum_n |X_t - Xbar_s|_1 / (N H W)` for channel `c`.
pub fn image_discrepancy(taps: &Tensor, source_mean: &Tensor) -> Result<Tensor> {
    image_discrepancy_with(taps, source_mean, Metric::L1)
}

pub fn image_discrepancy_with(taps: &Tensor, source_mean: &Tensor, metric: Metric) -> Result<Tensor> {
    if taps.dims4("image_discrepancy")?.0 == 0 {
        return Err(Error::Empty("image_discrepancy"));
    }
    per_channel("image_discrepancy", taps, source_mean, metric)
}

/// Instance-level term over `[M, C, h, w]` crops. `None` (no instances in the
/// batch) yields zeros and the instance-absent flag.
pub fn instance_discrepancy(crops: Option<&Tensor>, source_mean: &Tensor) -> Result<(Tensor, bool)> {
    instance_discrepancy_with(crops, source_mean, Metric::L1)
}

pub fn instance_discrepancy_with(crops: Option<&Tensor>, source_mean: &Tensor, metric: Metric) -> Result<(Tensor, bool)> {
    match crops {
        Some(c) if c.shape().first().is_some_and(|&m| m > 0) => {
            Ok((per_channel("instance_discrepancy", c, source_mean, metric)?, false))
        }
        _ => Ok((Tensor::zeros([source_mean.shape()[0]]), true)),
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(dim_err("combine", format!("{:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sum_scaled(d_image: &Tensor, d_instance: &Tensor, absent: bool, si: f64, so: f64) -> Tensor {
    Tensor::from_vec(
        d_image
            .data()
            .iter()
            .zip(d_instance.data())
            .map(|(&a, &b)| if absent { 2.0 * a / si } else { a / si + b / so })
            .collect(),
    )
}

fn unit_mean_scale(v: &Tensor) -> f64 {
    (v.data().iter().sum::<f64>() / v.numel().max(1) as f64).max(NORM_EPS)
}

/// Each vector divided by `max(mean(v), 1e-12)`, then summed; with no
/// instances the result is twice the normalized image term.
pub fn combine(d_image: &Tensor, d_instance: &Tensor, instance_absent: bool) -> Result<Tensor> {
    check_pair(d_image, d_instance)?;
    Ok(sum_scaled(d_image, d_instance, instance_absent, unit_mean_scale(d_image), unit_mean_scale(d_instance)))
}

/// Both vectors divided by a shared `scale` (guarded), then summed.
pub fn combine_with_scale(d_image: &Tensor, d_instance: &Tensor, instance_absent: bool, scale: f64) -> Result<Tensor> {
    check_pair(d_image, d_instance)?;
    let s = scale.max(NORM_EPS);
    Ok(sum_scaled(d_image, d_instance, instance_absent, s, s))
}

/// Channel mean of a combined score.
pub fn layer_aggregate(d: &Tensor) -> Result<f64> {
    if d.numel() == 0 {
        return Err(Error::Empty("layer_aggregate"));
    }
    Ok(d.data().iter().sum::<f64>() / d.numel() as f64)
}

/// Settings for [`layer_discrepancy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DiscrepancyConfig {
    pub metric: Metric,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiscrepancy {
    pub image: Tensor,
    pub instance: Tensor,
    pub instance_absent: bool,
    pub combined: Tensor,
    pub layer: f64,
}

/// Full discrepancy of one BN-input tap against its source statistics.
/// `boxes` are in image pixel coordinates of an `image_size` input.
pub fn layer_discrepancy(
    tap: &Tensor,
    boxes: &[Vec<RoiBox>],
    image_size: usize,
    stats: &LayerStats,
    cfg: DiscrepancyConfig,
) -> Result<LayerDiscrepancy> {
    let (_, _, h, w) = tap.dims4("layer_discrepancy")?;
    let image = image_discrepancy_with(tap, &stats.image_mean, cfg.metric)?;
    let fb = boxes_to_feature(boxes, image_size, h, w);
    let crops = roi_crop(tap, &fb, INSTANCE_SIZE, INSTANCE_SIZE)?;
    let (instance, absent) = instance_discrepancy_with(crops.crops.as_ref(), &stats.instance_mean, cfg.metric)?;
    let combined = match cfg.normalization {
        Normalization::UnitMean => combine(&image, &instance, absent)?,
        Normalization::SourceScale => {
            let std = stats.dist_std.data();
            let scale = std.iter().sum::<f64>() / std.len().max(1) as f64;
            combine_with_scale(&image, &instance, absent, scale)?
        }
    };
    let layer = layer_aggregate(&combined)?;
    Ok(LayerDiscrepancy { image, instance, instance_absent: absent, combined, layer })
}

/// Discrepancy of every layer in order.
pub fn network_discrepancy(
    taps: &[Tensor],
    boxes: &[Vec<RoiBox>],
    image_size: usize,
    stats: &[LayerStats],
    cfg: DiscrepancyConfig,
) -> Result<Vec<LayerDiscrepancy>> {
    if taps.len() != stats.len() {
        return Err(Error::Config(format!("{} taps but statistics for {} layers", taps.len(), stats.len())));
    }
    taps.iter().zip(stats).map(|(t, s)| layer_discrepancy(t, boxes, image_size, s, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    fn broadcast(mean: &Tensor, n: usize, offset: f64) -> Tensor {
        let mut d = Vec::new();
        for _ in 0..n {
            d.extend(mean.data().iter().map(|v| v + offset));
        }
        let mut s = vec![n];
        s.extend_from_slice(mean.shape());
        Tensor::new(s, d).unwrap()
    }

    #[test]
    fn identical_target_gives_zero() {
        let m = t(&[3, 4, 4], |i| libm::sin(i as f64));
        let d = image_discrepancy(&broadcast(&m, 2, 0.0), &m).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_offset_gives_ones() {
        let m = t(&[3, 4, 4], |i| libm::sin(i as f64));
        let d = image_discrepancy(&broadcast(&m, 2, 1.0), &m).unwrap();
        assert!(d.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    fn loop_oracle(x: &Tensor, m: &Tensor) -> Vec<f64> {
        let (n, c, h, w) = x.dims4("oracle").unwrap();
        let mut out = vec![0.0; c];
        for (ci, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let xv = x.data()[((ni * c + ci) * h + hi) * w + wi];
                        let mv = m.data()[(ci * h + hi) * w + wi];
                        s += (xv - mv).abs();
                    }
                }
            }
            *o = s / (n * h * w) as f64;
        }
        out
    }

    #[test]
    fn image_term_matches_loop_oracle() {
        let x = t(&[3, 2, 5, 4], |i| libm::cos(i as f64 * 0.7));
        let m = t(&[2, 5, 4], |i| libm::sin(i as f64 * 0.3));
        let d = image_discrepancy(&x, &m).unwrap();
        for (a, b) in d.data().iter().zip(loop_oracle(&x, &m)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_term_matches_loop_oracle_and_handles_absence() {
        let x = t(&[2, 3, 4, 4], |i| libm::cos(i as f64 * 1.1));
        let m = t(&[3, 4, 4], |i| libm::sin(i as f64 * 0.2));
        let (d, absent) = instance_discrepancy(Some(&x), &m).unwrap();
        assert!(!absent);
        for (a, b) in d.data().iter().zip(loop_oracle(&x, &m)) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = broadcast(&m, 2, 0.0);
        assert!(instance_discrepancy(Some(&same), &m).unwrap().0.data().iter().all(|&v| v == 0.0));
        let (z, absent) = instance_discrepancy(None, &m).unwrap();
        assert!(absent);
        assert_eq!(z, Tensor::zeros([3]));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = Tensor::zeros([2, 3, 3]);
        assert!(image_discrepancy(&Tensor::zeros([0, 2, 3, 3]), &m).is_err());
    }

    #[test]
    fn combine_examples() {
        let v = |d: &[f64]| Tensor::from_vec(d.to_vec());
        assert_eq!(combine(&v(&[1.0, 1.0, 1.0]), &v(&[1.0, 1.0, 1.0]), false).unwrap(), v(&[2.0, 2.0, 2.0]));
        assert_eq!(combine(&v(&[2.0, 0.0]), &v(&[0.0, 2.0]), false).unwrap(), v(&[2.0, 2.0]));
        assert_eq!(combine(&v(&[0.0, 0.0]), &v(&[0.0, 0.0]), false).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(combine(&v(&[1.0, 3.0]), &v(&[0.0, 0.0]), true).unwrap(), v(&[1.0, 3.0]));
        assert!(combine(&v(&[1.0]), &v(&[1.0, 2.0]), false).is_err());
    }

    #[test]
    fn scaled_combine_keeps_magnitude() {
        let v = |d: &[f64]| Tensor::from_vec(d.to_vec());
        let c = combine_with_scale(&v(&[1.0, 2.0]), &v(&[0.5, 0.5]), false, 0.5).unwrap();
        assert_eq!(c, v(&[3.0, 5.0]));
        let c = combine_with_scale(&v(&[1.0, 2.0]), &v(&[9.0, 9.0]), true, 2.0).unwrap();
        assert_eq!(c, v(&[1.0, 2.0]));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(layer_aggregate(&Tensor::from_vec(vec![2.0; 3])).unwrap(), 2.0);
        assert_eq!(layer_aggregate(&Tensor::zeros([5])).unwrap(), 0.0);
        let r: Vec<f64> = (0..7).map(|i| libm::sin(i as f64) + 1.0).collect();
        let expect = r.iter().sum::<f64>() / 7.0;
        assert!((layer_aggregate(&Tensor::from_vec(r)).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn alternative_metrics_vanish_at_source() {
        let m = t(&[2, 3, 3], |i| 0.1 + i as f64);
        for metric in [Metric::L2, Metric::Cosine] {
            let d = image_discrepancy_with(&broadcast(&m, 2, 0.0), &m, metric).unwrap();
            assert!(d.data().iter().all(|&v| v.abs() < 1e-12), "{metric:?}");
        }
    }

    fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
        let s = x.shape();
        let (lead, c) = if s.len() == 4 { (s[0], s[1]) } else { (1, s[0]) };
        let inner: usize = s[s.len() - 2..].iter().product();
        let mut d = vec![0.0; x.numel()];
        for n in 0..lead {
            for (new, &old) in perm.iter().enumerate() {
                d[(n * c + new) * inner..][..inner].copy_from_slice(&x.data()[(n * c + old) * inner..][..inner]);
            }
        }
        Tensor::new(s.to_vec(), d).unwrap()
    }

    proptest! {
        #[test]
        fn nonnegative_and_zero_at_source(
            vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 3 * 3),
            mvals in proptest::collection::vec(-5.0f64..5.0, 3 * 3 * 3),
        ) {
            let x = Tensor::new([2, 3, 3, 3], vals).unwrap();
            let m = Tensor::new([3, 3, 3], mvals).unwrap();
            for metric in [Metric::L1, Metric::L2, Metric::Cosine] {
                let d = image_discrepancy_with(&x, &m, metric).unwrap();
                prop_assert!(d.data().iter().all(|&v| v >= 0.0));
            }
            let d = image_discrepancy(&broadcast(&m, 3, 0.0), &m).unwrap();
            prop_assert!(d.data().iter().all(|&v| v == 0.0));
            let di = image_discrepancy(&x, &m).unwrap();
            let c = combine(&di, &di, false).unwrap();
            prop_assert!(c.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn channel_permutation_is_equivariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 2 * 4 * 2 * 2),
            mvals in proptest::collection::vec(-5.0f64..5.0, 4 * 2 * 2),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let x = Tensor::new([2, 4, 2, 2], vals).unwrap();
            let m = Tensor::new([4, 2, 2], mvals).unwrap();
            let d = image_discrepancy(&x, &m).unwrap();
            let dp = image_discrepancy(&permute_channels(&x, &perm), &permute_channels(&m, &perm)).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(dp.data()[new], d.data()[old]);
            }
        }
    }
}
