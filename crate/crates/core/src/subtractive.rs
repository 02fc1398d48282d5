//! Channel suppression on BN outputs.
//!
//! Every masked BN layer owns a learnable score per channel. A single
//! threshold is taken from the pooled score magnitudes of all masked layers;
//! channels below it are zeroed. The forward uses the hard 0/1 mask while the
//! backward follows a sigmoid relaxation (straight-through estimator).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    /// Network BN-layer index of each masked layer.
    pub layers: Vec<usize>,
    /// Scores per masked layer, `[C]` each.
    pub scores: Vec<Tensor>,
    /// Threshold from the most recent [`MaskState::update_threshold`].
    pub tau: f64,
    /// Target suppression ratio in `[0, 1)`.
    pub rho: f64,
    /// Sigmoid temperature of the soft mask.
    pub lambda_s: f64,
    /// Reactivation probability.
    pub r: f64,
}

/// `|gamma|` per layer.
pub fn init_scores(gammas: &[Tensor]) -> Vec<Tensor> {
    gammas.iter().map(|g| g.map(libm::fabs)).collect()
}

/// Threshold that suppresses `floor(rho * total)` entries under the `|s| >= tau`
/// keep rule: the ascending order statistic at that index. Ties at `tau` stay
/// active.
pub fn compute_threshold(abs_scores: &[f64], rho: f64) -> Result<f64> {
    if abs_scores.is_empty() {
        return Err(Error::Empty("compute_threshold"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("suppression ratio {rho} outside [0, 1)")));
    }
    let mut sorted = abs_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = libm::floor(rho * sorted.len() as f64) as usize;
    Ok(sorted[k.min(sorted.len() - 1)])
}

/// `1` where `|s| >= tau`, else `0`.
pub fn hard_mask(s: &Tensor, tau: f64) -> Tensor {
    s.map(|v| if libm::fabs(v) >= tau { 1.0 } else { 0.0 })
}

/// `sigmoid((|s| - tau) / lambda)`.
pub fn soft_mask(s: &Tensor, tau: f64, lambda: f64) -> Tensor {
    s.map(|v| crate::autodiff::sigmoid((libm::fabs(v) - tau) / lambda))
}

/// `m_hard + (m_soft - stop_gradient(m_soft))`: the hard mask forward, the
/// soft mask's derivative backward.
pub fn ste_mask(g: &mut Graph, s: Var, tau: f64, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("mask temperature {lambda} must be positive")));
    }
    let hard = g.constant(hard_mask(g.value(s), tau));
    let a = g.abs(s);
    let z = g.add_scalar(a, -tau);
    let z = g.scale(z, 1.0 / lambda);
    let soft = g.sigmoid(z);
    let frozen = g.stop_gradient(soft);
    let delta = g.sub(soft, frozen)?;
    g.add(hard, delta)
}

/// Scales channel `c` of `[N, C, H, W]` BN output by `m[c]`.
pub fn apply_subtractive(g: &mut Graph, f_bn: Var, m: Var) -> Result<Var> {
    g.channel_mul(f_bn, m)
}

/// `mean_l (1/C_l) sum_c |D_c s_c|` with `D` held constant.
pub fn mask_loss(g: &mut Graph, d: &[Tensor], s: &[Var]) -> Result<Var> {
    if d.len() != s.len() {
        return Err(dim_err("mask_loss", format!("{} discrepancy vectors for {} score vectors", d.len(), s.len())));
    }
    if s.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for (dl, &sl) in d.iter().zip(s) {
        let w = g.mul_const(sl, dl)?;
        let a = g.abs(w);
        let m = g.mean(a)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / s.len() as f64))
}

impl MaskState {
    /// Scores `|gamma|` for the given layers; `tau` starts at 0.
    pub fn new(layers: Vec<usize>, gammas: &[Tensor], rho: f64, lambda_s: f64, r: f64) -> Result<Self> {
        if layers.len() != gammas.len() {
            return Err(Error::Config(format!("{} masked layers but {} gamma vectors", layers.len(), gammas.len())));
        }
        Ok(Self { layers, scores: init_scores(gammas), tau: 0.0, rho, lambda_s, r })
    }

    pub fn pooled_abs(&self) -> Vec<f64> {
        self.scores.iter().flat_map(|s| s.data().iter().map(|v| libm::fabs(*v))).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.scores.iter().map(Tensor::numel).sum()
    }

    /// Recomputes `tau` from the current scores.
    pub fn update_threshold(&mut self) -> Result<f64> {
        self.tau = compute_threshold(&self.pooled_abs(), self.rho)?;
        Ok(self.tau)
    }

    pub fn hard_masks(&self) -> Vec<Tensor> {
        self.scores.iter().map(|s| hard_mask(s, self.tau)).collect()
    }

    pub fn suppressed_count(&self) -> usize {
        self.pooled_abs().iter().filter(|&&v| v < self.tau).count()
    }

    /// Every channel currently below `tau` is reset to `|gamma_c|` with
    /// probability `r`. `gammas` is indexed like `scores`. Returns the
    /// number of reset channels.
    pub fn reactivate<R: Rng + ?Sized>(&mut self, gammas: &[&Tensor], rng: &mut R) -> Result<usize> {
        if gammas.len() != self.scores.len() {
            return Err(dim_err("reactivate", format!("{} gamma vectors for {} layers", gammas.len(), self.scores.len())));
        }
        let p = self.r.clamp(0.0, 1.0);
        let mut count = 0;
        for (s, gm) in self.scores.iter_mut().zip(gammas) {
            if s.shape() != gm.shape() {
                return Err(dim_err("reactivate", format!("scores {:?} against gamma {:?}", s.shape(), gm.shape())));
            }
            for (sc, &gc) in s.data_mut().iter_mut().zip(gm.data()) {
                if libm::fabs(*sc) < self.tau && rng.random_bool(p) {
                    *sc = libm::fabs(gc);
                    count += 1;
                }
            }
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::autodiff::sigmoid;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(d: &[f64]) -> Tensor {
        Tensor::from_vec(d.to_vec())
    }

    #[test]
    fn init_is_absolute_gamma() {
        assert_eq!(init_scores(&[v(&[-2.0, 0.5])]), vec![v(&[2.0, 0.5])]);
        assert_eq!(init_scores(&[Tensor::zeros([3])]), vec![Tensor::zeros([3])]);
        let g = [v(&[-1.5, 0.25, 3.0])];
        let mut st = MaskState::new(vec![0], &g, 0.05, 0.05, 0.05).unwrap();
        st.scores[0].data_mut()[1] = -7.0;
        st.scores = init_scores(&g);
        assert_eq!(st.scores[0], v(&[1.5, 0.25, 3.0]));
    }

    #[test]
    fn threshold_examples() {
        let s = [0.1, 0.3, 0.5, 0.9];
        let tau = compute_threshold(&s, 0.25).unwrap();
        assert_eq!(tau, 0.3);
        assert_eq!(s.iter().filter(|&&x| x < tau).count(), 1);
        assert_eq!(compute_threshold(&s, 0.0).unwrap(), 0.1);
        let eq = [0.4; 8];
        for rho in [0.0, 0.1, 0.5, 0.9] {
            let tau = compute_threshold(&eq, rho).unwrap();
            assert_eq!(eq.iter().filter(|&&x| x < tau).count(), 0);
        }
        assert!(compute_threshold(&[], 0.1).is_err());
        assert!(compute_threshold(&s, 1.0).is_err());
    }

    #[test]
    fn ste_forward_is_hard_and_backward_is_soft() {
        let lambda = 0.05;
        let tau = 0.5;
        let s = v(&[0.5, -0.5, 0.35, 0.65, 3.0]);
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let m = ste_mask(&mut g, sv, tau, lambda).unwrap();
        assert_eq!(g.value(m), &hard_mask(&s, tau));
        assert_eq!(g.value(m).data()[0], 1.0);
        let w = g.constant(Tensor::ones([5]));
        let y = g.mul(m, w).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let grad = g.grad(sv).unwrap();
        for (i, &x) in s.data().iter().enumerate() {
            let z = (x.abs() - tau) / lambda;
            let expect = x.signum() * sigmoid(z) * (1.0 - sigmoid(z)) / lambda;
            assert!((grad[i] - expect).abs() < 1e-10, "{i}: {} vs {expect}", grad[i]);
        }
        assert!((grad[0] - 5.0).abs() < 1e-12);
        assert!((grad[1] + 5.0).abs() < 1e-12);
        assert!(grad[4].abs() < 1e-15);
    }

    #[test]
    fn ste_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let s = g.param(v(&[1.0]));
        assert!(ste_mask(&mut g, s, 0.5, 0.0).is_err());
    }

    #[test]
    fn subtractive_examples() {
        let x = Tensor::new([1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ones = g.constant(Tensor::ones([2]));
        let zeros = g.constant(Tensor::zeros([2]));
        let half = g.constant(v(&[1.0, 0.0]));
        let a = apply_subtractive(&mut g, xv, ones).unwrap();
        assert_eq!(g.value(a), &x);
        let b = apply_subtractive(&mut g, xv, zeros).unwrap();
        assert!(g.value(b).data().iter().all(|&v| v == 0.0));
        let c = apply_subtractive(&mut g, xv, half).unwrap();
        assert_eq!(&g.value(c).data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&g.value(c).data()[4..], &[0.0; 4]);
        let bad = g.constant(Tensor::ones([3]));
        assert!(apply_subtractive(&mut g, xv, bad).is_err());
    }

    #[test]
    fn mask_loss_examples_and_gradient() {
        let mut g = Graph::new();
        let s = g.param(v(&[3.0, -4.0]));
        let d = v(&[1.0, 2.0]);
        let l = mask_loss(&mut g, core::slice::from_ref(&d), &[s]).unwrap();
        assert!((g.value(l).item() - 5.5).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[0.5, -1.0]);

        let mut g = Graph::new();
        let s = g.param(v(&[3.0, -4.0]));
        let l0 = mask_loss(&mut g, &[Tensor::zeros([2])], &[s]).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let l2 = mask_loss(&mut g, &[v(&[2.0, 4.0])], &[s]).unwrap();
        assert!((g.value(l2).item() - 11.0).abs() < 1e-15);
        let none = mask_loss(&mut g, &[], &[]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }

    #[test]
    fn reactivation_extremes() {
        let gam = v(&[0.7, -0.2, 0.9, 0.05]);
        let mut st = MaskState::new(vec![3], core::slice::from_ref(&gam), 0.5, 0.05, 0.0).unwrap();
        st.scores[0] = v(&[0.01, 0.02, 1.0, 0.8]);
        st.update_threshold().unwrap();
        assert_eq!(st.suppressed_count(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = st.clone();
        assert_eq!(st.reactivate(&[&gam], &mut rng).unwrap(), 0);
        assert_eq!(st, before);
        st.r = 1.0;
        assert_eq!(st.reactivate(&[&gam], &mut rng).unwrap(), 2);
        assert_eq!(st.scores[0], v(&[0.7, 0.2, 1.0, 0.8]));
    }

    #[test]
    fn reactivation_count_is_binomial() {
        let n = 10_000;
        let gam = Tensor::ones([n]);
        let mut st = MaskState::new(vec![0], core::slice::from_ref(&gam), 0.0, 0.05, 0.05).unwrap();
        st.scores[0] = Tensor::zeros([n]);
        st.tau = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = st.reactivate(&[&gam], &mut rng).unwrap() as f64;
        let sd = libm::sqrt(n as f64 * 0.05 * 0.95);
        assert!((c - 500.0).abs() <= 3.0 * sd, "{c}");
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop_oneof![
            proptest::collection::vec(-3.0f64..3.0, 1..300),
            proptest::collection::vec((0u8..6).prop_map(|k| k as f64 * 0.25), 1..300),
        ]
    }

    proptest! {
        #[test]
        fn suppressed_never_exceeds_target_and_matches_oracle(s in scores_strategy(), rho in 0.0f64..0.5) {
            let abs: Vec<f64> = s.iter().map(|v| v.abs()).collect();
            let tau = compute_threshold(&abs, rho).unwrap();
            let count = abs.iter().filter(|&&v| v < tau).count();
            let k = (rho * abs.len() as f64).floor() as usize;
            prop_assert!(count <= k);
            let mut sorted = abs.clone();
            sorted.sort_by(f64::total_cmp);
            let oracle = sorted.iter().filter(|&&v| v < sorted[k]).count();
            prop_assert_eq!(count, oracle);
            let distinct = k == 0 || sorted[k - 1] < sorted[k];
            if distinct {
                prop_assert_eq!(count, k);
            }
        }

        #[test]
        fn hard_mask_is_binary(s in proptest::collection::vec(-3.0f64..3.0, 1..50), tau in 0.0f64..3.0) {
            let m = hard_mask(&Tensor::from_vec(s), tau);
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn reactivation_never_touches_active(s in proptest::collection::vec(-2.0f64..2.0, 1..40), seed in 0u64..1000) {
            let n = s.len();
            let gam = Tensor::from_vec((0..n).map(|i| i as f64 * 0.1 - 1.0).collect());
            let mut st = MaskState::new(vec![0], core::slice::from_ref(&gam), 0.3, 0.05, 0.5).unwrap();
            st.scores[0] = Tensor::from_vec(s.clone());
            st.update_threshold().unwrap();
            let gam_before = gam.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            st.reactivate(&[&gam], &mut rng).unwrap();
            prop_assert_eq!(&gam, &gam_before);
            for (i, &old) in s.iter().enumerate() {
                if old.abs() >= st.tau {
                    prop_assert_eq!(st.scores[0].data()[i], old);
                }
            }
        }
    }
}
