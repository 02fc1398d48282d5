//! Residual adapters whose strength follows the inverse of the mask scores.
//!
//! `F_add = (conv1x1(F) + conv3x3(F)) / 2 * alpha`, then scaled per channel
//! by `k * minmax(1 - sigmoid((|s| - tau) / lambda_A))`: channels that lean
//! towards suppression receive the most compensation.

use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALPHA_INIT: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `[C, C, 1, 1]`.
    pub w1x1: Tensor,
    /// `[C, C, 3, 3]`.
    pub w3x3: Tensor,
    /// `[C]`.
    pub alpha: Tensor,
}

impl AdapterParams {
    pub fn channels(&self) -> usize {
        self.alpha.numel()
    }
}

/// Uniform `±1/sqrt(fan_in)` convolutions and `alpha = 0.01`.
pub fn init_adapter(c: usize, seed: u64) -> AdapterParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: [usize; 4]| {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let b = 1.0 / libm::sqrt(fan_in);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-b..b)).collect()).expect("shape")
    };
    let w1x1 = draw([c, c, 1, 1]);
    let w3x3 = draw([c, c, 3, 3]);
    AdapterParams { w1x1, w3x3, alpha: Tensor::full([c], ALPHA_INIT) }
}

/// `(conv1x1(F) + conv3x3(F)) / 2`, scaled per channel by `alpha`.
pub fn adapter_forward(g: &mut Graph, f: Var, w1x1: Var, w3x3: Var, alpha: Var) -> Result<Var> {
    let a = g.conv2d(f, w1x1, 1, 0)?;
    let b = g.conv2d(f, w3x3, 1, 1)?;
    let s = g.add(a, b)?;
    let h = g.scale(s, 0.5);
    g.channel_mul(h, alpha)
}

/// `k * minmax(1 - sigmoid((|s| - tau) / lambda_a))` over the layer's channels;
/// all-equal input maps to `k / 2`.
pub fn inverse_soft_mask(g: &mut Graph, s: Var, tau: f64, lambda_a: f64, k: f64) -> Result<Var> {
    if !(lambda_a > 0.0) || !(k > 0.0) {
        return Err(Error::InvalidArgument(format!("need lambda_A > 0 and k > 0, got {lambda_a} and {k}")));
    }
    let a = g.abs(s);
    let z = g.add_scalar(a, -tau);
    let z = g.scale(z, 1.0 / lambda_a);
    let soft = g.sigmoid(z);
    let neg = g.scale(soft, -1.0);
    let raw = g.add_scalar(neg, 1.0);
    let norm = g.minmax_normalize(raw)?;
    Ok(g.scale(norm, k))
}

/// Value-only [`inverse_soft_mask`].
pub fn inverse_soft_mask_values(s: &Tensor, tau: f64, lambda_a: f64, k: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let m = inverse_soft_mask(&mut g, sv, tau, lambda_a, k)?;
    Ok(g.value(m).clone())
}

/// Per-channel modulation of the adapter output.
pub fn apply_additive(g: &mut Graph, f_add: Var, m_inv: Var) -> Result<Var> {
    g.channel_mul(f_add, m_inv)
}
