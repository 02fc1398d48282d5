//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the finite-difference magnitude in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares autodiff gradients of the scalar `f(params)` against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and one leaf per parameter tensor and must
/// return a scalar node. Per parameter tensor the error is
/// `max_i |ad_i - fd_i| / max(max_i |fd_i|, 1e-8)`; the largest such value is
/// returned.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Rank(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, ad) in analytic.iter().enumerate() {
        let mut max_diff: f64 = 0.0;
        let mut max_fd: f64 = 0.0;
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            max_diff = max_diff.max(libm::fabs(fd - ad.data()[i]));
            max_fd = max_fd.max(libm::fabs(fd));
        }
        worst = worst.max(max_diff / max_fd.max(REL_FLOOR));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(|g, p| g.mul(p[0], p[0]).map(|y| g.sum(y)), &[Tensor::from_vec(alloc::vec![3.0])], 1e-5)
            .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn batch_norm_composed_with_sum() {
        use crate::autodiff::BnMode;
        let x = Tensor::new([2, 2, 2, 2], (0..16).map(|i| libm::sin(i as f64 * 1.3)).collect()).unwrap();
        let gamma = Tensor::from_vec(alloc::vec![1.5, -0.7]);
        let beta = Tensor::from_vec(alloc::vec![0.2, 0.1]);
        let err = grad_check(
            |g, p| {
                let o = g.batch_norm(p[0], p[1], p[2], 1e-5, BnMode::Train)?;
                // plain sum has a zero x-gradient; weight it so the check is informative
                let w = g.constant(Tensor::new([2, 2, 2, 2], (0..16).map(|i| i as f64 * 0.1).collect())?);
                let y = g.mul(o.y, w)?;
                Ok(g.sum(y))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
