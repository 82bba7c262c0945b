//! Finite-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference step. Large enough to clear 32-bit rounding noise,
/// small enough that curvature error stays below the acceptance tolerances.
pub const GRADCHECK_EPS: f64 = 1e-3;

/// Coordinates sampled per tensor.
pub const GRADCHECK_MAX_COORDS: usize = 64;

/// A ReLU input this close to zero sits on the kink, where the two-sided
/// difference quotient measures the average of both subgradients. Such
/// coordinates must be excluded from checks through ReLU.
pub const KINK_TOL: f64 = 1e-3;

/// Max relative gradient error over sampled coordinates of `theta`.
///
/// `loss_of` must re-evaluate the full forward pass for a perturbed copy of
/// the parameter, returning the scalar loss; `ad_grad` is the reverse-mode
/// gradient under test. Relative error of one coordinate is
/// |g_ad − g_fd| / max(1e-6, |g_ad| + |g_fd|).
pub fn gradcheck_tensor<T: Scalar>(
    loss_of: impl FnMut(&Tensor<T>) -> f64,
    theta: &Tensor<T>,
    ad_grad: &Tensor<T>,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> f64 {
    gradcheck_tensor_where(loss_of, theta, ad_grad, eps, max_coords, seed, |_, _| true)
}

/// [`gradcheck_tensor`] restricted to coordinates accepted by `keep`
/// (index, current value). Used to skip non-differentiable points.
pub fn gradcheck_tensor_where<T: Scalar>(
    mut loss_of: impl FnMut(&Tensor<T>) -> f64,
    theta: &Tensor<T>,
    ad_grad: &Tensor<T>,
    eps: f64,
    max_coords: usize,
    seed: u64,
    keep: impl Fn(usize, f64) -> bool,
) -> f64 {
    assert_eq!(
        theta.shape(),
        ad_grad.shape(),
        "gradient shape {:?} does not match parameter {:?}",
        ad_grad.shape(),
        theta.shape()
    );
    let coords = sample_coords(theta.len(), max_coords, seed);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in coords {
        let base = theta.data()[i].f64();
        if !keep(i, base) {
            continue;
        }
        checked += 1;
        // Perturb in T's own precision and divide by the realized step so
        // representation error does not masquerade as gradient error.
        let hp = T::of(base + eps);
        let hm = T::of(base - eps);
        let mut p = theta.clone();
        p.data_mut()[i] = hp;
        let lp = loss_of(&p);
        p.data_mut()[i] = hm;
        let lm = loss_of(&p);
        let fd = (lp - lm) / (hp.f64() - hm.f64());
        let ad = ad_grad.data()[i].f64();
        let rel = (ad - fd).abs() / (1e-6f64).max(ad.abs() + fd.abs());
        if rel > worst {
            worst = rel;
        }
    }
    assert!(checked > 0, "gradcheck sampled no admissible coordinates");
    worst
}

/// Up to `max_coords` distinct indices in [0, n), deterministic in `seed`.
fn sample_coords(n: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    assert!(n > 0, "cannot gradcheck an empty tensor");
    if n <= max_coords {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed);
    for k in 0..max_coords {
        let j = rng.gen_range(k..n);
        pool.swap(k, j);
    }
    pool.truncate(max_coords);
    pool
}
