//! Central finite-difference gradient checking.
//!
//! This is the independent oracle against which the tape's analytic
//! gradients are verified: it never touches the backward pass, only repeated
//! forward evaluations of a scalar-valued function.

use crate::tensor::Tensor;

/// Numerically differentiates `f` with respect to every element of every
/// tensor in `params` using central differences with perturbation `h`.
///
/// Returns one gradient tensor per parameter, in order.
pub fn central_difference<F>(params: &[Tensor], h: f64, mut f: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0; params[pi].numel()];
        for j in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += h;
            let fp = f(&plus);

            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= h;
            let fm = f(&minus);

            g[j] = (fp - fm) / (2.0 * h);
        }
        grads.push(Tensor::new(params[pi].rows(), params[pi].cols(), g));
    }
    grads
}

/// Largest elementwise relative error between two gradient slices.
///
/// The error for a component pair (a, b) is `|a - b| / max(floor, |a|, |b|)`;
/// the floor keeps near-zero gradients from blowing up the ratio on
/// finite-difference rounding noise.
pub fn max_rel_error_slices(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Largest relative error across a set of analytic/numeric gradient pairs.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| max_rel_error_slices(a.data(), n.data(), floor))
        .fold(0.0, f64::max)
}
