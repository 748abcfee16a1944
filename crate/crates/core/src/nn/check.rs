//! Gradient verification via central finite differences.
//!
//! These helpers only call forward passes, so they stay independent of the
//! analytic backward implementations they are used to check.

use super::ParamSet;

/// Perturb one scalar parameter (addressed by visit name and flat index).
pub fn nudge_param(params: &mut dyn ParamSet, name: &str, index: usize, delta: f64) {
    let mut found = false;
    params.visit_mut("", &mut |n, data| {
        if n == name {
            data[index] += delta;
            found = true;
        }
    });
    assert!(found, "no parameter named {name}");
}

/// Central finite-difference gradients of `loss` with respect to every
/// parameter, returned as (name, flat gradient) pairs in visit order.
pub fn fd_param_grads<P, F>(proto: &P, eps: f64, loss: F) -> Vec<(String, Vec<f64>)>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let mut layout: Vec<(String, usize)> = Vec::new();
    proto.visit("", &mut |name, _, data| {
        layout.push((name.to_string(), data.len()));
    });

    let mut out = Vec::with_capacity(layout.len());
    for (name, len) in layout {
        let mut grad = vec![0.0; len];
        for (i, slot) in grad.iter_mut().enumerate() {
            let mut plus = proto.clone();
            nudge_param(&mut plus, &name, i, eps);
            let mut minus = proto.clone();
            nudge_param(&mut minus, &name, i, -eps);
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        }
        out.push((name, grad));
    }
    out
}

/// Largest relative disagreement between analytic and FD gradients.
///
/// Relative error uses max(|a|, |b|, floor) as the denominator so tiny
/// gradients compare absolutely.
pub fn max_relative_error(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0f64, f64::max)
}
