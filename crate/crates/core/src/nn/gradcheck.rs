use super::{NetworkState, Tensor};

/// Central-difference estimate of `d loss / d params` for every scalar
/// parameter of `state`. `loss` is evaluated 2 * param_count times.
pub fn finite_diff_gradient<F>(state: &NetworkState, mut loss: F, h: f64) -> Vec<Tensor>
where
    F: FnMut(&NetworkState) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = state.clone();
    let mut grads: Vec<Tensor> = state.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    for (t, grad) in grads.iter_mut().enumerate() {
        for i in 0..state.params[t].len() {
            let orig = state.params[t].data()[i];
            probe.params[t].data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.params[t].data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.params[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Central-difference derivative of a scalar function.
pub fn finite_diff_scalar<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero components
/// from turning truncation noise into large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
