//! Finite-difference gradient checking.

use super::{Tape, Tensor};

/// Compare the analytic gradient of a scalar-valued tensor function
/// against central finite differences at `point`.
///
/// Returns the maximum over all coordinates of
/// `|analytic - central| / max(1, |central|)`. A function with no
/// gradient path to `point` (everything routed through stop-gradient)
/// reports against an all-zero analytic gradient.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> f64
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    assert!(h > 0.0, "grad_check: step must be positive");
    let x = point.detach();
    x.set_requires_grad(true);
    let tape = Tape::new();
    let loss = f(&tape, &x);
    assert_eq!(loss.numel(), 1, "grad_check: function must return a scalar");
    tape.backward(&loss);
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        let eval = |v: f64| {
            let probe = point.detach();
            probe.set_value_at(i, v);
            let t = Tape::inference();
            f(&t, &probe).item()
        };
        let central = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
