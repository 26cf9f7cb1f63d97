//! Central finite-difference gradient checking.
//!
//! This is the independent oracle the autodiff tests are built on: a
//! candidate gradient is accepted only if it matches a two-sided difference
//! quotient of the actual loss function, computed without any tape
//! machinery. Also used to audit the full attack unroll end to end.

/// Central finite differences of a scalar function at `x` with step `h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Worst relative error between a numeric and an analytic gradient.
///
/// Per component: |n − a| / max(|n|, |a|, floor). The floor keeps
/// finite-difference noise on true-zero components from registering as
/// spurious relative error; callers pass a floor well below the gradient
/// magnitudes they care about (1e-4 suits unit-scale losses).
pub fn max_rel_err(numeric: &[f64], analytic: &[f64], floor: f64) -> f64 {
    assert_eq!(numeric.len(), analytic.len(), "gradient length mismatch");
    numeric
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| (n - a).abs() / n.abs().max(a.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Convenience: check an analytic gradient against central differences with
/// the default step h = 1e-5, returning the worst relative error.
pub fn check(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let numeric = central_diff(f, x, 1e-5);
    max_rel_err(&numeric, analytic, 1e-4)
}
