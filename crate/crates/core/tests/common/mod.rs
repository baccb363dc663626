//! Shared finite-difference oracle for gradient tests. The oracle only
//! evaluates forward passes, so it stays independent of the backward
//! implementation it checks.

/// Central finite differences of a scalar function at `x`.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn assert_grad_close(analytic: &[f64], fd: &[f64], rel_tol: f64, what: &str) {
    assert_eq!(analytic.len(), fd.len(), "{what}: gradient length");
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        let scale = a.abs().max(f.abs()).max(1e-4);
        let rel = (a - f).abs() / scale;
        assert!(
            rel <= rel_tol,
            "{what}: coordinate {i}: analytic {a} vs fd {f} (rel err {rel:.3e})"
        );
    }
}

/// Default central-difference step per the gradient contracts.
pub const FD_STEP: f64 = 1e-5;
