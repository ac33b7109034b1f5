//! Finite-difference oracle shared by unit tests.

use rand::Rng;

use crate::autodiff::Tensor;

/// Compare `analytic[k][i]` against a central difference of `f` for
/// `probes` randomly chosen parameter entries.
pub fn fd_probe<R: Rng>(
    rng: &mut R,
    params: &[Tensor],
    analytic: &[Tensor],
    probes: usize,
    f: impl Fn(&[Tensor]) -> f64,
) {
    let h = 1e-5;
    for _ in 0..probes {
        let k = rng.random_range(0..params.len());
        let i = rng.random_range(0..params[k].numel());
        let shifted = |delta: f64| {
            let mut ps = params.to_vec();
            let mut d = ps[k].to_vec();
            d[i] += delta;
            ps[k] = Tensor::new(ps[k].shape().to_vec(), d).unwrap();
            f(&ps)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let a = analytic[k].data()[i];
        let err = (a - numeric).abs();
        let rel = err / a.abs().max(numeric.abs()).max(1e-300);
        assert!(
            err < 1e-7 || rel < 1e-4,
            "param {k} entry {i}: analytic {a} numeric {numeric}"
        );
    }
}
