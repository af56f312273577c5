//! Gaussian conditioning cases small enough to solve by hand.

use pdnjode::gauss::{condition, corr_bm_cond_exp, filtering_cond_exp, MaskedObservation};

/// `(case, computed, hand-derived)` for each case.
pub fn two_by_two_cases() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();

    // Independent blocks: the prior is returned.
    let cov = ndarray::array![[2.0, 0.0], [0.0, 3.0]];
    let (m, v) = condition(cov.view(), &[0], &[1], &[1.7]).unwrap();
    out.push(("independent mean", m[0], 0.0));
    out.push(("independent variance", v[[0, 0]], 3.0));

    // U observed at t1 in the correlated pair: alpha^2 u.
    let t1 = 0.37;
    let u = -1.25;
    let obs = [MaskedObservation {
        time: t1,
        values: vec![u, 0.0],
        mask: vec![true, false],
    }];
    let p = corr_bm_cond_exp(0.9f64.sqrt(), &obs, t1).unwrap();
    out.push(("correlated pair", p[1], 0.9 * u));

    // One noisy observation with alpha = 1: y / 2.
    let y = 0.8;
    let obs = [MaskedObservation {
        time: t1,
        values: vec![y, 0.0],
        mask: vec![true, false],
    }];
    let p = filtering_cond_exp(1.0, &obs, t1).unwrap();
    out.push(("noisy observation", p[1], y / 2.0));
    out
}
