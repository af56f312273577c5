use ndarray::Array2;
use pdnjode::InterpolatedPath;

/// Three-point Gauss-Legendre rule on `[-1, 1]`, exact up to degree 5.
const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// The iterated integral of `word` over `[times[0], t]` for the piecewise
/// linear path through `(times, values)`, by nested quadrature. On each
/// segment the integrand at depth `k` is a polynomial of degree `k - 1`,
/// so the result is exact for words of length at most 6.
pub fn iterated_integral(times: &[f64], values: &Array2<f64>, word: &[usize], t: f64) -> f64 {
    let Some((&last, rest)) = word.split_last() else {
        return 1.0;
    };
    let mut total = 0.0;
    for s in 0..times.len() - 1 {
        let (a, b) = (times[s], times[s + 1].min(t));
        if b <= a {
            break;
        }
        let slope = (values[[s + 1, last]] - values[[s, last]]) / (times[s + 1] - times[s]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let q: f64 = GL3
            .iter()
            .map(|&(x, w)| w * iterated_integral(times, values, rest, mid + half * x))
            .sum();
        total += slope * half * q;
    }
    total
}

/// All words of length `k` over `d` letters in lexicographic order.
pub fn words(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|w| {
                (0..d).map(move |i| {
                    let mut v = w.clone();
                    v.push(i);
                    v
                })
            })
            .collect();
    }
    out
}

/// Flat signature coefficients from quadrature, levels `0..=m`.
pub fn quadrature_signature(p: &InterpolatedPath, m: usize) -> Vec<f64> {
    let t = *p.knot_times.last().unwrap();
    let mut out = Vec::new();
    for k in 0..=m {
        for w in words(p.dim(), k) {
            out.push(iterated_integral(&p.knot_times, &p.knot_values, &w, t));
        }
    }
    out
}
