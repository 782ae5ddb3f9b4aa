//! Independent reference computations for the integration tests. Nothing
//! here calls into the library's numerics.
#![allow(dead_code)]

use statrs::distribution::{ContinuousCDF, Normal};

/// p-variation power by enumerating every sub-partition that keeps both
/// endpoints (exponential, for short paths only).
pub fn brute_force_pvar_power(values: &[f64], dim: usize, p: f64) -> f64 {
    let n = values.len() / dim;
    if n < 2 {
        return 0.0;
    }
    let inner = n - 2;
    let mut best = 0.0f64;
    for mask in 0u64..(1u64 << inner) {
        let mut prev = 0usize;
        let mut sum = 0.0;
        for j in 1..n {
            let keep = j == n - 1 || (mask >> (j - 1)) & 1 == 1;
            if keep {
                let d2: f64 = (0..dim).map(|c| (values[j * dim + c] - values[prev * dim + c]).powi(2)).sum();
                sum += d2.sqrt().powf(p);
                prev = j;
            }
        }
        best = best.max(sum);
    }
    best
}

/// Composite Gauss–Legendre (5 nodes) on `[a, b]` with `panels` panels.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / panels as f64;
    let mut s = 0.0;
    for k in 0..panels {
        let c = a + (k as f64 + 0.5) * h;
        for (x, w) in X.iter().zip(W) {
            s += w * f(c + 0.5 * h * x);
        }
    }
    0.5 * h * s
}

/// `P{sup_{t <= T} |W_t| >= n}` for standard Brownian motion from 0,
/// by the alternating reflection series.
pub fn two_sided_exit_probability(n: f64, horizon: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap();
    let s = horizon.sqrt();
    let mut stay = 0.0;
    for k in -50i32..=50 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let hi = (2 * k + 1) as f64 * n / s;
        let lo = (2 * k - 1) as f64 * n / s;
        stay += sign * (z.cdf(hi) - z.cdf(lo));
    }
    1.0 - stay
}

/// `E[h(x + σ W_T)]` by quadrature against the Gaussian density.
pub fn heat_expectation(h: impl Fn(f64) -> f64, x: f64, sigma: f64, horizon: f64) -> f64 {
    let s = sigma * horizon.sqrt();
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    gauss_legendre(|z| h(x + s * z) * phi(z), -12.0, 12.0, 2000)
}

/// Transition density of Brownian motion reflected in `[a, b]`, by the
/// method of images.
pub fn reflected_density(x: f64, y: f64, t: f64, a: f64, b: f64) -> f64 {
    let l = b - a;
    let g = |u: f64| (-(u * u) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
    let mut s = 0.0;
    for k in -40i32..=40 {
        let shift = 2.0 * k as f64 * l;
        s += g(y - x - shift) + g(y - (2.0 * a - x) - shift);
    }
    s
}

/// `E[h(X_T)]` for reflected Brownian motion from `x`.
pub fn reflected_expectation(h: impl Fn(f64) -> f64, x: f64, t: f64, a: f64, b: f64) -> f64 {
    gauss_legendre(|y| h(y) * reflected_density(x, y, t, a, b), a, b, 4000)
}

/// Covariance of the fractional Brownian sheet: a product of fractional
/// Brownian motion covariances in each coordinate.
pub fn sheet_covariance(h0: f64, h: f64, t: f64, x: &[f64], s: f64, y: &[f64]) -> f64 {
    let fbm = |a: f64, b: f64, k: f64| 0.5 * (a.abs().powf(2.0 * k) + b.abs().powf(2.0 * k) - (a - b).abs().powf(2.0 * k));
    let mut c = fbm(t, s, h0);
    for (xi, yi) in x.iter().zip(y) {
        c *= fbm(*xi, *yi, h);
    }
    c
}

/// Ordinary least-squares slope and R².
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    (sxy / sxx, sxy * sxy / (sxx * syy))
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Matrix exponential of a small dense matrix by scaling and squaring of
/// the Taylor series.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm: f64 = a.iter().map(|v| v.abs()).sum();
    let mut k = 0;
    while norm / f64::from(1u32 << k) > 0.1 {
        k += 1;
    }
    let scale = f64::from(1u32 << k);
    let b: Vec<f64> = a.iter().map(|v| v / scale).collect();
    let mul = |p: &[f64], q: &[f64]| {
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] = (0..n).map(|l| p[i * n + l] * q[l * n + j]).sum();
            }
        }
        r
    };
    let mut out = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for j in 1..30 {
        term = mul(&term, &b).iter().map(|v| v / j as f64).collect();
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
    }
    for _ in 0..k {
        out = mul(&out, &out);
    }
    out
}
