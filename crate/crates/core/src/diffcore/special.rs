//! Scalar special functions and small numeric kernels shared by the graph ops.

use statrs::function::{erf as serf, gamma};

pub fn erf(x: f64) -> f64 {
    serf::erf(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    gamma::digamma(x)
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * serf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation (relative error about 1e-9) followed by
/// one Halley step against an accurate `erfc`, which brings the result to
/// near machine precision on `(1e-12, 1 - 1e-12)`.
pub fn inv_phi(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement; the residual is taken on the smaller tail to keep
    // relative accuracy for p close to 1.
    let e = if p > 0.5 {
        (1.0 - p) - 0.5 * serf::erfc(x / std::f64::consts::SQRT_2)
    } else {
        0.5 * serf::erfc(-x / std::f64::consts::SQRT_2) - p
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, inf)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `sum_i sum_j |x_i - y_j|` in `O((n + m) log m)`.
pub fn sum_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    let ys = sorted(y);
    let mut prefix = Vec::with_capacity(ys.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &ys {
        acc += v;
        prefix.push(acc);
    }
    let total = acc;
    let m = ys.len() as f64;
    x.iter()
        .map(|&xi| {
            let k = ys.partition_point(|&v| v <= xi);
            let below = prefix[k];
            let kf = k as f64;
            (xi * kf - below) + (total - below - xi * (m - kf))
        })
        .sum()
}

/// For each `x_i`, `#{y_j < x_i} - #{y_j > x_i}`: the subgradient of
/// `sum_j |x_i - y_j|` with ties contributing zero.
pub fn sign_balance(x: &[f64], y: &[f64]) -> Vec<f64> {
    let ys = sorted(y);
    let m = ys.len();
    x.iter()
        .map(|&xi| {
            let lt = ys.partition_point(|&v| v < xi);
            let le = ys.partition_point(|&v| v <= xi);
            lt as f64 - (m - le) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inv_phi_round_trips_through_phi() {
        for &p in &[
            1e-12,
            1e-9,
            1e-4,
            0.01,
            0.0243,
            0.3,
            0.5,
            0.75,
            0.9,
            0.99,
            1.0 - 1e-9,
        ] {
            let x = inv_phi(p);
            let back = phi(x);
            assert!((back - p).abs() <= 1e-9 * p.max(1e-3), "p={p} x={x} back={back}");
        }
        assert!((inv_phi(0.75) - 0.674_489_750_196_081_7).abs() < 1e-12);
        assert_eq!(inv_phi(0.5), 0.0);
    }

    #[test]
    fn inv_phi_is_antisymmetric() {
        for &p in &[1e-6, 0.01, 0.2, 0.4] {
            assert!((inv_phi(p) + inv_phi(1.0 - p)).abs() < 1e-9);
        }
    }

    #[test]
    fn softplus_and_inverse() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        for &y in &[1e-6, 0.02, 1.0, 9.0, 45.0, 250.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-10 * y.max(1.0));
        }
    }

    #[test]
    fn abs_diff_sum_matches_loop() {
        let x: [f64; 5] = [0.3, -1.0, 2.5, 2.5, 0.0];
        let y: [f64; 3] = [2.5, 0.1, -3.0];
        let naive: f64 = x.iter().flat_map(|a| y.iter().map(move |b| (a - b).abs())).sum();
        assert!((sum_abs_diff(&x, &y) - naive).abs() < 1e-12);
        let sb = sign_balance(&x, &y);
        for (i, &xi) in x.iter().enumerate() {
            let want: f64 = y
                .iter()
                .map(|&b| (xi - b).signum() * ((xi - b) != 0.0) as i32 as f64)
                .sum();
            assert_eq!(sb[i], want);
        }
    }
}
