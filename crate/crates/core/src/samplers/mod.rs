//! Reparameterized random variates.
//!
//! Every sampler is a deterministic graph function of its parameters and of
//! base noise supplied by the caller, so gradients flow from the draws back
//! to the parameters.

mod noise;

pub use noise::{purpose, NoiseBank, U_MAX, U_MIN};

use crate::diffcore::{special, Graph, Var};
use crate::error::{Error, Result};

fn require_positive(g: &Graph, v: Var, sampler: &'static str, what: &str) -> Result<()> {
    if let Some(bad) = g.value(v).iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::Domain {
            sampler,
            msg: format!("{what} must be positive, got {bad}"),
        });
    }
    Ok(())
}

fn noise_node(g: &mut Graph, shape: &[usize], noise: Vec<f64>) -> Result<Var> {
    Ok(g.constant(shape, noise)?)
}

/// `mu + sigma * eps`, with `mu` and `sigma` scalars or matching `shape`.
pub fn sample_normal(g: &mut Graph, mu: Var, sigma: Var, eps: Vec<f64>, shape: &[usize]) -> Result<Var> {
    require_positive(g, sigma, "sample_normal", "sigma")?;
    let e = noise_node(g, shape, eps)?;
    let se = g.mul(e, sigma)?;
    Ok(g.add(se, mu)?)
}

/// `-ln(1 - u) / nu`.
pub fn sample_exponential(g: &mut Graph, nu: Var, u: &[f64], shape: &[usize]) -> Result<Var> {
    require_positive(g, nu, "sample_exponential", "rate")?;
    let e: Vec<f64> = u.iter().map(|&u| -(-u).ln_1p()).collect();
    let e = noise_node(g, shape, e)?;
    Ok(g.div(e, nu)?)
}

/// Mean of `n` exponential draws with rate `nu`, one per row of `u`
/// (`u` has `rows * n` entries). The result is a `Gamma(n, n nu)` variate.
pub fn sample_exponential_mean(g: &mut Graph, nu: Var, n: usize, u: &[f64]) -> Result<Var> {
    if n == 0 || !u.len().is_multiple_of(n) {
        return Err(Error::Domain {
            sampler: "sample_exponential_mean",
            msg: format!("{} uniforms cannot be split into groups of {n}", u.len()),
        });
    }
    let base: Vec<f64> = u
        .chunks(n)
        .map(|c| c.iter().map(|&u| -(-u).ln_1p()).sum::<f64>() / n as f64)
        .collect();
    scale_by_rate(g, nu, base)
}

/// Divides precomputed unit-rate base draws by `nu`. Pairs with
/// [`NoiseBank::exponential_mean`] to avoid materializing every summand.
pub fn scale_by_rate(g: &mut Graph, nu: Var, base: Vec<f64>) -> Result<Var> {
    require_positive(g, nu, "sample_exponential_mean", "rate")?;
    let n = base.len();
    let b = noise_node(g, &[n], base)?;
    Ok(g.div(b, nu)?)
}

/// `omega * inv_phi(0.5 + 0.5 u)`.
pub fn sample_halfnormal(g: &mut Graph, omega: Var, u: &[f64], shape: &[usize]) -> Result<Var> {
    require_positive(g, omega, "sample_halfnormal", "omega")?;
    let z: Vec<f64> = u.iter().map(|&u| special::inv_phi(0.5 + 0.5 * u)).collect();
    let z = noise_node(g, shape, z)?;
    Ok(g.mul(z, omega)?)
}

/// `beta * (-ln(1 - u))^(1 / alpha)`; `alpha` and `beta` must already have
/// the shape of the output (or be single values).
pub fn sample_weibull(g: &mut Graph, alpha: Var, beta: Var, u: &[f64], shape: &[usize]) -> Result<Var> {
    require_positive(g, alpha, "sample_weibull", "shape")?;
    require_positive(g, beta, "sample_weibull", "scale")?;
    let le: Vec<f64> = u.iter().map(|&u| (-(-u).ln_1p()).ln()).collect();
    let le = noise_node(g, shape, le)?;
    let t = g.div(le, alpha)?;
    let t = g.exp(t)?;
    Ok(g.mul(t, beta)?)
}

/// Correlated pair by Cholesky factor: `u0 = tau0 e1`,
/// `u1 = tau1 (rho e1 + sqrt(1 - rho^2) e2)`. `rho` is not learned.
pub fn sample_mvnormal2(
    g: &mut Graph,
    tau0: Var,
    tau1: Var,
    rho: &[f64],
    e1: &[f64],
    e2: &[f64],
    shape: &[usize],
) -> Result<(Var, Var)> {
    require_positive(g, tau0, "sample_mvnormal2", "tau0")?;
    require_positive(g, tau1, "sample_mvnormal2", "tau1")?;
    if let Some(bad) = rho.iter().find(|r| !(r.abs() < 1.0)) {
        return Err(Error::Domain {
            sampler: "sample_mvnormal2",
            msg: format!("correlation must lie in (-1, 1), got {bad}"),
        });
    }
    let z1 = noise_node(g, shape, e1.to_vec())?;
    let mixed: Vec<f64> = rho
        .iter()
        .zip(e1)
        .zip(e2)
        .map(|((r, a), b)| r * a + (1.0 - r * r).sqrt() * b)
        .collect();
    let z2 = noise_node(g, shape, mixed)?;
    let u0 = g.mul(z1, tau0)?;
    let u1 = g.mul(z2, tau1)?;
    Ok((u0, u1))
}

/// LKJ(1) on a 2x2 correlation matrix: the off-diagonal is uniform on (-1, 1).
pub fn sample_lkj2(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&u| 2.0 * u - 1.0).collect()
}

/// Relaxed one-hot vectors `softmax((log_probs + g) / tau)` over the
/// trailing axis of `log_probs`.
pub fn gumbel_softmax(g: &mut Graph, log_probs: Var, tau: f64, gumbel: Vec<f64>) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            sampler: "gumbel_softmax",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let shape = g.shape(log_probs).to_vec();
    let gn = noise_node(g, &shape, gumbel)?;
    let z = g.add(log_probs, gn)?;
    let z = g.scale(z, 1.0 / tau)?;
    Ok(g.softmax_last(z)?)
}

/// `sum_k k * simplex[..., k]`.
pub fn soft_count(g: &mut Graph, simplex: Var) -> Result<Var> {
    let shape = g.shape(simplex).to_vec();
    let k = *shape.last().ok_or(Error::Domain {
        sampler: "soft_count",
        msg: "simplex must have a trailing axis".into(),
    })?;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let support: Vec<f64> = (0..rows).flat_map(|_| (0..k).map(|i| i as f64)).collect();
    let s = g.constant(&shape, support)?;
    let w = g.mul(simplex, s)?;
    Ok(g.sum_last(w)?)
}

fn trailing_grid(g: &mut Graph, x: Var, k: usize) -> Result<(Var, Vec<usize>)> {
    let mut shape = g.shape(x).to_vec();
    shape.push(1);
    let col = g.reshape(x, &shape)?;
    *shape.last_mut().unwrap() = k;
    let wide = g.broadcast_to(col, &shape)?;
    Ok((wide, shape))
}

fn repeated_row(shape: &[usize], row: &[f64]) -> Vec<f64> {
    let rows: usize = shape[..shape.len() - 1].iter().product();
    (0..rows).flat_map(|_| row.iter().copied()).collect()
}

/// Binomial log-probabilities over the support `0..=trials`, one trailing
/// row per entry of `theta`.
pub fn binomial_logits(g: &mut Graph, trials: usize, theta: Var) -> Result<Var> {
    if trials < 1 {
        return Err(Error::Domain {
            sampler: "binomial_logits",
            msg: "need at least one trial".into(),
        });
    }
    let k = trials + 1;
    let clamp: Vec<f64> = g.value(theta).iter().map(|t| t.clamp(1e-7, 1.0 - 1e-7)).collect();
    // clamping is a no-op on interior values; keep the gradient path intact
    let shape = g.shape(theta).to_vec();
    let delta: Vec<f64> = clamp.iter().zip(g.value(theta)).map(|(c, t)| c - t).collect();
    let delta = g.constant(&shape, delta)?;
    let th = g.add(theta, delta)?;
    let lt = g.log(th)?;
    let one_minus = g.neg(th)?;
    let one_minus = g.shift(one_minus, 1.0)?;
    let l1t = g.log(one_minus)?;
    let (lt, wide) = trailing_grid(g, lt, k)?;
    let (l1t, _) = trailing_grid(g, l1t, k)?;
    let n = trials as f64;
    let lgn = special::ln_gamma(n + 1.0);
    let ks: Vec<f64> = (0..k).map(|i| i as f64).collect();
    let ck = g.constant(&wide, repeated_row(&wide, &ks))?;
    let cnk: Vec<f64> = ks.iter().map(|&i| n - i).collect();
    let cnk = g.constant(&wide, repeated_row(&wide, &cnk))?;
    let comb: Vec<f64> = ks
        .iter()
        .map(|&i| lgn - special::ln_gamma(i + 1.0) - special::ln_gamma(n - i + 1.0))
        .collect();
    let comb = g.constant(&wide, repeated_row(&wide, &comb))?;
    let a = g.mul(lt, ck)?;
    let b = g.mul(l1t, cnk)?;
    let s = g.add(a, b)?;
    Ok(g.add(s, comb)?)
}

/// Poisson log-probabilities over `0..=truncation`, unnormalized for the
/// truncation (a following softmax renormalizes).
pub fn poisson_truncated_logits(g: &mut Graph, truncation: usize, theta: Var) -> Result<Var> {
    require_positive(g, theta, "poisson_truncated_logits", "rate")?;
    if truncation < 1 {
        return Err(Error::Domain {
            sampler: "poisson_truncated_logits",
            msg: "truncation threshold must be at least 1".into(),
        });
    }
    let k = truncation + 1;
    let lt = g.log(theta)?;
    let (lt, wide) = trailing_grid(g, lt, k)?;
    let (th, _) = trailing_grid(g, theta, k)?;
    let ks: Vec<f64> = (0..k).map(|i| i as f64).collect();
    let ck = g.constant(&wide, repeated_row(&wide, &ks))?;
    let lf: Vec<f64> = ks.iter().map(|&i| -special::ln_gamma(i + 1.0)).collect();
    let lf = g.constant(&wide, repeated_row(&wide, &lf))?;
    let a = g.mul(lt, ck)?;
    let a = g.sub(a, th)?;
    Ok(g.add(a, lf)?)
}

/// Discrete likelihoods that are relaxed through Gumbel-Softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum CountFamily {
    /// Natural parameter is the logit of the success probability.
    Binomial { trials: usize },
    /// Natural parameter is the log rate; support is cut at `truncation`.
    Poisson { truncation: usize },
}

impl CountFamily {
    pub fn support_len(&self) -> usize {
        match self {
            CountFamily::Binomial { trials } => trials + 1,
            CountFamily::Poisson { truncation } => truncation + 1,
        }
    }

    /// Parts of the log-probability that do not depend on the parameter.
    fn base_weights(&self) -> Vec<f64> {
        match *self {
            CountFamily::Binomial { trials } => {
                let n = trials as f64;
                let lgn = special::ln_gamma(n + 1.0);
                (0..=trials)
                    .map(|k| {
                        let k = k as f64;
                        lgn - special::ln_gamma(k + 1.0) - special::ln_gamma(n - k + 1.0)
                    })
                    .collect()
            }
            CountFamily::Poisson { truncation } => (0..=truncation)
                .map(|k| -special::ln_gamma(k as f64 + 1.0))
                .collect(),
        }
    }
}

/// Soft count `sum_k k * gumbel_softmax(logits)_k` as a single fused node.
///
/// For both families the log-probability is `w_k + k * eta` plus a term
/// constant in `k`, which cancels inside the softmax. With
/// `s = softmax((w + k eta + g) / tau)` the count is `E_s[k]` and its
/// derivative in `eta` is `Var_s[k] / tau`.
///
/// `gumbel` holds `support_len()` draws per entry of `eta`.
pub fn relaxed_count(g: &mut Graph, eta: Var, family: &CountFamily, tau: f64, gumbel: &[f64]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            sampler: "relaxed_count",
            msg: format!("temperature must be positive, got {tau}"),
        });
    }
    let k = family.support_len();
    let n = g.value(eta).len();
    if gumbel.len() != n * k {
        return Err(Error::Domain {
            sampler: "relaxed_count",
            msg: format!("expected {} gumbel draws, got {}", n * k, gumbel.len()),
        });
    }
    let w = family.base_weights();
    let inv_tau = 1.0 / tau;
    let mut values = Vec::with_capacity(n);
    let mut derivs = Vec::with_capacity(n);
    let mut z = vec![0.0; k];
    for (i, &e) in g.value(eta).iter().enumerate() {
        let gs = &gumbel[i * k..(i + 1) * k];
        let mut m = f64::NEG_INFINITY;
        for j in 0..k {
            let v = (w[j] + j as f64 * e + gs[j]) * inv_tau;
            z[j] = v;
            m = m.max(v);
        }
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (j, zj) in z.iter().enumerate() {
            let p = (zj - m).exp();
            let jf = j as f64;
            s0 += p;
            s1 += p * jf;
            s2 += p * jf * jf;
        }
        let mean = s1 / s0;
        let var = (s2 / s0 - mean * mean).max(0.0);
        values.push(mean);
        derivs.push(var * inv_tau);
    }
    Ok(g.map_with_derivative(eta, values, derivs)?)
}

#[cfg(test)]
mod tests;
