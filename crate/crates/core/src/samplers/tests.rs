use super::*;
use crate::diffcore::finite_difference;

const N: usize = 100_000;

fn scalar(g: &mut Graph, x: f64) -> Var {
    g.input(&[], vec![x]).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn bank() -> NoiseBank {
    NoiseBank::new(2023, 0)
}

#[test]
fn normal_location_scale() {
    let mut g = Graph::new();
    let (m, s) = (scalar(&mut g, 0.0), scalar(&mut g, 1.0));
    let y = sample_normal(&mut g, m, s, vec![0.5], &[1]).unwrap();
    assert_eq!(g.value(y), &[0.5]);
    let (m, s) = (scalar(&mut g, 2.0), scalar(&mut g, 1e-300));
    let y = sample_normal(&mut g, m, s, vec![1.7], &[1]).unwrap();
    assert_eq!(g.value(y), &[2.0]);
    let bad = scalar(&mut g, 0.0);
    assert!(matches!(
        sample_normal(&mut g, m, bad, vec![0.0], &[1]),
        Err(Error::Domain { .. })
    ));
    let (m, s) = (scalar(&mut g, 1.0), scalar(&mut g, 2.0));
    let y = sample_normal(&mut g, m, s, bank().normal(0, N), &[N]).unwrap();
    assert!((mean(g.value(y)) - 1.0).abs() < 0.02);
}

#[test]
fn exponential_inverse_cdf() {
    let mut g = Graph::new();
    let nu = scalar(&mut g, 1.0);
    let u = 1.0 - (-1.0f64).exp();
    let y = sample_exponential(&mut g, nu, &[u], &[1]).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
    let nu2 = scalar(&mut g, 2.0);
    let y2 = sample_exponential(&mut g, nu2, &[u], &[1]).unwrap();
    assert!((g.value(y2)[0] - 0.5).abs() < 1e-12);
    let nu = scalar(&mut g, 9.0);
    let y = sample_exponential(&mut g, nu, &bank().uniform(1, N), &[N]).unwrap();
    assert!((mean(g.value(y)) * 9.0 - 1.0).abs() < 0.01);
}

#[test]
fn exponential_mean_is_gamma() {
    let mut g = Graph::new();
    let nu = scalar(&mut g, 9.0);
    let u = [0.3];
    let a = sample_exponential_mean(&mut g, nu, 1, &u).unwrap();
    let b = sample_exponential(&mut g, nu, &u, &[1]).unwrap();
    assert_eq!(g.value(a), g.value(b));

    let u = bank().uniform(2, 10 * N);
    let y = sample_exponential_mean(&mut g, nu, 10, &u).unwrap();
    let v = g.value(y);
    assert!((mean(v) * 9.0 - 1.0).abs() < 0.01);
    assert!((var(v) * 810.0 - 1.0).abs() < 0.05);
    // the direct Gamma draw has the same law
    let base = bank().exponential_mean(3, 10, N);
    let y = scale_by_rate(&mut g, nu, base).unwrap();
    let v = g.value(y);
    assert!((mean(v) * 9.0 - 1.0).abs() < 0.01);
    assert!((var(v) * 810.0 - 1.0).abs() < 0.05);
}

#[test]
fn halfnormal_quantiles_and_mean() {
    let mut g = Graph::new();
    let w = scalar(&mut g, 3.0);
    let y = sample_halfnormal(&mut g, w, &[U_MIN, 0.5], &[2]).unwrap();
    assert!(g.value(y)[0].abs() < 1e-10);
    assert!((g.value(y)[1] - 3.0 * 0.674_489_750_196_081_7).abs() < 1e-10);
    let y = sample_halfnormal(&mut g, w, &bank().uniform(4, N), &[N]).unwrap();
    let want = 3.0 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mean(g.value(y)) / want - 1.0).abs() < 0.01);
}

#[test]
fn weibull_special_cases_and_mean() {
    let mut g = Graph::new();
    let u = 1.0 - (-1.0f64).exp();
    for a in [0.5, 1.0, 7.0] {
        let al = scalar(&mut g, a);
        let be = scalar(&mut g, 2.5);
        let y = sample_weibull(&mut g, al, be, &[u], &[1]).unwrap();
        assert!((g.value(y)[0] - 2.5).abs() < 1e-12);
    }
    // alpha = 1 is exponential with rate 1 / beta
    let (al, be, nu) = (scalar(&mut g, 1.0), scalar(&mut g, 4.0), scalar(&mut g, 0.25));
    let y = sample_weibull(&mut g, al, be, &[0.3, 0.9], &[2]).unwrap();
    let z = sample_exponential(&mut g, nu, &[0.3, 0.9], &[2]).unwrap();
    for (a, b) in g.value(y).iter().zip(g.value(z)) {
        assert!((a - b).abs() < 1e-12);
    }
    let (al, be) = (scalar(&mut g, 2.0), scalar(&mut g, 3.0));
    let y = sample_weibull(&mut g, al, be, &bank().uniform(5, N), &[N]).unwrap();
    let want = 3.0 * statrs::function::gamma::gamma(1.5);
    assert!((mean(g.value(y)) / want - 1.0).abs() < 0.01);
}

#[test]
fn mvnormal2_covariance() {
    let mut g = Graph::new();
    let (t0, t1) = (scalar(&mut g, 2.0), scalar(&mut g, 0.5));
    let (e1, e2) = (bank().normal(6, N), bank().normal(7, N));
    let rho = vec![0.0; N];
    let (a, b) = sample_mvnormal2(&mut g, t0, t1, &rho, &e1, &e2, &[N]).unwrap();
    let cov = |x: &[f64], y: &[f64]| {
        let (mx, my) = (mean(x), mean(y));
        x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() - 1) as f64
    };
    assert!(cov(g.value(a), g.value(b)).abs() < 0.02 * 1.0);
    let rho = vec![0.6; N];
    let (a, b) = sample_mvnormal2(&mut g, t0, t1, &rho, &e1, &e2, &[N]).unwrap();
    let (va, vb) = (g.value(a).to_vec(), g.value(b).to_vec());
    assert!((var(&va) / 4.0 - 1.0).abs() < 0.02);
    assert!((var(&vb) / 0.25 - 1.0).abs() < 0.02);
    assert!((cov(&va, &vb) / 0.6 - 1.0).abs() < 0.02);
    let rho = vec![1.0 - 1e-12; 3];
    let (_, b) = sample_mvnormal2(&mut g, t0, t1, &rho, &[1.0, -2.0, 0.3], &[5.0, 5.0, 5.0], &[3]).unwrap();
    for (x, e) in g.value(b).iter().zip([1.0, -2.0, 0.3]) {
        assert!((x - 0.5 * e).abs() < 1e-5);
    }
    assert!(sample_mvnormal2(&mut g, t0, t1, &[1.0], &[0.0], &[0.0], &[1]).is_err());
}

#[test]
fn lkj2_is_uniform() {
    assert_eq!(sample_lkj2(&[0.5]), vec![0.0]);
    assert!(sample_lkj2(&[U_MAX])[0] < 1.0);
    let mut r = sample_lkj2(&bank().uniform(8, N));
    r.sort_by(f64::total_cmp);
    let ks = r
        .iter()
        .enumerate()
        .map(|(i, x)| ((i + 1) as f64 / N as f64 - (x + 1.0) / 2.0).abs())
        .fold(0.0, f64::max);
    assert!(ks <= 0.01, "ks = {ks}");
}

#[test]
fn gumbel_softmax_properties() {
    let mut g = Graph::new();
    let lp = g.input(&[4], vec![0.3; 4]).unwrap();
    let x = gumbel_softmax(&mut g, lp, 1.0, vec![0.1; 4]).unwrap();
    for v in g.value(x) {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let lp = g.input(&[3, 5], bank().normal(9, 15)).unwrap();
    let x = gumbel_softmax(&mut g, lp, 0.7, bank().gumbel(10, 15)).unwrap();
    for row in g.value(x).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // near-zero temperature collapses to the perturbed argmax
    let logits = bank().normal(11, 6);
    let gn = bank().gumbel(12, 6);
    let lp = g.input(&[6], logits.clone()).unwrap();
    let x = gumbel_softmax(&mut g, lp, 0.01, gn.clone()).unwrap();
    let arg = (0..6)
        .max_by(|&a, &b| (logits[a] + gn[a]).total_cmp(&(logits[b] + gn[b])))
        .unwrap();
    for (i, v) in g.value(x).iter().enumerate() {
        let hard = if i == arg { 1.0 } else { 0.0 };
        assert!((v - hard).abs() < 1e-3);
    }
    assert!(gumbel_softmax(&mut g, lp, 0.0, gn).is_err());
}

#[test]
fn soft_count_examples() {
    let mut g = Graph::new();
    let mut one_hot = vec![0.0; 10];
    one_hot[7] = 1.0;
    let s = g.constant(&[10], one_hot).unwrap();
    let c = soft_count(&mut g, s).unwrap();
    assert_eq!(g.value(c), &[7.0]);
    let s = g.constant(&[3], vec![1.0 / 3.0; 3]).unwrap();
    let c = soft_count(&mut g, s).unwrap();
    assert!((g.value(c)[0] - 1.0).abs() < 1e-15);
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    special::softmax_in_place(&mut r);
    r
}

#[test]
fn binomial_logits_examples() {
    let mut g = Graph::new();
    let th = g.input(&[1], vec![0.3]).unwrap();
    let l = binomial_logits(&mut g, 1, th).unwrap();
    let v = g.value(l);
    assert!((v[0] - 0.7f64.ln()).abs() < 1e-12 && (v[1] - 0.3f64.ln()).abs() < 1e-12);
    let th = g.input(&[1], vec![0.5]).unwrap();
    let l = binomial_logits(&mut g, 2, th).unwrap();
    let p = softmax_row(g.value(l));
    for (a, b) in p.iter().zip([0.25, 0.5, 0.25]) {
        assert!((a - b).abs() < 1e-12);
    }
    let th = g.input(&[1], vec![0.83]).unwrap();
    let l = binomial_logits(&mut g, 37, th).unwrap();
    let total: f64 = g.value(l).iter().map(|x| x.exp()).sum();
    assert!((total - 1.0).abs() < 1e-10);
    assert!(binomial_logits(&mut g, 0, th).is_err());
}

#[test]
fn poisson_logits_examples() {
    let mut g = Graph::new();
    let th = g.input(&[1], vec![1.0]).unwrap();
    let l = poisson_truncated_logits(&mut g, 30, th).unwrap();
    let p = softmax_row(g.value(l));
    assert!((p[0] - 0.367_879_441_171_442_3).abs() < 1e-9);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let th = g.input(&[1], vec![18.0]).unwrap();
    let l = poisson_truncated_logits(&mut g, 110, th).unwrap();
    let mass: f64 = g.value(l).iter().map(|x| x.exp()).sum();
    assert!(1.0 - mass < 1e-10);
    let bad = g.input(&[1], vec![0.0]).unwrap();
    assert!(poisson_truncated_logits(&mut g, 10, bad).is_err());
}

#[test]
fn soft_binomial_mean_is_close_to_exact() {
    let mut g = Graph::new();
    let n = N;
    let eta = g.input(&[n], vec![0.0; n]).unwrap();
    let fam = CountFamily::Binomial { trials: 100 };
    let gn = bank().gumbel(13, n * 101);
    let c = relaxed_count(&mut g, eta, &fam, 1.0, &gn).unwrap();
    assert!((mean(g.value(c)) - 50.0).abs() < 1.0);
}

#[test]
fn fused_count_matches_composed_graph() {
    for (fam, eta0, theta) in [
        (CountFamily::Binomial { trials: 12 }, vec![-0.4, 0.9, 2.0], None),
        (
            CountFamily::Poisson { truncation: 25 },
            vec![0.3, 1.5, 2.4],
            Some(()),
        ),
    ] {
        let k = fam.support_len();
        let gn = bank().gumbel(14, 3 * k);
        for tau in [1.0, 0.5] {
            let composed = |x: &[Vec<f64>], g: &mut Graph| -> Result<(Var, Var)> {
                let eta = g.input(&[3], x[0].clone())?;
                let lp = if theta.is_none() {
                    let t = g.sigmoid(eta)?;
                    binomial_logits(g, k - 1, t)?
                } else {
                    let t = g.exp(eta)?;
                    poisson_truncated_logits(g, k - 1, t)?
                };
                let s = gumbel_softmax(g, lp, tau, gn.clone())?;
                let c = soft_count(g, s)?;
                let o = g.sum_all(c)?;
                Ok((eta, o))
            };
            let mut g1 = Graph::new();
            let (e1, o1) = composed(std::slice::from_ref(&eta0), &mut g1).unwrap();
            let mut g2 = Graph::new();
            let e2 = g2.input(&[3], eta0.clone()).unwrap();
            let c2 = relaxed_count(&mut g2, e2, &fam, tau, &gn).unwrap();
            let o2 = g2.sum_all(c2).unwrap();
            assert!((g1.scalar(o1) - g2.scalar(o2)).abs() < 1e-9);
            let d1 = g1.gradient(o1, &[e1]).unwrap();
            let d2 = g2.gradient(o2, &[e2]).unwrap();
            for (a, b) in d1.get(e1).iter().zip(d2.get(e2)) {
                assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

/// Gradients of each sampler in its learnable parameters at fixed noise.
#[test]
fn sampler_gradients_match_finite_differences() {
    let u = bank().uniform(15, 6);
    let e = bank().normal(16, 6);
    let e2 = bank().normal(17, 6);
    let rho = sample_lkj2(&bank().uniform(18, 6));
    let gn = bank().gumbel(19, 6 * 21);
    let f = |p: &[Vec<f64>], g: &mut Graph| -> Result<(Vec<Var>, Var)> {
        let v: Vec<Var> = p.iter().map(|x| g.input(&[], x.clone()).unwrap()).collect();
        let a = sample_normal(g, v[0], v[1], e.clone(), &[6])?;
        let b = sample_exponential(g, v[2], &u, &[6])?;
        let c = sample_exponential_mean(g, v[2], 3, &u)?;
        let d = sample_halfnormal(g, v[3], &u, &[6])?;
        let w = sample_weibull(g, v[4], v[1], &u, &[6])?;
        let (m0, m1) = sample_mvnormal2(g, v[3], v[1], &rho, &e, &e2, &[6])?;
        let eta = g.scale(a, 0.3)?;
        let bc = relaxed_count(g, eta, &CountFamily::Binomial { trials: 20 }, 1.0, &gn)?;
        let pc = relaxed_count(g, eta, &CountFamily::Poisson { truncation: 20 }, 1.0, &gn)?;
        let mut acc = g.constant_scalar(0.0)?;
        for (i, x) in [a, b, c, d, w, m0, m1, bc, pc].into_iter().enumerate() {
            let s = g.powf(x, 2.0)?;
            let s = g.sum_all(s)?;
            let s = g.scale(s, 1.0 / (i + 1) as f64)?;
            acc = g.add(acc, s)?;
        }
        Ok((v, acc))
    };
    let p0 = vec![vec![0.4], vec![1.3], vec![2.0], vec![0.7], vec![3.0]];
    let mut g = Graph::new();
    let (leaves, out) = f(&p0, &mut g).unwrap();
    let gr = g.gradient(out, &leaves).unwrap();
    let fd = finite_difference(
        |p| {
            let mut g = Graph::new();
            let (_, o) = f(p, &mut g).map_err(|e| match e {
                Error::Diff(d) => d,
                other => panic!("{other}"),
            })?;
            Ok(g.scalar(o))
        },
        &p0,
        1e-5,
    )
    .unwrap();
    for (l, want) in leaves.iter().zip(&fd) {
        let got = gr.get(*l)[0];
        assert!(
            (got - want[0]).abs() / want[0].abs().max(1.0) < 1e-5,
            "{got} vs {}",
            want[0]
        );
    }
}

#[test]
fn samplers_are_pure() {
    let run = || {
        let mut g = Graph::new();
        let m = scalar(&mut g, 0.2);
        let s = scalar(&mut g, 0.9);
        let y = sample_normal(&mut g, m, s, bank().normal(20, 50), &[50]).unwrap();
        let c = relaxed_count(
            &mut g,
            y,
            &CountFamily::Poisson { truncation: 15 },
            1.0,
            &bank().gumbel(21, 50 * 16),
        )
        .unwrap();
        g.value(c).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
