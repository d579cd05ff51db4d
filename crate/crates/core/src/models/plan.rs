use super::{Family, Link, ModelSpec, Quantity};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::samplers::{self, purpose, CountFamily, NoiseBank};

/// Simulation knobs that are not part of the model itself.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSettings {
    /// Replicate data sets drawn per simulation.
    pub replicates: usize,
    /// Gumbel-Softmax temperature for count likelihoods.
    pub tau: f64,
    /// Overrides the Poisson truncation threshold of the spec.
    pub truncation: Option<usize>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            replicates: 200,
            tau: 1.0,
            truncation: None,
        }
    }
}

#[derive(Clone, Debug)]
enum TargetPlan {
    Mean(Vec<usize>),
    Diff(Vec<usize>, Vec<usize>),
    Point(usize),
    R2(Vec<usize>),
    Coef(usize),
    ResidualScale,
    Noise,
    Tau0,
    Tau1,
}

/// A [`ModelSpec`] compiled for repeated simulation.
///
/// Only the design rows that some target looks at are simulated; each is
/// expanded into `repeat` observations.
#[derive(Clone, Debug)]
pub struct Plan {
    family: Family,
    link: Link,
    coef: Vec<(usize, usize)>,
    noise_rate: Option<usize>,
    design_obs: usize,
    varying: Option<(usize, usize, usize)>,
    /// `K x R` transposed design of the simulated rows.
    xt: Vec<f64>,
    n_rows: usize,
    row_group: Vec<usize>,
    row_slope: Vec<f64>,
    obs_row: Vec<usize>,
    targets: Vec<TargetPlan>,
    hyper_count: usize,
}

impl Plan {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        match (&spec.family, spec.link) {
            (Family::Binomial { .. }, Link::Logit) | (Family::Poisson { .. }, Link::Log) => {}
            (Family::Binomial { .. }, _) => {
                return Err(Error::Config(
                    "binomial likelihood requires the logit link".into(),
                ))
            }
            (Family::Poisson { .. }, _) => {
                return Err(Error::Config("poisson likelihood requires the log link".into()))
            }
            (Family::Weibull, Link::Logit) => {
                return Err(Error::Config(
                    "Weibull likelihood needs a log or identity link".into(),
                ))
            }
            _ => {}
        }
        let all_rows: Vec<usize> = (0..spec.design.len()).collect();
        let mut needed = vec![false; spec.design.len()];
        let mut mark = |rows: &[usize]| rows.iter().for_each(|&r| needed[r] = true);
        for t in &spec.targets {
            match &t.quantity {
                Quantity::GroupMean { rows } => mark(rows),
                Quantity::DifferenceOfGroupMeans { plus, minus } => {
                    mark(plus);
                    mark(minus);
                }
                Quantity::DesignPointPrediction { row } => mark(&[*row]),
                Quantity::RSquared { rows } => mark(rows.as_deref().unwrap_or(&all_rows)),
                Quantity::GrandMean => mark(&all_rows),
                Quantity::Parameter { name } if name == "s" && spec.family == Family::Weibull => {
                    mark(&all_rows)
                }
                Quantity::Parameter { .. } => {}
            }
        }
        let rows: Vec<usize> = (0..spec.design.len()).filter(|&r| needed[r]).collect();
        let mut first_obs = vec![0usize; spec.design.len()];
        let mut obs_row = Vec::new();
        for (p, &r) in rows.iter().enumerate() {
            first_obs[r] = obs_row.len();
            obs_row.extend(std::iter::repeat_n(p, spec.design[r].repeat));
        }
        let obs_of = |rs: &[usize]| -> Vec<usize> {
            rs.iter()
                .flat_map(|&r| first_obs[r]..first_obs[r] + spec.design[r].repeat)
                .collect()
        };
        let x = spec.scaled_design();
        let k = spec.coefficients.len();
        let mut xt = vec![0.0; k * rows.len()];
        for (p, &r) in rows.iter().enumerate() {
            for c in 0..k {
                xt[c * rows.len() + p] = x[r][c];
            }
        }
        let (row_group, row_slope, varying) = match &spec.varying {
            Some(v) => (
                rows.iter().map(|&r| spec.design[r].group.unwrap_or(0)).collect(),
                rows.iter().map(|&r| x[r][v.slope_column]).collect(),
                Some((
                    v.groups,
                    spec.hyper_index(&v.omega0)?,
                    spec.hyper_index(&v.omega1)?,
                )),
            ),
            None => (vec![], vec![], None),
        };
        let mut targets = Vec::with_capacity(spec.targets.len());
        for t in &spec.targets {
            targets.push(match &t.quantity {
                Quantity::GroupMean { rows } => TargetPlan::Mean(obs_of(rows)),
                Quantity::DifferenceOfGroupMeans { plus, minus } => {
                    TargetPlan::Diff(obs_of(plus), obs_of(minus))
                }
                Quantity::DesignPointPrediction { row } => TargetPlan::Point(first_obs[*row]),
                Quantity::RSquared { rows } => TargetPlan::R2(obs_of(rows.as_deref().unwrap_or(&all_rows))),
                Quantity::GrandMean => TargetPlan::Mean(obs_of(&all_rows)),
                Quantity::Parameter { name } => match name.as_str() {
                    "s" => TargetPlan::ResidualScale,
                    "noise" => TargetPlan::Noise,
                    "tau0" => TargetPlan::Tau0,
                    "tau1" => TargetPlan::Tau1,
                    coef => TargetPlan::Coef(spec.coefficients.iter().position(|c| c.name == coef).unwrap()),
                },
            });
        }
        let coef = spec
            .coefficients
            .iter()
            .map(|c| Ok((spec.hyper_index(&c.mu)?, spec.hyper_index(&c.sigma)?)))
            .collect::<Result<_>>()?;
        Ok(Plan {
            family: spec.family.clone(),
            link: spec.link,
            coef,
            noise_rate: spec
                .noise
                .as_ref()
                .map(|n| spec.hyper_index(&n.rate))
                .transpose()?,
            design_obs: spec.observation_count(),
            varying,
            xt,
            n_rows: rows.len(),
            row_group,
            row_slope,
            obs_row,
            targets,
            hyper_count: spec.hyperparameters.len(),
        })
    }

    pub fn observations(&self) -> usize {
        self.obs_row.len()
    }

    fn count_family(&self, settings: &SimSettings) -> Option<CountFamily> {
        match self.family {
            Family::Binomial { trials } => Some(CountFamily::Binomial { trials }),
            Family::Poisson { truncation } => Some(CountFamily::Poisson {
                truncation: settings.truncation.unwrap_or(truncation),
            }),
            _ => None,
        }
    }

    /// Simulates every target quantity for `settings.replicates` replicate
    /// data sets. `lambda` holds one single-element node per hyperparameter
    /// (constrained values); each returned node has shape `[replicates]`.
    pub fn simulate(
        &self,
        g: &mut Graph,
        lambda: &[Var],
        noise: &NoiseBank,
        settings: &SimSettings,
    ) -> Result<Vec<Var>> {
        if lambda.len() != self.hyper_count {
            return Err(Error::Config(format!(
                "expected {} hyperparameter nodes, got {}",
                self.hyper_count,
                lambda.len()
            )));
        }
        let s = settings.replicates;
        if s < 2 {
            return Err(Error::Config("at least two replicates are required".into()));
        }
        let mut betas = Vec::with_capacity(self.coef.len());
        let mut cols = Vec::with_capacity(self.coef.len());
        for (k, &(mu, sigma)) in self.coef.iter().enumerate() {
            let eps = noise.normal(purpose(&format!("beta/{k}")), s);
            let b = samplers::sample_normal(g, lambda[mu], lambda[sigma], eps, &[s])?;
            cols.push(g.reshape(b, &[s, 1])?);
            betas.push(b);
        }
        let nz = match self.noise_rate {
            Some(rate) => {
                let base = noise.exponential_mean(purpose("noise"), self.design_obs, s);
                Some(samplers::scale_by_rate(g, lambda[rate], base)?)
            }
            None => None,
        };
        let effects = match self.varying {
            Some((groups, w0, w1)) => {
                let t0 =
                    samplers::sample_halfnormal(g, lambda[w0], &noise.uniform(purpose("tau0"), s), &[s])?;
                let t1 =
                    samplers::sample_halfnormal(g, lambda[w1], &noise.uniform(purpose("tau1"), s), &[s])?;
                let rho = samplers::sample_lkj2(&noise.uniform(purpose("rho"), s));
                let rho: Vec<f64> = rho.iter().flat_map(|&r| std::iter::repeat_n(r, groups)).collect();
                let e1 = noise.normal(purpose("u0"), s * groups);
                let e2 = noise.normal(purpose("u1"), s * groups);
                let wide = [s, groups];
                let t0w = widen(g, t0, &wide)?;
                let t1w = widen(g, t1, &wide)?;
                let (u0, u1) = samplers::sample_mvnormal2(g, t0w, t1w, &rho, &e1, &e2, &wide)?;
                Some((t0, t1, u0, u1))
            }
            None => None,
        };

        let r = self.n_rows;
        let o = self.observations();
        let mut y = None;
        let mut theta_obs = None;
        if o > 0 {
            let bmat = g.concat_last(&cols)?;
            let xt = g.constant(&[self.coef.len(), r], self.xt.clone())?;
            let mut eta = g.matmul(bmat, xt)?;
            if let Some((_, _, u0, u1)) = effects {
                let a = g.gather_last(u0, &self.row_group)?;
                eta = g.add(eta, a)?;
                let b = g.gather_last(u1, &self.row_group)?;
                let slope: Vec<f64> = (0..s).flat_map(|_| self.row_slope.iter().copied()).collect();
                let slope = g.constant(&[s, r], slope)?;
                let b = g.mul(b, slope)?;
                eta = g.add(eta, b)?;
            }
            let expand = |g: &mut Graph, v: Var| -> Result<Var> {
                if o == r {
                    Ok(v)
                } else {
                    Ok(g.gather_last(v, &self.obs_row)?)
                }
            };
            let theta = match (&self.family, self.link) {
                (_, Link::Identity) => eta,
                (Family::Binomial { trials }, _) => {
                    let p = g.sigmoid(eta)?;
                    g.scale(p, *trials as f64)?
                }
                (_, Link::Logit) => g.sigmoid(eta)?,
                (_, Link::Log) => g.exp(eta)?,
            };
            let th = expand(g, theta)?;
            let draws = if let Some(fam) = self.count_family(settings) {
                let eta_obs = expand(g, eta)?;
                let gn = noise.gumbel(purpose("likelihood"), s * o * fam.support_len());
                samplers::relaxed_count(g, eta_obs, &fam, settings.tau, &gn)?
            } else if self.family == Family::Normal {
                let sd = widen(g, nz.expect("validated"), &[s, o])?;
                let eps = noise.normal(purpose("likelihood"), s * o);
                samplers::sample_normal(g, th, sd, eps, &[s, o])?
            } else {
                let alpha = nz.expect("validated");
                let gam = weibull_gamma(g, alpha, 1.0)?;
                let gam = widen(g, gam, &[s, o])?;
                let beta = g.div(th, gam)?;
                let aw = widen(g, alpha, &[s, o])?;
                let u = noise.uniform(purpose("likelihood"), s * o);
                samplers::sample_weibull(g, aw, beta, &u, &[s, o])?
            };
            y = Some(draws);
            theta_obs = Some(th);
        }

        let mut out = Vec::with_capacity(self.targets.len());
        for t in &self.targets {
            let v = match t {
                TargetPlan::Mean(idx) => group_mean(g, y.unwrap(), idx, o)?,
                TargetPlan::Diff(a, b) => {
                    let a = group_mean(g, y.unwrap(), a, o)?;
                    let b = group_mean(g, y.unwrap(), b, o)?;
                    g.sub(a, b)?
                }
                TargetPlan::Point(i) => {
                    let p = g.gather_last(y.unwrap(), &[*i])?;
                    g.reshape(p, &[s])?
                }
                TargetPlan::R2(idx) => {
                    let th = select(g, theta_obs.unwrap(), idx, o)?;
                    let yy = select(g, y.unwrap(), idx, o)?;
                    let vt = g.var_last(th)?;
                    let vy = g.var_last(yy)?;
                    let vy = g.shift(vy, 1e-12)?;
                    g.div(vt, vy)?
                }
                TargetPlan::Coef(k) => betas[*k],
                TargetPlan::Noise => nz.expect("validated"),
                TargetPlan::ResidualScale => {
                    let nzv = nz.expect("validated");
                    if self.family == Family::Weibull {
                        // sd of a Weibull with mean m is m * sqrt(G(1+2/a) / G(1+1/a)^2 - 1)
                        let g2 = weibull_gamma(g, nzv, 2.0)?;
                        let g1 = weibull_gamma(g, nzv, 1.0)?;
                        let g1sq = g.mul(g1, g1)?;
                        let ratio = g.div(g2, g1sq)?;
                        let ratio = g.shift(ratio, -1.0)?;
                        let cv = g.sqrt(ratio)?;
                        let m = g.mean_last(theta_obs.unwrap())?;
                        g.mul(cv, m)?
                    } else {
                        nzv
                    }
                }
                TargetPlan::Tau0 => effects.expect("validated").0,
                TargetPlan::Tau1 => effects.expect("validated").1,
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// `Gamma(1 + k / alpha)` elementwise.
fn weibull_gamma(g: &mut Graph, alpha: Var, k: f64) -> Result<Var> {
    let inv = g.powf(alpha, -1.0)?;
    let inv = g.scale(inv, k)?;
    let arg = g.shift(inv, 1.0)?;
    let lg = g.ln_gamma(arg)?;
    Ok(g.exp(lg)?)
}

/// Repeats a per-replicate vector `[s]` across a trailing axis.
fn widen(g: &mut Graph, v: Var, shape: &[usize]) -> Result<Var> {
    let col = g.reshape(v, &[shape[0], 1])?;
    Ok(g.broadcast_to(col, shape)?)
}

fn select(g: &mut Graph, v: Var, idx: &[usize], total: usize) -> Result<Var> {
    if idx.len() == total && idx.iter().enumerate().all(|(i, &j)| i == j) {
        Ok(v)
    } else {
        Ok(g.gather_last(v, idx)?)
    }
}

fn group_mean(g: &mut Graph, y: Var, idx: &[usize], total: usize) -> Result<Var> {
    let sel = select(g, y, idx, total)?;
    Ok(g.mean_last(sel)?)
}
