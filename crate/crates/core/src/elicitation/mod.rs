//! Elicitation techniques, the simulated expert and the statistics file format.

mod io;

pub use io::{parse_expert, read_expert_file, write_expert_file, ExpertFile, StatisticRecord};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Plan, SimSettings};
use crate::samplers::NoiseBank;

pub const DEFAULT_PROBS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn default_probs() -> Vec<f64> {
    DEFAULT_PROBS.to_vec()
}

/// How a simulated target quantity is summarized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Technique {
    Quantiles {
        #[serde(default = "default_probs")]
        probs: Vec<f64>,
    },
    Moments,
    Histogram {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap: Option<usize>,
    },
}

impl Technique {
    pub fn quantiles() -> Self {
        Technique::Quantiles {
            probs: default_probs(),
        }
    }

    pub fn histogram() -> Self {
        Technique::Histogram { cap: None }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Technique::Quantiles { .. } => "quantiles",
            Technique::Moments => "moments",
            Technique::Histogram { .. } => "histogram",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Technique::Quantiles { probs } => {
                if probs.is_empty()
                    || probs.iter().any(|p| !(*p > 0.0 && *p < 1.0))
                    || probs.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::Config(format!(
                        "quantile probabilities must be strictly increasing inside (0, 1): {probs:?}"
                    )));
                }
            }
            Technique::Histogram { cap: Some(0) } => {
                return Err(Error::Config("histogram cap must be at least 1".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of the statistic for `n` input samples.
    pub fn width(&self, n: usize) -> usize {
        match self {
            Technique::Quantiles { probs } => probs.len(),
            Technique::Moments => 2,
            Technique::Histogram { cap } => cap.map_or(n, |c| c.min(n)),
        }
    }

    /// Applies the technique along the trailing axis of `x`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Technique::Quantiles { probs } => quantiles(g, x, probs),
            Technique::Moments => moments(g, x),
            Technique::Histogram { cap } => histogram_stat(g, x, cap.unwrap_or(usize::MAX)),
        }
    }

    pub fn apply_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.constant(&[x.len()], x.to_vec())?;
        let out = self.apply(&mut g, v)?;
        Ok(g.value(out).to_vec())
    }
}

fn trailing_len(g: &Graph, x: Var) -> usize {
    g.shape(x).last().copied().unwrap_or(1)
}

fn row_constant(g: &mut Graph, x: Var, width: usize, row: &[f64]) -> Result<Var> {
    let mut shape = g.shape(x).to_vec();
    *shape.last_mut().unwrap() = width;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
    Ok(g.constant(&shape, data)?)
}

/// Linear-interpolation sample quantiles at one-based position
/// `h = (n - 1) p + 1`.
pub fn quantiles(g: &mut Graph, x: Var, probs: &[f64]) -> Result<Var> {
    let n = trailing_len(g, x);
    if g.shape(x).is_empty() || n < 2 {
        return Err(Error::Config(format!(
            "quantiles need at least 2 samples, got {n}"
        )));
    }
    let mut lo = Vec::with_capacity(probs.len());
    let mut hi = Vec::with_capacity(probs.len());
    let mut frac = Vec::with_capacity(probs.len());
    for &p in probs {
        let h = (n - 1) as f64 * p;
        let f = h.floor();
        let l = (f as usize).min(n - 1);
        lo.push(l);
        hi.push((l + 1).min(n - 1));
        frac.push(h - f);
    }
    let sorted = g.sort_last(x)?;
    let a = g.gather_last(sorted, &lo)?;
    let b = g.gather_last(sorted, &hi)?;
    let wa: Vec<f64> = frac.iter().map(|f| 1.0 - f).collect();
    let wa = row_constant(g, a, probs.len(), &wa)?;
    let wb = row_constant(g, b, probs.len(), &frac)?;
    let a = g.mul(a, wa)?;
    let b = g.mul(b, wb)?;
    Ok(g.add(a, b)?)
}

/// Mean and standard deviation (divisor `n - 1`) along the trailing axis.
pub fn moments(g: &mut Graph, x: Var) -> Result<Var> {
    let n = trailing_len(g, x);
    if g.shape(x).is_empty() || n < 2 {
        return Err(Error::Config(format!("moments need at least 2 samples, got {n}")));
    }
    let mut col = g.shape(x).to_vec();
    *col.last_mut().unwrap() = 1;
    let m = g.mean_last(x)?;
    let v = g.var_last(x)?;
    let sd = g.sqrt(v)?;
    let m = g.reshape(m, &col)?;
    let sd = g.reshape(sd, &col)?;
    Ok(g.concat_last(&[m, sd])?)
}

/// Raw samples thinned by a deterministic stride to at most `cap` entries.
pub fn histogram_stat(g: &mut Graph, x: Var, cap: usize) -> Result<Var> {
    let n = trailing_len(g, x);
    if g.shape(x).is_empty() || n == 0 || cap == 0 {
        return Err(Error::Config("histogram needs at least one sample".into()));
    }
    if n <= cap {
        return Ok(x);
    }
    let idx: Vec<usize> = (0..cap).map(|j| j * n / cap).collect();
    Ok(g.gather_last(x, &idx)?)
}

/// One elicited statistic in plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Statistic {
    pub id: String,
    pub technique: Technique,
    /// Row-major `rows x width` values.
    pub values: Vec<f64>,
    pub rows: usize,
}

impl Statistic {
    pub fn width(&self) -> usize {
        self.values.len() / self.rows.max(1)
    }
}

/// Statistics from the expert (real or simulated).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertStats {
    pub model: String,
    pub seed: u64,
    pub statistics: Vec<Statistic>,
}

impl ExpertStats {
    pub fn get(&self, id: &str) -> Option<&Statistic> {
        self.statistics.iter().find(|s| s.id == id)
    }
}

/// Expert who knows the generative model and the true hyperparameters:
/// one simulation of `replicates` draws, summarized by each target's
/// technique.
pub fn simulate_ideal_expert(
    spec: &ModelSpec,
    lambda: &[f64],
    replicates: usize,
    seed: u64,
    settings: &SimSettings,
) -> Result<ExpertStats> {
    let plan = Plan::new(spec)?;
    let mut g = Graph::new();
    let lam: Vec<Var> = lambda
        .iter()
        .map(|&v| g.constant(&[1], vec![v]))
        .collect::<std::result::Result<_, _>>()?;
    let settings = SimSettings {
        replicates,
        ..settings.clone()
    };
    let targets = plan.simulate(&mut g, &lam, &NoiseBank::expert(seed), &settings)?;
    let mut statistics = Vec::with_capacity(targets.len());
    for (t, v) in spec.targets.iter().zip(targets) {
        let s = t.technique.apply(&mut g, v)?;
        statistics.push(Statistic {
            id: t.id.clone(),
            technique: t.technique.clone(),
            values: g.value(s).to_vec(),
            rows: 1,
        });
    }
    Ok(ExpertStats {
        model: spec.name.clone(),
        seed,
        statistics,
    })
}

/// Deliberately inconsistent expert input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Perturbation {
    /// Both moments of the residual scale `s` are doubled.
    DoubleS,
    /// Every sample of every R² histogram is halved.
    HalveR2,
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double-s" => Ok(Perturbation::DoubleS),
            "halve-r2" => Ok(Perturbation::HalveR2),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected double-s or halve-r2)"
            ))),
        }
    }
}

pub fn perturb_expert(
    stats: &ExpertStats,
    scenario: Perturbation,
    s_id: &str,
    r2_ids: &[&str],
) -> Result<ExpertStats> {
    let mut out = stats.clone();
    let (ids, factor): (Vec<&str>, f64) = match scenario {
        Perturbation::DoubleS => (vec![s_id], 2.0),
        Perturbation::HalveR2 => (r2_ids.to_vec(), 0.5),
    };
    for id in ids {
        let st = out
            .statistics
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("statistic `{id}` not present in expert input")))?;
        for v in &mut st.values {
            *v *= factor;
        }
    }
    Ok(out)
}
