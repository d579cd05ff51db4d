//! Generative models described as data.
//!
//! A [`ModelSpec`] is a small declarative program: a design matrix, normal
//! priors on the regression coefficients, an optional exponential prior on
//! the noise (or Weibull shape) parameter, optional correlated varying
//! intercepts and slopes, a likelihood family with its link, and the list
//! of target quantities the expert is asked about. [`Plan`] compiles a spec
//! once and then simulates it on a [`Graph`](crate::diffcore::Graph) as
//! often as needed.

mod fixtures;
mod plan;

pub use fixtures::{builtin, builtin_models, builtin_names};
pub use plan::{Plan, SimSettings};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{special, Graph, Var};
use crate::elicitation::Technique;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Normal,
    Binomial { trials: usize },
    Poisson { truncation: usize },
    Weibull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// One entry per coefficient (include the intercept column).
    pub x: Vec<f64>,
    /// Number of exchangeable observations sharing this row.
    #[serde(default = "one")]
    pub repeat: usize,
    /// Varying-effects group of the row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

/// Rescaling applied to a raw predictor column before simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaling {
    /// `x / sd(x)` over the design rows.
    DivideBySd { column: usize },
    /// `(x - mean(x)) / sd(x)` over the design rows.
    Standardize { column: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientPrior {
    pub name: String,
    /// Hyperparameter holding the prior mean.
    pub mu: String,
    /// Hyperparameter holding the prior standard deviation.
    pub sigma: String,
}

/// `Exponential(rate)` prior on the noise scale (normal likelihood) or on
/// the shape (Weibull likelihood). It is drawn as the mean of `N`
/// exponential draws, `N` being the number of design observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub rate: String,
}

/// Correlated varying intercepts and slopes:
/// `tau_k ~ HalfNormal(omega_k)`, `rho ~ LKJ(1)`, `(u0, u1) ~ MvNormal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaryingEffects {
    pub groups: usize,
    /// Column of the design multiplying the varying slope.
    pub slope_column: usize,
    pub omega0: String,
    pub omega1: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Any real value.
    Location,
    /// Strictly positive, mapped through softplus.
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameter {
    pub name: String,
    pub kind: Constraint,
    /// Multiplier between the optimizer coordinate and the hyperparameter.
    /// Larger units let a hyperparameter of large magnitude move at a pace
    /// proportional to its size.
    #[serde(default = "unit")]
    pub unit: f64,
    /// Range of the uniform initial draw, in hyperparameter units.
    pub init: [f64; 2],
    /// Reference value used to simulate the ideal expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_value: Option<f64>,
}

impl Hyperparameter {
    pub fn constrain(&self, x: f64) -> f64 {
        match self.kind {
            Constraint::Location => self.unit * x,
            Constraint::Scale => self.unit * special::softplus(x),
        }
    }

    pub fn unconstrain(&self, v: f64) -> Result<f64> {
        match self.kind {
            Constraint::Location => Ok(v / self.unit),
            Constraint::Scale if v > 0.0 => Ok(special::softplus_inv(v / self.unit)),
            Constraint::Scale => Err(Error::Config(format!(
                "hyperparameter `{}` must be positive, got {v}",
                self.name
            ))),
        }
    }
}

/// Quantity of interest computed from one simulated data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quantity {
    /// Mean of all observations in the listed rows.
    GroupMean { rows: Vec<usize> },
    /// Group mean of `plus` minus group mean of `minus`.
    DifferenceOfGroupMeans { plus: Vec<usize>, minus: Vec<usize> },
    /// A single observation at a design row.
    DesignPointPrediction { row: usize },
    /// `var(theta) / var(y)` across observations of the listed rows
    /// (all rows when omitted).
    RSquared {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rows: Option<Vec<usize>>,
    },
    /// Mean over every design observation.
    GrandMean,
    /// A model parameter: a coefficient name, `s` (residual scale, which
    /// for the Weibull likelihood is its standard deviation relative to the
    /// mean prediction times that mean), `noise`, `tau0` or `tau1`.
    Parameter { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub id: String,
    pub quantity: Quantity,
    pub technique: Technique,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub family: Family,
    pub link: Link,
    pub design: Vec<DesignRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scaling: Vec<Scaling>,
    pub coefficients: Vec<CoefficientPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoisePrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varying: Option<VaryingEffects>,
    pub hyperparameters: Vec<Hyperparameter>,
    pub targets: Vec<TargetSpec>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| Error::Parse(format!("model: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn hyper_index(&self, name: &str) -> Result<usize> {
        self.hyperparameters
            .iter()
            .position(|h| h.name == name)
            .ok_or_else(|| Error::Config(format!("unknown hyperparameter `{name}`")))
    }

    pub fn hyper_names(&self) -> Vec<String> {
        self.hyperparameters.iter().map(|h| h.name.clone()).collect()
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.targets.iter().map(|t| t.id.clone()).collect()
    }

    /// Total number of observations described by the design.
    pub fn observation_count(&self) -> usize {
        self.design.iter().map(|r| r.repeat).sum()
    }

    /// True hyperparameters, if every slot has one.
    pub fn lambda_star(&self) -> Option<Vec<f64>> {
        self.hyperparameters.iter().map(|h| h.true_value).collect()
    }

    pub fn constrain(&self, x: &[f64]) -> Vec<f64> {
        self.hyperparameters
            .iter()
            .zip(x)
            .map(|(h, &x)| h.constrain(x))
            .collect()
    }

    pub fn unconstrain(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        if lambda.len() != self.hyperparameters.len() {
            return Err(Error::Config(format!(
                "expected {} hyperparameters, got {}",
                self.hyperparameters.len(),
                lambda.len()
            )));
        }
        self.hyperparameters
            .iter()
            .zip(lambda)
            .map(|(h, &v)| h.unconstrain(v))
            .collect()
    }

    /// Graph version of [`ModelSpec::constrain`]: one single-element node
    /// per hyperparameter, computed from the unconstrained vector `x`.
    pub fn constrain_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.hyperparameters.len());
        for (k, h) in self.hyperparameters.iter().enumerate() {
            let v = g.gather_last(x, &[k])?;
            let v = match h.kind {
                Constraint::Location => v,
                Constraint::Scale => g.softplus(v)?,
            };
            out.push(if h.unit == 1.0 { v } else { g.scale(v, h.unit)? });
        }
        Ok(out)
    }

    /// Design with every scaling rule applied.
    pub fn scaled_design(&self) -> Vec<Vec<f64>> {
        let mut x: Vec<Vec<f64>> = self.design.iter().map(|r| r.x.clone()).collect();
        for rule in &self.scaling {
            let (col, center) = match *rule {
                Scaling::DivideBySd { column } => (column, false),
                Scaling::Standardize { column } => (column, true),
            };
            let vals: Vec<f64> = x.iter().map(|r| r[col]).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt();
            for r in &mut x {
                r[col] = if center { (r[col] - m) / sd } else { r[col] / sd };
            }
        }
        x
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(format!("model `{}`: {m}", self.name)));
        let k = self.coefficients.len();
        if k == 0 {
            return cfg("at least one coefficient is required".into());
        }
        if self.design.is_empty() {
            return cfg("design has no rows".into());
        }
        for (i, r) in self.design.iter().enumerate() {
            if r.x.len() != k {
                return cfg(format!("design row {i} has {} columns, expected {k}", r.x.len()));
            }
            if r.repeat == 0 {
                return cfg(format!("design row {i} has zero repeats"));
            }
        }
        for s in &self.scaling {
            let (Scaling::DivideBySd { column } | Scaling::Standardize { column }) = s;
            if *column >= k {
                return cfg(format!("scaling refers to missing column {column}"));
            }
            if self.design.len() < 2 {
                return cfg("scaling needs at least two design rows".into());
            }
        }
        // every hyperparameter is used by exactly one prior slot
        let mut uses = vec![0usize; self.hyperparameters.len()];
        let mut slots: Vec<&str> = Vec::new();
        for c in &self.coefficients {
            slots.push(&c.mu);
            slots.push(&c.sigma);
        }
        if let Some(n) = &self.noise {
            slots.push(&n.rate);
        }
        if let Some(v) = &self.varying {
            slots.push(&v.omega0);
            slots.push(&v.omega1);
        }
        for s in &slots {
            uses[self.hyper_index(s)?] += 1;
        }
        if let Some(i) = uses.iter().position(|&u| u != 1) {
            return cfg(format!(
                "hyperparameter `{}` is referenced by {} prior slots",
                self.hyperparameters[i].name, uses[i]
            ));
        }
        let positive: Vec<&str> = self
            .coefficients
            .iter()
            .map(|c| c.sigma.as_str())
            .chain(self.noise.iter().map(|n| n.rate.as_str()))
            .chain(
                self.varying
                    .iter()
                    .flat_map(|v| [v.omega0.as_str(), v.omega1.as_str()]),
            )
            .collect();
        for h in &self.hyperparameters {
            if positive.contains(&h.name.as_str()) && h.kind != Constraint::Scale {
                return cfg(format!("hyperparameter `{}` must be a scale", h.name));
            }
            if !(h.unit > 0.0) || !(h.init[0] <= h.init[1]) {
                return cfg(format!(
                    "hyperparameter `{}` has an invalid unit or init range",
                    h.name
                ));
            }
            if h.kind == Constraint::Scale && !(h.init[0] > 0.0) {
                return cfg(format!("scale `{}` needs a positive init range", h.name));
            }
        }
        match (&self.family, self.noise.is_some()) {
            (Family::Normal | Family::Weibull, false) => {
                return cfg("normal and Weibull likelihoods need a noise prior".into())
            }
            (Family::Binomial { .. } | Family::Poisson { .. }, true) => {
                return cfg("count likelihoods take no noise prior".into())
            }
            (Family::Binomial { trials: 0 }, _) | (Family::Poisson { truncation: 0 }, _) => {
                return cfg("count support must be at least 1".into())
            }
            _ => {}
        }
        if let Some(v) = &self.varying {
            if v.slope_column >= k || v.groups == 0 {
                return cfg("varying effects refer to a missing column or have no groups".into());
            }
            for (i, r) in self.design.iter().enumerate() {
                match r.group {
                    Some(gr) if gr < v.groups => {}
                    _ => return cfg(format!("design row {i} lacks a valid group index")),
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        let n = self.design.len();
        for t in &self.targets {
            if !seen.insert(t.id.as_str()) {
                return cfg(format!("duplicate target id `{}`", t.id));
            }
            t.technique.validate()?;
            let rows: Vec<usize> = match &t.quantity {
                Quantity::GroupMean { rows } => rows.clone(),
                Quantity::DifferenceOfGroupMeans { plus, minus } => {
                    if plus.is_empty() || minus.is_empty() {
                        return cfg(format!("target `{}` has an empty group", t.id));
                    }
                    plus.iter().chain(minus).copied().collect()
                }
                Quantity::DesignPointPrediction { row } => vec![*row],
                Quantity::RSquared { rows } => rows.clone().unwrap_or_default(),
                Quantity::GrandMean => vec![],
                Quantity::Parameter { name } => {
                    let known = self.coefficients.iter().any(|c| &c.name == name)
                        || (name == "s" || name == "noise") && self.noise.is_some()
                        || (name == "tau0" || name == "tau1") && self.varying.is_some();
                    if !known {
                        return cfg(format!("target `{}` names unknown parameter `{name}`", t.id));
                    }
                    vec![]
                }
            };
            if matches!(t.quantity, Quantity::GroupMean { .. }) && rows.is_empty() {
                return cfg(format!("target `{}` has an empty group", t.id));
            }
            if let Some(r) = rows.iter().find(|&&r| r >= n) {
                return cfg(format!("target `{}` refers to missing design row {r}", t.id));
            }
        }
        if self.targets.is_empty() {
            return cfg("no targets".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
