//! Kernels, the biased squared MMD, per-component normalization and
//! dynamic weight averaging.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, PairKernel, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    #[default]
    Energy,
    GaussianMixture {
        bandwidths: Vec<f64>,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::GaussianMixture { bandwidths } = self {
            if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::Config(
                    "gaussian-mixture kernel needs at least one positive bandwidth".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn pair_kernel(&self) -> PairKernel {
        match self {
            KernelSpec::Energy => PairKernel::Energy,
            KernelSpec::GaussianMixture { bandwidths } => PairKernel::GaussianMixture(bandwidths.clone()),
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DiffError::ShapeMismatch {
            op: "kernel_eval",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        }
        .into());
    }
    spec.validate()?;
    Ok(spec.pair_kernel().eval(x, y))
}

/// Biased squared MMD between the rows of `x: (n, d)` and `y: (m, d)`.
pub fn mmd2_biased(g: &mut Graph, x: Var, y: Var, spec: &KernelSpec) -> Result<Var> {
    spec.validate()?;
    let k = spec.pair_kernel();
    let xx = g.pairwise_kernel_mean(x, x, k.clone())?;
    let yy = g.pairwise_kernel_mean(y, y, k.clone())?;
    let xy = g.pairwise_kernel_mean(x, y, k)?;
    let s = g.add(xx, yy)?;
    let xy2 = g.scale(xy, 2.0)?;
    Ok(g.sub(s, xy2)?)
}

/// Plain-number form of [`mmd2_biased`] for row-major inputs.
pub fn mmd2_values(x: &[f64], y: &[f64], d: usize, spec: &KernelSpec) -> Result<f64> {
    if d == 0 || !x.len().is_multiple_of(d) || !y.len().is_multiple_of(d) {
        return Err(Error::Config(format!(
            "inputs of length {} and {} do not split into rows of {d}",
            x.len(),
            y.len()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(&[x.len() / d, d], x.to_vec())?;
    let yv = g.constant(&[y.len() / d, d], y.to_vec())?;
    let out = mmd2_biased(&mut g, xv, yv, spec)?;
    Ok(g.scalar(out))
}

/// Affine map fixed from the model-side range, sending `min` to 0 and
/// `max` to 1. A range narrower than `1e-12` maps everything to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn from_values(values: &[f64]) -> Option<Bounds> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min.is_finite() && max.is_finite()).then_some(Bounds { min, max })
    }

    fn coefficients(&self) -> (f64, f64) {
        let range = self.max - self.min;
        if range < 1e-12 {
            (0.0, 0.0)
        } else {
            (1.0 / range, -self.min / range)
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        let (a, b) = self.coefficients();
        a * v + b
    }

    /// Applies the map on the graph; the bounds carry no gradient.
    pub fn apply_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = self.coefficients();
        let y = g.scale(x, a)?;
        Ok(g.shift(y, b)?)
    }
}

pub fn normalize_pair(model: &[f64], expert: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match Bounds::from_values(model) {
        Some(b) => (
            model.iter().map(|&v| b.apply(v)).collect(),
            expert.iter().map(|&v| b.apply(v)).collect(),
        ),
        None => (vec![0.0; model.len()], vec![0.0; expert.len()]),
    }
}

/// `alpha_m = M' exp(gamma_m / a) / sum exp(gamma / a)` with
/// `gamma_m = previous_m / initial_m`, over the `M'` components with a
/// positive initial loss. The others get weight 1.
pub fn dwa_weights(initial: &[f64], previous: &[f64], a: f64) -> Result<Vec<f64>> {
    if initial.len() != previous.len() {
        return Err(Error::Config(format!(
            "{} initial losses but {} previous losses",
            initial.len(),
            previous.len()
        )));
    }
    if !(a > 0.0) {
        return Err(Error::Config(format!(
            "DWA temperature must be positive, got {a}"
        )));
    }
    let mut weights = vec![1.0; initial.len()];
    let active: Vec<usize> = (0..initial.len())
        .filter(|&m| {
            let ok = initial[m] > 0.0 && initial[m].is_finite() && previous[m].is_finite();
            if !ok {
                log::warn!(
                    "loss component {m} has initial loss {}; excluded from weighting",
                    initial[m]
                );
            }
            ok
        })
        .collect();
    if active.is_empty() {
        return Ok(weights);
    }
    let z: Vec<f64> = active.iter().map(|&m| previous[m] / initial[m] / a).collect();
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = e.iter().sum();
    for (&m, ei) in active.iter().zip(&e) {
        weights[m] = active.len() as f64 * ei / total;
    }
    Ok(weights)
}

/// `sum_m alpha_m L_m` with the weights held constant.
pub fn total_loss(g: &mut Graph, components: &[(f64, Var)]) -> Result<Var> {
    if let Some((w, _)) = components.iter().find(|(w, _)| !(*w >= 0.0)) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got {w}"
        )));
    }
    let mut acc = g.constant_scalar(0.0)?;
    for &(w, l) in components {
        let t = g.scale(l, w)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Running record of one loss component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponentState {
    pub id: String,
    pub initial: Option<f64>,
    pub previous: Option<f64>,
    pub weight: f64,
    pub bounds: Option<Bounds>,
}

impl LossComponentState {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            initial: None,
            previous: None,
            weight: 1.0,
            bounds: None,
        }
    }
}

/// Per-epoch weighting over all components. Weights stay at 1 until one
/// epoch of losses has been recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct DwaState {
    pub components: Vec<LossComponentState>,
    pub temperature: f64,
}

impl DwaState {
    pub fn new(ids: &[String], temperature: f64) -> Self {
        Self {
            components: ids.iter().map(LossComponentState::new).collect(),
            temperature,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Records one epoch's component losses and recomputes the weights used
    /// by the next epoch.
    pub fn record(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.components.len() {
            return Err(Error::Config(format!(
                "{} losses for {} components",
                losses.len(),
                self.components.len()
            )));
        }
        for (c, &l) in self.components.iter_mut().zip(losses) {
            c.initial.get_or_insert(l);
            c.previous = Some(l);
        }
        let initial: Vec<f64> = self.components.iter().map(|c| c.initial.unwrap()).collect();
        let weights = dwa_weights(&initial, losses, self.temperature)?;
        for (c, w) in self.components.iter_mut().zip(weights) {
            c.weight = w;
        }
        Ok(())
    }
}
