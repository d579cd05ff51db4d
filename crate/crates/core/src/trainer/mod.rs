//! Stochastic-gradient fitting of the hyperparameters.

mod objective;
mod trace;

pub use objective::{Evaluation, Objective};
pub use trace::{TraceRow, TrainingTrace};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elicitation::ExpertStats;
use crate::error::{Error, Result};
use crate::loss::{DwaState, KernelSpec};
use crate::models::ModelSpec;
use crate::samplers::{purpose, NoiseBank};

/// Where the optimizer starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Uniform draws inside each hyperparameter's range.
    #[default]
    Random,
    /// The model's true values.
    Truth,
    /// Explicit constrained values by name.
    Values { values: BTreeMap<String, f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub expert_samples: usize,
    pub model_samples: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub decay_rate: f64,
    pub decay_step: f64,
    pub dwa_temperature: f64,
    pub tau: f64,
    /// Overrides the Poisson truncation threshold of the model.
    pub truncation: Option<usize>,
    pub seed: u64,
    pub normalize: bool,
    pub init: Init,
    /// Constrained-space ranges replacing the model's own, by name.
    pub init_ranges: BTreeMap<String, [f64; 2]>,
    pub kernel: KernelSpec,
    /// Global 2-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Worker threads for batch simulation.
    pub jobs: usize,
    /// Keep per-batch graphs between the forward and backward pass while
    /// their total size stays under this many megabytes.
    pub retain_budget_mb: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1000,
            expert_samples: 300,
            model_samples: 200,
            lr_initial: 0.1,
            lr_min: 1e-5,
            decay_rate: 0.97,
            decay_step: 5.0,
            dwa_temperature: 1.6,
            tau: 1.0,
            truncation: None,
            seed: 2023,
            normalize: false,
            init: Init::Random,
            init_ranges: BTreeMap::new(),
            kernel: KernelSpec::Energy,
            clip_norm: Some(100.0),
            jobs: 1,
            retain_budget_mb: 512,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.expert_samples == 0 {
            return bad("batch_size, epochs and expert_samples must be at least 1".into());
        }
        if self.model_samples < 2 {
            return bad("model_samples must be at least 2".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_initial) {
            return bad(format!(
                "need 0 < lr_min <= lr_initial, got {} and {}",
                self.lr_min, self.lr_initial
            ));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate));
        }
        if !(self.decay_step > 0.0) {
            return bad(format!("decay_step must be positive, got {}", self.decay_step));
        }
        if !(self.dwa_temperature > 0.0) || !(self.tau > 0.0) {
            return bad("dwa_temperature and tau must be positive".into());
        }
        if self.truncation == Some(0) {
            return bad("truncation must be at least 1".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        for (name, [lo, hi]) in &self.init_ranges {
            if !(lo <= hi) {
                return bad(format!("init range for `{name}` is empty: [{lo}, {hi}]"));
            }
        }
        self.kernel.validate()
    }

    /// Sets a field from `key=value` text. Keys are dotted paths into the
    /// JSON form of the config; values parse as JSON, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = slot
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
            let last = i + 1 == parts.len();
            if i == 0 && !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config field `{part}`")));
            }
            if last {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            slot = obj
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            if slot.is_null() {
                *slot = serde_json::Value::Object(Default::default());
            }
        }
        let updated: TrainingConfig = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// `max(lr_min, lr_initial * decay_rate^(step / decay_step))`.
pub fn learning_rate(step: usize, cfg: &TrainingConfig) -> f64 {
    let lr = cfg.lr_initial * cfg.decay_rate.powf(step as f64 / cfg.decay_step);
    lr.max(cfg.lr_min)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != x.len() || x.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer of dimension {} given {} coordinates and {} gradients",
                self.m.len(),
                x.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(self.t as usize));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..x.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            x[k] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Mean of the constrained hyperparameters over the last 30 epochs.
pub fn final_lambda(trace: &TrainingTrace) -> Result<Vec<f64>> {
    if trace.rows.len() < 30 {
        return Err(Error::Config(format!(
            "final lambda averages 30 epochs but the trace has {}",
            trace.rows.len()
        )));
    }
    Ok(tail_mean(trace, 30))
}

fn tail_mean(trace: &TrainingTrace, window: usize) -> Vec<f64> {
    let tail = &trace.rows[trace.rows.len() - window..];
    let dim = trace.hyper_names.len();
    (0..dim)
        .map(|k| tail.iter().map(|r| r.lambda[k]).sum::<f64>() / window as f64)
        .collect()
}

/// `|learned - truth|` per hyperparameter, in the order of `learned`.
pub fn recovery_error(learned: &[(String, f64)], truth: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    if learned.len() != truth.len() {
        return Err(Error::Config(format!(
            "{} learned values but {} true values",
            learned.len(),
            truth.len()
        )));
    }
    learned
        .iter()
        .map(|(name, v)| {
            let t = truth
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("no true value for `{name}`")))?;
            Ok((name.clone(), (v - t.1).abs()))
        })
        .collect()
}

/// Starting point in unconstrained coordinates.
pub fn initial_point(spec: &ModelSpec, cfg: &TrainingConfig) -> Result<Vec<f64>> {
    let lambda = match &cfg.init {
        Init::Truth => spec.lambda_star().ok_or_else(|| {
            Error::Config(format!("model `{}` has no true hyperparameter values", spec.name))
        })?,
        Init::Values { values } => spec
            .hyperparameters
            .iter()
            .map(|h| {
                values
                    .get(&h.name)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("no initial value for `{}`", h.name)))
            })
            .collect::<Result<_>>()?,
        Init::Random => {
            for name in cfg.init_ranges.keys() {
                spec.hyper_index(name)?;
            }
            let mut rng = NoiseBank::new(cfg.seed, 0).rng(purpose("init"));
            spec.hyperparameters
                .iter()
                .map(|h| {
                    let [lo, hi] = cfg.init_ranges.get(&h.name).copied().unwrap_or(h.init);
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..hi)
                    }
                })
                .collect()
        }
    };
    spec.unconstrain(&lambda)
}

/// Result of [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub names: Vec<String>,
    /// Mean constrained values over the last 30 epochs, or over every epoch
    /// of a shorter run.
    pub lambda_final: Vec<f64>,
    pub trace: TrainingTrace,
}

impl FitOutcome {
    pub fn named_final(&self) -> Vec<(String, f64)> {
        self.names
            .iter()
            .cloned()
            .zip(self.lambda_final.iter().copied())
            .collect()
    }
}

pub fn fit(spec: &ModelSpec, expert: &ExpertStats, cfg: &TrainingConfig) -> Result<FitOutcome> {
    fit_with_observer(spec, expert, cfg, &mut |_| {})
}

/// [`fit`], calling `observer` after every epoch.
pub fn fit_with_observer(
    spec: &ModelSpec,
    expert: &ExpertStats,
    cfg: &TrainingConfig,
    observer: &mut dyn FnMut(&TraceRow),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let objective = Objective::new(spec, expert, cfg)?;
    let mut x = initial_point(spec, cfg)?;
    let mut adam = Adam::new(x.len());
    let ids = objective.component_ids();
    let mut dwa = DwaState::new(&ids, cfg.dwa_temperature);
    let mut trace = TrainingTrace::new(ids, spec.hyper_names());
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lambda = spec.constrain(&x);
        let lr = learning_rate(epoch, cfg);
        let weights = dwa.weights();
        let eval = objective.evaluate(&x, epoch, &weights, None, true)?;
        dwa.record(&eval.losses)?;
        let mut grad = eval.gradient;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(epoch));
        }
        let grad_abs: Vec<f64> = grad.iter().map(|g| g.abs()).collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clipped = matches!(cfg.clip_norm, Some(c) if norm > c);
        if clipped {
            let s = cfg.clip_norm.unwrap() / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        adam.step(&mut x, &grad, lr)?;
        let row = TraceRow {
            epoch,
            total_loss: eval.total,
            losses: eval.losses,
            weights,
            lambda,
            grad_abs,
            lr,
            clipped,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&row);
        trace.rows.push(row);
    }
    let lambda_final = tail_mean(&trace, trace.rows.len().min(30));
    Ok(FitOutcome {
        names: spec.hyper_names(),
        lambda_final,
        trace,
    })
}
