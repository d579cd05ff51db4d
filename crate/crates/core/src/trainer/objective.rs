use rayon::prelude::*;

use super::TrainingConfig;
use crate::diffcore::{Graph, Var};
use crate::elicitation::{ExpertStats, Technique};
use crate::error::{Error, Result};
use crate::loss::{self, Bounds, KernelSpec};
use crate::models::{ModelSpec, Plan, SimSettings};
use crate::samplers::NoiseBank;

#[derive(Clone, Debug)]
struct Component {
    id: String,
    technique: Technique,
    expert: Vec<f64>,
}

impl Component {
    fn is_histogram(&self) -> bool {
        matches!(self.technique, Technique::Histogram { .. })
    }
}

/// One batch element's simulation, kept alive for the backward pass.
struct Forward {
    g: Graph,
    x: Var,
    stats: Vec<Var>,
}

/// Loss value, per-component losses and the gradient with respect to the
/// unconstrained hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    pub losses: Vec<f64>,
    pub gradient: Vec<f64>,
    /// Normalization bounds used per component (`None` when disabled).
    pub bounds: Vec<Option<Bounds>>,
}

/// The total loss for fixed expert statistics, as a function of the
/// unconstrained hyperparameters and the epoch (which picks the noise).
///
/// Every batch element is simulated on its own graph. The statistics of all
/// elements feed a small outer graph holding the discrepancies; its
/// adjoints are then pushed back through each element's graph, either kept
/// from the forward pass or rebuilt from the same noise when keeping them
/// all would exceed the memory budget.
pub struct Objective {
    spec: ModelSpec,
    plan: Plan,
    settings: SimSettings,
    components: Vec<Component>,
    kernel: KernelSpec,
    batch: usize,
    seed: u64,
    normalize: bool,
    retain_budget: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Objective {
    pub fn new(spec: &ModelSpec, expert: &ExpertStats, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = Plan::new(spec)?;
        let missing: Vec<&str> = spec
            .targets
            .iter()
            .filter(|t| expert.get(&t.id).is_none())
            .map(|t| t.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "expert input lacks statistics for: {}",
                missing.join(", ")
            )));
        }
        let extra: Vec<&str> = expert
            .statistics
            .iter()
            .filter(|s| !spec.targets.iter().any(|t| t.id == s.id))
            .map(|s| s.id.as_str())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!(
                "expert input has statistics the model does not define: {}",
                extra.join(", ")
            )));
        }
        let mut components = Vec::with_capacity(spec.targets.len());
        for t in &spec.targets {
            let s = expert.get(&t.id).unwrap();
            if s.technique.tag() != t.technique.tag() {
                return Err(Error::Config(format!(
                    "statistic `{}` is {} in the expert input but {} in the model",
                    t.id,
                    s.technique.tag(),
                    t.technique.tag()
                )));
            }
            if let Technique::Histogram { .. } = t.technique {
                if s.values.is_empty() {
                    return Err(Error::Config(format!("histogram `{}` is empty", t.id)));
                }
            } else {
                let w = t.technique.width(cfg.model_samples);
                if s.values.len() != w || s.technique != t.technique {
                    return Err(Error::Config(format!(
                        "statistic `{}` has {} values but the model produces {w}",
                        t.id,
                        s.values.len()
                    )));
                }
            }
            components.push(Component {
                id: t.id.clone(),
                technique: t.technique.clone(),
                expert: s.values.clone(),
            });
        }
        let pool = if cfg.jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.jobs)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            plan,
            settings: SimSettings {
                replicates: cfg.model_samples,
                tau: cfg.tau,
                truncation: cfg.truncation,
            },
            components,
            kernel: cfg.kernel.clone(),
            batch: cfg.batch_size,
            seed: cfg.seed,
            normalize: cfg.normalize,
            retain_budget: cfg.retain_budget_mb.saturating_mul(1 << 20),
            pool,
        })
    }

    pub fn component_ids(&self) -> Vec<String> {
        self.components.iter().map(|c| c.id.clone()).collect()
    }

    fn forward(&self, x: &[f64], epoch: usize, b: usize) -> Result<Forward> {
        let mut g = Graph::new();
        let xv = g.input(&[x.len()], x.to_vec())?;
        let lambda = self.spec.constrain_graph(&mut g, xv)?;
        let noise = NoiseBank::training(self.seed, epoch, b);
        let targets = self.plan.simulate(&mut g, &lambda, &noise, &self.settings)?;
        let stats = self
            .components
            .iter()
            .zip(targets)
            .map(|(c, t)| c.technique.apply(&mut g, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Forward { g, x: xv, stats })
    }

    fn map_batch<T: Send>(&self, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        match &self.pool {
            Some(pool) => pool.install(|| (0..self.batch).into_par_iter().map(&f).collect()),
            None => (0..self.batch).map(f).collect(),
        }
    }

    /// Evaluates the total loss `sum_m weights[m] L_m` at `x`. Supplying
    /// `bounds` freezes the normalization maps; otherwise they come from
    /// the model-side values of this evaluation.
    pub fn evaluate(
        &self,
        x: &[f64],
        epoch: usize,
        weights: &[f64],
        bounds: Option<&[Option<Bounds>]>,
        with_gradient: bool,
    ) -> Result<Evaluation> {
        let m = self.components.len();
        if weights.len() != m || x.len() != self.spec.hyperparameters.len() {
            return Err(Error::Config(format!(
                "objective over {} hyperparameters and {m} components given {} and {}",
                self.spec.hyperparameters.len(),
                x.len(),
                weights.len()
            )));
        }

        // Forward pass over the batch.
        let first = self.forward(x, epoch, 0)?;
        let retain =
            with_gradient && first.g.stored_values().saturating_mul(8 * self.batch) <= self.retain_budget;
        let values_of =
            |f: &Forward| -> Vec<Vec<f64>> { f.stats.iter().map(|s| f.g.value(*s).to_vec()).collect() };
        let mut values = vec![values_of(&first)];
        let mut kept: Vec<Option<Forward>> = Vec::new();
        let rest = self.map_batch(|b| {
            if b == 0 {
                return Ok((Vec::new(), None));
            }
            let f = self.forward(x, epoch, b)?;
            let v = values_of(&f);
            Ok((v, retain.then_some(f)))
        })?;
        kept.push(retain.then_some(first));
        for (v, f) in rest.into_iter().skip(1) {
            values.push(v);
            kept.push(f);
        }

        // Discrepancies on a graph whose leaves are the statistics.
        let mut outer = Graph::new();
        let mut leaves: Vec<Vec<Var>> = Vec::with_capacity(m);
        let mut losses = Vec::with_capacity(m);
        let mut used_bounds = Vec::with_capacity(m);
        for (k, c) in self.components.iter().enumerate() {
            let bound = if let Some(frozen) = bounds {
                frozen.get(k).copied().flatten()
            } else if self.normalize {
                let all: Vec<f64> = values.iter().flat_map(|v| v[k].iter().copied()).collect();
                Some(Bounds::from_values(&all).ok_or_else(|| Error::NonFiniteLoss(c.id.clone()))?)
            } else {
                None
            };
            used_bounds.push(bound);
            let map = |g: &mut Graph, v: Var| -> Result<Var> {
                match bound {
                    Some(b) => b.apply_graph(g, v),
                    None => Ok(v),
                }
            };
            let (lv, loss) = if c.is_histogram() {
                let e = outer.constant(&[c.expert.len(), 1], c.expert.clone())?;
                let e = map(&mut outer, e)?;
                let mut lv = Vec::with_capacity(self.batch);
                let mut acc = outer.constant_scalar(0.0)?;
                for v in &values {
                    let leaf = outer.input(&[v[k].len(), 1], v[k].clone())?;
                    let t = map(&mut outer, leaf)?;
                    let d = loss::mmd2_biased(&mut outer, t, e, &self.kernel)?;
                    acc = outer.add(acc, d)?;
                    lv.push(leaf);
                }
                (lv, outer.scale(acc, 1.0 / self.batch as f64)?)
            } else {
                let w = c.expert.len();
                let e = outer.constant(&[1, w], c.expert.clone())?;
                let e = map(&mut outer, e)?;
                let data: Vec<f64> = values.iter().flat_map(|v| v[k].iter().copied()).collect();
                let leaf = outer.input(&[self.batch, w], data)?;
                let t = map(&mut outer, leaf)?;
                (vec![leaf], loss::mmd2_biased(&mut outer, t, e, &self.kernel)?)
            };
            let value = outer.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(c.id.clone()));
            }
            losses.push(loss);
            leaves.push(lv);
        }
        let pairs: Vec<(f64, Var)> = weights.iter().copied().zip(losses.iter().copied()).collect();
        let total = loss::total_loss(&mut outer, &pairs)?;
        let total_value = outer.scalar(total);
        let loss_values: Vec<f64> = losses.iter().map(|l| outer.scalar(*l)).collect();
        if !with_gradient {
            return Ok(Evaluation {
                total: total_value,
                losses: loss_values,
                gradient: vec![0.0; x.len()],
                bounds: used_bounds,
            });
        }

        // Adjoints of the statistics, split per batch element.
        let all_leaves: Vec<Var> = leaves.iter().flatten().copied().collect();
        let grads = outer.gradient(total, &all_leaves)?;
        let seeds: Vec<Vec<Vec<f64>>> = (0..self.batch)
            .map(|b| {
                self.components
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        if c.is_histogram() {
                            grads.get(leaves[k][b]).to_vec()
                        } else {
                            let w = c.expert.len();
                            grads.get(leaves[k][0])[b * w..(b + 1) * w].to_vec()
                        }
                    })
                    .collect()
            })
            .collect();

        // Backward through each batch element.
        let kept: Vec<std::sync::Mutex<Option<Forward>>> =
            kept.into_iter().map(std::sync::Mutex::new).collect();
        let per_batch = self.map_batch(|b| {
            let taken = kept[b].lock().unwrap().take();
            let mut f = match taken {
                Some(f) => f,
                None => self.forward(x, epoch, b)?,
            };
            let mut acc = f.g.constant_scalar(0.0)?;
            for (s, seed) in f.stats.iter().zip(&seeds[b]) {
                let shape = f.g.shape(*s).to_vec();
                let c = f.g.constant(&shape, seed.clone())?;
                let p = f.g.mul(*s, c)?;
                let p = f.g.sum_all(p)?;
                acc = f.g.add(acc, p)?;
            }
            Ok(f.g.gradient(acc, &[f.x])?.get(f.x).to_vec())
        })?;
        let mut gradient = vec![0.0; x.len()];
        for g in &per_batch {
            for (a, v) in gradient.iter_mut().zip(g) {
                *a += v;
            }
        }
        Ok(Evaluation {
            total: total_value,
            losses: loss_values,
            gradient,
            bounds: used_bounds,
        })
    }
}
