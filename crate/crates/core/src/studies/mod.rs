//! Scripted experiments: the case-study fits, the truncation sweep and the
//! inconsistent-expert scenarios.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elicitation::{
    perturb_expert, simulate_ideal_expert, write_expert_file, ExpertStats, Perturbation,
};
use crate::error::{Error, Result};
use crate::models::{builtin, ModelSpec, SimSettings};
use crate::trainer::{fit_with_observer, FitOutcome, TraceRow, TrainingConfig};

pub const CASE_NAMES: [&str; 5] = ["case1", "case2", "case3", "case4_normal", "case4_weibull"];

/// Truncation thresholds of the full sweep.
pub const THRESHOLDS: [usize; 6] = [5, 15, 30, 55, 110, 210];

/// Reference hyperparameters the inconsistent-expert scenarios start from.
pub const BENCHMARK: [(&str, f64); 7] = [
    ("mu0", 251.865),
    ("mu1", 30.962),
    ("sigma0", 9.367),
    ("sigma1", 5.991),
    ("omega0", 32.356),
    ("omega1", 22.766),
    ("nu", 0.040),
];

/// Default training settings of each case study.
pub fn case_config(name: &str) -> Result<TrainingConfig> {
    let base = TrainingConfig::default();
    let cfg = match name {
        "case1" => TrainingConfig {
            epochs: 1500,
            expert_samples: 300,
            model_samples: 200,
            lr_initial: 0.1,
            lr_min: 1e-5,
            decay_rate: 0.97,
            decay_step: 5.0,
            ..base
        },
        "case2" => TrainingConfig {
            epochs: 1000,
            expert_samples: 300,
            model_samples: 200,
            lr_initial: 0.01,
            lr_min: 1e-3,
            decay_rate: 0.95,
            decay_step: 18.0,
            ..base
        },
        "case3" => TrainingConfig {
            epochs: 600,
            expert_samples: 300,
            model_samples: 150,
            lr_initial: 0.1,
            lr_min: 1e-4,
            decay_rate: 0.95,
            decay_step: 7.0,
            ..base
        },
        "case4_normal" => TrainingConfig {
            epochs: 800,
            expert_samples: 200,
            model_samples: 200,
            lr_initial: 0.1,
            lr_min: 1e-3,
            decay_rate: 0.95,
            decay_step: 7.0,
            normalize: true,
            ..base
        },
        "case4_weibull" => TrainingConfig {
            epochs: 400,
            expert_samples: 200,
            model_samples: 200,
            lr_initial: 0.1,
            lr_min: 1e-4,
            decay_rate: 0.90,
            decay_step: 7.0,
            normalize: true,
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown case study `{other}` (expected one of {})",
                CASE_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterReport {
    pub name: String,
    pub true_value: Option<f64>,
    pub learned: f64,
    pub abs_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticReport {
    pub id: String,
    pub technique: String,
    pub expert: Vec<f64>,
    /// The same statistic simulated at the learned hyperparameters.
    pub model: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionFlag {
    pub name: String,
    pub benchmark: f64,
    pub learned: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub model: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Perturbation>,
    pub hyperparameters: Vec<HyperparameterReport>,
    pub statistics: Vec<StatisticReport>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds_per_epoch: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_error: Option<f64>,
    /// Mean absolute error over the location hyperparameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_error_locations: Option<f64>,
    /// Mean absolute error over the scale hyperparameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_error_scales: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub directions: Vec<DirectionFlag>,
}

impl StudyReport {
    pub fn learned(&self, name: &str) -> Option<f64> {
        self.hyperparameters
            .iter()
            .find(|h| h.name == name)
            .map(|h| h.learned)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Per-epoch callback receiving the fit's label and the new trace row.
pub type Progress<'a> = &'a mut dyn FnMut(&str, &TraceRow);

/// Where and how a study reports.
#[derive(Default)]
pub struct StudyContext<'a> {
    /// Root output directory; results go to `<root>/<study>/<seed>/`.
    pub out: Option<PathBuf>,
    /// Called after every epoch of every fit with the fit's label.
    pub progress: Option<Progress<'a>>,
}

impl StudyContext<'_> {
    fn dir(&self, study: &str, seed: u64) -> Result<Option<PathBuf>> {
        let Some(root) = &self.out else { return Ok(None) };
        let dir = root.join(study).join(seed.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Some(dir))
    }
}

/// Expert statistics of the ideal expert at `lambda`. The expert always
/// uses the model's own truncation threshold.
pub fn ideal_expert(spec: &ModelSpec, lambda: &[f64], cfg: &TrainingConfig) -> Result<ExpertStats> {
    let settings = SimSettings {
        replicates: cfg.expert_samples,
        tau: cfg.tau,
        truncation: None,
    };
    simulate_ideal_expert(spec, lambda, cfg.expert_samples, cfg.seed, &settings)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

/// Fits `spec` to `expert` and summarizes the outcome against `truth`.
#[allow(clippy::too_many_arguments)]
fn fit_and_report(
    study: &str,
    label: &str,
    spec: &ModelSpec,
    expert: &ExpertStats,
    truth: Option<&[f64]>,
    cfg: &TrainingConfig,
    ctx: &mut StudyContext<'_>,
    dir: Option<&Path>,
) -> Result<(StudyReport, FitOutcome)> {
    let outcome = match ctx.progress.as_mut() {
        Some(progress) => fit_with_observer(spec, expert, cfg, &mut |row| progress(label, row))?,
        None => fit_with_observer(spec, expert, cfg, &mut |_| {})?,
    };
    let settings = SimSettings {
        replicates: cfg.expert_samples,
        tau: cfg.tau,
        truncation: cfg.truncation,
    };
    let model_stats = simulate_ideal_expert(
        spec,
        &outcome.lambda_final,
        cfg.expert_samples,
        cfg.seed,
        &settings,
    )?;
    let hyperparameters: Vec<HyperparameterReport> = spec
        .hyperparameters
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let t = truth.map(|t| t[k]);
            let learned = outcome.lambda_final[k];
            HyperparameterReport {
                name: h.name.clone(),
                true_value: t,
                learned,
                abs_error: t.map(|t| (learned - t).abs()),
            }
        })
        .collect();
    let mean_of = |pick: &dyn Fn(usize) -> bool| -> Option<f64> {
        let errs: Vec<f64> = hyperparameters
            .iter()
            .enumerate()
            .filter(|(k, _)| pick(*k))
            .filter_map(|(_, h)| h.abs_error)
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    };
    let is_loc = |k: usize| spec.hyperparameters[k].kind == crate::models::Constraint::Location;
    let statistics = expert
        .statistics
        .iter()
        .map(|s| StatisticReport {
            id: s.id.clone(),
            technique: s.technique.tag().to_string(),
            expert: s.values.clone(),
            model: model_stats
                .get(&s.id)
                .map(|m| m.values.clone())
                .unwrap_or_default(),
        })
        .collect();
    let rows = &outcome.trace.rows;
    let report = StudyReport {
        study: study.to_string(),
        model: spec.name.clone(),
        seed: cfg.seed,
        epochs: rows.len(),
        truncation: cfg.truncation,
        scenario: None,
        mean_abs_error: mean_of(&|_| true),
        mean_abs_error_locations: mean_of(&|k| is_loc(k)),
        mean_abs_error_scales: mean_of(&|k| !is_loc(k)),
        hyperparameters,
        statistics,
        initial_loss: rows.first().map_or(f64::NAN, |r| r.total_loss),
        final_loss: rows.last().map_or(f64::NAN, |r| r.total_loss),
        seconds_per_epoch: outcome.trace.mean_seconds(),
        directions: Vec::new(),
    };
    if let Some(dir) = dir {
        let stem = if label == study {
            String::new()
        } else {
            format!("{label}_")
        };
        outcome.trace.write_csv(dir.join(format!("{stem}trace.csv")))?;
        outcome
            .trace
            .write_timing(dir.join(format!("{stem}timing.csv")))?;
        write_expert_file(dir.join(format!("{stem}expert.json")), expert)?;
    }
    Ok((report, outcome))
}

/// Simulates the ideal expert at the model's true values and fits.
pub fn run_case_study(name: &str, cfg: &TrainingConfig, ctx: &mut StudyContext<'_>) -> Result<StudyReport> {
    let spec = builtin(name)?;
    run_model_study(name, &spec, cfg, ctx)
}

/// [`run_case_study`] for any model with true values.
pub fn run_model_study(
    study: &str,
    spec: &ModelSpec,
    cfg: &TrainingConfig,
    ctx: &mut StudyContext<'_>,
) -> Result<StudyReport> {
    let truth = spec
        .lambda_star()
        .ok_or_else(|| Error::Config(format!("model `{}` has no true hyperparameter values", spec.name)))?;
    let expert = ideal_expert(spec, &truth, cfg)?;
    let dir = ctx.dir(study, cfg.seed)?;
    let (report, _) = fit_and_report(
        study,
        study,
        spec,
        &expert,
        Some(&truth),
        cfg,
        ctx,
        dir.as_deref(),
    )?;
    if let Some(dir) = dir {
        write_json(&dir.join("report.json"), &report.to_json()?)?;
    }
    Ok(report)
}

/// Refits case 3 with the model's truncation set to each threshold; the
/// expert keeps the model's own threshold throughout.
pub fn run_threshold_study(
    thresholds: &[usize],
    cfg: &TrainingConfig,
    ctx: &mut StudyContext<'_>,
) -> Result<Vec<StudyReport>> {
    if thresholds.is_empty() || thresholds.contains(&0) {
        return Err(Error::Config(
            "thresholds must be a non-empty list of positive integers".into(),
        ));
    }
    let spec = builtin("case3")?;
    let truth = spec.lambda_star().expect("case3 carries true values");
    let expert = ideal_expert(&spec, &truth, cfg)?;
    let dir = ctx.dir("threshold", cfg.seed)?;
    let mut reports = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let run = TrainingConfig {
            truncation: Some(t),
            ..cfg.clone()
        };
        let label = format!("tu{t}");
        let (report, _) = fit_and_report(
            "threshold",
            &label,
            &spec,
            &expert,
            Some(&truth),
            &run,
            ctx,
            dir.as_deref(),
        )?;
        reports.push(report);
    }
    if let Some(dir) = dir {
        write_json(&dir.join("report.json"), &serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(reports)
}

/// Fits case 4 (normal) to an expert simulated at [`BENCHMARK`] and then
/// perturbed. `None` runs the unperturbed benchmark.
pub fn run_inconsistency_study(
    scenario: Option<Perturbation>,
    cfg: &TrainingConfig,
    ctx: &mut StudyContext<'_>,
) -> Result<StudyReport> {
    let spec = builtin("case4_normal")?;
    let bench: Vec<f64> = spec
        .hyperparameters
        .iter()
        .map(|h| {
            BENCHMARK
                .iter()
                .find(|(n, _)| *n == h.name)
                .map(|(_, v)| *v)
                .expect("benchmark covers every case 4 hyperparameter")
        })
        .collect();
    let clean = ideal_expert(&spec, &bench, cfg)?;
    let expert = match scenario {
        Some(p) => perturb_expert(&clean, p, "s", &["r2_day0", "r2_day9"])?,
        None => clean,
    };
    let study = match scenario {
        Some(Perturbation::DoubleS) => "inconsistency-double-s",
        Some(Perturbation::HalveR2) => "inconsistency-halve-r2",
        None => "inconsistency-benchmark",
    };
    let dir = ctx.dir(study, cfg.seed)?;
    let (mut report, _) = fit_and_report(
        study,
        study,
        &spec,
        &expert,
        Some(&bench),
        cfg,
        ctx,
        dir.as_deref(),
    )?;
    report.scenario = scenario;
    report.directions = report
        .hyperparameters
        .iter()
        .map(|h| {
            let b = h.true_value.unwrap();
            let tol = 1e-3 * b.abs().max(1e-3);
            DirectionFlag {
                name: h.name.clone(),
                benchmark: b,
                learned: h.learned,
                direction: if h.learned > b + tol {
                    Direction::Up
                } else if h.learned < b - tol {
                    Direction::Down
                } else {
                    Direction::Same
                },
            }
        })
        .collect();
    if let Some(dir) = dir {
        write_json(&dir.join("report.json"), &report.to_json()?)?;
    }
    Ok(report)
}
