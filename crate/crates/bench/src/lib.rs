//! Shared setup for the benchmarks.

use elicit_core::models::builtin;
use elicit_core::studies::{case_config, ideal_expert};
use elicit_core::trainer::{Objective, TrainingConfig};
use elicit_core::Result;

/// An objective for a built-in case at reduced batch and sample sizes,
/// with the unconstrained true values and unit weights.
pub fn objective(
    case: &str,
    batch_size: usize,
    model_samples: usize,
) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let spec = builtin(case)?;
    let cfg = TrainingConfig {
        batch_size,
        model_samples,
        ..case_config(case)?
    };
    let truth = spec.lambda_star().expect("built-in cases carry true values");
    let expert = ideal_expert(&spec, &truth, &cfg)?;
    let obj = Objective::new(&spec, &expert, &cfg)?;
    let weights = vec![1.0; obj.component_ids().len()];
    Ok((obj, spec.unconstrain(&truth)?, weights))
}
