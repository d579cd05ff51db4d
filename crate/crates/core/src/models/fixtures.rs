//! The built-in case-study models.

use super::*;

fn loc(name: &str, init: [f64; 2], unit: f64, truth: f64) -> Hyperparameter {
    Hyperparameter {
        name: name.into(),
        kind: Constraint::Location,
        unit,
        init,
        true_value: Some(truth),
    }
}

fn scale(name: &str, init: [f64; 2], unit: f64, truth: f64) -> Hyperparameter {
    Hyperparameter {
        kind: Constraint::Scale,
        ..loc(name, init, unit, truth)
    }
}

fn coef(k: usize) -> CoefficientPrior {
    CoefficientPrior {
        name: format!("beta{k}"),
        mu: format!("mu{k}"),
        sigma: format!("sigma{k}"),
    }
}

fn target(id: &str, quantity: Quantity, technique: Technique) -> TargetSpec {
    TargetSpec {
        id: id.into(),
        quantity,
        technique,
    }
}

/// 2 x 3 factorial with treatment contrasts. Factor `rep` has levels
/// new (reference) and repeated; factor `enc` has levels shallow
/// (reference), standard and deep.
pub fn case1() -> ModelSpec {
    const ENC: [&str; 3] = ["shallow", "standard", "deep"];
    const REP: [&str; 2] = ["new", "repeated"];
    let cell = |rep: usize, enc: usize| rep * 3 + enc;
    let mut design = Vec::new();
    for rep in 0..2 {
        for enc in 0..3 {
            let (r, s, d) = (rep as f64, (enc == 1) as u8 as f64, (enc == 2) as u8 as f64);
            design.push(DesignRow {
                label: Some(format!("{}/{}", REP[rep], ENC[enc])),
                x: vec![1.0, r, s, d, r * s, r * d],
                repeat: 50,
                group: None,
            });
        }
    }
    let mut targets = Vec::new();
    for (e, name) in ENC.iter().enumerate() {
        targets.push(target(
            &format!("enc_{name}"),
            Quantity::GroupMean {
                rows: vec![cell(0, e), cell(1, e)],
            },
            Technique::quantiles(),
        ));
    }
    for (r, name) in REP.iter().enumerate() {
        targets.push(target(
            &format!("rep_{name}"),
            Quantity::GroupMean {
                rows: (0..3).map(|e| cell(r, e)).collect(),
            },
            Technique::quantiles(),
        ));
    }
    for (e, name) in ENC.iter().enumerate() {
        targets.push(target(
            &format!("diff_{name}"),
            Quantity::DifferenceOfGroupMeans {
                plus: vec![cell(1, e)],
                minus: vec![cell(0, e)],
            },
            Technique::quantiles(),
        ));
    }
    targets.push(target(
        "r2",
        Quantity::RSquared { rows: None },
        Technique::histogram(),
    ));
    targets.push(target("grand_mean", Quantity::GrandMean, Technique::histogram()));

    let truth = [
        (0.12, 0.02),
        (0.15, 0.02),
        (-0.02, 0.06),
        (-0.03, 0.06),
        (-0.02, 0.03),
        (-0.04, 0.03),
    ];
    let mut hyperparameters = Vec::new();
    for (k, (m, s)) in truth.iter().enumerate() {
        hyperparameters.push(loc(&format!("mu{k}"), [-0.5, 0.5], 1.0, *m));
        hyperparameters.push(scale(&format!("sigma{k}"), [0.01, 0.2], 0.1, *s));
    }
    hyperparameters.push(scale("nu", [2.0, 20.0], 1.0, 9.0));
    ModelSpec {
        name: "case1".into(),
        description: "Normal linear model on a 2x3 factorial design with 50 observations per cell".into(),
        family: Family::Normal,
        link: Link::Identity,
        design,
        scaling: vec![],
        coefficients: (0..6).map(coef).collect(),
        noise: Some(NoisePrior { rate: "nu".into() }),
        varying: None,
        hyperparameters,
        targets,
    }
}

/// Binomial regression with `T = 100` trials on a single count predictor.
pub fn case2() -> ModelSpec {
    let xs = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
    let design = xs
        .iter()
        .map(|&x| DesignRow {
            label: Some(format!("x={x}")),
            x: vec![1.0, x],
            repeat: 1,
            group: None,
        })
        .collect();
    let targets = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            target(
                &format!("y_x{x}"),
                Quantity::DesignPointPrediction { row: i },
                Technique::quantiles(),
            )
        })
        .collect();
    ModelSpec {
        name: "case2".into(),
        description: "Binomial (logit link) model with T = 100 and seven design points".into(),
        family: Family::Binomial { trials: 100 },
        link: Link::Logit,
        design,
        scaling: vec![Scaling::DivideBySd { column: 1 }],
        coefficients: (0..2).map(coef).collect(),
        noise: None,
        varying: None,
        hyperparameters: vec![
            loc("mu0", [-2.0, 2.0], 1.0, -0.51),
            scale("sigma0", [0.01, 0.2], 0.1, 0.06),
            loc("mu1", [-2.0, 2.0], 1.0, 0.26),
            scale("sigma1", [0.01, 0.2], 0.1, 0.04),
        ],
        targets,
    }
}

/// State indices whose predictive counts are elicited as histograms.
pub const CASE3_HISTOGRAM_STATES: [usize; 6] = [0, 10, 16, 21, 34, 43];

/// Synthetic 49-unit design: percent urban population spread over
/// 38.7..94.7 and a three-level group factor (reference `dem`).
pub fn case3_design() -> Vec<DesignRow> {
    (0..49)
        .map(|i| {
            let urban = 38.7 + 56.0 * ((i * 29) % 49) as f64 / 48.0;
            let group = match i % 7 {
                0..=2 => "rep",
                3 | 4 => "dem",
                _ => "swing",
            };
            let (rep, swing) = ((group == "rep") as u8 as f64, (group == "swing") as u8 as f64);
            DesignRow {
                label: Some(format!("unit{i}/{group}")),
                x: vec![1.0, urban, rep, swing],
                repeat: 1,
                group: None,
            }
        })
        .collect()
}

/// Poisson regression with a standardized continuous predictor and a
/// three-level factor; counts are truncated at `t_u = 110`.
pub fn case3() -> ModelSpec {
    let design = case3_design();
    let rows_of = |tag: &str| -> Vec<usize> {
        design
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label.as_deref().unwrap().ends_with(tag))
            .map(|(i, _)| i)
            .collect()
    };
    let mut targets = Vec::new();
    for tag in ["dem", "rep", "swing"] {
        targets.push(target(
            &format!("{tag}_mean"),
            Quantity::GroupMean { rows: rows_of(tag) },
            Technique::quantiles(),
        ));
    }
    for &i in &CASE3_HISTOGRAM_STATES {
        targets.push(target(
            &format!("unit{i}"),
            Quantity::DesignPointPrediction { row: i },
            Technique::histogram(),
        ));
    }
    let truth = [(2.91, 0.07), (0.23, 0.05), (-1.51, 0.135), (-0.61, 0.105)];
    let mut hyperparameters = Vec::new();
    for (k, (m, s)) in truth.iter().enumerate() {
        hyperparameters.push(loc(&format!("mu{k}"), [-2.0, 2.0], 1.0, *m));
        hyperparameters.push(scale(&format!("sigma{k}"), [0.01, 0.3], 0.1, *s));
    }
    hyperparameters[0].init = [1.0, 4.0];
    ModelSpec {
        name: "case3".into(),
        description: "Poisson (log link) model with a standardized predictor and a three-level factor".into(),
        family: Family::Poisson { truncation: 110 },
        link: Link::Log,
        design,
        scaling: vec![Scaling::Standardize { column: 1 }],
        coefficients: (0..4).map(coef).collect(),
        noise: None,
        varying: None,
        hyperparameters,
        targets,
    }
}

pub const CASE4_DAYS: [usize; 6] = [0, 2, 4, 6, 8, 9];

fn case4_common(name: &str, family: Family, link: Link, hyperparameters: Vec<Hyperparameter>) -> ModelSpec {
    let persons = 100;
    let mut design = Vec::with_capacity(persons * 10);
    for j in 0..persons {
        for d in 0..10 {
            design.push(DesignRow {
                label: None,
                x: vec![1.0, d as f64],
                repeat: 1,
                group: Some(j),
            });
        }
    }
    let day_rows = |d: usize| (0..persons).map(|j| j * 10 + d).collect::<Vec<_>>();
    let mut targets: Vec<TargetSpec> = CASE4_DAYS
        .iter()
        .map(|&d| {
            target(
                &format!("day{d}"),
                Quantity::GroupMean { rows: day_rows(d) },
                Technique::quantiles(),
            )
        })
        .collect();
    for d in [0, 9] {
        targets.push(target(
            &format!("r2_day{d}"),
            Quantity::RSquared {
                rows: Some(day_rows(d)),
            },
            Technique::histogram(),
        ));
    }
    targets.push(target(
        "s",
        Quantity::Parameter { name: "s".into() },
        Technique::Moments,
    ));
    ModelSpec {
        name: name.into(),
        description: String::new(),
        family,
        link,
        design,
        scaling: vec![Scaling::DivideBySd { column: 1 }],
        coefficients: vec![
            CoefficientPrior {
                name: "beta0".into(),
                mu: "mu0".into(),
                sigma: "sigma0".into(),
            },
            CoefficientPrior {
                name: "beta1".into(),
                mu: "mu1".into(),
                sigma: "sigma1".into(),
            },
        ],
        noise: Some(NoisePrior { rate: "nu".into() }),
        varying: Some(VaryingEffects {
            groups: persons,
            slope_column: 1,
            omega0: "omega0".into(),
            omega1: "omega1".into(),
        }),
        hyperparameters,
        targets,
    }
}

/// Hierarchical normal model: 100 persons observed on days 0..9 with
/// correlated varying intercepts and slopes.
pub fn case4_normal() -> ModelSpec {
    let mut m = case4_common(
        "case4_normal",
        Family::Normal,
        Link::Identity,
        vec![
            loc("mu0", [200.0, 300.0], 100.0, 250.40),
            loc("mu1", [0.0, 60.0], 10.0, 30.26),
            scale("sigma0", [1.0, 20.0], 10.0, 7.27),
            scale("sigma1", [1.0, 20.0], 10.0, 4.82),
            scale("omega0", [5.0, 60.0], 10.0, 33.0),
            scale("omega1", [5.0, 60.0], 10.0, 23.0),
            scale("nu", [0.01, 0.2], 0.01, 0.04),
        ],
    );
    m.description = "Hierarchical normal model, 100 persons x 10 days, varying intercepts and slopes".into();
    m
}

/// Hierarchical Weibull model (log link) on the same design; the mean of
/// every observation equals the inverse-linked predictor.
pub fn case4_weibull() -> ModelSpec {
    let mut m = case4_common(
        "case4_weibull",
        Family::Weibull,
        Link::Log,
        vec![
            loc("mu0", [4.5, 6.5], 1.0, 5.52),
            loc("mu1", [-0.5, 0.5], 1.0, 0.10),
            scale("sigma0", [0.005, 0.2], 0.1, 0.03),
            scale("sigma1", [0.005, 0.2], 0.1, 0.02),
            scale("omega0", [0.01, 0.5], 0.1, 0.15),
            scale("omega1", [0.01, 0.5], 0.1, 0.09),
            scale("nu", [0.01, 0.3], 0.01, 0.069),
        ],
    );
    m.description = "Hierarchical Weibull model, 100 persons x 10 days, varying intercepts and slopes".into();
    m
}

pub fn builtin_names() -> [&'static str; 5] {
    ["case1", "case2", "case3", "case4_normal", "case4_weibull"]
}

pub fn builtin(name: &str) -> Result<ModelSpec> {
    match name {
        "case1" => Ok(case1()),
        "case2" => Ok(case2()),
        "case3" => Ok(case3()),
        "case4_normal" => Ok(case4_normal()),
        "case4_weibull" => Ok(case4_weibull()),
        other => Err(Error::Config(format!(
            "unknown model `{other}` (built-in models: {})",
            builtin_names().join(", ")
        ))),
    }
}

pub fn builtin_models() -> Vec<ModelSpec> {
    builtin_names().iter().map(|n| builtin(n).unwrap()).collect()
}
