use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExpertStats, Statistic, Technique};
use crate::error::{Error, Result};

/// On-disk form of one statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticRecord {
    pub id: String,
    pub technique: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFile {
    pub model: String,
    pub seed: u64,
    pub statistics: Vec<StatisticRecord>,
}

impl From<&ExpertStats> for ExpertFile {
    fn from(e: &ExpertStats) -> Self {
        ExpertFile {
            model: e.model.clone(),
            seed: e.seed,
            statistics: e
                .statistics
                .iter()
                .map(|s| StatisticRecord {
                    id: s.id.clone(),
                    technique: s.technique.tag().to_string(),
                    probs: match &s.technique {
                        Technique::Quantiles { probs } => Some(probs.clone()),
                        _ => None,
                    },
                    values: s.values.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ExpertFile> for ExpertStats {
    type Error = Error;

    fn try_from(f: ExpertFile) -> Result<Self> {
        let mut statistics = Vec::with_capacity(f.statistics.len());
        for (i, r) in f.statistics.into_iter().enumerate() {
            let at = format!("statistics[{i}] (`{}`)", r.id);
            let technique = match r.technique.as_str() {
                "quantiles" => Technique::Quantiles {
                    probs: r.probs.clone().unwrap_or_else(|| super::DEFAULT_PROBS.to_vec()),
                },
                "moments" => Technique::Moments,
                "histogram" => Technique::Histogram { cap: None },
                other => {
                    return Err(Error::Parse(format!("{at}: unknown technique `{other}`")));
                }
            };
            technique
                .validate()
                .map_err(|e| Error::Parse(format!("{at}: {e}")))?;
            let want = match &technique {
                Technique::Quantiles { probs } => Some(probs.len()),
                Technique::Moments => Some(2),
                Technique::Histogram { .. } => None,
            };
            if let Some(w) = want {
                if r.values.len() != w {
                    return Err(Error::Parse(format!(
                        "{at}: expected {w} values, found {}",
                        r.values.len()
                    )));
                }
            }
            if r.values.is_empty() || r.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("{at}: values must be finite and non-empty")));
            }
            statistics.push(Statistic {
                id: r.id,
                technique,
                values: r.values,
                rows: 1,
            });
        }
        Ok(ExpertStats {
            model: f.model,
            seed: f.seed,
            statistics,
        })
    }
}

/// Parses an expert file, reporting the offending statistic on failure.
pub fn parse_expert(text: &str) -> Result<ExpertStats> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(items) = raw.get("statistics").and_then(|s| s.as_array()) {
        for (i, item) in items.iter().enumerate() {
            let id = item.get("id").and_then(|v| v.as_str()).unwrap_or("<no id>");
            for field in ["id", "technique", "values"] {
                if item.get(field).is_none() {
                    return Err(Error::Parse(format!(
                        "statistics[{i}] (`{id}`): missing field `{field}`"
                    )));
                }
            }
        }
    }
    let file: ExpertFile = serde_json::from_value(raw).map_err(|e| Error::Parse(e.to_string()))?;
    file.try_into()
}

pub fn read_expert_file(path: impl AsRef<Path>) -> Result<ExpertStats> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_expert(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.as_ref().display())),
        other => other,
    })
}

/// Writes with full double precision (serde_json prints shortest round-trip
/// representations, so values survive a write/read cycle bit-exactly).
pub fn write_expert_file(path: impl AsRef<Path>, stats: &ExpertStats) -> Result<()> {
    let text = serde_json::to_string_pretty(&ExpertFile::from(stats))?;
    std::fs::write(path.as_ref(), text + "\n").map_err(|e| Error::io(&path, e))
}
