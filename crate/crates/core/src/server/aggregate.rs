use serde::{Deserialize, Serialize};

use super::{Result, ServerError, TaskResult};
use crate::model::{FLModel, ParamMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight each result by its `num_samples`.
    #[default]
    SampleCount,
    Uniform,
}

/// Elementwise weighted mean of the OK results' parameters.
///
/// Results are accumulated in `f64` in client-name order, so the output does not depend on
/// the order of `results`. Each parameter is cast back to its dtype at the end.
pub fn aggregate_weighted(results: &[TaskResult], weighting: Weighting) -> Result<ParamMap> {
    let mut models: Vec<(&str, &FLModel)> = results
        .iter()
        .filter_map(|r| Some((r.client_name.as_str(), r.payload.as_ref().filter(|_| r.is_ok())?)))
        .collect();
    if models.is_empty() {
        return Err(ServerError::EmptyResults);
    }
    models.sort_by(|a, b| a.0.cmp(b.0));

    let reference = &models[0].1.params;
    for (name, m) in &models[1..] {
        if m.params.len() != reference.len() {
            return Err(ServerError::ShapeMismatch(format!(
                "{name} sent {} parameters, expected {}",
                m.params.len(),
                reference.len()
            )));
        }
        for (key, t) in &m.params {
            match reference.get(key) {
                Some(r) if r.same_layout(t) => {}
                Some(_) => {
                    return Err(ServerError::ShapeMismatch(format!("{name}: {key} layout differs")))
                }
                None => {
                    return Err(ServerError::ShapeMismatch(format!("{name}: unexpected {key}")))
                }
            }
        }
    }

    let weights: Vec<f64> = models
        .iter()
        .map(|(_, m)| match weighting {
            Weighting::SampleCount => m.num_samples as f64,
            Weighting::Uniform => 1.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(ServerError::ZeroTotalWeight);
    }

    let mut out = ParamMap::new();
    for (key, template) in reference {
        let mut acc = vec![0.0f64; template.len()];
        for ((_, m), &w) in models.iter().zip(&weights) {
            if w == 0.0 {
                continue;
            }
            let share = w / total;
            for (a, v) in acc.iter_mut().zip(m.params[key].to_f64_vec()) {
                *a += share * v;
            }
        }
        out.insert(key.clone(), template.with_f64_values(acc)?);
    }
    Ok(out)
}

/// Sample-weighted mean of `metric` over OK results carrying it; `None` when nobody did.
pub fn weighted_metric(results: &[TaskResult], metric: &str) -> Option<f64> {
    let mut sum = 0.0;
    let mut weight = 0.0;
    for r in results.iter().filter(|r| r.is_ok()) {
        let Some(m) = &r.payload else { continue };
        if let Some(v) = m.metrics.get(metric) {
            let w = m.num_samples.max(1) as f64;
            sum += w * v;
            weight += w;
        }
    }
    (weight > 0.0).then(|| sum / weight)
}

/// Tracks the round with the highest sample-weighted mean validation metric.
#[derive(Debug, Clone)]
pub struct ModelSelector {
    metric: String,
    best: Option<(u32, f64)>,
    history: Vec<(u32, Option<f64>)>,
}

impl ModelSelector {
    pub fn new(metric: impl Into<String>) -> Self {
        ModelSelector {
            metric: metric.into(),
            best: None,
            history: Vec::new(),
        }
    }

    pub fn metric(&self) -> &str {
        &self.metric
    }

    /// Scores `round` from its validation results and reports whether it became the best.
    /// Rounds where no client reported the metric are skipped with a warning.
    pub fn record(&mut self, round: u32, results: &[TaskResult]) -> bool {
        let value = weighted_metric(results, &self.metric);
        self.history.push((round, value));
        match value {
            None => {
                tracing::warn!(round, metric = %self.metric, "metric missing from all clients, round skipped");
                false
            }
            Some(v) if self.best.is_none_or(|(_, b)| v > b) => {
                self.best = Some((round, v));
                true
            }
            Some(_) => false,
        }
    }

    pub fn best(&self) -> Option<(u32, f64)> {
        self.best
    }

    pub fn history(&self) -> &[(u32, Option<f64>)] {
        &self.history
    }
}
