//! Per-task adaptive budgets: min-max normalization of planner scores,
//! threshold admission under a cap, and dev-set threshold calibration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Task;
use crate::error::{Error, Result};
use crate::planner::{score_tasks, PlannerModel};
use crate::simworld::{evaluate_selections, SelectionStats, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmissionConfig {
    pub tau: f64,
    pub b_max: usize,
    /// Admit nothing regardless of scores.
    pub accept_none_sentinel: bool,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        AdmissionConfig {
            tau: 0.5,
            b_max: 16,
            accept_none_sentinel: false,
        }
    }
}

impl AdmissionConfig {
    pub fn with_tau(tau: f64, b_max: usize) -> Self {
        AdmissionConfig {
            tau,
            b_max,
            accept_none_sentinel: false,
        }
    }

    pub fn sentinel(b_max: usize) -> Self {
        AdmissionConfig {
            tau: 1.0,
            b_max,
            accept_none_sentinel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_max < 1 {
            return Err(Error::invalid("b_max must be at least 1"));
        }
        if !self.accept_none_sentinel && !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid("tau must lie in [0,1]"));
        }
        Ok(())
    }

    /// Threshold label used in sweep tables.
    pub fn tau_label(&self) -> String {
        if self.accept_none_sentinel {
            "none".to_string()
        } else {
            format!("{}", self.tau)
        }
    }
}

/// Min-max normalization within one task. A constant score map sends every
/// skill to 1.0.
pub fn normalize_scores(scores: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot normalize an empty score map"));
    }
    if let Some((id, _)) = scores.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::invalid(format!("score for {id} is not finite")));
    }
    let min = scores.values().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(scores
        .iter()
        .map(|(id, &v)| {
            let n = if max > min { ((v - min) / (max - min)).clamp(0.0, 1.0) } else { 1.0 };
            (id.clone(), n)
        })
        .collect())
}

/// Skills with normalized score ≥ τ, best first (ties to the smaller id),
/// at most `b_max` of them. The sentinel admits nothing.
pub fn admit(normalized: &BTreeMap<String, f64>, cfg: &AdmissionConfig) -> Vec<String> {
    if cfg.accept_none_sentinel {
        return Vec::new();
    }
    let mut kept: Vec<(&String, f64)> = normalized
        .iter()
        .filter(|(_, v)| **v >= cfg.tau)
        .map(|(id, v)| (id, *v))
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.into_iter().take(cfg.b_max).map(|(id, _)| id.clone()).collect()
}

/// Normalize raw planner scores and admit.
pub fn select_adaptive(raw: &BTreeMap<String, f64>, cfg: &AdmissionConfig) -> Result<Vec<String>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    Ok(admit(&normalize_scores(raw)?, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub tau_grid: Vec<f64>,
    pub include_sentinel: bool,
    pub b_max: usize,
    pub render: bool,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Grid `0, 1/8, …, 1` plus the sentinel.
    pub fn default_grid() -> Vec<f64> {
        (0..=8).map(|i| i as f64 / 8.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: String,
    pub mean_pass: f64,
    pub std_pass: f64,
    pub mean_messages: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub best: AdmissionConfig,
    pub sweep: Vec<SweepRow>,
}

/// Evaluates every threshold on the dev tasks and returns the best one.
/// Equal mean pass prefers the larger τ; the sentinel counts as largest.
pub fn calibrate_tau(
    world: &World,
    model: &PlannerModel,
    dev_tasks: &[Task],
    spec: &SweepSpec,
) -> Result<Calibration> {
    if spec.tau_grid.is_empty() {
        return Err(Error::invalid("tau grid must be nonempty"));
    }
    if spec.seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    let mut grid = spec.tau_grid.clone();
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("tau grid values must lie in [0,1]"));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut points: Vec<AdmissionConfig> = grid
        .iter()
        .map(|&t| AdmissionConfig::with_tau(t, spec.b_max))
        .collect();
    if spec.include_sentinel {
        points.push(AdmissionConfig::sentinel(spec.b_max));
    }
    let scores = score_tasks(model, dev_tasks, &world.library);
    let mut sweep = Vec::with_capacity(points.len());
    let mut best: Option<(f64, AdmissionConfig)> = None;
    for cfg in points {
        let selections = scores
            .iter()
            .map(|s| select_adaptive(s, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let stats = evaluate_selections(world, dev_tasks, &selections, spec.render, &spec.seeds)?;
        if best.as_ref().is_none_or(|(m, _)| stats.mean_pass >= *m) {
            best = Some((stats.mean_pass, cfg));
        }
        sweep.push(sweep_row(&cfg, &stats));
    }
    Ok(Calibration {
        best: best.expect("at least one sweep point").1,
        sweep,
    })
}

fn sweep_row(cfg: &AdmissionConfig, stats: &SelectionStats) -> SweepRow {
    SweepRow {
        tau: cfg.tau_label(),
        mean_pass: stats.mean_pass,
        std_pass: stats.std_pass,
        mean_messages: stats.mean_messages,
    }
}

/// Counts of per-task admitted-set sizes, with every bin from 0 to
/// `min(b_max, |S|)` present.
pub fn budget_histogram(
    world: &World,
    model: &PlannerModel,
    tasks: &[Task],
    cfg: &AdmissionConfig,
) -> Result<BTreeMap<usize, usize>> {
    cfg.validate()?;
    let top = cfg.b_max.min(world.library.len());
    let mut hist: BTreeMap<usize, usize> = (0..=top).map(|b| (b, 0)).collect();
    for s in score_tasks(model, tasks, &world.library) {
        *hist.entry(select_adaptive(&s, cfg)?.len()).or_insert(0) += 1;
    }
    Ok(hist)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_histogram_csv(path: &Path, hist: &BTreeMap<usize, usize>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["b_t", "count"]).map_err(|e| csv_error(path, e))?;
    for (b, c) in hist {
        w.write_record([b.to_string(), c.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    }
}
