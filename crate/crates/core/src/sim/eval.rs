use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::episode::{run_episode, EpisodeOutcome, EpisodeResult, PolicyChooser, RuleChooser, StackConfig};
use super::scenario::Scenario;
use super::SimError;
use crate::iahrl::{ActMode, AttentionPolicy};
use crate::par::{map_slice, Execution};

/// Behavior selection used by the stack.
#[derive(Debug, Clone, Copy)]
pub enum Planner<'a> {
    Rule,
    Policy(&'a AttentionPolicy, ActMode),
}

/// One episode with its own chooser; the policy stream is seeded from the
/// scenario seed.
pub fn run_with(sc: &Scenario, cfg: &StackConfig, planner: Planner) -> Result<EpisodeResult, SimError> {
    match planner {
        Planner::Rule => run_episode(sc, cfg, &mut RuleChooser),
        Planner::Policy(p, mode) => run_episode(sc, cfg, &mut PolicyChooser::new(p, mode, sc.seed)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario_id: usize,
    pub seed: u64,
    pub outcome: EpisodeOutcome,
    pub steps: usize,
    pub discomfort: f64,
    pub min_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    pub planner_error_rate: f64,
    pub mean_discomfort: f64,
    /// Mean over episodes whose minimum clearance is finite.
    pub mean_min_clearance: f64,
    pub mean_steps: f64,
}

impl Aggregate {
    fn of(group: String, rows: &[&MetricsRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let outcomes = [
            EpisodeOutcome::Success,
            EpisodeOutcome::Collision,
            EpisodeOutcome::Timeout,
            EpisodeOutcome::PlannerError,
        ];
        let counts = outcomes.map(|o| rows.iter().filter(|r| r.outcome == o).count());
        let mut rates = counts.map(|c| c as f64 / n);
        // The last non-empty outcome takes the remainder, so the rates add up
        // to exactly 1 in field order.
        if let Some(last) = counts.iter().rposition(|&c| c > 0) {
            let before = rates[..last].iter().fold(0.0, |acc, r| acc + r);
            rates[last] = 1.0 - before;
        }
        let finite: Vec<f64> = rows.iter().map(|r| r.min_clearance).filter(|c| c.is_finite()).collect();
        Self {
            group,
            episodes: rows.len(),
            success_rate: rates[0],
            collision_rate: rates[1],
            timeout_rate: rates[2],
            planner_error_rate: rates[3],
            mean_discomfort: rows.iter().map(|r| r.discomfort).sum::<f64>() / n,
            mean_min_clearance: if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            mean_steps: rows.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    /// One row per scenario kind, then `all`.
    pub summary: Vec<Aggregate>,
}

/// Runs every scenario once and tabulates the outcomes in scenario order.
pub fn evaluate(
    scenarios: &[Scenario],
    cfg: &StackConfig,
    planner: Planner,
    exec: Execution,
) -> Result<MetricsTable, SimError> {
    let results = map_slice(scenarios, exec, |sc| run_with(sc, cfg, planner));
    let mut rows = Vec::with_capacity(scenarios.len());
    for (i, (sc, r)) in scenarios.iter().zip(results).enumerate() {
        let r = r?;
        rows.push(MetricsRow {
            scenario_id: i,
            seed: sc.seed,
            outcome: r.outcome,
            steps: r.steps,
            discomfort: r.discomfort,
            min_clearance: r.min_clearance,
        });
    }
    let mut groups: BTreeMap<String, Vec<&MetricsRow>> = BTreeMap::new();
    for (sc, row) in scenarios.iter().zip(&rows) {
        groups.entry(sc.kind.to_string()).or_default().push(row);
    }
    let mut summary: Vec<Aggregate> = groups.into_iter().map(|(g, r)| Aggregate::of(g, &r)).collect();
    summary.push(Aggregate::of("all".into(), &rows.iter().collect::<Vec<_>>()));
    Ok(MetricsTable { rows, summary })
}

fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Per-episode table with columns scenario_id, seed, outcome, steps,
/// discomfort, min_clearance.
pub fn metrics_csv(table: &MetricsTable) -> String {
    to_csv(&table.rows)
}

pub fn summary_csv(table: &MetricsTable) -> String {
    to_csv(&table.summary)
}
