//! End-to-end runs: predict, cluster, place, fly, score.
//!
//! Controllers plan on predicted positions only; true positions are read once the
//! whole trajectory is committed, to score it.

use std::cell::Cell;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{self, ChannelParams, ConstraintReport, Constraint, UavState};
use crate::clustering::{self, Clustering};
use crate::esn::{self, CohortPrediction};
use crate::marl::{
    self, apply_action, centroid_above, train, ActionId, AgentState, CurvePoint, EpisodeSummary, GridSpec, Move,
    PowerChange, QTableSet, TrainConfig, TrainOutcome, UavEnv,
};
use crate::mobility::TraceSet;
use crate::rng;
use crate::scenario::{Controller, Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Esn(#[from] esn::EsnError),
    #[error(transparent)]
    Cluster(#[from] clustering::ClusterError),
    #[error(transparent)]
    Channel(#[from] channel::ChannelError),
    #[error(transparent)]
    Marl(#[from] marl::MarlError),
    #[error("maximum transmit power {p_max} W is below the feasibility bound {bound:.6e} W")]
    Infeasible { bound: f64, p_max: f64 },
    #[error("traces do not match the scenario: {0}")]
    TraceMismatch(String),
    #[error("true positions of slot {slot} read during planning")]
    TruthAccess { slot: usize },
    #[error("unknown sweep axis '{axis}'; allowed: {}", SWEEP_AXES.join(", "))]
    UnknownAxis { axis: String },
    #[error("bad value {value} for axis {axis}")]
    BadAxisValue { axis: String, value: f64 },
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Instrumentation switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Fail any read of true positions while a controller is planning.
    pub poison_truth: bool,
}

/// Gatekeeper for true positions.
struct Truth<'a> {
    traces: &'a TraceSet,
    enabled: bool,
    poisoned: Cell<bool>,
}

impl<'a> Truth<'a> {
    fn new(traces: &'a TraceSet, enabled: bool) -> Self {
        Self {
            traces,
            enabled,
            poisoned: Cell::new(false),
        }
    }

    fn snapshot(&self, slot: usize) -> Result<Vec<[f64; 2]>> {
        if self.enabled && self.poisoned.get() {
            return Err(SimError::TruthAccess { slot });
        }
        Ok(self.traces.snapshot(slot))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSummary {
    pub reservoir_size: usize,
    pub test_start: usize,
    pub test_mse: f64,
    pub historical_average_mse: f64,
    pub zero_order_hold_mse: f64,
    pub worst_normal_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringSummary {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub sizes: Vec<usize>,
    pub wcss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementSummary {
    pub states: Vec<AgentState>,
    pub sum_rate: f64,
    pub centroid_baseline_sum_rate: f64,
    pub constraints: ConstraintReport,
    pub episodes: Vec<EpisodeSummary>,
}

/// Everything a run produces except wall-clock timings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub controller: Controller,
    pub seed: u64,
    pub n_uavs: usize,
    pub n_slots: usize,
    pub slot_seconds: f64,
    pub mean_sum_rate: f64,
    /// Per-slot sum rate on true positions.
    pub sum_rate: Vec<f64>,
    /// `[slot][user]` rates on true positions.
    pub user_rates: Vec<Vec<f64>>,
    pub constraints: Vec<ConstraintReport>,
    pub min_rate_violations: usize,
    pub pmax_lower_bound: f64,
    /// `[uav][slot]` discrete states.
    pub states: Vec<Vec<AgentState>>,
    /// `[uav][slot]` continuous positions and powers.
    pub trajectories: Vec<Vec<UavState>>,
    pub prediction: PredictionSummary,
    pub clustering: ClusteringSummary,
    pub placement: Option<PlacementSummary>,
    pub trajectory_episodes: Vec<EpisodeSummary>,
    pub q_storage_entries: usize,
    #[serde(skip)]
    pub learning_curve: Vec<CurvePoint>,
}

/// Seconds spent per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub predict: f64,
    pub cluster: f64,
    pub plan: f64,
    pub score: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub timing: Timing,
    pub tables: Option<QTableSet>,
}

/// Validates the trace set against the scenario window.
pub fn check_traces(scenario: &Scenario, traces: &TraceSet) -> Result<()> {
    if traces.users.is_empty() {
        return Err(SimError::TraceMismatch("no users".into()));
    }
    if traces.n_slots != scenario.n_slots {
        return Err(SimError::TraceMismatch(format!(
            "{} slots in traces, {} in scenario",
            traces.n_slots, scenario.n_slots
        )));
    }
    if (traces.slot_seconds - scenario.slot_seconds).abs() > 1e-9 {
        return Err(SimError::TraceMismatch(format!(
            "slot length {} s in traces, {} s in scenario",
            traces.slot_seconds, scenario.slot_seconds
        )));
    }
    if let Some(u) = traces.users.iter().find(|u| u.positions.len() != scenario.n_slots) {
        return Err(SimError::TraceMismatch(format!("user {} has {} slots", u.user_id, u.positions.len())));
    }
    Ok(())
}

/// ESN one-step predictions for every user.
pub fn predict_stage(scenario: &Scenario, traces: &TraceSet) -> Result<CohortPrediction> {
    check_traces(scenario, traces)?;
    let users: Vec<Vec<[f64; 2]>> = traces.users.iter().map(|u| u.positions.clone()).collect();
    let cfg = esn::EsnConfig {
        rng_seed: rng::derive_seed(scenario.seed, "esn", 0),
        ..scenario.esn
    };
    Ok(esn::predict_cohort(&users, &cfg, &scenario.extent)?)
}

fn snapshot(predicted: &[Vec<[f64; 2]>], slot: usize) -> Vec<[f64; 2]> {
    predicted.iter().map(|u| u[slot]).collect()
}

/// GAK-means on the slot-0 positions.
pub fn cluster_stage(scenario: &Scenario, predicted: &[Vec<[f64; 2]>]) -> Result<Clustering> {
    let ga = clustering::GaParams {
        rng_seed: rng::derive_seed(scenario.seed, "ga", 0),
        ..scenario.ga
    };
    Ok(clustering::gak_means(&snapshot(predicted, 0), scenario.n_uavs, &ga)?)
}

/// Feasibility bound for the clustering; errors when the top power level is below it.
pub fn power_feasibility(scenario: &Scenario, clusters: &Clustering) -> Result<f64> {
    let params = scenario.channel_params()?;
    let bound = channel::pmax_lower_bound(&clusters.sizes(), &[scenario.limits.h_max], &params)?;
    let top = scenario.grid.power_levels.iter().copied().fold(0.0, f64::max);
    if top < bound {
        return Err(SimError::Infeasible { bound, p_max: top });
    }
    Ok(bound)
}

fn allowed_actions(controller: Controller) -> Vec<usize> {
    match controller {
        Controller::LearnedNoPowerControl => ActionId::without_power_control(),
        _ => ActionId::all().map(|a| a.0).collect(),
    }
}

/// Learned initial placement on the slot-0 snapshot.
pub fn placement_stage(
    scenario: &Scenario,
    predicted: &[Vec<[f64; 2]>],
    clusters: &Clustering,
    controller: Controller,
) -> Result<marl::Placement> {
    let grid = scenario.grid();
    let params = scenario.channel_params()?;
    Ok(marl::initial_placement(
        &snapshot(predicted, 0),
        &clusters.assignment,
        &clusters.centroids,
        &grid,
        &params,
        &scenario.limits,
        &scenario.rl,
        &allowed_actions(controller),
        rng::derive_seed(scenario.seed, "placement", 0),
    )?)
}

struct Plan {
    /// `[slot][uav]`
    states: Vec<Vec<AgentState>>,
    placement: Option<PlacementSummary>,
    training: TrainOutcome,
    tables: Option<QTableSet>,
}

/// Trains on the predicted episode from `start` and executes the greedy policy.
fn plan_learned(
    scenario: &Scenario,
    grid: &GridSpec,
    params: &ChannelParams,
    predicted: &[Vec<[f64; 2]>],
    assignment: &[usize],
    start: Vec<AgentState>,
    allowed: &[usize],
) -> Result<(Vec<Vec<AgentState>>, TrainOutcome, QTableSet)> {
    let rl = &scenario.rl;
    let snaps: Vec<Vec<[f64; 2]>> = (1..scenario.n_slots).map(|t| snapshot(predicted, t)).collect();
    let mut tables = rl.tables(start.len(), grid)?;
    let mut states = vec![start.clone()];
    let mut training = TrainOutcome::default();
    if snaps.is_empty() {
        return Ok((states, training, tables));
    }
    let seed = rng::derive_seed(scenario.seed, "trajectory", 0);
    let greedy_step = |tables: &QTableSet, cur: &[AgentState]| -> Vec<AgentState> {
        let idx: Vec<usize> = cur.iter().map(|s| grid.index(s)).collect();
        let actions = tables.greedy(&idx, rl.selection, allowed);
        cur.iter()
            .zip(actions)
            .map(|(s, a)| apply_action(s, ActionId(a), grid))
            .collect()
    };
    if rl.replan_every_slot {
        let horizon = rl.replan_horizon.max(1);
        for t in 0..snaps.len() {
            let cur = states.last().expect("start state").clone();
            let window = &snaps[t..(t + horizon).min(snaps.len())];
            let mut env = UavEnv::new(grid, params, window, assignment, cur.clone());
            let cfg = TrainConfig {
                episodes: rl.trajectory_episodes,
                steps_per_episode: window.len(),
                selection: rl.selection,
                allowed_actions: allowed.to_vec(),
                record_every: 0,
                seed: rng::derive_seed(seed, "slot", t as u64),
            };
            // values learned against an earlier slot's crowd are stale, so each slot starts empty
            tables = rl.tables(cur.len(), grid)?;
            let out = train(&mut env, &mut tables, &cfg);
            training.episodes.extend(out.episodes);
            states.push(greedy_step(&tables, &cur));
        }
    } else {
        let mut env = UavEnv::new(grid, params, &snaps, assignment, start);
        let cfg = TrainConfig {
            episodes: rl.trajectory_episodes,
            steps_per_episode: snaps.len(),
            selection: rl.selection,
            allowed_actions: allowed.to_vec(),
            record_every: 0,
            seed,
        };
        training = train(&mut env, &mut tables, &cfg);
        for _ in 0..snaps.len() {
            let cur = states.last().expect("start state").clone();
            states.push(greedy_step(&tables, &cur));
        }
    }
    Ok((states, training, tables))
}

/// One move toward `target` (largest horizontal gap first, then altitude), power held.
fn step_toward(s: &AgentState, target: &AgentState, grid: &GridSpec) -> AgentState {
    let dx = target.cell_x as i64 - s.cell_x as i64;
    let dy = target.cell_y as i64 - s.cell_y as i64;
    let dh = target.h_idx as i64 - s.h_idx as i64;
    let m = if dx != 0 && dx.abs() >= dy.abs() {
        if dx > 0 {
            Move::Right
        } else {
            Move::Left
        }
    } else if dy != 0 {
        if dy > 0 {
            Move::Forward
        } else {
            Move::Backward
        }
    } else if dh > 0 {
        Move::Up
    } else if dh < 0 {
        Move::Down
    } else {
        Move::Stay
    };
    apply_action(s, ActionId::new(m, PowerChange::Maintain), grid)
}

/// Per-slot centroids of each cluster's predicted positions.
fn predicted_centroids(predicted: &[Vec<[f64; 2]>], assignment: &[usize], n_uavs: usize, slot: usize) -> Vec<[f64; 2]> {
    let mut sum = vec![[0.0f64; 2]; n_uavs];
    let mut count = vec![0usize; n_uavs];
    for (u, &c) in assignment.iter().enumerate() {
        sum[c][0] += predicted[u][slot][0];
        sum[c][1] += predicted[u][slot][1];
        count[c] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &k)| [s[0] / k.max(1) as f64, s[1] / k.max(1) as f64])
        .collect()
}

fn plan_follow(scenario: &Scenario, grid: &GridSpec, predicted: &[Vec<[f64; 2]>], clusters: &Clustering) -> Vec<Vec<AgentState>> {
    let mut states = vec![centroid_above(&clusters.centroids, grid)];
    for t in 1..scenario.n_slots {
        let targets = centroid_above(
            &predicted_centroids(predicted, &clusters.assignment, scenario.n_uavs, t),
            grid,
        );
        let cur = states.last().expect("start state");
        let next = cur.iter().zip(&targets).map(|(s, g)| step_toward(s, g, grid)).collect();
        states.push(next);
    }
    states
}

fn summarize_placement(p: &marl::Placement) -> PlacementSummary {
    PlacementSummary {
        states: p.states.clone(),
        sum_rate: p.sum_rate,
        centroid_baseline_sum_rate: p.baseline_sum_rate,
        constraints: p.constraints.clone(),
        episodes: p.training.episodes.clone(),
    }
}

/// Full pipeline for `scenario.controller`.
pub fn run_pipeline(scenario: &Scenario, traces: &TraceSet) -> Result<RunOutput> {
    run_with_options(scenario, traces, SimOptions::default())
}

/// The follow-the-predicted-centroid benchmark.
pub fn run_baseline_gakmeans_follow(scenario: &Scenario, traces: &TraceSet) -> Result<RunOutput> {
    let s = Scenario {
        controller: Controller::GakmeansFollow,
        ..scenario.clone()
    };
    run_with_options(&s, traces, SimOptions::default())
}

pub fn run_with_options(scenario: &Scenario, traces: &TraceSet, options: SimOptions) -> Result<RunOutput> {
    scenario.validate()?;
    let t0 = Instant::now();
    let mut timing = Timing::default();
    let truth = Truth::new(traces, options.poison_truth);
    let grid = scenario.grid();
    let params = scenario.channel_params()?;

    let prediction = predict_stage(scenario, traces)?;
    timing.predict = t0.elapsed().as_secs_f64();
    let predicted = &prediction.predicted;

    truth.poisoned.set(true);
    let t1 = Instant::now();
    let clusters = cluster_stage(scenario, predicted)?;
    let bound = power_feasibility(scenario, &clusters)?;
    timing.cluster = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let controller = scenario.controller;
    let allowed = allowed_actions(controller);
    let plan = match controller {
        Controller::Learned | Controller::LearnedNoPowerControl => {
            let placement = placement_stage(scenario, predicted, &clusters, controller)?;
            let (states, training, tables) = plan_learned(
                scenario,
                &grid,
                &params,
                predicted,
                &clusters.assignment,
                placement.states.clone(),
                &allowed,
            )?;
            Plan {
                states,
                placement: Some(summarize_placement(&placement)),
                training: TrainOutcome {
                    curve: placement.training.curve.clone(),
                    ..training
                },
                tables: Some(tables),
            }
        }
        Controller::Static => {
            let placement = placement_stage(scenario, predicted, &clusters, controller)?;
            Plan {
                states: vec![placement.states.clone(); scenario.n_slots],
                placement: Some(summarize_placement(&placement)),
                training: TrainOutcome {
                    curve: placement.training.curve.clone(),
                    ..TrainOutcome::default()
                },
                tables: None,
            }
        }
        Controller::GakmeansFollow => Plan {
            states: plan_follow(scenario, &grid, predicted, &clusters),
            placement: None,
            training: TrainOutcome::default(),
            tables: None,
        },
    };
    timing.plan = t2.elapsed().as_secs_f64();
    truth.poisoned.set(false);

    let t3 = Instant::now();
    let n_uavs = scenario.n_uavs;
    let mut sum_rate = Vec::with_capacity(scenario.n_slots);
    let mut user_rates = Vec::with_capacity(scenario.n_slots);
    let mut constraints = Vec::with_capacity(scenario.n_slots);
    for (t, joint) in plan.states.iter().enumerate() {
        let users = truth.snapshot(t)?;
        let uavs: Vec<UavState> = joint.iter().map(|s| grid.uav(s)).collect();
        let links = channel::user_links(&clusters.assignment, &uavs, &users, &params)?;
        let rates: Vec<f64> = links.iter().map(|l| l.rate).collect();
        sum_rate.push(rates.iter().sum());
        user_rates.push(rates);
        constraints.push(channel::check_constraints(
            &uavs,
            &clusters.assignment,
            &users,
            &params,
            &scenario.limits,
        ));
    }
    timing.score = t3.elapsed().as_secs_f64();
    timing.total = t0.elapsed().as_secs_f64();

    let min_rate_violations = constraints.iter().map(|c| c.count(Constraint::MinimumRate)).sum();
    if min_rate_violations > 0 {
        log::warn!("{min_rate_violations} per-user minimum-rate violations across the run");
    }
    let states: Vec<Vec<AgentState>> = (0..n_uavs).map(|n| plan.states.iter().map(|j| j[n]).collect()).collect();
    let trajectories = states
        .iter()
        .map(|row| row.iter().map(|s| grid.uav(s)).collect())
        .collect();
    let mean_sum_rate = sum_rate.iter().sum::<f64>() / sum_rate.len() as f64;
    let report = RunReport {
        controller,
        seed: scenario.seed,
        n_uavs,
        n_slots: scenario.n_slots,
        slot_seconds: scenario.slot_seconds,
        mean_sum_rate,
        sum_rate,
        user_rates,
        constraints,
        min_rate_violations,
        pmax_lower_bound: bound,
        states,
        trajectories,
        prediction: PredictionSummary {
            reservoir_size: scenario.esn.reservoir_size,
            test_start: prediction.test_start,
            test_mse: prediction.test_mse,
            historical_average_mse: prediction.historical_average_mse,
            zero_order_hold_mse: prediction.zero_order_hold_mse,
            worst_normal_residual: prediction.worst_normal_residual,
        },
        clustering: ClusteringSummary {
            wcss: clustering::wcss(&clusters, &snapshot(predicted, 0)),
            sizes: clusters.sizes(),
            assignment: clusters.assignment.clone(),
            centroids: clusters.centroids.clone(),
        },
        placement: plan.placement,
        trajectory_episodes: plan.training.episodes,
        q_storage_entries: plan.tables.as_ref().map_or(0, |t| t.storage_entries()),
        learning_curve: plan.training.curve,
    };
    Ok(RunOutput {
        report,
        timing,
        tables: plan.tables,
    })
}

/// Checks the one-step kinematics and altitude/power bounds of a report's trajectories.
pub fn audit_kinematics(report: &RunReport, grid: &GridSpec, limits: &channel::Limits) -> Vec<String> {
    let mut problems = Vec::new();
    for (n, row) in report.states.iter().enumerate() {
        if row.len() != report.n_slots {
            problems.push(format!("uav {n}: {} states for {} slots", row.len(), report.n_slots));
        }
        for (t, w) in row.windows(2).enumerate() {
            let d = |a: usize, b: usize| a.abs_diff(b);
            let (a, b) = (&w[0], &w[1]);
            if d(a.cell_x, b.cell_x) > 1 || d(a.cell_y, b.cell_y) > 1 || d(a.h_idx, b.h_idx) > 1 || d(a.p_idx, b.p_idx) > 1 {
                problems.push(format!("uav {n}: jump between slots {t} and {}", t + 1));
            }
        }
        for (t, s) in row.iter().enumerate() {
            let u = grid.uav(s);
            if !(limits.h_min..=limits.h_max).contains(&u.h) {
                problems.push(format!("uav {n}: altitude {} at slot {t}", u.h));
            }
            if !(0.0..=limits.p_max).contains(&u.p_total) {
                problems.push(format!("uav {n}: power {} at slot {t}", u.p_total));
            }
            if report.trajectories[n][t] != u {
                problems.push(format!("uav {n}: trajectory disagrees with state at slot {t}"));
            }
        }
    }
    let reported: usize = report.constraints.iter().map(|c| c.count(Constraint::MinimumRate)).sum();
    if reported != report.min_rate_violations {
        problems.push(format!(
            "{} minimum-rate violations in slot reports, {} in the summary",
            reported, report.min_rate_violations
        ));
    }
    problems
}

/// Config keys a sweep may vary.
pub const SWEEP_AXES: &[&str] = &[
    "reservoir_size",
    "spectral_radius",
    "leak_rate",
    "sparsity",
    "ridge_lambda",
    "n_uavs",
    "seed",
    "learning_rate",
    "discount",
    "placement_episodes",
    "trajectory_episodes",
];

/// Returns a copy of `scenario` with `axis` set to `value`.
pub fn apply_axis(scenario: &Scenario, axis: &str, value: f64) -> Result<Scenario> {
    let mut s = scenario.clone();
    let count = || {
        if value >= 0.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(SimError::BadAxisValue {
                axis: axis.to_string(),
                value,
            })
        }
    };
    match axis {
        "reservoir_size" => s.esn.reservoir_size = count()?,
        "spectral_radius" => s.esn.spectral_radius = value,
        "leak_rate" => s.esn.leak_rate = value,
        "sparsity" => s.esn.sparsity = value,
        "ridge_lambda" => s.esn.ridge_lambda = value,
        "n_uavs" => s.n_uavs = count()?,
        "seed" => s.seed = count()? as u64,
        "learning_rate" => s.rl.learning_rate = value,
        "discount" => s.rl.discount = value,
        "placement_episodes" => s.rl.placement_episodes = count()?,
        "trajectory_episodes" => s.rl.trajectory_episodes = count()?,
        _ => {
            return Err(SimError::UnknownAxis { axis: axis.to_string() });
        }
    }
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub report: RunReport,
}

/// One run per value, `jobs` at a time. Every run keeps the scenario's master seed
/// unless the axis is the seed itself.
pub fn sweep(scenario: &Scenario, traces: &TraceSet, axis: &str, values: &[f64], jobs: usize) -> Result<Vec<SweepRow>> {
    let scenarios = values
        .iter()
        .map(|&v| apply_axis(scenario, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let reports: Vec<Result<RunReport>> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|s| run_pipeline(s, traces).map(|o| o.report))
            .collect()
    });
    values
        .iter()
        .zip(reports)
        .map(|(&value, r)| {
            Ok(SweepRow {
                axis: axis.to_string(),
                value,
                report: r?,
            })
        })
        .collect()
}
