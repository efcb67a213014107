//! Ablation sweeps and planner comparisons.
//!
//! The push protocol repeats seeded lateral disturbances at fixed fractions
//! of the executed swing phase while the robot tracks a forward command;
//! each grid point of a sweep reruns the protocol under one planner
//! variation and reports mean tracking cost, its standard error, and mean
//! planner wall time. The comparison presets run fixed method line-ups on
//! shared trials: value-function against rollout search in distribution,
//! rollout-count impact out of distribution, and periodic trots against
//! the search under pushes.

use crate::fmt::{format_g, schema_line, SIG_DATA};
use crate::mcts::{plan, PlanInput, PlannerConfig};
use crate::ocp::RolloutContext;
use crate::scalar::{real, Real};
use crate::seed::{label, rng_from, split_seed};
use crate::sim::{
    run_episode, Disturbance, Metrics, PeriodicGait, PlannerKind, Push, SimConfig, SimError,
    Terrain,
};
use crate::vf::ValueFunction;
use nalgebra::{Vector2, Vector3};
use rand::Rng;

/// Planner knob varied by [`ablation_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Node step of the search tree, s.
    TreeDt,
    /// Rollouts per expanded node.
    NumSimulations,
    /// Planning horizon, s.
    Horizon,
    /// Replanning frequency, Hz (snapped to the MPC grid).
    ReplanFreq,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::TreeDt => "tree_dt",
            AblationAxis::NumSimulations => "num_simulations",
            AblationAxis::Horizon => "horizon",
            AblationAxis::ReplanFreq => "replan_freq",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "tree_dt" => Some(AblationAxis::TreeDt),
            "num_simulations" => Some(AblationAxis::NumSimulations),
            "horizon" => Some(AblationAxis::Horizon),
            "replan_freq" => Some(AblationAxis::ReplanFreq),
            _ => None,
        }
    }
}

/// The lateral-push protocol: one push per episode, placed at a fraction
/// of the executed swing phase, repeated over seeds.
#[derive(Debug, Clone)]
pub struct PushProtocol<T: Real> {
    /// Swing-phase fractions at which the push starts.
    pub fractions: Vec<T>,
    /// Seeded repetitions per fraction.
    pub trials_per_fraction: usize,
    pub force: Vector3<T>,
    pub duration: T,
    /// Earliest time the push may trigger (lets the gait settle).
    pub arm: T,
}

impl<T: Real> Default for PushProtocol<T> {
    fn default() -> Self {
        Self {
            fractions: [0.0, 0.2, 0.4, 0.6, 0.8].iter().map(|&f| real(f)).collect(),
            trials_per_fraction: 10,
            force: Vector3::new(T::zero(), real(150.0), T::zero()),
            duration: real(0.1),
            arm: real(0.2),
        }
    }
}

impl<T: Real> PushProtocol<T> {
    /// All (fraction, repetition) pairs in protocol order.
    fn episodes(&self) -> Vec<(T, usize)> {
        let mut out = Vec::new();
        for &fraction in &self.fractions {
            for rep in 0..self.trials_per_fraction {
                out.push((fraction, rep));
            }
        }
        out
    }

    fn push(&self, fraction: T) -> Push<T> {
        Push::SwingPhased {
            arm: self.arm,
            fraction,
            duration: self.duration,
            force: self.force,
        }
    }
}

/// Snaps a replanning frequency to the nearest period on the MPC grid.
pub fn snap_period<T: Real>(freq: T, mpc_period: T) -> T {
    let period = T::one() / freq;
    let k = (period / mpc_period).to_f64().round_ties_even().max(1.0);
    mpc_period * real(k)
}

/// Sweep configuration: the base setup plus the axis and its grid.
#[derive(Debug, Clone)]
pub struct AblationConfig<T: Real> {
    pub axis: AblationAxis,
    pub grid: Vec<T>,
    pub protocol: PushProtocol<T>,
    pub sim: SimConfig<T>,
    pub planner: PlannerConfig<T>,
    pub context: RolloutContext<T>,
    pub seed: u64,
}

/// One sweep grid point: push-protocol aggregates under the varied knob.
#[derive(Debug, Clone)]
pub struct AblationRow<T: Real> {
    pub axis: AblationAxis,
    pub value: T,
    pub episodes: usize,
    pub failures: usize,
    pub mean_cost: T,
    pub se_cost: T,
    pub mean_plan_ms: f64,
}

pub const ABLATION_SCHEMA: &str = "ablation-sweep";

fn mean_and_se<T: Real>(values: &[T]) -> (T, T) {
    if values.is_empty() {
        return (T::zero(), T::zero());
    }
    let n = real::<T>(values.len() as f64);
    let mean = values.iter().fold(T::zero(), |a, &b| a + b) / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values
        .iter()
        .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
        / (n - T::one());
    (mean, (var / n).sqrt())
}

/// Runs the push protocol at every grid point of the axis. Grid points are
/// sorted coarse-to-fine for the tree step (descending) and ascending for
/// the other axes; failed episodes are excluded from the means and counted.
pub fn ablation_sweep<T: Real>(cfg: &AblationConfig<T>) -> Result<Vec<AblationRow<T>>, SimError> {
    if cfg.grid.is_empty() {
        return Err(SimError::Config("ablation grid is empty".to_string()));
    }
    let mut grid = cfg.grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    if cfg.axis == AblationAxis::TreeDt {
        grid.reverse();
    }

    let episodes = cfg.protocol.episodes();
    let mut rows = Vec::with_capacity(grid.len());
    for (point, &value) in grid.iter().enumerate() {
        let mut planner = cfg.planner.clone();
        let mut sim = cfg.sim.clone();
        match cfg.axis {
            AblationAxis::TreeDt => planner.dt_node = value,
            AblationAxis::NumSimulations => {
                planner.rollouts_per_node = value.to_f64().round() as usize
            }
            AblationAxis::Horizon => planner.horizon = value,
            AblationAxis::ReplanFreq => sim.replan_period = snap_period(value, sim.mpc_period),
        }

        let mut costs = Vec::new();
        let mut failures = 0usize;
        let mut wall = 0.0;
        let mut plans = 0usize;
        for (index, &(fraction, _)) in episodes.iter().enumerate() {
            let seed = split_seed(cfg.seed, label::TRIAL, (point * episodes.len() + index) as u64);
            let pushes = [cfg.protocol.push(fraction)];
            let metrics = run_episode(
                &PlannerKind::MctsFull,
                &sim,
                &pushes,
                &planner,
                &cfg.context,
                seed,
            )?;
            wall += metrics.mean_plan_wall_ms * metrics.plans as f64;
            plans += metrics.plans;
            if metrics.failed {
                failures += 1;
            } else {
                costs.push(metrics.mean_cost);
            }
        }
        let (mean_cost, se_cost) = mean_and_se(&costs);
        rows.push(AblationRow {
            axis: cfg.axis,
            value,
            episodes: episodes.len(),
            failures,
            mean_cost,
            se_cost,
            mean_plan_ms: wall / plans.max(1) as f64,
        });
    }
    Ok(rows)
}

/// Serializes sweep rows with the fixed ablation header.
pub fn ablation_csv<T: Real>(rows: &[AblationRow<T>]) -> String {
    let mut out = String::new();
    out.push_str(&schema_line(ABLATION_SCHEMA));
    out.push('\n');
    out.push_str("axis,value,episodes,failures,mean_cost,se_cost,mean_plan_ms\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.axis.name(),
            format_g(row.value.to_f64(), SIG_DATA),
            row.episodes,
            row.failures,
            format_g(row.mean_cost.to_f64(), SIG_DATA),
            format_g(row.se_cost.to_f64(), SIG_DATA),
            format_g(row.mean_plan_ms, SIG_DATA),
        ));
    }
    out
}

/// Median planner wall time per tree step, over repeated plan calls on one
/// instance; the deterministic realization of the timing-versus-step trend.
pub fn plan_wall_medians<T: Real>(
    input: &PlanInput<T>,
    base: &PlannerConfig<T>,
    dt_grid: &[T],
    calls: usize,
) -> Result<Vec<(T, f64)>, SimError> {
    let mut out = Vec::with_capacity(dt_grid.len());
    for &dt in dt_grid {
        let cfg = PlannerConfig {
            dt_node: dt,
            ..base.clone()
        };
        let mut walls = Vec::with_capacity(calls);
        for k in 0..calls {
            let outcome = plan(input, &cfg, None, split_seed(0x51, label::PLAN, k as u64))?;
            walls.push(outcome.stats.wall_ms);
        }
        walls.sort_by(|a, b| a.partial_cmp(b).expect("finite wall times"));
        out.push((dt, walls[walls.len() / 2]));
    }
    Ok(out)
}

/// Named comparison protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparePreset {
    /// Value-function planner against the rollout baseline, in
    /// distribution (flat ground, trained speed range).
    BaselineIdOd,
    /// Rollout-count impact out of distribution (slope, faster command)
    /// under a fixed rollout quota.
    EodRolloutImpact,
    /// Periodic trots against the search under seeded pushes.
    PeriodicVsMcts,
}

impl ComparePreset {
    pub fn name(&self) -> &'static str {
        match self {
            ComparePreset::BaselineIdOd => "baseline_id_od",
            ComparePreset::EodRolloutImpact => "eod_rollout_impact",
            ComparePreset::PeriodicVsMcts => "periodic_vs_mcts",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "baseline_id_od" => Some(ComparePreset::BaselineIdOd),
            "eod_rollout_impact" => Some(ComparePreset::EodRolloutImpact),
            "periodic_vs_mcts" => Some(ComparePreset::PeriodicVsMcts),
            _ => None,
        }
    }
}

/// Comparison configuration shared by all presets.
#[derive(Debug, Clone)]
pub struct CompareConfig<T: Real> {
    pub preset: ComparePreset,
    pub trials: usize,
    pub protocol: PushProtocol<T>,
    pub sim: SimConfig<T>,
    pub planner: PlannerConfig<T>,
    pub context: RolloutContext<T>,
    /// Trained value model; required by the ID/OD and rollout-impact
    /// presets.
    pub vf: Option<ValueFunction<T>>,
    /// Rollout quota per plan for the rollout-impact preset.
    pub quota: Option<u64>,
    pub seed: u64,
}

/// One method's aggregate over the shared trials.
#[derive(Debug, Clone)]
pub struct MethodAggregate<T: Real> {
    pub method: String,
    pub episodes: usize,
    pub failures: usize,
    pub mean_cost: T,
    pub se_cost: T,
    /// Episodes whose lateral velocity settled.
    pub recovered: usize,
    pub mean_recovery: T,
    pub mean_peak_vlat: T,
    pub mean_peak_vlat_time: T,
}

/// One (method, trial) episode result.
#[derive(Debug, Clone)]
pub struct TrialRow<T: Real> {
    pub method: String,
    pub trial: usize,
    pub failed: bool,
    pub cost: T,
    pub recovery: Option<T>,
    pub peak_vlat: T,
    pub peak_vlat_time: T,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome<T: Real> {
    pub aggregate: Vec<MethodAggregate<T>>,
    pub trials: Vec<TrialRow<T>>,
    /// Mean lateral-velocity trace per method, sampled on the shared
    /// metrics grid (push-comparison preset only).
    pub trace: Option<Vec<(T, Vec<T>)>>,
    pub methods: Vec<String>,
}

pub const COMPARE_AGGREGATE_SCHEMA: &str = "compare-aggregate";
pub const COMPARE_TRIALS_SCHEMA: &str = "compare-trials";
pub const COMPARE_TRACE_SCHEMA: &str = "compare-trace";

fn method_lineup<T: Real>(cfg: &CompareConfig<T>) -> Result<Vec<(String, PlannerKind<T>)>, SimError> {
    let need_vf = |cfg: &CompareConfig<T>| -> Result<ValueFunction<T>, SimError> {
        cfg.vf.clone().ok_or_else(|| {
            SimError::Config(format!(
                "preset {} requires a trained value model (paths.model)",
                cfg.preset.name()
            ))
        })
    };
    Ok(match cfg.preset {
        ComparePreset::BaselineIdOd => vec![
            ("mcts-full".to_string(), PlannerKind::MctsFull),
            ("vf-only".to_string(), PlannerKind::MctsVf(need_vf(cfg)?)),
        ],
        ComparePreset::EodRolloutImpact => {
            let vf = need_vf(cfg)?;
            vec![
                ("vf-only".to_string(), PlannerKind::MctsVf(vf.clone())),
                ("hybrid-5".to_string(), PlannerKind::MctsHybrid(vf.clone())),
                ("hybrid-20".to_string(), PlannerKind::MctsHybrid(vf.clone())),
                ("hybrid-40".to_string(), PlannerKind::MctsHybrid(vf)),
            ]
        }
        ComparePreset::PeriodicVsMcts => vec![
            ("mcts-full".to_string(), PlannerKind::MctsFull),
            (
                "trot-1.4hz".to_string(),
                PlannerKind::Periodic(PeriodicGait::trot(real(1.4))),
            ),
            (
                "trot-2.0hz".to_string(),
                PlannerKind::Periodic(PeriodicGait::trot(real(2.0))),
            ),
        ],
    })
}

/// Per-method planner adjustments a preset requires.
fn method_planner<T: Real>(
    cfg: &CompareConfig<T>,
    method: &str,
) -> PlannerConfig<T> {
    let mut planner = cfg.planner.clone();
    if cfg.preset == ComparePreset::EodRolloutImpact {
        planner.rollout_quota = cfg.quota;
        match method {
            "hybrid-5" => planner.rollouts_per_node = 5,
            "hybrid-20" => planner.rollouts_per_node = 20,
            "hybrid-40" => planner.rollouts_per_node = 40,
            _ => {}
        }
    }
    planner
}

/// The pushes of trial `k`, shared across methods.
fn trial_pushes<T: Real>(cfg: &CompareConfig<T>, trial: usize) -> Vec<Push<T>> {
    match cfg.preset {
        // One swing-phased push, cycling through the protocol fractions.
        ComparePreset::BaselineIdOd => {
            let fraction = cfg.protocol.fractions[trial % cfg.protocol.fractions.len()];
            vec![cfg.protocol.push(fraction)]
        }
        // Tracking on the out-of-distribution terrain is the challenge.
        ComparePreset::EodRolloutImpact => Vec::new(),
        // Absolute-time pushes drawn once per trial, identical for every
        // method so the comparison is paired.
        ComparePreset::PeriodicVsMcts => {
            let mut rng = rng_from(split_seed(cfg.seed, label::TRIAL, trial as u64));
            let window = real::<T>(1.0 / 1.4);
            let start = cfg.protocol.arm + window * real(rng.gen_range(0.0..1.0));
            vec![Push::Timed(Disturbance {
                start,
                duration: cfg.protocol.duration,
                force: cfg.protocol.force,
            })]
        }
    }
}

/// Runs the preset line-up on shared trials.
pub fn compare_experiment<T: Real>(
    cfg: &CompareConfig<T>,
) -> Result<CompareOutcome<T>, SimError> {
    if cfg.trials == 0 {
        return Err(SimError::Config("trials must be positive".to_string()));
    }
    let lineup = method_lineup(cfg)?;
    let methods: Vec<String> = lineup.iter().map(|(name, _)| name.clone()).collect();

    let mut trials_out = Vec::new();
    let mut aggregate = Vec::new();
    let mut traces: Vec<Vec<Metrics<T>>> = vec![Vec::new(); lineup.len()];
    for (mi, (method, kind)) in lineup.iter().enumerate() {
        let planner = method_planner(cfg, method);
        let mut costs = Vec::new();
        let mut failures = 0usize;
        let mut recoveries = Vec::new();
        let mut peaks = Vec::new();
        let mut peak_times = Vec::new();
        for trial in 0..cfg.trials {
            let pushes = trial_pushes(cfg, trial);
            let seed = split_seed(cfg.seed, label::TRIAL, trial as u64);
            let metrics = run_episode(kind, &cfg.sim, &pushes, &planner, &cfg.context, seed)?;
            trials_out.push(TrialRow {
                method: method.clone(),
                trial,
                failed: metrics.failed,
                cost: metrics.mean_cost,
                recovery: metrics.recovery,
                peak_vlat: metrics.peak_vlat,
                peak_vlat_time: metrics.peak_vlat_time,
            });
            if metrics.failed {
                failures += 1;
            } else {
                costs.push(metrics.mean_cost);
                if let Some(r) = metrics.recovery {
                    recoveries.push(r);
                }
                peaks.push(metrics.peak_vlat);
                peak_times.push(metrics.peak_vlat_time);
                traces[mi].push(metrics);
            }
        }
        let (mean_cost, se_cost) = mean_and_se(&costs);
        let (mean_recovery, _) = mean_and_se(&recoveries);
        let (mean_peak, _) = mean_and_se(&peaks);
        let (mean_peak_time, _) = mean_and_se(&peak_times);
        aggregate.push(MethodAggregate {
            method: method.clone(),
            episodes: cfg.trials,
            failures,
            mean_cost,
            se_cost,
            recovered: recoveries.len(),
            mean_recovery,
            mean_peak_vlat: mean_peak,
            mean_peak_vlat_time: mean_peak_time,
        });
    }

    let trace = if cfg.preset == ComparePreset::PeriodicVsMcts {
        Some(mean_traces(&traces))
    } else {
        None
    };
    Ok(CompareOutcome {
        aggregate,
        trials: trials_out,
        trace,
        methods,
    })
}

/// Mean lateral velocity per method at each shared sample time.
fn mean_traces<T: Real>(per_method: &[Vec<Metrics<T>>]) -> Vec<(T, Vec<T>)> {
    let len = per_method
        .iter()
        .flat_map(|runs| runs.iter().map(|m| m.rows.len()))
        .min()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let t = per_method
            .iter()
            .find_map(|runs| runs.first())
            .map(|m| m.rows[k].t)
            .unwrap_or_else(T::zero);
        let means = per_method
            .iter()
            .map(|runs| {
                if runs.is_empty() {
                    T::zero()
                } else {
                    runs.iter().map(|m| m.rows[k].v.y).fold(T::zero(), |a, b| a + b)
                        / real(runs.len() as f64)
                }
            })
            .collect();
        out.push((t, means));
    }
    out
}

impl<T: Real> CompareOutcome<T> {
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&schema_line(COMPARE_AGGREGATE_SCHEMA));
        out.push('\n');
        out.push_str(
            "method,episodes,failures,mean_cost,se_cost,recovered,mean_recovery,mean_peak_vlat,mean_peak_vlat_time\n",
        );
        for row in &self.aggregate {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.method,
                row.episodes,
                row.failures,
                format_g(row.mean_cost.to_f64(), SIG_DATA),
                format_g(row.se_cost.to_f64(), SIG_DATA),
                row.recovered,
                format_g(row.mean_recovery.to_f64(), SIG_DATA),
                format_g(row.mean_peak_vlat.to_f64(), SIG_DATA),
                format_g(row.mean_peak_vlat_time.to_f64(), SIG_DATA),
            ));
        }
        out
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&schema_line(COMPARE_TRIALS_SCHEMA));
        out.push('\n');
        out.push_str("method,trial,failed,cost,recovery,peak_vlat,peak_vlat_time\n");
        for row in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.method,
                row.trial,
                if row.failed { 1 } else { 0 },
                format_g(row.cost.to_f64(), SIG_DATA),
                row.recovery
                    .map(|r| format_g(r.to_f64(), SIG_DATA))
                    .unwrap_or_else(|| "nan".to_string()),
                format_g(row.peak_vlat.to_f64(), SIG_DATA),
                format_g(row.peak_vlat_time.to_f64(), SIG_DATA),
            ));
        }
        out
    }

    /// One column per method, mean lateral velocity over the shared grid.
    pub fn trace_csv(&self) -> Option<String> {
        let trace = self.trace.as_ref()?;
        let mut out = String::new();
        out.push_str(&schema_line(COMPARE_TRACE_SCHEMA));
        out.push('\n');
        out.push_str("t,");
        out.push_str(&self.methods.join(","));
        out.push('\n');
        for (t, means) in trace {
            out.push_str(&format_g(t.to_f64(), SIG_DATA));
            for v in means {
                out.push(',');
                out.push_str(&format_g(v.to_f64(), SIG_DATA));
            }
            out.push('\n');
        }
        Some(out)
    }
}

/// The out-of-distribution test setting: faster than the training range,
/// on a slope.
pub fn eod_sim<T: Real>(base: &SimConfig<T>) -> SimConfig<T> {
    let mut sim = base.clone();
    sim.terrain = Terrain::Slope {
        angle: real(10.0_f64.to_radians()),
    };
    sim.command.v_xy = Vector2::new(real(0.6), T::zero());
    sim
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcts::Budget;
    use approx::assert_relative_eq;

    fn fast_cfg() -> (SimConfig<f64>, PlannerConfig<f64>, RolloutContext<f64>) {
        let sim = SimConfig {
            duration: 0.64,
            command: crate::ocp::VelocityCommand {
                v_xy: Vector2::new(0.3, 0.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let planner = PlannerConfig {
            horizon: 0.16,
            rollouts_per_node: 2,
            budget: Budget::Iterations(1),
            ..Default::default()
        };
        (sim, planner, RolloutContext::default())
    }

    #[test]
    fn snap_period_hits_the_mpc_grid() {
        assert_relative_eq!(snap_period(2.0, 0.04), 0.48, epsilon = 1e-12);
        assert_relative_eq!(snap_period(5.0, 0.04), 0.2, epsilon = 1e-12);
        assert_relative_eq!(snap_period(12.5, 0.04), 0.08, epsilon = 1e-12);
        // Frequencies above the MPC rate clamp to one period.
        assert_relative_eq!(snap_period(100.0, 0.04), 0.04, epsilon = 1e-12);
    }

    #[test]
    fn single_point_single_trial_emits_one_row() {
        let (sim, planner, context) = fast_cfg();
        let cfg = AblationConfig {
            axis: AblationAxis::NumSimulations,
            grid: vec![2.0],
            protocol: PushProtocol {
                fractions: vec![0.4],
                trials_per_fraction: 1,
                arm: 0.1,
                ..Default::default()
            },
            sim,
            planner,
            context,
            seed: 11,
        };
        let rows = ablation_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].episodes, 1);
        assert_eq!(rows[0].failures, 0);
        assert!(rows[0].mean_cost.is_finite());
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("# schema: ablation-sweep v1\n"));
        assert!(csv.lines().nth(2).unwrap().starts_with("num_simulations,2,1,0,"));
    }

    #[test]
    fn tree_dt_rows_come_out_coarse_to_fine() {
        let (sim, planner, context) = fast_cfg();
        let cfg = AblationConfig {
            axis: AblationAxis::TreeDt,
            grid: vec![0.04, 0.16, 0.08],
            protocol: PushProtocol {
                fractions: vec![0.0],
                trials_per_fraction: 1,
                arm: 0.1,
                ..Default::default()
            },
            sim,
            planner: PlannerConfig {
                budget: Budget::Iterations(0),
                ..planner
            },
            context,
            seed: 3,
        };
        let rows = ablation_sweep(&cfg).unwrap();
        let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
        assert_eq!(values, vec![0.16, 0.08, 0.04]);
    }

    #[test]
    fn eod_preset_requires_a_model() {
        let (sim, planner, context) = fast_cfg();
        let cfg = CompareConfig::<f64> {
            preset: ComparePreset::EodRolloutImpact,
            trials: 1,
            protocol: Default::default(),
            sim,
            planner,
            context,
            vf: None,
            quota: Some(8),
            seed: 0,
        };
        let err = compare_experiment(&cfg).unwrap_err();
        assert!(matches!(err, SimError::Config(_)));
        assert!(err.to_string().contains("paths.model"));
    }

    #[test]
    fn periodic_comparison_emits_paired_trials_and_trace() {
        let (mut sim, planner, context) = fast_cfg();
        sim.duration = 0.8;
        let cfg = CompareConfig {
            preset: ComparePreset::PeriodicVsMcts,
            trials: 2,
            protocol: PushProtocol {
                arm: 0.2,
                ..Default::default()
            },
            sim,
            planner,
            context,
            vf: None,
            quota: None,
            seed: 17,
        };
        let out = compare_experiment(&cfg).unwrap();
        assert_eq!(out.methods, vec!["mcts-full", "trot-1.4hz", "trot-2.0hz"]);
        assert_eq!(out.aggregate.len(), 3);
        assert_eq!(out.trials.len(), 6);
        // Pushes are paired: the same trial start shows up for every method.
        let trace_csv = out.trace_csv().expect("push preset emits a trace");
        assert!(trace_csv.starts_with("# schema: compare-trace v1\nt,mcts-full,trot-1.4hz,trot-2.0hz\n"));
        let agg = out.aggregate_csv();
        assert_eq!(agg.lines().count(), 2 + 3);
        let trials = out.trials_csv();
        assert_eq!(trials.lines().count(), 2 + 6);
    }

    #[test]
    fn eod_sim_sets_slope_and_speed() {
        let sim = eod_sim(&SimConfig::<f64>::default());
        match sim.terrain {
            Terrain::Slope { angle } => assert_relative_eq!(angle, 0.17453, epsilon = 1e-4),
            Terrain::Flat => panic!("expected slope"),
        }
        assert_relative_eq!(sim.command.v_xy.x, 0.6);
    }
}
