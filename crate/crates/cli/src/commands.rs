//! The seven subcommands: thin orchestration around the library, mapping
//! errors onto the process exit codes (2 configuration, 3 failed episode,
//! 4 I/O).

use crate::config::{KindSpec, RunConfig};
use gaitplan::contact::{read_gait_csv, write_gait_csv, ContactError, GaitSequence};
use gaitplan::experiments::{
    ablation_csv, ablation_sweep, compare_experiment, eod_sim, AblationConfig, CompareConfig,
    ComparePreset,
};
use gaitplan::fmt::{format_g, schema_line, SIG_DATA};
use gaitplan::mcts::{plan, PlanError, SequenceEstimator};
use gaitplan::mlp::{holdout_split, train_regression, MlpError, MlpModel};
use gaitplan::seed::{label, split_seed};
use gaitplan::sim::{
    run_episode, run_episode_logged, standing_input, PlannerKind, SimError,
};
use gaitplan::vf::{
    dataset_matrices, log_tree, read_dataset, write_dataset, LogSummary, TrainingSample,
    ValueFunction, VfError, AP_CLASSES, VF_INPUT_DIM,
};
use nalgebra::DMatrix;
use std::path::Path;
use thiserror::Error;

/// Command failure carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("episode failed: {0}")]
    Episode(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Episode(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ContactError> for CliError {
    fn from(e: ContactError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MlpError> for CliError {
    fn from(e: MlpError) -> Self {
        match e {
            MlpError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<VfError> for CliError {
    fn from(e: VfError) -> Self {
        match e {
            VfError::Io(io) => CliError::Io(io.to_string()),
            VfError::Model(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("read {}: {e}", path.display())))
}

/// Loads the planner's value model; any problem is a configuration error
/// naming `paths.model`, matching the planner contract.
fn load_vf(cfg: &RunConfig) -> Result<ValueFunction<f64>, CliError> {
    let path = cfg.paths.model.as_deref().ok_or_else(|| {
        CliError::Config("paths.model: required when the planner uses a value model".into())
    })?;
    ValueFunction::load(path)
        .map_err(|e| CliError::Config(format!("paths.model ({}): {e}", path.display())))
}

fn load_policy(cfg: &RunConfig) -> Result<MlpModel<f64>, CliError> {
    let path = cfg.paths.model.as_deref().ok_or_else(|| {
        CliError::Config("paths.model: required for the action-policy planner".into())
    })?;
    let model = MlpModel::<f64>::load(path)
        .map_err(|e| CliError::Config(format!("paths.model ({}): {e}", path.display())))?;
    if model.input_dim() != VF_INPUT_DIM || model.output_dim() != AP_CLASSES {
        return Err(CliError::Config(format!(
            "paths.model ({}): action policy must map {VF_INPUT_DIM} features to {AP_CLASSES} \
             classes, got {} -> {}",
            path.display(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    Ok(model)
}

fn load_schedule(cfg: &RunConfig) -> Result<GaitSequence<f64>, CliError> {
    let path = cfg.paths.schedule.as_deref().ok_or_else(|| {
        CliError::Config("paths.schedule: required for schedule replay".into())
    })?;
    let text = read_file(path)?;
    read_gait_csv(&text)
        .map_err(|e| CliError::Config(format!("paths.schedule ({}): {e}", path.display())))
}

fn build_kind(cfg: &RunConfig) -> Result<PlannerKind<f64>, CliError> {
    Ok(match cfg.kind {
        KindSpec::MctsFull => PlannerKind::MctsFull,
        KindSpec::MctsVf => PlannerKind::MctsVf(load_vf(cfg)?),
        KindSpec::MctsHybrid => PlannerKind::MctsHybrid(load_vf(cfg)?),
        KindSpec::Periodic => PlannerKind::Periodic(cfg.gait),
        KindSpec::ActionPolicy => PlannerKind::ActionPolicy(load_policy(cfg)?),
        KindSpec::Replay => PlannerKind::Replay(load_schedule(cfg)?),
    })
}

/// One plan call from the (possibly overridden) standing start; writes the
/// schedule and tree dump and prints both the schedule and the statistics.
pub fn plan_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let mut context = cfg.context.clone();
    let g_norm = context.robot.inertia.gravity.norm();
    context.robot.inertia = context
        .robot
        .inertia
        .clone()
        .with_gravity(cfg.sim.terrain.gravity(g_norm))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut input = standing_input(&context, &cfg.planner.feasibility);
    if let Some(p) = cfg.state.p {
        input.state.p = p;
    }
    if let Some(v) = cfg.state.v {
        input.state.v = v;
    }
    if let Some(phi) = cfg.state.phi {
        input.state.phi = phi;
    }
    if let Some(omega) = cfg.state.omega {
        input.state.omega = omega;
    }

    let estimator = if cfg.planner.vf_enabled {
        Some(load_vf(cfg)?)
    } else {
        None
    };
    let outcome = plan(
        &input,
        &cfg.planner,
        estimator.as_ref().map(|vf| vf as &dyn SequenceEstimator<f64>),
        split_seed(cfg.seed, label::PLAN, 0),
    )?;

    let gait_csv = write_gait_csv(&outcome.sequence);
    write_file(&out.join("plan.csv"), &gait_csv)?;
    write_file(&out.join("tree.csv"), &outcome.tree.to_csv())?;
    print!("{gait_csv}");
    let s = &outcome.stats;
    println!(
        "iterations={} nodes={} rollouts={} wall_ms={:.3} rollout_scored_fraction={:.4} \
         truncated={} converged={}",
        s.iterations, s.nodes, s.rollouts, s.wall_ms, s.rollout_scored_fraction, s.truncated,
        s.converged
    );
    Ok(())
}

/// One closed-loop episode; metrics land in `metrics.csv` before a failed
/// episode is reported, so the trace survives for inspection.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let kind = build_kind(cfg)?;
    let metrics = run_episode(&kind, &cfg.sim, &cfg.pushes, &cfg.planner, &cfg.context, cfg.seed)?;
    write_file(&out.join("metrics.csv"), &metrics.to_csv())?;
    println!(
        "rows={} plans={} mean_cost={} peak_vlat={} recovery={} failed={}",
        metrics.rows.len(),
        metrics.plans,
        format_g(metrics.mean_cost, SIG_DATA),
        format_g(metrics.peak_vlat, SIG_DATA),
        metrics
            .recovery
            .map(|r| format_g(r, SIG_DATA))
            .unwrap_or_else(|| "nan".to_string()),
        metrics.failed
    );
    if metrics.failed {
        let t_end = metrics.rows.last().map(|r| r.t).unwrap_or(0.0);
        return Err(CliError::Episode(format!(
            "episode diverged near t={t_end:.3} s; see {}",
            out.join("metrics.csv").display()
        )));
    }
    Ok(())
}

/// One-axis sweep over the push protocol.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    if cfg.ablate.grid.is_empty() {
        return Err(CliError::Config(
            "ablate.grid: must be a nonempty number array".into(),
        ));
    }
    let acfg = AblationConfig {
        axis: cfg.ablate.axis,
        grid: cfg.ablate.grid.clone(),
        protocol: cfg.protocol.clone(),
        sim: cfg.sim.clone(),
        planner: cfg.planner.clone(),
        context: cfg.context.clone(),
        seed: cfg.seed,
    };
    let rows = ablation_sweep(&acfg)?;
    write_file(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    println!(
        "axis={} points={} episodes_per_point={}",
        cfg.ablate.axis.name(),
        rows.len(),
        cfg.protocol.fractions.len() * cfg.protocol.trials_per_fraction
    );
    Ok(())
}

/// One comparison preset; paired trials, aggregates and, for the push
/// comparison, the mean lateral-velocity trace.
pub fn compare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let preset = cfg.compare.preset;
    let needs_vf = matches!(
        preset,
        ComparePreset::BaselineIdOd | ComparePreset::EodRolloutImpact
    );
    let vf = if needs_vf && cfg.paths.model.is_some() {
        Some(load_vf(cfg)?)
    } else {
        None
    };
    let sim = if preset == ComparePreset::EodRolloutImpact {
        eod_sim(&cfg.sim)
    } else {
        cfg.sim.clone()
    };
    let ccfg = CompareConfig {
        preset,
        trials: cfg.compare.trials,
        protocol: cfg.protocol.clone(),
        sim,
        planner: cfg.planner.clone(),
        context: cfg.context.clone(),
        vf,
        quota: cfg.compare.quota,
        seed: cfg.seed,
    };
    let outcome = compare_experiment(&ccfg)?;
    write_file(&out.join("aggregate.csv"), &outcome.aggregate_csv())?;
    write_file(&out.join("trials.csv"), &outcome.trials_csv())?;
    if let Some(trace) = outcome.trace_csv() {
        write_file(&out.join("trace.csv"), &trace)?;
    }
    println!(
        "preset={} methods={} trials={}",
        preset.name(),
        outcome.methods.join(","),
        cfg.compare.trials
    );
    Ok(())
}

/// Runs episodes with a rollout-backed tree planner and logs one training
/// sample per rollout-scored node; the per-plan tree dumps go to `trees/`
/// so the dataset row count can be cross-checked from the artifacts.
pub fn gen_dataset(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    if !matches!(cfg.kind, KindSpec::MctsFull | KindSpec::MctsHybrid) {
        return Err(CliError::Config(
            "sim.planner_kind: dataset generation needs a rollout-backed tree \
             (mcts_full or mcts_hybrid)"
                .into(),
        ));
    }
    let kind = build_kind(cfg)?;
    let trees_dir = out.join("trees");
    ensure_dir(&trees_dir)?;

    let mut samples: Vec<TrainingSample<f64>> = Vec::new();
    let mut summary = LogSummary::default();
    let mut dumps: Vec<String> = Vec::new();
    let mut log_error: Option<VfError> = None;
    let mut failed_episodes = 0usize;
    for episode in 0..cfg.gen_episodes {
        let mut hook = |input: &gaitplan::mcts::PlanInput<f64>,
                        outcome: &gaitplan::mcts::PlanOutcome<f64>| {
            dumps.push(outcome.tree.to_csv());
            match log_tree(&outcome.tree, input, &mut samples) {
                Ok(s) => {
                    summary.appended += s.appended;
                    summary.excluded_penalized += s.excluded_penalized;
                    summary.excluded_deep += s.excluded_deep;
                }
                Err(e) => log_error = log_error.take().or(Some(e)),
            }
        };
        let metrics = run_episode_logged(
            &kind,
            &cfg.sim,
            &cfg.pushes,
            &cfg.planner,
            &cfg.context,
            split_seed(cfg.seed, label::INSTANCE, episode as u64),
            &mut hook,
        )?;
        if metrics.failed {
            failed_episodes += 1;
        }
    }
    if let Some(e) = log_error {
        return Err(e.into());
    }
    for (k, dump) in dumps.iter().enumerate() {
        write_file(&trees_dir.join(format!("tree_{k:04}.csv")), dump)?;
    }

    let dataset_path = cfg
        .paths
        .dataset
        .clone()
        .unwrap_or_else(|| out.join("dataset.csv"));
    write_dataset(&dataset_path, &samples).map_err(|e| match e {
        VfError::Io(io) => CliError::Io(format!("write {}: {io}", dataset_path.display())),
        other => other.into(),
    })?;
    println!(
        "episodes={} failed_episodes={} plans={} appended={} excluded_penalized={} \
         excluded_deep={} dataset={}",
        cfg.gen_episodes,
        failed_episodes,
        dumps.len(),
        summary.appended,
        summary.excluded_penalized,
        summary.excluded_deep,
        dataset_path.display()
    );
    Ok(())
}

fn require_dataset(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.paths
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.dataset: required".into()))
}

fn load_samples(path: &Path) -> Result<Vec<TrainingSample<f64>>, CliError> {
    read_dataset(path).map_err(|e| match e {
        VfError::Io(io) => CliError::Io(format!("read {}: {io}", path.display())),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, usize, f64) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n.max(1) as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    (mean, n, var.sqrt())
}

/// Trains the value regressor and writes the model, the loss curves and the
/// held-out RMSE (raw target units, same split the trainer validated on).
pub fn train_vf(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let samples = load_samples(require_dataset(cfg)?)?;
    let (x, y) = dataset_matrices(&samples);
    let report = train_regression(&x, &y, &cfg.train)?;
    let model_path = cfg
        .paths
        .model
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.model: required as the save target".into()))?;
    report.model.save(model_path).map_err(|e| match e {
        MlpError::Io(io) => CliError::Io(format!("write {}: {io}", model_path.display())),
        other => other.into(),
    })?;

    let mut curve = String::new();
    curve.push_str(&schema_line("loss-curve"));
    curve.push('\n');
    curve.push_str("epoch,train_loss,val_loss\n");
    for (epoch, (tr, va)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        curve.push_str(&format!(
            "{epoch},{},{}\n",
            format_g(*tr, SIG_DATA),
            format_g(*va, SIG_DATA)
        ));
    }
    write_file(&out.join("loss_curve.csv"), &curve)?;

    // Held-out RMSE in raw units on the trainer's own validation split.
    let (order, val_count) = holdout_split(samples.len(), cfg.train.val_fraction, cfg.train.seed);
    let val = &order[..val_count];
    let xv = DMatrix::from_fn(val.len(), x.ncols(), |i, j| x[(val[i], j)]);
    let pred = report.model.predict(&xv)?;
    let mse = val
        .iter()
        .enumerate()
        .map(|(i, &row)| (pred[(i, 0)] - y[row]).powi(2))
        .sum::<f64>()
        / val.len() as f64;
    let val_rmse = mse.sqrt();
    let (_, _, target_std) = mean_std(y.iter().copied());
    let mut metrics = String::new();
    metrics.push_str(&schema_line("train-metrics"));
    metrics.push('\n');
    metrics.push_str("best_epoch,val_rmse,target_std,rmse_over_std\n");
    metrics.push_str(&format!(
        "{},{},{},{}\n",
        report.best_epoch,
        format_g(val_rmse, SIG_DATA),
        format_g(target_std, SIG_DATA),
        format_g(val_rmse / target_std, SIG_DATA)
    ));
    write_file(&out.join("train_metrics.csv"), &metrics)?;
    println!(
        "rows={} best_epoch={} val_rmse={} target_std={} model={}",
        samples.len(),
        report.best_epoch,
        format_g(val_rmse, SIG_DATA),
        format_g(target_std, SIG_DATA),
        model_path.display()
    );
    Ok(())
}

/// Scores a model file over a whole dataset and writes the RMSE next to the
/// target spread.
pub fn eval_vf(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let model_path = cfg
        .paths
        .model
        .as_deref()
        .ok_or_else(|| CliError::Config("paths.model: required".into()))?;
    let model = MlpModel::<f64>::load(model_path).map_err(|e| match e {
        MlpError::Io(io) => CliError::Io(format!("read {}: {io}", model_path.display())),
        other => CliError::Config(format!("paths.model ({}): {other}", model_path.display())),
    })?;
    if model.input_dim() != VF_INPUT_DIM || model.output_dim() != 1 {
        return Err(CliError::Config(format!(
            "paths.model ({}): value model must map {VF_INPUT_DIM} features to 1 output, \
             got {} -> {}",
            model_path.display(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let samples = load_samples(require_dataset(cfg)?)?;
    let (x, y) = dataset_matrices(&samples);
    let pred = model.predict(&x)?;
    let mse = (0..y.len())
        .map(|i| (pred[(i, 0)] - y[i]).powi(2))
        .sum::<f64>()
        / y.len() as f64;
    let rmse = mse.sqrt();
    let (target_mean, rows, target_std) = mean_std(y.iter().copied());

    let mut csv = String::new();
    csv.push_str(&schema_line("eval-vf"));
    csv.push('\n');
    csv.push_str("rows,rmse,target_mean,target_std,rmse_over_std\n");
    csv.push_str(&format!(
        "{rows},{},{},{},{}\n",
        format_g(rmse, SIG_DATA),
        format_g(target_mean, SIG_DATA),
        format_g(target_std, SIG_DATA),
        format_g(rmse / target_std, SIG_DATA)
    ));
    write_file(&out.join("eval.csv"), &csv)?;
    println!(
        "rows={rows} rmse={} target_std={} rmse_over_std={}",
        format_g(rmse, SIG_DATA),
        format_g(target_std, SIG_DATA),
        format_g(rmse / target_std, SIG_DATA)
    );
    Ok(())
}
