//! The TOML configuration schema: nested sections named after the library
//! modules, resolved onto the library defaults so an empty file is a valid
//! configuration. Unknown keys are errors, and every parse or range problem
//! is reported with its full `section.key` path.

use crate::commands::CliError;
use gaitplan::contact::FeasibilityConfig;
use gaitplan::dynamics::InertiaParams;
use gaitplan::experiments::{AblationAxis, ComparePreset, PushProtocol};
use gaitplan::mcts::{Budget, PlannerConfig, SwingPenaltyMode};
use gaitplan::mlp::TrainConfig;
use gaitplan::ocp::{
    FrictionParams, OcpWeights, ReferenceConfig, RobotParams, RolloutContext, VelocityCommand,
};
use gaitplan::sim::{Disturbance, PeriodicGait, Push, SimConfig, Terrain};
use nalgebra::{SVector, Vector3};
use std::path::{Path, PathBuf};

/// Which planner drives a simulated episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindSpec {
    MctsFull,
    MctsVf,
    MctsHybrid,
    Periodic,
    ActionPolicy,
    Replay,
}

/// File locations named by the configuration.
#[derive(Debug, Clone, Default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
}

/// Ablation sweep settings.
#[derive(Debug, Clone)]
pub struct AblateSpec {
    pub axis: AblationAxis,
    pub grid: Vec<f64>,
}

/// Comparison preset settings.
#[derive(Debug, Clone)]
pub struct CompareSpec {
    pub preset: ComparePreset,
    pub trials: usize,
    pub quota: Option<u64>,
}

/// Initial-state overrides applied by the plan command.
#[derive(Debug, Clone, Default)]
pub struct StateSpec {
    pub p: Option<Vector3<f64>>,
    pub v: Option<Vector3<f64>>,
    pub phi: Option<Vector3<f64>>,
    pub omega: Option<Vector3<f64>>,
}

/// Everything the subcommands read: resolved library configs plus the CLI's
/// own knobs. The context already carries the simulated command and MPC
/// step, so planning and simulation agree.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub context: RolloutContext<f64>,
    pub planner: PlannerConfig<f64>,
    pub sim: SimConfig<f64>,
    pub kind: KindSpec,
    pub gait: PeriodicGait<f64>,
    pub pushes: Vec<Push<f64>>,
    pub protocol: PushProtocol<f64>,
    pub paths: Paths,
    pub out: Option<PathBuf>,
    pub ablate: AblateSpec,
    pub compare: CompareSpec,
    pub train: TrainConfig<f64>,
    pub gen_episodes: usize,
    pub state: StateSpec,
}

/// Allowed sections and their keys; anything else is a config error.
const SCHEMA: &[(&str, &[&str])] = &[
    ("robot", &["mass", "inertia", "hip_x", "hip_y", "height"]),
    ("ocp", &["q_x", "r_u", "mu", "fz_min", "fz_max", "k_v"]),
    (
        "planner",
        &[
            "dt_node",
            "horizon",
            "rollouts_per_node",
            "lambda",
            "t_swing_ref",
            "exploration_c",
            "alpha",
            "budget_ms",
            "budget_iterations",
            "vf_enabled",
            "rollout_quota",
            "t_swing_min",
            "t_stance_min",
        ],
    ),
    ("mode", &["deterministic", "swing_penalty_mode"]),
    (
        "sim",
        &[
            "plant_dt",
            "mpc_period",
            "replan_period",
            "duration",
            "terrain",
            "slope_angle_deg",
            "vx",
            "vy",
            "yaw_rate",
            "height",
            "planner_kind",
            "trot_frequency",
            "trot_duty",
        ],
    ),
    ("push", &["mode", "start", "arm", "fraction", "duration", "force"]),
    ("paths", &["dataset", "model", "schedule", "out"]),
    ("ablate", &["axis", "grid", "fractions", "trials_per_fraction"]),
    ("compare", &["preset", "trials", "quota"]),
    (
        "train",
        &[
            "hidden",
            "epochs",
            "batch_size",
            "lr",
            "lr_decay",
            "decay_every",
            "dropout",
            "val_fraction",
            "freeze_stats_after",
        ],
    ),
    ("gen", &["episodes"]),
    ("state", &["p", "v", "phi", "omega"]),
];

fn bad(section: &str, key: &str, want: &str, got: &toml::Value) -> CliError {
    CliError::Config(format!(
        "{section}.{key}: expected {want}, got {}",
        got.type_str()
    ))
}

/// One section's key-value view; a missing section reads as all defaults.
struct Sect<'a> {
    name: &'static str,
    table: Option<&'a toml::Table>,
}

impl<'a> Sect<'a> {
    fn get(&self, key: &str) -> Option<&'a toml::Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .map(Some)
                .ok_or_else(|| bad(self.name, key, "a number", v)),
        }
    }

    fn set(&self, key: &str, slot: &mut f64) -> Result<(), CliError> {
        if let Some(v) = self.f64(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => match v.as_integer() {
                Some(i) if i >= 0 => Ok(Some(i as usize)),
                _ => Err(bad(self.name, key, "a non-negative integer", v)),
            },
        }
    }

    fn set_usize(&self, key: &str, slot: &mut usize) -> Result<(), CliError> {
        if let Some(v) = self.usize(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .ok_or_else(|| bad(self.name, key, "a boolean", v)),
        }
    }

    fn str(&self, key: &str) -> Result<Option<&'a str>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| bad(self.name, key, "a string", v)),
        }
    }

    fn f64_array(&self, key: &str, len: Option<usize>) -> Result<Option<Vec<f64>>, CliError> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let want = match len {
            Some(n) => format!("an array of {n} numbers"),
            None => "an array of numbers".to_string(),
        };
        let items = v.as_array().ok_or_else(|| bad(self.name, key, &want, v))?;
        if len.is_some_and(|n| items.len() != n) {
            return Err(bad(self.name, key, &want, v));
        }
        items
            .iter()
            .map(|item| {
                item.as_float()
                    .or_else(|| item.as_integer().map(|i| i as f64))
                    .ok_or_else(|| bad(self.name, key, &want, v))
            })
            .collect::<Result<Vec<f64>, CliError>>()
            .map(Some)
    }

    fn vector3(&self, key: &str) -> Result<Option<Vector3<f64>>, CliError> {
        Ok(self
            .f64_array(key, Some(3))?
            .map(|v| Vector3::new(v[0], v[1], v[2])))
    }

    fn usize_array(&self, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let want = "an array of non-negative integers";
        let items = v.as_array().ok_or_else(|| bad(self.name, key, want, v))?;
        items
            .iter()
            .map(|item| match item.as_integer() {
                Some(i) if i >= 0 => Ok(i as usize),
                _ => Err(bad(self.name, key, want, v)),
            })
            .collect::<Result<Vec<usize>, CliError>>()
            .map(Some)
    }
}

fn sect<'a>(root: &'a toml::Table, name: &'static str) -> Result<Sect<'a>, CliError> {
    match root.get(name) {
        None => Ok(Sect { name, table: None }),
        Some(v) => {
            let table = v.as_table().ok_or_else(|| {
                CliError::Config(format!("{name}: expected a table of keys, got {}", v.type_str()))
            })?;
            Ok(Sect {
                name,
                table: Some(table),
            })
        }
    }
}

fn check_keys(root: &toml::Table) -> Result<(), CliError> {
    for (section, value) in root {
        let Some((_, keys)) = SCHEMA.iter().find(|(name, _)| name == section) else {
            return Err(CliError::Config(format!("unknown config key: {section}")));
        };
        if let Some(table) = value.as_table() {
            for key in table.keys() {
                if !keys.contains(&key.as_str()) {
                    return Err(CliError::Config(format!(
                        "unknown config key: {section}.{key}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Reads and resolves `path`; `seed` and `deterministic` come from the
/// command line and override nothing in the file except the budget form.
pub fn load(path: &Path, seed: u64, deterministic_flag: bool) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    let root: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    check_keys(&root)?;
    resolve(&root, seed, deterministic_flag)
}

fn resolve(root: &toml::Table, seed: u64, deterministic_flag: bool) -> Result<RunConfig, CliError> {
    // Robot.
    let s = sect(root, "robot")?;
    let mut mass = 22.0;
    let mut inertia_diag = [0.24, 0.85, 0.94];
    let mut hip_x = 0.24;
    let mut hip_y = 0.13;
    let mut robot_height = 0.40;
    s.set("mass", &mut mass)?;
    if let Some(v) = s.f64_array("inertia", Some(3))? {
        inertia_diag = [v[0], v[1], v[2]];
    }
    s.set("hip_x", &mut hip_x)?;
    s.set("hip_y", &mut hip_y)?;
    s.set("height", &mut robot_height)?;
    let inertia =
        InertiaParams::diagonal(mass, inertia_diag[0], inertia_diag[1], inertia_diag[2])
            .map_err(|e| CliError::Config(format!("robot: {e}")))?;
    let g_norm = inertia.gravity.norm();
    let robot = RobotParams {
        inertia,
        hip_offsets: [
            Vector3::new(hip_x, hip_y, 0.0),
            Vector3::new(hip_x, -hip_y, 0.0),
            Vector3::new(-hip_x, hip_y, 0.0),
            Vector3::new(-hip_x, -hip_y, 0.0),
        ],
        nominal_height: robot_height,
    };

    // OCP weights, friction and foothold gain.
    let s = sect(root, "ocp")?;
    let mut weights = OcpWeights::default();
    if let Some(q) = s.f64_array("q_x", Some(12))? {
        weights.q_x = SVector::from_iterator(q);
    }
    s.set("r_u", &mut weights.r_u)?;
    let mut friction = FrictionParams::for_mass(mass, g_norm);
    s.set("mu", &mut friction.mu)?;
    s.set("fz_min", &mut friction.fz_min)?;
    s.set("fz_max", &mut friction.fz_max)?;
    let mut reference_cfg = ReferenceConfig::default();
    s.set("k_v", &mut reference_cfg.k_v)?;

    // Mode flags.
    let s = sect(root, "mode")?;
    let deterministic = deterministic_flag || s.bool("deterministic")?.unwrap_or(false);
    let swing_penalty_mode = match s.str("swing_penalty_mode")? {
        None | Some("signed") => SwingPenaltyMode::Signed,
        Some("absolute") => SwingPenaltyMode::Absolute,
        Some(other) => {
            return Err(CliError::Config(format!(
                "mode.swing_penalty_mode: expected \"signed\" or \"absolute\", got {other:?}"
            )));
        }
    };

    // Planner.
    let s = sect(root, "planner")?;
    let mut planner = PlannerConfig::<f64>::default();
    s.set("dt_node", &mut planner.dt_node)?;
    s.set("horizon", &mut planner.horizon)?;
    s.set_usize("rollouts_per_node", &mut planner.rollouts_per_node)?;
    s.set("lambda", &mut planner.lambda)?;
    s.set("t_swing_ref", &mut planner.t_swing_ref)?;
    s.set("exploration_c", &mut planner.exploration_c)?;
    s.set("alpha", &mut planner.alpha)?;
    if let Some(v) = s.bool("vf_enabled")? {
        planner.vf_enabled = v;
    }
    if let Some(q) = s.usize("rollout_quota")? {
        planner.rollout_quota = Some(q as u64);
    }
    let mut feasibility = FeasibilityConfig::default();
    s.set("t_swing_min", &mut feasibility.t_swing_min)?;
    s.set("t_stance_min", &mut feasibility.t_stance_min)?;
    planner.feasibility = feasibility;
    planner.swing_penalty_mode = swing_penalty_mode;
    let mut budget_ms = 80.0;
    let mut budget_iterations = 32usize;
    s.set("budget_ms", &mut budget_ms)?;
    s.set_usize("budget_iterations", &mut budget_iterations)?;
    planner.budget = if deterministic {
        Budget::Iterations(budget_iterations)
    } else {
        Budget::WallClockMs(budget_ms)
    };

    // Simulation.
    let s = sect(root, "sim")?;
    let mut sim = SimConfig::<f64>::default();
    s.set("plant_dt", &mut sim.plant_dt)?;
    s.set("mpc_period", &mut sim.mpc_period)?;
    s.set("replan_period", &mut sim.replan_period)?;
    s.set("duration", &mut sim.duration)?;
    let mut slope_angle_deg = 10.0;
    s.set("slope_angle_deg", &mut slope_angle_deg)?;
    sim.terrain = match s.str("terrain")? {
        None | Some("flat") => Terrain::Flat,
        Some("slope") => Terrain::Slope {
            angle: slope_angle_deg.to_radians(),
        },
        Some(other) => {
            return Err(CliError::Config(format!(
                "sim.terrain: expected \"flat\" or \"slope\", got {other:?}"
            )));
        }
    };
    let mut cmd = VelocityCommand::<f64>::default();
    cmd.height = robot.nominal_height;
    s.set("vx", &mut cmd.v_xy.x)?;
    s.set("vy", &mut cmd.v_xy.y)?;
    s.set("yaw_rate", &mut cmd.yaw_rate)?;
    s.set("height", &mut cmd.height)?;
    sim.command = cmd;
    let kind = match s.str("planner_kind")? {
        None | Some("mcts_full") => KindSpec::MctsFull,
        Some("mcts_vf") => KindSpec::MctsVf,
        Some("mcts_hybrid") => KindSpec::MctsHybrid,
        Some("periodic") => KindSpec::Periodic,
        Some("action_policy") => KindSpec::ActionPolicy,
        Some("replay") => KindSpec::Replay,
        Some(other) => {
            return Err(CliError::Config(format!(
                "sim.planner_kind: unknown planner kind {other:?} (mcts_full, mcts_vf, \
                 mcts_hybrid, periodic, action_policy, replay)"
            )));
        }
    };
    let mut trot_frequency = 1.4;
    s.set("trot_frequency", &mut trot_frequency)?;
    let mut gait = PeriodicGait::trot(trot_frequency);
    s.set("trot_duty", &mut gait.duty)?;
    if kind == KindSpec::Periodic {
        gait.validate().map_err(|e| CliError::Config(format!("sim: {e}")))?;
    }

    // Pushes.
    let s = sect(root, "push")?;
    let mut push_start = 0.3;
    let mut push_arm = 0.2;
    let mut push_fraction = 0.4;
    let mut push_duration = 0.1;
    let mut push_force = Vector3::new(0.0, 150.0, 0.0);
    s.set("start", &mut push_start)?;
    s.set("arm", &mut push_arm)?;
    s.set("fraction", &mut push_fraction)?;
    s.set("duration", &mut push_duration)?;
    if let Some(f) = s.vector3("force")? {
        push_force = f;
    }
    let pushes = match s.str("mode")? {
        None | Some("none") => Vec::new(),
        Some("timed") => vec![Push::Timed(Disturbance {
            start: push_start,
            duration: push_duration,
            force: push_force,
        })],
        Some("swing_phased") => vec![Push::SwingPhased {
            arm: push_arm,
            fraction: push_fraction,
            duration: push_duration,
            force: push_force,
        }],
        Some(other) => {
            return Err(CliError::Config(format!(
                "push.mode: expected \"none\", \"timed\" or \"swing_phased\", got {other:?}"
            )));
        }
    };

    // Paths.
    let s = sect(root, "paths")?;
    let paths = Paths {
        dataset: s.str("dataset")?.map(PathBuf::from),
        model: s.str("model")?.map(PathBuf::from),
        schedule: s.str("schedule")?.map(PathBuf::from),
    };
    let out = s.str("out")?.map(PathBuf::from);

    // Ablation sweep and its push protocol.
    let s = sect(root, "ablate")?;
    let axis = match s.str("axis")? {
        None => AblationAxis::NumSimulations,
        Some(name) => AblationAxis::parse(name).ok_or_else(|| {
            CliError::Config(format!(
                "ablate.axis: unknown axis {name:?} (tree_dt, num_simulations, horizon, \
                 replan_freq)"
            ))
        })?,
    };
    let grid = s.f64_array("grid", None)?.unwrap_or_default();
    let mut protocol = PushProtocol::<f64> {
        force: push_force,
        duration: push_duration,
        arm: push_arm,
        ..Default::default()
    };
    if let Some(f) = s.f64_array("fractions", None)? {
        protocol.fractions = f;
    }
    s.set_usize("trials_per_fraction", &mut protocol.trials_per_fraction)?;
    let ablate = AblateSpec { axis, grid };

    // Comparison preset.
    let s = sect(root, "compare")?;
    let preset = match s.str("preset")? {
        None => ComparePreset::PeriodicVsMcts,
        Some(name) => ComparePreset::parse(name).ok_or_else(|| {
            CliError::Config(format!(
                "compare.preset: unknown preset {name:?} (baseline_id_od, \
                 eod_rollout_impact, periodic_vs_mcts)"
            ))
        })?,
    };
    let mut trials = 20usize;
    s.set_usize("trials", &mut trials)?;
    let quota = s.usize("quota")?.map(|q| q as u64);
    let compare = CompareSpec {
        preset,
        trials,
        quota,
    };

    // Training.
    let s = sect(root, "train")?;
    let mut train = TrainConfig::<f64>::default();
    if let Some(h) = s.usize_array("hidden")? {
        train.hidden = h;
    }
    s.set_usize("epochs", &mut train.epochs)?;
    s.set_usize("batch_size", &mut train.batch_size)?;
    s.set("lr", &mut train.lr)?;
    s.set("lr_decay", &mut train.lr_decay)?;
    s.set_usize("decay_every", &mut train.decay_every)?;
    s.set("dropout", &mut train.dropout)?;
    s.set("val_fraction", &mut train.val_fraction)?;
    if let Some(f) = s.usize("freeze_stats_after")? {
        train.freeze_stats_after = Some(f);
    }
    train.seed = seed;

    // Dataset generation.
    let s = sect(root, "gen")?;
    let mut gen_episodes = 2usize;
    s.set_usize("episodes", &mut gen_episodes)?;

    // Initial-state overrides.
    let s = sect(root, "state")?;
    let state = StateSpec {
        p: s.vector3("p")?,
        v: s.vector3("v")?,
        phi: s.vector3("phi")?,
        omega: s.vector3("omega")?,
    };

    // One source of truth: the context plans with the simulated command and
    // MPC step.
    let context = RolloutContext {
        robot,
        weights: OcpWeights {
            h: sim.mpc_period,
            ..weights
        },
        friction,
        reference_cfg,
        cmd: sim.command,
        qp_cfg: Default::default(),
    };

    planner
        .validate()
        .map_err(|e| CliError::Config(format!("planner: {e}")))?;
    sim.validate()
        .map_err(|e| CliError::Config(format!("sim: {e}")))?;

    Ok(RunConfig {
        seed,
        context,
        planner,
        sim,
        kind,
        gait,
        pushes,
        protocol,
        paths,
        out,
        ablate,
        compare,
        train,
        gen_episodes,
        state,
    })
}
