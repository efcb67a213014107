//! Closed-loop plan-on-model simulation.
//!
//! The same rigid body serves as planning model and plant. Three nested
//! clocks drive an episode:
//!
//! ```text
//! plant step    0.002 s  RK4 integration of the applied forces
//! mpc period    0.04  s  QP solve on the active schedule, force update
//!                        (zero-order hold), metrics sample
//! replan period 0.08  s  planner call producing a fresh schedule
//! ```
//!
//! Planners are interchangeable: full-rollout search, value-function-only
//! search, the hybrid blend, fixed periodic gaits, the next-contact
//! classification head, or a verbatim replay of a recorded schedule.
//! Disturbances are external CoM forces; because a CoM force is exactly a
//! uniform acceleration, the plant applies it as a temporary gravity
//! offset, and the controller never sees it coming. Sloped terrain works
//! in surface coordinates: the contact plane stays at z = 0 and gravity
//! acquires a downhill component.

use crate::contact::{
    to_mpc_schedule, transition, ContactError, ContactState, FeasibilityConfig, GaitSequence,
    LegSet,
};
use crate::dynamics::{step, DynamicsError, FootState, Integrator, SrbState, NUM_LEGS};
use crate::fmt::{format_g, schema_line, SIG_DATA};
use crate::mcts::{plan, PlanError, PlanInput, PlanOutcome, PlannerConfig, SequenceEstimator};
use crate::mlp::MlpModel;
use crate::ocp::{build_ocp, build_reference, raibert_foothold, solve_tracking, RolloutContext};
use crate::scalar::{real, Real};
use crate::seed::{label, split_seed};
use crate::vf::{action_policy_sequence, ValueFunction, VfError};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Vf(#[from] VfError),
}

/// Ground model; slopes tilt gravity instead of the contact plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terrain<T: Real> {
    Flat,
    /// Incline angle in radians; commands along +x walk uphill.
    Slope { angle: T },
}

impl<T: Real> Default for Terrain<T> {
    fn default() -> Self {
        Terrain::Flat
    }
}

impl<T: Real> Terrain<T> {
    /// Gravity in surface coordinates for a field of magnitude `g_norm`.
    pub fn gravity(&self, g_norm: T) -> Vector3<T> {
        match *self {
            Terrain::Flat => Vector3::new(T::zero(), T::zero(), -g_norm),
            Terrain::Slope { angle } => {
                Vector3::new(-g_norm * angle.sin(), T::zero(), -g_norm * angle.cos())
            }
        }
    }
}

/// Episode clocks, ground, and operator command.
#[derive(Debug, Clone)]
pub struct SimConfig<T: Real> {
    pub plant_dt: T,
    pub mpc_period: T,
    pub replan_period: T,
    pub duration: T,
    pub terrain: Terrain<T>,
    pub command: crate::ocp::VelocityCommand<T>,
}

impl<T: Real> Default for SimConfig<T> {
    fn default() -> Self {
        Self {
            plant_dt: real(0.002),
            mpc_period: real(0.04),
            replan_period: real(0.08),
            duration: real(2.0),
            terrain: Terrain::Flat,
            command: Default::default(),
        }
    }
}

fn tick_multiple<T: Real>(period: T, base: T, what: &str) -> Result<usize, SimError> {
    let ratio = (period / base).to_f64();
    let k = ratio.round();
    if (ratio - k).abs() > 1e-9 * k.max(1.0) || k < 1.0 {
        return Err(SimError::Config(format!(
            "{what} must be a positive integer multiple, got ratio {ratio}"
        )));
    }
    Ok(k as usize)
}

impl<T: Real> SimConfig<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        for (value, name) in [
            (self.plant_dt, "plant_dt"),
            (self.mpc_period, "mpc_period"),
            (self.replan_period, "replan_period"),
            (self.duration, "duration"),
        ] {
            if !(value > T::zero()) || !value.is_finite() {
                return Err(SimError::Config(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        tick_multiple(self.mpc_period, self.plant_dt, "mpc_period / plant_dt")?;
        tick_multiple(
            self.replan_period,
            self.mpc_period,
            "replan_period / mpc_period",
        )?;
        Ok(())
    }
}

/// A CoM force over a fixed time window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance<T: Real> {
    pub start: T,
    pub duration: T,
    pub force: Vector3<T>,
}

impl<T: Real> Disturbance<T> {
    /// The standard lateral shove: 150 N along +y for 100 ms.
    pub fn lateral(start: T) -> Self {
        Self {
            start,
            duration: real(0.1),
            force: Vector3::new(T::zero(), real(150.0), T::zero()),
        }
    }
}

/// A disturbance scheduled either absolutely or relative to the executed
/// swing phase of the left-front leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Push<T: Real> {
    Timed(Disturbance<T>),
    /// Starts `fraction` of the minimum swing time after the left-front
    /// leg's first liftoff at or after `arm`.
    SwingPhased {
        arm: T,
        fraction: T,
        duration: T,
        force: Vector3<T>,
    },
}

/// A fixed stepping pattern: leg `i` stands iff
/// `frac(t * frequency + offset_i) < duty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicGait<T: Real> {
    pub frequency: T,
    pub duty: T,
    pub offsets: [T; NUM_LEGS],
}

impl<T: Real> PeriodicGait<T> {
    /// Diagonal-pair trot at the given step frequency, duty factor 0.6.
    pub fn trot(frequency: T) -> Self {
        let half = real(0.5);
        Self {
            frequency,
            duty: real(0.6),
            offsets: [T::zero(), half, half, T::zero()],
        }
    }

    /// Degenerate gait that keeps every leg on the ground.
    pub fn stand() -> Self {
        Self {
            frequency: T::one(),
            duty: T::one(),
            offsets: [T::zero(); NUM_LEGS],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.frequency > T::zero()) || !self.frequency.is_finite() {
            return Err(SimError::Config(format!(
                "step frequency must be positive, got {}",
                self.frequency
            )));
        }
        if !(self.duty > T::zero()) || self.duty > T::one() {
            return Err(SimError::Config(format!(
                "duty factor must lie in (0, 1], got {}",
                self.duty
            )));
        }
        Ok(())
    }
}

/// Samples the gait over `n` steps of length `h` starting at time `t`.
pub fn periodic_schedule<T: Real>(gait: &PeriodicGait<T>, t: T, n: usize, h: T) -> Vec<LegSet> {
    (0..n)
        .map(|k| {
            let tk = t + h * real(k as f64);
            std::array::from_fn(|leg| {
                let phase = tk * gait.frequency + gait.offsets[leg];
                let frac = phase - phase.floor();
                frac < gait.duty
            })
        })
        .collect()
}

/// How the episode obtains its contact schedules.
#[derive(Debug, Clone)]
pub enum PlannerKind<T: Real> {
    /// Search scored by QP rollouts alone.
    MctsFull,
    /// Search scored by the value function alone (no rollouts).
    MctsVf(ValueFunction<T>),
    /// Search blending rollouts and the value function under the
    /// configured alpha and rollout quota.
    MctsHybrid(ValueFunction<T>),
    /// Fixed periodic pattern sampled on the node grid.
    Periodic(PeriodicGait<T>),
    /// Next-contact classification head queried step by step.
    ActionPolicy(MlpModel<T>),
    /// Replays a recorded schedule; the last step holds if time runs out.
    Replay(GaitSequence<T>),
}

/// One metrics sample, taken every MPC period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow<T: Real> {
    pub t: T,
    /// Executed stage cost `h * (e_x' Q e_x + e_u' R e_u)`.
    pub cost: T,
    pub v: Vector3<T>,
    pub p: Vector3<T>,
    /// Executed contact flags, `true` = stance.
    pub contact: LegSet,
}

/// Episode result: the time series plus its aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics<T: Real> {
    pub rows: Vec<MetricsRow<T>>,
    pub mean_cost: T,
    pub peak_vlat: T,
    pub peak_vlat_time: T,
    /// Seconds from the end of the last push until the lateral velocity
    /// settles, when it does.
    pub recovery: Option<T>,
    /// The loop lost the plant: repeated QP failures, an invalid state,
    /// or the body dropping to the ground.
    pub failed: bool,
    pub plans: usize,
    pub mean_plan_wall_ms: f64,
    pub mean_rollout_fraction: f64,
    /// Push windows as resolved at run time, `(start, end)` pairs.
    pub push_windows: Vec<(T, T)>,
}

pub const METRICS_SCHEMA: &str = "sim-metrics";

impl<T: Real> Metrics<T> {
    /// Executed contact flags per sample, for legality replay.
    pub fn executed_flags(&self) -> Vec<LegSet> {
        self.rows.iter().map(|r| r.contact).collect()
    }

    /// Serializes the time series with the fixed metrics header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&schema_line(METRICS_SCHEMA));
        out.push('\n');
        out.push_str("t,cost,vx,vy,vz,vlat,px,py,pz,phase_LF,phase_RF,phase_LH,phase_RH\n");
        for row in &self.rows {
            let nums = [
                row.t.to_f64(),
                row.cost.to_f64(),
                row.v.x.to_f64(),
                row.v.y.to_f64(),
                row.v.z.to_f64(),
                row.v.y.to_f64(),
                row.p.x.to_f64(),
                row.p.y.to_f64(),
                row.p.z.to_f64(),
            ];
            let mut fields: Vec<String> =
                nums.iter().map(|&x| format_g(x, SIG_DATA)).collect();
            for flag in row.contact {
                fields.push(if flag { "1" } else { "0" }.to_string());
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// First time (in seconds after `after`) at which `|v| < threshold` holds
/// over a full `window`, scanning `(t, v)` samples; `None` if it never
/// settles. Samples past the series end do not count against the window.
pub fn recovery_time<T: Real>(
    samples: &[(T, T)],
    after: T,
    threshold: T,
    window: T,
) -> Option<T> {
    for (i, &(t0, _)) in samples.iter().enumerate() {
        if t0 < after {
            continue;
        }
        let settled = samples[i..]
            .iter()
            .take_while(|&&(t, _)| t - t0 < window)
            .all(|&(_, v)| v.abs() < threshold);
        if settled {
            return Some(t0 - after);
        }
    }
    None
}

/// Checks every interior contact phase of an executed flag timeline
/// against the minimum durations; phases touching either end are exempt.
pub fn verify_executed_flags<T: Real>(
    flags: &[LegSet],
    dt: T,
    cfg: &FeasibilityConfig<T>,
) -> Result<(), ContactError> {
    let eps = real::<T>(crate::contact::TIMER_EPS);
    for leg in 0..NUM_LEGS {
        let mut run_start = 0;
        for k in 1..=flags.len() {
            if k < flags.len() && flags[k][leg] == flags[run_start][leg] {
                continue;
            }
            if run_start > 0 && k < flags.len() {
                let elapsed = dt * real((k - run_start) as f64);
                let (minimum, phase) = if flags[run_start][leg] {
                    (cfg.t_stance_min, "stance")
                } else {
                    (cfg.t_swing_min, "swing")
                };
                if elapsed < minimum - eps {
                    return Err(ContactError::MinTimeViolation {
                        step: run_start,
                        leg: crate::contact::LEG_NAMES[leg],
                        phase,
                        elapsed: elapsed.to_f64(),
                        minimum: minimum.to_f64(),
                    });
                }
            }
            run_start = k;
        }
    }
    Ok(())
}

struct PlanLog<'a, T: Real> {
    hook: &'a mut dyn FnMut(&PlanInput<T>, &PlanOutcome<T>),
}

/// The episode's initial condition: standing at the commanded height on
/// nominal footholds, already moving at the commanded velocity, with every
/// stance timer past its minimum. The context must carry the intended
/// command.
pub fn standing_input<T: Real>(
    context: &RolloutContext<T>,
    feasibility: &FeasibilityConfig<T>,
) -> PlanInput<T> {
    let cmd = context.cmd;
    let state = SrbState {
        p: Vector3::new(T::zero(), T::zero(), cmd.height),
        v: Vector3::new(cmd.v_xy.x, cmd.v_xy.y, T::zero()),
        phi: Vector3::zeros(),
        omega: Vector3::new(T::zero(), T::zero(), cmd.yaw_rate),
    };
    let feet = FootState::all_stance(
        context
            .robot
            .nominal_footholds(&Vector2::new(state.p.x, state.p.y), state.phi.z),
    );
    PlanInput {
        state,
        feet,
        contacts: ContactState::initial_stand(feasibility),
        context: context.clone(),
    }
}

/// Runs one episode; see [`run_episode_logged`] for the planner hook.
pub fn run_episode<T: Real>(
    kind: &PlannerKind<T>,
    sim: &SimConfig<T>,
    pushes: &[Push<T>],
    planner_cfg: &PlannerConfig<T>,
    base_context: &RolloutContext<T>,
    seed: u64,
) -> Result<Metrics<T>, SimError> {
    run_inner(kind, sim, pushes, planner_cfg, base_context, seed, None)
}

/// [`run_episode`] with a hook observing every planner call, used for
/// dataset generation from closed-loop trees.
pub fn run_episode_logged<T: Real>(
    kind: &PlannerKind<T>,
    sim: &SimConfig<T>,
    pushes: &[Push<T>],
    planner_cfg: &PlannerConfig<T>,
    base_context: &RolloutContext<T>,
    seed: u64,
    hook: &mut dyn FnMut(&PlanInput<T>, &PlanOutcome<T>),
) -> Result<Metrics<T>, SimError> {
    run_inner(
        kind,
        sim,
        pushes,
        planner_cfg,
        base_context,
        seed,
        Some(PlanLog { hook }),
    )
}

fn run_inner<T: Real>(
    kind: &PlannerKind<T>,
    sim: &SimConfig<T>,
    pushes: &[Push<T>],
    planner_cfg: &PlannerConfig<T>,
    base_context: &RolloutContext<T>,
    seed: u64,
    mut log: Option<PlanLog<'_, T>>,
) -> Result<Metrics<T>, SimError> {
    sim.validate()?;
    planner_cfg.validate()?;
    if let PlannerKind::Periodic(gait) = kind {
        gait.validate()?;
    }

    let dt_node = planner_cfg.dt_node;
    let horizon_nodes = planner_cfg.horizon_steps()?;
    let mpc_every = tick_multiple(sim.mpc_period, sim.plant_dt, "mpc_period / plant_dt")?;
    let replan_every =
        tick_multiple(sim.replan_period, sim.plant_dt, "replan_period / plant_dt")?;
    let node_ticks = tick_multiple(dt_node, sim.plant_dt, "dt_node / plant_dt")?;
    tick_multiple(dt_node, sim.mpc_period, "dt_node / mpc_period")?;
    if dt_node * real(horizon_nodes as f64) < sim.replan_period {
        return Err(SimError::Config(
            "planning horizon is shorter than the replan period".to_string(),
        ));
    }
    let total_ticks = (sim.duration / sim.plant_dt).to_f64().round() as usize;

    // The sim config is the single source of truth for the command and the
    // MPC step; the terrain decides the gravity both plant and planner see.
    let mut context = base_context.clone();
    context.cmd = sim.command;
    context.weights.h = sim.mpc_period;
    let g_norm = base_context.robot.inertia.gravity.norm();
    context.robot.inertia = context
        .robot
        .inertia
        .clone()
        .with_gravity(sim.terrain.gravity(g_norm))?;

    let cmd = sim.command;
    let start = standing_input(&context, &planner_cfg.feasibility);
    let mut state = start.state;
    let mut feet = start.feet;
    let mut contacts = start.contacts;

    // Pushes resolve to concrete windows; swing-phased ones wait for the
    // left-front liftoff edge.
    let mut windows: Vec<Option<(T, T)>> = pushes
        .iter()
        .map(|p| match *p {
            Push::Timed(d) => Some((d.start, d.start + d.duration)),
            Push::SwingPhased { .. } => None,
        })
        .collect();

    let mut schedule: Option<GaitSequence<T>> = None;
    let mut base_tick = 0usize;
    let mut forces = crate::dynamics::ControlForces::zero();
    let mut consecutive_failures = 0usize;
    let mut failed = false;
    let mut plans = 0usize;
    let mut wall_ms_sum = 0.0;
    let mut rollout_fraction_sum = 0.0;
    let mut rows: Vec<MetricsRow<T>> = Vec::new();
    let mut prev_flags = contacts.contact;
    let base_params = context.robot.inertia.clone();
    let mut pushed_params = base_params.clone();
    let mut pushed_force = Vector3::zeros();

    for tick in 0..total_ticks {
        let t = sim.plant_dt * real(tick as f64);

        // Replan on the planner clock (the replay source never replans).
        let replay = matches!(kind, PlannerKind::Replay(_));
        if schedule.is_none() || (!replay && tick % replan_every == 0) {
            let input = PlanInput {
                state,
                feet,
                contacts,
                context: context.clone(),
            };
            let next = match kind {
                PlannerKind::Periodic(gait) => GaitSequence::new(
                    dt_node,
                    periodic_schedule(gait, t, horizon_nodes, dt_node),
                )?,
                PlannerKind::Replay(sequence) => sequence.clone(),
                PlannerKind::ActionPolicy(model) => GaitSequence::new(
                    dt_node,
                    action_policy_sequence(
                        model,
                        &input,
                        horizon_nodes,
                        dt_node,
                        &planner_cfg.feasibility,
                    )?,
                )?,
                PlannerKind::MctsFull | PlannerKind::MctsVf(_) | PlannerKind::MctsHybrid(_) => {
                    let mut cfg = planner_cfg.clone();
                    let estimator: Option<&dyn SequenceEstimator<T>> = match kind {
                        PlannerKind::MctsFull => {
                            cfg.vf_enabled = false;
                            cfg.alpha = T::one();
                            cfg.rollout_quota = None;
                            None
                        }
                        PlannerKind::MctsVf(vf) => {
                            cfg.vf_enabled = true;
                            cfg.alpha = T::zero();
                            cfg.rollout_quota = Some(0);
                            Some(vf)
                        }
                        PlannerKind::MctsHybrid(vf) => {
                            cfg.vf_enabled = true;
                            Some(vf)
                        }
                        _ => unreachable!(),
                    };
                    let plan_seed = split_seed(seed, label::PLAN, plans as u64);
                    let outcome = plan(&input, &cfg, estimator, plan_seed)?;
                    wall_ms_sum += outcome.stats.wall_ms;
                    rollout_fraction_sum += outcome.stats.rollout_scored_fraction;
                    if let Some(log) = log.as_mut() {
                        (log.hook)(&input, &outcome);
                    }
                    outcome.sequence
                }
            };
            if !matches!(kind, PlannerKind::Periodic(_) | PlannerKind::Replay(_)) {
                plans += 1;
            }
            schedule = Some(next);
            base_tick = tick;
        }
        let active = schedule.as_ref().expect("planned above");

        // Executed contact flags for the interval [t, t + plant_dt).
        let node_index = ((tick - base_tick) / node_ticks).min(active.len() - 1);
        let flags = active.steps[node_index];

        // Touchdowns place the foot with the same rule the reference uses;
        // liftoffs freeze it at the takeoff position.
        if flags != prev_flags {
            for leg in 0..NUM_LEGS {
                if flags[leg] && !prev_flags[leg] {
                    let mut until = node_index;
                    while until < active.len() && active.steps[until][leg] {
                        until += 1;
                    }
                    let stance_duration = dt_node * real((until - node_index) as f64);
                    let rot = crate::ocp::yaw_rotation(state.phi.z);
                    let hip_body = rot * context.robot.hip_offsets[leg];
                    let hip = Vector3::new(state.p.x + hip_body.x, state.p.y + hip_body.y, T::zero());
                    let v_meas = Vector2::new(state.v.x, state.v.y);
                    feet.pos[leg] = raibert_foothold(
                        &hip,
                        &v_meas,
                        &cmd.v_xy,
                        stance_duration,
                        context.reference_cfg.k_v,
                    );
                }
                feet.contact[leg] = flags[leg];
            }
            // A left-front liftoff resolves pending swing-phased pushes.
            if !flags[0] && prev_flags[0] {
                for (push, window) in pushes.iter().zip(windows.iter_mut()) {
                    if let Push::SwingPhased {
                        arm,
                        fraction,
                        duration,
                        ..
                    } = *push
                    {
                        if window.is_none() && t >= arm {
                            let start = t + fraction * planner_cfg.feasibility.t_swing_min;
                            *window = Some((start, start + duration));
                        }
                    }
                }
            }
            prev_flags = flags;
        }

        // MPC update and metrics sample.
        if tick % mpc_every == 0 {
            let all_rows = to_mpc_schedule(active, sim.mpc_period)?;
            let offset = (tick - base_tick) / mpc_every;
            let window: Vec<LegSet> = if offset < all_rows.len() {
                all_rows[offset..].to_vec()
            } else {
                vec![*all_rows.last().expect("nonempty schedule")]
            };
            let reference = build_reference(
                &state,
                &feet,
                &window,
                sim.mpc_period,
                &cmd,
                &context.robot,
                &context.reference_cfg,
            );
            let solved = build_ocp(
                &state,
                &reference,
                &context.robot,
                &context.weights,
                &context.friction,
            )
            .ok()
            .and_then(|ocp| solve_tracking(&ocp, &context.qp_cfg, None).ok())
            .filter(|outcome| outcome.feasible && outcome.cost.is_finite());
            match solved {
                Some(outcome) => {
                    let mut first = crate::dynamics::ControlForces::zero();
                    for leg in 0..NUM_LEGS {
                        for axis in 0..3 {
                            first.f[leg][axis] = outcome.solution.x[3 * leg + axis];
                        }
                    }
                    forces = first;
                    consecutive_failures = 0;
                }
                None => {
                    consecutive_failures += 1;
                    if consecutive_failures >= 5 {
                        failed = true;
                    }
                }
            }

            let ex = state.to_vector() - reference.states[0].to_vector();
            let eu = forces.to_vector() - reference.forces[0].to_vector();
            let mut stage = T::zero();
            for i in 0..ex.len() {
                stage += context.weights.q_x[i] * ex[i] * ex[i];
            }
            stage += context.weights.r_u * eu.dot(&eu);
            rows.push(MetricsRow {
                t,
                cost: sim.mpc_period * stage,
                v: state.v,
                p: state.p,
                contact: flags,
            });
            if failed {
                break;
            }
        }

        // Integrate the plant over [t, t + plant_dt) with any active push
        // folded into gravity.
        let mut push_force = Vector3::zeros();
        for (push, window) in pushes.iter().zip(windows.iter()) {
            if let Some((start, end)) = *window {
                if t >= start && t < end {
                    push_force += match *push {
                        Push::Timed(d) => d.force,
                        Push::SwingPhased { force, .. } => force,
                    };
                }
            }
        }
        let params = if push_force == Vector3::zeros() {
            &base_params
        } else {
            if push_force != pushed_force {
                pushed_params = base_params
                    .clone()
                    .with_gravity(base_params.gravity + push_force / base_params.mass)?;
                pushed_force = push_force;
            }
            &pushed_params
        };
        match step(&state, &forces, &feet, params, sim.plant_dt, Integrator::Rk4) {
            Ok(next) if next.is_finite() && next.p.z > real(0.05) => state = next,
            _ => {
                failed = true;
                break;
            }
        }
        contacts = transition(&contacts, &flags, sim.plant_dt);
    }

    let n = rows.len().max(1);
    let mean_cost = rows.iter().map(|r| r.cost).fold(T::zero(), |a, b| a + b)
        / real(n as f64);
    let (mut peak_vlat, mut peak_vlat_time) = (T::zero(), T::zero());
    for row in &rows {
        if row.v.y.abs() > peak_vlat {
            peak_vlat = row.v.y.abs();
            peak_vlat_time = row.t;
        }
    }
    let resolved: Vec<(T, T)> = windows.into_iter().flatten().collect();
    let recovery = resolved
        .iter()
        .map(|&(_, end)| end)
        .fold(None::<T>, |acc, end| {
            Some(acc.map_or(end, |a| if end > a { end } else { a }))
        })
        .and_then(|after| {
            let series: Vec<(T, T)> = rows.iter().map(|r| (r.t, r.v.y)).collect();
            recovery_time(&series, after, real(0.03), real(0.1))
        });
    Ok(Metrics {
        rows,
        mean_cost,
        peak_vlat,
        peak_vlat_time,
        recovery,
        failed,
        plans,
        mean_plan_wall_ms: wall_ms_sum / plans.max(1) as f64,
        mean_rollout_fraction: rollout_fraction_sum / plans.max(1) as f64,
        push_windows: resolved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcts::Budget;
    use approx::assert_relative_eq;

    fn quiet_context() -> RolloutContext<f64> {
        RolloutContext::default()
    }

    fn fast_planner() -> PlannerConfig<f64> {
        PlannerConfig {
            horizon: 0.32,
            rollouts_per_node: 2,
            budget: Budget::Iterations(2),
            ..Default::default()
        }
    }

    #[test]
    fn periodic_schedule_examples() {
        // Duty 1.0 keeps every leg down.
        let stand = PeriodicGait::<f64>::stand();
        for step in periodic_schedule(&stand, 0.3, 20, 0.04) {
            assert_eq!(step, [true; NUM_LEGS]);
        }
        // Trot: diagonal pairs share their contact state at all times.
        let trot = PeriodicGait::trot(1.4);
        for step in periodic_schedule(&trot, 0.123, 100, 0.013) {
            assert_eq!(step[0], step[3]);
            assert_eq!(step[1], step[2]);
        }
        // 1.4 Hz, duty 0.6: stance for 0.4286 s of the 0.7143 s cycle.
        let cycle = 1.0 / 1.4;
        let stance_end = 0.6 * cycle;
        let fine = periodic_schedule(&trot, 0.0, 714, 0.001);
        for (k, step) in fine.iter().enumerate() {
            let t = k as f64 * 0.001;
            if t < stance_end - 1e-3 {
                assert!(step[0], "leg 0 should stand at {t}");
            }
            if t > stance_end + 1e-3 && t < cycle - 1e-3 {
                assert!(!step[0], "leg 0 should swing at {t}");
            }
        }
        let stance_fraction =
            fine.iter().filter(|s| s[0]).count() as f64 / fine.len() as f64;
        assert_relative_eq!(stance_fraction, 0.6, epsilon = 0.01);
    }

    #[test]
    fn recovery_time_examples() {
        // Identically zero settles immediately.
        let zero: Vec<(f64, f64)> = (0..200).map(|k| (k as f64 * 0.002, 0.0)).collect();
        assert_eq!(recovery_time(&zero, 0.0, 0.03, 0.1), Some(0.0));
        // Exponential decay crosses at ln(0.7 / 0.03) / 5.
        let decay: Vec<(f64, f64)> = (0..1000)
            .map(|k| {
                let t = k as f64 * 0.002;
                (t, 0.7 * (-5.0 * t).exp())
            })
            .collect();
        let expected = (0.7_f64 / 0.03).ln() / 5.0;
        let got = recovery_time(&decay, 0.0, 0.03, 0.1).unwrap();
        assert_relative_eq!(got, expected, epsilon = 0.005);
        // A series that never settles reports none.
        let stuck: Vec<(f64, f64)> = (0..200).map(|k| (k as f64 * 0.002, 1.0)).collect();
        assert_eq!(recovery_time(&stuck, 0.0, 0.03, 0.1), None);
    }

    #[test]
    fn executed_flag_checker_finds_short_phases() {
        let cfg = FeasibilityConfig::<f64>::default();
        let mut flags = vec![[true; NUM_LEGS]; 10];
        for row in flags.iter_mut().take(9).skip(3) {
            row[1] = false;
        }
        // Six samples at 0.04 s = 0.24 s swing: legal.
        assert!(verify_executed_flags(&flags, 0.04, &cfg).is_ok());
        // Shrink to five samples = 0.20 s: violation.
        flags[8][1] = true;
        assert!(verify_executed_flags(&flags, 0.04, &cfg).is_err());
        // Boundary-truncated phases are exempt.
        let open = vec![[false; NUM_LEGS]; 2];
        assert!(verify_executed_flags(&open, 0.04, &cfg).is_ok());
    }

    /// Zero command, all-stance gait: the loop holds the equilibrium.
    #[test]
    fn standing_episode_holds_equilibrium() {
        let sim = SimConfig {
            duration: 1.0,
            ..Default::default()
        };
        let metrics = run_episode(
            &PlannerKind::Periodic(PeriodicGait::stand()),
            &sim,
            &[],
            &fast_planner(),
            &quiet_context(),
            7,
        )
        .unwrap();
        assert!(!metrics.failed);
        assert!(metrics.mean_cost <= 1e-4, "mean cost {}", metrics.mean_cost);
        for row in &metrics.rows {
            assert!(row.v.y.abs() <= 1e-9);
            assert!((row.p.z - 0.40).abs() <= 1e-3, "height {}", row.p.z);
        }
    }

    /// A push confined to one force-hold window cannot be fought by the
    /// controller, so the velocity change is exactly impulse / mass; the
    /// feedback then recovers the stand.
    #[test]
    fn lateral_push_obeys_impulse_momentum() {
        let sim = SimConfig {
            duration: 1.0,
            ..Default::default()
        };
        let push = Push::Timed(Disturbance {
            start: 0.12,
            duration: 0.04,
            force: Vector3::new(0.0, 150.0, 0.0),
        });
        let metrics = run_episode(
            &PlannerKind::Periodic(PeriodicGait::stand()),
            &sim,
            &[push],
            &fast_planner(),
            &quiet_context(),
            7,
        )
        .unwrap();
        assert!(!metrics.failed);
        let expected = 150.0 * 0.04 / 22.0;
        assert_relative_eq!(metrics.peak_vlat, expected, max_relative = 1e-4);
        assert_relative_eq!(metrics.peak_vlat_time, 0.16, epsilon = 1e-9);
        assert_eq!(metrics.push_windows.len(), 1);
        assert_relative_eq!(metrics.push_windows[0].0, 0.12, epsilon = 1e-12);
        assert_relative_eq!(metrics.push_windows[0].1, 0.16, epsilon = 1e-12);
        let recovery = metrics.recovery.expect("the stand recovers");
        assert!(recovery < 0.6, "recovery took {recovery} s");
    }

    /// The blend with alpha = 1 and the rollout-only planner produce
    /// byte-identical metrics under a shared seed.
    #[test]
    fn hybrid_alpha_one_matches_full_rollouts() {
        let sim = SimConfig {
            duration: 0.4,
            command: crate::ocp::VelocityCommand {
                v_xy: Vector2::new(0.3, 0.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let cfg = PlannerConfig {
            alpha: 1.0,
            ..fast_planner()
        };
        // A deliberately misleading estimate: alpha = 1 must ignore it.
        let mut model = MlpModel::<f64>::new(&[crate::vf::VF_INPUT_DIM, 4, 1], 0.0, 1).unwrap();
        for w in &mut model.weights {
            w.fill(0.0);
        }
        model.target_mean[0] = -1e6;
        let vf = ValueFunction::new(model).unwrap();
        let full = run_episode(
            &PlannerKind::MctsFull,
            &sim,
            &[],
            &cfg,
            &quiet_context(),
            99,
        )
        .unwrap();
        let hybrid = run_episode(
            &PlannerKind::MctsHybrid(vf),
            &sim,
            &[],
            &cfg,
            &quiet_context(),
            99,
        )
        .unwrap();
        assert_eq!(full.to_csv(), hybrid.to_csv());
        assert!(!full.failed);
    }

    /// Mirrored pushes with mirrored trot offsets mirror the lateral
    /// response.
    #[test]
    fn lateral_mirror_symmetry() {
        let sim = SimConfig {
            duration: 0.8,
            ..Default::default()
        };
        let trot = PeriodicGait::trot(1.4);
        let mirrored = PeriodicGait {
            offsets: [0.5, 0.0, 0.0, 0.5],
            ..trot
        };
        let push_pos = Push::Timed(Disturbance {
            start: 0.2,
            duration: 0.1,
            force: Vector3::new(0.0, 150.0, 0.0),
        });
        let push_neg = Push::Timed(Disturbance {
            start: 0.2,
            duration: 0.1,
            force: Vector3::new(0.0, -150.0, 0.0),
        });
        let a = run_episode(
            &PlannerKind::Periodic(trot),
            &sim,
            &[push_pos],
            &fast_planner(),
            &quiet_context(),
            3,
        )
        .unwrap();
        let b = run_episode(
            &PlannerKind::Periodic(mirrored),
            &sim,
            &[push_neg],
            &fast_planner(),
            &quiet_context(),
            3,
        )
        .unwrap();
        assert!(!a.failed && !b.failed);
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_relative_eq!(ra.v.y, -rb.v.y, epsilon = 1e-6);
            assert_relative_eq!(ra.p.y, -rb.p.y, epsilon = 1e-6);
            assert_relative_eq!(ra.v.x, rb.v.x, epsilon = 1e-6);
        }
    }

    /// Search-planned episodes execute legal contact timelines, and a
    /// replayed plan reproduces its own executed schedule.
    #[test]
    fn executed_schedules_replay_and_stay_legal() {
        let sim = SimConfig {
            duration: 0.32,
            command: crate::ocp::VelocityCommand {
                v_xy: Vector2::new(0.3, 0.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let cfg = fast_planner();
        let metrics = run_episode(
            &PlannerKind::MctsFull,
            &sim,
            &[],
            &cfg,
            &quiet_context(),
            21,
        )
        .unwrap();
        assert!(!metrics.failed);
        verify_executed_flags(
            &metrics.executed_flags(),
            sim.mpc_period,
            &cfg.feasibility,
        )
        .unwrap();

        // Replaying a recorded plan executes exactly its schedule.
        let input = PlanInput {
            state: SrbState {
                p: Vector3::new(0.0, 0.0, 0.40),
                v: Vector3::new(0.3, 0.0, 0.0),
                phi: Vector3::zeros(),
                omega: Vector3::zeros(),
            },
            feet: FootState::all_stance(
                quiet_context().robot.nominal_footholds(&Vector2::zeros(), 0.0),
            ),
            contacts: ContactState::initial_stand(&cfg.feasibility),
            context: quiet_context(),
        };
        let outcome = plan(&input, &cfg, None, 5).unwrap();
        let replay_sim = SimConfig {
            duration: 0.32,
            command: input.context.cmd,
            ..Default::default()
        };
        let replayed = run_episode(
            &PlannerKind::Replay(outcome.sequence.clone()),
            &replay_sim,
            &[],
            &cfg,
            &quiet_context(),
            5,
        )
        .unwrap();
        assert_eq!(replayed.plans, 0);
        let expanded = to_mpc_schedule(&outcome.sequence, replay_sim.mpc_period).unwrap();
        let executed = replayed.executed_flags();
        assert_eq!(&expanded[..executed.len()], &executed[..]);
    }

    /// A swing-phased push resolves inside the executed swing window and
    /// lands deterministically.
    #[test]
    fn swing_phased_push_resolves_in_swing() {
        let sim = SimConfig {
            duration: 1.2,
            ..Default::default()
        };
        let trot = PeriodicGait::trot(1.4);
        let push = Push::SwingPhased {
            arm: 0.1,
            fraction: 0.4,
            duration: 0.1,
            force: Vector3::new(0.0, 150.0, 0.0),
        };
        let run = || {
            run_episode(
                &PlannerKind::Periodic(trot),
                &sim,
                &[push],
                &fast_planner(),
                &quiet_context(),
                13,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.push_windows.len(), 1);
        let (start, end) = a.push_windows[0];
        assert_relative_eq!(end - start, 0.1, epsilon = 1e-12);
        // The push starts while the left-front leg is still swinging.
        let row = a
            .rows
            .iter()
            .rev()
            .find(|r| r.t <= start + 1e-9)
            .expect("push starts inside the episode");
        assert!(!row.contact[0], "push at {start} should land in swing");
    }

    #[test]
    fn metrics_csv_has_schema_and_header() {
        let sim = SimConfig {
            duration: 0.2,
            ..Default::default()
        };
        let metrics = run_episode(
            &PlannerKind::Periodic(PeriodicGait::stand()),
            &sim,
            &[],
            &fast_planner(),
            &quiet_context(),
            1,
        )
        .unwrap();
        let csv = metrics.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# schema: sim-metrics v1"));
        assert_eq!(
            lines.next(),
            Some("t,cost,vx,vy,vz,vlat,px,py,pz,phase_LF,phase_RF,phase_LH,phase_RH")
        );
        assert_eq!(csv.lines().count(), 2 + metrics.rows.len());
    }

    #[test]
    #[ignore]
    fn probe_timing() {
        use std::time::Instant;
        let ctx = quiet_context();
        let cfg = PlannerConfig::<f64> {
            horizon: 0.64,
            ..Default::default()
        };
        let input = PlanInput {
            state: SrbState {
                p: Vector3::new(0.0, 0.0, 0.40),
                v: Vector3::new(0.3, 0.0, 0.0),
                phi: Vector3::zeros(),
                omega: Vector3::zeros(),
            },
            feet: FootState::all_stance(ctx.robot.nominal_footholds(&Vector2::zeros(), 0.0)),
            contacts: ContactState::initial_stand(&cfg.feasibility),
            context: RolloutContext {
                cmd: crate::ocp::VelocityCommand {
                    v_xy: Vector2::new(0.3, 0.0),
                    ..Default::default()
                },
                ..ctx
            },
        };
        // Single rollout cost at two horizons.
        for horizon in [0.32, 0.64] {
            let steps = (horizon / 0.08) as usize;
            let schedule: Vec<LegSet> = (0..2 * steps).map(|_| [true; NUM_LEGS]).collect();
            let seq = GaitSequence::new(0.04, schedule).unwrap();
            let rows = seq.steps.clone();
            let t0 = Instant::now();
            let reps = 50;
            for _ in 0..reps {
                let (_c, _f) = crate::ocp::rollout_cost(
                    &input.context,
                    &input.state,
                    &input.feet,
                    &rows,
                    1e6,
                );
            }
            println!(
                "rollout horizon {horizon}: {:.3} ms",
                t0.elapsed().as_secs_f64() * 1e3 / reps as f64
            );
        }
        // Full plan calls at assorted budgets.
        for (m, iters, hor) in [(5, 24, 0.32), (120, 1, 0.32), (5, 24, 0.64), (120, 1, 0.64), (2, 2, 0.64)] {
            let cfg = PlannerConfig {
                horizon: hor,
                rollouts_per_node: m,
                budget: Budget::Iterations(iters),
                ..Default::default()
            };
            let t0 = Instant::now();
            let out = plan(&input, &cfg, None, 11).unwrap();
            println!(
                "plan M={m} iters={iters} horizon={hor}: {:.1} ms, {} rollouts, {} nodes",
                t0.elapsed().as_secs_f64() * 1e3,
                out.stats.rollouts,
                out.stats.nodes
            );
        }
    }

    #[test]
    fn config_validation_catches_bad_clocks() {
        let bad = SimConfig::<f64> {
            mpc_period: 0.003,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::Config(_))));
        let bad = SimConfig::<f64> {
            replan_period: 0.05,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::Config(_))));
        assert!(SimConfig::<f64>::default().validate().is_ok());
        assert!(PeriodicGait::<f64> {
            duty: 1.5,
            ..PeriodicGait::trot(1.4)
        }
        .validate()
        .is_err());
    }
}
