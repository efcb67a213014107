//! Force-tracking optimal control over a fixed contact schedule.
//!
//! Given the measured state, the foot positions and a per-step contact
//! schedule, this module builds a convex QP whose decision variables are the
//! stacked ground-reaction forces `U = [u_0; ...; u_{N-1}]`:
//!
//! ```text
//! J(U) = h * e_0' Q e_0
//!      + h * sum_{k=1..N} e_k' Q e_k  +  h * sum_{k=0..N-1} (u_k - ub_k)' R (u_k - ub_k)
//! ```
//!
//! where `e_k = x_k - x_ref,k` and the dynamics are the analytically
//! linearized Euler step of the single rigid body around the reference
//! (around the measured state at `k = 0`):
//!
//! ```text
//! dx_{k+1} = A_k dx_k + B_k (u_k - ub_k) + d_k,
//! d_k      = xb_k + h f(xb_k, ub_k) - xb_{k+1}.
//! ```
//!
//! Eliminating the states (condensing) gives `J = 0.5 U' H U + g' U + c`
//! with a dense positive-definite `H`; swing-leg forces are pinned to zero
//! by equality rows and stance forces live in a friction pyramid. The
//! minimized value of `J` is the tracking cost used to score contact
//! sequences.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector2, Vector3};

use crate::contact::LegSet;
use crate::dynamics::{
    continuous_dynamics, linearize, ControlForces, DynamicsError, FootState, InertiaParams,
    SrbState, FORCE_DIM, NUM_LEGS, STATE_DIM,
};
use crate::qp::{solve_warm, QpError, QpProblem, QpSolution, QpStatus, SolverConfig, WarmStart};
use crate::scalar::{real, Real};

/// Cost factor applied on top of the stand cost when a rollout QP fails.
pub const PENALTY_SCALE: f64 = 1e6;

/// Body model plus leg geometry.
#[derive(Debug, Clone)]
pub struct RobotParams<T: Real> {
    pub inertia: InertiaParams<T>,
    /// Hip positions in the body frame, order LF, RF, LH, RH.
    pub hip_offsets: [Vector3<T>; NUM_LEGS],
    /// Standing body height above the ground plane.
    pub nominal_height: T,
}

impl<T: Real> Default for RobotParams<T> {
    fn default() -> Self {
        let x = real::<T>(0.24);
        let y = real::<T>(0.13);
        Self {
            inertia: InertiaParams::diagonal(
                real(22.0),
                real(0.24),
                real(0.85),
                real(0.94),
            )
            .expect("default inertia is valid"),
            hip_offsets: [
                Vector3::new(x, y, T::zero()),
                Vector3::new(x, -y, T::zero()),
                Vector3::new(-x, y, T::zero()),
                Vector3::new(-x, -y, T::zero()),
            ],
            nominal_height: real(0.40),
        }
    }
}

impl<T: Real> RobotParams<T> {
    /// Foot positions directly under the hips for a planar pose.
    pub fn nominal_footholds(&self, p_xy: &Vector2<T>, yaw: T) -> [Vector3<T>; NUM_LEGS] {
        let rot = yaw_rotation(yaw);
        core::array::from_fn(|i| {
            let hip = rot * self.hip_offsets[i];
            Vector3::new(p_xy.x + hip.x, p_xy.y + hip.y, T::zero())
        })
    }
}

/// Stage-cost weights and the MPC step.
#[derive(Debug, Clone)]
pub struct OcpWeights<T: Real> {
    /// MPC step length.
    pub h: T,
    /// Diagonal of the state tracking weight, layout `[p; v; phi; omega]`.
    pub q_x: SVector<T, STATE_DIM>,
    /// Uniform force effort weight.
    pub r_u: T,
}

impl<T: Real> Default for OcpWeights<T> {
    fn default() -> Self {
        let q = [
            0.0, 0.0, 1500.0, 200.0, 200.0, 200.0, 500.0, 500.0, 200.0, 20.0, 20.0, 20.0,
        ];
        Self {
            h: real(0.04),
            q_x: SVector::from_iterator(q.iter().map(|&v| real(v))),
            r_u: real(1e-4),
        }
    }
}

/// Friction pyramid bounds applied to every stance force.
#[derive(Debug, Clone, Copy)]
pub struct FrictionParams<T: Real> {
    pub mu: T,
    pub fz_min: T,
    pub fz_max: T,
}

impl<T: Real> FrictionParams<T> {
    /// Standard bounds for a robot of the given mass: `fz_max = 2 m g`.
    pub fn for_mass(mass: T, gravity_norm: T) -> Self {
        Self {
            mu: real(0.5),
            fz_min: real(5.0),
            fz_max: real::<T>(2.0) * mass * gravity_norm,
        }
    }
}

impl<T: Real> Default for FrictionParams<T> {
    fn default() -> Self {
        Self::for_mass(real(22.0), real(9.81))
    }
}

/// Operator command the reference trajectory integrates.
#[derive(Debug, Clone, Copy)]
pub struct VelocityCommand<T: Real> {
    /// Planar velocity in world coordinates.
    pub v_xy: Vector2<T>,
    pub yaw_rate: T,
    /// Body height target.
    pub height: T,
}

impl<T: Real> Default for VelocityCommand<T> {
    fn default() -> Self {
        Self {
            v_xy: Vector2::zeros(),
            yaw_rate: T::zero(),
            height: real(0.40),
        }
    }
}

/// Foothold selection gains.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceConfig<T: Real> {
    /// Velocity feedback gain on the foothold offset.
    pub k_v: T,
}

impl<T: Real> Default for ReferenceConfig<T> {
    fn default() -> Self {
        Self { k_v: real(0.03) }
    }
}

/// Reference trajectory over an `N`-step window.
#[derive(Debug, Clone)]
pub struct Reference<T: Real> {
    pub h: T,
    /// Tracking targets for `k = 0..=N`.
    pub states: Vec<SrbState<T>>,
    /// Nominal forces per step: gravity split across the stance legs.
    pub forces: Vec<ControlForces<T>>,
    /// Foot positions in effect during each step.
    pub feet: Vec<[Vector3<T>; NUM_LEGS]>,
    /// Contact flags per step.
    pub schedule: Vec<LegSet>,
}

/// Rotation about z by `yaw`.
pub fn yaw_rotation<T: Real>(yaw: T) -> Matrix3<T> {
    let (s, c) = (yaw.sin(), yaw.cos());
    Matrix3::new(
        c,
        -s,
        T::zero(),
        s,
        c,
        T::zero(),
        T::zero(),
        T::zero(),
        T::one(),
    )
}

/// Touchdown target: hip projection led by half a stance of travel plus a
/// velocity-error correction.
pub fn raibert_foothold<T: Real>(
    hip_at_touchdown: &Vector3<T>,
    v_measured: &Vector2<T>,
    v_reference: &Vector2<T>,
    stance_duration: T,
    k_v: T,
) -> Vector3<T> {
    let lead = v_measured * (stance_duration * real(0.5));
    let correction = (v_measured - v_reference) * k_v;
    Vector3::new(
        hip_at_touchdown.x + lead.x + correction.x,
        hip_at_touchdown.y + lead.y + correction.y,
        T::zero(),
    )
}

/// Builds the tracking reference for `schedule` starting from the measured
/// state: the command velocity and yaw rate are integrated forward, height
/// goes to the target, roll and pitch to zero. Feet hold their positions
/// until a touchdown, which places them at the foothold target computed from
/// the projected reference hip and the measured velocity.
pub fn build_reference<T: Real>(
    state0: &SrbState<T>,
    feet0: &FootState<T>,
    schedule: &[LegSet],
    h: T,
    cmd: &VelocityCommand<T>,
    robot: &RobotParams<T>,
    cfg: &ReferenceConfig<T>,
) -> Reference<T> {
    let n = schedule.len();
    let yaw0 = state0.phi.z;
    let mass = robot.inertia.mass;
    let gravity = robot.inertia.gravity;

    let states: Vec<SrbState<T>> = (0..=n)
        .map(|k| {
            let t = h * real(k as f64);
            SrbState {
                p: Vector3::new(
                    state0.p.x + cmd.v_xy.x * t,
                    state0.p.y + cmd.v_xy.y * t,
                    cmd.height,
                ),
                v: Vector3::new(cmd.v_xy.x, cmd.v_xy.y, T::zero()),
                phi: Vector3::new(T::zero(), T::zero(), yaw0 + cmd.yaw_rate * t),
                omega: Vector3::new(T::zero(), T::zero(), cmd.yaw_rate),
            }
        })
        .collect();

    let forces: Vec<ControlForces<T>> = schedule
        .iter()
        .map(|step| {
            let stance = step.iter().filter(|&&c| c).count();
            let mut f = ControlForces::zero();
            if stance > 0 {
                let share = -(gravity * (mass / real(stance as f64)));
                for (leg, flag) in step.iter().enumerate() {
                    if *flag {
                        f.f[leg] = share;
                    }
                }
            }
            f
        })
        .collect();

    let v_meas = Vector2::new(state0.v.x, state0.v.y);
    let mut positions = feet0.pos;
    let mut in_contact = feet0.contact;
    let mut feet = Vec::with_capacity(n);
    for k in 0..n {
        for leg in 0..NUM_LEGS {
            if schedule[k][leg] && !in_contact[leg] {
                let mut until = k;
                while until < n && schedule[until][leg] {
                    until += 1;
                }
                let stance_duration = h * real((until - k) as f64);
                let rot = yaw_rotation(states[k].phi.z);
                let hip_body = rot * robot.hip_offsets[leg];
                let hip = Vector3::new(
                    states[k].p.x + hip_body.x,
                    states[k].p.y + hip_body.y,
                    T::zero(),
                );
                positions[leg] = raibert_foothold(&hip, &v_meas, &cmd.v_xy, stance_duration, cfg.k_v);
            }
            in_contact[leg] = schedule[k][leg];
        }
        feet.push(positions);
    }

    Reference {
        h,
        states,
        forces,
        feet,
        schedule: schedule.to_vec(),
    }
}

/// Condensed QP plus the constant completing the tracking cost.
#[derive(Debug, Clone)]
pub struct CondensedOcp<T: Real> {
    pub qp: QpProblem<T>,
    /// Constant cost term: `J(U) = 0.5 U' H U + g' U + constant`.
    pub constant: T,
    pub n_steps: usize,
    pub num_swing_pins: usize,
    pub num_friction_rows: usize,
}

/// Condenses the linearized tracking problem over `reference` into a QP in
/// the stacked forces. `measured` is the linearization point for step 0.
pub fn build_ocp<T: Real>(
    measured: &SrbState<T>,
    reference: &Reference<T>,
    robot: &RobotParams<T>,
    weights: &OcpWeights<T>,
    friction: &FrictionParams<T>,
) -> Result<CondensedOcp<T>, DynamicsError> {
    let n = reference.schedule.len();
    if n == 0 {
        return Err(DynamicsError::InvalidParams(
            "schedule must contain at least one step".into(),
        ));
    }
    if reference.states.len() != n + 1 || reference.forces.len() != n || reference.feet.len() != n
    {
        return Err(DynamicsError::InvalidParams(format!(
            "reference shapes are inconsistent: {} states, {} forces, {} feet for {} steps",
            reference.states.len(),
            reference.forces.len(),
            reference.feet.len(),
            n
        )));
    }
    let h = reference.h;
    let nv = FORCE_DIM * n;
    type Block<T> = SMatrix<T, STATE_DIM, STATE_DIM>;

    // Forward pass: discrete Jacobians, defects and the zero-input response
    // c_k (the state deviation when U = 0).
    let mut rows: Vec<Vec<Block<T>>> = Vec::with_capacity(n);
    let mut c = vec![SVector::<T, STATE_DIM>::zeros(); n + 1];
    for k in 0..n {
        let lin_state = if k == 0 { measured } else { &reference.states[k] };
        let feet_k = FootState {
            pos: reference.feet[k],
            contact: reference.schedule[k],
        };
        let (a_dyn, b_dyn) = linearize(lin_state, &reference.forces[k], &feet_k, &robot.inertia, h)?;
        let a: Block<T> = a_dyn.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned();
        let b: Block<T> = b_dyn.fixed_view::<STATE_DIM, FORCE_DIM>(0, 0).into_owned();
        let f = continuous_dynamics(lin_state, &reference.forces[k], &feet_k, &robot.inertia)?;
        let d = lin_state.to_vector() + f.to_vector() * h - reference.states[k + 1].to_vector();

        let u_bar = reference.forces[k].to_vector();
        c[k + 1] = a * c[k] + b * (-u_bar) + d;

        let mut row: Vec<Block<T>> = Vec::with_capacity(k + 1);
        if k > 0 {
            for j in 0..k {
                row.push(a * rows[k - 1][j]);
            }
        }
        row.push(b);
        rows.push(row);
    }

    // Quadratic assembly.
    let two_h = h * real(2.0);
    let q = weights.q_x;
    let e0 = measured.to_vector() - reference.states[0].to_vector();
    let mut constant = h * e0.dot(&q.component_mul(&e0));
    let mut h_mat = DMatrix::<T>::zeros(nv, nv);
    let mut g_vec = DVector::<T>::zeros(nv);

    for k in 1..=n {
        let ck = c[k];
        constant += h * ck.dot(&q.component_mul(&ck));
        let row = &rows[k - 1];
        for a_idx in 0..k {
            let ga = &row[a_idx];
            let gtq = ga.transpose() * Block::<T>::from_diagonal(&q);
            let g_contrib = gtq * ck * two_h;
            for i in 0..STATE_DIM {
                g_vec[a_idx * FORCE_DIM + i] += g_contrib[i];
            }
            for b_idx in a_idx..k {
                let block = gtq * row[b_idx] * two_h;
                let (ro, co) = (a_idx * FORCE_DIM, b_idx * FORCE_DIM);
                for i in 0..STATE_DIM {
                    for j in 0..STATE_DIM {
                        h_mat[(ro + i, co + j)] += block[(i, j)];
                        if a_idx != b_idx {
                            h_mat[(co + j, ro + i)] += block[(i, j)];
                        }
                    }
                }
            }
        }
    }
    for k in 0..n {
        let u_bar = reference.forces[k].to_vector();
        constant += h * weights.r_u * u_bar.dot(&u_bar);
        for i in 0..FORCE_DIM {
            let at = k * FORCE_DIM + i;
            h_mat[(at, at)] += two_h * weights.r_u;
            g_vec[at] -= two_h * weights.r_u * u_bar[i];
        }
    }

    // Swing pins (equalities) and friction pyramids (inequalities).
    let mut swing = 0usize;
    let mut stance = 0usize;
    for step in &reference.schedule {
        for &flag in step.iter() {
            if flag {
                stance += 1;
            } else {
                swing += 1;
            }
        }
    }
    let mut a_eq = DMatrix::<T>::zeros(3 * swing, nv);
    let b_eq = DVector::<T>::zeros(3 * swing);
    let mut a_in = DMatrix::<T>::zeros(6 * stance, nv);
    let mut b_in = DVector::<T>::zeros(6 * stance);

    let mut eq_row = 0usize;
    let mut in_row = 0usize;
    for (k, step) in reference.schedule.iter().enumerate() {
        for leg in 0..NUM_LEGS {
            let fx = k * FORCE_DIM + 3 * leg;
            let (fy, fz) = (fx + 1, fx + 2);
            if step[leg] {
                let mu = friction.mu;
                a_in[(in_row, fz)] = T::one();
                b_in[in_row] = friction.fz_max;
                a_in[(in_row + 1, fz)] = -T::one();
                b_in[in_row + 1] = -friction.fz_min;
                a_in[(in_row + 2, fx)] = T::one();
                a_in[(in_row + 2, fz)] = -mu;
                a_in[(in_row + 3, fx)] = -T::one();
                a_in[(in_row + 3, fz)] = -mu;
                a_in[(in_row + 4, fy)] = T::one();
                a_in[(in_row + 4, fz)] = -mu;
                a_in[(in_row + 5, fy)] = -T::one();
                a_in[(in_row + 5, fz)] = -mu;
                in_row += 6;
            } else {
                a_eq[(eq_row, fx)] = T::one();
                a_eq[(eq_row + 1, fy)] = T::one();
                a_eq[(eq_row + 2, fz)] = T::one();
                eq_row += 3;
            }
        }
    }

    Ok(CondensedOcp {
        qp: QpProblem {
            h: h_mat,
            g: g_vec,
            a_eq,
            b_eq,
            a_in,
            b_in,
        },
        constant,
        n_steps: n,
        num_swing_pins: 3 * swing,
        num_friction_rows: 6 * stance,
    })
}

/// Solved tracking problem: the cost is the minimized objective plus the
/// condensing constant. `feasible` is false when the solver could not
/// certify an optimum (the caller substitutes a penalty cost).
#[derive(Debug, Clone)]
pub struct TrackingOutcome<T: Real> {
    pub cost: T,
    pub feasible: bool,
    pub solution: QpSolution<T>,
}

/// Solves the condensed problem and evaluates the tracking cost.
pub fn solve_tracking<T: Real>(
    ocp: &CondensedOcp<T>,
    qp_cfg: &SolverConfig<T>,
    warm: Option<&WarmStart>,
) -> Result<TrackingOutcome<T>, QpError> {
    let solution = solve_warm(&ocp.qp, qp_cfg, warm)?;
    let feasible = solution.status == QpStatus::Optimal;
    Ok(TrackingOutcome {
        cost: solution.objective + ocp.constant,
        feasible,
        solution,
    })
}

/// Everything needed to cost a contact schedule from a state.
#[derive(Debug, Clone)]
pub struct RolloutContext<T: Real> {
    pub robot: RobotParams<T>,
    pub weights: OcpWeights<T>,
    pub friction: FrictionParams<T>,
    pub reference_cfg: ReferenceConfig<T>,
    pub cmd: VelocityCommand<T>,
    pub qp_cfg: SolverConfig<T>,
}

impl<T: Real> Default for RolloutContext<T> {
    fn default() -> Self {
        Self {
            robot: RobotParams::default(),
            weights: OcpWeights::default(),
            friction: FrictionParams::default(),
            reference_cfg: ReferenceConfig::default(),
            cmd: VelocityCommand::default(),
            qp_cfg: SolverConfig::default(),
        }
    }
}

/// Tracking cost of one contact schedule; `penalty` replaces the cost when
/// the QP fails or the model leaves its valid region.
pub fn rollout_cost<T: Real>(
    ctx: &RolloutContext<T>,
    state0: &SrbState<T>,
    feet0: &FootState<T>,
    schedule: &[LegSet],
    penalty: T,
) -> (T, bool) {
    let reference = build_reference(
        state0,
        feet0,
        schedule,
        ctx.weights.h,
        &ctx.cmd,
        &ctx.robot,
        &ctx.reference_cfg,
    );
    let Ok(ocp) = build_ocp(state0, &reference, &ctx.robot, &ctx.weights, &ctx.friction) else {
        return (penalty, true);
    };
    match solve_tracking(&ocp, &ctx.qp_cfg, None) {
        Ok(outcome) if outcome.feasible && outcome.cost.is_finite() => (outcome.cost, false),
        _ => (penalty, true),
    }
}

/// Penalty level for a state: a large multiple of one plus the cost of
/// simply standing (all legs in stance) from that state.
pub fn stand_penalty<T: Real>(
    ctx: &RolloutContext<T>,
    state0: &SrbState<T>,
    feet0: &FootState<T>,
    horizon_steps: usize,
) -> T {
    let scale = real::<T>(PENALTY_SCALE);
    let schedule = vec![[true; NUM_LEGS]; horizon_steps.max(1)];
    let stand_feet = FootState {
        pos: feet0.pos,
        contact: [true; NUM_LEGS],
    };
    let (cost, penalized) = rollout_cost(ctx, state0, &stand_feet, &schedule, -T::one());
    if penalized || !cost.is_finite() {
        scale
    } else {
        scale * (T::one() + cost.max(T::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use approx::assert_relative_eq;
    use rand::Rng;

    type S = SrbState<f64>;

    fn standing_state(robot: &RobotParams<f64>) -> S {
        S {
            p: Vector3::new(0.0, 0.0, robot.nominal_height),
            v: Vector3::zeros(),
            phi: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    fn standing_feet(robot: &RobotParams<f64>) -> FootState<f64> {
        FootState::all_stance(robot.nominal_footholds(&Vector2::zeros(), 0.0))
    }

    /// Condensed quadratic versus an explicit simulation of the same
    /// linearized dynamics, on random force inputs.
    #[test]
    fn condensed_cost_matches_explicit_linear_rollout() {
        let robot = RobotParams::<f64>::default();
        let weights = OcpWeights::default();
        let friction = FrictionParams::default();
        let cmd = VelocityCommand {
            v_xy: Vector2::new(0.3, 0.0),
            ..Default::default()
        };
        let state0 = S {
            p: Vector3::new(0.02, -0.01, 0.38),
            v: Vector3::new(0.25, 0.03, 0.05),
            phi: Vector3::new(0.03, -0.02, 0.1),
            omega: Vector3::new(0.05, -0.1, 0.02),
        };
        let feet0 = standing_feet(&robot);
        let schedule = vec![
            [true, false, true, true],
            [true, true, false, true],
        ];
        let reference = build_reference(
            &state0,
            &feet0,
            &schedule,
            weights.h,
            &cmd,
            &robot,
            &ReferenceConfig::default(),
        );
        let ocp = build_ocp(&state0, &reference, &robot, &weights, &friction).unwrap();

        let mut rng = rng_from(21);
        for _ in 0..20 {
            let u = DVector::from_fn(ocp.qp.num_vars(), |_, _| rng.gen_range(-80.0..80.0));
            let condensed = ocp.qp.objective(&u) + ocp.constant;

            // Explicit: run the affine recursion with the same Jacobians.
            let h = weights.h;
            let n = schedule.len();
            let mut explicit = 0.0;
            let e0 = state0.to_vector() - reference.states[0].to_vector();
            explicit += h * e0.dot(&weights.q_x.component_mul(&e0));
            let mut dx = SVector::<f64, STATE_DIM>::zeros();
            for k in 0..n {
                let lin_state = if k == 0 { &state0 } else { &reference.states[k] };
                let feet_k = FootState {
                    pos: reference.feet[k],
                    contact: schedule[k],
                };
                let (a, b) =
                    linearize(lin_state, &reference.forces[k], &feet_k, &robot.inertia, h)
                        .unwrap();
                let f = continuous_dynamics(lin_state, &reference.forces[k], &feet_k, &robot.inertia)
                    .unwrap();
                let d = lin_state.to_vector() + f.to_vector() * h
                    - reference.states[k + 1].to_vector();
                let u_k = u.rows(k * FORCE_DIM, FORCE_DIM).into_owned();
                let du = &u_k - reference.forces[k].to_vector();
                dx = a.fixed_view::<12, 12>(0, 0) * dx + b.fixed_view::<12, 12>(0, 0) * du + d;
                explicit += h * dx.dot(&weights.q_x.component_mul(&dx));
                explicit += h * weights.r_u * du.dot(&du);
            }
            assert_relative_eq!(condensed, explicit, max_relative = 1e-8);
        }
    }

    /// Standing exactly on the reference costs nothing and the optimal
    /// forces share the weight.
    #[test]
    fn standing_equilibrium_has_zero_cost() {
        let robot = RobotParams::<f64>::default();
        let weights = OcpWeights::default();
        let state0 = standing_state(&robot);
        let feet0 = standing_feet(&robot);
        let schedule = vec![[true; 4]; 4];
        let reference = build_reference(
            &state0,
            &feet0,
            &schedule,
            weights.h,
            &VelocityCommand::default(),
            &robot,
            &ReferenceConfig::default(),
        );
        let ocp = build_ocp(&state0, &reference, &robot, &weights, &FrictionParams::default())
            .unwrap();
        let outcome = solve_tracking(&ocp, &SolverConfig::default(), None).unwrap();
        assert!(outcome.feasible);
        assert!(outcome.cost.abs() <= 1e-6, "cost {}", outcome.cost);
        let share = 22.0 * 9.81 / 4.0;
        for k in 0..schedule.len() {
            for leg in 0..NUM_LEGS {
                let base = k * FORCE_DIM + 3 * leg;
                assert_relative_eq!(outcome.solution.x[base], 0.0, epsilon = 1e-6);
                assert_relative_eq!(outcome.solution.x[base + 1], 0.0, epsilon = 1e-6);
                assert_relative_eq!(outcome.solution.x[base + 2], share, epsilon = 1e-4);
            }
        }
    }

    /// The reference advances by the commanded velocity each step.
    #[test]
    fn reference_advances_with_command() {
        let robot = RobotParams::<f64>::default();
        let cmd = VelocityCommand {
            v_xy: Vector2::new(0.3, 0.0),
            ..Default::default()
        };
        let state0 = standing_state(&robot);
        let reference = build_reference(
            &state0,
            &standing_feet(&robot),
            &vec![[true; 4]; 3],
            0.04,
            &cmd,
            &robot,
            &ReferenceConfig::default(),
        );
        for k in 0..3 {
            let dx = reference.states[k + 1].p.x - reference.states[k].p.x;
            assert_relative_eq!(dx, 0.012, epsilon = 1e-12);
        }
    }

    /// Foothold offset at matched velocity: half a stance of travel.
    #[test]
    fn foothold_leads_hip_by_half_stance() {
        let hip = Vector3::new(0.0, 0.0, 0.0);
        let v = Vector2::new(0.3, 0.0);
        let target: Vector3<f64> = raibert_foothold(&hip, &v, &v, 3.0 / 7.0, 0.03);
        assert_relative_eq!(target.x, 0.3 * (3.0 / 7.0) / 2.0, epsilon = 1e-15);
        assert!((target.x - 0.0643).abs() < 5e-5);
        assert_eq!(target.y, 0.0);
        assert_eq!(target.z, 0.0);

        // Velocity error engages the feedback gain.
        let fast = Vector2::new(0.4, 0.0);
        let target = raibert_foothold(&hip, &fast, &v, 3.0 / 7.0, 0.03);
        assert_relative_eq!(target.x, 0.4 * (3.0 / 7.0) / 2.0 + 0.03 * 0.1, epsilon = 1e-15);
    }

    fn mirror_state(s: &S) -> S {
        S {
            p: Vector3::new(s.p.x, -s.p.y, s.p.z),
            v: Vector3::new(s.v.x, -s.v.y, s.v.z),
            phi: Vector3::new(-s.phi.x, s.phi.y, -s.phi.z),
            omega: Vector3::new(-s.omega.x, s.omega.y, -s.omega.z),
        }
    }

    const MIRROR_LEG: [usize; 4] = [1, 0, 3, 2];

    /// Reflecting the problem across the x-z plane reflects the solution.
    #[test]
    fn lateral_mirror_symmetry() {
        let robot = RobotParams::<f64>::default();
        let weights = OcpWeights::default();
        let friction = FrictionParams::default();
        let state = S {
            p: Vector3::new(0.0, 0.01, 0.39),
            v: Vector3::new(0.3, 0.1, 0.0),
            phi: Vector3::zeros(),
            omega: Vector3::zeros(),
        };
        let cmd = VelocityCommand {
            v_xy: Vector2::new(0.3, 0.05),
            ..Default::default()
        };
        let schedule = vec![[true, false, false, true], [true, true, true, true]];

        let mirrored_state = mirror_state(&state);
        let mirrored_cmd = VelocityCommand {
            v_xy: Vector2::new(cmd.v_xy.x, -cmd.v_xy.y),
            yaw_rate: -cmd.yaw_rate,
            height: cmd.height,
        };
        let mirrored_schedule: Vec<LegSet> = schedule
            .iter()
            .map(|s| core::array::from_fn(|leg| s[MIRROR_LEG[leg]]))
            .collect();

        let feet = standing_feet(&robot);
        let mirrored_feet = FootState {
            pos: core::array::from_fn(|leg| {
                let p = feet.pos[MIRROR_LEG[leg]];
                Vector3::new(p.x, -p.y, p.z)
            }),
            contact: core::array::from_fn(|leg| feet.contact[MIRROR_LEG[leg]]),
        };

        let cfg = ReferenceConfig::default();
        let reference = build_reference(&state, &feet, &schedule, weights.h, &cmd, &robot, &cfg);
        let ocp = build_ocp(&state, &reference, &robot, &weights, &friction).unwrap();
        let sol = solve_tracking(&ocp, &SolverConfig::default(), None).unwrap();

        let m_reference = build_reference(
            &mirrored_state,
            &mirrored_feet,
            &mirrored_schedule,
            weights.h,
            &mirrored_cmd,
            &robot,
            &cfg,
        );
        let m_ocp = build_ocp(&mirrored_state, &m_reference, &robot, &weights, &friction).unwrap();
        let m_sol = solve_tracking(&m_ocp, &SolverConfig::default(), None).unwrap();

        assert!(sol.feasible && m_sol.feasible);
        assert_relative_eq!(sol.cost, m_sol.cost, max_relative = 1e-6);
        for k in 0..schedule.len() {
            for leg in 0..NUM_LEGS {
                let a = k * FORCE_DIM + 3 * leg;
                let b = k * FORCE_DIM + 3 * MIRROR_LEG[leg];
                assert_relative_eq!(sol.solution.x[a], m_sol.solution.x[b], epsilon = 1e-6);
                assert_relative_eq!(sol.solution.x[a + 1], -m_sol.solution.x[b + 1], epsilon = 1e-6);
                assert_relative_eq!(sol.solution.x[a + 2], m_sol.solution.x[b + 2], epsilon = 1e-6);
            }
        }
    }

    /// Scaling all weights scales the optimal cost, not the minimizer.
    #[test]
    fn weight_scaling_scales_cost_only() {
        let robot = RobotParams::<f64>::default();
        let state0 = S {
            p: Vector3::new(0.0, 0.0, 0.37),
            v: Vector3::new(0.2, -0.05, 0.02),
            phi: Vector3::new(0.02, 0.04, 0.0),
            omega: Vector3::new(0.0, 0.1, -0.05),
        };
        let feet0 = standing_feet(&robot);
        let schedule = vec![[true, true, false, true], [false, true, true, true]];
        let s = 3.0;

        let base = OcpWeights::default();
        let scaled = OcpWeights {
            h: base.h,
            q_x: base.q_x * s,
            r_u: base.r_u * s,
        };
        let cmd = VelocityCommand::default();
        let cfg = ReferenceConfig::default();
        let friction = FrictionParams::default();

        let reference = build_reference(&state0, &feet0, &schedule, base.h, &cmd, &robot, &cfg);
        let ocp_a = build_ocp(&state0, &reference, &robot, &base, &friction).unwrap();
        let ocp_b = build_ocp(&state0, &reference, &robot, &scaled, &friction).unwrap();
        let sol_a = solve_tracking(&ocp_a, &SolverConfig::default(), None).unwrap();
        let sol_b = solve_tracking(&ocp_b, &SolverConfig::default(), None).unwrap();
        assert!((&sol_a.solution.x - &sol_b.solution.x).amax() <= 1e-6);
        assert_relative_eq!(sol_b.cost, s * sol_a.cost, max_relative = 1e-8);
    }

    /// Ballistic (all-swing) windows cost far more than standing.
    #[test]
    fn flight_costs_more_than_stance() {
        let robot = RobotParams::<f64>::default();
        let ctx = RolloutContext::<f64>::default();
        let state0 = standing_state(&robot);
        let feet0 = standing_feet(&robot);
        let (stance_cost, stance_pen) =
            rollout_cost(&ctx, &state0, &feet0, &vec![[true; 4]; 4], f64::MAX);
        let (flight_cost, flight_pen) =
            rollout_cost(&ctx, &state0, &feet0, &vec![[false; 4]; 4], f64::MAX);
        assert!(!stance_pen && !flight_pen);
        assert!(flight_cost > stance_cost + 1.0);
    }

    /// Swing pins and friction rows are structurally present.
    #[test]
    fn constraint_blocks_match_schedule() {
        let robot = RobotParams::<f64>::default();
        let weights = OcpWeights::default();
        let state0 = standing_state(&robot);
        let feet0 = standing_feet(&robot);
        let schedule = vec![[true, false, true, true], [false, false, true, true]];
        let reference = build_reference(
            &state0,
            &feet0,
            &schedule,
            weights.h,
            &VelocityCommand::default(),
            &robot,
            &ReferenceConfig::default(),
        );
        let ocp = build_ocp(&state0, &reference, &robot, &weights, &FrictionParams::default())
            .unwrap();
        // 3 swing leg-steps -> 9 pins; 5 stance leg-steps -> 30 friction rows.
        assert_eq!(ocp.num_swing_pins, 9);
        assert_eq!(ocp.qp.a_eq.nrows(), 9);
        assert_eq!(ocp.num_friction_rows, 30);
        assert_eq!(ocp.qp.a_in.nrows(), 30);
        for row in 0..ocp.qp.a_eq.nrows() {
            let nonzero: Vec<usize> = (0..ocp.qp.num_vars())
                .filter(|&c| ocp.qp.a_eq[(row, c)] != 0.0)
                .collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(ocp.qp.a_eq[(row, nonzero[0])], 1.0);
            assert_eq!(ocp.qp.b_eq[row], 0.0);
        }
        // Solve and confirm swing forces vanish.
        let sol = solve_tracking(&ocp, &SolverConfig::default(), None).unwrap();
        assert!(sol.feasible);
        let rf0 = FORCE_DIM * 0 + 3;
        assert_eq!(sol.solution.x[rf0], 0.0);
        assert_eq!(sol.solution.x[rf0 + 1], 0.0);
        assert_eq!(sol.solution.x[rf0 + 2], 0.0);
    }

    /// Penalty level scales with how bad the state already is.
    #[test]
    fn stand_penalty_is_large_and_state_dependent() {
        let robot = RobotParams::<f64>::default();
        let ctx = RolloutContext::<f64>::default();
        let feet0 = standing_feet(&robot);
        let calm = stand_penalty(&ctx, &standing_state(&robot), &feet0, 8);
        let mut bad_state = standing_state(&robot);
        bad_state.v.x = 1.5;
        bad_state.p.z = 0.30;
        let stressed = stand_penalty(&ctx, &bad_state, &feet0, 8);
        assert!(calm >= PENALTY_SCALE);
        assert!(stressed > calm);
    }
}
