//! Single-rigid-body dynamics for a quadruped trunk.
//!
//! The model lumps the robot into one rigid body driven by point contact
//! forces at the four feet:
//!
//! ```text
//! p_dot     = v
//! v_dot     = (1/m) * sum_i delta_i * f_i + g
//! phi_dot   = Einv(phi) * omega_b
//! omega_dot = Ic^-1 * ( -omega_b x (Ic * omega_b) + sum_i delta_i * r_i x f_i )
//! ```
//!
//! where `delta_i` is the contact flag of leg `i`, `r_i = p_foot_i - p` and
//! `phi = (roll, pitch, yaw)` in the ZYX convention. Leg order everywhere is
//! LF, RF, LH, RH.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::scalar::{real, Real};

/// Number of legs.
pub const NUM_LEGS: usize = 4;
/// Dimension of the rigid-body state vector.
pub const STATE_DIM: usize = 12;
/// Dimension of the stacked force vector (4 legs x 3 components).
pub const FORCE_DIM: usize = 12;

/// Pitch magnitudes beyond `pi/2 - GIMBAL_MARGIN` are rejected.
pub const GIMBAL_MARGIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("pitch {pitch} is within {margin} of the gimbal lock singularity")]
    GimbalLock { pitch: f64, margin: f64 },
    #[error("invalid inertial parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

/// Trunk state: CoM position/velocity, ZYX Euler angles, body angular rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrbState<T: Real> {
    pub p: Vector3<T>,
    pub v: Vector3<T>,
    pub phi: Vector3<T>,
    pub omega: Vector3<T>,
}

impl<T: Real> SrbState<T> {
    pub fn zero() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            phi: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    /// Stacks the state as `[p; v; phi; omega]`.
    pub fn to_vector(&self) -> nalgebra::SVector<T, STATE_DIM> {
        let mut x = nalgebra::SVector::<T, STATE_DIM>::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        x.fixed_rows_mut::<3>(6).copy_from(&self.phi);
        x.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        x
    }

    pub fn from_vector(x: &nalgebra::SVector<T, STATE_DIM>) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into(),
            v: x.fixed_rows::<3>(3).into(),
            phi: x.fixed_rows::<3>(6).into(),
            omega: x.fixed_rows::<3>(9).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }
}

/// Per-leg ground reaction forces, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlForces<T: Real> {
    pub f: [Vector3<T>; NUM_LEGS],
}

impl<T: Real> ControlForces<T> {
    pub fn zero() -> Self {
        Self {
            f: [Vector3::zeros(); NUM_LEGS],
        }
    }

    pub fn to_vector(&self) -> nalgebra::SVector<T, FORCE_DIM> {
        let mut u = nalgebra::SVector::<T, FORCE_DIM>::zeros();
        for (i, fi) in self.f.iter().enumerate() {
            u.fixed_rows_mut::<3>(3 * i).copy_from(fi);
        }
        u
    }

    pub fn from_vector(u: &nalgebra::SVector<T, FORCE_DIM>) -> Self {
        let mut f = [Vector3::zeros(); NUM_LEGS];
        for (i, fi) in f.iter_mut().enumerate() {
            *fi = u.fixed_rows::<3>(3 * i).into();
        }
        Self { f }
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().all(|fi| fi.iter().all(|c| c.is_finite()))
    }
}

/// Foot positions (world frame) plus contact flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootState<T: Real> {
    pub pos: [Vector3<T>; NUM_LEGS],
    pub contact: [bool; NUM_LEGS],
}

impl<T: Real> FootState<T> {
    pub fn all_stance(pos: [Vector3<T>; NUM_LEGS]) -> Self {
        Self {
            pos,
            contact: [true; NUM_LEGS],
        }
    }
}

/// Mass, trunk inertia and gravity.
#[derive(Debug, Clone, PartialEq)]
pub struct InertiaParams<T: Real> {
    pub mass: T,
    pub inertia: Matrix3<T>,
    pub gravity: Vector3<T>,
    inertia_inv: Matrix3<T>,
}

impl<T: Real> InertiaParams<T> {
    /// Validates mass > 0, symmetric positive definite inertia, finite gravity.
    pub fn new(
        mass: T,
        inertia: Matrix3<T>,
        gravity: Vector3<T>,
    ) -> Result<Self, DynamicsError> {
        if !(mass > T::zero()) || !mass.is_finite() {
            return Err(DynamicsError::InvalidParams(format!(
                "mass must be positive and finite, got {mass}"
            )));
        }
        if inertia.iter().any(|c| !c.is_finite()) {
            return Err(DynamicsError::NonFinite("inertia"));
        }
        if gravity.iter().any(|c| !c.is_finite()) {
            return Err(DynamicsError::NonFinite("gravity"));
        }
        let asym = (inertia - inertia.transpose()).abs().max();
        let scale = inertia.abs().max().max(T::one());
        if asym > real::<T>(1e-12) * scale {
            return Err(DynamicsError::InvalidParams(
                "inertia matrix is not symmetric".to_string(),
            ));
        }
        let chol = inertia.cholesky().ok_or_else(|| {
            DynamicsError::InvalidParams("inertia matrix is not positive definite".to_string())
        })?;
        let _ = chol;
        let inertia_inv = inertia.try_inverse().ok_or_else(|| {
            DynamicsError::InvalidParams("inertia matrix is singular".to_string())
        })?;
        Ok(Self {
            mass,
            inertia,
            gravity,
            inertia_inv,
        })
    }

    /// Diagonal inertia with standard gravity `(0, 0, -9.81)`.
    pub fn diagonal(mass: T, ixx: T, iyy: T, izz: T) -> Result<Self, DynamicsError> {
        Self::new(
            mass,
            Matrix3::from_diagonal(&Vector3::new(ixx, iyy, izz)),
            Vector3::new(T::zero(), T::zero(), real(-9.81)),
        )
    }

    pub fn inertia_inv(&self) -> &Matrix3<T> {
        &self.inertia_inv
    }

    /// Replaces gravity (used by sloped-terrain setups), revalidating it.
    pub fn with_gravity(mut self, gravity: Vector3<T>) -> Result<Self, DynamicsError> {
        if gravity.iter().any(|c| !c.is_finite()) {
            return Err(DynamicsError::NonFinite("gravity"));
        }
        self.gravity = gravity;
        Ok(self)
    }
}

/// Map between ZYX Euler-angle rates and body angular velocity.
///
/// `omega = E(phi) * phi_dot` and `phi_dot = Einv(phi) * omega`; both
/// directions are singular when `cos(pitch)` vanishes, so construction fails
/// within [`GIMBAL_MARGIN`] of `|pitch| = pi/2`.
#[derive(Debug, Clone, Copy)]
pub struct EulerRateMap<T: Real> {
    e: Matrix3<T>,
    e_inv: Matrix3<T>,
    roll: T,
    pitch: T,
}

impl<T: Real> EulerRateMap<T> {
    pub fn new(phi: &Vector3<T>) -> Result<Self, DynamicsError> {
        let (roll, pitch) = (phi.x, phi.y);
        if !roll.is_finite() || !pitch.is_finite() {
            return Err(DynamicsError::NonFinite("euler angles"));
        }
        let limit = real::<T>(std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN);
        if pitch.abs() >= limit {
            return Err(DynamicsError::GimbalLock {
                pitch: pitch.to_f64(),
                margin: GIMBAL_MARGIN,
            });
        }
        let (sr, cr) = (roll.sin(), roll.cos());
        let (sp, cp) = (pitch.sin(), pitch.cos());
        let tp = sp / cp;
        let e = Matrix3::new(
            T::one(),
            T::zero(),
            -sp,
            T::zero(),
            cr,
            sr * cp,
            T::zero(),
            -sr,
            cr * cp,
        );
        let e_inv = Matrix3::new(
            T::one(),
            sr * tp,
            cr * tp,
            T::zero(),
            cr,
            -sr,
            T::zero(),
            sr / cp,
            cr / cp,
        );
        Ok(Self {
            e,
            e_inv,
            roll,
            pitch,
        })
    }

    /// `phi_dot = Einv * omega`.
    pub fn rates_from_omega(&self, omega: &Vector3<T>) -> Vector3<T> {
        self.e_inv * omega
    }

    /// `omega = E * phi_dot`.
    pub fn omega_from_rates(&self, rates: &Vector3<T>) -> Vector3<T> {
        self.e * rates
    }

    pub fn e_inv(&self) -> &Matrix3<T> {
        &self.e_inv
    }

    /// Partial derivatives of `Einv` with respect to roll and pitch.
    fn e_inv_partials(&self) -> (Matrix3<T>, Matrix3<T>) {
        let (sr, cr) = (self.roll.sin(), self.roll.cos());
        let (sp, cp) = (self.pitch.sin(), self.pitch.cos());
        let tp = sp / cp;
        let sec = T::one() / cp;
        let d_roll = Matrix3::new(
            T::zero(),
            cr * tp,
            -sr * tp,
            T::zero(),
            -sr,
            -cr,
            T::zero(),
            cr * sec,
            -sr * sec,
        );
        let d_pitch = Matrix3::new(
            T::zero(),
            sr * sec * sec,
            cr * sec * sec,
            T::zero(),
            T::zero(),
            T::zero(),
            T::zero(),
            sr * sec * tp,
            cr * sec * tp,
        );
        (d_roll, d_pitch)
    }
}

/// Builds the Euler-rate map for a state, reporting gimbal lock explicitly.
pub fn euler_rate_map<T: Real>(phi: &Vector3<T>) -> Result<EulerRateMap<T>, DynamicsError> {
    EulerRateMap::new(phi)
}

fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

fn validate_inputs<T: Real>(
    state: &SrbState<T>,
    forces: &ControlForces<T>,
) -> Result<(), DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !forces.is_finite() {
        return Err(DynamicsError::NonFinite("forces"));
    }
    Ok(())
}

/// Continuous-time state derivative.
///
/// Contact flags gate each leg's force; swing-leg forces contribute nothing
/// regardless of their value.
pub fn continuous_dynamics<T: Real>(
    state: &SrbState<T>,
    forces: &ControlForces<T>,
    feet: &FootState<T>,
    params: &InertiaParams<T>,
) -> Result<SrbState<T>, DynamicsError> {
    validate_inputs(state, forces)?;
    let map = EulerRateMap::new(&state.phi)?;

    let mut total_force = Vector3::zeros();
    let mut total_torque = Vector3::zeros();
    for i in 0..NUM_LEGS {
        if feet.contact[i] {
            let r = feet.pos[i] - state.p;
            total_force += forces.f[i];
            total_torque += r.cross(&forces.f[i]);
        }
    }

    let i_omega = params.inertia * state.omega;
    let omega_dot = params.inertia_inv * (-state.omega.cross(&i_omega) + total_torque);

    Ok(SrbState {
        p: state.v,
        v: total_force / params.mass + params.gravity,
        phi: map.rates_from_omega(&state.omega),
        omega: omega_dot,
    })
}

/// Integration scheme for [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Explicit Euler; what the OCP linearization assumes.
    Euler,
    /// Classic fourth-order Runge-Kutta; used by the simulation plant.
    Rk4,
}

/// Advances the state by `h` holding forces and feet fixed.
pub fn step<T: Real>(
    state: &SrbState<T>,
    forces: &ControlForces<T>,
    feet: &FootState<T>,
    params: &InertiaParams<T>,
    h: T,
    integrator: Integrator,
) -> Result<SrbState<T>, DynamicsError> {
    if !(h > T::zero()) {
        return Err(DynamicsError::InvalidParams(format!(
            "step size must be positive, got {h}"
        )));
    }
    let add = |a: &SrbState<T>, b: &SrbState<T>, s: T| SrbState {
        p: a.p + b.p * s,
        v: a.v + b.v * s,
        phi: a.phi + b.phi * s,
        omega: a.omega + b.omega * s,
    };
    match integrator {
        Integrator::Euler => {
            let k1 = continuous_dynamics(state, forces, feet, params)?;
            Ok(add(state, &k1, h))
        }
        Integrator::Rk4 => {
            let half = h / real(2.0);
            let k1 = continuous_dynamics(state, forces, feet, params)?;
            let k2 = continuous_dynamics(&add(state, &k1, half), forces, feet, params)?;
            let k3 = continuous_dynamics(&add(state, &k2, half), forces, feet, params)?;
            let k4 = continuous_dynamics(&add(state, &k3, h), forces, feet, params)?;
            let sixth = h / real(6.0);
            let third = h / real(3.0);
            let mut out = add(state, &k1, sixth);
            out = add(&out, &k2, third);
            out = add(&out, &k3, third);
            out = add(&out, &k4, sixth);
            Ok(out)
        }
    }
}

/// Jacobians `(A, B)` of the explicit-Euler step map.
///
/// `A` is 12x12, `B` is 12x12 with the columns of swing legs identically
/// zero. Matches finite differences of [`step`] with [`Integrator::Euler`].
pub fn linearize<T: Real>(
    state: &SrbState<T>,
    forces: &ControlForces<T>,
    feet: &FootState<T>,
    params: &InertiaParams<T>,
    h: T,
) -> Result<(DMatrix<T>, DMatrix<T>), DynamicsError> {
    validate_inputs(state, forces)?;
    let map = EulerRateMap::new(&state.phi)?;
    let inv = params.inertia_inv;

    // Continuous-time Jacobian blocks; A = I + h * Jx, B = h * Ju.
    let mut jx = DMatrix::<T>::zeros(STATE_DIM, STATE_DIM);
    let mut ju = DMatrix::<T>::zeros(STATE_DIM, FORCE_DIM);

    // d p_dot / d v = I
    for i in 0..3 {
        jx[(i, 3 + i)] = T::one();
    }

    // d phi_dot / d phi and d phi_dot / d omega
    let (d_roll, d_pitch) = map.e_inv_partials();
    let dphi_roll = d_roll * state.omega;
    let dphi_pitch = d_pitch * state.omega;
    for r in 0..3 {
        jx[(6 + r, 6)] = dphi_roll[r];
        jx[(6 + r, 7)] = dphi_pitch[r];
    }
    for r in 0..3 {
        for c in 0..3 {
            jx[(6 + r, 9 + c)] = map.e_inv[(r, c)];
        }
    }

    // d omega_dot / d omega = Ic^-1 * ([Ic*omega]x - [omega]x * Ic)
    let i_omega = params.inertia * state.omega;
    let gyro = inv * (skew(&i_omega) - skew(&state.omega) * params.inertia);
    for r in 0..3 {
        for c in 0..3 {
            jx[(9 + r, 9 + c)] = gyro[(r, c)];
        }
    }

    // Torque coupling: r_i depends on the CoM position, and forces enter both
    // the linear and angular rows for stance legs only.
    let mut stance_force = Vector3::<T>::zeros();
    for i in 0..NUM_LEGS {
        if feet.contact[i] {
            stance_force += forces.f[i];
        }
    }
    let dp_torque = inv * skew(&stance_force);
    for r in 0..3 {
        for c in 0..3 {
            jx[(9 + r, c)] = dp_torque[(r, c)];
        }
    }

    let inv_m = T::one() / params.mass;
    for i in 0..NUM_LEGS {
        if !feet.contact[i] {
            continue;
        }
        let r = feet.pos[i] - state.p;
        let torque_block = inv * skew(&r);
        for row in 0..3 {
            ju[(3 + row, 3 * i + row)] = inv_m;
            for col in 0..3 {
                ju[(9 + row, 3 * i + col)] = torque_block[(row, col)];
            }
        }
    }

    let mut a = DMatrix::<T>::identity(STATE_DIM, STATE_DIM);
    a += jx * h;
    let b = ju * h;
    Ok((a, b))
}
