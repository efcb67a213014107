//! Contact-sequence MDP for four legs.
//!
//! A node step lasts `dt_node` (0.08 s by default) and assigns each leg to
//! stance (1) or swing (0). Legs carry phase timers; a leg may change phase
//! only once its current phase has lasted the configured minimum (0.24 s
//! swing, 0.16 s stance). Phases still running when a sequence ends are
//! exempt from the minimum-time checks.

use rand::Rng;
use thiserror::Error;

use crate::dynamics::NUM_LEGS;
use crate::fmt::{self, FormatError};
use crate::scalar::{real, Real};

/// Default node-step duration in seconds.
pub const DEFAULT_DT_NODE: f64 = 0.08;
/// Default minimum swing duration in seconds.
pub const DEFAULT_T_SWING_MIN: f64 = 0.24;
/// Default minimum stance duration in seconds.
pub const DEFAULT_T_STANCE_MIN: f64 = 0.16;
/// Slack applied to timer comparisons so exact multiples of the step pass.
pub const TIMER_EPS: f64 = 1e-9;

/// Canonical leg names in index order.
pub const LEG_NAMES: [&str; NUM_LEGS] = ["LF", "RF", "LH", "RH"];

/// One step's contact assignment, `true` = stance.
pub type LegSet = [bool; NUM_LEGS];

/// Encodes a leg set as a 4-bit index, LF in the lowest bit.
pub fn action_index(action: &LegSet) -> usize {
    action
        .iter()
        .enumerate()
        .map(|(i, &c)| usize::from(c) << i)
        .sum()
}

/// Decodes a 4-bit action index back into a leg set.
pub fn action_from_index(index: usize) -> LegSet {
    std::array::from_fn(|i| (index >> i) & 1 == 1)
}

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("{0}")]
    Invalid(String),
    #[error(
        "step {step}, leg {leg}: {phase} lasted {elapsed:.4} s, minimum is {minimum:.4} s"
    )]
    MinTimeViolation {
        step: usize,
        leg: &'static str,
        phase: &'static str,
        elapsed: f64,
        minimum: f64,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Minimum phase durations gating contact changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityConfig<T: Real> {
    pub t_swing_min: T,
    pub t_stance_min: T,
}

impl<T: Real> Default for FeasibilityConfig<T> {
    fn default() -> Self {
        Self {
            t_swing_min: real(DEFAULT_T_SWING_MIN),
            t_stance_min: real(DEFAULT_T_STANCE_MIN),
        }
    }
}

impl<T: Real> FeasibilityConfig<T> {
    pub fn validate(&self) -> Result<(), ContactError> {
        if !(self.t_swing_min > T::zero()) || !(self.t_stance_min > T::zero()) {
            return Err(ContactError::Invalid(
                "minimum phase times must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-leg contact flags and phase timers.
///
/// The timer of the current phase accumulates; the timer of the other phase
/// stays frozen at the value it reached when that phase ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState<T: Real> {
    pub contact: LegSet,
    pub t_swing: [T; NUM_LEGS],
    pub t_stance: [T; NUM_LEGS],
}

impl<T: Real> ContactState<T> {
    /// All four legs in stance with stance timers at the minimum: the state
    /// simulations start from, free to change any leg immediately.
    pub fn initial_stand(cfg: &FeasibilityConfig<T>) -> Self {
        Self {
            contact: [true; NUM_LEGS],
            t_swing: [T::zero(); NUM_LEGS],
            t_stance: [cfg.t_stance_min; NUM_LEGS],
        }
    }

    /// Whether leg `i` may change phase under `cfg`.
    pub fn leg_free(&self, i: usize, cfg: &FeasibilityConfig<T>) -> bool {
        let eps = real::<T>(TIMER_EPS);
        if self.contact[i] {
            self.t_stance[i] >= cfg.t_stance_min - eps
        } else {
            self.t_swing[i] >= cfg.t_swing_min - eps
        }
    }
}

/// Advances the contact state by one step under `action`.
///
/// Purely mechanical: legality is the caller's concern (see
/// [`feasible_actions`] and [`verify_sequence`]).
pub fn transition<T: Real>(state: &ContactState<T>, action: &LegSet, dt: T) -> ContactState<T> {
    let mut next = *state;
    for i in 0..NUM_LEGS {
        if action[i] == state.contact[i] {
            if action[i] {
                next.t_stance[i] += dt;
            } else {
                next.t_swing[i] += dt;
            }
        } else {
            next.contact[i] = action[i];
            if action[i] {
                next.t_stance[i] = dt;
            } else {
                next.t_swing[i] = dt;
            }
        }
    }
    next
}

/// Enumerates the legal actions from `state` in increasing action-index
/// order. Legs still inside a minimum phase keep their current flag, so the
/// count is `2^(free legs)`.
pub fn feasible_actions<T: Real>(
    state: &ContactState<T>,
    cfg: &FeasibilityConfig<T>,
) -> Vec<LegSet> {
    let free: Vec<usize> = (0..NUM_LEGS).filter(|&i| state.leg_free(i, cfg)).collect();
    let mut actions = Vec::with_capacity(1 << free.len());
    for combo in 0..(1usize << free.len()) {
        let mut action = state.contact;
        for (bit, &leg) in free.iter().enumerate() {
            action[leg] = (combo >> bit) & 1 == 1;
        }
        actions.push(action);
    }
    actions.sort_by_key(action_index);
    actions
}

/// A contact schedule: `steps.len()` node steps of duration `dt_node`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSequence<T: Real> {
    pub dt_node: T,
    pub steps: Vec<LegSet>,
}

impl<T: Real> GaitSequence<T> {
    pub fn new(dt_node: T, steps: Vec<LegSet>) -> Result<Self, ContactError> {
        if !(dt_node > T::zero()) || !dt_node.is_finite() {
            return Err(ContactError::Invalid(format!(
                "dt_node must be positive and finite, got {dt_node}"
            )));
        }
        Ok(Self { dt_node, steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Uniformly samples legal continuations of `sequence` out to `total_steps`.
///
/// `end_state` must be the contact state reached after the last step of
/// `sequence`. Identical seeds give identical completions.
pub fn sample_completion<T: Real, R: Rng>(
    sequence: &GaitSequence<T>,
    end_state: &ContactState<T>,
    total_steps: usize,
    cfg: &FeasibilityConfig<T>,
    rng: &mut R,
) -> Result<GaitSequence<T>, ContactError> {
    if sequence.len() > total_steps {
        return Err(ContactError::Invalid(format!(
            "sequence has {} steps, more than the requested total {}",
            sequence.len(),
            total_steps
        )));
    }
    let mut steps = sequence.steps.clone();
    let mut state = *end_state;
    while steps.len() < total_steps {
        let actions = feasible_actions(&state, cfg);
        let action = actions[rng.gen_range(0..actions.len())];
        state = transition(&state, &action, sequence.dt_node);
        steps.push(action);
    }
    GaitSequence::new(sequence.dt_node, steps)
}

/// Expands a node-step schedule to MPC resolution by repeating each row
/// `dt_node / h` times. The ratio must be an integer.
pub fn to_mpc_schedule<T: Real>(
    sequence: &GaitSequence<T>,
    h: T,
) -> Result<Vec<LegSet>, ContactError> {
    if !(h > T::zero()) {
        return Err(ContactError::Invalid(format!(
            "MPC step must be positive, got {h}"
        )));
    }
    let ratio = (sequence.dt_node / h).to_f64();
    let k = ratio.round();
    if (ratio - k).abs() > 1e-9 * k.max(1.0) || k < 1.0 {
        return Err(ContactError::Invalid(format!(
            "dt_node must be an integer multiple of the MPC step, got ratio {ratio}"
        )));
    }
    let k = k as usize;
    let mut rows = Vec::with_capacity(sequence.len() * k);
    for step in &sequence.steps {
        for _ in 0..k {
            rows.push(*step);
        }
    }
    Ok(rows)
}

/// Replays `sequence` from `initial` and reports the first minimum-time
/// violation, if any. Phases truncated by the end of the sequence are not
/// checked.
pub fn verify_sequence<T: Real>(
    initial: &ContactState<T>,
    sequence: &GaitSequence<T>,
    cfg: &FeasibilityConfig<T>,
) -> Result<(), ContactError> {
    let mut state = *initial;
    for (step, action) in sequence.steps.iter().enumerate() {
        for leg in 0..NUM_LEGS {
            if action[leg] != state.contact[leg] && !state.leg_free(leg, cfg) {
                let (phase, elapsed, minimum) = if state.contact[leg] {
                    (
                        "stance",
                        state.t_stance[leg].to_f64(),
                        cfg.t_stance_min.to_f64(),
                    )
                } else {
                    (
                        "swing",
                        state.t_swing[leg].to_f64(),
                        cfg.t_swing_min.to_f64(),
                    )
                };
                return Err(ContactError::MinTimeViolation {
                    step,
                    leg: LEG_NAMES[leg],
                    phase,
                    elapsed,
                    minimum,
                });
            }
        }
        state = transition(&state, action, sequence.dt_node);
    }
    Ok(())
}

/// Schema name of the gait-schedule CSV.
pub const GAIT_SCHEMA: &str = "gait-sequence";

/// Serializes a schedule as CSV: schema line, `t,LF,RF,LH,RH` header, one
/// row per node step with `t` in seconds from plan start.
pub fn write_gait_csv<T: Real>(sequence: &GaitSequence<T>) -> String {
    let mut out = String::new();
    out.push_str(&fmt::schema_line(GAIT_SCHEMA));
    out.push('\n');
    out.push_str("t,LF,RF,LH,RH\n");
    for (i, step) in sequence.steps.iter().enumerate() {
        let t = sequence.dt_node.to_f64() * i as f64;
        out.push_str(&fmt::format_g(t, fmt::SIG_DATA));
        for &c in step {
            out.push(',');
            out.push(if c { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV produced by [`write_gait_csv`].
pub fn read_gait_csv(text: &str) -> Result<GaitSequence<f64>, ContactError> {
    let mut lines = text.lines();
    fmt::check_schema(lines.next(), GAIT_SCHEMA)?;
    let header = lines.next().ok_or_else(|| {
        ContactError::Invalid("gait CSV is missing its header row".to_string())
    })?;
    if header.trim() != "t,LF,RF,LH,RH" {
        return Err(ContactError::Invalid(format!(
            "unexpected gait CSV header {header:?}"
        )));
    }
    let mut steps = Vec::new();
    let mut times = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 3;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + NUM_LEGS {
            return Err(FormatError::FieldCount {
                line: line_no,
                expected: 1 + NUM_LEGS,
                found: fields.len(),
            }
            .into());
        }
        times.push(fmt::parse_field(fields[0], line_no)?);
        let mut row = [false; NUM_LEGS];
        for (i, field) in fields[1..].iter().enumerate() {
            row[i] = match field.trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(ContactError::Invalid(format!(
                        "line {line_no}: contact flag must be 0 or 1, got {other:?}"
                    )))
                }
            };
        }
        steps.push(row);
    }
    if steps.is_empty() {
        return Err(ContactError::Invalid(
            "gait CSV contains no schedule rows".to_string(),
        ));
    }
    let dt_node = if times.len() >= 2 {
        times[1] - times[0]
    } else {
        DEFAULT_DT_NODE
    };
    GaitSequence::new(dt_node, steps)
}
