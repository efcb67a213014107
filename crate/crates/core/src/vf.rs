//! Learned guidance for the contact planner: feature encoding, tree
//! logging, dataset files, and the trained heads.
//!
//! A planner node is encoded as 78 features — the robot context at plan
//! time plus the partial contact sequence leading to the node:
//!
//! ```text
//! [ z_err 1 | v_err 3 | phi_err 3 | omega_err 3 | r 12 |
//!   t_swing 4 | t_stance 4 | c_seq 48 ]
//! ```
//!
//! `r` holds the foot positions relative to the CoM, leg-major with xyz
//! per leg; `c_seq` is the contact sequence over a fixed window of
//! [`S_MAX`] = 12 node steps, step-major with one flag per leg, and steps
//! beyond the node's depth are filled with -1. The same encoder runs at
//! logging and at inference, so a regressor trained on logged trees can
//! score unvisited nodes inside the planner ([`ValueFunction`] implements
//! [`SequenceEstimator`]). A 16-way classification head over the same
//! features predicts the next contact set directly
//! ([`action_policy_next`]).

use crate::contact::{
    action_index, feasible_actions, transition, ContactState, FeasibilityConfig, LegSet,
};
use crate::dynamics::NUM_LEGS;
use crate::fmt::{check_schema, format_g, parse_field, schema_line, FormatError, SIG_DATA};
use crate::mcts::{PlanInput, SequenceEstimator, Tree};
use crate::mlp::{MlpError, MlpModel};
use crate::scalar::{real, Real};
use nalgebra::{DMatrix, DVector, Vector3};
use std::path::Path;
use thiserror::Error;

/// Number of node steps the contact-sequence window encodes.
pub const S_MAX: usize = 12;
/// Total feature count: 30 context entries plus `4 * S_MAX` contact flags.
pub const VF_INPUT_DIM: usize = 30 + NUM_LEGS * S_MAX;
/// Logit count of the next-contact classification head.
pub const AP_CLASSES: usize = 1 << NUM_LEGS;
/// Schema name of the training-dataset file.
pub const DATASET_SCHEMA: &str = "vf-dataset";

#[derive(Debug, Error)]
pub enum VfError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The 78 features scoring one planner node.
#[derive(Debug, Clone, PartialEq)]
pub struct VfInput<T: Real> {
    /// CoM height minus the commanded height, m.
    pub z_err: T,
    /// CoM velocity minus the commanded planar velocity, m/s.
    pub v_err: Vector3<T>,
    /// Roll and pitch (zero reference); the yaw entry is always 0, rad.
    pub phi_err: Vector3<T>,
    /// Body angular rate minus the commanded yaw rate, rad/s.
    pub omega_err: Vector3<T>,
    /// Foot positions relative to the CoM, m.
    pub r: [Vector3<T>; NUM_LEGS],
    /// Per-leg swing timers at plan time, s.
    pub t_swing: [T; NUM_LEGS],
    /// Per-leg stance timers at plan time, s.
    pub t_stance: [T; NUM_LEGS],
    /// Step-major contact flags over the window, -1 past the node's depth.
    pub c_seq: [T; NUM_LEGS * S_MAX],
}

impl<T: Real> VfInput<T> {
    /// Concatenates the fields in the documented order.
    pub fn flatten(&self) -> DVector<T> {
        let mut x = DVector::zeros(VF_INPUT_DIM);
        x[0] = self.z_err;
        x.fixed_rows_mut::<3>(1).copy_from(&self.v_err);
        x.fixed_rows_mut::<3>(4).copy_from(&self.phi_err);
        x.fixed_rows_mut::<3>(7).copy_from(&self.omega_err);
        for (leg, r) in self.r.iter().enumerate() {
            x.fixed_rows_mut::<3>(10 + 3 * leg).copy_from(r);
        }
        for leg in 0..NUM_LEGS {
            x[22 + leg] = self.t_swing[leg];
            x[26 + leg] = self.t_stance[leg];
        }
        for (k, &c) in self.c_seq.iter().enumerate() {
            x[30 + k] = c;
        }
        x
    }

    /// Rebuilds the struct from a flat feature row.
    pub fn unflatten(features: &[T]) -> Result<Self, VfError> {
        if features.len() != VF_INPUT_DIM {
            return Err(VfError::Input(format!(
                "expected {VF_INPUT_DIM} features, got {}",
                features.len()
            )));
        }
        let vec3 = |k: usize| Vector3::new(features[k], features[k + 1], features[k + 2]);
        let input = Self {
            z_err: features[0],
            v_err: vec3(1),
            phi_err: vec3(4),
            omega_err: vec3(7),
            r: std::array::from_fn(|leg| vec3(10 + 3 * leg)),
            t_swing: std::array::from_fn(|leg| features[22 + leg]),
            t_stance: std::array::from_fn(|leg| features[26 + leg]),
            c_seq: std::array::from_fn(|k| features[30 + k]),
        };
        input.validate()?;
        Ok(input)
    }

    /// Checks the contact-window coding: entries in {-1, 0, 1} with the -1
    /// fills forming a contiguous tail.
    pub fn validate(&self) -> Result<(), VfError> {
        let mut padded = false;
        for (k, &c) in self.c_seq.iter().enumerate() {
            if c != -T::one() && c != T::zero() && c != T::one() {
                return Err(VfError::Input(format!(
                    "c_seq[{k}] = {c} is not one of -1, 0, 1"
                )));
            }
            if c == -T::one() {
                padded = true;
            } else if padded {
                return Err(VfError::Input(format!(
                    "c_seq[{k}] follows a -1 fill entry"
                )));
            }
        }
        Ok(())
    }

    /// Number of encoded steps before the -1 tail.
    pub fn depth(&self) -> usize {
        self.c_seq
            .iter()
            .position(|&c| c == -T::one())
            .map_or(S_MAX, |k| k / NUM_LEGS)
    }
}

/// Encodes the plan-time context plus a node's contact sequence.
///
/// The context part is shared by every node of one plan call: tracking
/// errors against the velocity command, feet relative to the CoM, and the
/// contact timers at the root. Only `c_seq` distinguishes nodes.
pub fn assemble_input<T: Real>(
    input: &PlanInput<T>,
    sequence: &[LegSet],
) -> Result<VfInput<T>, VfError> {
    if sequence.len() > S_MAX {
        return Err(VfError::Input(format!(
            "sequence has {} steps, the encoding window holds {S_MAX}",
            sequence.len()
        )));
    }
    let state = &input.state;
    let cmd = &input.context.cmd;
    let mut c_seq = [-T::one(); NUM_LEGS * S_MAX];
    for (s, action) in sequence.iter().enumerate() {
        for leg in 0..NUM_LEGS {
            c_seq[NUM_LEGS * s + leg] = if action[leg] { T::one() } else { T::zero() };
        }
    }
    Ok(VfInput {
        z_err: state.p.z - cmd.height,
        v_err: state.v - Vector3::new(cmd.v_xy.x, cmd.v_xy.y, T::zero()),
        phi_err: Vector3::new(state.phi.x, state.phi.y, T::zero()),
        omega_err: state.omega - Vector3::new(T::zero(), T::zero(), cmd.yaw_rate),
        r: std::array::from_fn(|leg| input.feet.pos[leg] - state.p),
        t_swing: input.contacts.t_swing,
        t_stance: input.contacts.t_stance,
        c_seq,
    })
}

/// One regression example: node features and the node's mean rollout cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T: Real> {
    pub x: VfInput<T>,
    pub y: T,
}

/// What [`log_tree`] kept and what it dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LogSummary {
    pub appended: usize,
    /// Nodes whose rollout mean includes an infeasibility penalty.
    pub excluded_penalized: usize,
    /// Nodes deeper than the encoding window.
    pub excluded_deep: usize,
}

/// Extracts one training sample per rollout-scored node of a finished
/// search tree: features from the plan context and the node's path, target
/// the node's mean rollout cost. Penalty-contaminated nodes are dropped
/// (their sentinel magnitudes would dominate a squared loss), as are nodes
/// beyond the encoding window.
pub fn log_tree<T: Real>(
    tree: &Tree<T>,
    input: &PlanInput<T>,
    sink: &mut Vec<TrainingSample<T>>,
) -> Result<LogSummary, VfError> {
    let mut summary = LogSummary::default();
    for (id, node) in tree.nodes.iter().enumerate() {
        let Some(p_bar) = node.p_bar else {
            continue;
        };
        if node.penalized {
            summary.excluded_penalized += 1;
            continue;
        }
        if node.depth > S_MAX {
            summary.excluded_deep += 1;
            continue;
        }
        sink.push(TrainingSample {
            x: assemble_input(input, &tree.path_steps(id))?,
            y: p_bar,
        });
        summary.appended += 1;
    }
    Ok(summary)
}

fn dataset_header() -> String {
    let mut cols: Vec<String> = (0..VF_INPUT_DIM).map(|k| format!("f{k:02}")).collect();
    cols.push("target".to_string());
    cols.join(",")
}

/// Writes samples as a CSV dataset: schema line, `f00..f77,target` header,
/// then one row per sample at 9 significant digits.
pub fn write_dataset<T: Real>(
    path: &Path,
    samples: &[TrainingSample<T>],
) -> Result<(), VfError> {
    let mut out = String::new();
    out.push_str(&schema_line(DATASET_SCHEMA));
    out.push('\n');
    out.push_str(&dataset_header());
    out.push('\n');
    for sample in samples {
        let mut fields: Vec<String> = sample
            .x
            .flatten()
            .iter()
            .map(|&v| format_g(v.to_f64(), SIG_DATA))
            .collect();
        fields.push(format_g(sample.y.to_f64(), SIG_DATA));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a dataset file written by [`write_dataset`], validating the
/// schema, the header, and every row's contact-window coding.
pub fn read_dataset<T: Real>(path: &Path) -> Result<Vec<TrainingSample<T>>, VfError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    check_schema(lines.next(), DATASET_SCHEMA)?;
    let header = lines.next().unwrap_or_default();
    if header.trim_end() != dataset_header() {
        return Err(VfError::Input(format!("unexpected header {header:?}")));
    }
    let mut samples = Vec::new();
    for (k, row) in lines.enumerate() {
        let line = k + 3;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != VF_INPUT_DIM + 1 {
            return Err(FormatError::FieldCount {
                line,
                expected: VF_INPUT_DIM + 1,
                found: fields.len(),
            }
            .into());
        }
        let mut values = Vec::with_capacity(VF_INPUT_DIM + 1);
        for field in &fields {
            values.push(real::<T>(parse_field(field, line)?));
        }
        samples.push(TrainingSample {
            x: VfInput::unflatten(&values[..VF_INPUT_DIM])?,
            y: values[VF_INPUT_DIM],
        });
    }
    Ok(samples)
}

/// Stacks samples into the matrices the trainer consumes.
pub fn dataset_matrices<T: Real>(samples: &[TrainingSample<T>]) -> (DMatrix<T>, DVector<T>) {
    let rows: Vec<DVector<T>> = samples.iter().map(|s| s.x.flatten()).collect();
    let x = DMatrix::from_fn(samples.len(), VF_INPUT_DIM, |i, j| rows[i][j]);
    let y = DVector::from_fn(samples.len(), |i, _| samples[i].y);
    (x, y)
}

/// A trained cost regressor usable inside the planner.
///
/// Sequences longer than the encoding window are scored by their first
/// [`S_MAX`] steps; the planner's own horizons never exceed the window, so
/// the truncation only matters for hand-built schedules.
#[derive(Debug, Clone)]
pub struct ValueFunction<T: Real> {
    model: MlpModel<T>,
}

impl<T: Real> ValueFunction<T> {
    pub fn new(model: MlpModel<T>) -> Result<Self, VfError> {
        if model.input_dim() != VF_INPUT_DIM || model.output_dim() != 1 {
            return Err(VfError::Input(format!(
                "value model must map {VF_INPUT_DIM} features to 1 output, got {} -> {}",
                model.input_dim(),
                model.output_dim()
            )));
        }
        model.validate()?;
        Ok(Self { model })
    }

    pub fn load(path: &Path) -> Result<Self, VfError> {
        Self::new(MlpModel::load(path)?)
    }

    pub fn model(&self) -> &MlpModel<T> {
        &self.model
    }

    /// Scores one encoded input.
    pub fn evaluate_input(&self, x: &VfInput<T>) -> T {
        let features = x.flatten();
        let row = DMatrix::from_fn(1, VF_INPUT_DIM, |_, j| features[j]);
        let pred = self
            .model
            .predict(&row)
            .expect("dimensions checked at construction");
        pred[(0, 0)]
    }
}

impl<T: Real> SequenceEstimator<T> for ValueFunction<T> {
    fn estimate(&self, input: &PlanInput<T>, sequence: &[LegSet]) -> T {
        let window = &sequence[..sequence.len().min(S_MAX)];
        let x = assemble_input(input, window).expect("window length bounded above");
        self.evaluate_input(&x)
    }
}

/// Raw logits of a next-contact classification head.
pub fn action_policy_logits<T: Real>(
    model: &MlpModel<T>,
    x: &VfInput<T>,
) -> Result<Vec<T>, VfError> {
    if model.input_dim() != VF_INPUT_DIM || model.output_dim() != AP_CLASSES {
        return Err(VfError::Input(format!(
            "next-contact model must map {VF_INPUT_DIM} features to {AP_CLASSES} logits, got {} -> {}",
            model.input_dim(),
            model.output_dim()
        )));
    }
    let features = x.flatten();
    let row = DMatrix::from_fn(1, VF_INPUT_DIM, |_, j| features[j]);
    let pred = model.predict(&row)?;
    Ok((0..AP_CLASSES).map(|j| pred[(0, j)]).collect())
}

/// Predicts the contact set following `prefix`: the head's logits are
/// restricted to the actions feasible after replaying the prefix, and the
/// best restricted logit wins (ties to the lowest action index).
pub fn action_policy_next<T: Real>(
    model: &MlpModel<T>,
    input: &PlanInput<T>,
    prefix: &[LegSet],
    dt_node: T,
    feasibility: &FeasibilityConfig<T>,
) -> Result<LegSet, VfError> {
    let x = assemble_input(input, prefix)?;
    let logits = action_policy_logits(model, &x)?;
    let mut contacts: ContactState<T> = input.contacts;
    for action in prefix {
        contacts = transition(&contacts, action, dt_node);
    }
    let feasible = feasible_actions(&contacts, feasibility);
    let mut best = feasible[0];
    let mut best_logit = logits[action_index(&best)];
    for action in &feasible[1..] {
        let logit = logits[action_index(action)];
        if logit > best_logit {
            best = *action;
            best_logit = logit;
        }
    }
    Ok(best)
}

/// Builds a full schedule by querying the head once per step.
pub fn action_policy_sequence<T: Real>(
    model: &MlpModel<T>,
    input: &PlanInput<T>,
    steps: usize,
    dt_node: T,
    feasibility: &FeasibilityConfig<T>,
) -> Result<Vec<LegSet>, VfError> {
    if steps > S_MAX {
        return Err(VfError::Input(format!(
            "cannot roll the head past the {S_MAX}-step encoding window, asked for {steps}"
        )));
    }
    let mut sequence = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = action_policy_next(model, input, &sequence, dt_node, feasibility)?;
        sequence.push(action);
    }
    Ok(sequence)
}

/// Expands schedules into per-step classification examples: features are
/// the prefix encoding, the label is the index of the step that follows.
pub fn action_policy_dataset<T: Real>(
    input: &PlanInput<T>,
    sequences: &[Vec<LegSet>],
) -> Result<(DMatrix<T>, Vec<usize>), VfError> {
    let mut rows: Vec<DVector<T>> = Vec::new();
    let mut labels = Vec::new();
    for sequence in sequences {
        for k in 0..sequence.len().min(S_MAX) {
            rows.push(assemble_input(input, &sequence[..k])?.flatten());
            labels.push(action_index(&sequence[k]));
        }
    }
    let x = DMatrix::from_fn(rows.len(), VF_INPUT_DIM, |i, j| rows[i][j]);
    Ok((x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{verify_sequence, GaitSequence, DEFAULT_T_STANCE_MIN, DEFAULT_T_SWING_MIN};
    use crate::mcts::{plan, Budget, Node, PlannerConfig};
    use crate::mlp::{train_classifier, TrainConfig};
    use crate::ocp::{RobotParams, RolloutContext, VelocityCommand};
    use crate::{FootState, SrbState};
    use approx::assert_relative_eq;
    use nalgebra::{Vector2, Vector3};
    use tempfile::tempdir;

    fn standing_input() -> PlanInput<f64> {
        let robot = RobotParams::<f64>::default();
        let context = RolloutContext {
            cmd: VelocityCommand {
                v_xy: Vector2::new(0.3, 0.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let feet = FootState::all_stance(robot.nominal_footholds(&Vector2::zeros(), 0.0));
        PlanInput {
            state: SrbState {
                p: Vector3::new(0.0, 0.0, 0.40),
                v: Vector3::new(0.25, 0.0, 0.0),
                phi: Vector3::zeros(),
                omega: Vector3::zeros(),
            },
            feet,
            contacts: ContactState::initial_stand(&FeasibilityConfig::default()),
            context,
        }
    }

    /// Zero tracking errors, an empty sequence: the error block vanishes
    /// and the whole contact window is fill.
    #[test]
    fn nominal_stand_encodes_to_zeros_and_fill() {
        let mut input = standing_input();
        input.state.v = Vector3::new(0.3, 0.0, 0.0);
        let x = assemble_input(&input, &[]).unwrap().flatten();
        assert_eq!(x.len(), VF_INPUT_DIM);
        for k in 0..10 {
            assert_eq!(x[k], 0.0, "entry {k}");
        }
        for k in 30..VF_INPUT_DIM {
            assert_eq!(x[k], -1.0, "entry {k}");
        }
        // Relative feet sit below the CoM at the stance height.
        for leg in 0..NUM_LEGS {
            assert_relative_eq!(x[10 + 3 * leg + 2], -0.40, epsilon = 1e-12);
        }
        // Stance timers hold the plan-time values, swing timers are zero.
        for leg in 0..NUM_LEGS {
            assert_eq!(x[22 + leg], 0.0);
            assert_eq!(x[26 + leg], DEFAULT_T_STANCE_MIN);
        }
    }

    /// A five-step sequence leaves 4 * (12 - 5) = 28 fill entries.
    #[test]
    fn padding_matches_depth_arithmetic() {
        let input = standing_input();
        let steps = vec![[true, false, true, true]; 5];
        let encoded = assemble_input(&input, &steps).unwrap();
        let fill = encoded.c_seq.iter().filter(|&&c| c == -1.0).count();
        assert_eq!(fill, 28);
        assert_eq!(encoded.depth(), 5);
        // Step-major layout: step s, leg l lands at 4 s + l.
        let x = encoded.flatten();
        for s in 0..5 {
            assert_eq!(x[30 + 4 * s], 1.0);
            assert_eq!(x[30 + 4 * s + 1], 0.0);
        }
        let thirteen = vec![[true; NUM_LEGS]; 13];
        assert!(matches!(
            assemble_input(&input, &thirteen),
            Err(VfError::Input(_))
        ));
    }

    #[test]
    fn validation_rejects_broken_contact_windows() {
        let input = standing_input();
        let mut encoded = assemble_input(&input, &[[true; NUM_LEGS]; 2]).unwrap();
        encoded.c_seq[3] = 0.5;
        assert!(matches!(encoded.validate(), Err(VfError::Input(_))));
        let mut encoded = assemble_input(&input, &[[true; NUM_LEGS]; 2]).unwrap();
        encoded.c_seq[2] = -1.0;
        assert!(matches!(encoded.validate(), Err(VfError::Input(_))));
        let flat = assemble_input(&input, &[]).unwrap().flatten();
        assert!(VfInput::unflatten(flat.as_slice()).is_ok());
        assert!(matches!(
            VfInput::<f64>::unflatten(&[0.0; 5]),
            Err(VfError::Input(_))
        ));
    }

    fn hand_tree() -> Tree<f64> {
        let cfg = FeasibilityConfig::default();
        let root_contacts = ContactState::initial_stand(&cfg);
        let step: LegSet = [false, true, true, false];
        let mut nodes = vec![Node {
            parent: None,
            action: None,
            depth: 0,
            contacts: root_contacts,
            terminal: false,
            visits: 3,
            cost_sum: 30.0,
            p_bar: None,
            penalized: false,
            p_vf: None,
            p_combined: None,
            children: vec![1, 2, 3],
        }];
        for (id, (p_bar, penalized)) in [(Some(7.5), false), (Some(9.0), true), (None, false)]
            .into_iter()
            .enumerate()
        {
            nodes.push(Node {
                parent: Some(0),
                action: Some(step),
                depth: 1,
                contacts: transition(&root_contacts, &step, 0.08),
                terminal: false,
                visits: 1,
                cost_sum: p_bar.unwrap_or(0.0),
                p_bar,
                penalized,
                p_vf: if id == 2 { Some(4.0) } else { None },
                p_combined: p_bar,
                children: Vec::new(),
            });
        }
        Tree { nodes }
    }

    /// One sample per rollout-scored node; penalized means are dropped and
    /// counted.
    #[test]
    fn log_tree_keeps_clean_rollout_nodes() {
        let tree = hand_tree();
        let input = standing_input();
        let mut sink = Vec::new();
        let summary = log_tree(&tree, &input, &mut sink).unwrap();
        assert_eq!(summary.appended, 1);
        assert_eq!(summary.excluded_penalized, 1);
        assert_eq!(summary.excluded_deep, 0);
        assert_eq!(sink.len(), 1);
        assert_eq!(sink[0].y, 7.5);
        assert_eq!(sink[0].x.depth(), 1);
        assert_eq!(sink[0].x.c_seq[0], 0.0);
        assert_eq!(sink[0].x.c_seq[1], 1.0);
    }

    /// Writing, reading back, and writing again is byte-stable, and the
    /// reader restores exactly the parsed values.
    #[test]
    fn dataset_file_round_trips() {
        let tree = hand_tree();
        let input = standing_input();
        let mut sink = Vec::new();
        log_tree(&tree, &input, &mut sink).unwrap();
        sink.push(TrainingSample {
            x: assemble_input(&input, &[[true; NUM_LEGS]; 3]).unwrap(),
            y: 0.123456789123,
        });
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_dataset(&path, &sink).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# schema: vf-dataset v1\nf00,f01,"));

        let back = read_dataset::<f64>(&path).unwrap();
        assert_eq!(back.len(), sink.len());
        let path2 = dir.path().join("data2.csv");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // Contact flags and timers survive exactly.
        assert_eq!(back[1].x.c_seq, sink[1].x.c_seq);
        assert_eq!(back[1].x.t_stance, sink[1].x.t_stance);

        let (x, y) = dataset_matrices(&back);
        assert_eq!(x.shape(), (2, VF_INPUT_DIM));
        assert_eq!(y[1], back[1].y);
    }

    #[test]
    fn dataset_reader_rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# schema: other v1\n").unwrap();
        assert!(matches!(
            read_dataset::<f64>(&path),
            Err(VfError::Format(_))
        ));
        let short_row = format!("{}\n{}\n1,2,3\n", schema_line(DATASET_SCHEMA), dataset_header());
        std::fs::write(&path, short_row).unwrap();
        assert!(matches!(
            read_dataset::<f64>(&path),
            Err(VfError::Format(FormatError::FieldCount { .. }))
        ));
        // A row whose contact window holds a 0.5 fails validation.
        let mut fields = vec!["0".to_string(); VF_INPUT_DIM + 1];
        fields[35] = "0.5".to_string();
        let bad_window = format!(
            "{}\n{}\n{}\n",
            schema_line(DATASET_SCHEMA),
            dataset_header(),
            fields.join(",")
        );
        std::fs::write(&path, bad_window).unwrap();
        assert!(matches!(read_dataset::<f64>(&path), Err(VfError::Input(_))));
    }

    /// A zero-weight regressor predicts its stored target mean for every
    /// sequence, and the planner records that estimate on its nodes.
    #[test]
    fn estimator_feeds_the_planner() {
        let mut model = MlpModel::<f64>::new(&[VF_INPUT_DIM, 8, 1], 0.0, 3).unwrap();
        for w in &mut model.weights {
            w.fill(0.0);
        }
        model.target_mean[0] = 3.0;
        let vf = ValueFunction::new(model).unwrap();
        let input = standing_input();
        assert_relative_eq!(vf.estimate(&input, &[[true; NUM_LEGS]; 2]), 3.0);
        // Longer-than-window sequences are scored by their first S_MAX steps.
        assert_relative_eq!(vf.estimate(&input, &[[true; NUM_LEGS]; 20]), 3.0);

        let cfg = PlannerConfig {
            horizon: 0.16,
            rollouts_per_node: 1,
            vf_enabled: true,
            alpha: 0.5,
            budget: Budget::Iterations(3),
            ..Default::default()
        };
        let outcome = plan(&input, &cfg, Some(&vf), 11).unwrap();
        let scored: Vec<&Node<f64>> = outcome
            .tree
            .nodes
            .iter()
            .filter(|n| n.p_vf.is_some())
            .collect();
        assert!(!scored.is_empty());
        for node in scored {
            assert_relative_eq!(node.p_vf.unwrap(), 3.0);
        }

        let wrong = MlpModel::<f64>::new(&[10, 4, 1], 0.0, 3).unwrap();
        assert!(matches!(ValueFunction::new(wrong), Err(VfError::Input(_))));
    }

    /// With equal logits everywhere the tie-break picks the lowest feasible
    /// action index.
    #[test]
    fn uniform_logits_pick_lowest_feasible_index() {
        let mut model = MlpModel::<f64>::new(&[VF_INPUT_DIM, 8, AP_CLASSES], 0.0, 3).unwrap();
        for w in &mut model.weights {
            w.fill(0.0);
        }
        let input = standing_input();
        let cfg = FeasibilityConfig::default();
        let action = action_policy_next(&model, &input, &[], 0.08, &cfg).unwrap();
        assert_eq!(action_index(&action), 0);

        // All legs mid-swing: the only feasible action keeps them swinging.
        let mut locked = input.clone();
        locked.contacts = ContactState {
            contact: [false; NUM_LEGS],
            t_swing: [0.08; NUM_LEGS],
            t_stance: [DEFAULT_T_STANCE_MIN; NUM_LEGS],
        };
        let action = action_policy_next(&model, &locked, &[], 0.08, &cfg).unwrap();
        assert_eq!(action, [false; NUM_LEGS]);
    }

    /// An infeasible action never wins, no matter how large its logit.
    #[test]
    fn masking_overrides_the_largest_logit() {
        let mut model = MlpModel::<f64>::new(&[VF_INPUT_DIM, 8, AP_CLASSES], 0.0, 3).unwrap();
        for w in &mut model.weights {
            w.fill(0.0);
        }
        // Legs 0 and 1 are freshly lifted, so any action touching them down
        // is infeasible; push all-stance (index 15) as the favorite.
        model.biases[1][15] = 100.0;
        model.biases[1][0b1100] = 3.0;
        let mut input = standing_input();
        input.contacts = ContactState {
            contact: [false, false, true, true],
            t_swing: [0.08, 0.08, 0.0, 0.0],
            t_stance: [
                DEFAULT_T_STANCE_MIN,
                DEFAULT_T_STANCE_MIN,
                DEFAULT_T_STANCE_MIN,
                DEFAULT_T_STANCE_MIN,
            ],
        };
        let cfg = FeasibilityConfig::default();
        let feasible = feasible_actions(&input.contacts, &cfg);
        assert!(!feasible.iter().any(|a| a[0] || a[1]));
        let action = action_policy_next(&model, &input, &[], 0.08, &cfg).unwrap();
        assert_eq!(action, [false, false, true, true]);
        assert_eq!(action_index(&action), 0b1100);
    }

    /// Rolling a zero-weight head builds a legal schedule.
    #[test]
    fn head_rollout_is_legal() {
        let mut model = MlpModel::<f64>::new(&[VF_INPUT_DIM, 8, AP_CLASSES], 0.0, 3).unwrap();
        for w in &mut model.weights {
            w.fill(0.0);
        }
        let input = standing_input();
        let cfg = FeasibilityConfig::default();
        let steps = action_policy_sequence(&model, &input, 8, 0.08, &cfg).unwrap();
        assert_eq!(steps.len(), 8);
        let schedule = GaitSequence::new(0.08, steps).unwrap();
        verify_sequence(&input.contacts, &schedule, &cfg).unwrap();
        assert!(action_policy_sequence(&model, &input, 13, 0.08, &cfg).is_err());
    }

    /// Step `j` of an endless trot: pairs alternate every `block` steps.
    fn trot_step(j: usize, block: usize) -> LegSet {
        if (j / block) % 2 == 0 {
            [false, true, true, false]
        } else {
            [true, false, false, true]
        }
    }

    /// A head trained on a deterministic trot generator reproduces its
    /// next-step choices on at least 95% of held-out prefixes.
    ///
    /// The corpus snapshots one endless trot at every phase offset (the
    /// offset is visible in the root contact timers) and several speeds,
    /// so the prefix-to-next-step mapping is a function of the features.
    #[test]
    fn head_imitates_a_fixed_trot() {
        let dt = 0.08;
        let block = (DEFAULT_T_SWING_MIN / dt).ceil() as usize;
        let base = standing_input();
        let cfg = FeasibilityConfig::default();
        let mut inputs = Vec::new();
        let mut sequences: Vec<Vec<LegSet>> = Vec::new();
        for k in 0..2 * block {
            for v in [0.0, 0.15, 0.3, 0.45] {
                let mut input = base.clone();
                input.state.v = Vector3::new(v, 0.0, 0.0);
                let mut contacts = ContactState::initial_stand(&cfg);
                for j in 0..k {
                    contacts = transition(&contacts, &trot_step(j, block), dt);
                }
                input.contacts = contacts;
                let seq: Vec<LegSet> = (k..k + S_MAX).map(|j| trot_step(j, block)).collect();
                let schedule = GaitSequence::new(dt, seq.clone()).unwrap();
                verify_sequence(&input.contacts, &schedule, &cfg).unwrap();
                inputs.push(input);
                sequences.push(seq);
            }
        }

        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut labels = Vec::new();
        for (input, seq) in inputs.iter().zip(&sequences) {
            let (xi, li) = action_policy_dataset(input, std::slice::from_ref(seq)).unwrap();
            for i in 0..xi.nrows() {
                rows.push(DVector::from_fn(VF_INPUT_DIM, |j, _| xi[(i, j)]));
            }
            labels.extend(li);
        }
        let x = DMatrix::from_fn(rows.len(), VF_INPUT_DIM, |i, j| rows[i][j]);
        assert_eq!(x.nrows(), inputs.len() * S_MAX);

        let train_cfg = TrainConfig {
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 32,
            lr: 3e-3,
            decay_every: 40,
            dropout: 0.0,
            freeze_stats_after: Some(120),
            seed: 4,
            ..Default::default()
        };
        let report = train_classifier(&x, &labels, AP_CLASSES, &train_cfg).unwrap();

        // Rebuild the trainer's held-out split and measure masked accuracy.
        use crate::seed::{label, rng_from, split_seed};
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(&mut rng_from(split_seed(4, label::SHUFFLE, 0)));
        let held_out = &order[..(x.nrows() as f64 * 0.1).round() as usize];
        let mut correct = 0;
        for &row in held_out {
            let input = &inputs[row / S_MAX];
            let prefix_len = row % S_MAX;
            let seq = &sequences[row / S_MAX];
            let action =
                action_policy_next(&report.model, input, &seq[..prefix_len], dt, &cfg).unwrap();
            if action_index(&action) == labels[row] {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / held_out.len() as f64;
        assert!(
            accuracy >= 0.95,
            "held-out imitation accuracy {accuracy} ({correct}/{})",
            held_out.len()
        );
    }
}
