//! Monte-Carlo tree search over contact sequences.
//!
//! The tree's nodes are contact states reached by a sequence of per-leg
//! stance/swing choices, one choice every `dt_node` seconds up to a fixed
//! horizon. Each search iteration runs four phases:
//!
//! 1. *Selection*: descend from the root, at each level taking the child
//!    minimizing `LCB(n) = mean(n) - c * scale * sqrt(ln(V_parent + 1) /
//!    (V_n + 1e-9))`, where `scale` is the running mean of all costs seen at
//!    the root. Stops at the first unexpanded or terminal node.
//! 2. *Expansion*: every feasible child of the selected node is created.
//! 3. *Simulation*: each new child is scored once. `M` random legal
//!    completions of its contact sequence are rolled out through the
//!    tracking QP, each adding a swing-duration term
//!    `sum_l lambda * (T_ref - T_l)` over the completed swing phases of the
//!    full sequence; their mean can be blended with a learned value estimate
//!    as `P = alpha * P_rollout + (1 - alpha) * P_value`.
//! 4. *Backpropagation*: the child's score updates visit counts and cost
//!    sums on the path to the root.
//!
//! Planning stops when selection reaches a terminal node (convergence) or
//! the budget runs out; the returned schedule descends minimum-mean
//! children and, if truncated, is completed by a deterministic trot filler.
//! Rollout seeds are assigned per `(plan seed, node id, rollout index)`
//! before dispatch, so results are identical at any parallelism level.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::contact::{
    feasible_actions, sample_completion, to_mpc_schedule, transition, verify_sequence,
    ContactError, ContactState, FeasibilityConfig, GaitSequence, LegSet,
};
use crate::dynamics::{FootState, SrbState, NUM_LEGS};
use crate::fmt::{format_g, schema_line, SIG_DATA};
use crate::ocp::{rollout_cost, stand_penalty, RolloutContext};
use crate::scalar::{real, Real};
use crate::seed::{rng_from, split_seed};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("planner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Contact(#[from] ContactError),
}

/// Search budget: wall-clock for deployment, iteration count for
/// reproducible experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    WallClockMs(f64),
    Iterations(usize),
}

/// How swing durations away from the reference are charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwingPenaltyMode {
    /// `lambda * (T_ref - T)`: literal form; long swings are rewarded.
    Signed,
    /// `lambda * |T_ref - T|`: deviation form.
    Absolute,
}

/// Planner knobs.
#[derive(Debug, Clone)]
pub struct PlannerConfig<T: Real> {
    /// Duration of one tree edge.
    pub dt_node: T,
    /// Planning horizon; must be an integer number of node steps.
    pub horizon: T,
    /// Rollouts per simulated node (`M`).
    pub rollouts_per_node: usize,
    /// Swing-duration penalty weight (`lambda`).
    pub lambda: T,
    /// Reference swing duration the penalty pulls towards.
    pub t_swing_ref: T,
    /// Exploration constant of the selection bound.
    pub exploration_c: T,
    /// Blend weight on rollout cost versus value estimate.
    pub alpha: T,
    pub budget: Budget,
    /// Whether a value estimate is mixed into node scores.
    pub vf_enabled: bool,
    pub swing_penalty_mode: SwingPenaltyMode,
    /// Cap on QP rollouts per plan; once exhausted, remaining nodes are
    /// scored by the value estimate alone. Requires `vf_enabled`.
    pub rollout_quota: Option<u64>,
    pub feasibility: FeasibilityConfig<T>,
}

impl<T: Real> Default for PlannerConfig<T> {
    fn default() -> Self {
        Self {
            dt_node: real(0.08),
            horizon: real(0.64),
            rollouts_per_node: 120,
            lambda: real(5.0),
            t_swing_ref: real(0.3),
            exploration_c: real(2.0),
            alpha: real(0.75),
            budget: Budget::WallClockMs(80.0),
            vf_enabled: false,
            swing_penalty_mode: SwingPenaltyMode::Signed,
            rollout_quota: None,
            feasibility: FeasibilityConfig::default(),
        }
    }
}

impl<T: Real> PlannerConfig<T> {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(PlanError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.rollouts_per_node == 0 {
            return Err(PlanError::Config("rollouts_per_node must be >= 1".into()));
        }
        if self.rollout_quota.is_some() && !self.vf_enabled {
            return Err(PlanError::Config(
                "rollout_quota needs vf_enabled: exhausted nodes are scored by the value estimate"
                    .into(),
            ));
        }
        self.feasibility
            .validate()
            .map_err(|e| PlanError::Config(e.to_string()))?;
        self.horizon_steps().map(|_| ())
    }

    /// Horizon length in node steps.
    pub fn horizon_steps(&self) -> Result<usize, PlanError> {
        if !(self.dt_node > T::zero()) || !(self.horizon > T::zero()) {
            return Err(PlanError::Config(format!(
                "dt_node and horizon must be positive, got {} and {}",
                self.dt_node, self.horizon
            )));
        }
        let ratio = (self.horizon / self.dt_node).to_f64();
        let k = ratio.round();
        if (ratio - k).abs() > 1e-9 * k.max(1.0) || k < 1.0 {
            return Err(PlanError::Config(format!(
                "horizon must be an integer number of node steps, got ratio {ratio}"
            )));
        }
        Ok(k as usize)
    }
}

/// Everything a plan call reads about the world.
#[derive(Debug, Clone)]
pub struct PlanInput<T: Real> {
    pub state: SrbState<T>,
    pub feet: FootState<T>,
    /// Contact phases and their elapsed durations at plan time.
    pub contacts: ContactState<T>,
    pub context: RolloutContext<T>,
}

/// Learned estimate of a partial contact sequence's cost, used to blend with
/// or replace rollouts.
pub trait SequenceEstimator<T: Real>: Sync {
    fn estimate(&self, input: &PlanInput<T>, sequence: &[LegSet]) -> T;
}

impl<T: Real, F> SequenceEstimator<T> for F
where
    F: Fn(&PlanInput<T>, &[LegSet]) -> T + Sync,
{
    fn estimate(&self, input: &PlanInput<T>, sequence: &[LegSet]) -> T {
        self(input, sequence)
    }
}

pub type NodeId = usize;

/// One tree node; scores are set exactly once when the node is simulated.
#[derive(Debug, Clone)]
pub struct Node<T: Real> {
    pub parent: Option<NodeId>,
    /// Contact flags chosen on the edge from the parent.
    pub action: Option<LegSet>,
    pub depth: usize,
    pub contacts: ContactState<T>,
    pub terminal: bool,
    pub visits: u64,
    pub cost_sum: T,
    /// Mean rollout cost, when rollouts ran.
    pub p_bar: Option<T>,
    /// At least one rollout behind `p_bar` hit the infeasibility penalty.
    pub penalized: bool,
    /// Value estimate, when enabled.
    pub p_vf: Option<T>,
    /// Blended score backpropagated at simulation time.
    pub p_combined: Option<T>,
    pub children: Vec<NodeId>,
}

impl<T: Real> Node<T> {
    pub fn mean_cost(&self) -> Option<T> {
        (self.visits > 0).then(|| self.cost_sum / real(self.visits as f64))
    }
}

/// Arena-allocated search tree; the root is node 0.
#[derive(Debug, Clone)]
pub struct Tree<T: Real> {
    pub nodes: Vec<Node<T>>,
}

pub const TREE_SCHEMA: &str = "mcts-tree";

impl<T: Real> Tree<T> {
    /// Actions along the path from the root to `id`, in execution order.
    pub fn path_steps(&self, id: NodeId) -> Vec<LegSet> {
        let mut steps = Vec::with_capacity(self.nodes[id].depth);
        let mut cur = id;
        while let Some(parent) = self.nodes[cur].parent {
            steps.push(self.nodes[cur].action.expect("non-root node has an action"));
            cur = parent;
        }
        steps.reverse();
        steps
    }

    /// CSV dump: one row per node with scores and contact timers.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&schema_line(TREE_SCHEMA));
        out.push('\n');
        out.push_str(
            "id,parent,depth,act_LF,act_RF,act_LH,act_RH,visits,p_bar,p_vf,p_combined,\
             penalized,t_swing_LF,t_swing_RF,t_swing_LH,t_swing_RH,\
             t_stance_LF,t_stance_RF,t_stance_LH,t_stance_RH\n",
        );
        let num = |v: Option<T>| v.map(|x| format_g(x.to_f64(), SIG_DATA)).unwrap_or_default();
        for (id, node) in self.nodes.iter().enumerate() {
            let parent = node.parent.map(|p| p.to_string()).unwrap_or_default();
            let action = node
                .action
                .map(|a| {
                    a.iter()
                        .map(|&f| if f { "1" } else { "0" }.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_else(|| ",,,".into());
            let timers: Vec<String> = node
                .contacts
                .t_swing
                .iter()
                .chain(node.contacts.t_stance.iter())
                .map(|&t| format_g(t.to_f64(), SIG_DATA))
                .collect();
            out.push_str(&format!(
                "{id},{parent},{depth},{action},{visits},{p_bar},{p_vf},{p_combined},\
                 {penalized},{timers}\n",
                depth = node.depth,
                visits = node.visits,
                p_bar = num(node.p_bar),
                p_vf = num(node.p_vf),
                p_combined = num(node.p_combined),
                penalized = if node.penalized { 1 } else { 0 },
                timers = timers.join(","),
            ));
        }
        out
    }
}

/// Search statistics; `wall_ms` is the only field that may differ between
/// identical seeded runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStats {
    pub iterations: usize,
    pub nodes: usize,
    /// Number of QP rollouts evaluated.
    pub rollouts: u64,
    pub wall_ms: f64,
    /// Fraction of scored nodes whose score came from rollouts.
    pub rollout_scored_fraction: f64,
    /// The returned sequence needed the deterministic filler.
    pub truncated: bool,
    /// A terminal node was selected before the budget ran out.
    pub converged: bool,
}

/// A finished plan: the full-horizon schedule, the statistics, and the tree
/// (for logging and training-data extraction).
#[derive(Debug, Clone)]
pub struct PlanOutcome<T: Real> {
    pub sequence: GaitSequence<T>,
    pub stats: PlanStats,
    pub tree: Tree<T>,
}

/// Blends the two node scores; with both present, `alpha = 1` returns the
/// rollout cost and `alpha = 0` the value estimate exactly.
pub fn combine_costs<T: Real>(alpha: T, p_bar: Option<T>, p_vf: Option<T>) -> T {
    match (p_bar, p_vf) {
        (Some(b), None) => b,
        (None, Some(v)) => v,
        (Some(b), Some(v)) => {
            if alpha == T::one() {
                b
            } else if alpha == T::zero() {
                v
            } else {
                alpha * b + (T::one() - alpha) * v
            }
        }
        (None, None) => panic!("combine_costs needs at least one score"),
    }
}

/// Adds `cost` and one visit to `id` and every ancestor up to the root.
pub fn backpropagate<T: Real>(tree: &mut Tree<T>, id: NodeId, cost: T) {
    let mut cur = Some(id);
    while let Some(i) = cur {
        let node = &mut tree.nodes[i];
        node.visits += 1;
        node.cost_sum += cost;
        cur = node.parent;
    }
}

/// Swing-duration penalty over the completed swing phases of `steps`,
/// replayed from `root` (whose timers carry pre-plan history). Swings still
/// in flight at the end of the sequence are not charged.
pub fn swing_penalty_term<T: Real>(
    root: &ContactState<T>,
    steps: &[LegSet],
    dt: T,
    lambda: T,
    t_swing_ref: T,
    mode: SwingPenaltyMode,
) -> T {
    let mut state = *root;
    let mut total = T::zero();
    for action in steps {
        let next = transition(&state, action, dt);
        for leg in 0..NUM_LEGS {
            if !state.contact[leg] && action[leg] {
                let deviation = t_swing_ref - next.t_swing[leg];
                total += lambda
                    * match mode {
                        SwingPenaltyMode::Signed => deviation,
                        SwingPenaltyMode::Absolute => deviation.abs(),
                    };
            }
        }
        state = next;
    }
    total
}

/// Deterministic legal continuation: hold the current contact set until
/// every leg has served its minimum phase time, then alternate the two
/// diagonal trot pairs in blocks long enough to stay legal.
pub fn reference_filler<T: Real>(
    from: &ContactState<T>,
    steps: usize,
    cfg: &FeasibilityConfig<T>,
    dt: T,
) -> Vec<LegSet> {
    let mut out = Vec::with_capacity(steps);
    let mut state = *from;
    while out.len() < steps && !(0..NUM_LEGS).all(|leg| state.leg_free(leg, cfg)) {
        let action = state.contact;
        state = transition(&state, &action, dt);
        out.push(action);
    }

    let steps_for = |min: T| ((min / dt).to_f64() - 1e-9).ceil().max(1.0) as usize;
    let block = steps_for(cfg.t_swing_min).max(steps_for(cfg.t_stance_min));
    const PAIR_A: LegSet = [false, true, true, false];
    const PAIR_B: LegSet = [true, false, false, true];
    let mut pattern = PAIR_A;
    let mut in_block = 0usize;
    while out.len() < steps {
        state = transition(&state, &pattern, dt);
        out.push(pattern);
        in_block += 1;
        if in_block == block {
            pattern = if pattern == PAIR_A { PAIR_B } else { PAIR_A };
            in_block = 0;
        }
    }
    out
}

/// LCB descent: stops at the first node with no children (unexpanded or
/// terminal). Ties go to the earliest (lowest-action-index) child.
fn select<T: Real>(tree: &Tree<T>, exploration_c: T) -> NodeId {
    let root = &tree.nodes[0];
    let cost_scale = root
        .mean_cost()
        .unwrap_or_else(T::one);
    let eps = real::<T>(1e-9);
    let mut id = 0;
    loop {
        let node = &tree.nodes[id];
        if node.children.is_empty() {
            return id;
        }
        let ln_parent = (real::<T>(node.visits as f64) + T::one()).ln();
        let mut best = node.children[0];
        let mut best_lcb: Option<T> = None;
        for &child_id in &node.children {
            let child = &tree.nodes[child_id];
            let mean = child.mean_cost().unwrap_or_else(T::zero);
            let bonus =
                exploration_c * cost_scale * (ln_parent / (real::<T>(child.visits as f64) + eps)).sqrt();
            let lcb = mean - bonus;
            if best_lcb.map(|b| lcb < b).unwrap_or(true) {
                best_lcb = Some(lcb);
                best = child_id;
            }
        }
        id = best;
    }
}

/// Runs the search and returns a full-horizon legal schedule: the cheapest
/// sequence any rollout fully evaluated, or, when no rollouts ran, the
/// tree's minimum-mean path completed by the reference filler.
pub fn plan<T: Real>(
    input: &PlanInput<T>,
    config: &PlannerConfig<T>,
    vf: Option<&dyn SequenceEstimator<T>>,
    plan_seed: u64,
) -> Result<PlanOutcome<T>, PlanError> {
    let started = Instant::now();
    config.validate()?;
    if config.vf_enabled && vf.is_none() {
        return Err(PlanError::Config(
            "vf_enabled requires a sequence estimator".into(),
        ));
    }
    let horizon_steps = config.horizon_steps()?;
    let h_mpc = input.context.weights.h;
    // Validate the node-step / MPC-step ratio once, up front.
    to_mpc_schedule(
        &GaitSequence::new(config.dt_node, vec![[true; NUM_LEGS]])?,
        h_mpc,
    )?;
    let mpc_per_node = (config.dt_node / h_mpc).to_f64().round() as usize;
    let penalty = stand_penalty(
        &input.context,
        &input.state,
        &input.feet,
        horizon_steps * mpc_per_node,
    );

    let mut tree = Tree {
        nodes: vec![Node {
            parent: None,
            action: None,
            depth: 0,
            contacts: input.contacts,
            terminal: horizon_steps == 0,
            visits: 0,
            cost_sum: T::zero(),
            p_bar: None,
            penalized: false,
            p_vf: None,
            p_combined: None,
            children: Vec::new(),
        }],
    };

    let mut quota_left = config.rollout_quota;
    let mut iterations = 0usize;
    let mut rollouts = 0u64;
    let mut rollout_scored = 0usize;
    let mut converged = false;
    // Cheapest fully evaluated sequence seen by any rollout (ties keep the
    // earliest), the plan returned when rollouts happened at all.
    let mut best_eval: Option<(T, Vec<LegSet>)> = None;

    loop {
        match config.budget {
            Budget::Iterations(n) if iterations >= n => break,
            Budget::WallClockMs(ms) if started.elapsed().as_secs_f64() * 1e3 >= ms => break,
            _ => {}
        }

        let selected = select(&tree, config.exploration_c);
        if tree.nodes[selected].terminal {
            converged = true;
            break;
        }

        // Expansion: all feasible children, in action-index order.
        let actions = feasible_actions(&tree.nodes[selected].contacts, &config.feasibility);
        let parent_depth = tree.nodes[selected].depth;
        let parent_contacts = tree.nodes[selected].contacts;
        let mut new_children = Vec::with_capacity(actions.len());
        for action in actions {
            let contacts = transition(&parent_contacts, &action, config.dt_node);
            let id = tree.nodes.len();
            tree.nodes.push(Node {
                parent: Some(selected),
                action: Some(action),
                depth: parent_depth + 1,
                contacts,
                terminal: parent_depth + 1 == horizon_steps,
                visits: 0,
                cost_sum: T::zero(),
                p_bar: None,
                penalized: false,
                p_vf: None,
                p_combined: None,
                children: Vec::new(),
            });
            tree.nodes[selected].children.push(id);
            new_children.push(id);
        }

        // Simulation and backpropagation, one child at a time.
        for child_id in new_children {
            let path = tree.path_steps(child_id);
            let child_contacts = tree.nodes[child_id].contacts;
            let remaining = horizon_steps - tree.nodes[child_id].depth;

            let wanted = if remaining == 0 {
                1
            } else {
                config.rollouts_per_node as u64
            };
            let do_rollouts = match quota_left.as_mut() {
                Some(q) if *q < wanted => false,
                Some(q) => {
                    *q -= wanted;
                    true
                }
                None => true,
            };

            let (p_bar, penalized) = if do_rollouts {
                rollouts += wanted;
                rollout_scored += 1;
                let prefix = GaitSequence::new(config.dt_node, path.clone())?;
                if remaining == 0 {
                    let (cost, hit) = score_sequence(input, config, &prefix, penalty);
                    if best_eval.as_ref().map(|(b, _)| cost < *b).unwrap_or(true) {
                        best_eval = Some((cost, path.clone()));
                    }
                    (Some(cost), hit)
                } else {
                    let seeds: Vec<u64> = (0..config.rollouts_per_node)
                        .map(|m| split_seed(plan_seed, child_id as u64, m as u64))
                        .collect();
                    let costs: Vec<(T, bool, Vec<LegSet>)> = seeds
                        .par_iter()
                        .map(|&seed| {
                            let mut rng = rng_from(seed);
                            let full = sample_completion(
                                &prefix,
                                &child_contacts,
                                horizon_steps,
                                &config.feasibility,
                                &mut rng,
                            )
                            .expect("prefix is shorter than the horizon");
                            let (cost, hit) = score_sequence(input, config, &full, penalty);
                            (cost, hit, full.steps)
                        })
                        .collect();
                    for (cost, _, steps) in &costs {
                        if best_eval.as_ref().map(|(b, _)| *cost < *b).unwrap_or(true) {
                            best_eval = Some((*cost, steps.clone()));
                        }
                    }
                    let sum = costs.iter().fold(T::zero(), |acc, (c, _, _)| acc + *c);
                    let hit = costs.iter().any(|&(_, h, _)| h);
                    (Some(sum / real(config.rollouts_per_node as f64)), hit)
                }
            } else {
                (None, false)
            };

            let p_vf = if config.vf_enabled {
                Some(vf.expect("checked above").estimate(input, &path))
            } else {
                None
            };
            let p_combined = combine_costs(config.alpha, p_bar, p_vf);

            let node = &mut tree.nodes[child_id];
            node.p_bar = p_bar;
            node.penalized = penalized;
            node.p_vf = p_vf;
            node.p_combined = Some(p_combined);
            backpropagate(&mut tree, child_id, p_combined);
        }
        iterations += 1;
    }

    // Result extraction: the cheapest fully evaluated sequence when any
    // rollout ran; otherwise descend minimum mean cost and fill the tail
    // (the value-only and zero-budget paths).
    let (steps, truncated) = match best_eval {
        Some((_, steps)) => (steps, false),
        None => {
            let mut id = 0;
            let mut steps = Vec::with_capacity(horizon_steps);
            while !tree.nodes[id].children.is_empty() {
                let mut best = tree.nodes[id].children[0];
                let mut best_mean: Option<T> = None;
                for &child_id in &tree.nodes[id].children {
                    let mean = tree.nodes[child_id]
                        .mean_cost()
                        .expect("simulated children have visits");
                    if best_mean.map(|b| mean < b).unwrap_or(true) {
                        best_mean = Some(mean);
                        best = child_id;
                    }
                }
                steps.push(tree.nodes[best].action.expect("child has an action"));
                id = best;
            }
            let truncated = steps.len() < horizon_steps;
            if truncated {
                let tail = reference_filler(
                    &tree.nodes[id].contacts,
                    horizon_steps - steps.len(),
                    &config.feasibility,
                    config.dt_node,
                );
                steps.extend(tail);
            }
            (steps, truncated)
        }
    };
    let sequence = GaitSequence::new(config.dt_node, steps)?;
    verify_sequence(&input.contacts, &sequence, &config.feasibility)?;

    let scored = tree.nodes.len().saturating_sub(1);
    let stats = PlanStats {
        iterations,
        nodes: tree.nodes.len(),
        rollouts,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        rollout_scored_fraction: if scored > 0 {
            rollout_scored as f64 / scored as f64
        } else {
            0.0
        },
        truncated,
        converged,
    };

    Ok(PlanOutcome {
        sequence,
        stats,
        tree,
    })
}

/// Cost of one full-horizon sequence: tracking QP plus swing-duration term.
/// The flag reports whether the QP fell back to the infeasibility penalty.
fn score_sequence<T: Real>(
    input: &PlanInput<T>,
    config: &PlannerConfig<T>,
    sequence: &GaitSequence<T>,
    penalty: T,
) -> (T, bool) {
    let mpc = to_mpc_schedule(sequence, input.context.weights.h)
        .expect("node/MPC step ratio was validated");
    let (qp_cost, penalized) =
        rollout_cost(&input.context, &input.state, &input.feet, &mpc, penalty);
    let total = qp_cost
        + swing_penalty_term(
            &input.contacts,
            &sequence.steps,
            config.dt_node,
            config.lambda,
            config.t_swing_ref,
            config.swing_penalty_mode,
        );
    (total, penalized)
}
