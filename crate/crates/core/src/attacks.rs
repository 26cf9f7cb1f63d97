//! Gradient-based adversarial patch generation: momentum sign-ascent on
//! static views, expectation-over-transformation across camera states, and
//! four adaptive objectives that target the recurrent defender itself —
//! its random-action superset, its belief, its policy head, and the fully
//! unrolled perception/policy pipeline.
//!
//! Every attack optimizes the texels of a small patch pinned to the scene's
//! anchor region. Texels live in [0,1]; each optimizer step is the momentum
//! iterative method (MIM): accumulate ℓ₁-normalized gradients into a
//! momentum buffer, move every texel by a fixed step in the sign direction,
//! clamp. Defender parameters are bound as frozen constants, so attacks can
//! never write to them; only the patch is a differentiable leaf.

use crate::data::Dataset;
use crate::env::{self, CameraState, Scene, StateBounds};
use crate::io::{self, KvMap};
use crate::models::{
    act, initial_belief, perceive_batch_fused, BoundPerception, Defender, FusionKind, ModelDims,
};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Which objective the optimizer ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    /// Fixed frontal view, single observation.
    Mim,
    /// Expectation over camera states, single observation each.
    Eot,
    /// Expectation over random-action trajectories (uniform superset of any
    /// policy), loss at the final step.
    UspAdaptive,
    /// Maximize deviation of the final belief from its benign value under
    /// random-action trajectories.
    PerceptionAdaptive,
    /// Stationary-view unroll; maximize task loss while driving the policy
    /// head's actions to zero through a Lagrange penalty.
    PolicyAdaptive,
    /// Backpropagate the final-step loss through the true closed loop,
    /// including policy-induced camera motion.
    PipelineAdaptive,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Mim => "mim",
            AttackKind::Eot => "eot",
            AttackKind::UspAdaptive => "usp_adaptive",
            AttackKind::PerceptionAdaptive => "perception_adaptive",
            AttackKind::PolicyAdaptive => "policy_adaptive",
            AttackKind::PipelineAdaptive => "pipeline_adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<AttackKind> {
        match s {
            "mim" => Ok(AttackKind::Mim),
            "eot" => Ok(AttackKind::Eot),
            "usp_adaptive" => Ok(AttackKind::UspAdaptive),
            "perception_adaptive" => Ok(AttackKind::PerceptionAdaptive),
            "policy_adaptive" => Ok(AttackKind::PolicyAdaptive),
            "pipeline_adaptive" => Ok(AttackKind::PipelineAdaptive),
            other => Err(Error::config(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// What counts as adversarial success.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    /// Final prediction differs from the true label.
    Dodging,
    /// Final prediction equals the designated target label.
    Impersonation,
}

impl Goal {
    pub fn as_str(self) -> &'static str {
        match self {
            Goal::Dodging => "dodging",
            Goal::Impersonation => "impersonation",
        }
    }

    pub fn parse(s: &str) -> Result<Goal> {
        match s {
            "dodging" => Ok(Goal::Dodging),
            "impersonation" => Ok(Goal::Impersonation),
            other => Err(Error::config(format!("unknown attack goal {other:?}"))),
        }
    }
}

/// Impersonation target for a scene: the next identity, cyclically. Fixed
/// convention so runs are comparable without a target table.
pub fn impersonation_target(label: usize, classes: usize) -> usize {
    (label + 1) % classes
}

/// Attack protocol: optimizer budget, sampling distributions, and goal.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub goal: Goal,
    /// Optimizer iterations N.
    pub iterations: usize,
    /// Per-iteration ℓ∞ step α.
    pub step: f64,
    /// Momentum decay μ.
    pub momentum: f64,
    /// Samples per iteration M (states or action sequences).
    pub eot_samples: usize,
    /// Trajectory length τ for the adaptive attacks.
    pub horizon: usize,
    /// Lagrange weight c of the action penalty in the policy attack.
    pub lagrange_c: f64,
    pub rng_seed: u64,
    /// Feasible camera-state box the attacker samples from.
    pub bounds: StateBounds,
    /// Half-width of the uniform action box for surrogate-policy sampling.
    pub a_max: f64,
    /// Patch texel grid.
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// Optional ℓ∞ ball around the initial patch. `None` leaves the full
    /// [0,1] texel domain.
    pub epsilon: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Eot,
            goal: Goal::Dodging,
            iterations: 150,
            step: 1.5 / 255.0,
            momentum: 1.0,
            eot_samples: 10,
            horizon: 4,
            lagrange_c: 100.0,
            rng_seed: 0,
            bounds: StateBounds::default(),
            a_max: 0.175,
            patch_rows: 10,
            patch_cols: 10,
            epsilon: None,
        }
    }
}

const ATTACK_KEYS: &[&str] = &[
    "kind",
    "goal",
    "iterations",
    "step",
    "momentum",
    "eot_samples",
    "horizon",
    "lagrange_c",
    "rng_seed",
    "yaw_abs_max",
    "pitch_abs_max",
    "a_max",
    "patch_rows",
    "patch_cols",
    "epsilon",
];

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step <= 0.0 || !self.step.is_finite() {
            return Err(Error::config("attack step must be positive"));
        }
        if self.momentum < 0.0 || !self.momentum.is_finite() {
            return Err(Error::config("momentum must be nonnegative"));
        }
        if self.eot_samples == 0 {
            return Err(Error::config("eot_samples must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.kind == AttackKind::PipelineAdaptive && self.horizon > 8 {
            return Err(Error::config("pipeline attack horizon capped at 8 steps"));
        }
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return Err(Error::config("patch grid must be nonempty"));
        }
        if let Some(e) = self.epsilon {
            if e <= 0.0 || !e.is_finite() {
                return Err(Error::config("epsilon must be positive when set"));
            }
        }
        Ok(())
    }

    /// Parse from key=value text; absent keys keep defaults, unknown keys
    /// are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<AttackConfig> {
        kv.reject_unknown(ATTACK_KEYS)?;
        let mut cfg = AttackConfig::default();
        if let Some(s) = kv.get("kind") {
            cfg.kind = AttackKind::parse(s)?;
        }
        if let Some(s) = kv.get("goal") {
            cfg.goal = Goal::parse(s)?;
        }
        if let Some(v) = kv.parse_field::<usize>("iterations")? {
            cfg.iterations = v;
        }
        if let Some(v) = kv.parse_field::<f64>("step")? {
            cfg.step = v;
        }
        if let Some(v) = kv.parse_field::<f64>("momentum")? {
            cfg.momentum = v;
        }
        if let Some(v) = kv.parse_field::<usize>("eot_samples")? {
            cfg.eot_samples = v;
        }
        if let Some(v) = kv.parse_field::<usize>("horizon")? {
            cfg.horizon = v;
        }
        if let Some(v) = kv.parse_field::<f64>("lagrange_c")? {
            cfg.lagrange_c = v;
        }
        if let Some(v) = kv.parse_field::<u64>("rng_seed")? {
            cfg.rng_seed = v;
        }
        if let Some(v) = kv.parse_field::<f64>("yaw_abs_max")? {
            cfg.bounds.yaw_min = -v;
            cfg.bounds.yaw_max = v;
        }
        if let Some(v) = kv.parse_field::<f64>("pitch_abs_max")? {
            cfg.bounds.pitch_min = -v;
            cfg.bounds.pitch_max = v;
        }
        if let Some(v) = kv.parse_field::<f64>("a_max")? {
            cfg.a_max = v;
        }
        if let Some(v) = kv.parse_field::<usize>("patch_rows")? {
            cfg.patch_rows = v;
        }
        if let Some(v) = kv.parse_field::<usize>("patch_cols")? {
            cfg.patch_cols = v;
        }
        if let Some(v) = kv.parse_field::<f64>("epsilon")? {
            cfg.epsilon = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render as key=value text (the run-manifest snapshot).
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("kind", self.kind.as_str());
        kv.set("goal", self.goal.as_str());
        kv.set("iterations", self.iterations);
        kv.set("step", self.step);
        kv.set("momentum", self.momentum);
        kv.set("eot_samples", self.eot_samples);
        kv.set("horizon", self.horizon);
        kv.set("lagrange_c", self.lagrange_c);
        kv.set("rng_seed", self.rng_seed);
        kv.set("yaw_abs_max", self.bounds.yaw_max);
        kv.set("pitch_abs_max", self.bounds.pitch_max);
        kv.set("a_max", self.a_max);
        kv.set("patch_rows", self.patch_rows);
        kv.set("patch_cols", self.patch_cols);
        if let Some(e) = self.epsilon {
            kv.set("epsilon", e);
        }
        kv
    }
}

/// Outcome of one per-scene attack run.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Optimized patch texels `[Hp × Wp × 3]`, all in [0,1].
    pub patch: Tensor,
    /// Objective value at iteration 0, before any step.
    pub first_loss: f64,
    /// Objective value after the full budget (fresh samples, no step).
    pub final_loss: f64,
    /// Task-loss part of the final objective.
    pub loss_term: f64,
    /// Action-penalty part: −Σ‖a_t‖² for the policy attack, 0 elsewhere.
    /// Always satisfies final_loss = loss_term + c·action_norm_term.
    pub action_norm_term: f64,
    pub iterations: usize,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One momentum-iterative step, ascending. The raw gradient is ℓ₁-normalized
/// (an all-zero gradient stays zero), folded into the momentum buffer with
/// decay μ, and the patch moves by α in the sign direction, clamped to [0,1].
pub fn mim_step(
    patch: &Tensor,
    grad: &Tensor,
    momentum_buf: &Tensor,
    step: f64,
    mu: f64,
) -> (Tensor, Tensor) {
    assert_eq!(patch.shape(), grad.shape(), "mim_step: patch/grad shape mismatch");
    assert_eq!(patch.shape(), momentum_buf.shape(), "mim_step: patch/buffer shape mismatch");
    let l1: f64 = grad.data().iter().map(|g| g.abs()).sum();
    let scale = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
    let mut buf = momentum_buf.data().to_vec();
    for (b, g) in buf.iter_mut().zip(grad.data()) {
        *b = mu * *b + g * scale;
    }
    let mut texels = patch.data().to_vec();
    for (p, b) in texels.iter_mut().zip(&buf) {
        *p = (*p + step * sign(*b)).clamp(0.0, 1.0);
    }
    let shape = patch.shape().to_vec();
    (Tensor::constant(shape.clone(), texels), Tensor::constant(shape, buf))
}

/// Per-iteration objective: the scalar to ascend, plus its bookkeeping
/// decomposition (total = loss_term + c·action_norm_term).
struct Objective {
    total: Tensor,
    loss_term: f64,
    action_norm_term: f64,
}

fn plain_objective(total: Tensor) -> Objective {
    let loss_term = total.item();
    Objective { total, loss_term, action_norm_term: 0.0 }
}

/// Shift used to mask one logit out of a logsumexp: exp(z − MASK_SHIFT)
/// underflows to exactly 0.0 for any realistic logit, so the masked entry
/// contributes nothing to the value or the gradient.
const MASK_SHIFT: f64 = 1e4;

/// Goal-appropriate margin objective on final-step logits, as a quantity to
/// ascend. Dodging ascends the smooth margin logsumexp_{j≠y}(z_j) − z_y:
/// unlike raw cross-entropy ascent, which mostly spreads mass over all rival
/// classes without ever flipping the argmax, the margin concentrates the
/// perturbation budget on overtaking the best rival. Impersonation descends
/// the target's margin (ascends its negation). Both are built from
/// `softmax_ce` over logits with the reference class masked out; the
/// constant shift is removed so the recorded objective is the true margin.
fn goal_margin(tape: &mut Tape, logits: &Tensor, scene: &Scene, goal: Goal, classes: usize) -> Tensor {
    let reference = match goal {
        Goal::Dodging => scene.identity_label,
        Goal::Impersonation => impersonation_target(scene.identity_label, classes),
    };
    let rows = logits.shape()[0];
    let mut mask = vec![0.0; logits.len()];
    for row in 0..rows {
        mask[row * classes + reference] = -MASK_SHIFT;
    }
    let masked = {
        let m = Tensor::constant(logits.shape().to_vec(), mask);
        tape.add(logits, &m)
    };
    let ce = tape.softmax_ce(&masked, &vec![reference; rows]);
    let margin = tape.add_scalar(&ce, -MASK_SHIFT);
    match goal {
        Goal::Dodging => margin,
        Goal::Impersonation => tape.neg(&margin),
    }
}

fn sample_state(r: &mut ChaCha8Rng, b: &StateBounds) -> CameraState {
    let yaw = if b.yaw_max > b.yaw_min { r.gen_range(b.yaw_min..=b.yaw_max) } else { b.yaw_min };
    let pitch = if b.pitch_max > b.pitch_min {
        r.gen_range(b.pitch_min..=b.pitch_max)
    } else {
        b.pitch_min
    };
    CameraState::new(yaw, pitch)
}

fn sample_action(r: &mut ChaCha8Rng, a_max: f64) -> env::Action {
    if a_max > 0.0 {
        env::Action::new(r.gen_range(-a_max..=a_max), r.gen_range(-a_max..=a_max))
    } else {
        env::Action::new(0.0, 0.0)
    }
}

fn state_row(s: CameraState) -> Tensor {
    Tensor::constant(vec![1, 2], vec![s.yaw, s.pitch])
}

/// Unroll perception along a forced action sequence (camera states stay off
/// the tape). Returns final-step logits and belief; `actions.len() + 1`
/// observations are taken.
#[allow(clippy::too_many_arguments)]
fn forced_unroll(
    tape: &mut Tape,
    scene: &Scene,
    s1: CameraState,
    actions: &[env::Action],
    patch: Option<&Tensor>,
    p: &BoundPerception,
    fusion: FusionKind,
    dims: &ModelDims,
    bounds: &StateBounds,
) -> (Tensor, Tensor) {
    let (h, w) = (dims.height, dims.width);
    let mut state = s1;
    let mut belief = initial_belief(1, dims);
    let mut last_logits = None;
    for t in 0..=actions.len() {
        let o = env::observe(tape, scene, &state_row(state), patch, h, w);
        let flat = tape.reshape(&o, vec![1, o.len()]);
        let (logits, b) = perceive_batch_fused(tape, &flat, &belief, p, fusion, t);
        belief = b;
        last_logits = Some(logits);
        if t < actions.len() {
            state = env::transition(state, actions[t], bounds);
        }
    }
    (last_logits.expect("at least one step"), belief)
}

/// The optimizer loop shared by all attack kinds: repeatedly build the
/// iteration objective on a fresh tape, backpropagate to the patch leaf,
/// and take a MIM step; finish with one evaluation-only pass.
fn ascend<F>(cfg: &AttackConfig, scene: &Scene, init: Option<&Tensor>, mut build: F) -> Result<AttackResult>
where
    F: FnMut(&mut Tape, &Tensor, &mut ChaCha8Rng) -> Objective,
{
    cfg.validate()?;
    let shape = vec![cfg.patch_rows, cfg.patch_cols, 3];
    let start = match init {
        Some(t) => {
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "initial patch shape {:?} does not match configured {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return Err(Error::config("initial patch texels must lie in [0,1]"));
            }
            t.clone()
        }
        None => Tensor::constant(shape.clone(), vec![0.5; shape.iter().product()]),
    };

    // one stream per (seed, scene) regardless of kind, so degenerate
    // configurations of different kinds draw identical samples and the
    // documented reductions (τ=1, singleton boxes) hold bit-for-bit
    let mut r = rng::stream(cfg.rng_seed, "attack", &[scene.id as u64]);
    let mut patch = start.clone();
    let mut buf = Tensor::zeros(shape.clone());
    let mut first_loss = None;

    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let leaf = tape.param(patch.shape().to_vec(), patch.data().to_vec());
        let obj = build(&mut tape, &leaf, &mut r);
        if first_loss.is_none() {
            first_loss = Some(obj.total.item());
        }
        tape.backward(&obj.total);
        let grad =
            Tensor::constant(shape.clone(), tape.grad_of(&leaf).expect("patch is a leaf").to_vec());
        let (mut next, nbuf) = mim_step(&patch, &grad, &buf, cfg.step, cfg.momentum);
        if let Some(eps) = cfg.epsilon {
            let proj: Vec<f64> = next
                .data()
                .iter()
                .zip(start.data())
                .map(|(&v, &s0)| v.clamp((s0 - eps).max(0.0), (s0 + eps).min(1.0)))
                .collect();
            next = Tensor::constant(shape.clone(), proj);
        }
        patch = next;
        buf = nbuf;
    }

    // evaluation-only pass: the objective actually achieved
    let mut tape = Tape::new();
    let leaf = tape.param(patch.shape().to_vec(), patch.data().to_vec());
    let obj = build(&mut tape, &leaf, &mut r);
    let final_loss = obj.total.item();
    Ok(AttackResult {
        patch,
        first_loss: first_loss.unwrap_or(final_loss),
        final_loss,
        loss_term: obj.loss_term,
        action_norm_term: obj.action_norm_term,
        iterations: cfg.iterations,
    })
}

/// Fixed-view MIM against a single observation from `s1`.
pub fn mim_attack(
    scene: &Scene,
    defender: &Defender,
    s1: CameraState,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    let dims = defender.dims();
    let p = defender.perception.constants();
    let fusion = defender.fusion;
    ascend(cfg, scene, init, |tape, patch, _r| {
        let (logits, _) =
            forced_unroll(tape, scene, s1, &[], Some(patch), &p, fusion, &dims, &cfg.bounds);
        plain_objective(goal_margin(tape, &logits, scene, cfg.goal, dims.classes))
    })
}

/// Expectation over camera states: per iteration, average the single-view
/// objective over M states drawn uniformly from the feasible box.
pub fn eot_attack(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    let dims = defender.dims();
    let p = defender.perception.constants();
    let fusion = defender.fusion;
    ascend(cfg, scene, init, |tape, patch, r| {
        let mut acc: Option<Tensor> = None;
        for _ in 0..cfg.eot_samples {
            let s = sample_state(r, &cfg.bounds);
            let (logits, _) =
                forced_unroll(tape, scene, s, &[], Some(patch), &p, fusion, &dims, &cfg.bounds);
            let ce = goal_margin(tape, &logits, scene, cfg.goal, dims.classes);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &ce),
                None => ce,
            });
        }
        let sum = acc.expect("at least one sample");
        plain_objective(tape.mul_scalar(&sum, 1.0 / cfg.eot_samples as f64))
    })
}

/// Adaptive attack through a uniform superset of the policy: random-action
/// trajectories of length τ, final-step loss, averaged over M sequences.
pub fn usp_adaptive_attack(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    let dims = defender.dims();
    let p = defender.perception.constants();
    let fusion = defender.fusion;
    ascend(cfg, scene, init, |tape, patch, r| {
        let mut acc: Option<Tensor> = None;
        for _ in 0..cfg.eot_samples {
            let s1 = sample_state(r, &cfg.bounds);
            let actions: Vec<env::Action> =
                (1..cfg.horizon).map(|_| sample_action(r, cfg.a_max)).collect();
            let (logits, _) = forced_unroll(
                tape,
                scene,
                s1,
                &actions,
                Some(patch),
                &p,
                fusion,
                &dims,
                &cfg.bounds,
            );
            let ce = goal_margin(tape, &logits, scene, cfg.goal, dims.classes);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &ce),
                None => ce,
            });
        }
        let sum = acc.expect("at least one sample");
        plain_objective(tape.mul_scalar(&sum, 1.0 / cfg.eot_samples as f64))
    })
}

/// Adaptive attack on the belief: maximize E‖b_τ − b_τ⁺‖² where b_τ⁺ is the
/// belief of the benign rollout along the same states and actions.
pub fn perception_adaptive_attack(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    let dims = defender.dims();
    let p = defender.perception.constants();
    let fusion = defender.fusion;
    ascend(cfg, scene, init, |tape, patch, r| {
        let mut acc: Option<Tensor> = None;
        for _ in 0..cfg.eot_samples {
            let s1 = sample_state(r, &cfg.bounds);
            let actions: Vec<env::Action> =
                (1..cfg.horizon).map(|_| sample_action(r, cfg.a_max)).collect();
            // benign pass first: params and inputs are constants, so this
            // records nothing and b⁺ detaches for free
            let (_, b_plus) =
                forced_unroll(tape, scene, s1, &actions, None, &p, fusion, &dims, &cfg.bounds);
            let (_, b) = forced_unroll(
                tape,
                scene,
                s1,
                &actions,
                Some(patch),
                &p,
                fusion,
                &dims,
                &cfg.bounds,
            );
            let d = tape.sub(&b, &b_plus);
            let dev = tape.sum_sq(&d);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &dev),
                None => dev,
            });
        }
        let sum = acc.expect("at least one sample");
        plain_objective(tape.mul_scalar(&sum, 1.0 / cfg.eot_samples as f64))
    })
}

/// Adaptive attack on the policy head: stationary τ-step unroll at the
/// frontal state; ascend task loss minus c times the summed squared actions,
/// so the optimum fools the classifier while pinning the camera in place.
pub fn policy_adaptive_attack(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    let dims = defender.dims();
    let p = defender.perception.constants();
    let q = defender.policy.constants();
    let fusion = defender.fusion;
    let s1 = CameraState::new(0.0, 0.0);
    ascend(cfg, scene, init, |tape, patch, _r| {
        let o = env::observe(tape, scene, &state_row(s1), Some(patch), dims.height, dims.width);
        let flat = tape.reshape(&o, vec![1, o.len()]);
        let mut belief = initial_belief(1, &dims);
        let mut last_logits = None;
        let mut penalty: Option<Tensor> = None;
        for t in 0..cfg.horizon {
            let (logits, b) = perceive_batch_fused(tape, &flat, &belief, &p, fusion, t);
            let a = act(tape, &b, &q);
            let sq = tape.sum_sq(&a);
            penalty = Some(match penalty {
                Some(acc) => tape.add(&acc, &sq),
                None => sq,
            });
            belief = b;
            last_logits = Some(logits);
        }
        let ce = goal_margin(tape, &last_logits.unwrap(), scene, cfg.goal, dims.classes);
        let pen = penalty.unwrap();
        let weighted = tape.mul_scalar(&pen, -cfg.lagrange_c);
        let total = tape.add(&ce, &weighted);
        Objective { loss_term: ce.item(), action_norm_term: -pen.item(), total }
    })
}

/// The pipeline attack's per-iteration objective: mean final-step loss over
/// M sampled starts, each unrolled through the true closed loop with
/// policy-driven camera motion recorded on the tape.
fn pipeline_objective(
    tape: &mut Tape,
    patch: &Tensor,
    r: &mut ChaCha8Rng,
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
) -> Tensor {
    let dims = defender.dims();
    let p = defender.perception.constants();
    let q = defender.policy.constants();
    let fusion = defender.fusion;
    let mut acc: Option<Tensor> = None;
    for _ in 0..cfg.eot_samples {
        let s1 = sample_state(r, &cfg.bounds);
        let mut state = state_row(s1);
        let mut belief = initial_belief(1, &dims);
        let mut last_logits = None;
        for t in 0..cfg.horizon {
            let o = env::observe(tape, scene, &state, Some(patch), dims.height, dims.width);
            let flat = tape.reshape(&o, vec![1, o.len()]);
            let (logits, b) = perceive_batch_fused(tape, &flat, &belief, &p, fusion, t);
            let a = act(tape, &b, &q);
            belief = b;
            last_logits = Some(logits);
            if t + 1 < cfg.horizon {
                state = env::transition_t(tape, &state, &a, &cfg.bounds);
            }
        }
        let ce = goal_margin(tape, &last_logits.unwrap(), scene, cfg.goal, dims.classes);
        acc = Some(match acc {
            Some(a) => tape.add(&a, &ce),
            None => ce,
        });
    }
    let sum = acc.expect("at least one sample");
    tape.mul_scalar(&sum, 1.0 / cfg.eot_samples as f64)
}

/// Adaptive attack through the whole pipeline: per sampled start state,
/// unroll the true closed loop (policy actions move the camera on the tape)
/// and ascend the final-step loss averaged over M starts.
pub fn pipeline_adaptive_attack(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    ascend(cfg, scene, init, |tape, patch, r| {
        plain_objective(pipeline_objective(tape, patch, r, scene, defender, cfg))
    })
}

/// Value and patch gradient of the pipeline objective at `patch`. Each call
/// replays the same sample stream, so the returned function of the patch is
/// deterministic — exactly what numerical gradient verification needs.
pub fn pipeline_objective_gradient(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    patch: &Tensor,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.rng_seed, "attack", &[scene.id as u64]);
    let mut tape = Tape::new();
    let leaf = tape.param(patch.shape().to_vec(), patch.data().to_vec());
    let obj = pipeline_objective(&mut tape, &leaf, &mut r, scene, defender, cfg);
    let value = obj.item();
    tape.backward(&obj);
    let grad = Tensor::constant(
        patch.shape().to_vec(),
        tape.grad_of(&leaf).expect("patch is a leaf").to_vec(),
    );
    Ok((value, grad))
}

/// Run the configured attack against one scene.
pub fn attack_scene(
    scene: &Scene,
    defender: &Defender,
    cfg: &AttackConfig,
    init: Option<&Tensor>,
) -> Result<AttackResult> {
    match cfg.kind {
        AttackKind::Mim => mim_attack(scene, defender, CameraState::new(0.0, 0.0), cfg, init),
        AttackKind::Eot => eot_attack(scene, defender, cfg, init),
        AttackKind::UspAdaptive => usp_adaptive_attack(scene, defender, cfg, init),
        AttackKind::PerceptionAdaptive => perception_adaptive_attack(scene, defender, cfg, init),
        AttackKind::PolicyAdaptive => policy_adaptive_attack(scene, defender, cfg, init),
        AttackKind::PipelineAdaptive => pipeline_adaptive_attack(scene, defender, cfg, init),
    }
}

/// One scene's optimized patch.
#[derive(Clone, Debug)]
pub struct PatchEntry {
    pub scene_id: usize,
    pub patch: Tensor,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Per-scene patches from one attack run over a dataset.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub kind: AttackKind,
    pub goal: Goal,
    pub iterations: usize,
    pub entries: Vec<PatchEntry>,
}

/// Attack every scene of the dataset, `jobs` scenes at a time. Results are
/// identical for any job count: each scene draws from its own rng stream.
pub fn attack_dataset(
    ds: &Dataset,
    defender: &Defender,
    cfg: &AttackConfig,
    jobs: usize,
) -> Result<PatchSet> {
    cfg.validate()?;
    let jobs = jobs.max(1);
    let n = ds.scenes.len();
    let mut slots: Vec<Option<Result<AttackResult>>> = Vec::new();
    slots.resize_with(n, || None);
    let slots = std::sync::Mutex::new(slots);
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = attack_scene(&ds.scenes[i], defender, cfg, None);
                slots.lock().expect("slot lock")[i] = Some(out);
            });
        }
    });
    let mut entries = Vec::with_capacity(n);
    for (i, slot) in slots.into_inner().expect("slot lock").into_iter().enumerate() {
        let res = slot.expect("every scene attacked")?;
        entries.push(PatchEntry {
            scene_id: ds.scenes[i].id,
            patch: res.patch,
            first_loss: res.first_loss,
            final_loss: res.final_loss,
        });
    }
    Ok(PatchSet { kind: cfg.kind, goal: cfg.goal, iterations: cfg.iterations, entries })
}

/// One evaluation episode of the attacked defender.
#[derive(Clone, Debug)]
pub struct AsrTrial {
    pub scene_id: usize,
    pub start: CameraState,
    pub true_label: usize,
    pub predicted: usize,
    pub success: bool,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Attack success over the evaluation protocol.
#[derive(Clone, Debug)]
pub struct AsrReport {
    pub kind: AttackKind,
    pub goal: Goal,
    pub trials: Vec<AsrTrial>,
    /// Fraction of trials where the adversary met its goal.
    pub asr: f64,
}

/// Evaluate a patch set: run the defender from every held-out start state
/// with the scene's patch applied, and score the adversary's goal.
pub fn evaluate_asr(
    set: &PatchSet,
    ds: &Dataset,
    defender: &Defender,
    eval_seed: u64,
) -> Result<AsrReport> {
    if set.entries.is_empty() {
        return Err(Error::config("cannot evaluate an empty patch set"));
    }
    let mut by_scene: BTreeMap<usize, &PatchEntry> = BTreeMap::new();
    for e in &set.entries {
        if by_scene.insert(e.scene_id, e).is_some() {
            return Err(Error::config(format!("duplicate patch for scene {}", e.scene_id)));
        }
    }
    let classes = defender.dims().classes;
    let mut trials = Vec::new();
    let mut hits = 0usize;
    for entry in ds.eval_entries() {
        let scene = ds.scene(entry.scene_id);
        let patch = by_scene
            .get(&entry.scene_id)
            .ok_or_else(|| Error::config(format!("no patch for scene {}", entry.scene_id)))?;
        let pred = defender.predict(scene, entry.state, Some(&patch.patch), eval_seed);
        let success = match set.goal {
            Goal::Dodging => pred.class != scene.identity_label,
            Goal::Impersonation => {
                pred.class == impersonation_target(scene.identity_label, classes)
            }
        };
        hits += success as usize;
        trials.push(AsrTrial {
            scene_id: entry.scene_id,
            start: entry.state,
            true_label: scene.identity_label,
            predicted: pred.class,
            success,
            final_loss: patch.final_loss,
            iterations: set.iterations,
        });
    }
    if trials.is_empty() {
        return Err(Error::config("dataset has no evaluation entries"));
    }
    let asr = hits as f64 / trials.len() as f64;
    Ok(AsrReport { kind: set.kind, goal: set.goal, trials, asr })
}

/// Write the per-trial report in its CSV interchange form.
pub fn write_asr_csv(path: &Path, report: &AsrReport) -> Result<()> {
    let mut csv =
        io::CsvFile::create(path, &["scene_id", "goal", "success", "final_loss", "iterations"])?;
    for t in &report.trials {
        csv.row(&[
            t.scene_id.to_string(),
            report.goal.as_str().to_string(),
            (t.success as u8).to_string(),
            io::fmt_f64(t.final_loss),
            t.iterations.to_string(),
        ])?;
    }
    csv.finish()
}

/// Persist a patch set: one tensor file per scene plus a manifest.
pub fn save_patch_set(dir: &Path, set: &PatchSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = KvMap::new();
    kv.set("kind", set.kind.as_str());
    kv.set("goal", set.goal.as_str());
    kv.set("iterations", set.iterations);
    kv.set("scenes", set.entries.len());
    kv.write(&dir.join("patchset.kv"))?;
    let mut csv = io::CsvFile::create(
        &dir.join("patchset.csv"),
        &["scene_id", "file", "first_loss", "final_loss"],
    )?;
    for e in &set.entries {
        let name = format!("patch_{:02}.eadpch", e.scene_id);
        io::write_tensor_file(&dir.join(&name), io::PATCH_MAGIC, &e.patch)?;
        csv.row(&[
            e.scene_id.to_string(),
            name,
            io::fmt_f64(e.first_loss),
            io::fmt_f64(e.final_loss),
        ])?;
    }
    csv.finish()
}

/// Load a patch set saved by [`save_patch_set`].
pub fn load_patch_set(dir: &Path) -> Result<PatchSet> {
    let kv = KvMap::read(&dir.join("patchset.kv"))?;
    kv.reject_unknown(&["kind", "goal", "iterations", "scenes"])?;
    let kind = AttackKind::parse(
        kv.get("kind").ok_or_else(|| Error::config("patchset.kv missing kind"))?,
    )?;
    let goal =
        Goal::parse(kv.get("goal").ok_or_else(|| Error::config("patchset.kv missing goal"))?)?;
    let iterations = kv
        .parse_field::<usize>("iterations")?
        .ok_or_else(|| Error::config("patchset.kv missing iterations"))?;
    let declared = kv
        .parse_field::<usize>("scenes")?
        .ok_or_else(|| Error::config("patchset.kv missing scenes"))?;
    let (header, rows) = io::read_csv(&dir.join("patchset.csv"))?;
    if header != ["scene_id", "file", "first_loss", "final_loss"] {
        return Err(Error::format(dir.join("patchset.csv"), "unexpected manifest columns"));
    }
    if rows.len() != declared {
        return Err(Error::format(
            dir.join("patchset.csv"),
            format!("manifest lists {} patches, expected {}", rows.len(), declared),
        ));
    }
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        let scene_id: usize = row[0]
            .parse()
            .map_err(|_| Error::format(dir.join("patchset.csv"), "bad scene_id"))?;
        let patch = io::read_tensor_file(&dir.join(&row[1]), io::PATCH_MAGIC)?;
        let first_loss: f64 = row[2]
            .parse()
            .map_err(|_| Error::format(dir.join("patchset.csv"), "bad first_loss"))?;
        let final_loss: f64 = row[3]
            .parse()
            .map_err(|_| Error::format(dir.join("patchset.csv"), "bad final_loss"))?;
        entries.push(PatchEntry { scene_id, patch, first_loss, final_loss });
    }
    Ok(PatchSet { kind, goal, iterations, entries })
}
