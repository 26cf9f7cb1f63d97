//! Defender models: a recurrent perception network that folds each
//! observation into a belief vector and predicts the scene identity, and a
//! bounded policy head that turns beliefs into camera actions.
//!
//! Architecture is deliberately small: a two-layer MLP encoder, a single
//! gated fusion cell for the recurrence, and linear heads. Parameters live
//! in named [`ParamSet`]s so checkpointing and optimization can treat them
//! uniformly; a forward pass first *binds* them onto a tape (trainable) or
//! wraps them as constants (frozen).

use crate::env::{self, Scene, StateBounds};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};
use rand::Rng;

/// Layer widths for both models. Defaults match the reference configuration;
/// tests shrink them to keep finite-difference sweeps cheap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    /// Observation height in pixels.
    pub height: usize,
    /// Observation width in pixels.
    pub width: usize,
    /// Encoder hidden width.
    pub enc_hidden: usize,
    /// Encoder output (feature) width.
    pub feature: usize,
    /// Belief width.
    pub belief: usize,
    /// Number of identity classes.
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { height: 32, width: 32, enc_hidden: 128, feature: 64, belief: 64, classes: 8 }
    }
}

impl ModelDims {
    /// Flattened observation length (RGB).
    pub fn input_len(&self) -> usize {
        self.height * self.width * 3
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors. Order is part of the
/// contract: optimizers pair moment buffers by position and checkpoints
/// restore by name.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name} shape/data");
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Rebuild from checkpoint entries, verifying names and shapes against
    /// the expected layout.
    pub fn restore_from(&mut self, loaded: &[ParamEntry]) -> Result<()> {
        if loaded.len() != self.entries.len() {
            return Err(Error::runtime(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.entries.len()
            )));
        }
        for (have, want) in loaded.iter().zip(&self.entries) {
            if have.name != want.name || have.shape != want.shape {
                return Err(Error::runtime(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    have.name, have.shape, want.name, want.shape
                )));
            }
        }
        for (dst, src) in self.entries.iter_mut().zip(loaded) {
            dst.data = src.data.clone();
        }
        Ok(())
    }

    fn tensor(&self, idx: usize) -> Tensor {
        let e = &self.entries[idx];
        Tensor::from_vec(e.shape.clone(), e.data.clone()).expect("stored params are finite")
    }

    /// SHA-256 over every entry's name, shape, and raw little-endian bytes:
    /// detects any parameter mutation.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0xff]);
            for &d in &e.shape {
                h.update((d as u64).to_le_bytes());
            }
            h.update([0xfe]);
            for &v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

fn uniform_init(r: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| r.gen_range(-bound..bound)).collect()
}

// Entry order inside PerceptionParams (indices into the ParamSet).
const ENC_W1: usize = 0;
const ENC_B1: usize = 1;
const ENC_W2: usize = 2;
const ENC_B2: usize = 3;
const FUSE_WZ: usize = 4;
const FUSE_BZ: usize = 5;
const FUSE_WH: usize = 6;
const FUSE_BH: usize = 7;
const HEAD_W: usize = 8;
const HEAD_B: usize = 9;

/// Perception parameters θ: encoder, fusion cell, prediction head.
#[derive(Clone, Debug)]
pub struct PerceptionParams {
    pub dims: ModelDims,
    pub set: ParamSet,
}

impl PerceptionParams {
    /// Fresh parameters: every weight matrix uniform in ±1/√fan_in, biases
    /// zero. The prediction head gets the same treatment rather than zeros —
    /// a zero head is a saddle point where no gradient reaches the encoder
    /// or fusion cell at all, and training never leaves it at larger widths.
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut r = rng::stream(seed, "init-perception", &[]);
        let (i, h, f, d, c) =
            (dims.input_len(), dims.enc_hidden, dims.feature, dims.belief, dims.classes);
        let mut set = ParamSet::default();
        set.push("enc_w1", vec![i, h], uniform_init(&mut r, i, i * h));
        set.push("enc_b1", vec![h], vec![0.0; h]);
        set.push("enc_w2", vec![h, f], uniform_init(&mut r, h, h * f));
        set.push("enc_b2", vec![f], vec![0.0; f]);
        set.push("fuse_wz", vec![f + d, d], uniform_init(&mut r, f + d, (f + d) * d));
        set.push("fuse_bz", vec![d], vec![0.0; d]);
        set.push("fuse_wh", vec![f + d, d], uniform_init(&mut r, f + d, (f + d) * d));
        set.push("fuse_bh", vec![d], vec![0.0; d]);
        set.push("head_w", vec![d, c], uniform_init(&mut r, d, d * c));
        set.push("head_b", vec![c], vec![0.0; c]);
        PerceptionParams { dims, set }
    }

    /// Overwrite every tensor (heads included) with ±1/√fan_in noise.
    /// Diagnostic helper: gives generic nonzero weights everywhere, which
    /// gradient and recurrence tests need.
    pub fn randomize(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "randomize-perception", &[]);
        for e in self.set.entries_mut() {
            let fan_in = if e.shape.len() == 2 { e.shape[0] } else { e.shape[0].max(1) };
            e.data = uniform_init(&mut r, fan_in, e.data.len());
        }
    }

    /// Bind as trainable tape parameters.
    pub fn bind(&self, tape: &mut Tape) -> BoundPerception {
        BoundPerception { t: self.bind_with(|e| tape.param(e.shape.clone(), e.data.clone())) }
    }

    /// Wrap as frozen constants (no gradients, no tape overhead).
    pub fn constants(&self) -> BoundPerception {
        BoundPerception { t: (0..self.set.entries().len()).map(|i| self.set.tensor(i)).collect() }
    }

    fn bind_with(&self, mut f: impl FnMut(&ParamEntry) -> Tensor) -> Vec<Tensor> {
        self.set.entries().iter().map(&mut f).collect()
    }
}

/// Perception parameters materialized as tensors (on-tape or constant).
pub struct BoundPerception {
    t: Vec<Tensor>,
}

impl BoundPerception {
    /// The bound tensors in `ParamSet` order, for gradient collection.
    pub fn tensors(&self) -> &[Tensor] {
        &self.t
    }
}

/// Policy parameters φ: a single linear head on the belief, squashed by
/// tanh and scaled to the per-step action limit.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub dims: ModelDims,
    /// Per-step action limit; components of every action lie strictly
    /// inside ±a_max.
    pub a_max: f64,
    pub set: ParamSet,
}

const POL_W: usize = 0;
const POL_B: usize = 1;

impl PolicyParams {
    /// Zero-initialized policy: the defender starts motionless.
    pub fn new(dims: ModelDims, a_max: f64) -> Self {
        let mut set = ParamSet::default();
        set.push("pol_w", vec![dims.belief, 2], vec![0.0; dims.belief * 2]);
        set.push("pol_b", vec![2], vec![0.0; 2]);
        PolicyParams { dims, a_max, set }
    }

    /// Overwrite with ±1/√fan_in noise (see [`PerceptionParams::randomize`]).
    pub fn randomize(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "randomize-policy", &[]);
        for e in self.set.entries_mut() {
            let fan_in = if e.shape.len() == 2 { e.shape[0] } else { e.shape[0].max(1) };
            e.data = uniform_init(&mut r, fan_in, e.data.len());
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPolicy {
        let t =
            self.set.entries().iter().map(|e| tape.param(e.shape.clone(), e.data.clone())).collect();
        BoundPolicy { t, a_max: self.a_max }
    }

    pub fn constants(&self) -> BoundPolicy {
        BoundPolicy {
            t: (0..self.set.entries().len()).map(|i| self.set.tensor(i)).collect(),
            a_max: self.a_max,
        }
    }
}

/// Policy parameters materialized as tensors.
pub struct BoundPolicy {
    t: Vec<Tensor>,
    pub a_max: f64,
}

impl BoundPolicy {
    pub fn tensors(&self) -> &[Tensor] {
        &self.t
    }
}

/// All-zeros initial belief for a batch of `rows` trajectories.
pub fn initial_belief(rows: usize, dims: &ModelDims) -> Tensor {
    Tensor::from_vec(vec![rows, dims.belief], vec![0.0; rows * dims.belief]).unwrap()
}

fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let rows = x.shape()[0];
    let xw = tape.matmul(x, w);
    let bb = tape.broadcast_rows(b, rows);
    tape.add(&xw, &bb)
}

/// How the belief absorbs a new feature vector.
///
/// `Gated` is the defender's recurrent cell. `MeanPool` keeps a running
/// mean of encoder features instead — an order-insensitive baseline whose
/// belief forgets nothing and weighs every view equally. It needs
/// `feature == belief` and makes the fusion weights inert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Gated,
    MeanPool,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Gated => "gated",
            FusionKind::MeanPool => "mean_pool",
        }
    }

    pub fn parse(s: &str) -> crate::Result<FusionKind> {
        match s {
            "gated" => Ok(FusionKind::Gated),
            "mean_pool" => Ok(FusionKind::MeanPool),
            other => Err(crate::Error::config(format!("unknown fusion kind {other:?}"))),
        }
    }
}

/// One recurrent perception step for a batch: observations `[B × H·W·3]`
/// and beliefs `[B × D]` in, logits `[B × C]` and updated beliefs out.
/// `step` is the zero-based observation index; only `MeanPool` reads it.
pub fn perceive_batch_fused(
    tape: &mut Tape,
    o_flat: &Tensor,
    b_prev: &Tensor,
    p: &BoundPerception,
    fusion: FusionKind,
    step: usize,
) -> (Tensor, Tensor) {
    let t = &p.t;
    let pre1 = linear(tape, o_flat, &t[ENC_W1], &t[ENC_B1]);
    let x1 = tape.relu(&pre1);
    let pre2 = linear(tape, &x1, &t[ENC_W2], &t[ENC_B2]);
    let feat = tape.tanh(&pre2);

    let belief = match fusion {
        FusionKind::Gated => {
            // b' = b + z ⊙ (h̃ − b), z = σ(Wz[f;b]), h̃ = tanh(Wh[f;b])
            let joint = tape.concat_cols(&feat, b_prev);
            let zpre = linear(tape, &joint, &t[FUSE_WZ], &t[FUSE_BZ]);
            let z = tape.sigmoid(&zpre);
            let hpre = linear(tape, &joint, &t[FUSE_WH], &t[FUSE_BH]);
            let hcand = tape.tanh(&hpre);
            let delta = tape.sub(&hcand, b_prev);
            let zdelta = tape.mul(&z, &delta);
            tape.add(b_prev, &zdelta)
        }
        FusionKind::MeanPool => {
            // running mean: b' = b + (f − b)/(step+1), so b_t = mean(f_1..f_t)
            assert_eq!(
                feat.shape()[1],
                b_prev.shape()[1],
                "mean-pool fusion needs feature == belief width"
            );
            let delta = tape.sub(&feat, b_prev);
            let scaled = tape.mul_scalar(&delta, 1.0 / (step as f64 + 1.0));
            tape.add(b_prev, &scaled)
        }
    };

    let logits = linear(tape, &belief, &t[HEAD_W], &t[HEAD_B]);
    (logits, belief)
}

/// Gated perception step (the defender's own cell).
pub fn perceive_batch(
    tape: &mut Tape,
    o_flat: &Tensor,
    b_prev: &Tensor,
    p: &BoundPerception,
) -> (Tensor, Tensor) {
    perceive_batch_fused(tape, o_flat, b_prev, p, FusionKind::Gated, 0)
}

/// Single-observation perception: `o` is `[H × W × 3]`, belief `[1 × D]`.
pub fn perceive(
    tape: &mut Tape,
    o: &Tensor,
    b_prev: &Tensor,
    p: &BoundPerception,
) -> (Tensor, Tensor) {
    let flat = tape.reshape(o, vec![1, o.len()]);
    perceive_batch(tape, &flat, b_prev, p)
}

/// Policy head: actions `[B × 2]`, componentwise `a_max · tanh(linear(b))`.
pub fn act(tape: &mut Tape, belief: &Tensor, p: &BoundPolicy) -> Tensor {
    let pre = linear(tape, belief, &p.t[POL_W], &p.t[POL_B]);
    let squashed = tape.tanh(&pre);
    tape.mul_scalar(&squashed, p.a_max)
}

/// Everything one unrolled episode produced, step by step. All tensors stay
/// connected to the tape they were built on, so callers can differentiate
/// any recorded quantity.
pub struct Trajectory {
    /// Camera states `[1 × 2]`, one per step (s₁ first).
    pub states: Vec<Tensor>,
    /// Observations `[H × W × 3]` as seen by the defender (patch applied).
    pub observations: Vec<Tensor>,
    /// Beliefs `[1 × D]` after each perception step.
    pub beliefs: Vec<Tensor>,
    /// Identity logits `[1 × C]` at each step.
    pub logits: Vec<Tensor>,
    /// Actions `[1 × 2]` emitted at each step (the last is never applied).
    pub actions: Vec<Tensor>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_value(&self, t: usize) -> env::CameraState {
        let d = self.states[t].data();
        env::CameraState::new(d[0], d[1])
    }

    pub fn action_value(&self, t: usize) -> env::Action {
        let d = self.actions[t].data();
        env::Action::new(d[0], d[1])
    }

    /// argmax of the step-`t` logits (first index wins ties).
    pub fn predicted_class(&self, t: usize) -> usize {
        argmax(self.logits[t].data())
    }
}

/// First index of the maximum element.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable cross-entropy of one logit row against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    assert!(label < logits.len(), "label out of range");
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// How the camera moves between observations at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MovementRule {
    /// Never move: every observation repeats the start state.
    Stationary,
    /// Actions drawn uniformly from the action box, ignoring beliefs.
    Random,
    /// Actions from the policy head.
    Learned,
}

impl MovementRule {
    pub fn as_str(self) -> &'static str {
        match self {
            MovementRule::Stationary => "stationary",
            MovementRule::Random => "random",
            MovementRule::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<MovementRule> {
        match s {
            "stationary" => Ok(MovementRule::Stationary),
            "random" => Ok(MovementRule::Random),
            "learned" => Ok(MovementRule::Learned),
            other => Err(Error::config(format!("unknown movement rule {other:?}"))),
        }
    }
}

/// A complete evaluatable defender: parameters plus the protocol (fusion
/// rule, movement rule, horizon, state box) needed to run it on a scene.
#[derive(Clone, Debug)]
pub struct Defender {
    pub perception: PerceptionParams,
    pub policy: PolicyParams,
    pub fusion: FusionKind,
    pub movement: MovementRule,
    pub tau: usize,
    pub bounds: StateBounds,
}

/// What one evaluation episode produced.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// argmax of the final-step logits.
    pub class: usize,
    /// Final-step logits.
    pub logits: Vec<f64>,
    /// Cross-entropy of the final logits against the scene's true label.
    pub ce: f64,
    /// Mean ℓ₂ norm of the actions the policy head emitted (all steps),
    /// regardless of whether the movement rule applied them.
    pub mean_action_norm: f64,
    /// Shannon entropy (nats) of the softmax prediction at every step.
    pub entropy_per_step: Vec<f64>,
}

/// Entropy in nats of the softmax distribution over one logit row.
pub fn predictive_entropy_of_logits(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let mut h = 0.0;
    for &l in logits {
        let p = (l - m).exp() / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

impl Defender {
    /// Fresh defender with the standard protocol: gated fusion, learned
    /// movement, seeded perception init, motionless policy.
    pub fn new(dims: ModelDims, seed: u64, a_max: f64, tau: usize, bounds: StateBounds) -> Defender {
        Defender {
            perception: PerceptionParams::new(dims, seed),
            policy: PolicyParams::new(dims, a_max),
            fusion: FusionKind::Gated,
            movement: MovementRule::Learned,
            tau,
            bounds,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.perception.dims
    }

    /// Combined digest over both parameter sets; changes iff any weight bit
    /// changes.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.perception.set.checksum());
        h.update(self.policy.set.checksum());
        h.finalize().into()
    }

    /// Run one evaluation episode from `s1` and report the final prediction.
    /// Deterministic given (`self`, `scene`, `s1`, `patch`, `trial_seed`);
    /// `trial_seed` only matters under [`MovementRule::Random`].
    pub fn predict(
        &self,
        scene: &Scene,
        s1: env::CameraState,
        patch: Option<&Tensor>,
        trial_seed: u64,
    ) -> Prediction {
        let dims = self.dims();
        let (h, w) = (dims.height, dims.width);
        let mut tape = Tape::new();
        let p = self.perception.constants();
        let q = self.policy.constants();
        let mut r = rng::stream(trial_seed, "eval-actions", &[scene.id as u64]);

        let mut state = s1;
        let mut belief = initial_belief(1, &dims);
        let mut last_logits: Vec<f64> = Vec::new();
        let mut entropy_per_step = Vec::with_capacity(self.tau);
        let mut norm_sum = 0.0;
        for t in 0..self.tau {
            let st = Tensor::from_vec(vec![1, 2], vec![state.yaw, state.pitch])
                .expect("finite camera state");
            let o = env::observe(&mut tape, scene, &st, patch, h, w);
            let flat = tape.reshape(&o, vec![1, o.len()]);
            let (logits, b) = perceive_batch_fused(&mut tape, &flat, &belief, &p, self.fusion, t);
            let a_emitted = act(&mut tape, &b, &q);
            let ad = a_emitted.data();
            norm_sum += (ad[0] * ad[0] + ad[1] * ad[1]).sqrt();
            entropy_per_step.push(predictive_entropy_of_logits(logits.data()));
            last_logits = logits.data().to_vec();
            belief = b;
            if t + 1 < self.tau {
                let a = match self.movement {
                    MovementRule::Stationary => env::Action::new(0.0, 0.0),
                    MovementRule::Random => env::Action::new(
                        r.gen_range(-self.policy.a_max..=self.policy.a_max),
                        r.gen_range(-self.policy.a_max..=self.policy.a_max),
                    ),
                    MovementRule::Learned => env::Action::new(ad[0], ad[1]),
                };
                state = env::transition(state, a, &self.bounds);
            }
        }
        Prediction {
            class: argmax(&last_logits),
            ce: cross_entropy(&last_logits, scene.identity_label),
            logits: last_logits,
            mean_action_norm: norm_sum / self.tau as f64,
            entropy_per_step,
        }
    }
}

/// Unroll the closed loop for `tau` steps from state `s1`: render, perceive,
/// act, transition. With `patch` given, every observation carries it.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape,
    scene: &Scene,
    s1: env::CameraState,
    patch: Option<&Tensor>,
    perception: &BoundPerception,
    policy: &BoundPolicy,
    dims: &ModelDims,
    tau: usize,
    bounds: &StateBounds,
) -> Trajectory {
    assert!(tau >= 1, "rollout needs at least one step");
    let (h, w) = (dims.height, dims.width);
    let mut traj = Trajectory {
        states: Vec::with_capacity(tau),
        observations: Vec::with_capacity(tau),
        beliefs: Vec::with_capacity(tau),
        logits: Vec::with_capacity(tau),
        actions: Vec::with_capacity(tau),
    };
    let mut state =
        Tensor::from_vec(vec![1, 2], vec![s1.yaw, s1.pitch]).expect("finite start state");
    let mut belief = initial_belief(1, dims);
    for t in 0..tau {
        let o = env::observe(tape, scene, &state, patch, h, w);
        let (logits, b) = perceive(tape, &o, &belief, perception);
        let a = act(tape, &b, policy);
        traj.states.push(state.clone());
        traj.observations.push(o);
        traj.beliefs.push(b.clone());
        traj.logits.push(logits);
        traj.actions.push(a.clone());
        belief = b;
        if t + 1 < tau {
            state = env::transition_t(tape, &state, &a, bounds);
        }
    }
    traj
}

const DEFENDER_KEYS: &[&str] = &[
    "height",
    "width",
    "enc_hidden",
    "feature",
    "belief",
    "classes",
    "a_max",
    "tau",
    "fusion",
    "movement",
    "yaw_min",
    "yaw_max",
    "pitch_min",
    "pitch_max",
];

/// Write a defender into `dir`: `defender.kv` holds the architecture and
/// protocol, `params.eadckp` the perception tensors followed by the policy
/// tensors.
pub fn save_defender(dir: &std::path::Path, def: &Defender) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = def.dims();
    let mut kv = crate::io::KvMap::new();
    kv.set("height", d.height);
    kv.set("width", d.width);
    kv.set("enc_hidden", d.enc_hidden);
    kv.set("feature", d.feature);
    kv.set("belief", d.belief);
    kv.set("classes", d.classes);
    kv.set("a_max", crate::io::fmt_f64(def.policy.a_max));
    kv.set("tau", def.tau);
    kv.set("fusion", def.fusion.as_str());
    kv.set("movement", def.movement.as_str());
    kv.set("yaw_min", crate::io::fmt_f64(def.bounds.yaw_min));
    kv.set("yaw_max", crate::io::fmt_f64(def.bounds.yaw_max));
    kv.set("pitch_min", crate::io::fmt_f64(def.bounds.pitch_min));
    kv.set("pitch_max", crate::io::fmt_f64(def.bounds.pitch_max));
    kv.write(&dir.join("defender.kv"))?;

    let mut entries: Vec<ParamEntry> = def.perception.set.entries().to_vec();
    entries.extend_from_slice(def.policy.set.entries());
    crate::io::write_checkpoint(&dir.join("params.eadckp"), &entries)
}

/// Read a defender back from [`save_defender`]'s layout. Tensor names and
/// shapes must match the architecture the manifest declares.
pub fn load_defender(dir: &std::path::Path) -> Result<Defender> {
    let kv = crate::io::KvMap::read(&dir.join("defender.kv"))?;
    kv.reject_unknown(DEFENDER_KEYS)?;
    let field = |key: &str| -> Result<String> {
        kv.get(key)
            .map(str::to_string)
            .ok_or_else(|| Error::config(format!("defender manifest missing key {key:?}")))
    };
    let dims = ModelDims {
        height: field("height")?.parse().map_err(|_| Error::config("bad height"))?,
        width: field("width")?.parse().map_err(|_| Error::config("bad width"))?,
        enc_hidden: field("enc_hidden")?.parse().map_err(|_| Error::config("bad enc_hidden"))?,
        feature: field("feature")?.parse().map_err(|_| Error::config("bad feature"))?,
        belief: field("belief")?.parse().map_err(|_| Error::config("bad belief"))?,
        classes: field("classes")?.parse().map_err(|_| Error::config("bad classes"))?,
    };
    let a_max: f64 = field("a_max")?.parse().map_err(|_| Error::config("bad a_max"))?;
    let tau: usize = field("tau")?.parse().map_err(|_| Error::config("bad tau"))?;
    let bounds = StateBounds {
        yaw_min: field("yaw_min")?.parse().map_err(|_| Error::config("bad yaw_min"))?,
        yaw_max: field("yaw_max")?.parse().map_err(|_| Error::config("bad yaw_max"))?,
        pitch_min: field("pitch_min")?.parse().map_err(|_| Error::config("bad pitch_min"))?,
        pitch_max: field("pitch_max")?.parse().map_err(|_| Error::config("bad pitch_max"))?,
    };
    let mut def = Defender::new(dims, 0, a_max, tau, bounds);
    def.fusion = FusionKind::parse(&field("fusion")?)?;
    def.movement = MovementRule::parse(&field("movement")?)?;

    let entries = crate::io::read_checkpoint(&dir.join("params.eadckp"))?;
    let split = def.perception.set.entries().len();
    if entries.len() < split {
        return Err(Error::runtime(format!(
            "checkpoint holds {} tensors, defender needs more than {split}",
            entries.len()
        )));
    }
    def.perception.set.restore_from(&entries[..split])?;
    def.policy.set.restore_from(&entries[split..])?;
    Ok(def)
}
