//! Fitting the defender: uniform surrogate patches, the offline perception
//! phase on random-action frames, the two-step-unrolled online phase that
//! trains perception and policy together, and the four-variant ablation
//! grid.
//!
//! Both phases share one protocol for reproducibility: every stochastic
//! choice comes from a labeled [`rng::stream`] keyed by the config seed, the
//! epoch, and the sample index. Because each sample owns its stream, two runs
//! that differ only in the patched fraction still visit identical start
//! states and actions — the controlled comparison the ablation grid needs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::env::{self, CameraState, StateBounds};
use crate::error::Error;
use crate::io::{self, CsvFile, KvMap};
use crate::models::{
    act, initial_belief, perceive_batch_fused, Defender, FusionKind, MovementRule,
};
use crate::rng;
use crate::tensor::optim::{OptimConfig, Optimizer};
use crate::tensor::{Tape, Tensor};
use crate::Result;

/// Hyperparameters for both training phases.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_offline: usize,
    pub epochs_online: usize,
    pub lr_offline: f64,
    pub lr_online: f64,
    pub batch_size: usize,
    /// Trajectory length τ per training episode. Must be even: the online
    /// phase advances two steps per parameter update.
    pub horizon: usize,
    /// Fraction of samples that receive a uniform surrogate patch.
    pub r_patch: f64,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub bounds: StateBounds,
    pub a_max: f64,
    pub rng_seed: u64,
    /// Whether the offline phase also mixes in surrogate patches at
    /// `r_patch` (the online phase always does).
    pub usap_offline: bool,
}

impl Default for TrainConfig {
    /// Defaults follow the reference protocol. The batch size is scaled to
    /// the toy dataset (48 training views): mini-batches of 12 give four
    /// optimizer steps per epoch, which the full-scale batch sizes would
    /// collapse into one.
    fn default() -> Self {
        TrainConfig {
            epochs_offline: 50,
            epochs_online: 50,
            lr_offline: 1e-3,
            lr_online: 1.5e-4,
            batch_size: 12,
            horizon: 4,
            r_patch: 0.4,
            patch_rows: 10,
            patch_cols: 10,
            bounds: StateBounds::default(),
            a_max: 0.175,
            rng_seed: 0,
            usap_offline: true,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs_offline",
    "epochs_online",
    "lr_offline",
    "lr_online",
    "batch_size",
    "horizon",
    "r_patch",
    "patch_rows",
    "patch_cols",
    "yaw_abs_max",
    "pitch_abs_max",
    "a_max",
    "rng_seed",
    "usap_offline",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_patch) {
            return Err(Error::config("r_patch must lie in [0, 1]"));
        }
        if self.horizon == 0 || self.horizon % 2 != 0 {
            return Err(Error::config("horizon must be even and positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for (name, lr) in [("lr_offline", self.lr_offline), ("lr_online", self.lr_online)] {
            if lr < 0.0 || !lr.is_finite() {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return Err(Error::config("patch grid must be nonempty"));
        }
        if self.a_max <= 0.0 || !self.a_max.is_finite() {
            return Err(Error::config("a_max must be positive"));
        }
        Ok(())
    }

    /// Parse from key=value text; absent keys keep defaults, unknown keys
    /// are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<TrainConfig> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let mut cfg = TrainConfig::default();
        if let Some(v) = kv.parse_field::<usize>("epochs_offline")? {
            cfg.epochs_offline = v;
        }
        if let Some(v) = kv.parse_field::<usize>("epochs_online")? {
            cfg.epochs_online = v;
        }
        if let Some(v) = kv.parse_field::<f64>("lr_offline")? {
            cfg.lr_offline = v;
        }
        if let Some(v) = kv.parse_field::<f64>("lr_online")? {
            cfg.lr_online = v;
        }
        if let Some(v) = kv.parse_field::<usize>("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.parse_field::<usize>("horizon")? {
            cfg.horizon = v;
        }
        if let Some(v) = kv.parse_field::<f64>("r_patch")? {
            cfg.r_patch = v;
        }
        if let Some(v) = kv.parse_field::<usize>("patch_rows")? {
            cfg.patch_rows = v;
        }
        if let Some(v) = kv.parse_field::<usize>("patch_cols")? {
            cfg.patch_cols = v;
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
        if let Some(v) = kv.parse_field::<u64>("rng_seed")? {
            cfg.rng_seed = v;
        }
        if let Some(v) = kv.parse_field::<bool>("usap_offline")? {
            cfg.usap_offline = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render as key=value text (the run-manifest snapshot).
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("epochs_offline", self.epochs_offline);
        kv.set("epochs_online", self.epochs_online);
        kv.set("lr_offline", self.lr_offline);
        kv.set("lr_online", self.lr_online);
        kv.set("batch_size", self.batch_size);
        kv.set("horizon", self.horizon);
        kv.set("r_patch", self.r_patch);
        kv.set("patch_rows", self.patch_rows);
        kv.set("patch_cols", self.patch_cols);
        kv.set("yaw_abs_max", self.bounds.yaw_max);
        kv.set("pitch_abs_max", self.bounds.pitch_max);
        kv.set("a_max", self.a_max);
        kv.set("rng_seed", self.rng_seed);
        kv.set("usap_offline", self.usap_offline);
        kv
    }
}

/// Draw one surrogate patch: i.i.d. uniform texels on [0, 1).
pub fn sample_usap_patch(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols * 3).map(|_| r.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(vec![rows, cols, 3], data).expect("uniform draws are finite")
}

/// Which training phase produced a metrics row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

/// One epoch of training telemetry.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the held-out views, clean observations.
    pub clean_acc: f64,
    /// Accuracy on the held-out views under fresh uniform surrogate patches.
    pub patched_acc: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: [&str; 6] =
    ["epoch", "phase", "loss", "clean_acc", "patched_acc", "wall_ms"];

/// Open a fresh metrics CSV with the standard header. Rows are appended as
/// epochs finish, so a partial file survives an interrupted run. Note the
/// wall_ms column makes this file non-reproducible across reruns; it is a
/// log, not a content-addressed artifact.
pub fn metrics_csv(path: &Path) -> Result<CsvFile> {
    CsvFile::create(path, &METRICS_HEADER)
}

fn emit(sink: &mut Option<&mut CsvFile>, row: &EpochRow) -> Result<()> {
    if let Some(csv) = sink.as_deref_mut() {
        csv.row(&[
            row.epoch.to_string(),
            row.phase.as_str().to_string(),
            io::fmt_f64(row.loss),
            io::fmt_f64(row.clean_acc),
            io::fmt_f64(row.patched_acc),
            row.wall_ms.to_string(),
        ])?;
    }
    Ok(())
}

/// Fraction of held-out views the defender classifies correctly, one
/// episode per eval entry starting at that entry's manifest state. With
/// `patch_dims` set, every episode sees a fresh uniform surrogate patch.
pub fn accuracy(
    ds: &Dataset,
    defender: &Defender,
    patch_dims: Option<(usize, usize)>,
    eval_seed: u64,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, e) in ds.eval_entries().enumerate() {
        let scene = ds.scene(e.scene_id);
        let patch = patch_dims.map(|(rows, cols)| {
            let mut r = rng::stream(eval_seed, "eval-usap", &[i as u64]);
            sample_usap_patch(rows, cols, &mut r)
        });
        let pred = defender.predict(scene, e.state, patch.as_ref(), eval_seed);
        correct += usize::from(pred.class == scene.identity_label);
        total += 1;
    }
    correct as f64 / total.max(1) as f64
}

/// Per-sample draws shared by both phases, taken from the sample's own
/// stream so they do not shift when other knobs change.
struct SampleDraw {
    patched: bool,
    patch: Option<Tensor>,
    rng: ChaCha8Rng,
}

fn draw_sample(cfg: &TrainConfig, label: &str, epoch: usize, idx: usize, with_patches: bool) -> SampleDraw {
    let mut rng = rng::stream(cfg.rng_seed, label, &[epoch as u64, idx as u64]);
    let patched = with_patches && rng.gen::<f64>() < cfg.r_patch;
    let patch = patched.then(|| sample_usap_patch(cfg.patch_rows, cfg.patch_cols, &mut rng));
    SampleDraw { patched, patch, rng }
}

fn state_row(s: CameraState) -> Tensor {
    Tensor::from_vec(vec![1, 2], vec![s.yaw, s.pitch]).expect("finite camera state")
}

fn shuffled_train_indices(ds: &Dataset, seed: u64, label: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> =
        (0..ds.entries.len()).filter(|&i| ds.entries[i].split == crate::data::Split::Train).collect();
    let mut r = rng::stream(seed, label, &[epoch as u64]);
    idx.shuffle(&mut r);
    idx
}

/// Apply one optimizer update to the perception set (and optionally the
/// policy set) from gradients already pulled off the tape.
fn apply_update(
    opt: &mut Optimizer,
    defender: &mut Defender,
    perception_grads: &[Vec<f64>],
    policy_grads: Option<&[Vec<f64>]>,
) {
    let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::new();
    for (e, g) in defender.perception.set.entries_mut().iter_mut().zip(perception_grads) {
        pairs.push((e.data.as_mut_slice(), g.as_slice()));
    }
    if let Some(pg) = policy_grads {
        for (e, g) in defender.policy.set.entries_mut().iter_mut().zip(pg) {
            pairs.push((e.data.as_mut_slice(), g.as_slice()));
        }
    }
    opt.step(&mut pairs);
}

fn pull_grads(tape: &Tape, bound: &[Tensor]) -> Vec<Vec<f64>> {
    bound
        .iter()
        .map(|t| tape.grad_of(t).expect("bound parameter is a tape leaf").to_vec())
        .collect()
}

/// Offline phase: fit the perception parameters alone on τ-step episodes
/// driven by uniformly random actions, starting from each training view.
/// The loss is the mean cross-entropy over every step of every episode, so
/// early beliefs are supervised too. Surrogate patches are mixed in at
/// `r_patch` when the config asks for them.
///
/// Per-epoch metrics evaluate the held-out views under random movement —
/// the regime the offline model is trained for.
pub fn train_offline(
    ds: &Dataset,
    defender: &mut Defender,
    cfg: &TrainConfig,
    mut metrics: Option<&mut CsvFile>,
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    let dims = defender.dims();
    let (h, w) = (dims.height, dims.width);
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.lr_offline));
    let mut rows = Vec::with_capacity(cfg.epochs_offline);

    for epoch in 0..cfg.epochs_offline {
        let t0 = Instant::now();
        let order = shuffled_train_indices(ds, cfg.rng_seed, "offline-order", epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut sample_idx = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = defender.perception.bind(&mut tape);
            let mut step_logits: Vec<Tensor> = Vec::with_capacity(chunk.len() * cfg.horizon);
            let mut labels: Vec<usize> = Vec::with_capacity(chunk.len() * cfg.horizon);

            for &ei in chunk {
                let entry = &ds.entries[ei];
                let scene = ds.scene(entry.scene_id);
                let mut draw =
                    draw_sample(cfg, "offline-sample", epoch, sample_idx, cfg.usap_offline);
                sample_idx += 1;

                let mut state = entry.state;
                let mut belief = initial_belief(1, &dims);
                for t in 0..cfg.horizon {
                    let st = state_row(state);
                    let o = env::observe(&mut tape, scene, &st, draw.patch.as_ref(), h, w);
                    let flat = tape.reshape(&o, vec![1, o.len()]);
                    let (logits, b) =
                        perceive_batch_fused(&mut tape, &flat, &belief, &bound, defender.fusion, t);
                    step_logits.push(logits);
                    labels.push(scene.identity_label);
                    belief = b;
                    if t + 1 < cfg.horizon {
                        let a = env::Action::new(
                            draw.rng.gen_range(-cfg.a_max..=cfg.a_max),
                            draw.rng.gen_range(-cfg.a_max..=cfg.a_max),
                        );
                        state = env::transition(state, a, &cfg.bounds);
                    }
                }
            }

            let refs: Vec<&Tensor> = step_logits.iter().collect();
            let all = tape.concat_rows(&refs);
            let loss = tape.softmax_ce(&all, &labels);
            tape.backward(&loss);
            let grads = pull_grads(&tape, bound.tensors());
            apply_update(&mut opt, defender, &grads, None);
            loss_sum += loss.item();
            batches += 1;
        }

        let eval = Defender { movement: MovementRule::Random, ..defender.clone() };
        let row = EpochRow {
            epoch,
            phase: Phase::Offline,
            loss: loss_sum / batches.max(1) as f64,
            clean_acc: accuracy(ds, &eval, None, cfg.rng_seed),
            patched_acc: accuracy(
                ds,
                &eval,
                Some((cfg.patch_rows, cfg.patch_cols)),
                cfg.rng_seed,
            ),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        emit(&mut metrics, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Counters the online phase exposes so its update discipline is checkable
/// from outside.
#[derive(Clone, Debug)]
pub struct OnlineStats {
    pub rows: Vec<EpochRow>,
    /// Total optimizer applications; exactly horizon/2 per batch.
    pub optimizer_steps: usize,
    pub samples_seen: usize,
    pub samples_patched: usize,
}

impl OnlineStats {
    /// Fraction of training episodes that carried a surrogate patch.
    pub fn patched_fraction(&self) -> f64 {
        self.samples_patched as f64 / self.samples_seen.max(1) as f64
    }
}

/// Online phase: the two-step-unrolled update. Each episode starts at a
/// uniformly drawn camera state with a zero belief; every window of two
/// steps builds the minimal graph that contains the policy — the belief
/// entering the window is a constant, step one perceives and moves, step
/// two perceives from the moved state, and the cross-entropy at step two
/// updates perception and policy together. The trajectory then continues
/// from the values the window already computed, so parameters change only
/// at window boundaries: horizon/2 updates per batch.
pub fn train_online(
    ds: &Dataset,
    defender: &mut Defender,
    cfg: &TrainConfig,
    mut metrics: Option<&mut CsvFile>,
) -> Result<OnlineStats> {
    cfg.validate()?;
    let dims = defender.dims();
    let (hh, ww) = (dims.height, dims.width);
    let mut opt = Optimizer::new(OptimConfig::adam(cfg.lr_online));
    let mut stats =
        OnlineStats { rows: Vec::new(), optimizer_steps: 0, samples_seen: 0, samples_patched: 0 };

    for epoch in 0..cfg.epochs_online {
        let t0 = Instant::now();
        let order = shuffled_train_indices(ds, cfg.rng_seed, "online-order", epoch);
        let mut loss_sum = 0.0;
        let mut window_count = 0usize;
        let mut sample_idx = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            // Episode state carried across windows as plain values.
            let mut scenes = Vec::with_capacity(chunk.len());
            let mut labels_per_sample = Vec::with_capacity(chunk.len());
            let mut patches: Vec<Option<Tensor>> = Vec::with_capacity(chunk.len());
            let mut states: Vec<CameraState> = Vec::with_capacity(chunk.len());
            let mut beliefs: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());

            for &ei in chunk {
                let entry = &ds.entries[ei];
                let scene = ds.scene(entry.scene_id);
                let mut draw = draw_sample(cfg, "online-sample", epoch, sample_idx, true);
                sample_idx += 1;
                stats.samples_seen += 1;
                stats.samples_patched += usize::from(draw.patched);
                let s1 = CameraState::new(
                    draw.rng.gen_range(cfg.bounds.yaw_min..=cfg.bounds.yaw_max),
                    draw.rng.gen_range(cfg.bounds.pitch_min..=cfg.bounds.pitch_max),
                );
                scenes.push(scene);
                labels_per_sample.push(scene.identity_label);
                patches.push(draw.patch);
                states.push(s1);
                beliefs.push(initial_belief(1, &dims).data().to_vec());
            }

            for window in 0..cfg.horizon / 2 {
                let mut tape = Tape::new();
                let p = defender.perception.bind(&mut tape);
                let q = defender.policy.bind(&mut tape);
                let mut window_logits: Vec<Tensor> = Vec::with_capacity(chunk.len());
                let mut next_states = Vec::with_capacity(chunk.len());
                let mut next_beliefs = Vec::with_capacity(chunk.len());

                for i in 0..chunk.len() {
                    let t = window * 2;
                    let st = state_row(states[i]);
                    let b_prev = Tensor::from_vec(vec![1, dims.belief], beliefs[i].clone())
                        .expect("beliefs stay finite");
                    let o1 = env::observe(&mut tape, scenes[i], &st, patches[i].as_ref(), hh, ww);
                    let f1 = tape.reshape(&o1, vec![1, o1.len()]);
                    let (_, b1) =
                        perceive_batch_fused(&mut tape, &f1, &b_prev, &p, defender.fusion, t);
                    let a1 = act(&mut tape, &b1, &q);
                    let moved = env::transition_t(&mut tape, &st, &a1, &cfg.bounds);
                    let o2 =
                        env::observe(&mut tape, scenes[i], &moved, patches[i].as_ref(), hh, ww);
                    let f2 = tape.reshape(&o2, vec![1, o2.len()]);
                    let (logits2, b2) =
                        perceive_batch_fused(&mut tape, &f2, &b1, &p, defender.fusion, t + 1);
                    window_logits.push(logits2);

                    // Values for the next window, read out before the update
                    // so they reflect the parameters this window ran with.
                    let a2 = act(&mut tape, &b2, &q);
                    let moved_v = CameraState::new(moved.data()[0], moved.data()[1]);
                    let a2_v = env::Action::new(a2.data()[0], a2.data()[1]);
                    next_states.push(env::transition(moved_v, a2_v, &cfg.bounds));
                    next_beliefs.push(b2.data().to_vec());
                }

                let refs: Vec<&Tensor> = window_logits.iter().collect();
                let all = tape.concat_rows(&refs);
                let loss = tape.softmax_ce(&all, &labels_per_sample);
                tape.backward(&loss);
                let pg = pull_grads(&tape, p.tensors());
                let qg = pull_grads(&tape, q.tensors());
                apply_update(&mut opt, defender, &pg, Some(&qg));
                stats.optimizer_steps += 1;
                loss_sum += loss.item();
                window_count += 1;

                states = next_states;
                beliefs = next_beliefs;
            }
        }

        let row = EpochRow {
            epoch,
            phase: Phase::Online,
            loss: loss_sum / window_count.max(1) as f64,
            clean_acc: accuracy(ds, defender, None, cfg.rng_seed),
            patched_acc: accuracy(
                ds,
                defender,
                Some((cfg.patch_rows, cfg.patch_cols)),
                cfg.rng_seed,
            ),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        emit(&mut metrics, &row)?;
        stats.rows.push(row);
    }
    Ok(stats)
}

/// One ablation variant's scorecard.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub clean_acc: f64,
    /// Attack success rate under the viewpoint-averaged single-view attack.
    pub asr_eot: f64,
    /// Attack success rate under the random-trajectory adaptive attack.
    pub asr_usp: f64,
}

/// The four-variant comparison, all sharing one dataset split and seed.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub split_hash: String,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: [&str; 4] = ["variant", "clean_acc", "asr_eot", "asr_usp"];

pub fn write_ablation_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let mut csv = CsvFile::create(path, &ABLATION_HEADER)?;
    for r in &report.rows {
        csv.row(&[
            r.variant.clone(),
            io::fmt_f64(r.clean_acc),
            io::fmt_f64(r.asr_eot),
            io::fmt_f64(r.asr_usp),
        ])?;
    }
    csv.finish()
}

/// How each ablation variant is assembled from the two phases.
struct VariantSpec {
    name: &'static str,
    fusion: FusionKind,
    movement: MovementRule,
    usap_offline: bool,
    /// `None` skips the online phase; `Some(r)` runs it at that patch rate.
    online_r_patch: Option<f64>,
}

const VARIANTS: [VariantSpec; 4] = [
    // Feature averaging with random movement: no recurrence, no policy.
    VariantSpec {
        name: "random_movement",
        fusion: FusionKind::MeanPool,
        movement: MovementRule::Random,
        usap_offline: false,
        online_r_patch: None,
    },
    // Recurrent fusion, still moving at random.
    VariantSpec {
        name: "perception",
        fusion: FusionKind::Gated,
        movement: MovementRule::Random,
        usap_offline: false,
        online_r_patch: None,
    },
    // Learned movement, trained on clean observations only.
    VariantSpec {
        name: "policy",
        fusion: FusionKind::Gated,
        movement: MovementRule::Learned,
        usap_offline: false,
        online_r_patch: Some(0.0),
    },
    // The full recipe: learned movement plus surrogate patches.
    VariantSpec {
        name: "usap",
        fusion: FusionKind::Gated,
        movement: MovementRule::Learned,
        usap_offline: true,
        online_r_patch: Some(-1.0), // sentinel: use cfg.r_patch
    },
];

/// Train the four ablation variants from one seed and dataset, then score
/// each on clean accuracy and on attack success under the two transfer
/// attacks. `dims` sets the model size; `attack` supplies the budget (its
/// kind field is overridden per column); `jobs` caps attack parallelism.
pub fn ablation_suite(
    ds: &Dataset,
    dims: crate::models::ModelDims,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    jobs: usize,
) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for spec in &VARIANTS {
        let mut def = Defender::new(dims, cfg.rng_seed, cfg.a_max, cfg.horizon, cfg.bounds);
        def.fusion = spec.fusion;
        def.movement = spec.movement;

        let mut vcfg = cfg.clone();
        vcfg.usap_offline = spec.usap_offline;
        train_offline(ds, &mut def, &vcfg, None)?;
        if let Some(r) = spec.online_r_patch {
            vcfg.r_patch = if r < 0.0 { cfg.r_patch } else { r };
            train_online(ds, &mut def, &vcfg, None)?;
        }

        let mut asr = [0.0f64; 2];
        for (slot, kind) in [AttackKind::Eot, AttackKind::UspAdaptive].into_iter().enumerate() {
            let mut acfg = attack.clone();
            acfg.kind = kind;
            let set = attacks::attack_dataset(ds, &def, &acfg, jobs)?;
            asr[slot] = attacks::evaluate_asr(&set, ds, &def, acfg.rng_seed)?.asr;
        }
        rows.push(AblationRow {
            variant: spec.name.to_string(),
            clean_acc: accuracy(ds, &def, None, cfg.rng_seed),
            asr_eot: asr[0],
            asr_usp: asr[1],
        });
    }
    Ok(AblationReport { split_hash: ds.split_hash(), rows })
}
