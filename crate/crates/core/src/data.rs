//! Procedural identity dataset: one textured scene per identity class plus a
//! manifest of start states split into train/eval views.
//!
//! Texture recipe: a smooth Gaussian color field shared by all identities
//! (carries no class information) overlaid with an identity-specific cell
//! pattern drawn from a shared saturated palette. The pattern covers the
//! whole plane, anchor region included, so a patch overwrites its share of
//! the identity evidence — the situation a physical sticker on a face
//! creates — and classifiers that lean on the anchor region are exposed to
//! it while patch-trained ones learn to discount it.

use std::path::Path;

use rand::Rng;

use crate::env::{CameraState, Intrinsics, Scene, StateBounds};
use crate::io::{self, KvMap};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Dataset shape and geometry. Defaults produce the 8-identity, 8-view
/// reference corpus.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub classes: usize,
    pub views_per_scene: usize,
    /// Of the views per scene, how many are held out for evaluation.
    pub eval_views: usize,
    pub texture_size: usize,
    pub plane_half: f64,
    pub anchor_half: f64,
    pub camera_radius: f64,
    pub bounds: StateBounds,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 8,
            views_per_scene: 8,
            eval_views: 2,
            texture_size: 64,
            plane_half: 1.0,
            // ≈8% of the frontal image: the anchor projects to a box of
            // (32·anchor_half)² pixels in the 32×32 view
            anchor_half: 0.28,
            camera_radius: 4.0,
            bounds: StateBounds::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("classes must be positive"));
        }
        if self.views_per_scene == 0 {
            return Err(Error::config("views_per_scene must be positive"));
        }
        if self.eval_views >= self.views_per_scene {
            return Err(Error::config(format!(
                "eval_views {} must leave at least one training view of {}",
                self.eval_views, self.views_per_scene
            )));
        }
        if self.anchor_half <= 0.0 || self.anchor_half >= self.plane_half {
            return Err(Error::config("anchor must be a proper sub-square of the plane"));
        }
        Ok(())
    }
}

/// Train/eval membership of one (scene, start-state) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One entry of the view manifest.
#[derive(Clone, Copy, Debug)]
pub struct ViewEntry {
    pub scene_id: usize,
    pub state: CameraState,
    pub split: Split,
}

/// Scenes plus the view manifest.
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub entries: Vec<ViewEntry>,
}

impl Dataset {
    pub fn train_entries(&self) -> impl Iterator<Item = &ViewEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn eval_entries(&self) -> impl Iterator<Item = &ViewEntry> {
        self.entries.iter().filter(|e| e.split == Split::Eval)
    }

    pub fn scene(&self, id: usize) -> &Scene {
        &self.scenes[id]
    }

    /// Hash of the rendered split manifest — equal hashes guarantee two
    /// runs saw the same scenes, states, and split assignment.
    pub fn split_hash(&self) -> String {
        io::sha256_hex(self.split_manifest().as_bytes())
    }

    /// The split manifest as CSV text (also what gets written to disk).
    pub fn split_manifest(&self) -> String {
        let mut s = format!(
            "# schema_version = {}\nscene_id,yaw,pitch,split\n",
            io::CSV_SCHEMA_VERSION
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.scene_id,
                io::fmt_f64(e.state.yaw),
                io::fmt_f64(e.state.pitch),
                e.split.as_str()
            ));
        }
        s
    }
}

// Texture composition constants. Cell size trades single-view legibility
// against view dependence; the palette is shared across identities so class
// evidence is the spatial arrangement, not a global hue.
const FIELD_KNOTS: usize = 9;
const CELL_TEXELS: usize = 4;
const PATTERN_WEIGHT: f64 = 0.75;

/// Smooth shared color field: coarse random knots, bilinearly upsampled.
fn gaussian_field(size: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "texture-field", &[]);
    let k = FIELD_KNOTS;
    let knots: Vec<f64> = (0..k * k * 3).map(|_| r.gen_range(0.25..0.75)).collect();
    let mut out = vec![0.0; size * size * 3];
    let scale = (k - 1) as f64 / size as f64;
    for row in 0..size {
        for col in 0..size {
            let fr = (row as f64 + 0.5) * scale - 0.5;
            let fc = (col as f64 + 0.5) * scale - 0.5;
            let r0 = fr.floor().clamp(0.0, (k - 2) as f64);
            let c0 = fc.floor().clamp(0.0, (k - 2) as f64);
            let dr = (fr - r0).clamp(0.0, 1.0);
            let dc = (fc - c0).clamp(0.0, 1.0);
            let (r0, c0) = (r0 as usize, c0 as usize);
            for ch in 0..3 {
                let v00 = knots[(r0 * k + c0) * 3 + ch];
                let v01 = knots[(r0 * k + c0 + 1) * 3 + ch];
                let v10 = knots[((r0 + 1) * k + c0) * 3 + ch];
                let v11 = knots[((r0 + 1) * k + c0 + 1) * 3 + ch];
                let top = v00 + dc * (v01 - v00);
                let bot = v10 + dc * (v11 - v10);
                out[(row * size + col) * 3 + ch] = top + dr * (bot - top);
            }
        }
    }
    out
}

/// The eight saturated palette colors (corners of the RGB cube pulled
/// slightly inward).
fn palette(index: usize) -> [f64; 3] {
    let bit = |b: usize| if index >> b & 1 == 1 { 0.9 } else { 0.1 };
    [bit(2), bit(1), bit(0)]
}

/// Full texture for one identity.
fn identity_texture(identity: usize, cfg: &DatasetConfig) -> Tensor {
    let size = cfg.texture_size;
    let field = gaussian_field(size, cfg.seed);
    let cells = size.div_ceil(CELL_TEXELS);
    let mut r = rng::stream(cfg.seed, "texture-pattern", &[identity as u64]);
    let cell_colors: Vec<[f64; 3]> =
        (0..cells * cells).map(|_| palette(r.gen_range(0..8))).collect();

    let mut data = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let base = &field[(row * size + col) * 3..(row * size + col) * 3 + 3];
            let cell = (row / CELL_TEXELS) * cells + col / CELL_TEXELS;
            let color = cell_colors[cell];
            for ch in 0..3 {
                let v = PATTERN_WEIGHT * color[ch] + (1.0 - PATTERN_WEIGHT) * base[ch];
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(vec![size, size, 3], data).expect("texture construction is in-range")
}

/// Generate the full dataset: `classes` scenes and a per-scene view list
/// with the last `eval_views` states held out.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.classes);
    for identity in 0..cfg.classes {
        let texture = identity_texture(identity, cfg);
        let scene = Scene::new(
            identity,
            identity,
            texture,
            cfg.plane_half,
            cfg.anchor_half,
            cfg.camera_radius,
            Intrinsics::default(),
            &cfg.bounds,
        )?;
        scenes.push(scene);
    }
    let mut entries = Vec::with_capacity(cfg.classes * cfg.views_per_scene);
    for scene_id in 0..cfg.classes {
        let mut r = rng::stream(cfg.seed, "views", &[scene_id as u64]);
        for v in 0..cfg.views_per_scene {
            let state = CameraState::new(
                r.gen_range(cfg.bounds.yaw_min..cfg.bounds.yaw_max),
                r.gen_range(cfg.bounds.pitch_min..cfg.bounds.pitch_max),
            );
            let split = if v >= cfg.views_per_scene - cfg.eval_views {
                Split::Eval
            } else {
                Split::Train
            };
            entries.push(ViewEntry { scene_id, state, split });
        }
    }
    Ok(Dataset { scenes, entries })
}

// ---- persistence ----------------------------------------------------------

fn scene_texture_name(id: usize) -> String {
    format!("scene_{id:02}.eadscn")
}

fn scene_manifest_name(id: usize) -> String {
    format!("scene_{id:02}.kv")
}

/// Write every scene (texture + manifest), the split CSV, and the split
/// hash file into `dir`, creating the directory if needed.
pub fn save(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for scene in &ds.scenes {
        io::write_tensor_file(
            &dir.join(scene_texture_name(scene.id)),
            io::SCENE_MAGIC,
            &scene.base_texture,
        )?;
        let mut kv = KvMap::new();
        kv.set("identity_label", scene.identity_label);
        kv.set("plane_half", io::fmt_f64(scene.plane_half()));
        kv.set("anchor_half", io::fmt_f64(scene.anchor_half()));
        kv.set("camera_radius", io::fmt_f64(scene.camera_radius));
        kv.set("fx", io::fmt_f64(scene.intrinsics.fx));
        kv.set("fy", io::fmt_f64(scene.intrinsics.fy));
        kv.set("cx", io::fmt_f64(scene.intrinsics.cx));
        kv.set("cy", io::fmt_f64(scene.intrinsics.cy));
        kv.set("image_width", scene.intrinsics.width);
        kv.set("image_height", scene.intrinsics.height);
        kv.write(&dir.join(scene_manifest_name(scene.id)))?;
    }
    let manifest = ds.split_manifest();
    io::write_atomic(&dir.join("split.csv"), manifest.as_bytes())?;
    io::write_atomic(
        &dir.join("split.sha256"),
        format!("{}\n", io::sha256_hex(manifest.as_bytes())).as_bytes(),
    )?;
    Ok(())
}

/// Load a dataset saved by [`save`]. Scenes are revalidated (including the
/// anchor visibility scan) on the way in.
pub fn load(dir: &Path, bounds: &StateBounds) -> Result<Dataset> {
    let split_path = dir.join("split.csv");
    let (header, rows) = io::read_csv(&split_path)?;
    if header != ["scene_id", "yaw", "pitch", "split"] {
        return Err(Error::format(&split_path, format!("unexpected columns {header:?}")));
    }
    let mut entries = Vec::with_capacity(rows.len());
    let mut max_scene = 0usize;
    for row in rows {
        let scene_id: usize = row[0]
            .parse()
            .map_err(|_| Error::format(&split_path, format!("bad scene_id {:?}", row[0])))?;
        let yaw: f64 = row[1]
            .parse()
            .map_err(|_| Error::format(&split_path, format!("bad yaw {:?}", row[1])))?;
        let pitch: f64 = row[2]
            .parse()
            .map_err(|_| Error::format(&split_path, format!("bad pitch {:?}", row[2])))?;
        let split = match row[3].as_str() {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => {
                return Err(Error::format(&split_path, format!("bad split tag {other:?}")))
            }
        };
        max_scene = max_scene.max(scene_id);
        entries.push(ViewEntry { scene_id, state: CameraState::new(yaw, pitch), split });
    }
    if entries.is_empty() {
        return Err(Error::format(&split_path, "empty split manifest"));
    }

    let mut scenes = Vec::with_capacity(max_scene + 1);
    for id in 0..=max_scene {
        let texture = io::read_tensor_file(&dir.join(scene_texture_name(id)), io::SCENE_MAGIC)?;
        let kv_path = dir.join(scene_manifest_name(id));
        let kv = KvMap::read(&kv_path)?;
        kv.reject_unknown(&[
            "identity_label",
            "plane_half",
            "anchor_half",
            "camera_radius",
            "fx",
            "fy",
            "cx",
            "cy",
            "image_width",
            "image_height",
        ])?;
        let need = |key: &str| -> Result<f64> {
            kv.parse_field::<f64>(key)?
                .ok_or_else(|| Error::format(&kv_path, format!("missing key {key}")))
        };
        let need_usize = |key: &str| -> Result<usize> {
            kv.parse_field::<usize>(key)?
                .ok_or_else(|| Error::format(&kv_path, format!("missing key {key}")))
        };
        let intrinsics = Intrinsics {
            fx: need("fx")?,
            fy: need("fy")?,
            cx: need("cx")?,
            cy: need("cy")?,
            width: need_usize("image_width")?,
            height: need_usize("image_height")?,
        };
        let scene = Scene::new(
            id,
            need_usize("identity_label")?,
            texture,
            need("plane_half")?,
            need("anchor_half")?,
            need("camera_radius")?,
            intrinsics,
            bounds,
        )?;
        scenes.push(scene);
    }
    Ok(Dataset { scenes, entries })
}
