//! The simulation environment: a textured plane at the origin observed by a
//! camera orbiting on a fixed-radius sphere, always aimed at the origin.
//!
//! The camera state is (yaw, pitch); dynamics are the deterministic clamped
//! sum `s' = clamp(s + a)`. Rendering ray-casts each pixel onto the plane
//! and bilinearly samples the scene texture, so images are differentiable
//! both w.r.t. the camera state (through the sampling coordinates) and
//! w.r.t. any texture placed on the plane — which is exactly what the patch
//! attacks and the unrolled training graph need. A patch occupies an
//! axis-aligned anchor sub-rectangle of the plane and is composited by the
//! same mechanism.
//!
//! Everything here is pure: same inputs, bit-identical outputs.

use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Camera pose on the viewing sphere, in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraState {
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraState {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        CameraState { yaw, pitch }
    }
}

/// Per-step rotation command, in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub d_yaw: f64,
    pub d_pitch: f64,
}

impl Action {
    pub fn new(d_yaw: f64, d_pitch: f64) -> Self {
        Action { d_yaw, d_pitch }
    }

    pub fn norm(&self) -> f64 {
        (self.d_yaw * self.d_yaw + self.d_pitch * self.d_pitch).sqrt()
    }
}

/// Feasible box for camera states.
#[derive(Clone, Copy, Debug)]
pub struct StateBounds {
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub pitch_min: f64,
    pub pitch_max: f64,
}

impl Default for StateBounds {
    fn default() -> Self {
        StateBounds { yaw_min: -0.35, yaw_max: 0.35, pitch_min: -0.25, pitch_max: 0.25 }
    }
}

impl StateBounds {
    pub fn clamp(&self, s: CameraState) -> CameraState {
        CameraState {
            yaw: s.yaw.clamp(self.yaw_min, self.yaw_max),
            pitch: s.pitch.clamp(self.pitch_min, self.pitch_max),
        }
    }

    pub fn contains(&self, s: CameraState) -> bool {
        s.yaw >= self.yaw_min
            && s.yaw <= self.yaw_max
            && s.pitch >= self.pitch_min
            && s.pitch <= self.pitch_max
    }

    /// Column bounds in (yaw, pitch) order for tensor-space clamping.
    pub fn as_cols(&self) -> [(f64, f64); 2] {
        [(self.yaw_min, self.yaw_max), (self.pitch_min, self.pitch_max)]
    }
}

/// Pinhole intrinsics at a reference resolution. Rendering at another
/// resolution scales fx/cx by W/width and fy/cy by H/height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        // 32×32 image; the 2×2 plane seen frontally from radius 4 spans the
        // frustum almost exactly (atan(1/4) half-angle).
        Intrinsics { fx: 64.0, fy: 64.0, cx: 16.0, cy: 16.0, width: 32, height: 32 }
    }
}

impl Intrinsics {
    /// Intrinsics with the default field of view at a different reference
    /// resolution: focal length 2·extent, principal point at the center.
    pub fn for_size(height: usize, width: usize) -> Self {
        Intrinsics {
            fx: 2.0 * width as f64,
            fy: 2.0 * height as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    fn scaled(&self, h: usize, w: usize) -> (f64, f64, f64, f64) {
        let sx = w as f64 / self.width as f64;
        let sy = h as f64 / self.height as f64;
        (self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)
    }

    pub fn as_matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// One identity's scene: the textured plane, the patch anchor, and the
/// camera sphere. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: usize,
    pub identity_label: usize,
    /// `[T×T×3]` texels in [0,1]; row 0 is the top of the plane (+y).
    pub base_texture: Tensor,
    /// TL, TR, BR, BL in world coordinates (z = 0 plane).
    pub plane_corners_world: [[f64; 3]; 4],
    /// TL, TR, BR, BL of the patch anchor, inside the plane.
    pub patch_anchor_world: [[f64; 3]; 4],
    pub camera_radius: f64,
    pub intrinsics: Intrinsics,
    plane_half: f64,
    anchor_half: f64,
}

fn square_corners(half: f64) -> [[f64; 3]; 4] {
    [
        [-half, half, 0.0],
        [half, half, 0.0],
        [half, -half, 0.0],
        [-half, -half, 0.0],
    ]
}

impl Scene {
    /// Build and validate a scene. The visibility scan asserts the patch
    /// anchor stays at least partially visible from every state in `bounds`
    /// on a 50×50 grid — the defender must never be able to rotate the
    /// patch out of view.
    pub fn new(
        id: usize,
        identity_label: usize,
        base_texture: Tensor,
        plane_half: f64,
        anchor_half: f64,
        camera_radius: f64,
        intrinsics: Intrinsics,
        bounds: &StateBounds,
    ) -> Result<Scene> {
        match base_texture.shape() {
            [t0, t1, 3] if t0 == t1 => {}
            s => {
                return Err(Error::runtime(format!("scene texture must be square [T,T,3], got {s:?}")))
            }
        }
        if !base_texture.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::runtime("scene texture values must lie in [0,1]"));
        }
        if !(anchor_half >= 0.0 && anchor_half <= plane_half) {
            return Err(Error::runtime(format!(
                "patch anchor (half-extent {anchor_half}) must lie within the plane (half-extent {plane_half})"
            )));
        }
        let scene = Scene {
            id,
            identity_label,
            base_texture,
            plane_corners_world: square_corners(plane_half),
            patch_anchor_world: square_corners(anchor_half),
            camera_radius,
            intrinsics,
            plane_half,
            anchor_half,
        };
        scene.visibility_scan(bounds)?;
        Ok(scene)
    }

    pub fn plane_half(&self) -> f64 {
        self.plane_half
    }

    pub fn anchor_half(&self) -> f64 {
        self.anchor_half
    }

    /// Check that the anchor center or a corner projects inside the image
    /// from every state on a 50×50 grid over the feasible box.
    fn visibility_scan(&self, bounds: &StateBounds) -> Result<()> {
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        let mut probes = vec![[0.0, 0.0, 0.0]];
        probes.extend_from_slice(&self.patch_anchor_world);
        for iy in 0..50 {
            for ip in 0..50 {
                let s = CameraState {
                    yaw: bounds.yaw_min
                        + (bounds.yaw_max - bounds.yaw_min) * iy as f64 / 49.0,
                    pitch: bounds.pitch_min
                        + (bounds.pitch_max - bounds.pitch_min) * ip as f64 / 49.0,
                };
                let visible = probes.iter().any(|p| {
                    match project_point(s, self.camera_radius, &self.intrinsics, h, w, *p) {
                        Some((uc, vc)) => {
                            uc >= 0.0 && uc <= w as f64 && vc >= 0.0 && vc <= h as f64
                        }
                        None => false,
                    }
                });
                if !visible {
                    return Err(Error::runtime(format!(
                        "patch anchor invisible from state (yaw {:.3}, pitch {:.3}); scene rejected",
                        s.yaw, s.pitch
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Adversarial patch texels, `[Hp×Wp×3]` in [0,1].
#[derive(Clone, Debug)]
pub struct Patch {
    pub texels: Tensor,
}

impl Patch {
    pub fn new(texels: Tensor) -> Result<Patch> {
        match texels.shape() {
            [_, _, 3] => {}
            s => return Err(Error::runtime(format!("patch must be [Hp,Wp,3], got {s:?}"))),
        }
        if !texels.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::runtime("patch texels must lie in [0,1]"));
        }
        Ok(Patch { texels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.texels.shape()[0], self.texels.shape()[1])
    }
}

/// s' = s + a, clamped to the feasible box. Deterministic.
pub fn transition(s: CameraState, a: Action, bounds: &StateBounds) -> CameraState {
    bounds.clamp(CameraState { yaw: s.yaw + a.d_yaw, pitch: s.pitch + a.d_pitch })
}

/// Tape-space transition on `[B×2]` state/action rows; differentiable with
/// the clamp's pass-through/zero subgradient.
pub fn transition_t(tape: &mut Tape, states: &Tensor, actions: &Tensor, bounds: &StateBounds) -> Tensor {
    let summed = tape.add(states, actions);
    tape.clamp_cols(&summed, &bounds.as_cols())
}

/// Rotation R = R^y(yaw)·R^x(pitch), written out.
fn rotation(s: CameraState) -> [[f64; 3]; 3] {
    let (sh, ch) = s.yaw.sin_cos();
    let (sv, cv) = s.pitch.sin_cos();
    [
        [ch, sh * sv, sh * cv],
        [0.0, cv, -sv],
        [-sh, ch * sv, ch * cv],
    ]
}

/// World→camera rigid transform: camera on the sphere of `radius`, aimed at
/// the origin. Rotation block R^y·R^x, translation (0,0,−radius).
pub fn extrinsic_from_state(s: CameraState, radius: f64) -> [[f64; 4]; 4] {
    let r = rotation(s);
    [
        [r[0][0], r[0][1], r[0][2], 0.0],
        [r[1][0], r[1][1], r[1][2], 0.0],
        [r[2][0], r[2][1], r[2][2], -radius],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Camera center in world coordinates (the point that maps to the camera
/// origin under the extrinsic).
pub fn camera_center(s: CameraState, radius: f64) -> [f64; 3] {
    let r = rotation(s);
    // C = Rᵀ·(0,0,radius)
    [r[2][0] * radius, r[2][1] * radius, r[2][2] * radius]
}

/// Project a world point to continuous pixel coordinates (uc, vc), where
/// pixel (i, j) has center (vc, uc) = (i+0.5, j+0.5). Returns None when the
/// point is not strictly in front of the camera.
pub fn project_point(
    s: CameraState,
    radius: f64,
    intr: &Intrinsics,
    h: usize,
    w: usize,
    point: [f64; 3],
) -> Option<(f64, f64)> {
    let e = extrinsic_from_state(s, radius);
    let cam: Vec<f64> = (0..3)
        .map(|i| e[i][0] * point[0] + e[i][1] * point[1] + e[i][2] * point[2] + e[i][3])
        .collect();
    let depth = -cam[2]; // camera looks along −z
    if depth <= 1e-9 {
        return None;
    }
    let (fx, fy, cx, cy) = intr.scaled(h, w);
    let uc = fx * cam[0] / depth + cx;
    let vc = -fy * cam[1] / depth + cy;
    Some((uc, vc))
}

/// Cast the ray of continuous pixel (uc, vc) onto the z=0 plane; returns the
/// plane intersection (x, y) and the ray parameter. Plain-math mirror of the
/// differentiable grid construction, used by oracles and tests.
pub fn pixel_to_plane(
    s: CameraState,
    radius: f64,
    intr: &Intrinsics,
    h: usize,
    w: usize,
    uc: f64,
    vc: f64,
) -> (f64, f64, f64) {
    let (fx, fy, cx, cy) = intr.scaled(h, w);
    let dx = (uc - cx) / fx;
    let dy = -(vc - cy) / fy;
    let (sh, ch) = s.yaw.sin_cos();
    let (sv, cv) = s.pitch.sin_cos();
    // world ray direction Rᵀ·(dx, dy, −1) and camera center Rᵀ·(0,0,radius)
    let wx = ch * dx + sh;
    let wy = sh * sv * dx + cv * dy - ch * sv;
    let wz = sh * cv * dx - sv * dy - ch * cv;
    let czn = -(ch * cv * radius);
    let t = czn / wz;
    let x = (-sh * radius) + t * wx;
    let y = (ch * sv * radius) + t * wy;
    (x, y, t)
}

/// Per-pixel plane-intersection grids, on the tape when `state` is.
/// Returns (x, y) as `[h×w]` tensors plus their forward data.
fn plane_grids(
    tape: &mut Tape,
    scene: &Scene,
    state: &Tensor,
    h: usize,
    w: usize,
) -> (Tensor, Tensor) {
    assert_eq!(state.len(), 2, "render state must be a length-2 (yaw, pitch) tensor");
    let (fx, fy, cx, cy) = scene.intrinsics.scaled(h, w);
    let r = scene.camera_radius;

    // constant per-pixel ray directions in camera space
    let mut dx = Vec::with_capacity(h * w);
    let mut dy = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let uc = j as f64 + 0.5;
            let vc = i as f64 + 0.5;
            dx.push((uc - cx) / fx);
            dy.push(-(vc - cy) / fy);
        }
    }
    let dxg = Tensor::constant(vec![h, w], dx);
    let dyg = Tensor::constant(vec![h, w], dy);

    let srow = tape.reshape(state, vec![1, 2]);
    let yaw = tape.slice_cols(&srow, 0, 1);
    let pitch = tape.slice_cols(&srow, 1, 1);
    let sh = tape.sin(&yaw);
    let ch = tape.cos(&yaw);
    let sv = tape.sin(&pitch);
    let cv = tape.cos(&pitch);
    let shsv = tape.mul(&sh, &sv);
    let shcv = tape.mul(&sh, &cv);
    let chsv = tape.mul(&ch, &sv);
    let chcv = tape.mul(&ch, &cv);

    // world ray direction w = Rᵀ·(dx, dy, −1), componentwise over the grid
    let t1 = tape.mul(&dxg, &ch);
    let wx = tape.add(&t1, &sh);
    let t2 = tape.mul(&dxg, &shsv);
    let t3 = tape.mul(&dyg, &cv);
    let t4 = tape.add(&t2, &t3);
    let wy = tape.sub(&t4, &chsv);
    let t5 = tape.mul(&dxg, &shcv);
    let t6 = tape.mul(&dyg, &sv);
    let t7 = tape.sub(&t5, &t6);
    let wz = tape.sub(&t7, &chcv);

    // guard: ray must actually hit the plane in front of the camera
    let wz_max = wz.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        wz_max < -1e-6,
        "render: view degenerate (plane edge-on or behind camera), max ray z {wz_max}"
    );

    // ray parameter to z=0: t* = −C_z / wz, camera center C = Rᵀ·(0,0,r)
    let czn = tape.mul_scalar(&chcv, -r);
    let tstar = tape.div(&czn, &wz);
    let cxw = tape.mul_scalar(&sh, -r);
    let cyw = tape.mul_scalar(&chsv, r);
    let xs = tape.mul(&tstar, &wx);
    let x = tape.add(&xs, &cxw);
    let ys = tape.mul(&tstar, &wy);
    let y = tape.add(&ys, &cyw);
    (x, y)
}

/// 0/1 mask `[h×w×3]` marking pixels whose plane hit lies inside the square
/// `|x| ≤ half ∧ |y| ≤ half` (boundary inclusive).
fn inside_mask3(x: &Tensor, y: &Tensor, half: f64, h: usize, w: usize) -> Tensor {
    let mut m = Vec::with_capacity(h * w * 3);
    for (&xv, &yv) in x.data().iter().zip(y.data()) {
        let inside = xv.abs() <= half && yv.abs() <= half;
        let v = if inside { 1.0 } else { 0.0 };
        m.extend_from_slice(&[v, v, v]);
    }
    Tensor::constant(vec![h, w, 3], m)
}

/// Sample a square texture of side `t` at the plane hits, mapping the square
/// `[-half, half]²` onto the full texel grid (+y at row 0).
fn sample_plane_texture(
    tape: &mut Tape,
    texture: &Tensor,
    x: &Tensor,
    y: &Tensor,
    half: f64,
    rows: usize,
    cols: usize,
) -> Tensor {
    // texel center c has col = (x+half)/(2·half)·cols − 0.5
    let col_scale = cols as f64 / (2.0 * half);
    let row_scale = rows as f64 / (2.0 * half);
    let xc = tape.mul_scalar(x, col_scale);
    let col = tape.add_scalar(&xc, cols as f64 / 2.0 - 0.5);
    let yc = tape.mul_scalar(y, -row_scale);
    let row = tape.add_scalar(&yc, rows as f64 / 2.0 - 0.5);
    let coords = tape.stack_last(&row, &col);
    tape.bilinear_sample(texture, &coords)
}

fn render_inner(
    tape: &mut Tape,
    scene: &Scene,
    state: &Tensor,
    patch: Option<&Tensor>,
    h: usize,
    w: usize,
) -> Tensor {
    let (x, y) = plane_grids(tape, scene, state, h, w);
    let tex_side = scene.base_texture.shape()[0];
    let base = sample_plane_texture(
        tape,
        &scene.base_texture,
        &x,
        &y,
        scene.plane_half,
        tex_side,
        tex_side,
    );
    let plane_mask = inside_mask3(&x, &y, scene.plane_half, h, w);
    let bg = Tensor::constant(vec![h, w, 3], vec![0.5; h * w * 3]);
    let img = tape.mask_mix(&plane_mask, &base, &bg);
    match patch {
        None => img,
        Some(p) => composite_patch(tape, &img, p, scene, &x, &y, h, w),
    }
}

fn composite_patch(
    tape: &mut Tape,
    img: &Tensor,
    patch: &Tensor,
    scene: &Scene,
    x: &Tensor,
    y: &Tensor,
    h: usize,
    w: usize,
) -> Tensor {
    let [ph, pw, _] = match patch.shape() {
        [a, b, c] if *c == 3 => [*a, *b, *c],
        s => panic!("patch must be [Hp,Wp,3], got {s:?}"),
    };
    let a = scene.anchor_half;
    if a == 0.0 {
        // zero-area anchor: empty footprint, output identical to the input
        return img.clone();
    }
    // anchor must sit in front of the camera for every covered pixel; the
    // plane-grid guard already rejects rays past the horizon, so reaching
    // here with a visible anchor is always well-posed
    let pcol_scale = pw as f64 / (2.0 * a);
    let prow_scale = ph as f64 / (2.0 * a);
    let xc = tape.mul_scalar(x, pcol_scale);
    let pcol = tape.add_scalar(&xc, pw as f64 / 2.0 - 0.5);
    let yc = tape.mul_scalar(y, -prow_scale);
    let prow = tape.add_scalar(&yc, ph as f64 / 2.0 - 0.5);
    let pcoords = tape.stack_last(&prow, &pcol);
    let sampled = tape.bilinear_sample(patch, &pcoords);
    let amask = inside_mask3(x, y, a, h, w);
    tape.mask_mix(&amask, &sampled, img)
}

/// Render the scene from a camera state given as a length-2 tensor
/// (yaw, pitch) — put the state on the tape to differentiate through the
/// view. Background pixels are constant 0.5.
pub fn render(tape: &mut Tape, scene: &Scene, state: &Tensor, h: usize, w: usize) -> Tensor {
    render_inner(tape, scene, state, None, h, w)
}

/// Composite a patch onto an already-rendered observation `o` of the same
/// scene and state. Pixels outside the anchor's projected quad pass through
/// `o` untouched (bit-exact).
pub fn apply_patch(
    tape: &mut Tape,
    o: &Tensor,
    patch: &Tensor,
    scene: &Scene,
    state: &Tensor,
) -> Tensor {
    let (h, w) = match o.shape() {
        [h, w, 3] => (*h, *w),
        s => panic!("apply_patch: observation must be [H,W,3], got {s:?}"),
    };
    let (x, y) = plane_grids(tape, scene, state, h, w);
    composite_patch(tape, o, patch, scene, &x, &y, h, w)
}

/// Render with an optional patch: `observe(scene, s, None) == render`.
/// Computes the projection grids once for both the base image and the patch.
pub fn observe(
    tape: &mut Tape,
    scene: &Scene,
    state: &Tensor,
    patch: Option<&Tensor>,
    h: usize,
    w: usize,
) -> Tensor {
    render_inner(tape, scene, state, patch, h, w)
}

/// Convenience: a constant (off-tape) state tensor.
pub fn state_tensor(s: CameraState) -> Tensor {
    Tensor::constant(vec![2], vec![s.yaw, s.pitch])
}
