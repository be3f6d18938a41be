//! Synthetic three-frame scenes with exact depth, pose, flow and occlusion
//! ground truth.
//!
//! The world frame is the target camera. Static surfaces are textured planes;
//! moving objects are fronto-parallel textured rectangles translating with a
//! constant 3D velocity. The camera moves with a constant twist: the target to
//! next-frame transform is `exp(xi)` and the target to previous-frame transform
//! is `exp(-xi)`.
//!
//! Bilinear resampling of a smooth texture is not exact, so with
//! `consistent = true` the three analytic renderings are projected onto the
//! closest images (in the least-squares sense) for which warping each source
//! by the ground-truth flow reproduces the target exactly on every visible,
//! in-view pixel. The projection is solved per channel with conjugate
//! gradients.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{fundamental_matrix, reproject, se3_exp, Intrinsics, Pose, Twist};
use crate::crossloss::LossKind;
use crate::error::{Error, Result};
use crate::grid::{DepthMap, FlowField, ImageGrid, ScalarMap};
use crate::io;
use crate::loss::{LossState, SourceView, NEXT, PREV};
use crate::sampler::bilinear_stencil;

/// Frame offsets of the previous and next source frames.
pub const FRAME_OFFSETS: [f64; 2] = [-1.0, 1.0];

/// Sample location used when a point has no image in a view (behind the camera).
pub const OFF_GRID: f64 = -1.0e4;

fn default_components() -> usize {
    4
}

fn yes() -> bool {
    true
}

/// Band-limited procedural texture: a seeded sum of sinusoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub seed: u64,
    /// Base spatial frequency in cycles per scene unit; each component draws
    /// its own frequency in `[0.5, 1.5]` times this.
    pub frequency: f64,
    #[serde(default = "default_components")]
    pub components: usize,
}

#[derive(Debug, Clone)]
struct Wave {
    dir: [f64; 2],
    freq: f64,
    amp: f64,
    phase: [f64; 3],
}

/// Evaluated texture; values lie in `[0.1, 0.9]`.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    pub fn new(spec: &TextureSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.components.max(1);
        let amp = 0.4 / n as f64;
        let waves = (0..n)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let scale: f64 = rng.random_range(0.5..1.5);
                let mut phase = [0.0; 3];
                for p in phase.iter_mut() {
                    *p = rng.random_range(0.0..TAU);
                }
                Wave {
                    dir: [theta.cos(), theta.sin()],
                    freq: spec.frequency * scale,
                    amp,
                    phase,
                }
            })
            .collect();
        Texture { waves }
    }

    pub fn value(&self, u: f64, v: f64, channel: usize) -> f64 {
        0.5 + self
            .waves
            .iter()
            .map(|w| w.amp * (TAU * w.freq * (u * w.dir[0] + v * w.dir[1]) + w.phase[channel]).sin())
            .sum::<f64>()
    }
}

/// Static plane `normal . X = distance` in target-camera coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub distance: f64,
    pub texture: TextureSpec,
}

/// Fronto-parallel rectangle moving by `velocity` per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    /// Center at the target frame, target-camera coordinates.
    pub center: [f64; 3],
    pub half_size: [f64; 2],
    pub velocity: [f64; 3],
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Everything needed to render a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Defaults to `fx = fy = 0.8 width` and a centered principal point.
    #[serde(default)]
    pub intrinsics: Option<IntrinsicsSpec>,
    /// Camera twist `(omega, nu)` from the target to the next frame.
    #[serde(default)]
    pub motion: [f64; 6],
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    /// Standard deviation of additive Gaussian image noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Project the renderings onto warp-consistent images.
    #[serde(default = "yes")]
    pub consistent: bool,
}

pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = 0.8 * width as f64;
    Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
        .expect("positive focal length")
}

fn finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Scene(format!("{name} must be finite")))
    }
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        match self.intrinsics {
            Some(k) => Intrinsics::new(k.fx, k.fy, k.cx, k.cy),
            None => Ok(default_intrinsics(self.width, self.height)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::Scene(format!(
                "image must be at least 4x4, got {}x{}",
                self.width, self.height
            )));
        }
        if self.planes.is_empty() {
            return Err(Error::Scene("scene needs at least one plane".into()));
        }
        self.intrinsics()?;
        finite("motion", &self.motion)?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Scene(format!("noise must be >= 0, got {}", self.noise)));
        }
        let check_texture = |t: &TextureSpec| -> Result<()> {
            if !(t.frequency > 0.0 && t.frequency.is_finite()) || t.components == 0 {
                return Err(Error::Scene("texture needs a positive frequency and components".into()));
            }
            Ok(())
        };
        for (i, p) in self.planes.iter().enumerate() {
            finite("plane normal", &p.normal)?;
            if Vector3::from(p.normal).norm() == 0.0 {
                return Err(Error::Scene(format!("plane {i} has a zero normal")));
            }
            if !(p.distance > 0.0 && p.distance.is_finite()) {
                return Err(Error::Scene(format!("plane {i} distance must be positive")));
            }
            check_texture(&p.texture)?;
        }
        for (i, o) in self.objects.iter().enumerate() {
            finite("object center", &o.center)?;
            finite("object velocity", &o.velocity)?;
            if o.center[2] <= 0.0 {
                return Err(Error::Scene(format!("object {i} lies behind the camera")));
            }
            if !(o.half_size[0] > 0.0 && o.half_size[1] > 0.0) {
                return Err(Error::Scene(format!("object {i} needs a positive size")));
            }
            check_texture(&o.texture)?;
        }
        Ok(())
    }

    pub fn poses(&self) -> [Pose; 2] {
        let xi = Twist(self.motion);
        [se3_exp(&xi.scaled(-1.0)), se3_exp(&xi)]
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Plane {
        normal: Vector3<f64>,
        distance: f64,
        e1: Vector3<f64>,
        e2: Vector3<f64>,
    },
    Rect {
        center: Vector3<f64>,
        half: [f64; 2],
        velocity: Vector3<f64>,
    },
}

#[derive(Debug, Clone)]
struct Surface {
    shape: Shape,
    texture: Texture,
}

/// Closest surface along a viewing ray.
#[derive(Debug, Clone, Copy)]
struct Hit {
    surface: usize,
    /// Depth in the viewing camera.
    depth: f64,
    uv: [f64; 2],
    /// The surface point at the target frame's time, world coordinates.
    point_t: Vector3<f64>,
}

struct World {
    k: Intrinsics,
    surfaces: Vec<Surface>,
    n_planes: usize,
}

impl World {
    fn new(spec: &SceneSpec) -> Result<Self> {
        let mut surfaces = Vec::new();
        for p in &spec.planes {
            let n = Vector3::from(p.normal);
            let scale = n.norm();
            let n = n / scale;
            let helper = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
            let e1 = helper.cross(&n).normalize();
            let e2 = n.cross(&e1);
            surfaces.push(Surface {
                shape: Shape::Plane {
                    normal: n,
                    distance: p.distance / scale,
                    e1,
                    e2,
                },
                texture: Texture::new(&p.texture),
            });
        }
        for o in &spec.objects {
            surfaces.push(Surface {
                shape: Shape::Rect {
                    center: Vector3::from(o.center),
                    half: o.half_size,
                    velocity: Vector3::from(o.velocity),
                },
                texture: Texture::new(&o.texture),
            });
        }
        Ok(World {
            k: spec.intrinsics()?,
            surfaces,
            n_planes: spec.planes.len(),
        })
    }

    /// Casts the ray through pixel `(x, y)` of the view at frame offset `frame`
    /// with target-to-view transform `pose`.
    fn cast(&self, frame: f64, pose: &Pose, x: f64, y: f64) -> Option<Hit> {
        let d = self.k.back_project(x, y);
        let rt = pose.rotation().transpose();
        let dir = rt * d;
        let origin = -(rt * pose.translation());
        let mut best: Option<Hit> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            let hit = match &s.shape {
                Shape::Plane {
                    normal,
                    distance,
                    e1,
                    e2,
                } => {
                    let den = normal.dot(&dir);
                    if den.abs() < 1e-15 {
                        continue;
                    }
                    let lambda = (distance - normal.dot(&origin)) / den;
                    let x = origin + dir * lambda;
                    (lambda, [e1.dot(&x), e2.dot(&x)], x)
                }
                Shape::Rect {
                    center,
                    half,
                    velocity,
                } => {
                    let c = center + velocity * frame;
                    if dir.z.abs() < 1e-15 {
                        continue;
                    }
                    let lambda = (c.z - origin.z) / dir.z;
                    let x = origin + dir * lambda;
                    let local = x - c;
                    if local.x.abs() > half[0] || local.y.abs() > half[1] {
                        continue;
                    }
                    (lambda, [local.x, local.y], x - velocity * frame)
                }
            };
            let (lambda, uv, point_t) = hit;
            if lambda > 0.0 && best.is_none_or(|b| lambda < b.depth) {
                best = Some(Hit {
                    surface: i,
                    depth: lambda,
                    uv,
                    point_t,
                });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, c: usize) -> f64 {
        self.surfaces[hit.surface].texture.value(hit.uv[0], hit.uv[1], c)
    }

    fn is_object(&self, surface: usize) -> bool {
        surface >= self.n_planes
    }

    fn velocity(&self, surface: usize) -> Vector3<f64> {
        match &self.surfaces[surface].shape {
            Shape::Rect { velocity, .. } => *velocity,
            Shape::Plane { .. } => Vector3::zeros(),
        }
    }
}

/// Ground truth of a rendered scene.
#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub target: ImageGrid,
    /// `I_{t-1}`, `I_{t+1}`.
    pub sources: [ImageGrid; 2],
    pub depth: DepthMap,
    pub source_depths: [DepthMap; 2],
    /// Target-to-source transforms.
    pub poses: [Pose; 2],
    /// `F_{t->s}`.
    pub flows: [FlowField; 2],
    /// `F_{s->t}`.
    pub backward_flows: [FlowField; 2],
    /// 1 where the target pixel is hidden or out of view in the source.
    pub occlusion: [ScalarMap; 2],
    /// 1 on target pixels showing a moving object.
    pub object_mask: ScalarMap,
    /// Largest violation of the warp-consistency constraints after the projection.
    pub consistency_residual: f64,
}

impl SceneTruth {
    /// Loss state at ground truth.
    pub fn state(&self) -> LossState {
        let view = |s: usize| SourceView {
            image: self.sources[s].clone(),
            pose: self.poses[s],
            flow: self.flows[s].clone(),
            backward_flow: self.backward_flows[s].clone(),
            depth: Some(self.source_depths[s].clone()),
        };
        LossState {
            target: self.target.clone(),
            depth: self.depth.clone(),
            intrinsics: self.intrinsics,
            sources: [view(PREV), view(NEXT)],
        }
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }
}

fn per_pixel<T: Send>(w: usize, h: usize, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    (0..w * h).into_par_iter().map(|i| f(i % w, i / w)).collect()
}

/// Renders `spec`.
pub fn render(spec: &SceneSpec) -> Result<SceneTruth> {
    spec.validate()?;
    let world = World::new(spec)?;
    let k = world.k;
    let (w, h) = (spec.width, spec.height);
    let identity = Pose::identity();
    // every plane must lie in front of the camera across the field of view
    for (i, s) in world.surfaces[..world.n_planes].iter().enumerate() {
        if let Shape::Plane { normal, distance, .. } = &s.shape {
            for (x, y) in [(0.0, 0.0), (w as f64 - 1.0, 0.0), (0.0, h as f64 - 1.0), (w as f64 - 1.0, h as f64 - 1.0)] {
                let den = normal.dot(&k.back_project(x, y));
                if !(distance / den > 0.0) {
                    return Err(Error::Scene(format!(
                        "plane {i} passes behind the camera within the field of view"
                    )));
                }
            }
        }
    }
    let hits = per_pixel(w, h, |x, y| world.cast(0.0, &identity, x as f64, y as f64));
    if let Some(i) = hits.iter().position(|h| h.is_none()) {
        return Err(Error::Scene(format!("pixel ({}, {}) sees no surface", i % w, i / w)));
    }
    let hits: Vec<Hit> = hits.into_iter().map(|h| h.expect("checked")).collect();
    let depth = DepthMap::new(w, h, hits.iter().map(|h| h.depth).collect())?;
    let object_mask = ScalarMap::new(
        w,
        h,
        hits.iter()
            .map(|h| if world.is_object(h.surface) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let target_analytic: Vec<f64> = hits
        .iter()
        .flat_map(|hit| (0..3).map(|c| world.shade(hit, c)).collect::<Vec<_>>())
        .collect();

    let poses = spec.poses();
    let mut flows = Vec::new();
    let mut backward = Vec::new();
    let mut occlusion = Vec::new();
    let mut source_depths = Vec::new();
    let mut source_analytic = Vec::new();
    for s in [PREV, NEXT] {
        let frame = FRAME_OFFSETS[s];
        let pose = poses[s];
        // forward flow and occlusion labels on the target grid
        let fwd = per_pixel(w, h, |x, y| {
            let hit = &hits[y * w + x];
            let p = Vector2::new(x as f64, y as f64);
            let (q, z) = if world.is_object(hit.surface) {
                let xs = pose.transform(&(hit.point_t + world.velocity(hit.surface) * frame));
                let q = if xs.z > 0.0 { k.project(&xs) } else { Vector2::new(f64::NAN, f64::NAN) };
                (q, xs.z)
            } else {
                let r = reproject(p, hit.depth, &pose, &k);
                (r.pixel, r.point.z)
            };
            if !(z > 0.0) {
                return ((OFF_GRID - p.x, OFF_GRID - p.y), 1.0);
            }
            let inside = q.x >= 0.0 && q.y >= 0.0 && q.x <= (w - 1) as f64 && q.y <= (h - 1) as f64;
            let visible = inside
                && world
                    .cast(frame, &pose, q.x, q.y)
                    .is_some_and(|o| o.surface == hit.surface);
            ((q.x - p.x, q.y - p.y), if visible { 0.0 } else { 1.0 })
        });
        let flow = FlowField::from_fn(w, h, |x, y| fwd[y * w + x].0)?;
        let occ = ScalarMap::new(w, h, fwd.iter().map(|f| f.1).collect())?;
        // source view: depth, analytic shading and backward flow
        let src_hits = per_pixel(w, h, |x, y| world.cast(frame, &pose, x as f64, y as f64));
        if let Some(i) = src_hits.iter().position(|h| h.is_none()) {
            return Err(Error::Scene(format!(
                "pixel ({}, {}) of the {} frame sees no surface",
                i % w,
                i / w,
                if s == PREV { "previous" } else { "next" }
            )));
        }
        let src_hits: Vec<Hit> = src_hits.into_iter().map(|h| h.expect("checked")).collect();
        let bwd = FlowField::from_fn(w, h, |x, y| {
            let hit = &src_hits[y * w + x];
            if hit.point_t.z > 0.0 {
                let p = k.project(&hit.point_t);
                (p.x - x as f64, p.y - y as f64)
            } else {
                (OFF_GRID - x as f64, OFF_GRID - y as f64)
            }
        })?;
        source_depths.push(DepthMap::new(w, h, src_hits.iter().map(|h| h.depth).collect())?);
        source_analytic.push(
            src_hits
                .iter()
                .flat_map(|hit| (0..3).map(|c| world.shade(hit, c)).collect::<Vec<_>>())
                .collect::<Vec<f64>>(),
        );
        flows.push(flow);
        backward.push(bwd);
        occlusion.push(occ);
    }
    let flows: [FlowField; 2] = [flows[0].clone(), flows[1].clone()];
    let occlusion: [ScalarMap; 2] = [occlusion[0].clone(), occlusion[1].clone()];

    let (mut images, consistency_residual) = if spec.consistent {
        let constraints = warp_constraints(&flows, &occlusion, w, h);
        project_consistent(&target_analytic, &source_analytic, &constraints, w * h)
    } else {
        (
            [target_analytic, source_analytic[0].clone(), source_analytic[1].clone()],
            f64::NAN,
        )
    };
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Scene(e.to_string()))?;
        for img in images.iter_mut() {
            for v in img.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let [it, ip, inx] = images;
    Ok(SceneTruth {
        spec: spec.clone(),
        intrinsics: k,
        target: ImageGrid::new(w, h, 3, it)?,
        sources: [ImageGrid::new(w, h, 3, ip)?, ImageGrid::new(w, h, 3, inx)?],
        depth,
        source_depths: [source_depths[0].clone(), source_depths[1].clone()],
        poses,
        flows,
        backward_flows: [backward[0].clone(), backward[1].clone()],
        occlusion,
        object_mask,
        consistency_residual,
    })
}

/// One constraint: `sum_j w_j I_s[idx_j] = I_t[pixel]`.
struct Constraint {
    source: usize,
    pixel: usize,
    stencil: [(usize, f64); 4],
}

fn warp_constraints(flows: &[FlowField; 2], occlusion: &[ScalarMap; 2], w: usize, h: usize) -> Vec<Constraint> {
    let mut out = Vec::new();
    for s in [PREV, NEXT] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if occlusion[s].data()[i] != 0.0 {
                    continue;
                }
                let (u, v) = flows[s].get(x, y);
                if let Some(stencil) = bilinear_stencil(w, h, x as f64 + u, y as f64 + v) {
                    out.push(Constraint {
                        source: s,
                        pixel: i,
                        stencil,
                    });
                }
            }
        }
    }
    out
}

/// Tolerance on the constraint residual and iteration cap of the projection.
const CG_TOL: f64 = 1e-13;
const CG_MAX_ITER: usize = 20_000;

/// Projects `(target, prev, next)` (interleaved RGB) onto the constraint set.
fn project_consistent(
    target: &[f64],
    sources: &[Vec<f64>],
    constraints: &[Constraint],
    n: usize,
) -> ([Vec<f64>; 3], f64) {
    let solved: Vec<(Vec<f64>, f64)> = (0..3)
        .into_par_iter()
        .map(|c| {
            // unknowns: [I_t | I_prev | I_next] for one channel
            let mut a = Vec::with_capacity(3 * n);
            a.extend((0..n).map(|i| target[3 * i + c]));
            a.extend((0..n).map(|i| sources[0][3 * i + c]));
            a.extend((0..n).map(|i| sources[1][3 * i + c]));
            let apply_c = |x: &[f64]| -> Vec<f64> {
                constraints
                    .iter()
                    .map(|k| {
                        let off = n * (1 + k.source);
                        k.stencil.iter().map(|&(j, wt)| wt * x[off + j]).sum::<f64>() - x[k.pixel]
                    })
                    .collect()
            };
            let apply_ct = |y: &[f64]| -> Vec<f64> {
                let mut z = vec![0.0; 3 * n];
                for (k, &yk) in constraints.iter().zip(y) {
                    let off = n * (1 + k.source);
                    z[k.pixel] -= yk;
                    for &(j, wt) in &k.stencil {
                        z[off + j] += wt * yk;
                    }
                }
                z
            };
            // conjugate gradients on (C C^T) y = C a; x = a - C^T y
            let b = apply_c(&a);
            let m = b.len();
            let mut y = vec![0.0; m];
            let mut r = b.clone();
            let mut p = r.clone();
            let mut rr: f64 = r.iter().map(|v| v * v).sum();
            for _ in 0..CG_MAX_ITER {
                if r.iter().all(|v| v.abs() <= CG_TOL) {
                    break;
                }
                let mp = apply_c(&apply_ct(&p));
                let pmp: f64 = p.iter().zip(&mp).map(|(a, b)| a * b).sum();
                if pmp <= 0.0 {
                    break;
                }
                let alpha = rr / pmp;
                for i in 0..m {
                    y[i] += alpha * p[i];
                    r[i] -= alpha * mp[i];
                }
                let rr_new: f64 = r.iter().map(|v| v * v).sum();
                let beta = rr_new / rr;
                rr = rr_new;
                for i in 0..m {
                    p[i] = r[i] + beta * p[i];
                }
            }
            let ct = apply_ct(&y);
            let x: Vec<f64> = a.iter().zip(&ct).map(|(a, c)| a - c).collect();
            let residual = apply_c(&x).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            (x, residual)
        })
        .collect();
    let mut out = [vec![0.0; 3 * n], vec![0.0; 3 * n], vec![0.0; 3 * n]];
    let mut residual = 0.0f64;
    for (c, (x, res)) in solved.iter().enumerate() {
        residual = residual.max(*res);
        for (img, o) in out.iter_mut().enumerate() {
            for i in 0..n {
                o[3 * i + c] = x[img * n + i];
            }
        }
    }
    (out, residual)
}

// ---------------------------------------------------------------------------
// presets

/// Base texture wavelength in pixels for the presets.
const PRESET_WAVELENGTH_PX: f64 = 24.0;
/// Depth of the background plane along the optical axis.
const PRESET_DEPTH: f64 = 4.0;

fn preset_texture(rng: &mut ChaCha8Rng, fx: f64, depth: f64) -> TextureSpec {
    TextureSpec {
        seed: rng.random(),
        frequency: fx / (depth * PRESET_WAVELENGTH_PX),
        components: 4,
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// A single tilted textured plane under a mostly lateral camera motion.
pub fn rigid_scene(width: usize, height: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = default_intrinsics(width, height);
    let a: f64 = rng.random_range(-0.35..0.35);
    let b: f64 = rng.random_range(-0.35..0.35);
    let n = Vector3::new(a, b, 1.0).normalize();
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let omega = axis * 0.6f64.to_radians();
    let nu = [
        sign(&mut rng) * rng.random_range(0.15..0.25),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
    ];
    SceneSpec {
        width,
        height,
        intrinsics: None,
        motion: [omega.x, omega.y, omega.z, nu[0], nu[1], nu[2]],
        planes: vec![PlaneSpec {
            normal: [n.x, n.y, n.z],
            distance: PRESET_DEPTH * n.z,
            texture: preset_texture(&mut rng, k.fx, PRESET_DEPTH),
        }],
        objects: Vec::new(),
        noise: 0.0,
        noise_seed: 0,
        consistent: true,
    }
}

/// Fraction of the image covered by the moving object in [`moving_object_scene`].
pub const OBJECT_AREA: f64 = 0.1;
/// Vertical image motion of the object per frame, pixels.
pub const OBJECT_SHIFT_PX: f64 = 4.0;

/// [`rigid_scene`] plus a rectangle covering 10% of the image that moves
/// vertically, across the near-horizontal epipolar lines.
pub fn moving_object_scene(width: usize, height: usize, seed: u64) -> SceneSpec {
    let mut spec = rigid_scene(width, height, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = default_intrinsics(width, height);
    let z = 2.2;
    let side = OBJECT_AREA.sqrt();
    let (w_px, h_px) = (side * width as f64, side * height as f64);
    let u = rng.random_range(0.3..0.7) * width as f64;
    let v = rng.random_range(0.3..0.7) * height as f64;
    spec.objects.push(ObjectSpec {
        center: [(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z],
        half_size: [0.5 * w_px * z / k.fx, 0.5 * h_px * z / k.fy],
        velocity: [0.0, sign(&mut rng) * OBJECT_SHIFT_PX * z / k.fy, 0.0],
        texture: preset_texture(&mut rng, k.fx, z),
    });
    spec
}

// ---------------------------------------------------------------------------
// perturbations

/// Changes applied to a loss state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Perturbation {
    /// Left perturbation `exp(delta) * T` per source pose.
    pub twist: [Twist; 2],
    /// Per-pixel multiplicative depth factors.
    pub depth_factors: Option<Vec<f64>>,
    /// Additive offsets per forward flow.
    pub flow_offsets: Option<[FlowField; 2]>,
}

/// Returns a perturbed copy of `state`; `state` itself is untouched.
pub fn perturb(state: &LossState, p: &Perturbation) -> Result<LossState> {
    let mut out = state.clone();
    for s in [PREV, NEXT] {
        out.sources[s].pose = se3_exp(&p.twist[s]).compose(&state.sources[s].pose);
    }
    if let Some(f) = &p.depth_factors {
        out.depth = state.depth.scaled_by(f)?;
    }
    if let Some(offsets) = &p.flow_offsets {
        for s in [PREV, NEXT] {
            let base = &state.sources[s].flow;
            offsets[s].ensure_size(base.width(), base.height(), "flow offset")?;
            let u = base.u().iter().zip(offsets[s].u()).map(|(a, b)| a + b).collect();
            let v = base.v().iter().zip(offsets[s].v()).map(|(a, b)| a + b).collect();
            out.sources[s].flow = FlowField::new(base.width(), base.height(), u, v)?;
        }
    }
    Ok(out)
}

/// Scales every depth and both translations by `lambda`.
pub fn rescale(state: &LossState, lambda: f64) -> Result<LossState> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Contract(format!("scale must be positive, got {lambda}")));
    }
    let mut out = state.clone();
    out.depth = state.depth.scaled_by(&vec![lambda; state.depth.data().len()])?;
    for s in [PREV, NEXT] {
        let p = &state.sources[s].pose;
        out.sources[s].pose = Pose::new(*p.rotation(), p.translation() * lambda)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// gradient-check scenes

/// Distance kept between sample coordinates and integer grid lines.
const KINK_MARGIN: f64 = 0.02;
/// Smallest epipolar residual kept on flow correspondences.
const RESIDUAL_FLOOR: f64 = 0.1;
/// Brightness offset added to the target so absolute differences keep their sign.
const BRIGHTNESS_OFFSET: f64 = 0.1;

fn off_integer(v: f64) -> bool {
    let f = v - v.floor();
    (KINK_MARGIN..=1.0 - KINK_MARGIN).contains(&f)
}

/// Depth nudged per pixel until both rigid samples are off the grid lines;
/// also returns the number of pixels where no nudge within 20% worked.
fn depth_off_grid(state: &LossState) -> (Vec<f64>, usize) {
    let (w, k) = (state.width(), state.intrinsics);
    let mut failures = 0;
    let depth = state
        .depth
        .data()
        .iter()
        .enumerate()
        .map(|(i, &base)| {
            let p = Vector2::new((i % w) as f64, (i / w) as f64);
            let found = (0..400).find_map(|step| {
                let j = (step as f64 / 2.0).ceil() * if step % 2 == 0 { 1.0 } else { -1.0 };
                let d = base * (1.0 + 1e-3 * j);
                [PREV, NEXT]
                    .iter()
                    .all(|&s| {
                        let r = reproject(p, d, &state.sources[s].pose, &k);
                        !r.in_front || (off_integer(r.pixel.x) && off_integer(r.pixel.y))
                    })
                    .then_some(d)
            });
            found.unwrap_or_else(|| {
                failures += 1;
                base
            })
        })
        .collect();
    (depth, failures)
}

/// Pose perturbations tried before settling for the one with fewest stuck pixels.
const POSE_ATTEMPTS: usize = 64;

/// A 64x48 moving-object scene prepared for finite differences: slightly
/// perturbed poses, and depth and flows nudged so that no sample coordinate
/// lies near an integer, no flow correspondence has a near-zero epipolar
/// residual and target/source differences keep their sign.
///
/// Depth only moves samples along epipolar lines, so a sample sitting on a
/// grid line parallel to its epipolar line cannot be cleared that way; the
/// pose perturbation is redrawn until no such pixel remains.
pub fn gradcheck_state(seed: u64) -> Result<LossState> {
    let truth = render(&moving_object_scene(64, 48, seed))?;
    let base = truth.state();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut best: Option<(LossState, Vec<f64>, usize)> = None;
    for _ in 0..POSE_ATTEMPTS {
        let mut twist = [Twist::zero(); 2];
        for t in twist.iter_mut() {
            for (i, v) in t.0.iter_mut().enumerate() {
                let scale = if i < 3 { 0.1f64.to_radians() } else { 0.002 };
                *v = rng.random_range(-scale..scale);
            }
        }
        let candidate = perturb(
            &base,
            &Perturbation {
                twist,
                ..Perturbation::default()
            },
        )?;
        let (depth, failures) = depth_off_grid(&candidate);
        if best.as_ref().is_none_or(|b| failures < b.2) {
            best = Some((candidate, depth, failures));
        }
        if failures == 0 {
            break;
        }
    }
    let (mut state, depth, _) = best.expect("at least one attempt");
    state.target = ImageGrid::new(
        state.width(),
        state.height(),
        state.target.channels(),
        state.target.data().iter().map(|v| v + BRIGHTNESS_OFFSET).collect(),
    )?;
    let (w, h) = (state.width(), state.height());
    let k = state.intrinsics;
    state.depth = DepthMap::new(w, h, depth)?;
    // flows: keep epipolar residuals away from zero, then slide along the
    // epipolar line until both coordinates are off the grid lines
    for s in [PREV, NEXT] {
        let f = fundamental_matrix(&state.sources[s].pose, &k);
        let flow = &state.sources[s].flow;
        let mut u = flow.u().to_vec();
        let mut v = flow.v().to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let p = Vector2::new(x as f64, y as f64);
                let mut q = Vector2::new(x as f64 + u[i], y as f64 + v[i]);
                if q.x <= OFF_GRID / 2.0 {
                    continue;
                }
                // unit tangent of the epipolar line, and the unit normal
                // pointing away from it
                let (tangent, outward) = if f.is_pure_rotation() {
                    (Vector2::new(0.6, 0.8), Vector2::new(-0.8, 0.6))
                } else {
                    let l = f.line(p);
                    let n = Vector2::new(l.x, l.y);
                    let len = n.norm();
                    let r = f.residual(p, q);
                    let side = if r >= 0.0 { 1.0 } else { -1.0 };
                    if r.abs() < RESIDUAL_FLOOR {
                        q += n * ((side * RESIDUAL_FLOOR - r) / (len * len));
                    }
                    (Vector2::new(-n.y, n.x) / len, n * (side / len))
                };
                let cleared = (0..20).find_map(|m| {
                    (0..400).find_map(|step| {
                        let j = (step as f64 / 2.0).ceil() * if step % 2 == 0 { 1.0 } else { -1.0 };
                        let c = q + outward * (0.031 * m as f64) + tangent * (0.013 * j);
                        (off_integer(c.x) && off_integer(c.y)).then_some(c)
                    })
                });
                if let Some(c) = cleared {
                    q = c;
                }
                u[i] = q.x - p.x;
                v[i] = q.y - p.y;
            }
        }
        state.sources[s].flow = FlowField::new(w, h, u, v)?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// directory layout

pub const TARGET_PPM: &str = "it.ppm";
pub const SOURCE_PPM: [&str; 2] = ["is_prev.ppm", "is_next.ppm"];
pub const TARGET_PFM: &str = "it.pfm";
pub const SOURCE_PFM: [&str; 2] = ["is_prev.pfm", "is_next.pfm"];
pub const DEPTH: &str = "depth_t.pfm";
pub const SOURCE_DEPTH: [&str; 2] = ["depth_prev.pfm", "depth_next.pfm"];
pub const FLOW: [&str; 2] = ["flow_t_prev.flo", "flow_t_next.flo"];
pub const BACKWARD_FLOW: [&str; 2] = ["flow_prev_t.flo", "flow_next_t.flo"];
pub const OCCLUSION: [&str; 2] = ["occ_prev.pfm", "occ_next.pfm"];
pub const OBJECT_MASK: &str = "object_mask.pfm";
pub const CAMERA: [&str; 2] = ["camera_prev.json", "camera.json"];
pub const SPEC_COPY: &str = "scene.json";

fn single(map: &ScalarMap) -> ImageGrid {
    map.to_image()
}

/// Writes the scene into `dir`; returns the written paths in a fixed order.
pub fn write_scene_dir(truth: &SceneTruth, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        out.push(p.clone());
        p
    };
    io::write_ppm(&truth.target, put(TARGET_PPM))?;
    io::write_pfm(&truth.target, put(TARGET_PFM))?;
    for s in [PREV, NEXT] {
        io::write_ppm(&truth.sources[s], put(SOURCE_PPM[s]))?;
        io::write_pfm(&truth.sources[s], put(SOURCE_PFM[s]))?;
    }
    io::write_pfm(&single(&truth.depth.to_scalar_map()), put(DEPTH))?;
    for s in [PREV, NEXT] {
        io::write_pfm(&single(&truth.source_depths[s].to_scalar_map()), put(SOURCE_DEPTH[s]))?;
        io::write_flo(&truth.flows[s], put(FLOW[s]))?;
        io::write_flo(&truth.backward_flows[s], put(BACKWARD_FLOW[s]))?;
        io::write_pfm(&single(&truth.occlusion[s]), put(OCCLUSION[s]))?;
        io::write_camera(&truth.intrinsics, &truth.poses[s], put(CAMERA[s]))?;
    }
    io::write_pfm(&single(&truth.object_mask), put(OBJECT_MASK))?;
    let spec = serde_json::to_string_pretty(&truth.spec).expect("scene spec serializes");
    let p = put(SPEC_COPY);
    std::fs::write(&p, spec).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

/// Files of a scene directory a loss needs.
pub fn required_files(kind: LossKind) -> Vec<&'static str> {
    let mut out = vec![TARGET_PPM];
    let images = [SOURCE_PPM[PREV], SOURCE_PPM[NEXT]];
    let flows = [FLOW[PREV], FLOW[NEXT], BACKWARD_FLOW[PREV], BACKWARD_FLOW[NEXT]];
    let geometry = [DEPTH, CAMERA[PREV], CAMERA[NEXT]];
    match kind {
        LossKind::Op => {
            out.extend(images);
            out.extend(flows);
        }
        LossKind::Ap | LossKind::Total => {
            out.extend(images);
            out.extend(flows);
            out.extend(geometry);
        }
        LossKind::S => out.push(DEPTH),
    }
    out
}

/// Loads an image, preferring the float copy when present.
fn load_image(dir: &Path, pfm: &str, ppm: &str) -> Result<ImageGrid> {
    let p = dir.join(pfm);
    if p.exists() {
        io::read_pfm(p)
    } else {
        io::read_ppm(dir.join(ppm))
    }
}

fn load_depth(path: &Path) -> Result<DepthMap> {
    let m = io::read_pfm(path)?.to_scalar_map()?;
    DepthMap::new(m.width(), m.height(), m.into_data())
}

/// Reads the parts of a scene directory `kind` needs. Inputs a loss does not
/// read are filled with neutral placeholders (unit depth, identity poses, zero
/// flows).
pub fn read_scene_dir(dir: &Path, kind: LossKind) -> Result<LossState> {
    let missing: Vec<&str> = required_files(kind)
        .into_iter()
        .filter(|f| !dir.join(f).exists() && !(f.ends_with(".ppm") && dir.join(f.replace(".ppm", ".pfm")).exists()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(format!(
            "{} needs {} in {}",
            kind.name(),
            missing.join(", "),
            dir.display()
        )));
    }
    let target = load_image(dir, TARGET_PFM, TARGET_PPM)?;
    let (w, h) = (target.width(), target.height());
    let needs_sources = kind != LossKind::S;
    let needs_geometry = matches!(kind, LossKind::Ap | LossKind::Total);
    let depth = if kind == LossKind::Op {
        DepthMap::constant(w, h, 1.0)?
    } else {
        load_depth(&dir.join(DEPTH))?
    };
    let mut intrinsics = default_intrinsics(w, h);
    let mut views = Vec::new();
    for s in [PREV, NEXT] {
        let (image, flow, backward_flow) = if needs_sources {
            (
                load_image(dir, SOURCE_PFM[s], SOURCE_PPM[s])?,
                io::read_flo(dir.join(FLOW[s]))?,
                io::read_flo(dir.join(BACKWARD_FLOW[s]))?,
            )
        } else {
            (target.clone(), FlowField::zeros(w, h), FlowField::zeros(w, h))
        };
        let pose = if needs_geometry {
            let (k, pose) = io::read_camera(dir.join(CAMERA[s]))?;
            intrinsics = k;
            pose
        } else {
            Pose::identity()
        };
        views.push(SourceView {
            image,
            pose,
            flow,
            backward_flow,
            depth: None,
        });
    }
    let next = views.pop().expect("two views");
    let prev = views.pop().expect("two views");
    let state = LossState {
        target,
        depth,
        intrinsics,
        sources: [prev, next],
    };
    state.validate()?;
    Ok(state)
}
