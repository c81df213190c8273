//! Deterministic synthetic scenes: analytic primitives, ray-cast ground
//! truth, camera trajectories and an oracle frontend that feeds the memory
//! machinery ground-truth geometry plus controlled noise.

pub mod io;

use nalgebra::{UnitQuaternion, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{patch_average_flat, CameraPose, Pointmap};
use crate::memory::Pointer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Enclosing room (inverted box). Without it, missed rays are sky.
    pub room: Option<RoomSpec>,
    pub boxes: usize,
    pub spheres: usize,
    pub planes: usize,
    /// Optional moving box with per-frame linear motion.
    pub mover: Option<MoverSpec>,
    pub trajectory: TrajectorySpec,
    pub frames: usize,
    /// [height, width] pixels.
    pub image_size: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoverSpec {
    pub start: [f64; 3],
    pub half_extent: [f64; 3],
    /// Center displacement per frame, meters.
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Full circle over the whole sequence, looking at the scene center.
    Orbit { radius: f64, height: f64 },
    /// Straight-line dolly, looking at the scene center.
    Linear { start: [f64; 3], step: [f64; 3] },
    /// Cycle through `period` orbit viewpoints; frame t uses pose t mod
    /// period, so pose 0 recurs at every multiple of the period.
    RevisitLoop { radius: f64, height: f64, period: usize },
}

/// One streaming input with its ground truth.
#[derive(Debug, Clone)]
pub struct Frame {
    /// H·W·3 shaded RGB in [0, 1].
    pub pixels: Vec<f64>,
    /// Camera-frame pointmap.
    pub gt_self: Pointmap,
    /// Global-frame (frame-0 camera) pointmap.
    pub gt_global: Pointmap,
    /// Camera-to-global rigid transform; identity at frame 0.
    pub gt_pose: CameraPose,
    /// Per-pixel z in the camera frame; NaN where no surface was hit.
    pub depth: Vec<f64>,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.gt_self.height
    }

    pub fn width(&self) -> usize {
        self.gt_self.width
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    Cuboid { center: Vector3<f64>, half: Vector3<f64> },
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    /// Inverted box: rays start inside and hit the walls.
    Room { min: Vector3<f64>, max: Vector3<f64> },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    albedo: Vector3<f64>,
    velocity: Vector3<f64>,
}

impl Primitive {
    fn offset_at(&self, frame: usize) -> Vector3<f64> {
        self.velocity * frame as f64
    }
}

const RAY_EPS: f64 = 1e-9;
const FOV_Y: f64 = 1.0471975511965976; // 60 degrees
const LIGHT_DIR: [f64; 3] = [-0.577350269189626, -0.577350269189626, -0.577350269189626];
const AMBIENT: f64 = 0.25;

/// A fully-instantiated scene; exposes ray casting and a signed-distance
/// oracle over the same primitive set.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    primitives: Vec<Primitive>,
    center: Vector3<f64>,
}

impl Scene {
    pub fn build(spec: &SceneSpec) -> Result<Scene> {
        if spec.frames == 0 {
            return Err(Error::invalid("scene needs at least one frame"));
        }
        if spec.image_size[0] == 0 || spec.image_size[1] == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut primitives = Vec::new();
        let (center, span) = match &spec.room {
            Some(room) => {
                let min = Vector3::from(room.min);
                let max = Vector3::from(room.max);
                if (max - min).min() <= 0.0 {
                    return Err(Error::invalid("room extents must be positive"));
                }
                primitives.push(Primitive {
                    shape: Shape::Room { min, max },
                    albedo: Vector3::new(0.7, 0.7, 0.72),
                    velocity: Vector3::zeros(),
                });
                ((min + max) / 2.0, (max - min) / 2.0)
            }
            None => (Vector3::zeros(), Vector3::new(3.0, 3.0, 3.0)),
        };
        let rand_color = |rng: &mut ChaCha8Rng| {
            Vector3::new(
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
            )
        };
        let rand_pos = |rng: &mut ChaCha8Rng, shrink: f64| {
            Vector3::new(
                rng.random_range(-span.x * shrink..span.x * shrink),
                rng.random_range(-span.y * shrink..span.y * shrink),
                rng.random_range(-span.z * shrink..span.z * shrink),
            ) + center
        };
        for _ in 0..spec.boxes {
            let c = rand_pos(&mut rng, 0.55);
            let half = Vector3::new(
                rng.random_range(0.15..0.45),
                rng.random_range(0.15..0.45),
                rng.random_range(0.15..0.45),
            );
            primitives.push(Primitive {
                shape: Shape::Cuboid { center: c, half },
                albedo: rand_color(&mut rng),
                velocity: Vector3::zeros(),
            });
        }
        for _ in 0..spec.spheres {
            let c = rand_pos(&mut rng, 0.55);
            let r = rng.random_range(0.2..0.55);
            primitives.push(Primitive {
                shape: Shape::Sphere { center: c, radius: r },
                albedo: rand_color(&mut rng),
                velocity: Vector3::zeros(),
            });
        }
        for _ in 0..spec.planes {
            let p = rand_pos(&mut rng, 0.4);
            let n = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = if n.norm() < 1e-6 { Vector3::y() } else { n.normalize() };
            primitives.push(Primitive {
                shape: Shape::Plane { point: p, normal: n },
                albedo: rand_color(&mut rng),
                velocity: Vector3::zeros(),
            });
        }
        if let Some(mover) = &spec.mover {
            primitives.push(Primitive {
                shape: Shape::Cuboid {
                    center: Vector3::from(mover.start),
                    half: Vector3::from(mover.half_extent),
                },
                albedo: Vector3::new(0.9, 0.3, 0.2),
                velocity: Vector3::from(mover.velocity),
            });
        }
        if primitives.is_empty() {
            return Err(Error::invalid("empty scene: no room and no primitives"));
        }
        Ok(Scene { spec: spec.clone(), primitives, center })
    }

    /// Camera-to-world pose for a frame along the configured trajectory.
    pub fn camera_to_world(&self, frame: usize) -> CameraPose {
        let (pos, target) = match &self.spec.trajectory {
            TrajectorySpec::Orbit { radius, height } => {
                let angle = frame as f64 / self.spec.frames as f64 * std::f64::consts::TAU;
                (
                    self.center
                        + Vector3::new(radius * angle.cos(), *height, radius * angle.sin()),
                    self.center,
                )
            }
            TrajectorySpec::Linear { start, step } => (
                Vector3::from(*start) + Vector3::from(*step) * frame as f64,
                self.center,
            ),
            TrajectorySpec::RevisitLoop { radius, height, period } => {
                let period = (*period).max(1);
                let slot = frame % period;
                let angle = slot as f64 / period as f64 * std::f64::consts::TAU;
                (
                    self.center
                        + Vector3::new(radius * angle.cos(), *height, radius * angle.sin()),
                    self.center,
                )
            }
        };
        look_at(pos, target)
    }

    /// Smallest |signed distance| to any primitive surface at a frame's
    /// configuration; the test oracle for "points lie on a surface".
    pub fn min_abs_sdf(&self, world_point: &Vector3<f64>, frame: usize) -> f64 {
        self.primitives
            .iter()
            .map(|p| sdf(&p.shape, &(world_point - p.offset_at(frame))).abs())
            .fold(f64::INFINITY, f64::min)
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (idx, prim) in self.primitives.iter().enumerate() {
            let shifted_origin = origin - prim.offset_at(frame);
            if let Some((t, normal)) = intersect(&prim.shape, &shifted_origin, dir) {
                if best.as_ref().map_or(true, |b| t < b.t) {
                    best = Some(Hit { t, normal, primitive: idx });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> Vector3<f64> {
        let albedo = self.primitives[hit.primitive].albedo;
        let l = Vector3::from(LIGHT_DIR);
        // two-sided shading keeps interior walls lit regardless of normal sign
        let lambert = hit.normal.dot(&-l).abs();
        albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    primitive: usize,
}

fn look_at(pos: Vector3<f64>, target: Vector3<f64>) -> CameraPose {
    let forward = (target - pos).normalize();
    let up = if forward.y.abs() > 0.999 { Vector3::z() } else { Vector3::y() };
    let x_cam = forward.cross(&up).normalize();
    let y_cam = forward.cross(&x_cam); // z × x = y keeps the basis right-handed
    let rot = nalgebra::Matrix3::from_columns(&[x_cam, y_cam, forward]);
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
    CameraPose::from_parts(q, pos)
}

fn sdf(shape: &Shape, p: &Vector3<f64>) -> f64 {
    match shape {
        Shape::Sphere { center, radius } => (p - center).norm() - radius,
        Shape::Cuboid { center, half } => {
            let q = (p - center).abs() - half;
            let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            let inside = q.x.max(q.y).max(q.z).min(0.0);
            outside + inside
        }
        Shape::Plane { point, normal } => (p - point).dot(normal),
        Shape::Room { min, max } => {
            let center = (min + max) / 2.0;
            let half = (max - min) / 2.0;
            let q = (p - center).abs() - half;
            let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            let inside = q.x.max(q.y).max(q.z).min(0.0);
            -(outside + inside)
        }
    }
}

/// Nearest forward intersection of a unit ray with a shape, with the
/// outward surface normal at the hit.
fn intersect(
    shape: &Shape,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > RAY_EPS { -b - sq } else { -b + sq };
            if t <= RAY_EPS {
                return None;
            }
            let hit = origin + dir * t;
            Some((t, (hit - center).normalize()))
        }
        Shape::Cuboid { center, half } => {
            let (t_near, t_far) = slab(origin, dir, &(center - half), &(center + half))?;
            let t = if t_near > RAY_EPS { t_near } else { t_far };
            if t <= RAY_EPS {
                return None;
            }
            let hit = origin + dir * t;
            Some((t, cuboid_normal(&hit, center, half)))
        }
        Shape::Plane { point, normal } => {
            let denom = dir.dot(normal);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (point - origin).dot(normal) / denom;
            if t <= RAY_EPS {
                return None;
            }
            Some((t, *normal))
        }
        Shape::Room { min, max } => {
            let (t_near, t_far) = slab(origin, dir, min, max)?;
            // interior walls: take the exit point
            let t = if t_near > RAY_EPS { t_near } else { t_far };
            if t <= RAY_EPS {
                return None;
            }
            let hit = origin + dir * t;
            let center = (min + max) / 2.0;
            let half = (max - min) / 2.0;
            // inward-facing normal
            Some((t, -cuboid_normal(&hit, &center, &half)))
        }
    }
}

fn slab(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            if origin[axis] < min[axis] || origin[axis] > max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (mut t0, mut t1) = ((min[axis] - origin[axis]) * inv, (max[axis] - origin[axis]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    Some((t_near, t_far))
}

fn cuboid_normal(hit: &Vector3<f64>, center: &Vector3<f64>, half: &Vector3<f64>) -> Vector3<f64> {
    let rel = hit - center;
    let mut axis = 0;
    let mut best = f64::NEG_INFINITY;
    for a in 0..3 {
        let prox = rel[a].abs() / half[a];
        if prox > best {
            best = prox;
            axis = a;
        }
    }
    let mut n = Vector3::zeros();
    n[axis] = rel[axis].signum();
    n
}

/// Ray-cast every frame of the scene described by `spec`.
pub fn generate(spec: &SceneSpec) -> Result<Vec<Frame>> {
    let scene = Scene::build(spec)?;
    let cam0 = scene.camera_to_world(0);
    let cam0_inv = cam0.inverse();
    let [h, w] = spec.image_size;
    let tan_half = (FOV_Y / 2.0).tan();
    let aspect = w as f64 / h as f64;

    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let cam = scene.camera_to_world(t);
        let origin = cam.translation();
        let rot = cam.rotation();

        let n = h * w;
        let mut pixels = vec![0.0; n * 3];
        let mut pts_self = vec![Vector3::zeros(); n];
        let mut valid = vec![false; n];
        let mut depth = vec![f64::NAN; n];
        for i in 0..h {
            for j in 0..w {
                let ndc_x = ((j as f64 + 0.5) / w as f64) * 2.0 - 1.0;
                let ndc_y = ((i as f64 + 0.5) / h as f64) * 2.0 - 1.0;
                let dir_cam =
                    Vector3::new(ndc_x * tan_half * aspect, ndc_y * tan_half, 1.0).normalize();
                let dir_world = rot * dir_cam;
                let px = i * w + j;
                if let Some(hit) = scene.cast(&origin, &dir_world, t) {
                    let p_cam = dir_cam * hit.t;
                    pts_self[px] = p_cam;
                    valid[px] = true;
                    depth[px] = p_cam.z;
                    let color = scene.shade(&hit);
                    pixels[px * 3..px * 3 + 3].copy_from_slice(&[color.x, color.y, color.z]);
                }
            }
        }

        let gt_pose = if t == 0 { CameraPose::identity() } else { cam0_inv.compose(&cam) };
        let pts_global: Vec<Vector3<f64>> = pts_self
            .iter()
            .zip(&valid)
            .map(|(p, &v)| if v { gt_pose.transform(p) } else { *p })
            .collect();
        frames.push(Frame {
            pixels,
            gt_self: Pointmap::new(h, w, pts_self, valid.clone(), None)?,
            gt_global: Pointmap::new(h, w, pts_global, valid, None)?,
            gt_pose,
            depth,
        });
    }
    Ok(frames)
}

/// Ground-truth frontend: the global pointmap with isotropic gaussian
/// noise on valid points, plus pointers carrying patch-mean colors as
/// features. Isolates memory/fusion/metrics from the learned stack.
pub fn oracle_frontend(
    frame: &Frame,
    noise_sigma: f64,
    seed: u64,
    patch: usize,
) -> Result<(Pointmap, Vec<Pointer>)> {
    if noise_sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be >= 0"));
    }
    let noisy = if noise_sigma == 0.0 {
        frame.gt_global.clone()
    } else {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::invalid(format!("bad noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = frame
            .gt_global
            .points()
            .iter()
            .zip(frame.gt_global.valid())
            .map(|(p, &v)| {
                if v {
                    p + Vector3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    )
                } else {
                    *p
                }
            })
            .collect();
        Pointmap::new(
            frame.height(),
            frame.width(),
            pts,
            frame.gt_global.valid().to_vec(),
            None,
        )?
    };

    let positions = patch_average_flat(&noisy, patch);
    let colors = patch_mean_colors(frame, patch);
    let mut pointers = Vec::new();
    for (pos, color) in positions.into_iter().zip(colors) {
        if let Some(pos) = pos {
            pointers.push(Pointer::new(pos, color, 0)?);
        }
    }
    Ok((noisy, pointers))
}

/// Mean RGB over the valid pixels of every patch (zeros when none).
fn patch_mean_colors(frame: &Frame, patch: usize) -> Vec<Vec<f64>> {
    let (h, w) = (frame.height(), frame.width());
    let gh = h.div_ceil(patch);
    let gw = w.div_ceil(patch);
    let mut out = Vec::with_capacity(gh * gw);
    for gu in 0..gh {
        for gv in 0..gw {
            let mut sum = [0.0; 3];
            let mut count = 0usize;
            for i in gu * patch..((gu + 1) * patch).min(h) {
                for j in gv * patch..((gv + 1) * patch).min(w) {
                    if frame.gt_global.valid()[i * w + j] {
                        for c in 0..3 {
                            sum[c] += frame.pixels[(i * w + j) * 3 + c];
                        }
                        count += 1;
                    }
                }
            }
            if count > 0 {
                out.push(sum.iter().map(|s| s / count as f64).collect());
            } else {
                out.push(vec![0.0; 3]);
            }
        }
    }
    out
}
