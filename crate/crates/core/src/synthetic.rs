//! Ray-cast synthetic environments: a textured room with box furniture, a camera
//! path through waypoints, and sparse landmark observations with a SLAM-like noise
//! model.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::keyframe::{look_at, Keyframe, SparsePoint};

/// Relative disagreement tolerated between a landmark's depth and the bilinear
/// interpolation of the rendered depth at its projection.
const SURFACE_TOL: f64 = 2e-3;
/// Landmarks closer than this to the image border are not selected.
const BORDER: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    /// Range of per-surface mean albedo.
    pub base: [f64; 2],
    /// Range of sinusoid wavelengths in meters.
    pub wavelength: [f64; 2],
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            base: [0.3, 0.7],
            wavelength: [0.4, 1.2],
            contrast: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Additive image noise standard deviation.
    pub sigma_i: f64,
    /// Multiplicative map-point depth noise.
    pub sigma_d: f64,
    /// Per-keyframe pose noise, applied to each twist component.
    pub sigma_t: f64,
    /// Fraction of landmarks whose estimate is pushed along the ray.
    pub outlier_ratio: f64,
    pub outlier_scale: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_i: 0.0,
            sigma_d: 0.0,
            sigma_t: 0.0,
            outlier_ratio: 0.0,
            outlier_scale: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub room: Aabb,
    #[serde(default)]
    pub boxes: Vec<Aabb>,
    #[serde(default)]
    pub texture: TextureSpec,
    pub waypoints: Vec<Waypoint>,
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub frame_dt: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_landmarks")]
    pub landmarks: usize,
    #[serde(default = "default_max_fts")]
    pub max_fts: usize,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_dt() -> f64 {
    0.1
}
fn default_landmarks() -> usize {
    4000
}
fn default_max_fts() -> usize {
    500
}
fn default_grid() -> usize {
    20
}
fn default_supersample() -> usize {
    2
}

impl SceneSpec {
    /// Furnished room viewed from one side.
    pub fn env_a(seed: u64, frames: usize) -> Self {
        Self {
            seed,
            width: 64,
            height: 48,
            hfov_deg: 70.0,
            room: Aabb {
                min: [-2.0, 0.0, -1.0],
                max: [2.0, 2.5, 4.0],
            },
            boxes: vec![
                Aabb {
                    min: [-0.6, 0.0, 1.2],
                    max: [0.4, 0.8, 2.0],
                },
                Aabb {
                    min: [1.0, 0.0, 2.5],
                    max: [1.6, 1.6, 3.2],
                },
                Aabb {
                    min: [-1.6, 0.0, 2.6],
                    max: [-1.0, 0.5, 3.4],
                },
            ],
            texture: TextureSpec::default(),
            waypoints: vec![
                Waypoint {
                    position: [-1.2, 1.3, -0.5],
                    look_at: [0.2, 0.8, 2.5],
                },
                Waypoint {
                    position: [1.2, 1.2, -0.4],
                    look_at: [-0.2, 0.8, 2.5],
                },
            ],
            frames,
            frame_dt: default_dt(),
            noise: NoiseSpec::default(),
            landmarks: default_landmarks(),
            max_fts: default_max_fts(),
            grid_size: 4,
            supersample: default_supersample(),
        }
    }

    /// Camera-facing panels in front of a distant wall, seen from a path that never
    /// rotates. Every visible surface is parallel to the image plane, so patch warps
    /// are exact and ground truth is the photometric optimum up to interpolation.
    pub fn layered(seed: u64, frames: usize) -> Self {
        let panel = |x: [f64; 2], y: [f64; 2], z: f64| Aabb {
            min: [x[0], y[0], z],
            max: [x[1], y[1], z + 0.02],
        };
        Self {
            room: Aabb {
                min: [-6.0, -4.0, -1.0],
                max: [6.0, 6.0, 4.5],
            },
            boxes: vec![
                panel([-1.5, -0.3], [0.3, 1.5], 1.8),
                panel([0.5, 1.7], [0.8, 2.2], 2.6),
                panel([-0.8, 0.6], [-0.2, 0.6], 3.2),
            ],
            waypoints: vec![
                Waypoint {
                    position: [-0.6, 1.0, -0.5],
                    look_at: [-0.6, 1.0, 3.5],
                },
                Waypoint {
                    position: [0.6, 1.2, -0.3],
                    look_at: [0.6, 1.2, 3.7],
                },
            ],
            landmarks: 40_000,
            grid_size: 2,
            ..Self::env_a(seed, frames)
        }
    }

    /// Long narrow corridor with darker, finer texture; the path first pans across
    /// the near end, then travels down the corridor.
    pub fn env_b(seed: u64, frames: usize) -> Self {
        Self {
            seed,
            width: 64,
            height: 48,
            hfov_deg: 70.0,
            room: Aabb {
                min: [-1.2, 0.0, -1.0],
                max: [1.2, 2.2, 7.0],
            },
            boxes: vec![
                Aabb {
                    min: [-1.2, 0.0, 1.0],
                    max: [-0.6, 1.0, 1.8],
                },
                Aabb {
                    min: [0.5, 0.0, 3.0],
                    max: [1.2, 1.4, 3.8],
                },
                Aabb {
                    min: [-0.4, 0.0, 5.2],
                    max: [0.4, 0.6, 6.0],
                },
            ],
            texture: TextureSpec {
                base: [0.2, 0.5],
                wavelength: [0.25, 0.7],
                contrast: 0.35,
            },
            waypoints: vec![
                Waypoint {
                    position: [0.0, 1.0, -0.6],
                    look_at: [-1.2, 0.7, 1.2],
                },
                Waypoint {
                    position: [0.0, 1.0, -0.6],
                    look_at: [1.2, 0.7, 1.2],
                },
                Waypoint {
                    position: [0.0, 1.1, 2.2],
                    look_at: [0.0, 0.8, 7.0],
                },
                Waypoint {
                    position: [0.0, 1.1, 4.0],
                    look_at: [-0.3, 0.6, 7.0],
                },
            ],
            frames,
            frame_dt: default_dt(),
            noise: NoiseSpec::default(),
            landmarks: default_landmarks(),
            max_fts: default_max_fts(),
            grid_size: 4,
            supersample: default_supersample(),
        }
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let f = (self.width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        Intrinsics::new(
            f,
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("empty image");
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) {
            return bad("hfov_deg must lie in (1, 170)");
        }
        if self.waypoints.is_empty() {
            return bad("at least one waypoint required");
        }
        if self.supersample == 0 || self.grid_size == 0 {
            return bad("supersample and grid_size must be positive");
        }
        let n = &self.noise;
        if n.sigma_i < 0.0 || n.sigma_d < 0.0 || n.sigma_t < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&n.outlier_ratio) || !(n.outlier_scale > 0.0) {
            return bad("outlier_ratio in [0, 1] and outlier_scale > 0 required");
        }
        let diag = (0..3)
            .map(|a| (self.room.max[a] - self.room.min[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if !(0..3).all(|a| self.room.max[a] > self.room.min[a]) || diag > 20.0 {
            return bad("room must be non-empty with diagonal at most 20 m");
        }
        for w in &self.waypoints {
            let p = Vector3::from(w.position);
            if !self.room.contains(&p) || self.boxes.iter().any(|b| b.contains(&p)) {
                return bad("waypoint outside free space");
            }
            if (Vector3::from(w.look_at) - p).norm() < 1e-6 {
                return bad("waypoint looks at itself");
            }
        }
        self.intrinsics().map(|_| ())
    }
}

#[derive(Clone, Debug)]
struct Wave {
    k: Vector2<f64>,
    phase: f64,
    amp: f64,
}

#[derive(Clone, Debug)]
struct Surface {
    base: f64,
    waves: Vec<Wave>,
    /// Axis the face is perpendicular to.
    axis: usize,
}

impl Surface {
    fn albedo(&self, p: &Vector3<f64>) -> f64 {
        let (a, b) = match self.axis {
            0 => (p.y, p.z),
            1 => (p.x, p.z),
            _ => (p.x, p.y),
        };
        let mut v = self.base;
        for w in &self.waves {
            v += w.amp * (w.k.x * a + w.k.y * b + w.phase).sin();
        }
        v
    }
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    surface: usize,
}

#[derive(Clone, Debug)]
struct Landmark {
    position: Vector3<f64>,
    estimate: Vector3<f64>,
    outlier: bool,
}

/// Per-pixel ray-cast output at pixel centers.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    surface: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    surfaces: Vec<Surface>,
    landmarks: Vec<Landmark>,
}

const LIGHT: [f64; 3] = [0.3, 0.8, -0.5];

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

const STREAM_TEXTURE: u64 = 1;
const STREAM_LANDMARK: u64 = 2;
const STREAM_POSE: u64 = 3;
const STREAM_IMAGE: u64 = 4;

impl SyntheticScene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let intrinsics = spec.intrinsics()?;
        let mut rng = stream_rng(spec.seed, STREAM_TEXTURE, 0);
        let n_faces = 6 * (1 + spec.boxes.len());
        let tex = &spec.texture;
        let surfaces = (0..n_faces)
            .map(|f| {
                let base = rng.gen_range(tex.base[0]..=tex.base[1]);
                let waves = (0..3)
                    .map(|_| {
                        let wl = rng.gen_range(tex.wavelength[0]..=tex.wavelength[1]);
                        let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                        let k = Vector2::new(ang.cos(), ang.sin()) * (std::f64::consts::TAU / wl);
                        Wave {
                            k,
                            phase: rng.gen_range(0.0..std::f64::consts::TAU),
                            amp: tex.contrast * rng.gen_range(0.5..1.0) / 3.0,
                        }
                    })
                    .collect();
                Surface {
                    base,
                    waves,
                    axis: (f % 6) / 2,
                }
            })
            .collect();
        let mut scene = Self {
            spec,
            intrinsics,
            surfaces,
            landmarks: Vec::new(),
        };
        scene.landmarks = scene.sample_landmarks();
        Ok(scene)
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    /// Faces as (axis, fixed coordinate, other-axis ranges).
    fn faces(&self) -> Vec<(usize, f64, [(usize, f64, f64); 2])> {
        let mut out = Vec::new();
        let boxes = std::iter::once(&self.spec.room).chain(self.spec.boxes.iter());
        for b in boxes {
            for axis in 0..3 {
                let others = [(axis + 1) % 3, (axis + 2) % 3];
                let ranges = others.map(|o| (o, b.min[o], b.max[o]));
                out.push((axis, b.min[axis], ranges));
                out.push((axis, b.max[axis], ranges));
            }
        }
        out
    }

    fn sample_landmarks(&self) -> Vec<Landmark> {
        let faces = self.faces();
        let areas: Vec<f64> = faces
            .iter()
            .map(|(_, _, r)| (r[0].2 - r[0].1) * (r[1].2 - r[1].1))
            .collect();
        let total: f64 = areas.iter().sum();
        let mut rng = stream_rng(self.spec.seed, STREAM_LANDMARK, 0);
        let positions: Vec<Vector3<f64>> = (0..self.spec.landmarks)
            .map(|_| {
                let mut pick = rng.gen_range(0.0..total);
                let mut f = 0;
                while f + 1 < faces.len() && pick >= areas[f] {
                    pick -= areas[f];
                    f += 1;
                }
                let (axis, c, r) = faces[f];
                let mut p = Vector3::zeros();
                p[axis] = c;
                for (o, lo, hi) in r {
                    let inset = 1e-3 * (hi - lo);
                    p[o] = rng.gen_range(lo + inset..hi - inset);
                }
                p
            })
            .collect();
        // Noise is applied along the ray from the first camera that sees the landmark.
        let mut anchor: Vec<Option<Vector3<f64>>> = vec![None; positions.len()];
        for i in 0..self.spec.frames {
            let pose = self.gt_pose(i);
            let c_from_w = pose.inverse();
            for (l, p) in positions.iter().enumerate() {
                if anchor[l].is_none() && self.visible(&pose, &c_from_w, p).is_some() {
                    anchor[l] = Some(pose.translation);
                }
            }
        }
        let noise = &self.spec.noise;
        positions
            .into_iter()
            .enumerate()
            .map(|(l, position)| {
                let mut r = stream_rng(self.spec.seed, STREAM_LANDMARK, 1 + l as u64);
                let n: f64 = StandardNormal.sample(&mut r);
                let outlier = r.gen::<f64>() < noise.outlier_ratio;
                let mut s = (1.0 + noise.sigma_d * n).max(0.2);
                if outlier {
                    s *= noise.outlier_scale;
                }
                let estimate = match anchor[l] {
                    Some(c) => c + (position - c) * s,
                    None => position,
                };
                Landmark {
                    position,
                    estimate,
                    outlier,
                }
            })
            .collect()
    }

    /// Ground-truth world-from-camera pose of frame `i`.
    pub fn gt_pose(&self, i: usize) -> PoseSE3 {
        let wps = &self.spec.waypoints;
        let at = |w: &Waypoint| (Vector3::from(w.position), Vector3::from(w.look_at));
        let (eye, target) = if wps.len() == 1 || self.spec.frames <= 1 {
            at(&wps[0])
        } else {
            // Uniform in a blend of path length and look-at sweep so pure pans advance.
            let seg_len: Vec<f64> = wps
                .windows(2)
                .map(|w| {
                    let (p0, l0) = at(&w[0]);
                    let (p1, l1) = at(&w[1]);
                    (p1 - p0).norm() + 0.25 * (l1 - l0).norm()
                })
                .collect();
            let total: f64 = seg_len.iter().sum();
            let mut s = total * i as f64 / (self.spec.frames - 1) as f64;
            let mut k = 0;
            while k + 1 < seg_len.len() && s > seg_len[k] {
                s -= seg_len[k];
                k += 1;
            }
            let f = if seg_len[k] > 0.0 {
                (s / seg_len[k]).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (p0, l0) = at(&wps[k]);
            let (p1, l1) = at(&wps[k + 1]);
            (p0 + (p1 - p0) * f, l0 + (l1 - l0) * f)
        };
        look_at(&eye, &target, &Vector3::y())
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let room = &self.spec.room;
        let mut t_exit = f64::INFINITY;
        let mut face = 0;
        for a in 0..3 {
            if dir[a] > 0.0 {
                let t = (room.max[a] - origin[a]) / dir[a];
                if t < t_exit {
                    t_exit = t;
                    face = 2 * a + 1;
                }
            } else if dir[a] < 0.0 {
                let t = (room.min[a] - origin[a]) / dir[a];
                if t < t_exit {
                    t_exit = t;
                    face = 2 * a;
                }
            }
        }
        if t_exit.is_finite() && t_exit > 0.0 {
            best = Some(Hit {
                t: t_exit,
                surface: face,
            });
        }
        for (b, bx) in self.spec.boxes.iter().enumerate() {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_face = 0;
            let mut miss = false;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] <= bx.min[a] || origin[a] >= bx.max[a] {
                        miss = true;
                        break;
                    }
                    continue;
                }
                let t0 = (bx.min[a] - origin[a]) / dir[a];
                let t1 = (bx.max[a] - origin[a]) / dir[a];
                let (lo, hi, f) = if t0 < t1 {
                    (t0, t1, 2 * a)
                } else {
                    (t1, t0, 2 * a + 1)
                };
                if lo > t_near {
                    t_near = lo;
                    near_face = f;
                }
                t_far = t_far.min(hi);
            }
            if miss || t_near > t_far || t_near <= 0.0 {
                continue;
            }
            if best.map_or(true, |h| t_near < h.t) {
                best = Some(Hit {
                    t: t_near,
                    surface: 6 * (b + 1) + near_face,
                });
            }
        }
        best
    }

    fn shade(&self, surface: usize, p: &Vector3<f64>) -> f64 {
        let axis = self.surfaces[surface].axis;
        let light = Vector3::from(LIGHT).normalize();
        let lambert = 0.75 + 0.25 * light[axis].abs();
        (self.surfaces[surface].albedo(p) * lambert).clamp(0.02, 0.98)
    }

    /// Noise-free image, pixel-center depth and surface labels for a camera pose.
    pub fn render_view(&self, world_from_camera: &PoseSE3) -> Render {
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let r = world_from_camera.rotation_matrix();
        let o = world_from_camera.translation;
        let ss = self.spec.supersample;
        let mut image = vec![0f32; w * h];
        let mut depth = vec![0f32; w * h];
        let mut surface = vec![usize::MAX; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let center = r * k.ray(&Vector2::new(x as f64, y as f64));
                if let Some(hit) = self.cast(&o, &center) {
                    depth[i] = hit.t as f32;
                    surface[i] = hit.surface;
                }
                let mut acc = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let d = r * k.ray(&Vector2::new(px, py));
                        if let Some(hit) = self.cast(&o, &d) {
                            acc += self.shade(hit.surface, &(o + d * hit.t));
                        }
                    }
                }
                image[i] = (acc / (ss * ss) as f64) as f32;
            }
        }
        Render {
            image: Tensor::new([h, w], image).expect("sized"),
            depth: Tensor::new([h, w], depth).expect("sized"),
            surface,
        }
    }

    /// Projection of `p` if unoccluded, inside the selection border and on a locally
    /// smooth part of the depth map.
    fn visible(
        &self,
        world_from_camera: &PoseSE3,
        camera_from_world: &PoseSE3,
        p: &Vector3<f64>,
    ) -> Option<(Vector2<f64>, f64)> {
        let k = &self.intrinsics;
        let proj = k.project(&camera_from_world.transform(p));
        let (u, v) = (proj.pixel.x, proj.pixel.y);
        if !proj.valid
            || u < BORDER
            || v < BORDER
            || u > (k.width - 1) as f64 - BORDER
            || v > (k.height - 1) as f64 - BORDER
        {
            return None;
        }
        let o = world_from_camera.translation;
        let hit = self.cast(&o, &(p - o))?;
        if (hit.t - 1.0).abs() > 1e-6 {
            return None;
        }
        Some((proj.pixel, proj.depth))
    }

    /// Keyframe `i` with estimated pose, noisy image and sparse observations.
    pub fn render(&self, i: usize) -> Result<Keyframe> {
        if i >= self.spec.frames {
            return Err(Error::invalid(format!(
                "frame {i} outside trajectory of {} frames",
                self.spec.frames
            )));
        }
        let gt_pose = self.gt_pose(i);
        let view = self.render_view(&gt_pose);
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let noise = &self.spec.noise;

        let pose = if i == 0 || noise.sigma_t == 0.0 {
            gt_pose
        } else {
            let mut r = stream_rng(self.spec.seed, STREAM_POSE, i as u64);
            let xi = Vector6::from_fn(|_, _| {
                noise.sigma_t * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
            });
            gt_pose.compose(&PoseSE3::exp(&xi))
        };

        let grad = |x: usize, y: usize| -> f64 {
            let x0 = x.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            let gx = view.image.at(y, x1) - view.image.at(y, x0);
            let gy = view.image.at(y1, x) - view.image.at(y0, x);
            ((gx * gx + gy * gy) as f64).sqrt()
        };

        let g = self.spec.grid_size;
        let (gw, gh) = (w.div_ceil(g), h.div_ceil(g));
        let mut cells: Vec<Option<(f64, usize, Vector2<f64>)>> = vec![None; gw * gh];
        let gt_c_from_w = gt_pose.inverse();
        for (l, lm) in self.landmarks.iter().enumerate() {
            let Some((px, z)) = self.visible(&gt_pose, &gt_c_from_w, &lm.position) else {
                continue;
            };
            let (u, v) = (px.x, px.y);
            // The whole 3x3 patch around the point and its bilinear footprint must lie
            // on one surface.
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let s = view.surface[y0 * w + x0];
            let mixed = (y0 - 1..=(y0 + 2).min(h - 1))
                .any(|y| (x0 - 1..=(x0 + 2).min(w - 1)).any(|x| view.surface[y * w + x] != s));
            if mixed {
                continue;
            }
            match bilinear(&view.depth, u, v) {
                Some(d) if ((d - z) / z).abs() <= SURFACE_TOL => {}
                _ => continue,
            }
            let score = grad(u.round() as usize, v.round() as usize);
            let cell = (v as usize / g) * gw + (u as usize / g);
            if cells[cell].map_or(true, |(best, _, _)| score > best) {
                cells[cell] = Some((score, l, px));
            }
        }
        let c_from_w = pose.inverse();
        let mut sparse_points = Vec::new();
        for (_, l, px) in cells.into_iter().flatten() {
            if sparse_points.len() >= self.spec.max_fts {
                break;
            }
            let z = c_from_w.transform(&self.landmarks[l].estimate).z;
            if z > 0.0 {
                sparse_points.push(SparsePoint {
                    u: px.x as f32,
                    v: px.y as f32,
                    depth: z as f32,
                    map_point_id: l as u64,
                });
            }
        }

        let mut image = view.image;
        if noise.sigma_i > 0.0 {
            let mut r = stream_rng(self.spec.seed, STREAM_IMAGE, i as u64);
            for v in image.data_mut() {
                let n: f64 = StandardNormal.sample(&mut r);
                *v = (*v as f64 + noise.sigma_i * n).clamp(0.0, 1.0) as f32;
            }
        }
        Ok(Keyframe {
            id: i as u64,
            timestamp: i as f64 * self.spec.frame_dt,
            image,
            pose,
            sparse_points,
            gt_depth: Some(view.depth),
            gt_pose: Some(gt_pose),
            last_val_loss: None,
        })
    }

    pub fn render_all(&self) -> Result<Vec<Keyframe>> {
        (0..self.spec.frames).map(|i| self.render(i)).collect()
    }

    /// Landmark ids whose map-point estimate was displaced as an outlier.
    pub fn outliers(&self) -> BTreeSet<u64> {
        self.landmarks
            .iter()
            .enumerate()
            .filter(|(_, l)| l.outlier)
            .map(|(i, _)| i as u64)
            .collect()
    }

    pub fn landmark_position(&self, id: u64) -> Option<Vector3<f64>> {
        self.landmarks.get(id as usize).map(|l| l.position)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(frames: usize) -> SceneSpec {
        let mut s = SceneSpec::env_a(5, frames);
        s.width = 32;
        s.height = 24;
        s.landmarks = 1500;
        s
    }

    #[test]
    fn depths_are_bounded_and_images_in_range() {
        let scene = SyntheticScene::new(small(4)).unwrap();
        for kf in scene.render_all().unwrap() {
            let d = kf.gt_depth.as_ref().unwrap();
            assert!(d.data().iter().all(|&z| z > 0.0 && z <= 20.0));
            assert!(kf.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn renders_are_deterministic() {
        let a = SyntheticScene::new(small(3)).unwrap().render(2).unwrap();
        let b = SyntheticScene::new(small(3)).unwrap().render(2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_sparse_depth_matches_ray_cast_depth() {
        let scene = SyntheticScene::new(small(3)).unwrap();
        let kf = scene.render(1).unwrap();
        assert!(kf.sparse_points.len() > 10);
        let k = scene.intrinsics;
        for sp in &kf.sparse_points {
            let gt = bilinear(kf.gt_depth.as_ref().unwrap(), sp.u as f64, sp.v as f64).unwrap();
            assert!(((gt - sp.depth as f64) / gt).abs() <= SURFACE_TOL + 1e-6);
            // The landmark lies on the ray through the reported pixel at the reported depth.
            let lm = scene.landmark_position(sp.map_point_id).unwrap();
            let x = kf.pose.transform(&k.backproject(&sp.pixel(), sp.depth as f64).unwrap());
            assert!((x - lm).norm() < 1e-5);
        }
    }

    #[test]
    fn sparse_points_respect_grid_and_cap() {
        let mut spec = small(2);
        spec.max_fts = 7;
        let scene = SyntheticScene::new(spec.clone()).unwrap();
        assert!(scene.render(0).unwrap().sparse_points.len() <= 7);
        spec.max_fts = 500;
        let kf = SyntheticScene::new(spec.clone()).unwrap().render(0).unwrap();
        let mut cells = BTreeSet::new();
        for sp in &kf.sparse_points {
            let c = (sp.v as usize / spec.grid_size, sp.u as usize / spec.grid_size);
            assert!(cells.insert(c), "two points in cell {c:?}");
        }
    }

    #[test]
    fn reprojection_with_true_depth_hits_the_same_point() {
        let scene = SyntheticScene::new(small(6)).unwrap();
        let a = scene.render(0).unwrap();
        let b = scene.render(5).unwrap();
        let k = scene.intrinsics;
        let b_from_a = a.to_frame_of(&b);
        let da = a.gt_depth.as_ref().unwrap();
        let r_b = b.pose.rotation_matrix();
        let o_b = b.pose.translation;
        let mut checked = 0;
        for y in 0..k.height {
            for x in 0..k.width {
                let p = Vector2::new(x as f64, y as f64);
                let xa = k.backproject(&p, da.at(y, x) as f64).unwrap();
                let proj = k.project(&b_from_a.transform(&xa));
                if !proj.valid {
                    continue;
                }
                let world = a.pose.transform(&xa);
                // Ray cast through the reprojected subpixel in the second view.
                let dir = r_b * k.ray(&proj.pixel);
                let hit = scene.cast(&o_b, &dir).unwrap();
                if hit.t < proj.depth * (1.0 - 1e-4) {
                    continue; // occluded in the second view
                }
                let seen = o_b + dir * hit.t;
                let err = k.project(&b.pose.inverse().transform(&seen)).pixel - proj.pixel;
                assert!(err.norm() < 0.5);
                assert!((seen - world).norm() < 1e-3 * proj.depth);
                checked += 1;
            }
        }
        assert!(checked > 200, "{checked}");
    }

    #[test]
    fn outliers_follow_ratio() {
        let mut spec = small(3);
        spec.noise.outlier_ratio = 0.2;
        let scene = SyntheticScene::new(spec.clone()).unwrap();
        let frac = scene.outliers().len() as f64 / spec.landmarks as f64;
        assert!((frac - 0.2).abs() < 0.04, "{frac}");
    }

    #[test]
    fn pose_noise_leaves_first_frame_fixed() {
        let mut spec = small(3);
        spec.noise.sigma_t = 0.01;
        let scene = SyntheticScene::new(spec).unwrap();
        let k0 = scene.render(0).unwrap();
        let k1 = scene.render(1).unwrap();
        assert_eq!(k0.pose, k0.gt_pose.unwrap());
        assert_ne!(k1.pose, k1.gt_pose.unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(2);
        s.waypoints[0].position = [10.0, 0.0, 0.0];
        assert!(SyntheticScene::new(s).is_err());
        let mut s = small(2);
        s.noise.outlier_ratio = 2.0;
        assert!(SyntheticScene::new(s).is_err());
    }
}
