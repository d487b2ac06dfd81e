//! Depth-gated map-point culling and global photometric bundle adjustment over
//! keyframe poses and host-frame inverse depths.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3x6, RowVector3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{skew, Intrinsics, PoseSE3, Z_EPS};
use crate::keyframe::{pose_distance, KeyframeGraph, KeyframeStore, MapPoint};

/// Maximum number of keyframes (host included) a landmark is compared against.
pub const MAX_EDGES: usize = 5;
/// Weight of the rotation angle (radians) against translation (meters) when ranking
/// nearby keyframes.
pub const NEARBY_ROTATION_WEIGHT: f64 = 0.5;
/// 3x3 patch offsets in pixels.
pub const PATCH: [(f64, f64); 9] = [
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
    (-1.0, 0.0),
    (0.0, 0.0),
    (1.0, 0.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (1.0, 1.0),
];
/// Distance from the border a patch centre must keep so every patch pixel and its
/// gradient can be interpolated.
const BORDER: f64 = 2.0;
const DAMPING_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CullConfig {
    pub gamma: f64,
    /// Depth beyond which the network is not trusted, in meters.
    pub d_max: f64,
}

impl Default for CullConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            d_max: 1.5,
        }
    }
}

impl CullConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.d_max > 0.0) {
            return Err(Error::Config("cull gamma and d_max must be positive".into()));
        }
        Ok(())
    }
}

/// Keep a map point when its depth agrees with the network or the network reads beyond
/// its trusted range.
pub fn cull_check(d_mp: f64, d_cnn: f64, cfg: &CullConfig) -> Result<bool> {
    if !(d_mp > 0.0 && d_cnn > 0.0) {
        return Err(Error::invalid(format!(
            "cull check needs positive depths, got {d_mp} and {d_cnn}"
        )));
    }
    Ok((d_mp - d_cnn).abs() < cfg.gamma * d_cnn || d_cnn > cfg.d_max)
}

/// Observing keyframe with the lowest cached validation loss, ties to the lower id.
pub fn select_host(mp: &MapPoint, store: &KeyframeStore) -> Option<u64> {
    mp.observations
        .iter()
        .filter_map(|(id, _)| store.get(*id).and_then(|k| k.last_val_loss).map(|l| (l, *id)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CullReport {
    pub kept: usize,
    pub culled: BTreeSet<u64>,
    /// Points whose host could not be chosen; kept.
    pub deferred: usize,
    /// Points that do not project into their host or have no depth map; kept.
    pub unprojectable: usize,
    pub hosts: BTreeMap<u64, u64>,
}

/// Assigns hosts, tests every surviving point against its host depth map and marks
/// failures culled.
pub fn cull_map(
    store: &mut KeyframeStore,
    depth_maps: &BTreeMap<u64, Tensor<f32>>,
    cfg: &CullConfig,
) -> Result<CullReport> {
    cfg.validate()?;
    let k = store.intrinsics;
    let mut report = CullReport::default();
    let mut hosts = Vec::new();
    for mp in store.map_points().values().filter(|m| !m.culled) {
        let Some(host) = select_host(mp, store) else {
            report.deferred += 1;
            report.kept += 1;
            continue;
        };
        hosts.push((mp.id, host));
        let kf = store.get(host).expect("host observes the point");
        let proj = k.project(&kf.camera_from_world().transform(&mp.position));
        let d_cnn = depth_maps
            .get(&host)
            .filter(|_| proj.valid)
            .and_then(|d| bilinear(d, proj.pixel.x, proj.pixel.y));
        match d_cnn {
            Some(d) if d > 0.0 => {
                if cull_check(proj.depth, d, cfg)? {
                    report.kept += 1;
                } else {
                    report.culled.insert(mp.id);
                }
            }
            _ => {
                report.unprojectable += 1;
                report.kept += 1;
            }
        }
    }
    for (id, host) in hosts {
        store.map_points_mut().get_mut(&id).expect("listed").host_kf = Some(host);
        report.hosts.insert(id, host);
    }
    store.mark_culled(&report.culled);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaOptions {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    /// Consecutive rejected steps before giving up.
    pub max_rejects: usize,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub tolerance: f64,
    /// Infinity norm of the gradient below which the current state is a fixed point.
    pub gradient_tolerance: f64,
    pub huber: bool,
    pub huber_delta: f64,
    /// Edges whose patch RMS residual exceeds this at the start of the solve are left
    /// out (occluded or non-overlapping views).
    pub edge_outlier_rms: f64,
    /// Gates for follow-up passes. Each pass drops the edges that fail its gate at
    /// the previous solution and continues from there, so a coarse first gate can be
    /// tightened once the poses are close.
    pub regate: Vec<f64>,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iters: 30,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            max_rejects: 8,
            tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            huber: false,
            huber_delta: 0.1,
            edge_outlier_rms: 0.15,
            regate: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaFrame {
    pub kf_id: u64,
    pub image: Tensor<f32>,
}

impl BaFrame {
    pub fn new(kf_id: u64, image: Tensor<f32>) -> Self {
        Self { kf_id, image }
    }
}

fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    (
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
        [
            0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
            0.5 * (9.0 * t2 - 10.0 * t),
            0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
            0.5 * (3.0 * t2 - 2.0 * t),
        ],
    )
}

/// Bicubic (Catmull-Rom) intensity and its exact image-space gradient. Taps beyond
/// the border repeat the edge pixel.
fn sample(image: &Tensor<f32>, u: f64, v: f64) -> Option<(f64, Vector2<f64>)> {
    let (h, w) = image.hw();
    if !(u.is_finite() && v.is_finite()) || u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (u.floor(), v.floor());
    let (wx, dx) = catmull_rom(u - x0);
    let (wy, dy) = catmull_rom(v - y0);
    let d = image.data();
    let (mut val, mut gx, mut gy) = (0.0, 0.0, 0.0);
    for (j, (wyj, dyj)) in wy.iter().zip(&dy).enumerate() {
        let y = (y0 as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
        let (mut row, mut drow) = (0.0, 0.0);
        for (i, (wxi, dxi)) in wx.iter().zip(&dx).enumerate() {
            let x = (x0 as isize + i as isize - 1).clamp(0, w as isize - 1) as usize;
            let p = d[y * w + x] as f64;
            row += wxi * p;
            drow += dxi * p;
        }
        val += wyj * row;
        gx += wyj * drow;
        gy += dyj * row;
    }
    Some((val, Vector2::new(gx, gy)))
}

#[derive(Clone, Debug)]
pub struct BaLandmark {
    pub point_id: u64,
    /// Frame index of the host keyframe.
    pub host: usize,
    /// Patch centre in the host image.
    pub pixel: Vector2<f64>,
    /// Frame indices compared against: observing keyframes first, then nearby ones.
    pub edges: Vec<usize>,
    rays: [Vector3<f64>; 9],
    reference: [f64; 9],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaState {
    /// World from camera, one per frame.
    pub poses: Vec<PoseSE3>,
    pub inverse_depth: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BaProblem {
    pub intrinsics: Intrinsics,
    pub frames: Vec<BaFrame>,
    pub landmarks: Vec<BaLandmark>,
    /// Frames whose pose is held constant; the first frame fixes the gauge.
    pub fixed: Vec<bool>,
    pub initial: BaState,
    /// Landmarks dropped for having fewer than two usable edges.
    pub dropped: usize,
    /// Landmarks skipped because no host could be chosen.
    pub deferred: usize,
}

fn patch_inside(k: &Intrinsics, p: &Vector2<f64>) -> bool {
    p.x >= BORDER
        && p.y >= BORDER
        && p.x <= k.width as f64 - 1.0 - BORDER
        && p.y <= k.height as f64 - 1.0 - BORDER
}

/// Host pixel and inverse depth of a world point, if its patch fits in the host image.
fn host_view(k: &Intrinsics, host_pose: &PoseSE3, x: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    let proj = k.project(&host_pose.inverse().transform(x));
    (proj.valid && patch_inside(k, &proj.pixel)).then(|| (proj.pixel, 1.0 / proj.depth))
}

fn edge_visible(k: &Intrinsics, pose: &PoseSE3, x: &Vector3<f64>) -> bool {
    let proj = k.project(&pose.inverse().transform(x));
    proj.valid && patch_inside(k, &proj.pixel)
}

impl BaProblem {
    /// Builds the problem from map points with a host (assigned or selectable by
    /// validation loss). `only` restricts to the given point ids.
    pub fn build(store: &KeyframeStore, only: Option<&BTreeSet<u64>>) -> Result<Self> {
        if store.len() < 2 {
            return Err(Error::invalid("bundle adjustment needs at least two keyframes"));
        }
        let k = store.intrinsics;
        let kfs = store.keyframes();
        let frames: Vec<BaFrame> = kfs.iter().map(|kf| BaFrame::new(kf.id, kf.image.clone())).collect();
        let poses: Vec<PoseSE3> = kfs.iter().map(|kf| kf.pose).collect();
        let mut fixed = vec![false; frames.len()];
        fixed[0] = true;
        let mut landmarks = Vec::new();
        let mut inverse_depth = Vec::new();
        let (mut dropped, mut deferred) = (0, 0);
        for mp in store.map_points().values() {
            if mp.culled || only.is_some_and(|s| !s.contains(&mp.id)) {
                continue;
            }
            let Some(host_id) = mp.host_kf.or_else(|| select_host(mp, store)) else {
                deferred += 1;
                continue;
            };
            let host = store.index_of(host_id).expect("host is a stored keyframe");
            let Some((pixel, rho)) = host_view(&k, &poses[host], &mp.position) else {
                dropped += 1;
                continue;
            };
            let mut edges = Vec::with_capacity(MAX_EDGES);
            let consider = |f: usize, edges: &mut Vec<usize>| {
                if edges.len() < MAX_EDGES
                    && !edges.contains(&f)
                    && (f == host || edge_visible(&k, &poses[f], &mp.position))
                {
                    edges.push(f);
                }
            };
            for (id, _) in &mp.observations {
                if let Some(f) = store.index_of(*id) {
                    consider(f, &mut edges);
                }
            }
            consider(host, &mut edges);
            let mut nearby: Vec<(f64, usize)> = (0..frames.len())
                .map(|f| (pose_distance(&poses[host], &poses[f], NEARBY_ROTATION_WEIGHT), f))
                .collect();
            nearby.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, f) in nearby {
                consider(f, &mut edges);
            }
            if edges.len() < 2 {
                dropped += 1;
                continue;
            }
            let image = &frames[host].image;
            let mut rays = [Vector3::zeros(); 9];
            let mut reference = [0.0; 9];
            for (j, (du, dv)) in PATCH.iter().enumerate() {
                let p = Vector2::new(pixel.x + du, pixel.y + dv);
                rays[j] = k.ray(&p);
                reference[j] = sample(image, p.x, p.y).expect("patch inside host").0;
            }
            landmarks.push(BaLandmark {
                point_id: mp.id,
                host,
                pixel,
                edges,
                rays,
                reference,
            });
            inverse_depth.push(rho);
        }
        Ok(Self {
            intrinsics: k,
            frames,
            landmarks,
            fixed,
            initial: BaState { poses, inverse_depth },
            dropped,
            deferred,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.landmarks.iter().map(|l| l.edges.len()).sum()
    }

    /// Number of pose parameters and the block index of each free frame.
    fn pose_blocks(&self) -> (usize, Vec<Option<usize>>) {
        let mut n = 0;
        let idx = self
            .fixed
            .iter()
            .map(|f| {
                if *f {
                    None
                } else {
                    n += 1;
                    Some(n - 1)
                }
            })
            .collect();
        (n, idx)
    }

    fn residual(&self, st: &BaState, l: usize, target: usize, j: usize) -> Option<Residual> {
        let lm = &self.landmarks[l];
        let rho = st.inverse_depth[l];
        let xh = lm.rays[j] / rho;
        let xw = st.poses[lm.host].transform(&xh);
        let xt = st.poses[target].inverse().transform(&xw);
        if xt.z <= Z_EPS {
            return None;
        }
        let k = &self.intrinsics;
        let p = Vector2::new(k.fx * xt.x / xt.z + k.cx, k.fy * xt.y / xt.z + k.cy);
        let f = &self.frames[target];
        let (value, grad) = sample(&f.image, p.x, p.y)?;
        Some(Residual {
            e: value - lm.reference[j],
            grad,
            xh,
            xt,
        })
    }

    /// Residuals that can be evaluated at `st` on edges passing the outlier gate; the
    /// solve keeps this set fixed.
    pub fn active_set(&self, st: &BaState, outlier_rms: f64) -> Vec<Vec<[bool; 9]>> {
        self.landmarks
            .iter()
            .enumerate()
            .map(|(l, lm)| {
                lm.edges
                    .iter()
                    .map(|&t| {
                        let mut m = [false; 9];
                        if t == lm.host {
                            return m;
                        }
                        let mut sq = 0.0;
                        let mut n = 0;
                        for (j, slot) in m.iter_mut().enumerate() {
                            if let Some(r) = self.residual(st, l, t, j) {
                                *slot = true;
                                sq += r.e * r.e;
                                n += 1;
                            }
                        }
                        if n == 0 || (sq / n as f64).sqrt() > outlier_rms {
                            m = [false; 9];
                        }
                        m
                    })
                    .collect()
            })
            .collect()
    }

    /// Cost over the active set; `None` if any active residual became unevaluable.
    pub fn cost(&self, st: &BaState, active: &[Vec<[bool; 9]>], opts: &BaOptions) -> Option<f64> {
        let mut c = 0.0;
        for (l, lm) in self.landmarks.iter().enumerate() {
            for (ei, &t) in lm.edges.iter().enumerate() {
                for j in 0..9 {
                    if active[l][ei][j] {
                        c += robust_cost(self.residual(st, l, t, j)?.e, opts);
                    }
                }
            }
        }
        Some(c)
    }

    /// Gauss-Newton blocks at `st`.
    pub fn linearize(&self, st: &BaState, active: &[Vec<[bool; 9]>], opts: &BaOptions) -> Linearization {
        let (np, block) = self.pose_blocks();
        let mut lin = Linearization {
            hpp: DMatrix::zeros(6 * np, 6 * np),
            bp: DVector::zeros(6 * np),
            hll: vec![0.0; self.landmarks.len()],
            bl: vec![0.0; self.landmarks.len()],
            hpl: vec![Vec::new(); self.landmarks.len()],
            cost: 0.0,
        };
        let k = &self.intrinsics;
        for (l, lm) in self.landmarks.iter().enumerate() {
            let rho = st.inverse_depth[l];
            let r_h = st.poses[lm.host].rotation_matrix();
            for (ei, &t) in lm.edges.iter().enumerate() {
                let r_t_inv = st.poses[t].rotation_matrix().transpose();
                let r_th = r_t_inv * r_h;
                for j in 0..9 {
                    if !active[l][ei][j] {
                        continue;
                    }
                    let Some(res) = self.residual(st, l, t, j) else {
                        continue;
                    };
                    let w = robust_weight(res.e, opts);
                    lin.cost += robust_cost(res.e, opts);
                    // d e / d x_t
                    let gj: RowVector3<f64> = res.grad.transpose() * k.project_jacobian(&res.xt);
                    let mut dt = Matrix3x6::zeros();
                    dt.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-nalgebra::Matrix3::identity()));
                    dt.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&res.xt));
                    let mut dh = Matrix3x6::zeros();
                    dh.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_th);
                    dh.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_th * skew(&res.xh)));
                    let jt: Vector6<f64> = (gj * dt).transpose();
                    let jh: Vector6<f64> = (gj * dh).transpose();
                    let jr = (gj * (r_th * (-res.xh / rho)))[0];
                    lin.hll[l] += w * jr * jr;
                    lin.bl[l] += w * jr * res.e;
                    for (frame, jac) in [(t, jt), (lm.host, jh)] {
                        let Some(a) = block[frame] else { continue };
                        lin.bp.rows_mut(6 * a, 6).axpy(w * res.e, &jac, 1.0);
                        add_hpl(&mut lin.hpl[l], a, jac * (w * jr));
                        for (frame2, jac2) in [(t, jt), (lm.host, jh)] {
                            let Some(b) = block[frame2] else { continue };
                            let mut blk = lin.hpp.view_mut((6 * a, 6 * b), (6, 6));
                            blk += jac * jac2.transpose() * w;
                        }
                    }
                }
            }
        }
        lin
    }

    /// Damped step via the reduced camera system.
    pub fn schur_step(&self, lin: &Linearization, lambda: f64) -> Result<(DVector<f64>, Vec<f64>)> {
        let n = lin.bp.len();
        let mut s = lin.hpp.clone();
        for i in 0..n {
            s[(i, i)] = damp(s[(i, i)], lambda);
        }
        let mut g = lin.bp.clone();
        let hll: Vec<f64> = lin.hll.iter().map(|h| damp(*h, lambda)).collect();
        for (l, blocks) in lin.hpl.iter().enumerate() {
            let inv = 1.0 / hll[l];
            for (a, va) in blocks {
                g.rows_mut(6 * a, 6).axpy(-inv * lin.bl[l], va, 1.0);
                for (b, vb) in blocks {
                    let mut blk = s.view_mut((6 * a, 6 * b), (6, 6));
                    blk -= va * vb.transpose() * inv;
                }
            }
        }
        let dp = if n == 0 {
            DVector::zeros(0)
        } else {
            s.cholesky()
                .ok_or_else(|| Error::Solve("reduced camera system not positive definite".into()))?
                .solve(&(-g))
        };
        let dl = lin
            .hpl
            .iter()
            .enumerate()
            .map(|(l, blocks)| {
                let coupled: f64 = blocks.iter().map(|(a, v)| v.dot(&dp.rows(6 * a, 6))).sum();
                (-lin.bl[l] - coupled) / hll[l]
            })
            .collect();
        Ok((dp, dl))
    }

    /// Same damped step from the full normal equations, for small problems.
    pub fn dense_step(&self, lin: &Linearization, lambda: f64) -> Result<(DVector<f64>, Vec<f64>)> {
        let np = lin.bp.len();
        let nl = lin.hll.len();
        let mut h = DMatrix::zeros(np + nl, np + nl);
        let mut b = DVector::zeros(np + nl);
        h.view_mut((0, 0), (np, np)).copy_from(&lin.hpp);
        b.rows_mut(0, np).copy_from(&lin.bp);
        for l in 0..nl {
            h[(np + l, np + l)] = lin.hll[l];
            b[np + l] = lin.bl[l];
            for (a, v) in &lin.hpl[l] {
                for r in 0..6 {
                    h[(6 * a + r, np + l)] = v[r];
                    h[(np + l, 6 * a + r)] = v[r];
                }
            }
        }
        for i in 0..np + nl {
            h[(i, i)] = damp(h[(i, i)], lambda);
        }
        let x = h
            .cholesky()
            .ok_or_else(|| Error::Solve("normal equations not positive definite".into()))?
            .solve(&(-b));
        Ok((x.rows(0, np).into_owned(), x.rows(np, nl).iter().copied().collect()))
    }

    pub fn apply_step(&self, st: &BaState, dp: &DVector<f64>, dl: &[f64]) -> BaState {
        let (_, block) = self.pose_blocks();
        let poses = st
            .poses
            .iter()
            .zip(&block)
            .map(|(p, b)| match b {
                Some(a) => {
                    let xi = Vector6::from_iterator(dp.rows(6 * a, 6).iter().copied());
                    p.compose(&PoseSE3::exp(&xi))
                }
                None => *p,
            })
            .collect();
        let inverse_depth = st.inverse_depth.iter().zip(dl).map(|(r, d)| r + d).collect();
        BaState { poses, inverse_depth }
    }

    /// World position of every landmark at `st`.
    pub fn points(&self, st: &BaState) -> Vec<(u64, Vector3<f64>)> {
        self.landmarks
            .iter()
            .zip(&st.inverse_depth)
            .map(|(lm, rho)| (lm.point_id, st.poses[lm.host].transform(&(lm.rays[4] / *rho))))
            .collect()
    }
}

struct Residual {
    e: f64,
    grad: Vector2<f64>,
    xh: Vector3<f64>,
    xt: Vector3<f64>,
}

fn robust_weight(e: f64, opts: &BaOptions) -> f64 {
    if opts.huber && e.abs() > opts.huber_delta {
        opts.huber_delta / e.abs()
    } else {
        1.0
    }
}

fn robust_cost(e: f64, opts: &BaOptions) -> f64 {
    if opts.huber && e.abs() > opts.huber_delta {
        opts.huber_delta * (e.abs() - 0.5 * opts.huber_delta)
    } else {
        0.5 * e * e
    }
}

fn damp(h: f64, lambda: f64) -> f64 {
    h + lambda * h.max(DAMPING_FLOOR)
}

fn add_hpl(blocks: &mut Vec<(usize, Vector6<f64>)>, a: usize, v: Vector6<f64>) {
    match blocks.iter_mut().find(|(b, _)| *b == a) {
        Some((_, acc)) => *acc += v,
        None => blocks.push((a, v)),
    }
}

/// Normal-equation blocks: poses dense, landmarks diagonal, coupling sparse.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub hpp: DMatrix<f64>,
    pub bp: DVector<f64>,
    pub hll: Vec<f64>,
    pub bl: Vec<f64>,
    pub hpl: Vec<Vec<(usize, Vector6<f64>)>>,
    pub cost: f64,
}

impl Linearization {
    pub fn gradient_norm(&self) -> f64 {
        self.bp
            .iter()
            .chain(&self.bl)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaIteration {
    pub iter: usize,
    /// Gating pass the iteration belongs to, starting at 0.
    pub pass: usize,
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
    /// Largest pose update norm of the step tried.
    pub max_pose_delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<BaIteration>,
    pub converged: bool,
    pub landmarks: usize,
    pub edges: usize,
    pub residuals: usize,
    pub dropped: usize,
    pub deferred: usize,
    pub culled: usize,
    pub kept: usize,
}

impl BaReport {
    pub fn accepted(&self) -> usize {
        self.iterations.iter().filter(|i| i.accepted).count()
    }

    /// One CSV row per iteration; counts repeat on every row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "iter",
            "pass",
            "cost",
            "lambda",
            "accepted",
            "max_pose_delta",
            "landmarks",
            "culled",
            "kept",
        ])?;
        let mut rows = vec![BaIteration {
            iter: 0,
            pass: 0,
            cost: self.initial_cost,
            lambda: 0.0,
            accepted: true,
            max_pose_delta: 0.0,
        }];
        rows.extend(self.iterations.iter().cloned());
        for it in rows {
            out.write_record([
                it.iter.to_string(),
                it.pass.to_string(),
                format!("{:.12e}", it.cost),
                format!("{:.3e}", it.lambda),
                (it.accepted as u8).to_string(),
                format!("{:.9e}", it.max_pose_delta),
                self.landmarks.to_string(),
                self.culled.to_string(),
                self.kept.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BaSolution {
    pub state: BaState,
    pub poses: Vec<(u64, PoseSE3)>,
    pub points: Vec<(u64, Vector3<f64>)>,
    pub report: BaReport,
}

impl BaSolution {
    pub fn graph(&self, seq: u64) -> KeyframeGraph {
        KeyframeGraph {
            seq,
            poses: self.poses.clone(),
            points: self.points.clone(),
        }
    }
}

/// Levenberg-Marquardt on patch residuals with landmarks eliminated by Schur complement.
/// Within a pass the residual set is fixed. A later pass only drops residuals, so the
/// cost never rises between consecutive accepted states.
pub fn solve_ba(problem: &BaProblem, opts: &BaOptions) -> Result<BaSolution> {
    let mut st = problem.initial.clone();
    let mut active = problem.active_set(&st, opts.edge_outlier_rms);
    let mut report = BaReport {
        initial_cost: problem.linearize(&st, &active, opts).cost,
        landmarks: problem.landmarks.len(),
        edges: problem.edge_count(),
        dropped: problem.dropped,
        deferred: problem.deferred,
        ..BaReport::default()
    };
    let mut iter = 0;
    let mut cost = report.initial_cost;
    let gates = std::iter::once(opts.edge_outlier_rms).chain(opts.regate.iter().copied());
    for (pass, gate) in gates.enumerate() {
        if pass > 0 {
            let kept = problem.active_set(&st, gate);
            for (a, k) in active.iter_mut().flatten().zip(kept.iter().flatten()) {
                for (x, y) in a.iter_mut().zip(k) {
                    *x &= *y;
                }
            }
        }
        report.residuals = active.iter().flatten().flatten().filter(|a| **a).count();
        let mut lin = problem.linearize(&st, &active, opts);
        let mut lambda = opts.lambda_init;
        let mut rejects = 0;
        let mut steps = 0;
        report.converged = lin.gradient_norm() <= opts.gradient_tolerance;
        while !report.converged && steps < opts.max_iters && rejects < opts.max_rejects {
            iter += 1;
            steps += 1;
            let mut record = BaIteration {
                iter,
                pass,
                cost: lin.cost,
                lambda,
                accepted: false,
                max_pose_delta: 0.0,
            };
            if let Ok((dp, dl)) = problem.schur_step(&lin, lambda) {
                record.max_pose_delta = (0..dp.len() / 6)
                    .map(|a| dp.rows(6 * a, 6).norm())
                    .fold(0.0, f64::max);
                let cand = problem.apply_step(&st, &dp, &dl);
                let cost = if cand.inverse_depth.iter().all(|r| *r > 0.0 && r.is_finite()) {
                    problem.cost(&cand, &active, opts)
                } else {
                    None
                };
                if let Some(c) = cost.filter(|c| *c < lin.cost) {
                    let rel = (lin.cost - c) / lin.cost.max(f64::MIN_POSITIVE);
                    st = cand;
                    lin = problem.linearize(&st, &active, opts);
                    record.cost = lin.cost;
                    record.accepted = true;
                    lambda = (lambda / opts.lambda_factor).max(1e-12);
                    rejects = 0;
                    report.converged =
                        rel < opts.tolerance || lin.gradient_norm() <= opts.gradient_tolerance;
                }
            }
            if !record.accepted {
                lambda *= opts.lambda_factor;
                rejects += 1;
            }
            report.iterations.push(record);
        }
        cost = lin.cost;
    }
    report.final_cost = cost;
    let poses = problem
        .frames
        .iter()
        .zip(&st.poses)
        .map(|(f, p)| (f.kf_id, *p))
        .collect();
    let points = problem.points(&st);
    Ok(BaSolution {
        state: st,
        poses,
        points,
        report,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinementOutcome {
    pub cull: CullReport,
    pub solution: Option<BaSolution>,
    /// Points the adjustment moved out of agreement with their host depth map.
    pub recull: CullReport,
}

impl RefinementOutcome {
    pub fn culled(&self) -> BTreeSet<u64> {
        self.cull.culled.union(&self.recull.culled).copied().collect()
    }
}

/// Culls against `depth_maps`, adjusts what survives, writes the adjusted poses and
/// points back into `store` and culls again. The second pass catches points that only
/// weakly constrain their depth along the ray, which the photometric cost lets drift
/// far from the surface. Works on `store` in place (callers pass a snapshot when
/// running off-thread).
pub fn refine_map(
    store: &mut KeyframeStore,
    depth_maps: &BTreeMap<u64, Tensor<f32>>,
    cull: &CullConfig,
    opts: &BaOptions,
) -> Result<RefinementOutcome> {
    let cull_report = cull_map(store, depth_maps, cull)?;
    if store.len() < 2 {
        return Ok(RefinementOutcome {
            cull: cull_report,
            ..RefinementOutcome::default()
        });
    }
    let problem = BaProblem::build(store, None)?;
    let mut solution = solve_ba(&problem, opts)?;
    solution.report.culled = cull_report.culled.len();
    solution.report.kept = cull_report.kept;
    store.apply_graph(&solution.graph(0));
    let recull = cull_map(store, depth_maps, cull)?;
    Ok(RefinementOutcome {
        cull: cull_report,
        solution: Some(solution),
        recull,
    })
}

impl PartialEq for BaSolution {
    fn eq(&self, other: &Self) -> bool {
        self.state == other.state && self.report == other.report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyframe::{Keyframe, SparsePoint};

    #[test]
    fn cull_check_examples() {
        let c = CullConfig::default();
        assert!(cull_check(1.0, 1.0, &c).unwrap());
        assert!(!cull_check(2.0, 1.0, &c).unwrap());
        assert!(cull_check(5.0, 2.0, &c).unwrap());
        assert!(cull_check(0.0, 1.0, &c).is_err());
        assert!(cull_check(1.0, -1.0, &c).is_err());
    }

    fn intrinsics() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn keyframe(id: u64, x: f64, loss: Option<f64>) -> Keyframe {
        Keyframe {
            id,
            timestamp: id as f64,
            image: Tensor::from_fn([24, 32], |i| ((i % 32) as f32 * 0.37).sin() * 0.3 + 0.5),
            pose: PoseSE3::from_translation(Vector3::new(x, 0.0, 0.0)),
            sparse_points: Vec::new(),
            gt_depth: None,
            gt_pose: None,
            last_val_loss: loss,
        }
    }

    fn observe(kf: &mut Keyframe, k: &Intrinsics, id: u64, x: &Vector3<f64>) {
        let p = k.project(&kf.camera_from_world().transform(x));
        kf.sparse_points.push(SparsePoint {
            u: p.pixel.x as f32,
            v: p.pixel.y as f32,
            depth: p.depth as f32,
            map_point_id: id,
        });
    }

    #[test]
    fn host_selection_rules() {
        let k = intrinsics();
        let mut store = KeyframeStore::new(k);
        let x = Vector3::new(0.05, 0.0, 3.0);
        for (id, loss) in [(0, 0.3), (1, 0.1), (2, 0.1)] {
            let mut kf = keyframe(id, 0.01 * id as f64, Some(loss));
            observe(&mut kf, &k, 7, &x);
            store.insert(kf).unwrap();
        }
        let mp = store.map_points()[&7].clone();
        assert_eq!(select_host(&mp, &store), Some(1));
        store.set_val_loss(1, 0.3);
        assert_eq!(select_host(&mp, &store), Some(2));
        let mut single = mp.clone();
        single.observations.truncate(1);
        assert_eq!(select_host(&single, &store), Some(0));
        let mut none = KeyframeStore::new(k);
        let mut kf = keyframe(0, 0.0, None);
        observe(&mut kf, &k, 1, &x);
        none.insert(kf).unwrap();
        assert_eq!(select_host(&none.map_points()[&1], &none), None);
    }

    #[test]
    fn edge_cap_arithmetic() {
        let k = intrinsics();
        let mut store = KeyframeStore::new(k);
        let a = Vector3::new(0.02, 0.01, 4.0);
        let b = Vector3::new(-0.03, 0.02, 4.0);
        for id in 0..10u64 {
            let mut kf = keyframe(id, 0.01 * id as f64, Some(0.1));
            if id < 2 {
                observe(&mut kf, &k, 1, &a);
            }
            if id < 6 {
                observe(&mut kf, &k, 2, &b);
            }
            store.insert(kf).unwrap();
        }
        let p = BaProblem::build(&store, None).unwrap();
        let la = p.landmarks.iter().find(|l| l.point_id == 1).unwrap();
        assert_eq!(la.edges.len(), 5);
        assert_eq!(&la.edges[..2], &[0, 1]);
        let lb = p.landmarks.iter().find(|l| l.point_id == 2).unwrap();
        assert_eq!(lb.edges, vec![0, 1, 2, 3, 4]);

        let mut two = KeyframeStore::new(k);
        for id in 0..2u64 {
            let mut kf = keyframe(id, 0.01 * id as f64, Some(0.1));
            observe(&mut kf, &k, 1, &a);
            two.insert(kf).unwrap();
        }
        let p = BaProblem::build(&two, None).unwrap();
        assert!(p.landmarks.iter().all(|l| l.edges.len() <= 2));
    }
}
