//! TUM RGB-D directory reader and trajectory files.
//!
//! Expects `rgb.txt`, `depth.txt` and `groundtruth.txt` index files next to the image
//! folders. Depth PNGs hold 16-bit values scaled by 5000 per meter.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::keyframe::{Keyframe, SparsePoint};

pub const DEPTH_FACTOR: f64 = 5000.0;

#[derive(Clone, Debug)]
pub struct TumOptions {
    /// Maximum timestamp difference when associating streams, seconds.
    pub tolerance: f64,
    /// Every k-th associated frame becomes a keyframe.
    pub keyframe_every: usize,
    /// Intrinsics at full resolution.
    pub intrinsics: Intrinsics,
    /// Integer block-average downsampling factor.
    pub downsample: usize,
    pub grid_size: usize,
    pub max_fts: usize,
}

impl Default for TumOptions {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            keyframe_every: 5,
            intrinsics: Intrinsics {
                fx: 525.0,
                fy: 525.0,
                cx: 319.5,
                cy: 239.5,
                width: 640,
                height: 480,
            },
            downsample: 1,
            grid_size: 20,
            max_fts: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TumSequence {
    pub intrinsics: Intrinsics,
    pub keyframes: Vec<Keyframe>,
    pub associated: usize,
    /// Rgb frames without a depth image or pose within tolerance.
    pub skipped: usize,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_index(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

/// `timestamp filename` lines.
pub fn read_file_list(path: &Path) -> Result<Vec<(f64, String)>> {
    read_index(path)?
        .into_iter()
        .map(|(n, l)| {
            let mut it = l.split_whitespace();
            let t = it
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| parse_err(path, n, "expected a timestamp"))?;
            let f = it
                .next()
                .ok_or_else(|| parse_err(path, n, "expected a file name"))?;
            Ok((t, f.to_string()))
        })
        .collect()
}

/// `timestamp tx ty tz qx qy qz qw` lines, world from camera.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, PoseSE3)>> {
    read_index(path)?
        .into_iter()
        .map(|(n, l)| {
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(path, n, e.to_string()))?;
            if vals.len() != 8 {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected 8 fields, found {}", vals.len()),
                ));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if !(q.norm() > 1e-9) {
                return Err(parse_err(path, n, "degenerate quaternion"));
            }
            let pose = PoseSE3::new(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            );
            Ok((vals[0], pose))
        })
        .collect()
}

pub fn write_trajectory(path: &Path, traj: &[(f64, PoseSE3)]) -> Result<()> {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in traj {
        let q = p.rotation.quaternion();
        s.push_str(&format!(
            "{t:.6} {} {} {} {} {} {} {}\n",
            p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Index of the entry in `times` (sorted) nearest to `t`, if within `tol`.
pub fn nearest_within(times: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = times.partition_point(|&x| x < t);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(&x) = times.get(j) {
            let d = (x - t).abs();
            if d <= tol && best.map_or(true, |(_, b)| d < b) {
                best = Some((j, d));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Associated (rgb path, depth path, timestamp, pose) for every matchable rgb frame.
pub fn associate(
    dir: &Path,
    tolerance: f64,
) -> Result<(Vec<(PathBuf, PathBuf, f64, PoseSE3)>, usize)> {
    let rgb = read_file_list(&dir.join("rgb.txt"))?;
    let mut depth = read_file_list(&dir.join("depth.txt"))?;
    let mut gt = read_trajectory(&dir.join("groundtruth.txt"))?;
    depth.sort_by(|a, b| a.0.total_cmp(&b.0));
    gt.sort_by(|a, b| a.0.total_cmp(&b.0));
    let dt: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let gtt: Vec<f64> = gt.iter().map(|g| g.0).collect();
    let mut out = Vec::new();
    let mut skipped = 0;
    for (t, f) in rgb {
        match (
            nearest_within(&dt, t, tolerance),
            nearest_within(&gtt, t, tolerance),
        ) {
            (Some(d), Some(g)) => out.push((dir.join(f), dir.join(&depth[d].1), t, gt[g].1)),
            _ => skipped += 1,
        }
    }
    Ok((out, skipped))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)?)
}

/// Luminance in `[0, 1]`, block-averaged by `factor`.
pub fn load_gray(path: &Path, factor: usize) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let full: Vec<f32> = img
        .pixels()
        .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
        .collect();
    downsample(&full, h, w, factor, |block| {
        block.iter().sum::<f32>() / block.len() as f32
    })
}

/// Meters, zero where the sensor had no return.
pub fn load_depth(path: &Path, factor: usize) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let full: Vec<f32> = img
        .pixels()
        .map(|p| (p[0] as f64 / DEPTH_FACTOR) as f32)
        .collect();
    downsample(&full, h, w, factor, |block| {
        let valid: Vec<f32> = block.iter().copied().filter(|&d| d > 0.0).collect();
        if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f32>() / valid.len() as f32
        }
    })
}

fn downsample(
    full: &[f32],
    h: usize,
    w: usize,
    factor: usize,
    reduce: impl Fn(&[f32]) -> f32,
) -> Result<Tensor<f32>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut block = Vec::with_capacity(factor * factor);
    let data = (0..oh * ow)
        .map(|i| {
            let (y, x) = (i / ow, i % ow);
            block.clear();
            for dy in 0..factor {
                let row = (y * factor + dy) * w + x * factor;
                block.extend_from_slice(&full[row..row + factor]);
            }
            reduce(&block)
        })
        .collect();
    Tensor::new([oh, ow], data)
}

/// Loads keyframes, tracking sparse map points by projection and spawning new ones
/// from the depth image in empty grid cells.
pub fn load_tum_sequence(dir: &Path, opts: &TumOptions) -> Result<TumSequence> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    if opts.keyframe_every == 0 {
        return Err(Error::invalid("keyframe_every must be positive"));
    }
    let (frames, skipped) = associate(dir, opts.tolerance)?;
    let associated = frames.len();
    let f = opts.downsample.max(1);
    let k = opts.intrinsics.resized(opts.intrinsics.width / f, opts.intrinsics.height / f);
    let mut landmarks: Vec<Vector3<f64>> = Vec::new();
    let mut keyframes = Vec::new();
    for (idx, (rgb, depth, t, pose)) in frames.into_iter().enumerate() {
        if idx % opts.keyframe_every != 0 {
            continue;
        }
        let image = load_gray(&rgb, f)?;
        let gt_depth = load_depth(&depth, f)?;
        if image.hw() != (k.height, k.width) || gt_depth.hw() != (k.height, k.width) {
            return Err(Error::invalid(format!(
                "{} does not match the configured {}x{} resolution",
                rgb.display(),
                k.width,
                k.height
            )));
        }
        let sparse_points = track_points(&k, &pose, &image, &gt_depth, &mut landmarks, opts);
        keyframes.push(Keyframe {
            id: keyframes.len() as u64,
            timestamp: t,
            image,
            pose,
            sparse_points,
            gt_depth: Some(gt_depth),
            gt_pose: Some(pose),
            last_val_loss: None,
        });
    }
    Ok(TumSequence {
        intrinsics: k,
        keyframes,
        associated,
        skipped,
    })
}

fn track_points(
    k: &Intrinsics,
    pose: &PoseSE3,
    image: &Tensor<f32>,
    depth: &Tensor<f32>,
    landmarks: &mut Vec<Vector3<f64>>,
    opts: &TumOptions,
) -> Vec<SparsePoint> {
    let (h, w) = (k.height, k.width);
    let g = opts.grid_size.max(1);
    let gw = w.div_ceil(g);
    let mut taken = vec![false; gw * h.div_ceil(g)];
    let mut out = Vec::new();
    let c_from_w = pose.inverse();
    let inside = |u: f64, v: f64| u >= 1.0 && v >= 1.0 && u <= (w - 2) as f64 && v <= (h - 2) as f64;
    for (id, x) in landmarks.iter().enumerate() {
        if out.len() >= opts.max_fts {
            break;
        }
        let p = k.project(&c_from_w.transform(x));
        if !p.valid || !inside(p.pixel.x, p.pixel.y) {
            continue;
        }
        let (ui, vi) = (p.pixel.x.round() as usize, p.pixel.y.round() as usize);
        let measured = depth.at(vi, ui) as f64;
        // Occluded or inconsistent with the sensor: not tracked in this frame.
        if !(measured > 0.0) || ((measured - p.depth) / measured).abs() > 0.05 {
            continue;
        }
        let cell = (vi / g) * gw + ui / g;
        if taken[cell] {
            continue;
        }
        taken[cell] = true;
        out.push(SparsePoint {
            u: p.pixel.x as f32,
            v: p.pixel.y as f32,
            depth: p.depth as f32,
            map_point_id: id as u64,
        });
    }
    let mut spawn: HashMap<usize, (f32, usize, usize)> = HashMap::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let cell = (y / g) * gw + x / g;
            if taken[cell] || !(depth.at(y, x) > 0.0) {
                continue;
            }
            let gx = image.at(y, x + 1) - image.at(y, x - 1);
            let gy = image.at(y + 1, x) - image.at(y - 1, x);
            let score = gx * gx + gy * gy;
            let e = spawn.entry(cell).or_insert((-1.0, x, y));
            if score > e.0 {
                *e = (score, x, y);
            }
        }
    }
    let mut cells: Vec<_> = spawn.into_iter().collect();
    cells.sort_by_key(|(c, _)| *c);
    for (_, (_, x, y)) in cells {
        if out.len() >= opts.max_fts {
            break;
        }
        let d = depth.at(y, x) as f64;
        let px = Vector2::new(x as f64, y as f64);
        let Ok(xc) = k.backproject(&px, d) else { continue };
        landmarks.push(pose.transform(&xc));
        out.push(SparsePoint {
            u: x as f32,
            v: y as f32,
            depth: d as f32,
            map_point_id: (landmarks.len() - 1) as u64,
        });
    }
    out
}
