//! Depth accuracy, scale-invariant error, trajectory error and the metrics file.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear, Tensor};
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::keyframe::KeyframeStore;
use crate::tum::nearest_within;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthScaling {
    None,
    /// One ratio of medians over all evaluated pixels.
    GlobalMedian,
    /// One least-squares factor on inverse depth over all evaluated pixels.
    GlobalLsq,
    PerFrameMedian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthEvalConfig {
    pub rel_threshold: f64,
    pub scaling: DepthScaling,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        Self {
            rel_threshold: 0.1,
            scaling: DepthScaling::None,
            min_depth: 0.1,
            max_depth: 20.0,
        }
    }
}

impl DepthEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_threshold > 0.0) || !(self.min_depth < self.max_depth) {
            return Err(Error::Config("invalid depth evaluation config".into()));
        }
        Ok(())
    }

    fn valid(&self, gt: f64) -> bool {
        gt >= self.min_depth && gt <= self.max_depth
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn valid_pairs(pred: &Tensor<f32>, gt: &Tensor<f32>, cfg: &DepthEvalConfig) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "percent_correct",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (*p as f64, *g as f64))
        .filter(|(p, g)| cfg.valid(*g) && *p > 0.0 && p.is_finite())
        .collect())
}

fn scale_for(pairs: &[(f64, f64)], scaling: DepthScaling) -> f64 {
    match scaling {
        DepthScaling::None => 1.0,
        DepthScaling::GlobalMedian | DepthScaling::PerFrameMedian => {
            median(pairs.iter().map(|p| p.1).collect()) / median(pairs.iter().map(|p| p.0).collect())
        }
        DepthScaling::GlobalLsq => {
            // k minimizes sum (k / d - 1 / d_gt)^2; predictions are divided by k.
            let (mut ab, mut aa) = (0.0, 0.0);
            for (d, g) in pairs {
                ab += (1.0 / d) * (1.0 / g);
                aa += (1.0 / d) * (1.0 / d);
            }
            aa / ab
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthAccuracy {
    /// Percentage per frame after scaling.
    pub per_frame: Vec<f64>,
    /// Percentage over all evaluated pixels pooled.
    pub overall: f64,
    pub pixels: usize,
}

/// Share of valid pixels with `|D - D_gt| / D_gt` below the threshold, in percent.
pub fn percent_correct(pred: &Tensor<f32>, gt: &Tensor<f32>, cfg: &DepthEvalConfig) -> Result<f64> {
    Ok(percent_correct_frames(&[pred], &[gt], cfg)?.overall)
}

pub fn percent_correct_frames(
    preds: &[&Tensor<f32>],
    gts: &[&Tensor<f32>],
    cfg: &DepthEvalConfig,
) -> Result<DepthAccuracy> {
    cfg.validate()?;
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid("prediction and ground-truth frame counts differ or are zero"));
    }
    let frames = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| valid_pairs(p, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let pixels: usize = frames.iter().map(Vec::len).sum();
    if pixels == 0 {
        return Err(Error::invalid("no valid ground-truth pixels"));
    }
    let global = match cfg.scaling {
        DepthScaling::GlobalMedian | DepthScaling::GlobalLsq => {
            let all: Vec<(f64, f64)> = frames.iter().flatten().copied().collect();
            Some(scale_for(&all, cfg.scaling))
        }
        _ => None,
    };
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut hits_total = 0usize;
    for pairs in &frames {
        let s = match global {
            Some(s) => s,
            None if pairs.is_empty() => 1.0,
            None => scale_for(pairs, cfg.scaling),
        };
        let hits = pairs
            .iter()
            .filter(|(d, g)| ((s * d - g) / g).abs() < cfg.rel_threshold)
            .count();
        hits_total += hits;
        per_frame.push(if pairs.is_empty() {
            f64::NAN
        } else {
            100.0 * hits as f64 / pairs.len() as f64
        });
    }
    Ok(DepthAccuracy {
        per_frame,
        overall: 100.0 * hits_total as f64 / pixels as f64,
        pixels,
    })
}

/// Standard deviation of `log z - log z_gt`.
pub fn scale_invariant_error(z: &[f64], z_gt: &[f64]) -> Result<f64> {
    if z.len() != z_gt.len() {
        return Err(Error::shape("scale_invariant_error", format!("{} vs {}", z.len(), z_gt.len())));
    }
    if z.len() < 2 {
        return Err(Error::invalid("scale-invariant error needs at least two samples"));
    }
    if z.iter().chain(z_gt).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("scale-invariant error needs positive depths"));
    }
    let d: Vec<f64> = z.iter().zip(z_gt).map(|(a, b)| a.ln() - b.ln()).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Scale-invariant error of a dense prediction over valid ground-truth pixels.
pub fn dense_scale_invariant_error(pred: &Tensor<f32>, gt: &Tensor<f32>, cfg: &DepthEvalConfig) -> Result<f64> {
    let pairs = valid_pairs(pred, gt, cfg)?;
    let (z, zg): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    scale_invariant_error(&z, &zg)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, PoseSE3)>) -> Result<Self> {
        if entries.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::invalid("trajectory timestamps must be strictly increasing"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, PoseSE3)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Se3,
    Sim3,
}

/// Similarity `(s, R, t)` minimizing `sum |dst - (s R src + t)|^2`.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::invalid("alignment needs at least three point pairs"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a - mu_s, b - mu_d);
        cov += db * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    let s = if with_scale {
        if var_s <= 0.0 {
            return Err(Error::invalid("degenerate source points for scale alignment"));
        }
        let d = svd.singular_values;
        (d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)]) / var_s
    } else {
        1.0
    };
    let t = mu_d - s * r * mu_s;
    Ok((s, r, t))
}

/// Translation RMSE after aligning `est` onto `gt`; poses are paired by nearest
/// timestamp within `tolerance`.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, align: Alignment, tolerance: f64) -> Result<f64> {
    let gt_times: Vec<f64> = gt.entries.iter().map(|e| e.0).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (t, p) in &est.entries {
        if let Some(j) = nearest_within(&gt_times, *t, tolerance) {
            a.push(p.translation);
            b.push(gt.entries[j].1.translation);
        }
    }
    if a.len() < 3 {
        return Err(Error::invalid(format!(
            "ATE needs at least three associated poses, found {}",
            a.len()
        )));
    }
    let (s, r, t) = match align {
        Alignment::None => (1.0, Matrix3::identity(), Vector3::zeros()),
        Alignment::Se3 => umeyama(&a, &b, false)?,
        Alignment::Sim3 => umeyama(&a, &b, true)?,
    };
    let sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (s * r * x + t - y).norm_squared())
        .sum();
    Ok((sq / a.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapDepthError {
    pub e_si: f64,
    pub pairs: usize,
    pub skipped: usize,
}

/// Scale-invariant error of surviving map-point depths in their host keyframes
/// against bilinear ground-truth depth. Points without a host use their first
/// observing keyframe.
pub fn map_depth_error(store: &KeyframeStore) -> Result<MapDepthError> {
    let k = &store.intrinsics;
    let (mut z, mut zg) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for mp in store.map_points().values().filter(|m| !m.culled) {
        let host = mp.host_kf.or_else(|| mp.observations.first().map(|o| o.0));
        let Some(kf) = host.and_then(|h| store.get(h)) else {
            skipped += 1;
            continue;
        };
        let Some(gt) = &kf.gt_depth else {
            skipped += 1;
            continue;
        };
        let proj = k.project(&kf.camera_from_world().transform(&mp.position));
        let sample = if proj.valid {
            bilinear(gt, proj.pixel.x, proj.pixel.y).filter(|g| *g > 0.0)
        } else {
            None
        };
        match sample {
            Some(g) => {
                z.push(proj.depth);
                zg.push(g);
            }
            None => skipped += 1,
        }
    }
    if z.len() < 2 {
        return Err(Error::invalid("no valid map-point depth pairs"));
    }
    Ok(MapDepthError {
        e_si: scale_invariant_error(&z, &zg)?,
        pairs: z.len(),
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub keyframe_id: u64,
    pub percent_correct: f64,
    pub e_si: f64,
}

/// Per-frame rows followed by a `summary` row.
pub fn write_metrics<W: Write>(rows: &[FrameMetrics], summary: (f64, f64), w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame", "keyframe_id", "percent_correct", "e_si"])?;
    for r in rows {
        out.write_record([
            r.frame.to_string(),
            r.keyframe_id.to_string(),
            format!("{:.6}", r.percent_correct),
            format!("{:.9}", r.e_si),
        ])?;
    }
    out.write_record([
        "summary".to_string(),
        String::new(),
        format!("{:.6}", summary.0),
        format!("{:.9}", summary.1),
    ])?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector6};

    fn depth(vals: &[f32], w: usize) -> Tensor<f32> {
        Tensor::new([vals.len() / w, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn percent_correct_examples() {
        let gt = depth(&[1.0, 2.0, 3.0, 4.0], 2);
        let cfg = DepthEvalConfig::default();
        assert_eq!(percent_correct(&gt, &gt, &cfg).unwrap(), 100.0);
        let near = Tensor::from_fn([2, 2], |i| gt.data()[i] * 1.05);
        assert_eq!(percent_correct(&near, &gt, &cfg).unwrap(), 100.0);
        let twice = Tensor::from_fn([2, 2], |i| gt.data()[i] * 2.0);
        assert_eq!(percent_correct(&twice, &gt, &cfg).unwrap(), 0.0);
        for scaling in [DepthScaling::GlobalMedian, DepthScaling::GlobalLsq, DepthScaling::PerFrameMedian] {
            let c = DepthEvalConfig { scaling, ..cfg.clone() };
            assert_eq!(percent_correct(&twice, &gt, &c).unwrap(), 100.0);
        }
        let empty = depth(&[0.0, 0.0], 2);
        assert!(percent_correct(&empty, &empty, &cfg).is_err());
    }

    #[test]
    fn pooled_percentage_weights_pixels() {
        let g1 = depth(&[1.0, 1.0, 1.0, 1.0], 2);
        let g2 = depth(&[1.0, 0.0], 2);
        let p1 = depth(&[1.0, 1.0, 1.0, 5.0], 2);
        let p2 = depth(&[5.0, 1.0], 2);
        let acc = percent_correct_frames(&[&p1, &p2], &[&g1, &g2], &DepthEvalConfig::default()).unwrap();
        assert_eq!(acc.per_frame, vec![75.0, 0.0]);
        assert_eq!(acc.overall, 60.0);
    }

    #[test]
    fn e_si_examples() {
        assert_eq!(scale_invariant_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let e = scale_invariant_error(&[1.0, std::f64::consts::E], &[1.0, 1.0]).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
        let z = [0.5, 1.5, 2.5, 7.0];
        let zg = [0.6, 1.4, 2.0, 8.0];
        let base = scale_invariant_error(&z, &zg).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| v * 3.7).collect();
        assert!((scale_invariant_error(&scaled, &zg).unwrap() - base).abs() < 1e-12);
        assert!(scale_invariant_error(&[1.0], &[1.0]).is_err());
        assert!(scale_invariant_error(&[1.0, -1.0], &[1.0, 1.0]).is_err());
    }

    fn line_traj(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let x = i as f64;
                    (
                        x * 0.1,
                        PoseSE3::exp(&Vector6::new(x * 0.3, (x * 0.7).sin(), 0.2 * x * x / 10.0, 0.01 * x, 0.0, 0.02)),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ate_examples() {
        let gt = line_traj(10);
        assert!(ate_rmse(&gt, &gt, Alignment::None, 0.01).unwrap() < 1e-12);
        let mut moved = gt.entries.clone();
        moved[4].1.translation.x += 0.3;
        let moved = Trajectory::new(moved).unwrap();
        let e = ate_rmse(&moved, &gt, Alignment::None, 0.01).unwrap();
        assert!((e - 0.3 / 10f64.sqrt()).abs() < 1e-12);
        let g = PoseSE3::new(
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let rigid = Trajectory::new(gt.entries.iter().map(|(t, p)| (*t, g.compose(p))).collect()).unwrap();
        assert!(ate_rmse(&rigid, &gt, Alignment::Se3, 0.01).unwrap() < 1e-9);
        assert!(ate_rmse(&line_traj(2), &line_traj(2), Alignment::None, 0.01).is_err());
        assert!(Trajectory::new(vec![(1.0, PoseSE3::identity()), (1.0, PoseSE3::identity())]).is_err());
    }

    #[test]
    fn metrics_file_layout() {
        let rows = vec![FrameMetrics {
            frame: 0,
            keyframe_id: 3,
            percent_correct: 50.0,
            e_si: 0.25,
        }];
        let mut buf = Vec::new();
        write_metrics(&rows, (50.0, 0.25), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "frame,keyframe_id,percent_correct,e_si\n0,3,50.000000,0.250000000\nsummary,,50.000000,0.250000000\n"
        );
    }
}
