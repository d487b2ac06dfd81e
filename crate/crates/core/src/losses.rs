//! Self-supervised training objective: minimum photometric reprojection error with
//! SSIM, sparse inverse-depth supervision and edge-aware smoothness.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::depth_net::DepthNet;
use crate::error::{Error, Result};
use crate::geometry::{reproject_dense, Intrinsics};
use crate::keyframe::{Keyframe, SparsePoint};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Added to the error of pixels a neighbor cannot reconstruct so the per-pixel
/// minimum prefers any valid neighbor.
const INVALID_PENALTY: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    /// Apply smoothness to mean-normalized disparity instead of depth.
    pub smooth_on_disparity: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            alpha: 0.85,
            smooth_on_disparity: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && (0.0..=1.0).contains(&self.alpha)) {
            return Err(Error::Config(
                "loss weights must be non-negative with alpha in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub photo: f64,
    pub sparse_depth: f64,
    pub smooth: f64,
    pub total: f64,
    pub valid_pixel_count: usize,
    pub valid_sparse_count: usize,
}

fn constant_like<T: Element>(tape: &mut Tape<T>, v: Var, f: impl Fn(usize) -> f64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    tape.constant(Tensor::from_fn(shape, |i| T::of(f(i))))
}

fn zero<T: Element>(tape: &mut Tape<T>) -> Result<Var> {
    tape.constant(Tensor::scalar(T::zero()))
}

fn image_node<T: Element>(tape: &mut Tape<T>, img: &Tensor<f32>) -> Result<Var> {
    tape.constant(img.cast())
}

/// Per-pixel SSIM of two equally shaped `[.., H, W]` nodes using 3x3 box statistics.
pub fn ssim<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let mu_a = tape.box3(a)?;
    let mu_b = tape.box3(b)?;
    let aa = tape.square(a)?;
    let bb = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.box3(aa)?;
    let e_bb = tape.box3(bb)?;
    let e_ab = tape.box3(ab)?;
    let mu_a2 = tape.square(mu_a)?;
    let mu_b2 = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_a2)?;
    let var_b = tape.sub(e_bb, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.scale(mu_ab, 2.0)?;
    let l_num = tape.offset(l_num, SSIM_C1)?;
    let c_num = tape.scale(cov, 2.0)?;
    let c_num = tape.offset(c_num, SSIM_C2)?;
    let l_den = tape.add(mu_a2, mu_b2)?;
    let l_den = tape.offset(l_den, SSIM_C1)?;
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.offset(c_den, SSIM_C2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let inv = tape.recip(den)?;
    tape.mul(num, inv)
}

/// `(alpha/2)(1 - SSIM) + (1 - alpha)|a - b|` per pixel.
pub fn photometric_error<T: Element>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    alpha: f64,
) -> Result<Var> {
    let s = ssim(tape, a, b)?;
    let s = tape.scale(s, -alpha / 2.0)?;
    let s = tape.offset(s, alpha / 2.0)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    let d = tape.scale(d, 1.0 - alpha)?;
    tape.add(s, d)
}

/// Minimum-over-neighbors reprojection loss for keyframe `kf` with predicted depth
/// node `depth` (`H x W` values). Returns the loss node and `|Omega|`.
pub fn photometric_loss<T: Element>(
    tape: &mut Tape<T>,
    k: &Intrinsics,
    kf: &Keyframe,
    neighbors: &[&Keyframe],
    depth: Var,
    alpha: f64,
) -> Result<(Var, usize)> {
    if neighbors.is_empty() {
        return Err(Error::invalid("photometric loss needs at least one neighbor"));
    }
    let (h, w) = kf.image.hw();
    let target = image_node(tape, &kf.image)?;
    let mut best: Option<Var> = None;
    let mut any_valid = vec![false; h * w];
    for s in neighbors {
        if s.image.hw() != (h, w) {
            return Err(Error::shape("photometric_loss", "neighbor image size differs"));
        }
        let s_from_i = kf.to_frame_of(s);
        let (coords, front) = reproject_dense(tape, k, &s_from_i, depth)?;
        let src = image_node(tape, &s.image)?;
        let (warped, mask) = tape.grid_sample(src, coords)?;
        let warped = tape.reshape(warped, [h, w])?;
        let valid: Vec<bool> = mask.iter().zip(&front).map(|(a, b)| *a && *b).collect();
        let pe = photometric_error(tape, target, warped, alpha)?;
        let pen = constant_like(tape, pe, |i| if valid[i] { 0.0 } else { INVALID_PENALTY })?;
        let pe = tape.add(pe, pen)?;
        for (o, v) in any_valid.iter_mut().zip(&valid) {
            *o |= *v;
        }
        best = Some(match best {
            None => pe,
            Some(b) => tape.minimum(b, pe)?,
        });
    }
    let best = best.expect("at least one neighbor");
    let count = any_valid.iter().filter(|v| **v).count();
    if count == 0 {
        log::debug!("keyframe {}: no pixel reprojects into any neighbor", kf.id);
        return Ok((zero(tape)?, 0));
    }
    let omega = constant_like(tape, best, |i| if any_valid[i] { 1.0 } else { 0.0 })?;
    let masked = tape.mul(best, omega)?;
    let total = tape.sum(masked)?;
    Ok((tape.scale(total, 1.0 / count as f64)?, count))
}

/// Mean absolute inverse-depth error at the sparse points that can be sampled.
pub fn sparse_depth_loss<T: Element>(
    tape: &mut Tape<T>,
    depth: Var,
    sparse: &[SparsePoint],
) -> Result<(Var, usize)> {
    if sparse.is_empty() {
        return Ok((zero(tape)?, 0));
    }
    if let Some(p) = sparse.iter().find(|p| !(p.depth > 0.0)) {
        return Err(Error::invalid(format!("non-positive sparse depth {}", p.depth)));
    }
    let n = sparse.len();
    let coords = Tensor::from_fn([n, 2], |i| {
        let p = &sparse[i / 2];
        T::of(if i % 2 == 0 { p.u } else { p.v } as f64)
    });
    let coords = tape.constant(coords)?;
    let (sampled, mask) = tape.grid_sample(depth, coords)?;
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Ok((zero(tape)?, 0));
    }
    // Invalid samples read 0; lift them to 1 and match them against a target of 1.
    let lift = constant_like(tape, sampled, |i| if mask[i] { 0.0 } else { 1.0 })?;
    let safe = tape.add(sampled, lift)?;
    let inv = tape.recip(safe)?;
    let target = constant_like(tape, sampled, |i| {
        if mask[i] {
            1.0 / sparse[i].depth as f64
        } else {
            1.0
        }
    })?;
    let diff = tape.sub(inv, target)?;
    let err = tape.abs(diff)?;
    let total = tape.sum(err)?;
    Ok((tape.scale(total, 1.0 / count as f64)?, count))
}

/// Edge-aware first-order smoothness of `field` (`H x W` values) weighted by image
/// gradients; each direction is averaged over its own difference count.
pub fn smoothness_loss<T: Element>(
    tape: &mut Tape<T>,
    field: Var,
    image: &Tensor<f32>,
    on_disparity: bool,
) -> Result<Var> {
    let (h, w) = image.hw();
    if tape.value(field).len() != h * w {
        return Err(Error::shape("smoothness_loss", "depth and image sizes differ"));
    }
    let mut d = tape.reshape(field, [h, w])?;
    if on_disparity {
        let disp = tape.recip(d)?;
        let m = tape.mean(disp)?;
        let inv_m = tape.recip(m)?;
        d = tape.scale_by(disp, inv_m)?;
    }
    let img = image_node(tape, image)?;
    let mut total: Option<Var> = None;
    for axis_x in [true, false] {
        if (axis_x && w < 2) || (!axis_x && h < 2) {
            continue;
        }
        let (dd, di) = if axis_x {
            (tape.diff_x(d)?, tape.diff_x(img)?)
        } else {
            (tape.diff_y(d)?, tape.diff_y(img)?)
        };
        let weights: Vec<T> = tape
            .value(di)
            .iter()
            .map(|g| T::of((-g.f64().abs()).exp()))
            .collect();
        let weights = tape.constant(Tensor::new(tape.shape(di).to_vec(), weights)?)?;
        let a = tape.abs(dd)?;
        let term = tape.mul(a, weights)?;
        let term = tape.mean(term)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => zero(tape),
    }
}

/// A keyframe to train on and the neighbors available for reconstruction.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub kf: &'a Keyframe,
    pub neighbors: Vec<&'a Keyframe>,
}

#[derive(Clone, Debug)]
pub struct TrainLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub items: Vec<LossBreakdown>,
    /// Pre-sigmoid head output per item.
    pub logits: Vec<Var>,
}

/// Combined loss for one keyframe with its predicted depth already on the tape.
pub fn keyframe_loss<T: Element>(
    tape: &mut Tape<T>,
    k: &Intrinsics,
    item: &TrainItem,
    depth: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (photo, n_pix) = if item.neighbors.is_empty() {
        (zero(tape)?, 0)
    } else {
        photometric_loss(tape, k, item.kf, &item.neighbors, depth, weights.alpha)?
    };
    let (sparse, n_sparse) = sparse_depth_loss(tape, depth, &item.kf.sparse_points)?;
    let smooth = smoothness_loss(tape, depth, &item.kf.image, weights.smooth_on_disparity)?;
    let a = tape.scale(sparse, weights.lambda1)?;
    let b = tape.scale(smooth, weights.lambda2)?;
    let t = tape.add(photo, a)?;
    let total = tape.add(t, b)?;
    let bd = LossBreakdown {
        photo: tape.scalar(photo).f64(),
        sparse_depth: tape.scalar(sparse).f64(),
        smooth: tape.scalar(smooth).f64(),
        total: tape.scalar(total).f64(),
        valid_pixel_count: n_pix,
        valid_sparse_count: n_sparse,
    };
    Ok((total, bd))
}

/// Batch mean of per-keyframe losses, recorded against bound parameters `params`.
pub fn train_loss<T: Element>(
    tape: &mut Tape<T>,
    params: &[Var],
    net: &DepthNet,
    k: &Intrinsics,
    batch: &[TrainItem],
    weights: &LossWeights,
) -> Result<TrainLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut sum: Option<Var> = None;
    let mut items = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len());
    for item in batch {
        let out = net.forward(tape, params, &item.kf.image)?;
        let (t, bd) = keyframe_loss(tape, k, item, out.depth, weights)?;
        sum = Some(match sum {
            None => t,
            Some(s) => tape.add(s, t)?,
        });
        items.push(bd);
        logits.push(out.logits);
    }
    let n = batch.len() as f64;
    let total = tape.scale(sum.expect("non-empty"), 1.0 / n)?;
    let mut breakdown = LossBreakdown::default();
    for b in &items {
        breakdown.photo += b.photo / n;
        breakdown.sparse_depth += b.sparse_depth / n;
        breakdown.smooth += b.smooth / n;
        breakdown.valid_pixel_count += b.valid_pixel_count;
        breakdown.valid_sparse_count += b.valid_sparse_count;
    }
    breakdown.total = tape.scalar(total).f64();
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { op: "train_loss" });
    }
    Ok(TrainLoss {
        total,
        breakdown,
        items,
        logits,
    })
}

/// Sparse-depth loss of the current prediction; `None` when the keyframe has no
/// usable sparse points. Caches the value in `kf.last_val_loss`.
pub fn validation_loss(kf: &mut Keyframe, net: &DepthNet) -> Result<Option<f64>> {
    if kf.sparse_points.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::<f32>::new();
    let vars = net.params.bind(&mut tape)?;
    let out = net.forward(&mut tape, &vars, &kf.image)?;
    let (l, n) = sparse_depth_loss(&mut tape, out.depth, &kf.sparse_points)?;
    if n == 0 {
        return Ok(None);
    }
    let v = tape.scalar(l) as f64;
    kf.last_val_loss = Some(v);
    Ok(Some(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;

    fn tex(h: usize, w: usize, seed: f64) -> Tensor<f32> {
        Tensor::from_fn([h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (0.5 + 0.2 * (0.7 * x + seed).sin() + 0.2 * (0.5 * y - 0.3 * x + 2.0 * seed).cos()) as f32
        })
    }

    fn keyframe(id: u64, image: Tensor<f32>, pose: PoseSE3) -> Keyframe {
        Keyframe {
            id,
            timestamp: 0.0,
            image,
            pose,
            sparse_points: Vec::new(),
            gt_depth: None,
            gt_pose: None,
            last_val_loss: None,
        }
    }

    fn k16() -> Intrinsics {
        Intrinsics::new(14.0, 14.0, 7.5, 7.5, 16, 16).unwrap()
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(tex(8, 8, 0.3).cast()).unwrap();
        let s = ssim(&mut tape, a, a).unwrap();
        assert!(tape.value(s).iter().all(|v| (v - 1.0).abs() < 1e-12));
        let c = tape.constant(Tensor::full([4, 4], 0.3)).unwrap();
        let s = ssim(&mut tape, c, c).unwrap();
        assert!(tape.value(s).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_of_inverted_bimodal_patch_is_negative() {
        // Checkerboard of 0.2/0.8 against its complement: equal means, covariance
        // equal to minus the variance.
        let a = Tensor::from_fn([3, 3], |i| if i % 2 == 0 { 0.2 } else { 0.8 });
        let b = Tensor::from_fn([3, 3], |i| 1.0 - a.data()[i]);
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(a.clone()).unwrap();
        let vb = tape.constant(b.clone()).unwrap();
        let s = ssim(&mut tape, va, vb).unwrap();
        let center = tape.value(s)[4];
        // Hand evaluation at the center window.
        let ma = a.data().iter().sum::<f64>() / 9.0;
        let mb = b.data().iter().sum::<f64>() / 9.0;
        let va_ = a.data().iter().map(|x| x * x).sum::<f64>() / 9.0 - ma * ma;
        let vb_ = b.data().iter().map(|x| x * x).sum::<f64>() / 9.0 - mb * mb;
        let cov = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>() / 9.0 - ma * mb;
        let expect = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va_ + vb_ + SSIM_C2));
        assert!(expect < 0.0);
        assert!((center - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_neighbor_at_identity_gives_zero_photo_loss() {
        let img = tex(16, 16, 0.1);
        let a = keyframe(0, img.clone(), PoseSE3::identity());
        let b = keyframe(1, img, PoseSE3::identity());
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::full([16, 16], 2.0)).unwrap();
        let (l, n) = photometric_loss(&mut tape, &k16(), &a, &[&b], d, 0.85).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        assert!(n > 0);
    }

    #[test]
    fn sparse_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::full([8, 8], 2.0)).unwrap();
        let pt = |depth| SparsePoint {
            u: 3.5,
            v: 4.0,
            depth,
            map_point_id: 0,
        };
        let (l, n) = sparse_depth_loss(&mut tape, d, &[pt(1.0)]).unwrap();
        assert_eq!(n, 1);
        assert!((tape.scalar(l) - 0.5).abs() < 1e-12);
        let (l, _) = sparse_depth_loss(&mut tape, d, &[pt(2.0)]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let (l, n) = sparse_depth_loss(&mut tape, d, &[]).unwrap();
        assert_eq!((tape.scalar(l), n), (0.0, 0));
        // Points outside the sampling footprint are ignored.
        let out = SparsePoint { u: 7.5, ..pt(1.0) };
        let (l, n) = sparse_depth_loss(&mut tape, d, &[pt(2.0), out]).unwrap();
        assert_eq!((tape.scalar(l), n), (0.0, 1));
    }

    #[test]
    fn near_errors_weigh_more_than_far_errors() {
        let err = |pred: f64, gt: f64| {
            let mut tape = Tape::<f64>::new();
            let d = tape.constant(Tensor::full([4, 4], pred)).unwrap();
            let sp = SparsePoint {
                u: 1.0,
                v: 1.0,
                depth: gt as f32,
                map_point_id: 0,
            };
            let (l, _) = sparse_depth_loss(&mut tape, d, &[sp]).unwrap();
            tape.scalar(l)
        };
        assert!((err(1.0, 2.0) - 0.5).abs() < 1e-12);
        assert!((err(10.0, 20.0) - 0.05).abs() < 1e-9);
        assert!(err(1.0, 2.0) > err(10.0, 20.0));
    }

    #[test]
    fn smoothness_examples() {
        let img = Tensor::full([6, 7], 0.4f32);
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full([6, 7], 3.0)).unwrap();
        let l = smoothness_loss(&mut tape, c, &img, false).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let ramp = tape
            .constant(Tensor::from_fn([6, 7], |i| -0.25 * (i % 7) as f64))
            .unwrap();
        let l = smoothness_loss(&mut tape, ramp, &img, false).unwrap();
        assert!((tape.scalar(l) - 0.25).abs() < 1e-12);

        // A depth step aligned with an image edge costs less than on a flat image.
        let step_d = Tensor::from_fn([6, 8], |i| if i % 8 < 4 { 1.0 } else { 2.0 });
        let step_i = Tensor::from_fn([6, 8], |i| if i % 8 < 4 { 0.1f32 } else { 0.9 });
        let flat_i = Tensor::full([6, 8], 0.5f32);
        let d = tape.constant(step_d).unwrap();
        let edge = smoothness_loss(&mut tape, d, &step_i, false).unwrap();
        let flat = smoothness_loss(&mut tape, d, &flat_i, false).unwrap();
        assert!(tape.scalar(edge) < tape.scalar(flat));
    }

    #[test]
    fn disparity_smoothness_is_scale_free() {
        let img = tex(8, 8, 0.2);
        let d = Tensor::from_fn([8, 8], |i| 1.0 + 0.1 * (i % 5) as f64);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(d.clone()).unwrap();
        let b = tape
            .constant(Tensor::from_fn([8, 8], |i| 3.0 * d.data()[i]))
            .unwrap();
        let la = smoothness_loss(&mut tape, a, &img, true).unwrap();
        let lb = smoothness_loss(&mut tape, b, &img, true).unwrap();
        assert!((tape.scalar(la) - tape.scalar(lb)).abs() < 1e-12);
    }

    #[test]
    fn validation_loss_caches_the_sparse_term() {
        let net = DepthNet::init(1);
        let mut kf = keyframe(0, tex(16, 16, 0.0), PoseSE3::identity());
        assert_eq!(validation_loss(&mut kf, &net).unwrap(), None);
        kf.sparse_points = vec![SparsePoint {
            u: 5.0,
            v: 6.5,
            depth: 1.5,
            map_point_id: 3,
        }];
        let v = validation_loss(&mut kf, &net).unwrap().unwrap();
        assert_eq!(kf.last_val_loss, Some(v));
        let mut tape = Tape::<f32>::new();
        let vars = net.params.bind(&mut tape).unwrap();
        let out = net.forward(&mut tape, &vars, &kf.image).unwrap();
        let (l, _) = sparse_depth_loss(&mut tape, out.depth, &kf.sparse_points).unwrap();
        assert_eq!(tape.scalar(l) as f64, v);
    }
}
