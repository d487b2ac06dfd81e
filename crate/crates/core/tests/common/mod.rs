#![allow(dead_code)]

use mutadapt::autodiff::Tensor;
use mutadapt::evaluation::{ate_rmse, Alignment, Trajectory};
use mutadapt::geometry::{Intrinsics, PoseSE3};
use mutadapt::keyframe::{Keyframe, KeyframeStore, SparsePoint};
use mutadapt::map_refinement::{solve_ba, BaOptions, BaProblem, BaState};
use mutadapt::synthetic::{SceneSpec, SyntheticScene};
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Renders every frame of `spec` into a store with all validation losses cached.
pub fn scene_store(spec: SceneSpec) -> (SyntheticScene, KeyframeStore) {
    let scene = SyntheticScene::new(spec).unwrap();
    let mut store = KeyframeStore::new(scene.intrinsics);
    for kf in scene.render_all().unwrap() {
        store.insert(kf).unwrap();
    }
    let ids: Vec<u64> = store.keyframes().iter().map(|k| k.id).collect();
    for id in ids {
        store.set_val_loss(id, 0.0);
    }
    (scene, store)
}

pub fn plane_intrinsics() -> Intrinsics {
    Intrinsics::new(40.0, 40.0, 23.5, 17.5, 48, 36).unwrap()
}

/// Keyframes looking straight at the plane z = `depth`, translated by `xs` along x,
/// with the plane's albedo given by `albedo(x, y)`. Points on a regular grid of the
/// plane are observed wherever they land inside the image.
pub fn plane_store(
    xs: &[f64],
    depth: f64,
    albedo: impl Fn(f64, f64) -> f64,
    grid: &[(f64, f64)],
) -> KeyframeStore {
    let k = plane_intrinsics();
    let mut store = KeyframeStore::new(k);
    for (i, &x) in xs.iter().enumerate() {
        let pose = PoseSE3::from_translation(Vector3::new(x, 0.0, 0.0));
        let image = Tensor::from_fn([k.height, k.width], |p| {
            let (v, u) = ((p / k.width) as f64, (p % k.width) as f64);
            let wx = (u - k.cx) / k.fx * depth + x;
            let wy = (v - k.cy) / k.fy * depth;
            albedo(wx, wy) as f32
        });
        let sparse_points = grid
            .iter()
            .enumerate()
            .filter_map(|(id, &(px, py))| {
                let proj = k.project(&Vector3::new(px - x, py, depth));
                (proj.valid && k.in_image(proj.pixel.x, proj.pixel.y)).then(|| SparsePoint {
                    u: proj.pixel.x as f32,
                    v: proj.pixel.y as f32,
                    depth: depth as f32,
                    map_point_id: id as u64,
                })
            })
            .collect();
        store
            .insert(Keyframe {
                id: i as u64,
                timestamp: i as f64,
                image,
                pose,
                sparse_points,
                gt_depth: None,
                gt_pose: Some(pose),
                last_val_loss: Some(0.0),
            })
            .unwrap();
    }
    store
}

/// Right-perturbs every free pose by a random twist of norm `pose_norm` and scales
/// every depth by 1 ± `depth_frac`.
pub fn perturb(p: &BaProblem, seed: u64, pose_norm: f64, depth_frac: f64) -> BaState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = p.initial.clone();
    for (pose, fixed) in st.poses.iter_mut().zip(&p.fixed) {
        let v = Vector6::from_fn(|_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        if !fixed {
            *pose = pose.compose(&PoseSE3::exp(&(v.normalize() * pose_norm)));
        }
    }
    for rho in st.inverse_depth.iter_mut() {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        *rho /= 1.0 + sign * depth_frac;
    }
    st
}

pub fn trajectory(store: &KeyframeStore, poses: &[PoseSE3]) -> Trajectory {
    Trajectory::new(store.keyframes().iter().zip(poses).map(|(k, p)| (k.timestamp, *p)).collect()).unwrap()
}

pub fn gt_trajectory(store: &KeyframeStore) -> Trajectory {
    Trajectory::new(store.keyframes().iter().map(|k| (k.timestamp, k.gt_pose.unwrap())).collect()).unwrap()
}

/// Gate schedule that tightens as the poses settle.
pub fn recovery_options() -> BaOptions {
    BaOptions {
        max_iters: 50,
        edge_outlier_rms: 0.1,
        regate: vec![0.03, 0.01, 0.005, 0.005],
        ..BaOptions::default()
    }
}

pub struct Recovery {
    pub initial_ate: f64,
    pub final_ate: f64,
    pub monotone: bool,
    pub accepted: usize,
}

/// Perturbs the layered scene of `seed`, adjusts it and reports sim3-aligned ATE
/// before and after.
pub fn recovery(seed: u64) -> Recovery {
    let (_, store) = scene_store(SceneSpec::layered(seed, 10));
    let mut p = BaProblem::build(&store, None).unwrap();
    p.initial = perturb(&p, 100 + seed, 0.02, 0.05);
    let gt = gt_trajectory(&store);
    let initial_ate = ate_rmse(&trajectory(&store, &p.initial.poses), &gt, Alignment::Sim3, 1e-6).unwrap();
    let sol = solve_ba(&p, &recovery_options()).unwrap();
    let final_ate = ate_rmse(&trajectory(&store, &sol.state.poses), &gt, Alignment::Sim3, 1e-6).unwrap();
    let costs: Vec<f64> = std::iter::once(sol.report.initial_cost)
        .chain(sol.report.iterations.iter().filter(|i| i.accepted).map(|i| i.cost))
        .collect();
    Recovery {
        initial_ate,
        final_ate,
        monotone: costs.windows(2).all(|w| w[1] <= w[0]),
        accepted: sol.report.accepted(),
    }
}

/// Five-frame TUM directory at 16×16. Depth stamps sit 0.019 s and 0.030 s from the
/// second and fourth rgb stamps, so with the default 0.02 s tolerance four frames
/// associate and the fourth is skipped. Every depth pixel stores 5000 (1 m).
pub fn tum_fixture(dir: &std::path::Path) -> mutadapt::tum::TumOptions {
    use image::{ImageBuffer, Luma, Rgb};
    std::fs::create_dir_all(dir.join("rgb")).unwrap();
    std::fs::create_dir_all(dir.join("depth")).unwrap();
    let rgb_t = [1.0, 1.1, 1.2, 1.3, 1.4];
    let depth_t = [1.0, 1.119, 1.2, 1.33, 1.4];
    let (mut rgb, mut depth, mut gt) = (String::new(), String::new(), String::new());
    for (i, (tr, td)) in rgb_t.iter().zip(&depth_t).enumerate() {
        let img = ImageBuffer::from_fn(16, 16, |x, y| {
            let v = (40 + 9 * x + 5 * y + 13 * i as u32) as u8;
            Rgb([v, v, v])
        });
        img.save(dir.join(format!("rgb/{i}.png"))).unwrap();
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_pixel(16, 16, Luma([5000]))
            .save(dir.join(format!("depth/{i}.png")))
            .unwrap();
        rgb += &format!("{tr:.6} rgb/{i}.png\n");
        depth += &format!("{td:.6} depth/{i}.png\n");
        gt += &format!("{tr:.4} {:.4} 0 0 0 0 0 1\n", 0.01 * i as f64);
    }
    std::fs::write(dir.join("rgb.txt"), format!("# color images\n{rgb}")).unwrap();
    std::fs::write(dir.join("depth.txt"), depth).unwrap();
    std::fs::write(dir.join("groundtruth.txt"), format!("# timestamp tx ty tz qx qy qz qw\n{gt}")).unwrap();
    mutadapt::tum::TumOptions {
        keyframe_every: 1,
        intrinsics: Intrinsics::new(14.0, 14.0, 7.5, 7.5, 16, 16).unwrap(),
        grid_size: 4,
        ..mutadapt::tum::TumOptions::default()
    }
}

pub struct CullEfficacy {
    pub outliers: usize,
    pub inliers: usize,
    pub recall: f64,
    pub false_cull: f64,
    pub e_si_before: f64,
    pub e_si_after: f64,
}

/// Culls an env_a map whose points are displaced ×3 along their rays with
/// probability `ratio`, using the exact ground-truth depth as the network output.
pub fn cull_efficacy(seed: u64, ratio: f64) -> CullEfficacy {
    use mutadapt::evaluation::map_depth_error;
    use mutadapt::map_refinement::{cull_map, CullConfig};
    let mut spec = SceneSpec::env_a(seed, 10);
    spec.noise.outlier_ratio = ratio;
    spec.noise.outlier_scale = 3.0;
    let (scene, mut store) = scene_store(spec);
    let depth_maps = store
        .keyframes()
        .iter()
        .map(|k| (k.id, k.gt_depth.clone().unwrap()))
        .collect();
    let truth = scene.outliers();
    let in_map: std::collections::BTreeSet<u64> = store.map_points().keys().copied().collect();
    let outliers: std::collections::BTreeSet<u64> = truth.intersection(&in_map).copied().collect();
    let e_si_before = map_depth_error(&store).unwrap().e_si;
    let cfg = CullConfig { gamma: 0.5, d_max: 100.0 };
    let report = cull_map(&mut store, &depth_maps, &cfg).unwrap();
    let hit = report.culled.intersection(&outliers).count();
    let inliers = in_map.len() - outliers.len();
    let false_culls = report.culled.len() - hit;
    CullEfficacy {
        outliers: outliers.len(),
        inliers,
        recall: hit as f64 / outliers.len() as f64,
        false_cull: false_culls as f64 / inliers as f64,
        e_si_before,
        e_si_after: map_depth_error(&store).unwrap().e_si,
    }
}
