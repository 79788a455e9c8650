mod common;

use rand::Rng;
use swapf::distance::{build_cdf, build_swdm, CdfProfile};
use swapf::estimate::{extract_estimate, DbscanParams};
use swapf::filter::{initialize, step, InitStrategy, MapModel, StateBounds, StepConfig};
use swapf::measurement::{build_rotation_cache, CameraModel, FrameContext, SemanticWeights};
use swapf::motion::{MotionModel, NoiseParams, Pose4};
use swapf::raster::classes;
use swapf::sim::*;

#[test]
fn composite_world_has_every_class() {
    let world = generate_world(&WorldSpec::composite(2000.0, 1.0, 21)).unwrap();
    assert_eq!((world.width(), world.height()), (2000, 2000));
    let hist = world.histogram();
    let total = (2000 * 2000) as f64;
    for class in 0..classes::COUNT as usize {
        assert!(hist[class] as f64 / total >= 0.01, "class {class}: {}", hist[class]);
    }
    assert_eq!(hist[classes::COUNT as usize], 0);
}

fn frame_ctx_weight(world: &swapf::raster::SemanticRaster, obs: &swapf::raster::SemanticRaster, cam: &CameraModel, poses: &[Pose4]) -> Vec<f64> {
    let swdm = build_swdm(world);
    let cdf = build_cdf(cam.view_side, CdfProfile::Linear);
    let weights = SemanticWeights::uniform(classes::COUNT, 10.0);
    let cache = build_rotation_cache(obs, 100).unwrap();
    let ctx = FrameContext {
        cache: &cache,
        swdm: &swdm,
        meters_per_pixel: world.meters_per_pixel(),
        cdf: &cdf,
        weights: &weights,
        camera: cam,
    };
    ctx.raw_weights(poses)
}

#[test]
fn ground_truth_outscores_distant_pose() {
    let world = generate_world(&WorldSpec::composite(1000.0, 1.0, 22)).unwrap();
    let cam = CameraModel { fov_deg: 60.0, view_side: 64 };
    let mut r = common::rng(3);
    for _ in 0..10 {
        let gt = Pose4::new(r.random_range(300.0..700.0), r.random_range(300.0..700.0), 200.0, r.random_range(0.0..360.0));
        let obs = render_observation(&world, &gt, &cam, &SensorNoiseSpec::none(), 0);
        let away = Pose4 { x: gt.x + 200.0, ..gt };
        let w = frame_ctx_weight(&world, &obs, &cam, &[gt, away]);
        assert!(w[0] > w[1], "{w:?}");
    }
}

#[test]
fn rendering_then_weighing_peaks_at_the_pose() {
    let world = generate_world(&WorldSpec::composite(1000.0, 1.0, 23)).unwrap();
    let cam = CameraModel { fov_deg: 60.0, view_side: 64 };
    let mut r = common::rng(4);
    for _ in 0..20 {
        let gt = Pose4::new(
            r.random_range(200.0..800.0),
            r.random_range(200.0..800.0),
            r.random_range(120.0..400.0),
            r.random_range(0.0..360.0),
        );
        let obs = render_observation(&world, &gt, &cam, &SensorNoiseSpec::none(), 0);
        let mut poses = vec![gt];
        for dy in [-10.0, 0.0, 10.0] {
            for dx in [-10.0, 0.0, 10.0] {
                if dx != 0.0 || dy != 0.0 {
                    poses.push(Pose4 { x: gt.x + dx, y: gt.y + dy, ..gt });
                }
            }
        }
        let w = frame_ctx_weight(&world, &obs, &cam, &poses);
        assert!(w[1..].iter().all(|&v| v <= w[0]), "gt {gt:?}: {w:?}");
    }
}

#[test]
fn noise_free_filter_near_truth_does_not_diverge() {
    let world = generate_world(&WorldSpec::composite(1000.0, 1.0, 24)).unwrap();
    let swdm = build_swdm(&world);
    let cam = CameraModel { fov_deg: 60.0, view_side: 48 };
    let cdf = build_cdf(48, CdfProfile::Linear);
    let weights = SemanticWeights::uniform(classes::COUNT, 10.0);
    let model = MapModel { map: &world, swdm: &swdm, cdf: &cdf, weights: &weights, camera: &cam, bin_count: 100 };
    let motion = MotionModel { noise: NoiseParams { sigma_xy: 5.0, sigma_h: 5.0, sigma_theta: 2.0 }, ..MotionModel::default() };
    let traj = TrajectorySpec::polyline(&[(350.0, 400.0), (550.0, 400.0), (550.0, 600.0)], 10.0, 200.0, 200.0, 1.0);
    let mut improved = 0;
    for run in 0..20u64 {
        let frames = run_scenario(&world, &traj, &SensorNoiseSpec::none(), &cam, run).unwrap();
        let gt0 = frames[0].gt;
        // seed box displaced ~30 m from the truth in a random direction
        let a = (run as f64 * 2.4).rem_euclid(std::f64::consts::TAU);
        let (cx, cy) = (gt0.x + 30.0 * a.cos(), gt0.y + 30.0 * a.sin());
        let bounds = StateBounds { x: (cx - 25.0, cx + 25.0), y: (cy - 25.0, cy + 25.0), h: (160.0, 240.0) };
        let mut ps = initialize(600, &bounds, &InitStrategy::FullSpace, None, 100 + run).unwrap();
        let params = DbscanParams { eps: 30.0, min_pts: 6 };
        let initial = extract_estimate(&ps, &params, 1e9).mean.horizontal_distance(&gt0);
        for f in &frames {
            step(&mut ps, &f.observation(), &model, &motion, &StepConfig::default()).unwrap();
        }
        let last = frames.last().unwrap().gt;
        let fin = extract_estimate(&ps, &params, 1e9).mean.horizontal_distance(&last);
        if fin < initial {
            improved += 1;
        }
    }
    assert!(improved >= 19, "{improved}/20 runs improved");
}
