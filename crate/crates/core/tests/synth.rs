use conecal::calibrate::{optimize_amplitudes, rmse, OptimizerOptions};
use conecal::raytrace::raycast;
use conecal::synth::{generate_dataset, project_corner, sample_poses, PoseSampler, SynthConfig};
use conecal::{CameraIntrinsics, ConeGeometry, RbfPatch, RbfSurface, SceneParams};

fn board_error(params: &SceneParams, k: usize, p: [f64; 2], x: [f64; 2]) -> f64 {
    match raycast(params, k, p) {
        Ok(b) => (b[0] - x[0]).hypot(b[1] - x[1]),
        Err(_) => f64::INFINITY,
    }
}

fn grid_search(params: &SceneParams, k: usize, x: [f64; 2], center: [f64; 2], half: f64, step: f64) -> [f64; 2] {
    let n = (half / step).round() as i64;
    let mut best = (f64::INFINITY, center);
    for a in -n..=n {
        for b in -n..=n {
            let p = [center[0] + a as f64 * step, center[1] + b as f64 * step];
            let e = board_error(params, k, p, x);
            if e < best.0 {
                best = (e, p);
            }
        }
    }
    best.1
}

#[test]
fn projection_matches_grid_search() {
    let ds = generate_dataset(&SynthConfig {
        seed: 3,
        n_images: 4,
        ..Default::default()
    })
    .unwrap();
    let params = &ds.truth;
    let mut checked = 0;
    for (k, pose) in params.poses.iter().enumerate() {
        for (i, j) in [(1, 1), (4, 4), (7, 2), (2, 7), (7, 7)] {
            let x = pose.corner_local(i, j);
            let pinhole = params.intrinsics.project(pose.board_local_to_world(x));
            let p = project_corner(params, k, x).unwrap();
            if (p[0] - pinhole[0]).abs() > 19.0 || (p[1] - pinhole[1]).abs() > 19.0 {
                continue;
            }
            let coarse = grid_search(params, k, x, [pinhole[0].round(), pinhole[1].round()], 20.0, 1.0);
            let fine = grid_search(params, k, x, coarse, 1.0, 0.01);
            assert!(
                (p[0] - fine[0]).abs() <= 0.01 && (p[1] - fine[1]).abs() <= 0.01,
                "image {k} corner ({i}, {j}): solver {p:?} vs grid {fine:?}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 15, "only {checked} corners inside the search window");
}

#[test]
fn projected_corners_satisfy_the_raycast() {
    let ds = generate_dataset(&SynthConfig::default()).unwrap();
    for c in ds.observations.corners() {
        let e = board_error(&ds.truth, c.image, c.pixel, c.board_local);
        assert!(e < 1e-9, "corner {:?} of image {}: {e:e} m", c.grid, c.image);
    }
}

#[test]
fn flat_cover_fits_to_zero() {
    let cfg = SynthConfig {
        mu_a_m: 0.0,
        sigma_a_m: 0.0,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let start = ds.truth.with_surface(RbfSurface::zeros(cfg.patch, 4, 4).unwrap());
    let fit = optimize_amplitudes(&start, &ds.observations, &OptimizerOptions { steps: 500, ..Default::default() }).unwrap();
    let worst = fit.surface.amplitudes().iter().fold(0.0f64, |m, a| m.max(a.abs()));
    assert!(worst < 1e-7, "largest amplitude {worst:e} m");
}

#[test]
fn pixel_noise_raises_the_floor() {
    let fitted = |noise_px: f64| {
        let cfg = SynthConfig {
            noise_px,
            seed: 11,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let start = ds.truth.with_surface(RbfSurface::zeros(cfg.patch, 4, 4).unwrap());
        let fit = optimize_amplitudes(&start, &ds.observations, &OptimizerOptions { steps: 500, ..Default::default() }).unwrap();
        rmse(&ds.truth.with_surface(fit.surface), &ds.observations).unwrap()
    };
    let clean = fitted(0.0);
    let noisy = fitted(0.5);
    assert!(noisy > clean, "noisy {noisy:e} cm vs clean {clean:e} cm");
}

#[test]
fn datasets_are_reproducible_per_seed() {
    let cfg = SynthConfig {
        noise_px: 0.3,
        n_images: 3,
        seed: 5,
        ..Default::default()
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&SynthConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.truth.surface, c.truth.surface);
}

#[test]
fn sampled_poses_stay_on_the_sensor() {
    let sampler = PoseSampler {
        seed: 9,
        ..Default::default()
    };
    let intr = CameraIntrinsics::default();
    let cone = ConeGeometry::default();
    let patch = RbfPatch::default();
    let poses = sample_poses(&sampler, &intr, &cone, patch, 12).unwrap();
    assert_eq!(poses, sample_poses(&sampler, &intr, &cone, patch, 12).unwrap());
    let params = SceneParams {
        intrinsics: intr,
        cone,
        surface: RbfSurface::zeros(patch, 2, 2).unwrap(),
        poses,
    };
    let m = sampler.margin_px;
    for (k, pose) in params.poses.iter().enumerate() {
        let t = pose.translation;
        assert!(t.z >= sampler.depth_range_m[0] && t.z <= sampler.depth_range_m[1]);
        for i in 1..=pose.corners_per_side {
            for j in 1..=pose.corners_per_side {
                let p = project_corner(&params, k, pose.corner_local(i, j)).unwrap();
                assert!(p[0] >= m && p[1] >= m && p[0] <= intr.width as f64 - m && p[1] <= intr.height as f64 - m);
            }
        }
    }
}
