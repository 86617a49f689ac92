use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatstereo::geometry::{Camera, CameraIntrinsics, CameraPose};
use splatstereo::grid::{ColorImage, Grid};
use splatstereo::render::{render, render_with_gradients, Gaussian3D, RenderConfig};

fn random_scene(rng: &mut ChaCha8Rng, n: usize, scale: (f64, f64)) -> Vec<Gaussian3D> {
    (0..n)
        .map(|_| {
            let z = rng.gen_range(1.5..5.0);
            Gaussian3D {
                mean: Vector3::new(rng.gen_range(-0.6..0.6) * z, rng.gen_range(-0.6..0.6) * z, z),
                rotation: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                scale: Vector3::from_fn(|_, _| rng.gen_range(scale.0..scale.1)),
                color: Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
                opacity: rng.gen_range(0.05..1.0),
            }
        })
        .collect()
}

fn camera(size: usize) -> Camera {
    let c = (size - 1) as f64 / 2.0;
    let f = size as f64 * 0.9;
    Camera::new(CameraIntrinsics::new(f, f, c, c, size, size).unwrap(), CameraPose::identity())
}

/// Per-pixel full-sort alpha blending, written independently of the tiler.
fn brute_force(gs: &[Gaussian3D], cam: &Camera, cfg: &RenderConfig) -> ColorImage {
    let k = &cam.intrinsics;
    let w = cam.pose.rotation();
    let mut splats: Vec<(f64, usize, Vector2<f64>, Matrix2<f64>, f64, Vector3<f64>)> = Vec::new();
    for (i, g) in gs.iter().enumerate() {
        let t = cam.pose.to_camera(&g.mean);
        if t.z <= cfg.near_plane || g.opacity < cfg.min_alpha {
            continue;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]));
        let r = q.to_rotation_matrix().into_inner();
        let sigma = r * Matrix3::from_diagonal(&g.scale.component_mul(&g.scale)) * r.transpose();
        let j = Matrix2x3::new(k.fx / t.z, 0.0, -k.fx * t.x / (t.z * t.z), 0.0, k.fy / t.z, -k.fy * t.y / (t.z * t.z));
        let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * cfg.blur_floor;
        let conic = cov.try_inverse().unwrap();
        let mean = Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
        splats.push((t.z, i, mean, conic, g.opacity, g.color));
    }
    splats.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Grid::from_fn(k.width, k.height, |x, y| {
        let p = Vector2::new(x as f64, y as f64);
        let mut c = Vector3::zeros();
        let mut tr = 1.0;
        for (_, _, mean, conic, a, col) in &splats {
            let d = p - mean;
            let alpha = a * (-0.5 * (d.transpose() * conic * d)[0]).exp();
            if alpha < cfg.min_alpha {
                continue;
            }
            c += col * alpha * tr;
            tr *= 1.0 - alpha;
            if tr < cfg.transmittance_cutoff {
                break;
            }
        }
        let bg = Vector3::from(cfg.background);
        let out = c + bg * tr;
        [out.x, out.y, out.z]
    })
}

fn max_diff(a: &ColorImage, b: &ColorImage) -> f64 {
    a.data().iter().zip(b.data()).flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs())).fold(0.0, f64::max)
}

#[test]
fn tiled_render_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..Default::default() };
    for n in [1, 20, 100, 300] {
        let gs = random_scene(&mut rng, n, (0.005, 0.15));
        let cam = camera(64);
        let tiled = render(&gs, &cam, &cfg).unwrap();
        let oracle = brute_force(&gs, &cam, &cfg);
        assert!(max_diff(&tiled.color, &oracle) < 1e-5, "n = {n}: {}", max_diff(&tiled.color, &oracle));
        assert!(tiled.alpha.data().iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn zero_opacity_equals_removal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = RenderConfig::default();
    let mut gs = random_scene(&mut rng, 50, (0.01, 0.1));
    let cam = camera(48);
    let removed: Vec<_> = gs[1..].to_vec();
    gs[0].opacity = 0.0;
    let a = render(&gs, &cam, &cfg).unwrap();
    let b = render(&removed, &cam, &cfg).unwrap();
    assert!(max_diff(&a.color, &b.color) < 1e-7);
}

#[test]
fn bit_identical_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gs = random_scene(&mut rng, 400, (0.005, 0.1));
    let cam = camera(96);
    let cfg = RenderConfig::default();
    let mut adj = Grid::filled(96, 96, [0.0; 3]);
    for v in adj.data_mut() {
        *v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    }
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| render_with_gradients(&gs, &cam, &adj, &cfg).unwrap())
    };
    let base = run(1);
    for t in [2, 8] {
        assert_eq!(run(t), base);
    }
}

fn loss(gs: &[Gaussian3D], cam: &Camera, adj: &ColorImage, cfg: &RenderConfig) -> f64 {
    let f = render(gs, cam, cfg).unwrap();
    f.color.data().iter().zip(adj.data()).map(|(c, a)| c[0] * a[0] + c[1] * a[1] + c[2] * a[2]).sum()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = RenderConfig::smooth();
    let cam = camera(32);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let mut gs = random_scene(&mut rng, 10, (0.05, 0.4));
        for g in &mut gs {
            let n = splatstereo::render::quat_norm(&g.rotation);
            g.rotation.iter_mut().for_each(|v| *v /= n);
        }
        let mut adj = Grid::filled(32, 32, [0.0; 3]);
        for v in adj.data_mut() {
            *v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        }
        let (_, grads) = render_with_gradients(&gs, &cam, &adj, &cfg).unwrap();
        for i in 0..gs.len() {
            let mut check = |analytic: f64, set: &dyn Fn(&mut Gaussian3D, f64)| {
                let mut p = gs.clone();
                set(&mut p[i], h);
                let lp = loss(&p, &cam, &adj, &cfg);
                let mut m = gs.clone();
                set(&mut m[i], -h);
                let lm = loss(&m, &cam, &adj, &cfg);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "gaussian {i}: analytic {analytic} vs fd {fd}");
            };
            for k in 0..3 {
                check(grads.mean[i][k], &|g, d| g.mean[k] += d);
                check(grads.scale[i][k], &|g, d| g.scale[k] += d);
                check(grads.color[i][k], &|g, d| g.color[k] += d);
            }
            for k in 0..4 {
                check(grads.rotation[i][k], &|g, d| g.rotation[k] += d);
            }
            check(grads.opacity[i], &|g, d| g.opacity += d);
        }
    }
    println!("worst relative error {worst:e}");
}
