//! One line per acceptance criterion. Exits nonzero if any gating criterion fails.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatstereo::geometry::{rectify_pair, CalibratedView, Camera, CameraIntrinsics, CameraPose, CameraRig, RigCamera};
use splatstereo::grid::{ColorImage, FeatureMap, Grid};
use splatstereo::losses::{
    chamfer_distance, image_metrics, refine_gaussian_maps, total_loss, LossParts, LossReport, LossWeights,
    RefineConfig, RefineSource, TargetView,
};
use splatstereo::mapper::{lift_to_gaussians, merge_views, GaussianMapper};
use splatstereo::render::{
    build_covariance, normalize_quat, quat_norm, render, render_timed, render_with_gradients, Gaussian3D, GaussianCloud, RenderConfig,
    SourceView,
};
use splatstereo::stereo::{build_cost_volume, disparity_metrics, estimate_disparity, extract_features, StereoModel};
use splatstereo::synthetic::{arc_scene, plane_stereo_pair, ArcSceneSpec, PlaneSpec};
use splatstereo_pipeline::session::{RenderRequest, Session};
use splatstereo_pipeline::{PipelineConfig, SceneDataset};

struct Verdict {
    pass: bool,
    detail: String,
    gating: bool,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail, gating: true }
}

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

fn square_camera(size: usize) -> Camera {
    let c = (size - 1) as f64 / 2.0;
    let f = size as f64 * 0.9;
    Camera::new(CameraIntrinsics::new(f, f, c, c, size, size).unwrap(), CameraPose::identity())
}

/// Per-pixel full-sort front-to-back blending.
fn brute_force(gs: &[Gaussian3D], cam: &Camera, cfg: &RenderConfig) -> ColorImage {
    let k = &cam.intrinsics;
    let w = cam.pose.rotation();
    let mut splats = Vec::new();
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
        let mean = Vector2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
        splats.push((t.z, i, mean, cov.try_inverse().unwrap(), g.opacity, g.color));
    }
    splats.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Grid::from_fn(k.width, k.height, |x, y| {
        let p = Vector2::new(x as f64, y as f64);
        let (mut c, mut tr) = (Vector3::zeros(), 1.0);
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
        let out = c + Vector3::from(cfg.background) * tr;
        [out.x, out.y, out.z]
    })
}

fn rasterizer_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..Default::default() };
    let cam = square_camera(128);
    let (mut worst, mut secs) = (0.0f64, 0.0);
    for _ in 0..50 {
        let n = rng.gen_range(1..=500);
        let gs = random_scene(&mut rng, n, (0.005, 0.15));
        let t = Instant::now();
        let tiled = render(&gs, &cam, &cfg).unwrap();
        secs += t.elapsed().as_secs_f64();
        let oracle = brute_force(&gs, &cam, &cfg);
        for (p, q) in tiled.color.data().iter().zip(oracle.data()) {
            for k in 0..3 {
                worst = worst.max((p[k] - q[k]).abs());
            }
        }
    }
    verdict(worst <= 1e-5 && secs < 5.0, format!("max |diff| {worst:.2e} over 50 scenes at 128x128, tiled time {secs:.2} s"))
}

fn adjoint_loss(gs: &[Gaussian3D], cam: &Camera, adj: &ColorImage, cfg: &RenderConfig) -> f64 {
    let f = render(gs, cam, cfg).unwrap();
    f.color.data().iter().zip(adj.data()).map(|(c, a)| c[0] * a[0] + c[1] * a[1] + c[2] * a[2]).sum()
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = RenderConfig::smooth();
    let cam = square_camera(32);
    let h = 1e-4;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut gs = random_scene(&mut rng, 10, (0.05, 0.4));
        for g in &mut gs {
            let n = quat_norm(&g.rotation);
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
                let mut m = gs.clone();
                set(&mut m[i], -h);
                let fd = (adjoint_loss(&p, &cam, &adj, &cfg) - adjoint_loss(&m, &cam, &adj, &cfg)) / (2.0 * h);
                worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
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
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-3 && secs < 60.0, format!("max relative error {worst:.2e} over 50 scenes x 10 Gaussians, {secs:.1} s"))
}

fn covariance_eigenvalues() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mut q = [0.0; 4];
        q.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let q = normalize_quat(&q).unwrap();
        let s = Vector3::from_fn(|_, _| rng.gen_range(1e-3..3.0));
        let sigma = build_covariance(&q, &s);
        let mut eig: Vec<f64> = sigma.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst < 1e-9, format!("max |eig - s^2| {worst:.2e} over 1000 random (r, s)"))
}

fn cost_volume() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut map = || FeatureMap::from_vec(8, 8, 16, (0..8 * 8 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (l, r) = (map(), map());
        let v = build_cost_volume(&l, &r, 4).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    let mut want = 0.0;
                    for c in 0..16 {
                        want += l.pixel(j, i)[c] * r.pixel(k, i)[c];
                    }
                    worst = worst.max((v.get(i, j, k) - want).abs());
                }
            }
        }
    }
    verdict(worst < 1e-6, format!("max |diff| {worst:.2e} against the triple loop on 20 random 8x8x16 pairs"))
}

fn stereo_plane() -> Verdict {
    let spec = PlaneSpec::default();
    let scene = plane_stereo_pair(&spec).unwrap();
    let model = StereoModel::default();
    let t = Instant::now();
    let d = estimate_disparity(&scene.pair.left_image, &scene.pair.right_image, &model).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (w, h, b) = (spec.width, spec.height, 16);
    let mask = Grid::from_fn(w, h, |x, y| {
        *d.valid.get(x, y) && *scene.left_visible.get(x, y) && x >= b && y >= b && x + b < w && y + b < h
    });
    let m = disparity_metrics(&d.values, &scene.left_disparity, &mask).unwrap();
    verdict(
        m.epe < 0.5 && m.one_pixel_ratio > 0.9 && secs < 10.0,
        format!(
            "true disparity {:.1} px: EPE {:.3} px, 1-px ratio {:.3}, {} px evaluated, {secs:.2} s at {w}x{h}",
            spec.disparity(),
            m.epe,
            m.one_pixel_ratio,
            mask.count()
        ),
    )
}

fn end_to_end() -> Verdict {
    let cfg = RenderConfig::default();
    let mut details = Vec::new();
    let mut pass = true;
    for seed in [0, 1] {
        let spec = ArcSceneSpec { texture_sigma: 4.0, seed, ..Default::default() };
        let scene = arc_scene(&spec, &cfg).unwrap();
        let rig = CameraRig::new(
            vec![
                RigCamera { id: "a".into(), camera: scene.cameras[0] },
                RigCamera { id: "b".into(), camera: scene.cameras[2] },
            ],
            Vector3::zeros(),
        )
        .unwrap();
        let frame = [("a".to_string(), scene.images[0].clone()), ("b".to_string(), scene.images[2].clone())].into();
        let t = Instant::now();
        let dataset = SceneDataset::from_images(rig, vec![frame]).unwrap();
        let mut session = Session::from_config(dataset, PipelineConfig::default()).unwrap();
        let out = session.render(&RenderRequest { frame: 0, camera: scene.cameras[1], refine: None }).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let r = &session.cached().unwrap().rectified;
        let mask = scene.covisibility(
            &scene.cameras[1],
            &[(r.left_camera(), &r.left_valid), (r.right_camera(), &r.right_valid)],
            4,
        );
        let (psnr, ssim) = image_metrics(&out.frame.color, &scene.images[1], &mask).unwrap();
        let coverage = mask.count() as f64 / mask.len() as f64;
        pass &= psnr >= 30.0 && secs < 30.0;
        details.push(format!("seed {seed}: PSNR {psnr:.2} dB, SSIM {ssim:.4} on {:.0}% of pixels, {secs:.2} s", 100.0 * coverage));
    }
    verdict(pass, details.join("; "))
}

fn refinement() -> Verdict {
    let cfg = RenderConfig::default();
    let spec = ArcSceneSpec { width: 96, height: 72, texture_sigma: 4.0, ..Default::default() };
    let scene = arc_scene(&spec, &cfg).unwrap();
    let pair = rectify_pair(
        CalibratedView { image: &scene.images[0], camera: &scene.cameras[0] },
        CalibratedView { image: &scene.images[2], camera: &scene.cameras[2] },
    )
    .unwrap();
    let model = StereoModel::default();
    let mapper = GaussianMapper::default();
    let build = |image, camera: Camera, view| {
        let depth = scene.surface_depth(&camera);
        let f = extract_features(image, &model.extractor).unwrap();
        let mut maps = mapper.build_maps(image, &f, &depth, pair.intrinsics.fx).unwrap();
        maps.opacity.data_mut().iter_mut().for_each(|o| *o = 0.5);
        RefineSource { maps, depth, projection: camera.projection(), view }
    };
    let truth = [
        build(&pair.left_image, pair.left_camera(), SourceView::Left),
        build(&pair.right_image, pair.right_camera(), SourceView::Right),
    ];
    let lift = |s: &[RefineSource; 2]| -> GaussianCloud {
        let a = lift_to_gaussians(&s[0].maps, &s[0].depth, &s[0].projection, s[0].view).unwrap().cloud;
        let b = lift_to_gaussians(&s[1].maps, &s[1].depth, &s[1].projection, s[1].view).unwrap().cloud;
        merge_views(&a, &b)
    };
    let known = lift(&truth);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut perturbed = truth.clone();
    for s in &mut perturbed {
        for o in s.maps.opacity.data_mut() {
            *o += if rng.gen::<bool>() { 0.3 } else { -0.3 };
        }
    }
    let targets: Vec<TargetView> = [scene.cameras[1], scene.cameras[0]]
        .into_iter()
        .map(|camera| TargetView { image: render(&known.gaussians, &camera, &cfg).unwrap().color, camera, mask: None })
        .collect();
    let out = refine_gaussian_maps(&perturbed[0], &perturbed[1], &targets, &RefineConfig::default()).unwrap();
    let tr = &out.trajectory;
    let smooth: Vec<f64> = tr.windows(10).map(|w| w.iter().map(|r: &LossReport| r.l_total).sum::<f64>() / 10.0).collect();
    let monotone = smooth.windows(2).all(|w| w[1] <= w[0]);
    let (first, last) = (tr[0].psnr, tr[tr.len() - 1].psnr);
    verdict(
        last - first >= 5.0 && monotone && tr.len() == 201,
        format!(
            "held-out PSNR {first:.2} -> {last:.2} dB (+{:.2}) in {} steps, smoothed loss monotone: {monotone}",
            last - first,
            tr.len() - 1
        ),
    )
}

fn loss_constants() -> Verdict {
    let d = LossWeights::default();
    let large = LossWeights::large_depth_range();
    let defaults_ok = d.lambda1 == 0.8 && d.lambda2 == 0.2 && d.mu == 0.9 && d.alpha_cd == 0.5 && d.beta_depth == 0.0;
    let large_ok = large.alpha_cd == 0.005 && large.lambda1 == 0.8 && large.lambda2 == 0.2;
    let mut worst = 0.0f64;
    for (mae, ssim, cd, depth) in [(0.1, 0.3, 0.02, Some(1.5)), (0.0, 0.0, 0.0, None), (0.25, 0.05, 3.0, Some(0.0)), (1.0, 1.0, 1.0, None)] {
        let parts = LossParts { l_mae: mae, l_ssim: ssim, l_cd: cd, l_depth: depth, ..Default::default() };
        let a = total_loss(&parts, &d);
        worst = worst.max((a.l_render - (0.8 * mae + 0.2 * ssim)).abs());
        worst = worst.max((a.l_total - (0.8 * mae + 0.2 * ssim + 0.5 * cd)).abs());
        let b = total_loss(&parts, &large);
        worst = worst.max((b.l_total - (0.8 * mae + 0.2 * ssim + 0.005 * cd)).abs());
        let with_depth = LossWeights { beta_depth: 0.3, ..d };
        let c = total_loss(&parts, &with_depth);
        worst = worst.max((c.l_total - (0.8 * mae + 0.2 * ssim + 0.5 * cd + 0.3 * depth.unwrap_or(0.0))).abs());
    }
    verdict(
        defaults_ok && large_ok && worst < 1e-9,
        format!("defaults match (0.8, 0.2, 0.9, 0.5/0.005, 0): {}, max |diff| {worst:.1e}", defaults_ok && large_ok),
    )
}

fn chamfer() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let brute = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
        let dir = |p: &[Vector3<f64>], q: &[Vector3<f64>]| {
            p.iter().map(|x| q.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / p.len() as f64
        };
        dir(a, b) + dir(b, a)
    };
    let mut worst = 0.0f64;
    let mut self_zero = true;
    for (n, m) in [(500, 500), (1, 500), (500, 1), (37, 421), (250, 250)] {
        let mut cloud = |k: usize| -> Vec<Vector3<f64>> {
            (0..k).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0))).collect()
        };
        let (a, b) = (cloud(n), cloud(m));
        worst = worst.max((chamfer_distance(&a, &b).unwrap() - brute(&a, &b)).abs());
        self_zero &= chamfer_distance(&a, &a).unwrap() == 0.0;
    }
    verdict(worst <= 1e-9 && self_zero, format!("max |grid - brute| {worst:.1e} up to 2x500 points, identical sets give 0: {self_zero}"))
}

fn timing(out: &mut Vec<(&'static str, Verdict)>) {
    // cache hits: render time depends on the target only, not on source processing
    let spec = ArcSceneSpec { texture_sigma: 4.0, ..Default::default() };
    let toy = splatstereo_pipeline::toy::toy_scene(&spec, 1, &RenderConfig::default()).unwrap();
    let mut s = Session::from_config(toy.dataset.clone(), PipelineConfig::default()).unwrap();
    let cold = s.render(&RenderRequest { frame: 0, camera: toy.held_out, refine: None }).unwrap();
    let mut src = Vec::new();
    let mut view = Vec::new();
    let mut hits = true;
    for i in 0..8 {
        let dx = 0.002 * (i as f64 - 3.5);
        let t = toy.held_out.pose.translation() - Vector3::new(dx, 0.0, 0.0);
        let camera = Camera::new(toy.held_out.intrinsics, CameraPose::new(*toy.held_out.pose.rotation(), t).unwrap());
        let o = s.render(&RenderRequest { frame: 0, camera, refine: None }).unwrap();
        hits &= o.cache_hit;
        src.push(o.timings.t_src_ms);
        view.push(o.timings.t_render_ms);
    }
    let max_src = src.iter().copied().fold(0.0, f64::max);
    view.sort_by(f64::total_cmp);
    let spread = view[view.len() - 1] / view[view.len() / 2];
    out.push((
        "timing: cache-hit independence",
        verdict(
            hits && max_src < 0.05 * cold.timings.t_src_ms && spread < 2.0,
            format!(
                "cold source stage {:.1} ms, cache-hit source stage <= {max_src:.3} ms, novel view {:.1}-{:.1} ms over 8 moved targets",
                cold.timings.t_src_ms,
                view[0],
                view[view.len() - 1]
            ),
        ),
    ));

    // 100k Gaussians at 512x512
    let spec = ArcSceneSpec { width: 512, height: 512, spacing_px: 1.6, texture_sigma: 4.0, ..Default::default() };
    let scene = arc_scene(&spec, &RenderConfig::default()).unwrap();
    let gs = &scene.cloud.gaussians[..100_000.min(scene.cloud.len())];
    let cfg = RenderConfig::default();
    let cam = scene.cameras[1];
    render(gs, &cam, &cfg).unwrap();
    let mut times: Vec<f64> = (0..5).map(|_| render_timed(gs, &cam, &cfg).unwrap().1.total_ms()).collect();
    times.sort_by(f64::total_cmp);
    let ms = times[2];
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!("{} Gaussians at 512x512: median {ms:.1} ms on {cores} core(s)", gs.len());
    let v = if cores >= 8 {
        verdict(ms < 40.0, detail)
    } else {
        Verdict { pass: ms < 40.0, detail: format!("{detail}; the 40 ms bound is stated for 8 cores, not gating here"), gating: false }
    };
    out.push(("timing: 100k-Gaussian view < 40 ms", v));
}

fn determinism() -> Verdict {
    let spec = ArcSceneSpec { width: 128, height: 96, texture_sigma: 4.0, ..Default::default() };
    let toy = splatstereo_pipeline::toy::toy_scene(&spec, 1, &RenderConfig::default()).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut s = Session::from_config(toy.dataset.clone(), PipelineConfig::default()).unwrap();
            let req = RenderRequest { frame: 0, camera: toy.held_out, refine: None };
            let a = s.render(&req).unwrap();
            s.clear_cache();
            let b = s.render(&req).unwrap();
            (a.frame, b.frame, s.cached().unwrap().cloud.clone())
        })
    };
    let base = run(1);
    let mut same = base.0 == base.1;
    for t in [2, 8] {
        let r = run(t);
        same &= r.0 == base.0 && r.1 == base.0 && r.2 == base.2;
    }
    verdict(same, format!("full pipeline render and cloud bit-identical across 1/2/8 threads and repeats: {same}"))
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name, v: Verdict| {
        let mut stdout = std::io::stdout();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        writeln!(stdout, "{tag} {name}: {}", v.detail).unwrap();
        stdout.flush().unwrap();
        results.push((name, v));
    };
    report("rasterizer oracle", rasterizer_oracle());
    report("gradient check", gradient_check());
    report("covariance eigenvalues", covariance_eigenvalues());
    report("cost volume", cost_volume());
    report("stereo plane", stereo_plane());
    report("end-to-end self-consistency", end_to_end());
    report("refinement efficacy", refinement());
    report("loss constants", loss_constants());
    report("chamfer", chamfer());
    let mut t = Vec::new();
    timing(&mut t);
    for (name, v) in t {
        report(name, v);
    }
    report("determinism", determinism());
    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass && v.gating).map(|(n, _)| *n).collect();
    let passed = results.iter().filter(|(_, v)| v.pass).count();
    println!("{passed}/{} criteria pass in {:.1} s", results.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}
