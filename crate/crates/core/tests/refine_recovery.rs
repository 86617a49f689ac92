use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatstereo::geometry::{rectify_pair, CalibratedView};
use splatstereo::losses::{refine_gaussian_maps, LossReport, LearningRates, RefineConfig, RefineSource, TargetView};
use splatstereo::mapper::{lift_to_gaussians, merge_views};
use splatstereo::mapper::GaussianMapper;
use splatstereo::render::{render, GaussianCloud, RenderConfig, SourceView};
use splatstereo::stereo::{extract_features, StereoModel};
use splatstereo::synthetic::{arc_scene, ArcSceneSpec};

struct Problem {
    truth: [RefineSource; 2],
    perturbed: [RefineSource; 2],
    targets: Vec<TargetView>,
}

fn cloud(s: &[RefineSource; 2]) -> GaussianCloud {
    let a = lift_to_gaussians(&s[0].maps, &s[0].depth, &s[0].projection, s[0].view).unwrap().cloud;
    let b = lift_to_gaussians(&s[1].maps, &s[1].depth, &s[1].projection, s[1].view).unwrap().cloud;
    merge_views(&a, &b)
}

/// Maps built on exact depth with opacity 0.5, then every opacity moved by +-0.3.
fn problem(width: usize, height: usize) -> Problem {
    let cfg = RenderConfig::default();
    let spec = ArcSceneSpec { width, height, texture_sigma: 4.0, ..Default::default() };
    let scene = arc_scene(&spec, &cfg).unwrap();
    let pair = rectify_pair(
        CalibratedView { image: &scene.images[0], camera: &scene.cameras[0] },
        CalibratedView { image: &scene.images[2], camera: &scene.cameras[2] },
    )
    .unwrap();
    let model = StereoModel::default();
    let mapper = GaussianMapper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let build = |image, camera: splatstereo::geometry::Camera, view| {
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
    let mut perturbed = truth.clone();
    for s in &mut perturbed {
        for o in s.maps.opacity.data_mut() {
            *o += if rng.gen::<bool>() { 0.3 } else { -0.3 };
        }
    }
    let known = cloud(&truth);
    let targets = [scene.cameras[1], scene.cameras[0]]
        .into_iter()
        .map(|camera| TargetView { image: render(&known.gaussians, &camera, &cfg).unwrap().color, camera, mask: None })
        .collect();
    Problem { truth, perturbed, targets }
}

#[test]
fn perturbed_opacities_are_recovered() {
    let p = problem(96, 72);
    let out = refine_gaussian_maps(&p.perturbed[0], &p.perturbed[1], &p.targets, &RefineConfig::default()).unwrap();
    let tr = &out.trajectory;
    assert_eq!(tr.len(), 201);
    let gain = tr[200].psnr - tr[0].psnr;
    assert!(gain >= 5.0, "{} -> {}", tr[0].psnr, tr[200].psnr);
    let smooth = |key: fn(&LossReport) -> f64| -> Vec<f64> {
        tr.windows(10).map(|w| w.iter().map(key).sum::<f64>() / 10.0).collect()
    };
    let total = smooth(|r| r.l_total);
    assert!(total.windows(2).all(|w| w[1] <= w[0]));
    // the rendering term trades against the Chamfer term near convergence
    let render = smooth(|r| r.l_render);
    assert!(render.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-3)));
    assert!(render[render.len() - 1] < 0.2 * render[0]);
    let err = |maps: [&splatstereo::mapper::GaussianParameterMaps; 2]| -> f64 {
        maps.iter()
            .zip(&p.truth)
            .map(|(m, t)| m.opacity.data().iter().zip(t.maps.opacity.data()).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum()
    };
    assert!(err([&out.left, &out.right]) < err([&p.perturbed[0].maps, &p.perturbed[1].maps]));
    let refined = [RefineSource { maps: out.left, ..p.perturbed[0].clone() }, RefineSource { maps: out.right, ..p.perturbed[1].clone() }];
    assert!(cloud(&refined).is_well_formed());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let p = problem(48, 36);
    let cfg = RefineConfig { steps: 4, learning_rates: LearningRates::zero(), ..Default::default() };
    let out = refine_gaussian_maps(&p.perturbed[0], &p.perturbed[1], &p.targets, &cfg).unwrap();
    assert_eq!(out.left, p.perturbed[0].maps);
    assert_eq!(out.right, p.perturbed[1].maps);
    assert!(out.trajectory.iter().all(|r| r.l_total == out.trajectory[0].l_total));
    let none = RefineConfig { steps: 0, ..Default::default() };
    assert!(refine_gaussian_maps(&p.perturbed[0], &p.perturbed[1], &p.targets, &none).is_err());
    assert!(refine_gaussian_maps(&p.perturbed[0], &p.perturbed[1], &[], &cfg).is_err());
}
