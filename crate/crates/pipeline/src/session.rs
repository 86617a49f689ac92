//! Source-view processing and novel-view rendering with a per-pair cache.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;
use splatstereo::error::Error as CoreError;
use splatstereo::geometry::{
    project_point, rectify_pair, select_source_pair, CalibratedView, Camera, CameraRig, DepthMap, RectifiedPair,
    SelectionConfig,
};
use splatstereo::losses::{refine_gaussian_maps, LossReport, RefineSource, TargetView};
use splatstereo::mapper::{lift_to_gaussians, merge_views, GaussianMapper, GaussianParameterMaps};
use splatstereo::render::{render, GaussianCloud, RenderedFrame, SourceView};
use splatstereo::stereo::{estimate_depth_pair, extract_features, StereoModel};

use crate::config::PipelineConfig;
use crate::dataset::SceneDataset;
use crate::error::{PipelineError, Result};

/// Refinement settings carried by a request. `lr_scale` multiplies every
/// configured learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineRequest {
    pub steps: usize,
    pub lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    pub frame: usize,
    /// Target intrinsics (including output size) and pose.
    pub camera: Camera,
    pub refine: Option<RefineRequest>,
}

/// Everything computed from one frame's source pair.
#[derive(Clone, Debug)]
pub struct SourceStage {
    pub frame: usize,
    pub pair: (String, String),
    pub rectified: RectifiedPair,
    pub depth: [DepthMap; 2],
    pub maps: [GaussianParameterMaps; 2],
    pub cloud: GaussianCloud,
}

impl SourceStage {
    pub fn refine_sources(&self) -> [RefineSource; 2] {
        let r = &self.rectified;
        [
            RefineSource {
                maps: self.maps[0].clone(),
                depth: self.depth[0].clone(),
                projection: r.left_projection(),
                view: SourceView::Left,
            },
            RefineSource {
                maps: self.maps[1].clone(),
                depth: self.depth[1].clone(),
                projection: r.right_projection(),
                view: SourceView::Right,
            },
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub t_src_ms: f64,
    pub t_render_ms: f64,
    pub t_total_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub renders: u64,
}

/// Per-frame summary returned with every render.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameStats {
    pub gaussians: usize,
    /// Fraction of pixels with valid depth in the left and right views.
    pub valid_depth: [f64; 2],
    pub mean_alpha: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutcome {
    pub frame: RenderedFrame,
    pub pair: (String, String),
    pub cache_hit: bool,
    pub timings: StageTimings,
    pub stats: FrameStats,
    /// Loss at every refinement iterate, when refinement ran.
    pub refinement: Option<Vec<LossReport>>,
}

/// Stereo and mapper backends, built once and shared read-only.
#[derive(Debug)]
pub struct Backends {
    pub stereo: StereoModel,
    pub mapper: GaussianMapper,
}

impl Backends {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        let stereo = StereoModel::from_config(config.stereo.clone())?;
        let mapper = GaussianMapper::from_config(config.mapper.clone(), &stereo.extractor.channels())?;
        Ok(Self { stereo, mapper })
    }
}

/// World up for pair ordering: the configured axis, else the mean of the
/// cameras' up directions (image `-y`).
pub fn rig_up(rig: &CameraRig, config: &PipelineConfig) -> Result<Vector3<f64>> {
    if let Some(up) = config.up {
        let v = Vector3::from(up);
        return if v.norm() > 1e-12 { Ok(v.normalize()) } else { Err(PipelineError::Request("up axis is zero".into())) };
    }
    let sum: Vector3<f64> = rig.cameras().iter().map(|c| -c.camera.pose.rotation().row(1).transpose()).sum();
    if sum.norm() < 1e-6 {
        return Err(PipelineError::Dataset("cannot infer an up axis from the rig; set `up` in the config".into()));
    }
    Ok(sum.normalize())
}

/// One client's view of a dataset.
pub struct Session {
    pub dataset: Arc<SceneDataset>,
    pub config: Arc<PipelineConfig>,
    pub backends: Arc<Backends>,
    selection: SelectionConfig,
    cache: Option<SourceStage>,
    pub counters: Counters,
}

impl Session {
    pub fn new(dataset: Arc<SceneDataset>, config: Arc<PipelineConfig>, backends: Arc<Backends>) -> Result<Self> {
        let up = rig_up(&dataset.rig, &config)?;
        Ok(Self { dataset, config, backends, selection: SelectionConfig { up }, cache: None, counters: Counters::default() })
    }

    pub fn from_config(dataset: SceneDataset, config: PipelineConfig) -> Result<Self> {
        let backends = Backends::new(&config)?;
        Self::new(Arc::new(dataset), Arc::new(config), Arc::new(backends))
    }

    pub fn cached(&self) -> Option<&SourceStage> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// The source pair a target camera would use.
    pub fn select_pair(&self, target: &Camera) -> Result<(String, String)> {
        Ok(select_source_pair(&self.dataset.rig, target.pose.center(), &self.selection)?)
    }

    fn check_target(&self, target: &Camera) -> Result<()> {
        let o = self.dataset.rig.scene_center();
        match project_point(o, &target.projection()) {
            Ok(_) => Ok(()),
            Err(CoreError::BehindCamera { depth }) => Err(PipelineError::Core(CoreError::BehindCamera { depth })),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs rectification, stereo, parameter regression and lifting for one
    /// source pair, without touching the cache.
    pub fn process_pair(&self, frame: usize, pair: &(String, String)) -> Result<SourceStage> {
        let ds = &self.dataset;
        let rig_cam = |id: &str| {
            ds.rig.get(id).map(|c| c.camera).ok_or_else(|| PipelineError::Request(format!("no camera {id:?} in the rig")))
        };
        let (cl, cr) = (rig_cam(&pair.0)?, rig_cam(&pair.1)?);
        let (il, ir) = (ds.image(frame, &pair.0)?, ds.image(frame, &pair.1)?);
        let rectified =
            rectify_pair(CalibratedView { image: &il, camera: &cl }, CalibratedView { image: &ir, camera: &cr })?;
        let model = &self.backends.stereo;
        let (dl, dr) = estimate_depth_pair(&rectified, model)?;
        let fx = rectified.intrinsics.fx;
        let mut maps = Vec::with_capacity(2);
        let mut cloud = GaussianCloud::new();
        for (img, depth, proj, view) in [
            (&rectified.left_image, &dl, rectified.left_projection(), SourceView::Left),
            (&rectified.right_image, &dr, rectified.right_projection(), SourceView::Right),
        ] {
            let features = extract_features(img, &model.extractor)?;
            let m = self.backends.mapper.build_maps(img, &features, depth, fx)?;
            cloud = merge_views(&cloud, &lift_to_gaussians(&m, depth, &proj, view)?.cloud);
            maps.push(m);
        }
        let [ml, mr]: [GaussianParameterMaps; 2] = maps.try_into().expect("two views");
        Ok(SourceStage { frame, pair: pair.clone(), rectified, depth: [dl, dr], maps: [ml, mr], cloud })
    }

    /// Source stage for `target`, from the cache when the frame and pair match.
    pub fn prepare(&mut self, frame: usize, target: &Camera) -> Result<(&SourceStage, bool)> {
        self.dataset.frame(frame)?;
        let pair = self.select_pair(target)?;
        let hit = self.cache.as_ref().is_some_and(|c| c.frame == frame && c.pair == pair);
        if hit {
            self.counters.cache_hits += 1;
        } else {
            self.counters.cache_misses += 1;
            self.cache = Some(self.process_pair(frame, &pair)?);
        }
        Ok((self.cache.as_ref().expect("filled above"), hit))
    }

    fn refine_cloud(&self, stage: &SourceStage, req: RefineRequest) -> Result<(GaussianCloud, Vec<LossReport>)> {
        let ds = &self.dataset;
        let targets: Vec<TargetView> = ds
            .rig
            .cameras()
            .iter()
            .filter(|c| c.id != stage.pair.0 && c.id != stage.pair.1)
            .map(|c| {
                Ok(TargetView { image: ds.image(stage.frame, &c.id)?, camera: c.camera, mask: ds.mask(stage.frame, &c.id)? })
            })
            .collect::<Result<_>>()?;
        if targets.is_empty() {
            return Err(PipelineError::Request("refinement needs a rig camera outside the source pair".into()));
        }
        let mut cfg = self.config.refine.clone();
        cfg.steps = req.steps;
        cfg.render = self.config.render.clone();
        let lr = &mut cfg.learning_rates;
        for v in [&mut lr.residual, &mut lr.color, &mut lr.opacity, &mut lr.scale, &mut lr.rotation] {
            *v *= req.lr_scale;
        }
        let [l, r] = stage.refine_sources();
        let out = refine_gaussian_maps(&l, &r, &targets, &cfg)?;
        let left = lift_to_gaussians(&out.left, &l.depth, &l.projection, l.view)?.cloud;
        let right = lift_to_gaussians(&out.right, &r.depth, &r.projection, r.view)?.cloud;
        Ok((merge_views(&left, &right), out.trajectory))
    }

    pub fn render(&mut self, req: &RenderRequest) -> Result<RenderOutcome> {
        let t0 = Instant::now();
        self.check_target(&req.camera)?;
        let (_, cache_hit) = self.prepare(req.frame, &req.camera)?;
        let stage = self.cache.as_ref().expect("prepared");
        let refined = req.refine.map(|r| self.refine_cloud(stage, r)).transpose()?;
        let cloud = refined.as_ref().map_or(&stage.cloud, |(c, _)| c);
        let t1 = Instant::now();
        let frame = render(&cloud.gaussians, &req.camera, &self.config.render)?;
        let t2 = Instant::now();
        let ratio = |d: &DepthMap| d.valid.count() as f64 / d.valid.len().max(1) as f64;
        let alpha = frame.alpha.data();
        let stats = FrameStats {
            gaussians: cloud.len(),
            valid_depth: [ratio(&stage.depth[0]), ratio(&stage.depth[1])],
            mean_alpha: alpha.iter().sum::<f64>() / alpha.len().max(1) as f64,
        };
        let pair = stage.pair.clone();
        let refinement = refined.map(|(_, t)| t);
        self.counters.renders += 1;
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        let timings = StageTimings { t_src_ms: ms(t1 - t0), t_render_ms: ms(t2 - t1), t_total_ms: ms(t2 - t0) };
        Ok(RenderOutcome { frame, pair, cache_hit, timings, stats, refinement })
    }
}
