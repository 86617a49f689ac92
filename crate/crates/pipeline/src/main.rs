use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use splatstereo::geometry::Camera;
use splatstereo::losses::write_trajectory_csv;
use splatstereo::mapper::{write_ply_file, PlyFormat};
use splatstereo::synthetic::ArcSceneSpec;
use splatstereo_pipeline::bench::{benchmark, BenchOptions};
use splatstereo_pipeline::heatmaps::emit_heatmaps;
use splatstereo_pipeline::protocol::Pose;
use splatstereo_pipeline::service::Server;
use splatstereo_pipeline::session::{RefineRequest, RenderRequest, Session};
use splatstereo_pipeline::toy::toy_scene;
use splatstereo_pipeline::{init_threads, load_dataset, PipelineConfig};

#[derive(Parser)]
#[command(name = "splatstereo", version, about = "Stereo-to-Gaussian novel view synthesis")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding calibration.json and frames/.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Directory that relative output paths resolve against.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Target {
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// JSON file with R, t, fov_deg, width and height.
    #[arg(long)]
    pose: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a novel view to PNG.
    Render {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "render.png")]
        out: PathBuf,
    },
    /// Write the source pair's depth maps (16-bit millimetre PNG) and depth heatmaps.
    Depth {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export the fused Gaussian cloud as PLY.
    ExportPly {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "cloud.ply")]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Write opacity, scale and depth heatmaps for both source views.
    Heatmaps {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Time source-view processing and novel-view rendering; prints JSON.
    Bench {
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// JSON file with one pose or a list of poses.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Simultaneous novel views for the fps figure.
        #[arg(long, default_value_t = 10)]
        views: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine the source maps against the other rig cameras, then render.
    Refine {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Multiplies every configured learning rate.
        #[arg(long, default_value_t = 1.0)]
        lr_scale: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the WebSocket render service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
    },
    /// Write the synthetic arc dataset, with the held-out middle pose.
    Synth {
        #[arg(long, default_value = "toy")]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 192)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
}

struct Ctx {
    config: PipelineConfig,
    dataset: Option<PathBuf>,
    output: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.output {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn session(&self) -> anyhow::Result<Session> {
        let root = self.dataset.as_ref().context("--dataset is required for this command")?;
        let ds = load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
        Ok(Session::from_config(ds, self.config.clone())?)
    }
}

fn read_pose(path: &Path) -> anyhow::Result<Camera> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pose: Pose = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(pose.to_camera()?)
}

fn read_poses(path: &Path) -> anyhow::Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let poses: Vec<Pose> = match serde_json::from_str::<Vec<Pose>>(&text) {
        Ok(v) => v,
        Err(_) => vec![serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?],
    };
    poses.iter().map(|p| Ok(p.to_camera()?)).collect()
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn save_depth_mm(depth: &splatstereo::geometry::DepthMap, path: &Path) -> anyhow::Result<()> {
    let (w, h) = (depth.width() as u32, depth.height() as u32);
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w, h, |x, y| {
        let mm = depth.get(x as usize, y as usize).map_or(0.0, |z| (z * 1000.0).round());
        image::Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = init_threads()?;
    log::debug!("{threads} worker threads");
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx { config, dataset: cli.dataset, output: cli.output };
    match cli.command {
        Command::Render { target, out } => {
            let mut s = ctx.session()?;
            let camera = read_pose(&target.pose)?;
            let r = s.render(&RenderRequest { frame: target.frame, camera, refine: None })?;
            let out = ctx.out(&out);
            create_parent(&out)?;
            r.frame.color.save_png(&out)?;
            println!("{}", serde_json::json!({"out": out, "pair": r.pair, "timings": r.timings, "stats": r.stats}));
        }
        Command::Depth { target, out } => {
            let mut s = ctx.session()?;
            let camera = read_pose(&target.pose)?;
            let (stage, _) = s.prepare(target.frame, &camera)?;
            let dir = ctx.out(&out);
            std::fs::create_dir_all(&dir)?;
            for (side, id, depth) in [("left", &stage.pair.0, &stage.depth[0]), ("right", &stage.pair.1, &stage.depth[1])] {
                save_depth_mm(depth, &dir.join(format!("depth_{side}_{id}.png")))?;
                let heat = splatstereo_pipeline::heatmaps::depth_heatmap(depth);
                heat.save_with_format(dir.join(format!("depth_{side}_{id}_heat.png")), image::ImageFormat::Png)?;
            }
        }
        Command::ExportPly { target, out, ascii } => {
            let mut s = ctx.session()?;
            let camera = read_pose(&target.pose)?;
            let (stage, _) = s.prepare(target.frame, &camera)?;
            let out = ctx.out(&out);
            create_parent(&out)?;
            let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
            write_ply_file(&stage.cloud, format, &out)?;
            println!("{} gaussians -> {}", stage.cloud.len(), out.display());
        }
        Command::Heatmaps { target, out } => {
            let mut s = ctx.session()?;
            let camera = read_pose(&target.pose)?;
            let (stage, _) = s.prepare(target.frame, &camera)?;
            let dir = ctx.out(&out);
            for (side, depth, maps) in [("left", &stage.depth[0], &stage.maps[0]), ("right", &stage.depth[1], &stage.maps[1])] {
                for f in emit_heatmaps(maps, depth, &dir, side)? {
                    println!("{}", f.display());
                }
            }
        }
        Command::Bench { frame, poses, repetitions, warmup, views, out } => {
            let mut s = ctx.session()?;
            let poses = read_poses(&poses)?;
            let report = benchmark(&mut s, &poses, &BenchOptions { frame, warmup, repetitions, n_views: views })?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(out) = out {
                let out = ctx.out(&out);
                create_parent(&out)?;
                std::fs::write(out, &json)?;
            }
            println!("{json}");
        }
        Command::Refine { target, steps, lr_scale, out } => {
            if steps == 0 {
                bail!("--steps must be at least 1");
            }
            let mut s = ctx.session()?;
            let camera = read_pose(&target.pose)?;
            let req = RenderRequest { frame: target.frame, camera, refine: Some(RefineRequest { steps, lr_scale }) };
            let r = s.render(&req)?;
            let dir = ctx.out(&out);
            std::fs::create_dir_all(&dir)?;
            r.frame.color.save_png(&dir.join("refined.png"))?;
            let trajectory = r.refinement.expect("refinement requested");
            write_trajectory_csv(&trajectory, std::fs::File::create(dir.join("trajectory.csv"))?)?;
            let last = trajectory.last().expect("nonempty trajectory");
            std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(last)?)?;
            println!(
                "psnr {:.2} -> {:.2} dB over {} steps",
                trajectory[0].psnr,
                last.psnr,
                trajectory.len() - 1
            );
        }
        Command::Serve { bind } => {
            let root = ctx.dataset.as_ref().context("--dataset is required for serve")?;
            let ds = load_dataset(root)?;
            let server = Server::bind(bind.as_str(), ds, ctx.config)?;
            eprintln!("listening on ws://{}", server.local_addr()?);
            server.run()?;
        }
        Command::Synth { out, width, height, frames } => {
            let spec = ArcSceneSpec { width, height, texture_sigma: 4.0, ..Default::default() };
            let toy = toy_scene(&spec, frames.max(1), &ctx.config.render)?;
            let dir = ctx.out(&out);
            toy.dataset.save(&dir)?;
            let pose = serde_json::to_string_pretty(&Pose::from_camera(&toy.held_out))?;
            std::fs::write(dir.join("held_out_pose.json"), pose)?;
            for (i, scene) in toy.scenes.iter().enumerate() {
                scene.images[1].save_png(&dir.join(format!("held_out_{i:04}.png")))?;
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
