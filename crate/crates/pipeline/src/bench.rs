//! Timing of the two pipeline stages: source-view processing (rectify,
//! stereo, maps, lift) and novel-view rendering.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use splatstereo::geometry::Camera;
use splatstereo::render::render_timed;

use crate::error::{PipelineError, Result};
use crate::session::Session;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self { mean: s.iter().sum::<f64>() / n as f64, median }
    }
}

/// Renderer breakdown for one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderBench {
    pub gaussians: usize,
    pub resolution: [usize; 2],
    pub ms_project: f64,
    pub ms_sort: f64,
    pub ms_blend: f64,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frame: usize,
    pub pair: (String, String),
    pub threads: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub poses: usize,
    pub gaussians: usize,
    pub source_view_ms: Summary,
    pub novel_view_ms: Summary,
    /// Number of simultaneous novel views in the composition below.
    pub n_views: usize,
    /// `T_src + n * T_novel` from the medians.
    pub total_ms: f64,
    pub fps: f64,
    pub render: RenderBench,
}

/// `T = T_src + n * T_novel`.
pub fn compose_ms(t_src_ms: f64, t_novel_ms: f64, n_views: usize) -> f64 {
    t_src_ms + n_views as f64 * t_novel_ms
}

pub struct BenchOptions {
    pub frame: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub n_views: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { frame: 0, warmup: 1, repetitions: 5, n_views: 10 }
    }
}

/// Source stage timed cold on every repetition; novel views rendered from
/// the cached stage for every pose. All poses must share one source pair.
pub fn benchmark(session: &mut Session, poses: &[Camera], opts: &BenchOptions) -> Result<BenchReport> {
    let first = poses.first().ok_or_else(|| PipelineError::Request("benchmark needs at least one pose".into()))?;
    if opts.repetitions == 0 {
        return Err(PipelineError::Request("benchmark needs at least one repetition".into()));
    }
    let pair = session.select_pair(first)?;
    for p in poses {
        if session.select_pair(p)? != pair {
            return Err(PipelineError::Request("benchmark poses must share one source pair".into()));
        }
    }
    let cfg = session.config.render.clone();
    let mut src = Vec::with_capacity(opts.repetitions);
    let mut novel = Vec::with_capacity(opts.repetitions * poses.len());
    for rep in 0..opts.warmup + opts.repetitions {
        session.clear_cache();
        let t0 = Instant::now();
        let (stage, _) = session.prepare(opts.frame, first)?;
        let t_src = t0.elapsed().as_secs_f64() * 1e3;
        let gaussians = &stage.cloud.gaussians;
        let mut times = Vec::with_capacity(poses.len());
        for p in poses {
            let t = Instant::now();
            render_timed(gaussians, p, &cfg)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        if rep >= opts.warmup {
            src.push(t_src);
            novel.extend(times);
        }
    }
    let stage = session.cached().expect("prepared above");
    let (_, timing) = render_timed(&stage.cloud.gaussians, first, &cfg)?;
    let source_view_ms = Summary::of(&src);
    let novel_view_ms = Summary::of(&novel);
    let total_ms = compose_ms(source_view_ms.median, novel_view_ms.median, opts.n_views);
    Ok(BenchReport {
        frame: opts.frame,
        pair,
        threads: rayon::current_num_threads(),
        warmup: opts.warmup,
        repetitions: opts.repetitions,
        poses: poses.len(),
        gaussians: stage.cloud.len(),
        source_view_ms,
        novel_view_ms,
        n_views: opts.n_views,
        total_ms,
        fps: 1e3 / total_ms,
        render: RenderBench {
            gaussians: stage.cloud.len(),
            resolution: [first.intrinsics.width, first.intrinsics.height],
            ms_project: timing.ms_project,
            ms_sort: timing.ms_sort,
            ms_blend: timing.ms_blend,
            fps: 1e3 / timing.total_ms(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        assert_eq!(Summary::of(&[3.0, 1.0, 2.0]), Summary { mean: 2.0, median: 2.0 });
        assert_eq!(Summary::of(&[4.0, 1.0, 2.0, 3.0]).median, 2.5);
        assert_eq!(Summary::of(&[]), Summary::default());
    }

    #[test]
    fn single_view_composition_is_the_sum() {
        assert_eq!(compose_ms(27.0, 1.9, 1), 28.9);
        assert_eq!(compose_ms(27.0, 2.0, 10), 47.0);
        assert_eq!(compose_ms(5.0, 3.0, 0), 5.0);
    }
}
