//! End-to-end segmentation of one video bundle.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{
    frame_affinity, second_eigenvector, AffinityConfig, AffinityMatrix, FlowCue, InitMask, PicStatus,
};
use crate::bundle::VideoBundle;
use crate::error::{Error, Result};
use crate::flowops::{build_warp_masked, flow_reliability, ReliabilityMask, WarpOperator, WarpSet};
use crate::grid::{resize_field, resize_flow, resize_nearest, Grid};
use crate::objective::{normalize_init, optimize, ObjectiveConfig, OuterRecord, SoftMask};
use crate::optim::OptimStatus;
use crate::segmentation::{binarize, contour_f, default_tolerance, jaccard, BinaryMask, MetricReport};
use crate::tensor::Tensor;

/// Grid on which masks are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    #[default]
    Flow,
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub affinity: AffinityConfig,
    pub objective: ObjectiveConfig,
    /// Reliability percentile `k`.
    pub percentile_k: f64,
    pub resolution: Resolution,
    pub border_width: usize,
    /// Skip refinement and return the initial masks.
    pub skip_optimization: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            affinity: AffinityConfig::default(),
            objective: ObjectiveConfig::default(),
            percentile_k: 90.0,
            resolution: Resolution::Flow,
            border_width: 1,
            skip_optimization: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.affinity.validate()?;
        self.objective.validate()?;
        if !(0.0..=100.0).contains(&self.percentile_k) {
            return Err(Error::Config(format!(
                "percentile {} outside [0, 100]",
                self.percentile_k
            )));
        }
        Ok(())
    }
}

/// Reliability of every flow field of a bundle, on the flow grid.
#[derive(Clone, Debug)]
pub struct FlowReliability {
    pub forward: Vec<ReliabilityMask>,
    pub backward: Vec<ReliabilityMask>,
    /// Long-range masks per distance, same layout as the bundle.
    pub long_range: Vec<(usize, Vec<ReliabilityMask>, Vec<ReliabilityMask>)>,
}

fn reliability_for(
    frames: Option<&[Tensor]>,
    grid: Grid,
    k: f64,
    from: usize,
    to: usize,
    flow: &Tensor,
) -> Result<ReliabilityMask> {
    match frames {
        Some(frames) => flow_reliability(&frames[from], &frames[to], flow, k),
        None => Ok(ReliabilityMask::all_reliable(grid, k)),
    }
}

pub fn compute_reliability(bundle: &VideoBundle, k: f64) -> Result<FlowReliability> {
    let grid = bundle.flow_grid();
    let frames: Option<Vec<Tensor>> = match &bundle.frames {
        Some(f) if Grid::from_tensor(&f[0])? != grid => {
            Some(f.iter().map(|t| resize_field(t, grid)).collect::<Result<_>>()?)
        }
        Some(f) => Some(f.clone()),
        None => {
            log::warn!("no frames in bundle; all flows treated as reliable");
            None
        }
    };
    let frames = frames.as_deref();
    let n = bundle.n_frames();
    let pairs: Vec<usize> = (0..n.saturating_sub(1)).collect();
    let forward = pairs
        .par_iter()
        .map(|&p| reliability_for(frames, grid, k, p, p + 1, &bundle.flow_fwd[p]))
        .collect::<Result<Vec<_>>>()?;
    let backward = pairs
        .par_iter()
        .map(|&p| reliability_for(frames, grid, k, p + 1, p, &bundle.flow_bwd[p]))
        .collect::<Result<Vec<_>>>()?;
    let mut long_range = Vec::new();
    for (&t, lr) in &bundle.long_range {
        let fwd = (0..lr.forward.len())
            .map(|p| reliability_for(frames, grid, k, p, p + t, &lr.forward[p]))
            .collect::<Result<Vec<_>>>()?;
        let bwd = (0..lr.backward.len())
            .map(|p| reliability_for(frames, grid, k, p + t, p, &lr.backward[p]))
            .collect::<Result<Vec<_>>>()?;
        long_range.push((t, fwd, bwd));
    }
    Ok(FlowReliability {
        forward,
        backward,
        long_range,
    })
}

struct Cue {
    flow: Tensor,
    reliable: Vec<bool>,
}

fn cue_on(flow: &Tensor, rel: &ReliabilityMask, grid: Grid) -> Result<Cue> {
    if rel.grid == grid {
        return Ok(Cue {
            flow: flow.clone(),
            reliable: rel.flags.clone(),
        });
    }
    Ok(Cue {
        flow: resize_flow(flow, grid)?,
        reliable: resize_nearest(&rel.flags, rel.grid, grid),
    })
}

/// Affinity for frame `p` on the feature grid, using the flows from frame `p`
/// towards `p + 1` and towards `p - 1` where they exist.
pub fn frame_affinity_at(
    bundle: &VideoBundle,
    rel: &FlowReliability,
    p: usize,
    cfg: &AffinityConfig,
) -> Result<AffinityMatrix> {
    let grid = bundle.feature_grid();
    let n = bundle.n_frames();
    let fwd = (p + 1 < n)
        .then(|| cue_on(&bundle.flow_fwd[p], &rel.forward[p], grid))
        .transpose()?;
    let bwd = (p >= 1)
        .then(|| cue_on(&bundle.flow_bwd[p - 1], &rel.backward[p - 1], grid))
        .transpose()?;
    fn as_cue(c: &Option<Cue>) -> Option<FlowCue<'_>> {
        c.as_ref().map(|c| FlowCue {
            flow: &c.flow,
            reliable: Some(&c.reliable),
        })
    }
    frame_affinity(&bundle.features[p], as_cue(&fwd), as_cue(&bwd), cfg)
}

/// Initial soft masks and their raw eigenvectors.
#[derive(Clone, Debug)]
pub struct InitStage {
    pub raw: Vec<InitMask>,
    pub masks: Vec<SoftMask>,
    /// Frames whose eigenvector was constant and fell back to 0.5.
    pub degenerate: Vec<usize>,
}

pub fn initialize(
    bundle: &VideoBundle,
    rel: &FlowReliability,
    cfg: &PipelineConfig,
    target: Grid,
) -> Result<InitStage> {
    let from = bundle.feature_grid();
    let results = (0..bundle.n_frames())
        .into_par_iter()
        .map(|p| -> Result<(InitMask, Option<SoftMask>)> {
            let a = frame_affinity_at(bundle, rel, p, &cfg.affinity)?;
            let init = second_eigenvector(&a, &cfg.affinity)?;
            drop(a);
            if init.status == PicStatus::MaxIters {
                log::warn!("frame {p}: power iteration hit the iteration cap");
            }
            match normalize_init(&init.values, from, target, cfg.border_width) {
                Ok(m) => Ok((init, Some(m))),
                Err(Error::DegenerateInit) => Ok((init, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stage = InitStage {
        raw: Vec::new(),
        masks: Vec::new(),
        degenerate: Vec::new(),
    };
    for (p, (raw, mask)) in results.into_iter().enumerate() {
        let mask = match mask {
            Some(m) => m,
            None => {
                log::warn!("frame {p}: constant eigenvector, using a uniform 0.5 mask");
                stage.degenerate.push(p);
                SoftMask::from_values(target, &vec![0.5; target.len()])?
            }
        };
        stage.raw.push(raw);
        stage.masks.push(mask);
    }
    Ok(stage)
}

fn warp_on(flow: &Tensor, rel: &ReliabilityMask, grid: Grid) -> Result<WarpOperator> {
    let cue = cue_on(flow, rel, grid)?;
    build_warp_masked(&cue.flow, Some(&cue.reliable))
}

/// Warp operators up to `horizon` on `grid`, skipping unreliable sources.
///
/// Distances with explicit long-range flows use them; the rest chain the
/// adjacent operators.
pub fn build_warps(bundle: &VideoBundle, rel: &FlowReliability, horizon: usize, grid: Grid) -> Result<WarpSet> {
    let n = bundle.n_frames();
    let pairs: Vec<usize> = (0..n.saturating_sub(1)).collect();
    let forward = pairs
        .par_iter()
        .map(|&p| warp_on(&bundle.flow_fwd[p], &rel.forward[p], grid))
        .collect::<Result<Vec<_>>>()?;
    let backward = pairs
        .par_iter()
        .map(|&p| warp_on(&bundle.flow_bwd[p], &rel.backward[p], grid))
        .collect::<Result<Vec<_>>>()?;
    let horizon = horizon.min(n.saturating_sub(1));
    if n < 2 {
        return WarpSet::from_levels(n, grid, Vec::new(), Vec::new());
    }
    let mut set = WarpSet::adjacent(n, grid, forward, backward)?.compose_to(horizon)?;
    let explicit: Vec<_> = rel.long_range.iter().filter(|(t, _, _)| *t <= horizon).collect();
    if explicit.is_empty() {
        return Ok(set);
    }
    let (mut fwd_levels, mut bwd_levels) = (Vec::new(), Vec::new());
    for t in 1..=horizon {
        match explicit.iter().find(|(d, _, _)| *d == t) {
            Some((_, rf, rb)) => {
                let lr = &bundle.long_range[&t];
                fwd_levels.push(
                    (0..n - t)
                        .map(|p| warp_on(&lr.forward[p], &rf[p], grid))
                        .collect::<Result<Vec<_>>>()?,
                );
                bwd_levels.push(
                    (0..n - t)
                        .map(|p| warp_on(&lr.backward[p], &rb[p], grid))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            None => {
                fwd_levels.push((0..n - t).map(|p| set.forward(t, p).clone()).collect());
                bwd_levels.push((0..n - t).map(|p| set.backward(t, p).clone()).collect());
            }
        }
    }
    set = WarpSet::from_levels(n, grid, fwd_levels, bwd_levels)?;
    Ok(set)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub reliability_s: f64,
    pub init_s_per_frame: f64,
    pub optimize_s_per_frame: f64,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub grid: Grid,
    pub init: InitStage,
    pub soft: Vec<SoftMask>,
    pub init_binary: Vec<BinaryMask>,
    pub binary: Vec<BinaryMask>,
    pub trace: Vec<OuterRecord>,
    /// Objective value after every accepted optimizer step.
    pub step_values: Vec<f64>,
    pub status: Option<OptimStatus>,
    pub timings: Timings,
}

fn binarize_all(masks: &[SoftMask]) -> Result<Vec<BinaryMask>> {
    masks.iter().map(|m| binarize(&m.values(), m.grid())).collect()
}

pub fn optimization_grid(bundle: &VideoBundle, resolution: Resolution) -> Grid {
    match resolution {
        Resolution::Flow => bundle.flow_grid(),
        Resolution::Feature => bundle.feature_grid(),
    }
}

pub fn run(bundle: &VideoBundle, cfg: &PipelineConfig) -> Result<Segmentation> {
    cfg.validate()?;
    bundle.validate()?;
    let n = bundle.n_frames() as f64;
    let grid = optimization_grid(bundle, cfg.resolution);

    let start = Instant::now();
    let rel = compute_reliability(bundle, cfg.percentile_k)?;
    let reliability_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let init = initialize(bundle, &rel, cfg, grid)?;
    let init_s = start.elapsed().as_secs_f64();
    let init_binary = binarize_all(&init.masks)?;

    let start = Instant::now();
    let (soft, trace, step_values, status) = if cfg.skip_optimization {
        (init.masks.clone(), Vec::new(), Vec::new(), None)
    } else {
        let warps = build_warps(bundle, &rel, cfg.objective.horizon_t, grid)?;
        let out = optimize(&init.masks, &warps, &cfg.objective)?;
        if out.status == OptimStatus::LineSearchFailed {
            log::warn!("line search failed; keeping the last accepted masks");
        }
        (out.masks, out.trace, out.step_values, Some(out.status))
    };
    let optimize_s = start.elapsed().as_secs_f64();
    let binary = binarize_all(&soft)?;
    Ok(Segmentation {
        grid,
        init,
        soft,
        init_binary,
        binary,
        trace,
        step_values,
        status,
        timings: Timings {
            reliability_s,
            init_s_per_frame: init_s / n,
            optimize_s_per_frame: optimize_s / n,
        },
    })
}

/// Scores predictions against ground truth, resizing predictions
/// (nearest-neighbour) to the ground-truth grid.
pub fn evaluate(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Vec<MetricReport>> {
    if pred.len() != gt.len() {
        return Err(Error::Config(format!(
            "{} predicted masks but {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let p = if p.grid() == g.grid() {
                p.clone()
            } else {
                p.resized(g.grid())
            };
            let mut report = contour_f(&p, g, default_tolerance(g.grid()))?;
            report.jaccard = jaccard(&p, g)?;
            Ok(report)
        })
        .collect()
}

/// Mean Jaccard over frames.
pub fn mean_jaccard(reports: &[MetricReport]) -> f64 {
    reports.iter().map(|r| r.jaccard).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Rect, SceneSpec};

    fn scene() -> SceneSpec {
        SceneSpec::moving_square(
            10,
            10,
            4,
            Rect {
                top: 2,
                left: 2,
                height: 4,
                width: 4,
            },
            [1, 0],
        )
    }

    #[test]
    fn noiseless_scene_is_segmented_exactly() {
        let b = generate(&scene()).unwrap();
        let seg = run(&b, &PipelineConfig::default()).unwrap();
        let gt = b.gt_masks.as_ref().unwrap();
        for (m, g) in seg.binary.iter().zip(gt) {
            assert_eq!(m, g);
        }
        let reports = evaluate(&seg.binary, gt).unwrap();
        assert!((mean_jaccard(&reports) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reliability_without_frames_is_all_true() {
        let mut b = generate(&scene()).unwrap();
        b.frames = None;
        let rel = compute_reliability(&b, 90.0).unwrap();
        assert!(rel.forward.iter().all(|r| r.unreliable_count() == 0));
    }

    #[test]
    fn explicit_long_range_flows_are_used() {
        let mut spec = scene();
        spec.long_range = Some(crate::synth::LongRangeSpec { horizon: 2, noise: 0.0 });
        let b = generate(&spec).unwrap();
        let rel = compute_reliability(&b, 100.0).unwrap();
        let warps = build_warps(&b, &rel, 2, b.flow_grid()).unwrap();
        assert_eq!(warps.horizon(), 2);
        let g = b.flow_grid();
        // object cell (2, 2) moves two columns in two frames
        assert_eq!(warps.forward(2, 0).target(g.index(2, 2)), Some(g.index(2, 4)));
    }

    #[test]
    fn evaluate_upsamples_predictions() {
        let pred = BinaryMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let gt = BinaryMask::new(4, 4, (0..16).map(|i| i / 4 < 2 && i % 4 < 2).collect()).unwrap();
        let r = evaluate(&[pred], &[gt]).unwrap();
        assert_eq!(r[0].jaccard, 1.0);
    }
}
