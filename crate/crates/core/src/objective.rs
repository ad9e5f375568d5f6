//! Soft masks, the flow-consistency objective and its analytic gradient.
//!
//! For masks `X_p = sigmoid(theta_p)` the objective is
//!
//! ```text
//! L = sum_p lambda * CE(X0_p, X_p)
//!   + sum_p sum_{t=1..T} CE(X_{p+t}, W_{p->p+t}(X_p)) + CE(X_p, W_{p+t->p}(X_{p+t}))
//! ```
//!
//! where `W` is a count-normalized nearest-integer warp and every warp term is
//! averaged over the targets the warp actually reaches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowops::{WarpOperator, WarpSet};
use crate::grid::{resize_bilinear, Grid};
use crate::optim::{gradient_descent, Lbfgs, LbfgsSettings, OptimStatus};

/// Soft mask values are kept in `[MASK_EPS, 1 - MASK_EPS]`.
pub const MASK_EPS: f64 = 1e-6;

/// How two masks are compared in the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deviation {
    #[default]
    CrossEntropy,
    /// Negated mean dot product; kept as an ablation baseline.
    DotProduct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Lbfgs,
    /// Fixed-step gradient descent, for debugging.
    GradientDescent { step: f64, iters: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Weight of the deviation-from-initialization terms.
    pub lambda: f64,
    /// Largest frame distance with a flow-consistency term.
    pub horizon_t: usize,
    pub max_outer_iters: usize,
    /// Quasi-Newton iterations per outer iteration.
    pub inner_iters: usize,
    pub lbfgs_history: usize,
    pub step_size: f64,
    pub deviation: Deviation,
    pub optimizer: OptimizerKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            horizon_t: 1,
            max_outer_iters: 5,
            inner_iters: 20,
            lbfgs_history: 10,
            step_size: 1.0,
            deviation: Deviation::CrossEntropy,
            optimizer: OptimizerKind::Lbfgs,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.horizon_t == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.lbfgs_history == 0 || !(self.step_size > 0.0) {
            return Err(Error::Config("history and step size must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Largest logit magnitude of a stored mask.
pub fn logit_bound() -> f64 {
    logit(1.0 - MASK_EPS)
}

/// Per-frame foreground scores in logit parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    grid: Grid,
    logits: Vec<f64>,
}

impl SoftMask {
    pub fn from_values(grid: Grid, values: &[f64]) -> Result<Self> {
        check_len(grid, values.len())?;
        let logits = values
            .iter()
            .map(|&v| logit(v.clamp(MASK_EPS, 1.0 - MASK_EPS)))
            .collect();
        Ok(Self { grid, logits })
    }

    /// Logits are clamped so values stay inside `[MASK_EPS, 1 - MASK_EPS]`.
    pub fn from_logits(grid: Grid, logits: &[f64]) -> Result<Self> {
        check_len(grid, logits.len())?;
        let b = logit_bound();
        Ok(Self {
            grid,
            logits: logits.iter().map(|&z| z.clamp(-b, b)).collect(),
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn values(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.logits.iter().map(|&z| sigmoid(z).powi(2)).sum::<f64>().sqrt()
    }
}

fn check_len(grid: Grid, len: usize) -> Result<()> {
    if len != grid.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![grid.height, grid.width],
            found: vec![len],
        });
    }
    Ok(())
}

fn border_mean(v: &[f64], grid: Grid, width: usize) -> f64 {
    let (sum, n) = v
        .iter()
        .enumerate()
        .filter(|(i, _)| grid.on_border(*i, width))
        .fold((0.0, 0usize), |(s, n), (_, x)| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn third_moment(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / v.len() as f64
}

const TIE_TOL: f64 = 1e-12;

/// Relative value range below which an eigenvector counts as constant.
const CONSTANT_RANGE: f64 = 1e-9;

/// Picks between the two min-max rescaled orientations of an eigenvector.
/// The choice depends only on the unordered pair, so `x` and `-x` agree.
fn choose_orientation(a: Vec<f64>, b: Vec<f64>, grid: Grid, border_width: usize) -> Vec<f64> {
    let (ba, bb) = (border_mean(&a, grid, border_width), border_mean(&b, grid, border_width));
    if (ba - bb).abs() > TIE_TOL {
        return if ba < bb { a } else { b };
    }
    let (sa, sb) = (third_moment(&a), third_moment(&b));
    if (sa - sb).abs() > TIE_TOL {
        return if sa > sb { a } else { b };
    }
    match a.iter().zip(&b).find(|(x, y)| x != y) {
        Some((x, y)) if y < x => b,
        _ => a,
    }
}

/// Turns a raw eigenvector on `from` into an initial soft mask on `to`.
///
/// Resamples bilinearly when the grids differ, orients the sign so the
/// border (presumed background) sits low, then rescales to
/// `[MASK_EPS, 1 - MASK_EPS]`.
pub fn normalize_init(x0: &[f64], from: Grid, to: Grid, border_width: usize) -> Result<SoftMask> {
    check_len(from, x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("initial eigenvector is not finite".into()));
    }
    let v = resize_bilinear(x0, from, to);
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > CONSTANT_RANGE * hi.abs().max(lo.abs())) {
        return Err(Error::DegenerateInit);
    }
    let up: Vec<f64> = v.iter().map(|x| (x - lo) / range).collect();
    let down: Vec<f64> = v.iter().map(|x| (hi - x) / range).collect();
    let chosen = choose_orientation(up, down, to, border_width);
    let values: Vec<f64> = chosen.iter().map(|c| MASK_EPS + (1.0 - 2.0 * MASK_EPS) * c).collect();
    SoftMask::from_values(to, &values)
}

/// `-(1/|V|) sum_{i in V} t_i ln p_i + (1 - t_i) ln(1 - p_i)`.
pub fn masked_cross_entropy(target: &[f64], pred: &[f64], valid: Option<&[bool]>) -> f64 {
    assert_eq!(target.len(), pred.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (&t, &p)) in target.iter().zip(pred).enumerate() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        n += 1;
    }
    if n == 0 {
        log::warn!("cross-entropy over an empty valid set contributes 0");
        return 0.0;
    }
    sum / n as f64
}

/// One flow-consistency term: `CE(X_target, W(X_source))`.
#[derive(Clone, Copy, Debug)]
struct PairTerm<'a> {
    source: usize,
    target: usize,
    op: &'a WarpOperator,
}

struct PairEval {
    value: f64,
    grad_target: Vec<f64>,
    grad_source: Vec<f64>,
}

/// Frame states shared by all terms of one evaluation.
struct FrameState {
    x: Vec<f64>,
    xbar: Vec<f64>,
}

/// The refinement objective over all frames of a sequence.
pub struct Objective<'a> {
    grid: Grid,
    n_frames: usize,
    inits: Vec<Vec<f64>>,
    lambda: f64,
    deviation: Deviation,
    terms: Vec<PairTerm<'a>>,
}

impl<'a> Objective<'a> {
    pub fn new(inits: &[SoftMask], warps: &'a WarpSet, cfg: &ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        let n_frames = inits.len();
        if n_frames == 0 {
            return Err(Error::Config("no frames".into()));
        }
        let grid = inits[0].grid;
        if inits.iter().any(|m| m.grid != grid) {
            return Err(Error::Config("initial masks on different grids".into()));
        }
        if n_frames > 1 {
            if warps.n_frames() != n_frames || warps.grid() != grid {
                return Err(Error::Config("warp set does not match the masks".into()));
            }
            if warps.horizon() < cfg.horizon_t.min(n_frames - 1) {
                return Err(Error::Config(format!(
                    "horizon {} requested but warps only cover {}",
                    cfg.horizon_t,
                    warps.horizon()
                )));
            }
        }
        let mut terms = Vec::new();
        for t in 1..=cfg.horizon_t.min(n_frames.saturating_sub(1)) {
            for p in 0..n_frames - t {
                terms.push(PairTerm {
                    source: p,
                    target: p + t,
                    op: warps.forward(t, p),
                });
                terms.push(PairTerm {
                    source: p + t,
                    target: p,
                    op: warps.backward(t, p),
                });
            }
        }
        for term in &terms {
            if term.op.valid_count() == 0 {
                log::warn!(
                    "warp {} -> {} reaches no valid target; its term contributes 0",
                    term.source,
                    term.target
                );
            }
        }
        Ok(Self {
            grid,
            n_frames,
            inits: inits.iter().map(SoftMask::values).collect(),
            lambda: cfg.lambda,
            deviation: cfg.deviation,
            terms,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Number of optimization variables (`N * H * W`).
    pub fn dim(&self) -> usize {
        self.n_frames * self.grid.len()
    }

    fn frame_states(&self, logits: &[f64]) -> Vec<FrameState> {
        assert_eq!(logits.len(), self.dim());
        logits
            .par_chunks(self.grid.len())
            .map(|th| FrameState {
                x: th.iter().map(|&z| sigmoid(z)).collect(),
                xbar: th.iter().map(|&z| sigmoid(-z)).collect(),
            })
            .collect()
    }

    fn anchor(&self, p: usize, logits: &[f64], st: &FrameState, grad: bool) -> (f64, Vec<f64>) {
        let a = &self.inits[p];
        let n = a.len() as f64;
        let scale = self.lambda / n;
        match self.deviation {
            Deviation::CrossEntropy => {
                let v: f64 = logits
                    .iter()
                    .zip(a)
                    .map(|(&z, &ai)| ai * softplus(-z) + (1.0 - ai) * softplus(z))
                    .sum();
                let g = if grad {
                    st.x.iter().zip(a).map(|(x, ai)| scale * (x - ai)).collect()
                } else {
                    Vec::new()
                };
                (scale * v, g)
            }
            Deviation::DotProduct => {
                let v: f64 = st.x.iter().zip(a).map(|(x, ai)| x * ai).sum();
                let g = if grad {
                    (0..a.len()).map(|i| -scale * a[i] * st.x[i] * st.xbar[i]).collect()
                } else {
                    Vec::new()
                };
                (-scale * v, g)
            }
        }
    }

    fn pair(&self, term: &PairTerm<'_>, states: &[FrameState], grad: bool) -> PairEval {
        let src = &states[term.source];
        let tgt = &states[term.target];
        let op = term.op;
        let counts = op.contributor_counts();
        let nv = op.valid_count();
        let len = self.grid.len();
        if nv == 0 {
            return PairEval {
                value: 0.0,
                grad_target: vec![0.0; if grad { len } else { 0 }],
                grad_source: vec![0.0; if grad { len } else { 0 }],
            };
        }
        let inv = 1.0 / nv as f64;
        let y = op.apply(&src.x).expect("grid checked");
        let ybar = op.apply(&src.xbar).expect("grid checked");
        // d value / d Y_j for valid targets
        let mut dy = vec![0.0; if grad { len } else { 0 }];
        let mut grad_target = vec![0.0; if grad { len } else { 0 }];
        let mut value = 0.0;
        for j in (0..len).filter(|&j| counts[j] > 0) {
            let (xt, xbt) = (tgt.x[j], tgt.xbar[j]);
            let (yj, ybj) = (y[j].max(f64::MIN_POSITIVE), ybar[j].max(f64::MIN_POSITIVE));
            match self.deviation {
                Deviation::CrossEntropy => {
                    let (ly, lyb) = (yj.ln(), ybj.ln());
                    value -= xt * ly + xbt * lyb;
                    if grad {
                        grad_target[j] = inv * (lyb - ly) * xt * xbt;
                        dy[j] = inv * (xbt / ybj - xt / yj);
                    }
                }
                Deviation::DotProduct => {
                    value -= xt * y[j];
                    if grad {
                        grad_target[j] = -inv * y[j] * xt * xbt;
                        dy[j] = -inv * xt;
                    }
                }
            }
        }
        let grad_source = if grad {
            // d ln Y_j / d theta_i and d ln Ybar_j / d theta_i differ in sign
            // only; both are folded into dy for the CE case.
            let back = op.apply_adjoint(&dy).expect("grid checked");
            back.iter()
                .enumerate()
                .map(|(i, b)| b * src.x[i] * src.xbar[i])
                .collect()
        } else {
            Vec::new()
        };
        PairEval {
            value: inv * value,
            grad_target,
            grad_source,
        }
    }

    pub fn value(&self, logits: &[f64]) -> f64 {
        let states = self.frame_states(logits);
        let len = self.grid.len();
        let anchors: Vec<f64> = (0..self.n_frames)
            .into_par_iter()
            .map(|p| self.anchor(p, &logits[p * len..(p + 1) * len], &states[p], false).0)
            .collect();
        let pairs: Vec<f64> = self
            .terms
            .par_iter()
            .map(|t| self.pair(t, &states, false).value)
            .collect();
        anchors.iter().sum::<f64>() + pairs.iter().sum::<f64>()
    }

    /// Objective value and gradient with respect to all logits (flat, frame-major).
    pub fn value_and_gradient(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let states = self.frame_states(logits);
        let len = self.grid.len();
        let anchors: Vec<(f64, Vec<f64>)> = (0..self.n_frames)
            .into_par_iter()
            .map(|p| self.anchor(p, &logits[p * len..(p + 1) * len], &states[p], true))
            .collect();
        let pairs: Vec<PairEval> = self.terms.par_iter().map(|t| self.pair(t, &states, true)).collect();
        let mut value = anchors.iter().map(|(v, _)| v).sum::<f64>();
        value += pairs.iter().map(|e| e.value).sum::<f64>();
        let mut grad: Vec<f64> = anchors.into_iter().flat_map(|(_, g)| g).collect();
        for (term, eval) in self.terms.iter().zip(&pairs) {
            let gt = &mut grad[term.target * len..(term.target + 1) * len];
            gt.iter_mut().zip(&eval.grad_target).for_each(|(g, d)| *g += d);
            let gs = &mut grad[term.source * len..(term.source + 1) * len];
            gs.iter_mut().zip(&eval.grad_source).for_each(|(g, d)| *g += d);
        }
        (value, grad)
    }

    /// Gradient split per frame.
    pub fn gradient(&self, logits: &[f64]) -> Vec<Vec<f64>> {
        let (_, g) = self.value_and_gradient(logits);
        g.chunks(self.grid.len()).map(<[f64]>::to_vec).collect()
    }

    /// Mean over frames of `|X_p|_2 / |X0_p|_2`.
    pub fn mean_norm_ratio(&self, logits: &[f64]) -> f64 {
        let len = self.grid.len();
        let sum: f64 = (0..self.n_frames)
            .map(|p| {
                let x: f64 = logits[p * len..(p + 1) * len]
                    .iter()
                    .map(|&z| sigmoid(z).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let x0: f64 = self.inits[p].iter().map(|v| v * v).sum::<f64>().sqrt();
                x / x0
            })
            .sum();
        sum / self.n_frames as f64
    }
}

/// Concatenates per-frame logits into the optimizer's flat layout.
pub fn flatten(masks: &[SoftMask]) -> Vec<f64> {
    masks.iter().flat_map(|m| m.logits.iter().copied()).collect()
}

/// Splits flat logits back into soft masks.
pub fn unflatten(grid: Grid, logits: &[f64]) -> Result<Vec<SoftMask>> {
    logits
        .chunks(grid.len())
        .map(|c| SoftMask::from_logits(grid, c))
        .collect()
}

/// Objective value and mask-scale summary after an outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub value: f64,
    pub mean_norm_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub masks: Vec<SoftMask>,
    /// Entry 0 describes the initialization.
    pub trace: Vec<OuterRecord>,
    /// Objective value after every accepted inner step.
    pub step_values: Vec<f64>,
    pub status: OptimStatus,
    pub evaluations: usize,
}

/// Jointly refines all initial masks.
pub fn optimize(inits: &[SoftMask], warps: &WarpSet, cfg: &ObjectiveConfig) -> Result<OptimizeOutcome> {
    let objective = Objective::new(inits, warps, cfg)?;
    let f = |x: &[f64]| objective.value_and_gradient(x);
    let x0 = flatten(inits);
    let mut trace = vec![OuterRecord {
        iteration: 0,
        value: objective.value(&x0),
        mean_norm_ratio: objective.mean_norm_ratio(&x0),
    }];
    let mut step_values = Vec::new();
    let (x, status, evaluations) = match cfg.optimizer {
        OptimizerKind::Lbfgs => {
            let settings = LbfgsSettings {
                history: cfg.lbfgs_history,
                step_size: cfg.step_size,
                ..LbfgsSettings::default()
            };
            let mut opt = Lbfgs::new(settings, x0, &f);
            for it in 1..=cfg.max_outer_iters {
                opt.run(&f, cfg.inner_iters, |v| step_values.push(v));
                trace.push(OuterRecord {
                    iteration: it,
                    value: opt.value(),
                    mean_norm_ratio: objective.mean_norm_ratio(opt.x()),
                });
                log::debug!("outer iteration {it}: objective {:.6}", opt.value());
            }
            (opt.x().to_vec(), opt.status(), opt.evaluations())
        }
        OptimizerKind::GradientDescent { step, iters } => {
            let mut x = x0;
            let outer = cfg.max_outer_iters.max(1);
            let per = iters.div_ceil(outer);
            let mut done = 0;
            for it in 1..=outer {
                let n = per.min(iters - done);
                step_values.extend(gradient_descent(&f, &mut x, step, n));
                done += n;
                trace.push(OuterRecord {
                    iteration: it,
                    value: objective.value(&x),
                    mean_norm_ratio: objective.mean_norm_ratio(&x),
                });
            }
            (x, OptimStatus::Running, 2 * iters)
        }
    };
    Ok(OptimizeOutcome {
        masks: unflatten(objective.grid(), &x)?,
        trace,
        step_values,
        status,
        evaluations,
    })
}
