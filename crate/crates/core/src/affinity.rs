//! Per-frame affinity matrices and their second eigenvector.
//!
//! Each frame gets a dense symmetric affinity combining appearance cosine
//! similarity with forward/backward flow direction similarity, thresholded
//! by `g_s`. The second eigenvector of the row-stochastic `D^-1 A` is found
//! by power iteration on the symmetric form `S = D^-1/2 A D^-1/2` with the
//! top mode `D^1/2 1` projected out on every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard for cosine similarity of (near) zero vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Below this Rayleigh quotient the deflated operator is treated as having
/// no second mode.
pub const DEGENERATE_EIGENVALUE: f64 = 1e-6;

/// Rows of the Gram matrix computed per block.
const GRAM_BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    /// Appearance weight.
    pub alpha_psi: f64,
    /// Flow weight, applied to each available flow direction.
    pub alpha_phi: f64,
    /// Values below this threshold are zeroed.
    pub threshold_s: f64,
    /// Relative L2 change between iterates that ends power iteration.
    pub pic_tol: f64,
    pub pic_max_iters: usize,
    /// Flow vectors shorter than this (in cells) compare as zero vectors.
    #[serde(default = "default_flow_floor")]
    pub flow_min_magnitude: f64,
    /// Seed of the power-iteration start vector.
    #[serde(default = "default_pic_seed")]
    pub pic_seed: u64,
}

fn default_pic_seed() -> u64 {
    0x005e_ed0f_a1f1
}

fn default_flow_floor() -> f64 {
    0.5
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            alpha_psi: 1.0,
            alpha_phi: 1.0,
            threshold_s: 0.1,
            pic_tol: 1e-6,
            pic_max_iters: 1000,
            flow_min_magnitude: default_flow_floor(),
            pic_seed: default_pic_seed(),
        }
    }
}

impl AffinityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_psi >= 0.0 && self.alpha_phi >= 0.0) {
            return Err(Error::Config("alpha weights must be non-negative".into()));
        }
        if self.alpha_psi + self.alpha_phi <= 0.0 {
            return Err(Error::Config(
                "zero effective weight: alpha_psi + alpha_phi must be positive".into(),
            ));
        }
        if !(self.threshold_s > 0.0 && self.threshold_s <= 1.0) {
            return Err(Error::Config("threshold_s must lie in (0, 1]".into()));
        }
        if !(self.flow_min_magnitude >= 0.0) {
            return Err(Error::Config("flow_min_magnitude must be non-negative".into()));
        }
        if !(self.pic_tol > 0.0) || self.pic_max_iters == 0 {
            return Err(Error::Config("power iteration needs tol > 0 and iters > 0".into()));
        }
        Ok(())
    }
}

/// `<u, v> / max(|u| |v|, eps)`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> f64 {
    assert_eq!(u.len(), v.len());
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    dot / (uu.sqrt() * vv.sqrt()).max(COSINE_EPS)
}

/// One flow direction attached to a frame, resampled to the feature grid.
#[derive(Clone, Copy, Debug)]
pub struct FlowCue<'a> {
    pub flow: &'a Tensor,
    /// Per-cell reliability; `None` means every cell is reliable.
    pub reliable: Option<&'a [bool]>,
}

/// Symmetric affinity stored as its packed upper triangle, with cached
/// degrees.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    n: usize,
    /// Row `i` holds columns `i..n`.
    upper: Vec<f32>,
    degrees: Vec<f64>,
}

#[inline]
fn row_offset(n: usize, i: usize) -> usize {
    i * n - i * i.saturating_sub(1) / 2
}

impl AffinityMatrix {
    /// Wraps a dense row-major matrix, checking symmetry and non-negativity.
    pub fn from_dense(n: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: vec![n, n],
                found: vec![values.len()],
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::Config(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("negative or non-finite entry at {k}")));
        }
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            upper.extend_from_slice(&values[i * n + i..(i + 1) * n]);
        }
        Ok(Self::from_upper(n, upper))
    }

    fn from_upper(n: usize, upper: Vec<f32>) -> Self {
        let mut degrees = vec![0.0; n];
        for i in 0..n {
            let row = &upper[row_offset(n, i)..row_offset(n, i + 1)];
            let mut sum = 0.0;
            for (k, &v) in row.iter().enumerate() {
                sum += v as f64;
                if k > 0 {
                    degrees[i + k] += v as f64;
                }
            }
            degrees[i] += sum;
        }
        Self { n, upper, degrees }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.upper[row_offset(self.n, a) + b - a] as f64
    }

    /// Columns `i..n` of row `i`.
    pub fn upper_row(&self, i: usize) -> &[f32] {
        &self.upper[row_offset(self.n, i)..row_offset(self.n, i + 1)]
    }

    /// Full row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for (k, &v) in self.upper_row(i).iter().enumerate() {
                out[i * n + i + k] = v as f64;
                out[(i + k) * n + i] = v as f64;
            }
        }
        out
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = self.upper_row(i);
            let xi = x[i];
            let (head, tail) = y.split_at_mut(i + 1);
            let dot = fused_row(&row[1..], &x[i + 1..], tail, xi);
            head[i] += row[0] as f64 * xi + dot;
        }
        y
    }
}

/// Returns `row . x` and adds `xi * row` to `y` in the same pass.
#[inline]
fn fused_row(row: &[f32], x: &[f64], y: &mut [f64], xi: f64) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut rc = row.chunks_exact(4);
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact_mut(4);
    for ((r, v), w) in (&mut rc).zip(&mut xc).zip(&mut yc) {
        for k in 0..4 {
            let a = r[k] as f64;
            acc[k] += a * v[k];
            w[k] += a * xi;
        }
    }
    let mut tail = 0.0;
    for ((r, v), w) in rc.remainder().iter().zip(xc.remainder()).zip(yc.into_remainder()) {
        let a = *r as f64;
        tail += a * v;
        *w += a * xi;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unit-normalizes each `dim`-sized row; rows with norm below `floor` (and
/// never below the cosine guard) become zero.
fn unit_rows(data: &[f32], dim: usize, floor: f64) -> Vec<f32> {
    let floor = floor.max(COSINE_EPS);
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(dim) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < floor {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
    out
}

struct PreparedFlow {
    unit: Vec<f32>,
    active: Vec<bool>,
}

fn prepare_flow(cue: &FlowCue<'_>, h: usize, w: usize, floor: f64) -> Result<PreparedFlow> {
    let shape = cue.flow.shape();
    if shape != [h, w, 2] {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, 2],
            found: shape.to_vec(),
        });
    }
    let active = match cue.reliable {
        Some(r) if r.len() != h * w => {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                found: vec![r.len()],
            })
        }
        Some(r) => r.to_vec(),
        None => vec![true; h * w],
    };
    Ok(PreparedFlow {
        unit: unit_rows(cue.flow.data(), 2, floor),
        active,
    })
}

/// Flow unit vectors split into columns; inactive cells are zero with
/// `active = 0`, so their terms drop out of both sums.
struct FlowColumns {
    x: Vec<f64>,
    y: Vec<f64>,
    active: Vec<f64>,
}

impl FlowColumns {
    fn new(flow: Option<&PreparedFlow>, n: usize) -> Self {
        let mut cols = Self {
            x: vec![0.0; n],
            y: vec![0.0; n],
            active: vec![0.0; n],
        };
        if let Some(f) = flow {
            for i in (0..n).filter(|&i| f.active[i]) {
                cols.x[i] = f.unit[2 * i] as f64;
                cols.y[i] = f.unit[2 * i + 1] as f64;
                cols.active[i] = 1.0;
            }
        }
        cols
    }
}

/// Builds the affinity of one frame from `[H, W, d]` features and optional
/// forward/backward flows on the same grid.
///
/// A flow term between `i` and `j` contributes only when the flow is present
/// and both cells are reliable; the normalizer shrinks with it. The diagonal
/// is fixed to 1.
pub fn frame_affinity(
    features: &Tensor,
    flow_fwd: Option<FlowCue<'_>>,
    flow_bwd: Option<FlowCue<'_>>,
    cfg: &AffinityConfig,
) -> Result<AffinityMatrix> {
    cfg.validate()?;
    let (h, w, d) = features.dims3()?;
    let n = h * w;
    let feats = unit_rows(features.data(), d, 0.0);
    let fwd = flow_fwd
        .map(|c| prepare_flow(&c, h, w, cfg.flow_min_magnitude))
        .transpose()?;
    let bwd = flow_bwd
        .map(|c| prepare_flow(&c, h, w, cfg.flow_min_magnitude))
        .transpose()?;

    let (a_psi, a_phi, s) = (cfg.alpha_psi, cfg.alpha_phi, cfg.threshold_s);
    let fwd = FlowColumns::new(fwd.as_ref(), n);
    let bwd = FlowColumns::new(bwd.as_ref(), n);
    let mut upper = vec![0.0f32; n * (n + 1) / 2];
    let mut gram = vec![0.0f32; GRAM_BLOCK * n];
    for r0 in (0..n).step_by(GRAM_BLOCK) {
        let rows = GRAM_BLOCK.min(n - r0);
        let cols = n - r0;
        // SAFETY: the A operand is `rows` rows of the n x d row-major `feats`
        // starting at r0, the B operand reads rows r0.. of `feats` as a
        // d x cols column view, and `gram` holds at least rows * cols floats.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                d,
                cols,
                1.0,
                feats[r0 * d..].as_ptr(),
                d as isize,
                1,
                feats[r0 * d..].as_ptr(),
                1,
                d as isize,
                0.0,
                gram.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        for i in r0..r0 + rows {
            let g = &gram[(i - r0) * cols + (i - r0)..(i - r0 + 1) * cols];
            let row = &mut upper[row_offset(n, i)..row_offset(n, i + 1)];
            row[0] = 1.0;
            let (fxi, fyi, fai) = (fwd.x[i], fwd.y[i], fwd.active[i]);
            let (bxi, byi, bai) = (bwd.x[i], bwd.y[i], bwd.active[i]);
            let j0 = i + 1;
            let cells = row[1..]
                .iter_mut()
                .zip(&g[1..])
                .zip(fwd.x[j0..].iter().zip(&fwd.y[j0..]).zip(&fwd.active[j0..]))
                .zip(bwd.x[j0..].iter().zip(&bwd.y[j0..]).zip(&bwd.active[j0..]));
            for (((out, &gk), ((fx, fy), fa)), ((bx, by), ba)) in cells {
                let flow = fxi * fx + fyi * fy + bxi * bx + byi * by;
                let num = a_psi * gk as f64 + a_phi * flow;
                let den = a_psi + a_phi * (fai * fa + bai * ba);
                let v = if den > 0.0 { num / den } else { 0.0 };
                *out = if v >= s { v.min(1.0) as f32 } else { 0.0 };
            }
        }
    }
    Ok(AffinityMatrix::from_upper(n, upper))
}

/// Row-stochastic view `W = D^-1 A` over an affinity; never materialized.
#[derive(Clone, Copy, Debug)]
pub struct RowStochastic<'a> {
    a: &'a AffinityMatrix,
}

impl<'a> RowStochastic<'a> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a.get(i, j) / self.a.degrees[i]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        let d = self.a.degrees[i];
        (0..self.a.n).map(|j| self.a.get(i, j) / d).sum()
    }

    /// `W x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.a
            .mul_vec(x)
            .into_iter()
            .zip(&self.a.degrees)
            .map(|(y, d)| y / d)
            .collect()
    }

    pub fn affinity(&self) -> &'a AffinityMatrix {
        self.a
    }
}

pub fn row_normalize(a: &AffinityMatrix) -> Result<RowStochastic<'_>> {
    if let Some(row) = a.degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::ZeroDegree { row });
    }
    Ok(RowStochastic { a })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PicStatus {
    Converged,
    /// Iteration cap reached; the last iterate is returned.
    MaxIters,
    /// The deflated operator has no positive second mode.
    DegenerateGap,
}

/// Approximate second eigenvector of `D^-1 A` for one frame.
#[derive(Clone, Debug)]
pub struct InitMask {
    /// Unit-norm eigenvector estimate.
    pub values: Vec<f64>,
    /// Rayleigh quotient in the symmetric basis.
    pub eigenvalue: f64,
    /// `|W x - lambda x|_2` for the returned unit vector.
    pub residual: f64,
    pub iterations: usize,
    pub status: PicStatus,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out(v: &mut [f64], u: &[f64]) {
    let c = dot(v, u);
    v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
}

enum Sweep {
    Converged,
    Exhausted,
    Vanished,
}

/// Runs `v <- (S v + shift v) / (1 + shift)` with `top` projected out until
/// the iterate moves less than `tol` or `budget` steps are used. Returns the
/// outcome, the steps taken and `S v` for the final iterate.
fn sweep(
    sym_mul: &dyn Fn(&[f64]) -> Vec<f64>,
    v: &mut Vec<f64>,
    top: &[f64],
    shift: f64,
    tol: f64,
    budget: usize,
) -> (Sweep, usize, Vec<f64>) {
    let mut sv = sym_mul(v);
    for it in 1..=budget {
        let mut next: Vec<f64> = sv
            .iter()
            .zip(v.iter())
            .map(|(s, x)| (s + shift * x) / (1.0 + shift))
            .collect();
        project_out(&mut next, top);
        let nn = norm(&next);
        if nn == 0.0 {
            return (Sweep::Vanished, it, sv);
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let change = next
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        *v = next;
        sv = sym_mul(v);
        if change < tol {
            return (Sweep::Converged, it, sv);
        }
    }
    (Sweep::Exhausted, budget, sv)
}

/// Power iteration for the second eigenvector.
///
/// Works on `S = D^-1/2 A D^-1/2` with the top mode `D^1/2 1` projected out.
/// Plain iteration runs first; if it stalls or settles on a negative
/// eigenvalue, the remaining budget goes to the shifted operator
/// `(S + I) / 2`, whose spectrum lies in `[0, 1]`.
pub fn second_eigenvector(a: &AffinityMatrix, cfg: &AffinityConfig) -> Result<InitMask> {
    let w = row_normalize(a)?;
    let n = a.n;
    let inv_sqrt: Vec<f64> = a.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut top: Vec<f64> = a.degrees.iter().map(|d| d.sqrt()).collect();
    let top_norm = norm(&top);
    top.iter_mut().for_each(|x| *x /= top_norm);

    let sym_mul = |v: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = v.iter().zip(&inv_sqrt).map(|(x, s)| x * s).collect();
        a.mul_vec(&z).into_iter().zip(&inv_sqrt).map(|(y, s)| y * s).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pic_seed);
    let mut start: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    project_out(&mut start, &top);
    let vn = norm(&start);
    if n < 2 || vn == 0.0 {
        return Ok(InitMask {
            values: vec![0.0; n],
            eigenvalue: 0.0,
            residual: 0.0,
            iterations: 0,
            status: PicStatus::DegenerateGap,
        });
    }
    start.iter_mut().for_each(|x| *x /= vn);

    let plain_budget = (cfg.pic_max_iters / 2).max(1);
    let mut v = start.clone();
    let (mut outcome, mut iterations, mut sv) = sweep(&sym_mul, &mut v, &top, 0.0, cfg.pic_tol, plain_budget);
    let settled_positive = matches!(outcome, Sweep::Converged) && dot(&v, &sv) > DEGENERATE_EIGENVALUE;
    if !settled_positive && cfg.pic_max_iters > iterations {
        if dot(&v, &sv) <= DEGENERATE_EIGENVALUE {
            v = start;
        }
        let (o, it, s) = sweep(&sym_mul, &mut v, &top, 1.0, cfg.pic_tol, cfg.pic_max_iters - iterations);
        outcome = o;
        iterations += it;
        sv = s;
    }
    let mut status = match outcome {
        Sweep::Converged => PicStatus::Converged,
        Sweep::Exhausted => PicStatus::MaxIters,
        Sweep::Vanished => PicStatus::DegenerateGap,
    };

    let eigenvalue = dot(&v, &sv);
    if eigenvalue <= DEGENERATE_EIGENVALUE {
        status = PicStatus::DegenerateGap;
    }
    let mut x: Vec<f64> = v.iter().zip(&inv_sqrt).map(|(u, s)| u * s).collect();
    let xn = norm(&x);
    x.iter_mut().for_each(|e| *e /= xn);
    let wx = w.mul_vec(&x);
    let residual = wx
        .iter()
        .zip(&x)
        .map(|(y, e)| (y - eigenvalue * e).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(InitMask {
        values: x,
        eigenvalue,
        residual,
        iterations,
        status,
    })
}
