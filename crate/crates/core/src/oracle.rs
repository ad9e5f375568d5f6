//! Dense reference solvers: exact eigenvectors of small affinities and
//! spectral segmentation over the full block-tridiagonal video affinity.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::affinity::AffinityMatrix;
use crate::bundle::VideoBundle;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::objective::normalize_init;
use crate::pipeline::{build_warps, compute_reliability, frame_affinity_at, PipelineConfig};
use crate::segmentation::{binarize, BinaryMask};

/// Largest supported `N * H * W`.
pub const ORACLE_CAP: usize = 1024;

/// Spectral gaps below this are reported as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// Eigenpairs of `D^-1/2 M D^-1/2`, sorted by decreasing eigenvalue.
fn normalized_eigen(values: &[f64], n: usize) -> Result<(Vec<f64>, DMatrix<f64>, Vec<f64>)> {
    let degrees: Vec<f64> = values.chunks_exact(n).map(|r| r.iter().sum()).collect();
    if let Some(row) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::ZeroDegree { row });
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let s = DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * values[i * n + j] * inv_sqrt[j]);
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    Ok((lambdas, vectors, inv_sqrt))
}

/// Right eigenvector `x = D^-1/2 u` of `D^-1 M` for column `c`, unit norm.
fn right_vector(vectors: &DMatrix<f64>, inv_sqrt: &[f64], c: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..inv_sqrt.len()).map(|i| vectors[(i, c)] * inv_sqrt[i]).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    x
}

/// All eigenvalues of `D^-1 A`, largest first.
pub fn dense_spectrum(a: &AffinityMatrix) -> Vec<f64> {
    let values = a.to_dense();
    normalized_eigen(&values, a.n())
        .expect("affinity with positive degrees")
        .0
}

/// Second eigenvalue of `D^-1 A` and its unit-norm eigenvector.
pub fn dense_second_eigenvector(a: &AffinityMatrix) -> (f64, Vec<f64>) {
    let values = a.to_dense();
    let (lambdas, vectors, inv_sqrt) = normalized_eigen(&values, a.n()).expect("positive degrees");
    (lambdas[1], right_vector(&vectors, &inv_sqrt, 1))
}

/// Dense `(N H W) x (N H W)` video affinity, row-major, frame-major indexing.
#[derive(Clone, Debug)]
pub struct FullAffinity {
    pub n_frames: usize,
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl FullAffinity {
    pub fn dim(&self) -> usize {
        self.n_frames * self.grid.len()
    }

    /// Block `(p, q)` entry `(i, j)`.
    pub fn get(&self, p: usize, i: usize, q: usize, j: usize) -> f64 {
        let m = self.grid.len();
        self.values[(p * m + i) * self.dim() + q * m + j]
    }
}

/// Assembles the block-tridiagonal video affinity on the feature grid.
///
/// Diagonal blocks are the per-frame affinities. Block `(p + 1, p)` has a 1
/// at `(j, i)` when the forward warp sends cell `i` of frame `p` to `j`, and
/// block `(p, p + 1)` has a 1 at `(i, j)` when the backward warp sends cell
/// `j` of frame `p + 1` to `i`. The result is symmetrized.
pub fn full_affinity(bundle: &VideoBundle, cfg: &PipelineConfig) -> Result<FullAffinity> {
    bundle.validate()?;
    let grid = bundle.feature_grid();
    let n_frames = bundle.n_frames();
    let m = grid.len();
    let dim = n_frames * m;
    if dim > ORACLE_CAP {
        return Err(Error::SizeCap {
            size: dim,
            cap: ORACLE_CAP,
        });
    }
    let rel = compute_reliability(bundle, cfg.percentile_k)?;
    let mut values = vec![0.0; dim * dim];
    for p in 0..n_frames {
        let a = frame_affinity_at(bundle, &rel, p, &cfg.affinity)?;
        for i in 0..m {
            for j in 0..m {
                values[(p * m + i) * dim + p * m + j] = a.get(i, j);
            }
        }
    }
    let warps = build_warps(bundle, &rel, 1, grid)?;
    for p in 0..n_frames.saturating_sub(1) {
        for (i, j) in warps.forward(1, p).entries() {
            values[((p + 1) * m + j) * dim + p * m + i] = 1.0;
        }
        for (j, i) in warps.backward(1, p).entries() {
            values[(p * m + i) * dim + (p + 1) * m + j] = 1.0;
        }
    }
    for r in 0..dim {
        for c in (r + 1)..dim {
            let v = 0.5 * (values[r * dim + c] + values[c * dim + r]);
            values[r * dim + c] = v;
            values[c * dim + r] = v;
        }
    }
    Ok(FullAffinity { n_frames, grid, values })
}

/// Which eigenvector of the video affinity segments the sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OracleMode {
    /// Top eigenvector after removing each frame's `sqrt(d)` component.
    #[default]
    FrameDeflated,
    /// Plain second eigenvector of the whole matrix.
    Global,
}

#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub eigenvalue: f64,
    /// Distance to the next eigenvalue.
    pub gap: f64,
    pub degenerate: bool,
    pub masks: Vec<BinaryMask>,
    /// Right eigenvector, frame-major, unit norm.
    pub vector: Vec<f64>,
}

/// Leading eigenpair of `Q S Q`, where `Q` projects out one unit block per
/// frame proportional to `sqrt(d)` on that frame.
fn frame_deflated_eigen(values: &[f64], dim: usize, block: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let degrees: Vec<f64> = values.chunks_exact(dim).map(|r| r.iter().sum()).collect();
    if let Some(row) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::ZeroDegree { row });
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let s = DMatrix::from_fn(dim, dim, |i, j| inv_sqrt[i] * values[i * dim + j] * inv_sqrt[j]);
    let frames = dim / block;
    let mut u = DMatrix::zeros(dim, frames);
    for p in 0..frames {
        let norm = degrees[p * block..(p + 1) * block].iter().sum::<f64>().sqrt();
        for i in p * block..(p + 1) * block {
            u[(i, p)] = degrees[i].sqrt() / norm;
        }
    }
    let su = &s * &u;
    let utsu = u.transpose() * &su;
    let m = &s - &u * su.transpose() - &su * u.transpose() + &u * utsu * u.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let top = eig.eigenvectors.column(order[0]).iter().copied().collect();
    Ok((lambdas, top, inv_sqrt))
}

/// Segments every frame from a leading eigenvector of the full video
/// affinity, oriented and binarized per frame like the pipeline.
pub fn oracle_segment(bundle: &VideoBundle, cfg: &PipelineConfig) -> Result<OracleOutput> {
    oracle_segment_with(bundle, cfg, OracleMode::default())
}

pub fn oracle_segment_with(bundle: &VideoBundle, cfg: &PipelineConfig, mode: OracleMode) -> Result<OracleOutput> {
    let full = full_affinity(bundle, cfg)?;
    let dim = full.dim();
    let grid = full.grid;
    let (eigenvalue, gap, x) = match mode {
        OracleMode::Global => {
            let (lambdas, vectors, inv_sqrt) = normalized_eigen(&full.values, dim)?;
            let l2 = lambdas.get(1).copied().unwrap_or(0.0);
            let gap = l2 - lambdas.get(2).copied().unwrap_or(f64::NEG_INFINITY);
            let x = if dim >= 2 {
                right_vector(&vectors, &inv_sqrt, 1)
            } else {
                vec![0.0; dim]
            };
            (l2, gap, x)
        }
        OracleMode::FrameDeflated => {
            let (lambdas, top, inv_sqrt) = frame_deflated_eigen(&full.values, dim, grid.len())?;
            let gap = lambdas[0] - lambdas.get(1).copied().unwrap_or(f64::NEG_INFINITY);
            let mut x: Vec<f64> = top.iter().zip(&inv_sqrt).map(|(u, s)| u * s).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            (lambdas[0], gap, x)
        }
    };
    let degenerate = |gap: f64, x: Vec<f64>| {
        log::warn!("oracle: degenerate spectrum (gap {gap:.3e})");
        OracleOutput {
            eigenvalue,
            gap,
            degenerate: true,
            masks: vec![BinaryMask::empty(grid); full.n_frames],
            vector: x,
        }
    };
    if dim < 2 || !(gap >= DEGENERATE_GAP) || !(eigenvalue > DEGENERATE_GAP) {
        return Ok(degenerate(gap, x));
    }
    let mut masks = Vec::with_capacity(full.n_frames);
    for frame in x.chunks(grid.len()) {
        match normalize_init(frame, grid, grid, cfg.border_width) {
            Ok(soft) => masks.push(binarize(&soft.values(), grid)?),
            Err(Error::DegenerateInit) => return Ok(degenerate(gap, x)),
            Err(e) => return Err(e),
        }
    }
    Ok(OracleOutput {
        eigenvalue,
        gap,
        degenerate: false,
        masks,
        vector: x,
    })
}
