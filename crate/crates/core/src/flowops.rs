//! Nearest-integer warp operators built from flow fields and the
//! photometric flow-reliability test.

use crate::error::{Error, Result};
use crate::grid::{sample_bilinear, Grid};
use crate::tensor::Tensor;

/// Value given to targets that no source reaches.
pub const DISOCCLUDED_VALUE: f64 = 0.5;

/// Sparse source-to-target map: each source cell `i` moves to
/// `i + round(flow_i)` or is dropped when that falls outside the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarpOperator {
    grid: Grid,
    targets: Vec<Option<u32>>,
    counts: Vec<u32>,
}

impl WarpOperator {
    fn from_targets(grid: Grid, targets: Vec<Option<u32>>) -> Self {
        let mut counts = vec![0u32; grid.len()];
        for t in targets.iter().flatten() {
            counts[*t as usize] += 1;
        }
        Self { grid, targets, counts }
    }

    pub fn identity(grid: Grid) -> Self {
        Self::from_targets(grid, (0..grid.len() as u32).map(Some).collect())
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn target(&self, source: usize) -> Option<usize> {
        self.targets[source].map(|t| t as usize)
    }

    /// `(source, target)` pairs in source order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t as usize)))
    }

    pub fn contributor_counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn is_valid(&self, target: usize) -> bool {
        self.counts[target] > 0
    }

    pub fn valid(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Chains `self` (p -> q) with `next` (q -> r) into p -> r.
    pub fn then(&self, next: &WarpOperator) -> Result<WarpOperator> {
        if self.grid != next.grid {
            return Err(Error::ShapeMismatch {
                expected: vec![self.grid.height, self.grid.width],
                found: vec![next.grid.height, next.grid.width],
            });
        }
        let targets = self
            .targets
            .iter()
            .map(|t| t.and_then(|t| next.targets[t as usize]))
            .collect();
        Ok(Self::from_targets(self.grid, targets))
    }

    /// Count-normalized forward scatter. Returns the warped values; targets
    /// without contributors get [`DISOCCLUDED_VALUE`].
    pub fn apply(&self, mask: &[f64]) -> Result<Vec<f64>> {
        self.check_len(mask.len())?;
        let mut out = vec![0.0; self.grid.len()];
        for (i, t) in self.targets.iter().enumerate() {
            if let Some(t) = t {
                out[*t as usize] += mask[i];
            }
        }
        for (v, &c) in out.iter_mut().zip(&self.counts) {
            *v = if c > 0 { *v / c as f64 } else { DISOCCLUDED_VALUE };
        }
        Ok(out)
    }

    /// Transpose of [`apply`](Self::apply) restricted to valid targets:
    /// `out_i = g_{t(i)} / count_{t(i)}`.
    pub fn apply_adjoint(&self, grad: &[f64]) -> Result<Vec<f64>> {
        self.check_len(grad.len())?;
        Ok(self
            .targets
            .iter()
            .map(|t| match t {
                Some(t) => grad[*t as usize] / self.counts[*t as usize] as f64,
                None => 0.0,
            })
            .collect())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.grid.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.grid.height, self.grid.width],
                found: vec![len],
            });
        }
        Ok(())
    }
}

fn flow_grid(flow: &Tensor) -> Result<Grid> {
    let (h, w, c) = flow.dims3()?;
    if c != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, 2],
            found: flow.shape().to_vec(),
        });
    }
    Ok(Grid::new(h, w))
}

/// Warp operator of a `[H, W, 2]` flow (channel 0 = dx, channel 1 = dy).
pub fn build_warp(flow: &Tensor) -> Result<WarpOperator> {
    build_warp_masked(flow, None)
}

/// Like [`build_warp`], skipping sources flagged unreliable.
pub fn build_warp_masked(flow: &Tensor, reliable: Option<&[bool]>) -> Result<WarpOperator> {
    let grid = flow_grid(flow)?;
    if let Some(r) = reliable {
        if r.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![grid.height, grid.width],
                found: vec![r.len()],
            });
        }
    }
    let d = flow.data();
    let targets = (0..grid.len())
        .map(|i| {
            if reliable.is_some_and(|r| !r[i]) {
                return None;
            }
            let (y, x) = grid.coords(i);
            // f64::round rounds half away from zero
            let ty = y as f64 + (d[2 * i + 1] as f64).round();
            let tx = x as f64 + (d[2 * i] as f64).round();
            if ty < 0.0 || tx < 0.0 || ty >= grid.height as f64 || tx >= grid.width as f64 {
                None
            } else {
                Some(grid.index(ty as usize, tx as usize) as u32)
            }
        })
        .collect();
    Ok(WarpOperator::from_targets(grid, targets))
}

/// Output of [`apply_warp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn apply_warp(op: &WarpOperator, mask: &[f64]) -> Result<Warped> {
    Ok(Warped {
        values: op.apply(mask)?,
        valid: op.valid(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMask {
    pub grid: Grid,
    /// `true` where the flow is trusted.
    pub flags: Vec<bool>,
    pub percentile_k: f64,
    /// Difference threshold; cells with larger error are unreliable.
    pub threshold: f64,
}

impl ReliabilityMask {
    pub fn all_reliable(grid: Grid, percentile_k: f64) -> Self {
        Self {
            grid,
            flags: vec![true; grid.len()],
            percentile_k,
            threshold: f64::INFINITY,
        }
    }

    pub fn unreliable_count(&self) -> usize {
        self.flags.iter().filter(|&&f| !f).count()
    }
}

/// Nearest-rank `k`-th percentile.
pub fn percentile(values: &[f64], k: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((k / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Flags cells whose reconstruction error exceeds the `k`-th percentile.
pub fn reliability_from_error(grid: Grid, error: &[f64], k: f64) -> Result<ReliabilityMask> {
    if !(0.0..=100.0).contains(&k) {
        return Err(Error::Config(format!("percentile {k} outside [0, 100]")));
    }
    if error.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![grid.height, grid.width],
            found: vec![error.len()],
        });
    }
    let threshold = percentile(error, k);
    Ok(ReliabilityMask {
        grid,
        flags: error.iter().map(|&e| e <= threshold).collect(),
        percentile_k: k,
        threshold,
    })
}

/// Per-cell photometric error of reconstructing `frame_p` by bilinearly
/// sampling `frame_q` at `i + flow_pq(i)`, averaged over channels.
pub fn reconstruction_error(frame_p: &Tensor, frame_q: &Tensor, flow_pq: &Tensor) -> Result<Vec<f64>> {
    let (h, w, c) = frame_p.dims3()?;
    if frame_q.shape() != frame_p.shape() {
        return Err(Error::ShapeMismatch {
            expected: frame_p.shape().to_vec(),
            found: frame_q.shape().to_vec(),
        });
    }
    if flow_pq.shape() != [h, w, 2] {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, 2],
            found: flow_pq.shape().to_vec(),
        });
    }
    let grid = Grid::new(h, w);
    let (p, q, f) = (frame_p.data(), frame_q.data(), flow_pq.data());
    Ok((0..grid.len())
        .map(|i| {
            let (y, x) = grid.coords(i);
            let sy = y as f64 + f[2 * i + 1] as f64;
            let sx = x as f64 + f[2 * i] as f64;
            (0..c)
                .map(|ch| (p[i * c + ch] as f64 - sample_bilinear(q, grid, c, ch, sy, sx)).abs())
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

pub fn flow_reliability(frame_p: &Tensor, frame_q: &Tensor, flow_pq: &Tensor, k: f64) -> Result<ReliabilityMask> {
    let err = reconstruction_error(frame_p, frame_q, flow_pq)?;
    reliability_from_error(Grid::from_tensor(frame_p)?, &err, k)
}

/// Warp operators for every frame pair up to a temporal horizon.
///
/// `forward[t - 1][p]` maps frame `p` to `p + t`; `backward[t - 1][p]` maps
/// frame `p + t` back to `p`.
#[derive(Clone, Debug)]
pub struct WarpSet {
    n_frames: usize,
    grid: Grid,
    forward: Vec<Vec<WarpOperator>>,
    backward: Vec<Vec<WarpOperator>>,
}

impl WarpSet {
    /// Builds from explicit operators per horizon level.
    pub fn from_levels(
        n_frames: usize,
        grid: Grid,
        forward: Vec<Vec<WarpOperator>>,
        backward: Vec<Vec<WarpOperator>>,
    ) -> Result<Self> {
        if forward.len() != backward.len() {
            return Err(Error::Config("forward/backward horizon mismatch".into()));
        }
        for (t, (f, b)) in forward.iter().zip(&backward).enumerate() {
            let expected = n_frames.saturating_sub(t + 1);
            if f.len() != expected || b.len() != expected {
                return Err(Error::Config(format!(
                    "horizon {} needs {expected} operators per direction",
                    t + 1
                )));
            }
            if f.iter().chain(b).any(|op| op.grid != grid) {
                return Err(Error::Config("warp operator grid mismatch".into()));
            }
        }
        Ok(Self {
            n_frames,
            grid,
            forward,
            backward,
        })
    }

    /// Adjacent-frame operators only.
    pub fn adjacent(
        n_frames: usize,
        grid: Grid,
        forward: Vec<WarpOperator>,
        backward: Vec<WarpOperator>,
    ) -> Result<Self> {
        Self::from_levels(n_frames, grid, vec![forward], vec![backward])
    }

    /// Extends the adjacent operators to `horizon` by chaining them.
    pub fn compose_to(mut self, horizon: usize) -> Result<Self> {
        while self.forward.len() < horizon {
            let t = self.forward.len();
            let count = self.n_frames.saturating_sub(t + 1);
            let mut fwd = Vec::with_capacity(count);
            let mut bwd = Vec::with_capacity(count);
            for p in 0..count {
                // p -> p+t -> p+t+1
                fwd.push(self.forward[t - 1][p].then(&self.forward[0][p + t])?);
                // p+t+1 -> p+1 -> p
                bwd.push(self.backward[t - 1][p + 1].then(&self.backward[0][p])?);
            }
            self.forward.push(fwd);
            self.backward.push(bwd);
        }
        Ok(self)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn horizon(&self) -> usize {
        self.forward.len()
    }

    pub fn forward(&self, t: usize, p: usize) -> &WarpOperator {
        &self.forward[t - 1][p]
    }

    pub fn backward(&self, t: usize, p: usize) -> &WarpOperator {
        &self.backward[t - 1][p]
    }
}
