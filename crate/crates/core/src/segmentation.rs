//! Discretization of soft masks and the J / F evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Binary segmentation, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Grid,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![values.len()],
            });
        }
        Ok(Self {
            grid: Grid::new(height, width),
            values,
        })
    }

    pub fn from_grid(grid: Grid, values: Vec<bool>) -> Result<Self> {
        Self::new(grid.height, grid.width, values)
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![false; grid.len()],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, to: Grid) -> Self {
        Self {
            grid: to,
            values: crate::grid::resize_nearest(&self.values, self.grid, to),
        }
    }

    /// Fraction of cells where the two masks agree.
    pub fn agreement(&self, other: &BinaryMask) -> Result<f64> {
        check_same(self, other)?;
        let same = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.len() as f64)
    }
}

fn check_same(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::ShapeMismatch {
            expected: vec![a.height(), a.width()],
            found: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// Globally optimal two-class 1-D k-means split.
///
/// Returns the largest value assigned to the low cluster, or `None` when all
/// values coincide.
pub fn two_means_threshold(values: &[f64]) -> Option<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let mut prefix = 0.0;
    let mut best: Option<(f64, usize)> = None;
    for k in 1..n {
        prefix += sorted[k - 1];
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let (n1, n2) = (k as f64, (n - k) as f64);
        let diff = prefix / n1 - (total - prefix) / n2;
        // between-class scatter; maximizing it minimizes within-class SSE
        let score = n1 * n2 * diff * diff;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, k));
        }
    }
    best.map(|(_, k)| sorted[k - 1])
}

/// Splits one frame's soft values into foreground (upper cluster) and
/// background.
pub fn binarize(values: &[f64], grid: Grid) -> Result<BinaryMask> {
    if values.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![grid.height, grid.width],
            found: vec![values.len()],
        });
    }
    match two_means_threshold(values) {
        Some(t) => BinaryMask::from_grid(grid, values.iter().map(|&v| v > t).collect()),
        None => {
            log::warn!("binarize: all values identical, returning all-background mask");
            Ok(BinaryMask::empty(grid))
        }
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub jaccard: f64,
    pub contour_f: f64,
    pub contour_precision: f64,
    pub contour_recall: f64,
    pub boundary_tolerance: usize,
}

/// `ceil(0.0075 * diagonal)` pixels.
pub fn default_tolerance(grid: Grid) -> usize {
    (0.0075 * grid.diagonal()).ceil() as usize
}

/// Foreground cells with at least one background 8-neighbour inside the grid.
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let g = mask.grid;
    let v = &mask.values;
    let mut out = vec![false; g.len()];
    for y in 0..g.height {
        for x in 0..g.width {
            let i = g.index(y, x);
            if !v[i] {
                continue;
            }
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= g.height as i64 || nx >= g.width as i64 {
                        continue;
                    }
                    if !v[g.index(ny as usize, nx as usize)] {
                        out[i] = true;
                        break 'nb;
                    }
                }
            }
        }
    }
    out
}

/// Fraction of `from` boundary cells within Euclidean `tol` of a `to` cell.
fn matched_fraction(grid: Grid, from: &[bool], to: &[bool], tol: usize) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let t = tol as i64;
    let mut hit = 0usize;
    for i in (0..grid.len()).filter(|&i| from[i]) {
        let (y, x) = grid.coords(i);
        let found = (-t..=t).any(|dy| {
            (-t..=t).any(|dx| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                dy * dy + dx * dx <= t * t
                    && ny >= 0
                    && nx >= 0
                    && ny < grid.height as i64
                    && nx < grid.width as i64
                    && to[grid.index(ny as usize, nx as usize)]
            })
        });
        hit += found as usize;
    }
    Some(hit as f64 / total as f64)
}

/// Boundary precision/recall/F at a pixel tolerance, plus Jaccard.
pub fn contour_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: usize) -> Result<MetricReport> {
    let j = jaccard(pred, gt)?;
    let bp = boundary(pred);
    let bg = boundary(gt);
    let precision = matched_fraction(pred.grid, &bp, &bg, tolerance);
    let recall = matched_fraction(pred.grid, &bg, &bp, tolerance);
    let (p, r) = match (precision, recall) {
        (None, None) => (1.0, 1.0),
        (None, Some(_)) => (1.0, 0.0),
        (Some(_), None) => (0.0, 1.0),
        (Some(p), Some(r)) => (p, r),
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Ok(MetricReport {
        jaccard: j,
        contour_f: f,
        contour_precision: p,
        contour_recall: r,
        boundary_tolerance: tolerance,
    })
}
