//! Grid geometry and resampling helpers shared by the pipeline stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major 2-D lattice of `height x width` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// True when cell `i` lies within `width` cells of the grid edge.
    pub fn on_border(&self, i: usize, width: usize) -> bool {
        let (y, x) = self.coords(i);
        y < width || x < width || y + width >= self.height || x + width >= self.width
    }

    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, ..] => Ok(Self::new(*h, *w)),
            other => Err(Error::InvalidShape(other.to_vec())),
        }
    }
}

/// Bilinear lookup of channel `c` of an interleaved `[H, W, C]` field at
/// fractional `(y, x)`, clamping to the edge.
pub fn sample_bilinear(data: &[f32], grid: Grid, channels: usize, c: usize, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (grid.height - 1) as f64);
    let xc = x.clamp(0.0, (grid.width - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(grid.height - 1);
    let x1 = (x0 + 1).min(grid.width - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let at = |yy: usize, xx: usize| data[grid.index(yy, xx) * channels + c] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Source coordinate of target cell centre `t` under half-pixel alignment.
#[inline]
fn source_coord(t: usize, from: usize, to: usize) -> f64 {
    (t as f64 + 0.5) * from as f64 / to as f64 - 0.5
}

/// Bilinear resize of a scalar field.
pub fn resize_bilinear(values: &[f64], from: Grid, to: Grid) -> Vec<f64> {
    assert_eq!(values.len(), from.len());
    if from == to {
        return values.to_vec();
    }
    let mut out = Vec::with_capacity(to.len());
    for ty in 0..to.height {
        let sy = source_coord(ty, from.height, to.height);
        for tx in 0..to.width {
            let sx = source_coord(tx, from.width, to.width);
            let yc = sy.clamp(0.0, (from.height - 1) as f64);
            let xc = sx.clamp(0.0, (from.width - 1) as f64);
            let y0 = yc.floor() as usize;
            let x0 = xc.floor() as usize;
            let y1 = (y0 + 1).min(from.height - 1);
            let x1 = (x0 + 1).min(from.width - 1);
            let fy = yc - y0 as f64;
            let fx = xc - x0 as f64;
            let at = |yy: usize, xx: usize| values[from.index(yy, xx)];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Nearest-neighbour resize of any per-cell field.
pub fn resize_nearest<T: Copy>(values: &[T], from: Grid, to: Grid) -> Vec<T> {
    assert_eq!(values.len(), from.len());
    if from == to {
        return values.to_vec();
    }
    let mut out = Vec::with_capacity(to.len());
    for ty in 0..to.height {
        let sy = ((ty * from.height) / to.height).min(from.height - 1);
        for tx in 0..to.width {
            let sx = ((tx * from.width) / to.width).min(from.width - 1);
            out.push(values[from.index(sy, sx)]);
        }
    }
    out
}

/// Resamples an interleaved `[H, W, C]` tensor onto `to` bilinearly.
pub fn resize_field(t: &Tensor, to: Grid) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    let from = Grid::new(h, w);
    if from == to {
        return Ok(t.clone());
    }
    let mut data = Vec::with_capacity(to.len() * c);
    for ty in 0..to.height {
        let sy = source_coord(ty, h, to.height);
        for tx in 0..to.width {
            let sx = source_coord(tx, w, to.width);
            for ch in 0..c {
                data.push(sample_bilinear(t.data(), from, c, ch, sy, sx) as f32);
            }
        }
    }
    Tensor::new(vec![to.height, to.width, c], data)
}

/// Resamples a `[H, W, 2]` flow onto `to`, rescaling displacements to the
/// new cell size. Channel 0 is the horizontal (column) displacement and
/// channel 1 the vertical (row) displacement.
pub fn resize_flow(flow: &Tensor, to: Grid) -> Result<Tensor> {
    let (h, w, c) = flow.dims3()?;
    if c != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w, 2],
            found: flow.shape().to_vec(),
        });
    }
    if (h, w) == (to.height, to.width) {
        return Ok(flow.clone());
    }
    let mut out = resize_field(flow, to)?;
    let sx = to.width as f32 / w as f32;
    let sy = to.height as f32 / h as f32;
    for v in out.data_mut().chunks_exact_mut(2) {
        v[0] *= sx;
        v[1] *= sy;
    }
    Ok(out)
}
