//! Synthetic scenes with known ground truth: a textured rectangle moving
//! rigidly over a static background.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityMatrix;
use crate::bundle::{LongRangeFlows, VideoBundle};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::segmentation::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Position in frame 0.
    pub rect: Rect,
    /// Per-frame displacement `[dx, dy]` in cells.
    pub velocity: [i64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// Region gets foreground-like appearance features.
    ForegroundFeatures,
    /// Region gets background-like appearance features.
    BackgroundFeatures,
    /// Flows touching the region are replaced by uniform noise in `[-magnitude, magnitude]`.
    RandomFlow { magnitude: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub frame: usize,
    pub region: Rect,
    #[serde(flatten)]
    pub kind: CorruptionKind,
}

/// Long-range flows for every distance `2..=horizon`, with Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRangeSpec {
    pub horizon: usize,
    pub noise: f64,
}

fn default_dim() -> usize {
    16
}

fn default_separation() -> f64 {
    90.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    #[serde(default)]
    pub object: Option<ObjectSpec>,
    #[serde(default = "default_dim")]
    pub feature_dim: usize,
    /// Angle between foreground and background prototypes.
    #[serde(default = "default_separation")]
    pub separation_deg: f64,
    #[serde(default)]
    pub feature_noise: f64,
    #[serde(default)]
    pub flow_noise: f64,
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
    #[serde(default)]
    pub long_range: Option<LongRangeSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    /// A noiseless scene with one moving object.
    pub fn moving_square(height: usize, width: usize, n_frames: usize, rect: Rect, velocity: [i64; 2]) -> Self {
        Self {
            height,
            width,
            n_frames,
            object: Some(ObjectSpec { rect, velocity }),
            feature_dim: default_dim(),
            separation_deg: default_separation(),
            feature_noise: 0.0,
            flow_noise: 0.0,
            corruptions: Vec::new(),
            long_range: None,
            seed: 0,
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.height, self.width)
    }

    /// Object rectangle in frame `p`.
    pub fn object_at(&self, p: usize) -> Option<Rect> {
        self.object.map(|o| {
            let [dx, dy] = o.velocity;
            Rect {
                top: (o.rect.top as i64 + dy * p as i64) as usize,
                left: (o.rect.left as i64 + dx * p as i64) as usize,
                ..o.rect
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.n_frames == 0 || self.feature_dim < 2 {
            return Err(Error::Scene("grid, frame count and feature_dim >= 2 required".into()));
        }
        if !(self.feature_noise >= 0.0 && self.flow_noise >= 0.0) {
            return Err(Error::Scene("noise levels must be non-negative".into()));
        }
        if let Some(o) = self.object {
            if o.rect.height == 0 || o.rect.width == 0 {
                return Err(Error::Scene("empty object".into()));
            }
            for p in 0..self.n_frames {
                let [dx, dy] = o.velocity;
                let top = o.rect.top as i64 + dy * p as i64;
                let left = o.rect.left as i64 + dx * p as i64;
                if top < 0
                    || left < 0
                    || top + o.rect.height as i64 > self.height as i64
                    || left + o.rect.width as i64 > self.width as i64
                {
                    return Err(Error::Scene(format!("object leaves the grid at frame {p}")));
                }
            }
        }
        for c in &self.corruptions {
            if c.frame >= self.n_frames
                || c.region.top + c.region.height > self.height
                || c.region.left + c.region.width > self.width
            {
                return Err(Error::Scene("corruption outside the video".into()));
            }
        }
        if let Some(lr) = self.long_range {
            if lr.horizon < 2 || !(lr.noise >= 0.0) {
                return Err(Error::Scene("long-range horizon must be >= 2".into()));
            }
        }
        Ok(())
    }

    fn in_object(&self, p: usize, y: usize, x: usize) -> bool {
        self.object_at(p).is_some_and(|r| r.contains(y, x))
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Unit-norm foreground and background prototypes at the requested angle.
fn prototypes(rng: &mut ChaCha8Rng, d: usize, separation_deg: f64) -> (Vec<f64>, Vec<f64>) {
    let mut u = gaussian_vec(rng, d);
    normalize(&mut u);
    let mut w = gaussian_vec(rng, d);
    let c: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&u).for_each(|(wi, ui)| *wi -= c * ui);
    normalize(&mut w);
    let theta = separation_deg.to_radians();
    let bg = u
        .iter()
        .zip(&w)
        .map(|(a, b)| theta.cos() * a + theta.sin() * b)
        .collect();
    (u, bg)
}

struct Noise {
    dist: Option<Normal<f64>>,
}

impl Noise {
    fn new(std: f64) -> Self {
        Self {
            dist: (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std")),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.dist.map_or(0.0, |d| d.sample(rng))
    }
}

fn feature_cell(rng: &mut ChaCha8Rng, proto: &[f64], noise: &Noise, out: &mut [f32]) {
    let mut v: Vec<f64> = proto.iter().map(|p| p + noise.sample(rng)).collect();
    normalize(&mut v);
    out.iter_mut().zip(&v).for_each(|(o, x)| *o = *x as f32);
}

/// Flow field on the grid of frame `p` towards frame `p + t` (`sign = 1`), or
/// on the grid of frame `p` back towards `p - t` (`sign = -1`).
fn flow_field(spec: &SceneSpec, rng: &mut ChaCha8Rng, p: usize, t: i64, noise: &Noise) -> Tensor {
    let g = spec.grid();
    let [dx, dy] = spec.object.map_or([0, 0], |o| o.velocity);
    let mut data = vec![0f32; g.len() * 2];
    for y in 0..g.height {
        for x in 0..g.width {
            let i = g.index(y, x);
            let (mx, my) = if spec.in_object(p, y, x) {
                ((dx * t) as f64, (dy * t) as f64)
            } else {
                (0.0, 0.0)
            };
            data[2 * i] = (mx + noise.sample(rng)) as f32;
            data[2 * i + 1] = (my + noise.sample(rng)) as f32;
        }
    }
    Tensor::new(vec![g.height, g.width, 2], data).expect("shape")
}

/// Renders the scene described by `spec`. Deterministic for a fixed seed.
pub fn generate(spec: &SceneSpec) -> Result<VideoBundle> {
    spec.validate()?;
    let g = spec.grid();
    let n = spec.n_frames;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (fg, bg) = prototypes(&mut rng, d, spec.separation_deg);
    let background: Vec<f32> = (0..g.len()).map(|_| rng.gen_range(0.0..0.4)).collect();
    let object_texture: Vec<f32> = spec
        .object
        .map(|o| {
            (0..o.rect.height * o.rect.width)
                .map(|_| rng.gen_range(0.6..1.0))
                .collect()
        })
        .unwrap_or_default();

    let feat_noise = Noise::new(spec.feature_noise);
    let flow_noise = Noise::new(spec.flow_noise);
    let mut features = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for p in 0..n {
        let mut f = vec![0f32; g.len() * d];
        let mut img = background.clone();
        let mut mask = vec![false; g.len()];
        for y in 0..g.height {
            for x in 0..g.width {
                let i = g.index(y, x);
                let inside = spec.in_object(p, y, x);
                let proto = if inside { &fg } else { &bg };
                feature_cell(&mut rng, proto, &feat_noise, &mut f[i * d..(i + 1) * d]);
                if inside {
                    let r = spec.object_at(p).expect("object");
                    img[i] = object_texture[(y - r.top) * r.width + (x - r.left)];
                    mask[i] = true;
                }
            }
        }
        features.push(Tensor::new(vec![g.height, g.width, d], f)?);
        frames.push(Tensor::new(vec![g.height, g.width, 1], img)?);
        gt.push(BinaryMask::from_grid(g, mask)?);
    }
    let mut flow_fwd = Vec::with_capacity(n.saturating_sub(1));
    let mut flow_bwd = Vec::with_capacity(n.saturating_sub(1));
    for p in 0..n.saturating_sub(1) {
        flow_fwd.push(flow_field(spec, &mut rng, p, 1, &flow_noise));
        flow_bwd.push(flow_field(spec, &mut rng, p + 1, -1, &flow_noise));
    }
    let mut long_range = BTreeMap::new();
    if let Some(lr) = spec.long_range {
        let lr_noise = Noise::new(lr.noise);
        for t in 2..=lr.horizon.min(n.saturating_sub(1)) {
            let count = n - t;
            let forward = (0..count)
                .map(|p| flow_field(spec, &mut rng, p, t as i64, &lr_noise))
                .collect();
            let backward = (0..count)
                .map(|p| flow_field(spec, &mut rng, p + t, -(t as i64), &lr_noise))
                .collect();
            long_range.insert(t, LongRangeFlows { forward, backward });
        }
    }

    for c in &spec.corruptions {
        let cells = (0..g.len()).filter(|&i| {
            let (y, x) = g.coords(i);
            c.region.contains(y, x)
        });
        match c.kind {
            CorruptionKind::ForegroundFeatures | CorruptionKind::BackgroundFeatures => {
                let proto = if c.kind == CorruptionKind::ForegroundFeatures {
                    &fg
                } else {
                    &bg
                };
                let f = features[c.frame].data_mut();
                for i in cells {
                    feature_cell(&mut rng, proto, &feat_noise, &mut f[i * d..(i + 1) * d]);
                }
            }
            CorruptionKind::RandomFlow { magnitude } => {
                let cells: Vec<usize> = cells.collect();
                let mut targets: Vec<&mut Tensor> = Vec::new();
                if c.frame + 1 < n {
                    targets.push(&mut flow_fwd[c.frame]);
                }
                if c.frame >= 1 {
                    targets.push(&mut flow_bwd[c.frame - 1]);
                }
                for t in targets {
                    let data = t.data_mut();
                    for &i in &cells {
                        data[2 * i] = rng.gen_range(-magnitude..=magnitude) as f32;
                        data[2 * i + 1] = rng.gen_range(-magnitude..=magnitude) as f32;
                    }
                }
            }
        }
    }

    let bundle = VideoBundle {
        features,
        flow_fwd,
        flow_bwd,
        frames: Some(frames),
        gt_masks: Some(gt),
        long_range,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Symmetric affinity on `n` nodes with two planted blocks.
///
/// Entries are `within` or `cross` plus uniform jitter of +-0.05, the
/// diagonal is 1, and the first block has a random size in `[n/3, 2n/3]`.
pub fn planted_two_block(n: usize, within: f32, cross: f32, seed: u64) -> AffinityMatrix {
    assert!(n >= 4, "planted instance needs at least 4 nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = rng.gen_range(n / 3..=2 * n / 3);
    let mut values = vec![0f32; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let base = if (i < split) == (j < split) { within } else { cross };
            let v = (base + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    AffinityMatrix::from_dense(n, values).expect("planted matrix is symmetric")
}
