//! Aligned per-video inputs and their on-disk directory layout.
//!
//! ```text
//! <dir>/features/feat_00000.vseg        [H_f, W_f, d]
//! <dir>/flows/flow_fwd_00000.vseg       [H, W, 2]   frame p -> p+1
//! <dir>/flows/flow_bwd_00000.vseg       [H, W, 2]   frame p+1 -> p
//! <dir>/flows/flow_fwd_t2_00000.vseg    optional long-range p -> p+t
//! <dir>/frames/frame_00000.vseg         optional    [H_img, W_img, c]
//! <dir>/gt/gt_00000.pgm                 optional    (or gt_00000.vseg)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::segmentation::BinaryMask;
use crate::tensor::{read_mask, read_tensor, write_mask_image, write_tensor, Tensor};

/// Flows between frames `t` apart, for `t >= 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LongRangeFlows {
    /// `forward[p]` maps frame `p` to `p + t`.
    pub forward: Vec<Tensor>,
    /// `backward[p]` maps frame `p + t` to `p`, on the grid of frame `p + t`.
    pub backward: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoBundle {
    pub features: Vec<Tensor>,
    pub flow_fwd: Vec<Tensor>,
    pub flow_bwd: Vec<Tensor>,
    pub frames: Option<Vec<Tensor>>,
    pub gt_masks: Option<Vec<BinaryMask>>,
    /// Keyed by frame distance.
    pub long_range: BTreeMap<usize, LongRangeFlows>,
}

fn expect_shape(t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl VideoBundle {
    pub fn n_frames(&self) -> usize {
        self.features.len()
    }

    pub fn feature_grid(&self) -> Grid {
        let s = self.features[0].shape();
        Grid::new(s[0], s[1])
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].shape()[2]
    }

    /// Grid of the flow fields; the feature grid for single-frame bundles.
    pub fn flow_grid(&self) -> Grid {
        match self.flow_fwd.first() {
            Some(f) => Grid::new(f.shape()[0], f.shape()[1]),
            None => self.feature_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_frames();
        if n == 0 {
            return Err(Error::MissingInput("no feature tensors".into()));
        }
        let f0 = self.features[0].shape().to_vec();
        if f0.len() != 3 {
            return Err(Error::InvalidShape(f0));
        }
        for f in &self.features {
            expect_shape(f, &f0)?;
        }
        if self.flow_fwd.len() != n - 1 || self.flow_bwd.len() != n - 1 {
            return Err(Error::Config(format!(
                "{n} frames need {} forward and backward flows, found {} and {}",
                n - 1,
                self.flow_fwd.len(),
                self.flow_bwd.len()
            )));
        }
        let grid = self.flow_grid();
        let flow_shape = [grid.height, grid.width, 2];
        for f in self.flow_fwd.iter().chain(&self.flow_bwd) {
            expect_shape(f, &flow_shape)?;
        }
        for (&t, lr) in &self.long_range {
            let count = n.saturating_sub(t);
            if t < 2 || lr.forward.len() != count || lr.backward.len() != count {
                return Err(Error::Config(format!(
                    "long-range flows at distance {t} need {count} fields per direction"
                )));
            }
            for f in lr.forward.iter().chain(&lr.backward) {
                expect_shape(f, &flow_shape)?;
            }
        }
        if let Some(frames) = &self.frames {
            if frames.len() != n {
                return Err(Error::Config(format!(
                    "{n} frames expected, found {} images",
                    frames.len()
                )));
            }
            let s0 = frames[0].shape().to_vec();
            if s0.len() != 3 {
                return Err(Error::InvalidShape(s0));
            }
            for fr in frames {
                expect_shape(fr, &s0)?;
            }
        }
        if let Some(gt) = &self.gt_masks {
            if gt.len() != n {
                return Err(Error::Config(format!("{n} frames expected, found {} masks", gt.len())));
            }
            if gt.iter().any(|m| m.grid() != gt[0].grid()) {
                return Err(Error::Config("ground-truth masks differ in size".into()));
            }
        }
        Ok(())
    }

    /// Loads a bundle directory; `features/` and `flows/` are required.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let feat_dir = dir.join("features");
        let flow_dir = dir.join("flows");
        for d in [&feat_dir, &flow_dir] {
            if !d.is_dir() {
                return Err(Error::MissingInput(format!("directory {} not found", d.display())));
            }
        }
        let features = read_sequence(&feat_dir, "feat_", None)?;
        let n = features.len();
        if n == 0 {
            return Err(Error::MissingInput(format!("no feat_*.vseg in {}", feat_dir.display())));
        }
        let flow_fwd = read_sequence(&flow_dir, "flow_fwd_", Some(n - 1))?;
        let flow_bwd = read_sequence(&flow_dir, "flow_bwd_", Some(n - 1))?;
        let mut long_range = BTreeMap::new();
        for t in 2..n {
            let fwd_prefix = format!("flow_fwd_t{t}_");
            if !dir_has(&flow_dir, &fwd_prefix)? {
                continue;
            }
            long_range.insert(
                t,
                LongRangeFlows {
                    forward: read_sequence(&flow_dir, &fwd_prefix, Some(n - t))?,
                    backward: read_sequence(&flow_dir, &format!("flow_bwd_t{t}_"), Some(n - t))?,
                },
            );
        }
        let frame_dir = dir.join("frames");
        let frames = if frame_dir.is_dir() {
            Some(read_sequence(&frame_dir, "frame_", Some(n))?)
        } else {
            None
        };
        let gt_dir = dir.join("gt");
        let gt_masks = if gt_dir.is_dir() {
            Some(read_masks(&gt_dir, n)?)
        } else {
            None
        };
        let bundle = Self {
            features,
            flow_fwd,
            flow_bwd,
            frames,
            gt_masks,
            long_range,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        let mkdir = |name: &str| -> Result<std::path::PathBuf> {
            let d = dir.join(name);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            Ok(d)
        };
        let feat_dir = mkdir("features")?;
        for (p, t) in self.features.iter().enumerate() {
            write_tensor(feat_dir.join(format!("feat_{p:05}.vseg")), t)?;
        }
        let flow_dir = mkdir("flows")?;
        for (p, (f, b)) in self.flow_fwd.iter().zip(&self.flow_bwd).enumerate() {
            write_tensor(flow_dir.join(format!("flow_fwd_{p:05}.vseg")), f)?;
            write_tensor(flow_dir.join(format!("flow_bwd_{p:05}.vseg")), b)?;
        }
        for (t, lr) in &self.long_range {
            for (p, (f, b)) in lr.forward.iter().zip(&lr.backward).enumerate() {
                write_tensor(flow_dir.join(format!("flow_fwd_t{t}_{p:05}.vseg")), f)?;
                write_tensor(flow_dir.join(format!("flow_bwd_t{t}_{p:05}.vseg")), b)?;
            }
        }
        if let Some(frames) = &self.frames {
            let d = mkdir("frames")?;
            for (p, t) in frames.iter().enumerate() {
                write_tensor(d.join(format!("frame_{p:05}.vseg")), t)?;
            }
        }
        if let Some(gt) = &self.gt_masks {
            let d = mkdir("gt")?;
            for (p, m) in gt.iter().enumerate() {
                write_mask_image(d.join(format!("gt_{p:05}.pgm")), m)?;
            }
        }
        Ok(())
    }
}

/// Returns indexed file names `<prefix><digits>.<ext>` in `dir`, sorted by index.
pub fn indexed_files(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(usize, std::path::PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(prefix) else {
            continue;
        };
        let Some(digits) = rest.strip_suffix(ext).and_then(|r| r.strip_suffix('.')) else {
            continue;
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        out.push((digits.parse().expect("digits"), entry.path()));
    }
    out.sort();
    Ok(out)
}

fn dir_has(dir: &Path, prefix: &str) -> Result<bool> {
    Ok(!indexed_files(dir, prefix, "vseg")?.is_empty())
}

fn check_contiguous(dir: &Path, prefix: &str, indices: &[usize], expected: Option<usize>) -> Result<()> {
    let n = expected.unwrap_or(indices.len());
    if indices.len() != n || indices.iter().enumerate().any(|(k, &i)| k != i) {
        return Err(Error::MissingInput(format!(
            "expected {prefix}00000 .. {prefix}{:05} in {}, found {} files",
            n.saturating_sub(1),
            dir.display(),
            indices.len()
        )));
    }
    Ok(())
}

fn read_sequence(dir: &Path, prefix: &str, expected: Option<usize>) -> Result<Vec<Tensor>> {
    let files = indexed_files(dir, prefix, "vseg")?;
    let indices: Vec<usize> = files.iter().map(|(i, _)| *i).collect();
    check_contiguous(dir, prefix, &indices, expected)?;
    files.iter().map(|(_, p)| read_tensor(p)).collect()
}

fn read_masks(dir: &Path, n: usize) -> Result<Vec<BinaryMask>> {
    let mut files = indexed_files(dir, "gt_", "pgm")?;
    if files.is_empty() {
        files = indexed_files(dir, "gt_", "vseg")?;
    }
    let indices: Vec<usize> = files.iter().map(|(i, _)| *i).collect();
    check_contiguous(dir, "gt_", &indices, Some(n))?;
    files.iter().map(|(_, p)| read_mask(p)).collect()
}
