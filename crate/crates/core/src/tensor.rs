//! VSEG1 tensor container and PGM mask images.
//!
//! VSEG1 layout, all little-endian:
//! - bytes 0..5: ASCII `VSEG1`
//! - u32 `ndim`
//! - `ndim` x u32 dims
//! - `product(dims)` x f32 payload, row-major

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segmentation::BinaryMask;

pub const MAGIC: &[u8; 5] = b"VSEG1";

/// Dense row-major f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::PayloadLength {
                expected: expected * 4,
                found: data.len() * 4,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Checks that the tensor is `[H, W, C]` and returns `(H, W, C)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                found: self.shape.clone(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut cursor = MAGIC.len();
        let mut next_u32 = || -> Result<u32> {
            let end = cursor + 4;
            let chunk = bytes.get(cursor..end).ok_or(Error::PayloadLength {
                expected: end,
                found: bytes.len(),
            })?;
            cursor = end;
            Ok(u32::from_le_bytes(chunk.try_into().expect("4-byte chunk")))
        };
        let ndim = next_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(next_u32()? as usize);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(shape));
        }
        let header = MAGIC.len() + 4 + 4 * ndim;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(shape.clone()))?;
        let expected = numel * 4;
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor { shape, data };
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit binary PGM (P5): foreground 255, background 0.
pub fn write_mask_image(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(mask.len() + 32);
    write!(out, "P5\n{} {}\n255\n", mask.width(), mask.height()).expect("write to vec");
    out.extend(mask.values().iter().map(|&v| if v { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM (P5, maxval <= 255), thresholding at half of maxval.
pub fn parse_pgm_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pgm("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Pgm("expected P5 magic".into()));
    }
    let parse = |s: String| -> Result<usize> { s.parse().map_err(|_| Error::Pgm(format!("bad header field {s:?}"))) };
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Pgm(format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte separates header and raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < width * height {
        return Err(Error::PayloadLength {
            expected: width * height,
            found: raster.len(),
        });
    }
    let values = raster[..width * height]
        .iter()
        .map(|&b| b as f32 / maxval as f32 >= 0.5)
        .collect();
    BinaryMask::new(height, width, values)
}

/// Loads a ground-truth mask from a PGM or VSEG1 file (`[H, W]` or `[H, W, 1]`),
/// thresholding at 0.5.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        let t = Tensor::from_bytes(&bytes)?;
        let (h, w) = match t.shape() {
            [h, w] | [h, w, 1] => (*h, *w),
            other => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, 0],
                    found: other.to_vec(),
                })
            }
        };
        BinaryMask::new(h, w, t.data().iter().map(|&v| v >= 0.5).collect())
    } else {
        parse_pgm_mask(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dims: &[u32]) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn identity_from_raw_bytes() {
        let mut b = header(&[2, 2]);
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let t = Tensor::from_bytes(&b).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn flow_shape() {
        let mut b = header(&[4, 4, 2]);
        for i in 0..32 {
            b.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let t = Tensor::from_bytes(&b).unwrap();
        assert_eq!(t.dims3().unwrap(), (4, 4, 2));
    }

    #[test]
    fn short_payload_is_rejected() {
        let mut b = header(&[2, 2]);
        b.extend_from_slice(&1.0f32.to_le_bytes());
        let err = Tensor::from_bytes(&b).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn long_payload_is_rejected() {
        let mut b = header(&[1]);
        b.extend_from_slice(&[0u8; 8]);
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::PayloadLength { .. })));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(Tensor::from_bytes(b"VSEG2\0\0\0\0"), Err(Error::BadMagic)));
        assert!(matches!(Tensor::from_bytes(b"VS"), Err(Error::BadMagic)));
    }

    #[test]
    fn non_finite_reports_index() {
        let mut b = header(&[3]);
        for v in [0.0f32, 1.0, f32::NAN] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match Tensor::from_bytes(&b) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scalar_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vseg");
        let t = Tensor::new(vec![1, 1], vec![3.5]).unwrap();
        write_tensor(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes, t.to_bytes());
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn unwritable_path() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = write_tensor("/nonexistent-dir/x/y.vseg", &t).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn pgm_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (4, 4, vec![false; 16], vec![0u8; 16]),
            (2, 2, vec![true; 4], vec![255u8; 4]),
            (2, 2, vec![true, false, false, true], vec![255, 0, 0, 255]),
        ];
        for (i, (h, w, vals, raster)) in cases.into_iter().enumerate() {
            let p = dir.path().join(format!("m{i}.pgm"));
            let m = BinaryMask::new(h, w, vals).unwrap();
            write_mask_image(&p, &m).unwrap();
            let bytes = fs::read(&p).unwrap();
            let head = format!("P5\n{w} {h}\n255\n");
            assert_eq!(&bytes[..head.len()], head.as_bytes());
            assert_eq!(&bytes[head.len()..], &raster[..]);
            assert_eq!(read_mask(&p).unwrap(), m);
        }
    }

    #[test]
    fn pgm_with_comment_and_low_maxval() {
        let mut b = b"P5\n# made by hand\n2 1\n1\n".to_vec();
        b.extend_from_slice(&[1, 0]);
        let m = parse_pgm_mask(&b).unwrap();
        assert_eq!(m.values(), &[true, false]);
    }

    #[test]
    fn gt_from_vseg_is_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.vseg");
        let t = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_mask(&p).unwrap().values(), &[false, true, true]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let n: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
