//! 4-D volumes, normalization, frame sampling and the binary volume format.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FrameSampling;
use crate::error::{BrainError, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"BMT4VOL1";
pub const HEADER_LEN: usize = 32;

/// A `T x H x W x D` time series of volumes (row-major, frame-major) with a
/// foreground mask shared by all frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume4D {
    frames: usize,
    dims: [usize; 3],
    data: Vec<f64>,
    mask: Vec<bool>,
    /// Index in the source recording of the first frame held here.
    pub tr_index_origin: usize,
}

impl Volume4D {
    pub fn new(frames: usize, dims: [usize; 3], data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let vox: usize = dims.iter().product();
        if frames == 0 || vox == 0 {
            return Err(BrainError::Shape(format!(
                "volume needs at least one frame and voxel, got T={frames}, dims={dims:?}"
            )));
        }
        if data.len() != frames * vox {
            return Err(BrainError::Shape(format!(
                "volume T={frames} dims={dims:?} needs {} values, got {}",
                frames * vox,
                data.len()
            )));
        }
        if mask.len() != vox {
            return Err(BrainError::Shape(format!(
                "mask needs {vox} entries, got {}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(BrainError::Data("mask has no foreground voxel".into()));
        }
        Ok(Volume4D {
            frames,
            dims,
            data,
            mask,
            tr_index_origin: 0,
        })
    }

    /// Volume whose mask covers every voxel.
    pub fn unmasked(frames: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let vox = dims.iter().product();
        Volume4D::new(frames, dims, data, vec![true; vox])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let v = self.voxels();
        &self.data[t * v..(t + 1) * v]
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut v = Volume4D::new(self.frames, self.dims, data, self.mask.clone())?;
        v.tr_index_origin = self.tr_index_origin;
        Ok(v)
    }

    /// Keeps the listed frames, in the given order.
    pub fn select_frames(&self, index: &[usize]) -> Result<Self> {
        let v = self.voxels();
        let mut data = Vec::with_capacity(index.len() * v);
        for &t in index {
            if t >= self.frames {
                return Err(BrainError::Shape(format!(
                    "frame {t} out of range for T={}",
                    self.frames
                )));
            }
            data.extend_from_slice(self.frame(t));
        }
        let mut out = Volume4D::new(index.len(), self.dims, data, self.mask.clone())?;
        out.tr_index_origin = self.tr_index_origin + index.first().copied().unwrap_or(0);
        Ok(out)
    }

    /// Global z-scoring over all foreground voxels of all frames jointly;
    /// background voxels are set to the minimum normalized foreground value.
    pub fn zscore_normalize(&self) -> Result<Self> {
        let v = self.voxels();
        let fg = |i: usize| self.mask[i % v];
        let (mut n, mut sum) = (0usize, 0.0);
        for (i, &x) in self.data.iter().enumerate() {
            if fg(i) {
                n += 1;
                sum += x;
            }
        }
        let mean = sum / n as f64;
        let var = self
            .data
            .iter()
            .enumerate()
            .filter(|(i, _)| fg(*i))
            .map(|(_, &x)| (x - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        if !(var > 0.0) || !var.is_finite() {
            return Err(BrainError::Data(format!(
                "foreground variance is {var}; cannot z-score"
            )));
        }
        let sd = var.sqrt();
        let mut out: Vec<f64> = self.data.iter().map(|&x| (x - mean) / sd).collect();
        let min = out
            .iter()
            .enumerate()
            .filter(|(i, _)| fg(*i))
            .map(|(_, &x)| x)
            .fold(f64::INFINITY, f64::min);
        for (i, x) in out.iter_mut().enumerate() {
            if !fg(i) {
                *x = min;
            }
        }
        self.with_data(out)
    }

    /// Draws `t` frames: a contiguous window at a uniform random offset, or a
    /// sorted random subset. `tr_index_origin` records the first chosen frame.
    pub fn sample_frames(&self, t: usize, mode: FrameSampling, seed: u64) -> Result<Self> {
        if t == 0 || t > self.frames {
            return Err(BrainError::Data(format!(
                "cannot sample {t} frames from a recording of {}",
                self.frames
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index: Vec<usize> = match mode {
            FrameSampling::Window => {
                let offset = rng.gen_range(0..=self.frames - t);
                (offset..offset + t).collect()
            }
            FrameSampling::Subset => {
                let mut idx = sample(&mut rng, self.frames, t).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        self.select_frames(&index)
    }

    /// Serializes to the binary volume format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len() + self.mask.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in [self.frames, self.dims[0], self.dims[1], self.dims[2]] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.tr_index_origin as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.mask.iter().map(|&m| m as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < VOLUME_MAGIC.len() || &bytes[..8] != VOLUME_MAGIC {
            return Err(BrainError::BadMagic {
                path: path.to_path_buf(),
                expected: "BMT4VOL1 volume",
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(BrainError::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as u64;
        let (t, h, w, d, origin) = (word(0), word(1), word(2), word(3), word(4));
        if t == 0 || h == 0 || w == 0 || d == 0 {
            return Err(BrainError::DimMismatch {
                path: path.to_path_buf(),
                msg: format!("header declares T={t} H={h} W={w} D={d}; all must be positive"),
            });
        }
        let vox = h * w * d;
        let expected = HEADER_LEN as u64 + 8 * t * vox + vox;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(BrainError::Truncated {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        if found > expected {
            return Err(BrainError::DimMismatch {
                path: path.to_path_buf(),
                msg: format!(
                    "header declares T={t} H={h} W={w} D={d} ({expected} bytes) but file has {found}"
                ),
            });
        }
        let n = (t * vox) as usize;
        let payload = &bytes[HEADER_LEN..HEADER_LEN + 8 * n];
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut mask = Vec::with_capacity(vox as usize);
        for &b in &bytes[HEADER_LEN + 8 * n..] {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                other => {
                    return Err(BrainError::parse(path, format!("mask byte {other} is not 0 or 1")))
                }
            }
        }
        let mut v = Volume4D::new(t as usize, [h as usize, w as usize, d as usize], data, mask)
            .map_err(|e| BrainError::parse(path, e.to_string()))?;
        v.tr_index_origin = origin as usize;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| BrainError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| BrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BrainError::io(path, e))?;
        Volume4D::from_bytes(&bytes, path)
    }
}
