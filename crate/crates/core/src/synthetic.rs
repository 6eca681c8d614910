//! Synthetic subjects with planted sex and cognition signals.
//!
//! Each subject is smooth AR(1) noise plus two planted signals:
//!
//! * a blob whose mean amplitude sign encodes sex, and
//! * two disjoint ROIs carrying low-frequency time courses `s1`, `s2` whose
//!   lag-zero Pearson correlation is the raw cognition score.
//!
//! The correlation is recovered exactly by averaging each ROI, projecting onto
//! the low frequency band and correlating. An optional per-ROI
//! high-frequency nuisance course (`SyntheticSpec::nuisance`) can be mixed in;
//! it is separable from the signal only by its temporal frequency.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::check_dims;
use crate::error::{BrainError, Result};
use crate::volume::Volume4D;

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub frames_total: usize,
    pub seed: u64,
    /// Amplitude of the planted ROI time courses.
    pub signal_amp: f64,
    /// Amplitude of the background noise field.
    pub noise_amp: f64,
    /// Range of the per-ROI high-frequency nuisance amplitude (relative to the signal); off by default.
    pub nuisance: (f64, f64),
    /// Mean offset of the sex blob.
    pub blob_amp: f64,
    /// AR(1) coefficient of the temporal noise smoothing.
    pub ar_coef: f64,
}

impl SyntheticSpec {
    pub fn new(n_subjects: usize, dims: [usize; 3], frames_total: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_subjects,
            dims,
            frames_total,
            seed,
            signal_amp: 3.0,
            noise_amp: 0.3,
            nuisance: (0.0, 0.0),
            blob_amp: 0.5,
            ar_coef: 0.5,
        }
    }
}

/// One generated subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Z-score normalized volume.
    pub volume: Volume4D,
    pub sex: u8,
    /// Cognition target, z-scored across the dataset.
    pub cognition: f64,
    /// Pearson correlation of the planted ROI signals before z-scoring.
    pub cognition_raw: f64,
}

/// Voxel sets shared by every subject of a given geometry.
#[derive(Clone, Debug)]
pub struct Layout {
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
    pub roi1: Vec<usize>,
    pub roi2: Vec<usize>,
    pub blob: Vec<usize>,
}

fn boxed(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<usize> {
    let mut out = Vec::new();
    for a in lo[0]..hi[0] {
        for b in lo[1]..hi[1] {
            for c in lo[2]..hi[2] {
                out.push((a * dims[1] + b) * dims[2] + c);
            }
        }
    }
    out
}

impl Layout {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        check_dims(dims)?;
        let [h, w, d] = dims;
        // Both ROIs lie inside the encoder cell just below the volume centre.
        let c0 = dims.map(|e| e / 2 - 16);
        let roi1 = boxed(
            dims,
            [c0[0] + 7, c0[1] + 7, c0[2] + 7],
            [c0[0] + 11, c0[1] + 15, c0[2] + 15],
        );
        let roi2 = boxed(
            dims,
            [c0[0] + 11, c0[1] + 7, c0[2] + 7],
            [c0[0] + 15, c0[1] + 15, c0[2] + 15],
        );
        let c1 = dims.map(|e| e / 2);
        let blob = boxed(dims, c1.map(|c| c + 3), c1.map(|c| c + 11));

        let centre = dims.map(|e| (e as f64 - 1.0) / 2.0);
        let radii = [
            15.0 / 32.0 * h as f64,
            15.0 / 32.0 * w as f64,
            14.0 / 32.0 * d as f64,
        ];
        let mut mask = vec![false; h * w * d];
        for a in 0..h {
            for b in 0..w {
                for c in 0..d {
                    let q = [a, b, c]
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| ((x as f64 - centre[i]) / radii[i]).powi(2))
                        .sum::<f64>();
                    mask[(a * w + b) * d + c] = q <= 1.0;
                }
            }
        }
        for &i in roi1.iter().chain(&roi2).chain(&blob) {
            mask[i] = true;
        }
        Ok(Layout {
            dims,
            mask,
            roi1,
            roi2,
            blob,
        })
    }
}

/// Highest frequency (in cycles per recording) of the signal band.
pub fn signal_band(frames: usize) -> Vec<usize> {
    (1..=(frames / 8).max(1)).collect()
}

/// Frequencies of the nuisance band, well above the signal band.
pub fn nuisance_band(frames: usize) -> Vec<usize> {
    let lo = (5 * frames).div_ceil(16).max(signal_band(frames).len() + 1);
    (lo..=frames / 2).collect()
}

/// Random real combination of DFT basis vectors at the given frequencies.
fn band_signal(frames: usize, freqs: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut s = vec![0.0; frames];
    for &f in freqs {
        let (ca, cb): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        for (t, v) in s.iter_mut().enumerate() {
            let phase = 2.0 * PI * (f * t) as f64 / frames as f64;
            *v += ca * phase.cos();
            if 2 * f != frames {
                *v += cb * phase.sin();
            }
        }
    }
    s
}

/// Shifts to zero mean and scales to unit (population) variance.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Periodic 3-tap box filter applied along every axis, `passes` times.
fn smooth(field: &mut [f64], dims: [usize; 3], passes: usize) {
    let [h, w, d] = dims;
    let strides = [w * d, d, 1];
    let mut tmp = vec![0.0; field.len()];
    for _ in 0..passes {
        for axis in 0..3 {
            let n = dims[axis];
            let s = strides[axis];
            for a in 0..h {
                for b in 0..w {
                    for c in 0..d {
                        let i = (a * w + b) * d + c;
                        let pos = [a, b, c][axis];
                        let prev = i - pos * s + ((pos + n - 1) % n) * s;
                        let next = i - pos * s + ((pos + 1) % n) * s;
                        tmp[i] = (field[prev] + field[i] + field[next]) / 3.0;
                    }
                }
            }
            field.copy_from_slice(&tmp);
        }
    }
}

struct Raw {
    data: Vec<f64>,
    cognition_raw: f64,
}

fn generate_one(spec: &SyntheticSpec, layout: &Layout, sex: u8, rng: &mut ChaCha8Rng) -> Raw {
    let t_total = spec.frames_total;
    let vox = layout.mask.len();

    let mut white: Vec<f64> = (0..t_total * vox).map(|_| rng.sample(StandardNormal)).collect();
    for frame in white.chunks_mut(vox) {
        smooth(frame, layout.dims, 2);
    }
    let sd = {
        let n = white.len() as f64;
        let m = white.iter().sum::<f64>() / n;
        (white.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let innov = (1.0 - spec.ar_coef * spec.ar_coef).sqrt();
    let mut data = vec![0.0; t_total * vox];
    for t in 0..t_total {
        for i in 0..vox {
            let wv = white[t * vox + i] / sd;
            data[t * vox + i] = if t == 0 {
                wv
            } else {
                spec.ar_coef * data[(t - 1) * vox + i] + innov * wv
            };
        }
    }
    for v in data.iter_mut() {
        *v *= spec.noise_amp;
    }
    // The noise contributes nothing to either ROI mean.
    for roi in [&layout.roi1, &layout.roi2] {
        for t in 0..t_total {
            let frame = &mut data[t * vox..(t + 1) * vox];
            let m = roi.iter().map(|&i| frame[i]).sum::<f64>() / roi.len() as f64;
            for &i in roi {
                frame[i] -= m;
            }
        }
    }

    let low = signal_band(t_total);
    let high = nuisance_band(t_total);
    let rho: f64 = rng.gen_range(-0.9..0.9);
    let s1 = standardize(&band_signal(t_total, &low, rng));
    let e = standardize(&band_signal(t_total, &low, rng));
    let mix: Vec<f64> = s1
        .iter()
        .zip(&e)
        .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
        .collect();
    let s2 = standardize(&mix);
    let cognition_raw = s1.iter().zip(&s2).map(|(a, b)| a * b).sum::<f64>() / t_total as f64;

    let mut nuisance = || -> Vec<f64> {
        if high.is_empty() || spec.nuisance.1 <= 0.0 {
            return vec![0.0; t_total];
        }
        let amp = if spec.nuisance.1 > spec.nuisance.0 {
            rng.gen_range(spec.nuisance.0..spec.nuisance.1)
        } else {
            spec.nuisance.0
        };
        standardize(&band_signal(t_total, &high, rng))
            .into_iter()
            .map(|v| v * amp)
            .collect()
    };
    let n1 = nuisance();
    let n2 = nuisance();

    let blob = if sex == 1 { spec.blob_amp } else { -spec.blob_amp };
    for t in 0..t_total {
        let frame = &mut data[t * vox..(t + 1) * vox];
        for &i in &layout.roi1 {
            frame[i] += spec.signal_amp * (s1[t] + n1[t]);
        }
        for &i in &layout.roi2 {
            frame[i] += spec.signal_amp * (s2[t] + n2[t]);
        }
        for &i in &layout.blob {
            frame[i] += blob;
        }
    }
    Raw {
        data,
        cognition_raw,
    }
}

/// Generates a normalized synthetic dataset. Identical specs give identical output.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Subject>> {
    let layout = Layout::new(spec.dims)?;
    if spec.frames_total < 8 {
        return Err(BrainError::Config(format!(
            "frames_total = {} is too short; at least 8 frames are needed to separate the signal and nuisance bands",
            spec.frames_total
        )));
    }
    if spec.n_subjects == 0 {
        return Err(BrainError::Config("n_subjects must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sexes: Vec<u8> = (0..spec.n_subjects).map(|i| (i % 2) as u8).collect();
    sexes.shuffle(&mut rng);
    let seeds: Vec<u64> = (0..spec.n_subjects).map(|_| rng.gen()).collect();

    let mut raws = Vec::with_capacity(spec.n_subjects);
    for (i, (&sex, &s)) in sexes.iter().zip(&seeds).enumerate() {
        let mut sub_rng = ChaCha8Rng::seed_from_u64(s);
        let raw = generate_one(spec, &layout, sex, &mut sub_rng);
        let vol = Volume4D::new(spec.frames_total, spec.dims, raw.data, layout.mask.clone())?
            .zscore_normalize()?;
        raws.push((format!("sub-{i:04}"), vol, sex, raw.cognition_raw));
    }
    let scores: Vec<f64> = raws.iter().map(|r| r.3).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sd = (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(raws
        .into_iter()
        .map(|(id, volume, sex, raw)| Subject {
            id,
            volume,
            sex,
            cognition: if sd > 0.0 { (raw - mean) / sd } else { 0.0 },
            cognition_raw: raw,
        })
        .collect())
}
