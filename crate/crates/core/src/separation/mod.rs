//! Time-frequency masking front-end for the pipelined system.
//!
//! A 1024-point Hann STFT with 75% overlap, the oracle ideal ratio mask, a
//! small learned mask estimator ([`masknet`]), mask application with the
//! mixture phase, and SI-SNR.

pub mod masknet;

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::hann;
use crate::io::rawmat;
use crate::matrix::Matrix;

pub use masknet::{
    learned_mask, train_masknet, MaskExample, MaskModel, MaskNet, MaskNetConfig, MaskTrainReport,
};

pub const STFT_SIZE: usize = 1024;
pub const STFT_HOP: usize = 256;
pub const NUM_BINS: usize = STFT_SIZE / 2 + 1;
/// Reported SI-SNR never exceeds this many dB.
pub const SI_SNR_CAP_DB: f64 = 60.0;
const IRM_EPS: f64 = 1e-10;

/// Complex STFT of a real signal, `frames x NUM_BINS`, together with the
/// signal length it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub num_samples: usize,
    pub bins: Vec<Complex<f64>>,
}

/// Frames for a centred STFT: the signal is padded by half a window on the
/// left and up to a whole hop grid on the right.
pub fn stft_frames(num_samples: usize) -> usize {
    1 + num_samples.div_ceil(STFT_HOP)
}

pub fn stft(signal: &[f32]) -> Result<Spectrogram> {
    if signal.is_empty() {
        return Err(Error::Empty("signal"));
    }
    let frames = stft_frames(signal.len());
    let half = STFT_SIZE / 2;
    let window = hann(STFT_SIZE);
    let fft = FftPlanner::new().plan_fft_forward(STFT_SIZE);
    let mut bins = Vec::with_capacity(frames * NUM_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_SIZE];
    for f in 0..frames {
        for (i, slot) in buf.iter_mut().enumerate() {
            let pos = (f * STFT_HOP + i) as isize - half as isize;
            let s = if pos >= 0 && (pos as usize) < signal.len() {
                signal[pos as usize] as f64
            } else {
                0.0
            };
            *slot = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..NUM_BINS]);
    }
    Ok(Spectrogram {
        frames,
        num_samples: signal.len(),
        bins,
    })
}

/// Weighted overlap-add inverse: each output sample is divided by the sum
/// of squared windows covering it.
pub fn istft(spec: &Spectrogram) -> Vec<f32> {
    let half = STFT_SIZE / 2;
    let window = hann(STFT_SIZE);
    let ifft = FftPlanner::new().plan_fft_inverse(STFT_SIZE);
    let padded = (spec.frames - 1) * STFT_HOP + STFT_SIZE;
    let mut acc = vec![0.0f64; padded];
    let mut norm = vec![0.0f64; padded];
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_SIZE];
    for f in 0..spec.frames {
        let row = &spec.bins[f * NUM_BINS..(f + 1) * NUM_BINS];
        buf[..NUM_BINS].copy_from_slice(row);
        for k in 1..STFT_SIZE - NUM_BINS + 1 {
            buf[STFT_SIZE - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        for i in 0..STFT_SIZE {
            let w = window[i];
            acc[f * STFT_HOP + i] += buf[i].re / STFT_SIZE as f64 * w;
            norm[f * STFT_HOP + i] += w * w;
        }
    }
    (0..spec.num_samples)
        .map(|n| {
            let (a, w) = (acc[n + half], norm[n + half]);
            if w > 1e-12 {
                (a / w) as f32
            } else {
                0.0
            }
        })
        .collect()
}

impl Spectrogram {
    pub fn magnitude(&self) -> Matrix {
        Matrix::from_vec(self.frames, NUM_BINS, self.bins.iter().map(|c| c.norm() as f32).collect())
    }

    /// `ln(max(|X|², floor))` per cell.
    pub fn log_power(&self) -> Matrix {
        let floor = crate::features::LOG_FLOOR;
        Matrix::from_vec(
            self.frames,
            NUM_BINS,
            self.bins.iter().map(|c| c.norm_sqr().max(floor).ln() as f32).collect(),
        )
    }
}

/// Mask values over the STFT grid, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMask(Matrix);

impl TfMask {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() != NUM_BINS {
            return Err(Error::shape("TfMask", &m.shape(), &[m.rows(), NUM_BINS]));
        }
        if let Some(v) = m.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self(m))
    }

    pub fn filled(frames: usize, value: f32) -> Self {
        Self(Matrix::filled(frames, NUM_BINS, value.clamp(0.0, 1.0)))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        rawmat::write(path, rawmat::Magic::Mask, &self.0)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::new(rawmat::read(path, rawmat::Magic::Mask)?)
    }
}

/// `|S_t| / (|S_t| + |S_i| + ε)` per cell.
pub fn oracle_irm(target: &[f32], interferer_scaled: &[f32]) -> Result<TfMask> {
    if target.len() != interferer_scaled.len() {
        return Err(Error::Length(format!(
            "target has {} samples, interferer {}",
            target.len(),
            interferer_scaled.len()
        )));
    }
    let (st, si) = (stft(target)?, stft(interferer_scaled)?);
    let values = st
        .bins
        .iter()
        .zip(&si.bins)
        .map(|(a, b)| {
            let (a, b) = (a.norm(), b.norm());
            (a / (a + b + IRM_EPS)) as f32
        })
        .collect();
    Ok(TfMask(Matrix::from_vec(st.frames, NUM_BINS, values)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Oracle,
    Learned,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Oracle => "oracle",
            Provenance::Learned => "learned",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedUtterance {
    pub audio: Vec<f32>,
    pub provenance: Provenance,
}

/// Scales the mixture STFT by `mask` (keeping the mixture phase) and
/// resynthesizes.
pub fn apply_mask(mixture: &[f32], mask: &TfMask, provenance: Provenance) -> Result<SeparatedUtterance> {
    let mut spec = stft(mixture)?;
    if mask.0.rows() != spec.frames {
        return Err(Error::shape("apply_mask", &mask.0.shape(), &[spec.frames, NUM_BINS]));
    }
    for (c, &m) in spec.bins.iter_mut().zip(mask.0.as_slice()) {
        *c *= m as f64;
    }
    Ok(SeparatedUtterance {
        audio: istft(&spec),
        provenance,
    })
}

/// Scale-invariant SNR in dB, capped at [`SI_SNR_CAP_DB`]. Both signals are
/// made zero-mean first.
pub fn si_snr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Length(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let centred = |x: &[f32]| {
        let m = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|&v| v as f64 - m).collect::<Vec<f64>>()
    };
    let (r, e) = (centred(reference), centred(estimate));
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::ZeroEnergy("SI-SNR reference"));
    }
    if e.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroEnergy("SI-SNR estimate"));
    }
    let alpha = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (a, b) in r.iter().zip(&e) {
        let s = alpha * a;
        target += s * s;
        noise += (b - s) * (b - s);
    }
    Ok((10.0 * (target / noise).log10()).min(SI_SNR_CAP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use rand::Rng;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut r = util::rng(seed);
        (0..n).map(|_| r.random_range(-0.5f32..0.5)).collect()
    }

    fn rms(a: &[f32], b: &[f32]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn frame_count() {
        assert_eq!(stft_frames(1), 2);
        assert_eq!(stft_frames(256), 2);
        assert_eq!(stft_frames(257), 3);
        assert_eq!(stft(&[0.0; 1000]).unwrap().frames, 5);
    }

    #[test]
    fn round_trip_is_transparent() {
        for (n, seed) in [(4096, 1), (5000, 2), (16_001, 3)] {
            let x = noise(n, seed);
            let y = istft(&stft(&x).unwrap());
            assert_eq!(y.len(), n);
            assert!(rms(&x, &y) < 1e-4, "n={n}: {}", rms(&x, &y));
        }
    }

    #[test]
    fn irm_edge_cases() {
        let t = noise(3000, 4);
        let zero = vec![0.0; 3000];
        let m = oracle_irm(&t, &zero).unwrap();
        let mag = stft(&t).unwrap().magnitude();
        for (v, a) in m.matrix().as_slice().iter().zip(mag.as_slice()) {
            if *a > 1e-6 {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
        let m = oracle_irm(&zero, &t).unwrap();
        assert!(m.matrix().as_slice().iter().all(|&v| v < 1e-6));
        let m = oracle_irm(&t, &noise(3000, 5)).unwrap();
        assert!(m.matrix().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(oracle_irm(&t, &zero[..10]).is_err());
    }

    #[test]
    fn masks_of_ones_and_zeros() {
        let x = noise(4000, 6);
        let frames = stft_frames(x.len());
        let y = apply_mask(&x, &TfMask::filled(frames, 1.0), Provenance::Oracle).unwrap();
        assert!(rms(&x, &y.audio) < 1e-4);
        let y = apply_mask(&x, &TfMask::filled(frames, 0.0), Provenance::Oracle).unwrap();
        assert!(y.audio.iter().all(|&v| v == 0.0));
        assert!(apply_mask(&x, &TfMask::filled(frames + 1, 1.0), Provenance::Oracle).is_err());
    }

    #[test]
    fn si_snr_definition() {
        let r = noise(2000, 7);
        assert_eq!(si_snr(&r, &r).unwrap(), SI_SNR_CAP_DB);
        let doubled: Vec<f32> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&r, &doubled).unwrap(), SI_SNR_CAP_DB);
        // sin and cos over whole periods are orthogonal
        let n = 1600;
        let s: Vec<f32> = (0..n).map(|i| (std::f64::consts::TAU * 5.0 * i as f64 / n as f64).sin() as f32).collect();
        let c: Vec<f32> = (0..n).map(|i| (std::f64::consts::TAU * 5.0 * i as f64 / n as f64).cos() as f32).collect();
        assert!(si_snr(&s, &c).unwrap() < -100.0);
        assert!(si_snr(&vec![0.0; 10], &r[..10]).is_err());
    }

    #[test]
    fn si_snr_scale_invariance_is_exact() {
        let r = noise(3000, 8);
        let e: Vec<f32> = r.iter().zip(noise(3000, 9)).map(|(a, b)| a + 0.5 * b).collect();
        let base = si_snr(&r, &e).unwrap();
        for a in [2.0f32, -1.0, 0.25, -8.0] {
            let scaled: Vec<f32> = e.iter().map(|v| a * v).collect();
            assert_eq!(si_snr(&r, &scaled).unwrap(), base);
        }
    }

    #[test]
    fn si_snr_rejects_silent_signals() {
        let r = noise(400, 3);
        assert!(si_snr(&r, &[0.0; 400]).is_err());
        assert!(si_snr(&[0.25; 400], &r).is_err());
        assert!(si_snr(&r, &[0.0; 399]).is_err());
    }

    #[test]
    fn oracle_mask_improves_zero_db_mixture() {
        let n = 8000;
        let t: Vec<f32> = (0..n).map(|i| 0.3 * (i as f32 * 0.13).sin()).collect();
        let i: Vec<f32> = (0..n).map(|k| 0.3 * (k as f32 * 0.41).sin()).collect();
        let mix: Vec<f32> = t.iter().zip(&i).map(|(a, b)| a + b).collect();
        let mask = oracle_irm(&t, &i).unwrap();
        let enhanced = apply_mask(&mix, &mask, Provenance::Oracle).unwrap();
        assert!(si_snr(&t, &enhanced.audio).unwrap() > si_snr(&t, &mix).unwrap() + 10.0);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.avsm");
        let m = oracle_irm(&noise(2000, 10), &noise(2000, 11)).unwrap();
        m.write(&p).unwrap();
        assert_eq!(TfMask::read(&p).unwrap(), m);
    }
}
