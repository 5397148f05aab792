//! Acoustic and visual front-end: 40-bin log-mel filterbanks at 100 frames/s
//! and linear-interpolation upsampling of the 25 fps visual stream onto the
//! acoustic frame clock.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::rawmat;
use crate::matrix::Matrix;
use crate::{FFT_SIZE, NUM_MEL_BINS, SAMPLES_PER_HOP, SAMPLES_PER_WINDOW, SAMPLE_RATE};

pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 8000.0;
const MIN_VARIANCE: f32 = 1e-8;

/// Number of 10 ms frames produced for `num_samples` samples.
pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < SAMPLES_PER_WINDOW {
        0
    } else {
        1 + (num_samples - SAMPLES_PER_WINDOW) / SAMPLES_PER_HOP
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel filterbank extractor. Holds the FFT plan and filter weights so
/// repeated calls do not rebuild them.
pub struct LogMel {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per filter: first bin index and weights for consecutive bins.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Default for LogMel {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMel {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let num_bins = FFT_SIZE / 2 + 1;
        let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
        let edges: Vec<f64> = (0..NUM_MEL_BINS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MEL_BINS + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let filters = (0..NUM_MEL_BINS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..num_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let first = weights.first().map_or(0, |&(k, _)| k);
                (first, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        Self {
            fft,
            window: hann(SAMPLES_PER_WINDOW),
            filters,
        }
    }

    /// `T x 40` log-mel energies, `T = 1 + (N - 640) / 160`.
    pub fn compute(&self, audio: &[f32]) -> Result<Matrix> {
        if audio.len() < SAMPLES_PER_WINDOW {
            return Err(Error::AudioTooShort {
                got: audio.len(),
                min: SAMPLES_PER_WINDOW,
            });
        }
        let t = num_frames(audio.len());
        let mut out = Matrix::zeros(t, NUM_MEL_BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; FFT_SIZE / 2 + 1];
        for f in 0..t {
            let frame = &audio[f * SAMPLES_PER_HOP..f * SAMPLES_PER_HOP + SAMPLES_PER_WINDOW];
            let mean = frame.iter().map(|&s| s as f64).sum::<f64>() / frame.len() as f64;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < SAMPLES_PER_WINDOW {
                    Complex::new((frame[i] as f64 - mean) * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = out.row_mut(f);
            for (m, (first, weights)) in self.filters.iter().enumerate() {
                let e: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * power[first + j])
                    .sum();
                row[m] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper around [`LogMel::compute`].
pub fn logmel(audio: &[f32]) -> Result<Matrix> {
    LogMel::new().compute(audio)
}

/// Resamples a visual stream with frames every `src_period_ms` onto a grid
/// with period `dst_period_ms`, by linear interpolation between bracketing
/// source frames and edge replication past the last one.
pub fn resample_visual(visual: &Matrix, src_period_ms: f64, dst_period_ms: f64, target_len: usize) -> Result<Matrix> {
    if target_len == 0 {
        return Err(Error::Length("target length must be positive".into()));
    }
    if visual.rows() < 2 {
        return Err(Error::Length(format!(
            "need at least 2 source visual frames, got {}",
            visual.rows()
        )));
    }
    let last = visual.rows() - 1;
    let mut out = Matrix::zeros(target_len, visual.cols());
    for t in 0..target_len {
        let pos = t as f64 * dst_period_ms / src_period_ms;
        let i0 = pos.floor() as usize;
        let row = out.row_mut(t);
        if i0 >= last {
            row.copy_from_slice(visual.row(last));
            continue;
        }
        let w = pos - i0 as f64;
        let (a, b) = (visual.row(i0), visual.row(i0 + 1));
        for d in 0..row.len() {
            row[d] = ((1.0 - w) * a[d] as f64 + w * b[d] as f64) as f32;
        }
    }
    Ok(out)
}

/// 25 fps -> 100 fps: output frame `t` sits at `10 t` ms.
pub fn upsample_visual(visual: &Matrix, target_len: usize) -> Result<Matrix> {
    resample_visual(visual, 40.0, 10.0, target_len)
}

/// Per-dimension mean and variance, estimated on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn estimate<'a>(frames: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in frames {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            } else if m.cols() != sum.len() {
                return Err(Error::shape("NormStats::estimate", &[sum.len()], &[m.cols()]));
            }
            for row in m.row_iter() {
                for (d, &v) in row.iter().enumerate() {
                    sum[d] += v as f64;
                    sq[d] += (v as f64) * (v as f64);
                }
            }
            count += m.rows();
        }
        if count == 0 {
            return Err(Error::Empty("normalization frames"));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let var = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n) - (s / n).powi(2)).max(0.0) as f32)
            .collect();
        Ok(Self { mean, var })
    }

    fn std(&self, d: usize) -> f32 {
        self.var[d].max(MIN_VARIANCE).sqrt()
    }

    pub fn normalize(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.dim() {
            return Err(Error::shape("normalize", &frames.shape(), &[self.dim()]));
        }
        if let Some(d) = self.var.iter().position(|&v| v < MIN_VARIANCE) {
            log::warn!("feature dimension {d} has variance below {MIN_VARIANCE}; clamping");
        }
        let mut out = frames.clone();
        let cols = out.cols();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let d = i % cols;
            *v = (*v - self.mean[d]) / self.std(d);
        }
        Ok(out)
    }

    pub fn denormalize(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.dim() {
            return Err(Error::shape("denormalize", &frames.shape(), &[self.dim()]));
        }
        let mut out = frames.clone();
        let cols = out.cols();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let d = i % cols;
            *v = *v * self.std(d) + self.mean[d];
        }
        Ok(out)
    }
}

pub fn save_features(path: &Path, frames: &Matrix) -> Result<()> {
    rawmat::write(path, rawmat::Magic::Feature, frames)
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    rawmat::read(path, rawmat::Magic::Feature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn silence_hits_floor_everywhere() {
        let m = logmel(&vec![0.0; 16000]).unwrap();
        assert_eq!(m.shape(), [97, 40]);
        let floor = (1e-10f64).ln() as f32;
        assert!(m.as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn boundary_lengths() {
        assert_eq!(logmel(&vec![0.1; 640]).unwrap().rows(), 1);
        assert_eq!(logmel(&vec![0.1; 799]).unwrap().rows(), 1);
        assert_eq!(logmel(&vec![0.1; 800]).unwrap().rows(), 2);
        match logmel(&vec![0.0; 639]) {
            Err(Error::AudioTooShort { got: 639, min: 640 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tone_lands_in_nearest_filter() {
        // independent oracle: 42 HTK-mel points from 20 to 8000 Hz, centers
        // are points 1..=40
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let (lo, hi) = (mel(20.0), mel(8000.0));
        let centers: Vec<f64> = (1..=40)
            .map(|i| {
                let m = lo + (hi - lo) * i as f64 / 41.0;
                700.0 * (10f64.powf(m / 2595.0) - 1.0)
            })
            .collect();
        let nearest = (0..40)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        let audio: Vec<f32> = (0..16000)
            .map(|n| (std::f64::consts::TAU * 1000.0 * n as f64 / 16000.0).sin() as f32)
            .collect();
        let m = logmel(&audio).unwrap();
        for row in m.row_iter() {
            let argmax = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn hop_shift_covariance() {
        let audio: Vec<f32> = (0..4000).map(|n| ((n * 7919) % 211) as f32 / 211.0 - 0.5).collect();
        let a = logmel(&audio).unwrap();
        let b = logmel(&audio[160..]).unwrap();
        assert_eq!(a.rows(), b.rows() + 1);
        for t in 0..b.rows() {
            for (x, y) in a.row(t + 1).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn upsample_weights_and_knots() {
        let v = Matrix::from_rows(&[vec![1.0, -2.0], vec![5.0, 2.0], vec![0.0, 0.0]]);
        let u = upsample_visual(&v, 12).unwrap();
        assert_eq!(u.row(0), v.row(0));
        assert_eq!(u.row(1), &[0.75 * 1.0 + 0.25 * 5.0, 0.75 * -2.0 + 0.25 * 2.0]);
        assert_eq!(u.row(4), v.row(1));
        // past the last source frame: edge replication
        assert_eq!(u.row(11), v.row(2));
        assert!(upsample_visual(&v, 0).is_err());
        assert!(upsample_visual(&Matrix::zeros(1, 2), 4).is_err());
    }

    #[test]
    fn constant_stream_stays_constant() {
        let v = Matrix::filled(7, 3, 0.37);
        let u = upsample_visual(&v, 40).unwrap();
        assert!(u.as_slice().iter().all(|&x| x == 0.37));
    }

    #[test]
    fn normalize_edge_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0]]);
        let stats = NormStats::estimate([&m]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 2.0]);
        // zero variance column is clamped instead of dividing by zero
        let n = stats.normalize(&Matrix::from_rows(&[vec![2.0, 2.0]])).unwrap();
        assert_eq!(n.as_slice(), &[0.0, 0.0]);
        let id = NormStats::identity(2);
        assert_eq!(id.normalize(&m).unwrap(), m);
    }

    proptest! {
        #[test]
        fn upsampling_stays_within_source_bounds(
            vals in proptest::collection::vec(-3.0f32..3.0, 6..30),
            len in 1usize..40,
        ) {
            let rows = vals.len() / 3;
            prop_assume!(rows >= 2);
            let v = Matrix::from_vec(rows, 3, vals[..rows * 3].to_vec());
            let u = upsample_visual(&v, len).unwrap();
            for d in 0..3 {
                let col: Vec<f32> = (0..rows).map(|r| v.get(r, d)).collect();
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                for t in 0..len {
                    prop_assert!(u.get(t, d) >= lo - 1e-6 && u.get(t, d) <= hi + 1e-6);
                }
            }
        }

        #[test]
        fn denormalize_inverts_normalize(
            vals in proptest::collection::vec(-10.0f32..10.0, 8..40),
        ) {
            let rows = vals.len() / 4;
            let m = Matrix::from_vec(rows, 4, vals[..rows * 4].to_vec());
            let stats = NormStats { mean: vec![0.5, -1.0, 2.0, 0.0], var: vec![4.0, 0.25, 1.0, 9.0] };
            let back = stats.denormalize(&stats.normalize(&m).unwrap()).unwrap();
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
            }
        }
    }
}
