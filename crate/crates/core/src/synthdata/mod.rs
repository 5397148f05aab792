//! Synthetic audio-visual corpus.
//!
//! Each symbol is rendered as a burst of sinusoids (its audio signature) and
//! as a viseme-class mean vector on a 25 fps visual stream. Several symbols
//! share a viseme class, so the visual stream alone is ambiguous while the
//! audio discriminates every symbol. Frame alignments come straight from the
//! synthesis segment boundaries.

mod bigram;
mod corpus;
mod manifest;
mod mixing;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use bigram::Bigram;
pub use corpus::{build_corpus, CorpusConfig, CorpusInfo};
pub use manifest::{Manifest, MixInfo, Record, RecordKind, Split};
pub use mixing::{measured_snr_db, mix_at_snr, Mixture, MixtureSpec, Snr};

use crate::error::{Error, Result};
use crate::features::num_frames;
use crate::matrix::Matrix;
use crate::util::rng;
use crate::{SAMPLES_PER_HOP, SAMPLES_PER_WINDOW, SAMPLE_RATE, VISUAL_FPS};

const RAMP_SAMPLES: usize = (SAMPLE_RATE as usize) / 100; // 10 ms
const VISUAL_JITTER: f64 = 0.1;
const SAMPLES_PER_VISUAL_FRAME: usize = SAMPLE_RATE as usize / VISUAL_FPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSet {
    pub symbols: Vec<String>,
    /// symbol index -> viseme class
    pub viseme_map: Vec<usize>,
    /// symbol index -> (frequency Hz, amplitude) components
    pub audio_signature: Vec<Vec<(f64, f64)>>,
    /// Inclusive per-symbol duration range in milliseconds.
    pub duration_range_ms: (u32, u32),
    /// viseme class -> mean visual feature vector
    pub viseme_means: Vec<Vec<f32>>,
}

impl Default for SymbolSet {
    fn default() -> Self {
        Self::standard(12, 6, 8)
    }
}

impl SymbolSet {
    /// Symbols `a`, `b`, ... with log-spaced primary tones between 300 Hz and
    /// 3.6 kHz and a weaker secondary tone a fifth above. Consecutive symbols
    /// share a viseme class (`i * num_visemes / num_symbols`).
    pub fn standard(num_symbols: usize, num_visemes: usize, visual_dim: usize) -> Self {
        assert!(num_symbols >= 2 && num_visemes >= 1 && num_visemes < num_symbols);
        let symbols = (0..num_symbols).map(symbol_name).collect();
        let viseme_map = (0..num_symbols)
            .map(|i| i * num_visemes / num_symbols)
            .collect();
        let (lo, hi) = (300.0f64, 3600.0f64);
        let audio_signature = (0..num_symbols)
            .map(|i| {
                let frac = i as f64 / (num_symbols - 1) as f64;
                let f1 = lo * (hi / lo).powf(frac);
                let mut comps = vec![(f1, 0.15)];
                let f2 = f1 * 1.5;
                if f2 < 7600.0 {
                    comps.push((f2, 0.07));
                }
                comps
            })
            .collect();
        let viseme_means = (0..num_visemes)
            .map(|c| {
                (0..visual_dim)
                    .map(|d| {
                        let angle = std::f64::consts::PI * (c * (d + 1)) as f64
                            / num_visemes as f64;
                        (if d == c % visual_dim { 1.0 } else { 0.0 }) + 0.5 * angle.cos() as f32
                    })
                    .collect()
            })
            .collect();
        Self {
            symbols,
            viseme_map,
            audio_signature,
            duration_range_ms: (120, 280),
            viseme_means,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn num_visemes(&self) -> usize {
        self.viseme_means.len()
    }

    pub fn visual_dim(&self) -> usize {
        self.viseme_means.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    pub fn indices(&self, symbols: &[&str]) -> Result<Vec<usize>> {
        symbols.iter().map(|s| self.index_of(s)).collect()
    }

    pub fn names(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.symbols[i].clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.symbols.len();
        let bad = |m: String| Err(Error::InvalidSymbolSet(m));
        if n == 0 {
            return bad("no symbols".into());
        }
        if self.viseme_map.len() != n || self.audio_signature.len() != n {
            return bad("viseme_map and audio_signature must cover every symbol".into());
        }
        for (i, sig) in self.audio_signature.iter().enumerate() {
            if sig.is_empty() {
                return bad(format!("symbol `{}` has no sinusoid", self.symbols[i]));
            }
            if sig.iter().any(|&(f, _)| !(f > 0.0 && f < 8000.0)) {
                return bad(format!(
                    "symbol `{}` has a frequency outside (0, 8000) Hz",
                    self.symbols[i]
                ));
            }
        }
        if self.viseme_map.iter().any(|&c| c >= self.viseme_means.len()) {
            return bad("viseme class without a mean vector".into());
        }
        let mut counts = vec![0usize; self.viseme_means.len()];
        for &c in &self.viseme_map {
            counts[c] += 1;
        }
        if !counts.iter().any(|&c| c >= 2) {
            return bad("at least two symbols must share a viseme class".into());
        }
        let (lo, hi) = self.duration_range_ms;
        if lo == 0 || lo > hi {
            return bad(format!("bad duration range {lo}..={hi} ms"));
        }
        Ok(())
    }
}

fn symbol_name(i: usize) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    if i < letters.len() {
        (letters[i] as char).to_string()
    } else {
        format!("s{i}")
    }
}

/// One synthetic speaker utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// 16 kHz mono samples in [-1, 1].
    pub audio: Vec<f32>,
    /// `T_v x D_v` viseme features at 25 fps.
    pub visual: Matrix,
    /// Symbol indices.
    pub transcript: Vec<usize>,
    /// Per 10 ms acoustic frame symbol-state label.
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.audio.len() as f64 / SAMPLE_RATE as f64
    }

    /// Cuts the utterance to its first `num_samples` samples, keeping the
    /// visual stream, alignment and transcript consistent with the new length.
    pub fn truncated(&self, num_samples: usize) -> Utterance {
        if num_samples >= self.audio.len() {
            return self.clone();
        }
        let audio = self.audio[..num_samples].to_vec();
        let mut visual = self.visual.clone();
        visual.truncate_rows(visual_frame_count(num_samples));
        let mut alignment = self.alignment.clone();
        alignment.truncate(num_frames(num_samples));
        let transcript = collapse(&alignment);
        Utterance {
            id: self.id.clone(),
            audio,
            visual,
            transcript,
            alignment,
        }
    }
}

/// Removes consecutive repeats: `[a, a, b, b, a] -> [a, b, a]`.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

pub fn visual_frame_count(num_samples: usize) -> usize {
    (num_samples as f64 / SAMPLES_PER_VISUAL_FRAME as f64).round() as usize
}

/// Renders `symbols` (indices into `set`) as audio, visual stream and alignment.
pub fn synthesize_utterance(
    id: &str,
    symbols: &[usize],
    set: &SymbolSet,
    noise_level: f64,
    seed: u64,
) -> Result<Utterance> {
    if symbols.is_empty() {
        return Err(Error::Empty("symbol sequence"));
    }
    if !(noise_level >= 0.0) {
        return Err(Error::Config(format!("noise_level must be >= 0, got {noise_level}")));
    }
    if let Some(&bad) = symbols.iter().find(|&&s| s >= set.len()) {
        return Err(Error::UnknownSymbol(format!("#{bad}")));
    }
    let mut rng = rng(seed);
    let (lo, hi) = set.duration_range_ms;
    let sr = SAMPLE_RATE as f64;

    // segment boundaries in samples
    let mut bounds = Vec::with_capacity(symbols.len() + 1);
    bounds.push(0usize);
    for _ in symbols {
        let ms = rng.random_range(lo..=hi) as usize;
        bounds.push(bounds.last().unwrap() + ms * SAMPLE_RATE as usize / 1000);
    }
    let total = *bounds.last().unwrap();

    let mut audio = vec![0.0f64; total];
    for (k, &sym) in symbols.iter().enumerate() {
        let (start, end) = (bounds[k], bounds[k + 1]);
        let len = end - start;
        for &(freq, amp) in &set.audio_signature[sym] {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * freq / sr;
            for n in 0..len {
                audio[start + n] += amp * (w * n as f64 + phase).sin();
            }
        }
        let ramp = RAMP_SAMPLES.min(len / 2);
        for n in 0..ramp {
            let g = 0.5 * (1.0 - (std::f64::consts::PI * n as f64 / ramp as f64).cos());
            audio[start + n] *= g;
            audio[end - 1 - n] *= g;
        }
    }
    if noise_level > 0.0 {
        let normal = Normal::new(0.0, noise_level).expect("finite noise level");
        for s in audio.iter_mut() {
            *s += normal.sample(&mut rng);
        }
    }
    let audio: Vec<f32> = audio.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect();

    let segment_at = |sample: usize| -> usize {
        // bounds is sorted; last k with bounds[k] <= sample
        let k = bounds.partition_point(|&b| b <= sample) - 1;
        symbols[k.min(symbols.len() - 1)]
    };

    let tv = visual_frame_count(total);
    let dv = set.visual_dim();
    let jitter = Normal::new(0.0, VISUAL_JITTER).unwrap();
    let mut visual = Matrix::zeros(tv, dv);
    for f in 0..tv {
        let sample = (f * SAMPLES_PER_VISUAL_FRAME).min(total - 1);
        let mean = &set.viseme_means[set.viseme_map[segment_at(sample)]];
        for (d, m) in mean.iter().enumerate() {
            visual.set(f, d, m + jitter.sample(&mut rng) as f32);
        }
    }

    let alignment: Vec<usize> = (0..num_frames(total))
        .map(|t| segment_at(t * SAMPLES_PER_HOP + SAMPLES_PER_WINDOW / 2))
        .collect();
    let transcript = collapse(&alignment);

    Ok(Utterance {
        id: id.to_string(),
        audio,
        visual,
        transcript,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn fixed_duration_set(ms: u32) -> SymbolSet {
        let mut set = SymbolSet::default();
        set.duration_range_ms = (ms, ms);
        set
    }

    #[test]
    fn default_set_is_valid() {
        let set = SymbolSet::default();
        set.validate().unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.num_visemes(), 6);
        assert_eq!(set.visual_dim(), 8);
    }

    #[test]
    fn ambiguity_is_mandatory() {
        let mut set = SymbolSet::standard(4, 2, 4);
        set.viseme_map = vec![0, 1, 2, 3];
        set.viseme_means = vec![vec![0.0; 4]; 4];
        assert!(matches!(set.validate(), Err(Error::InvalidSymbolSet(_))));
    }

    #[test]
    fn single_symbol_sizes() {
        let set = fixed_duration_set(200);
        let u = synthesize_utterance("u", &[3], &set, 0.0, 1).unwrap();
        assert_eq!(u.audio.len(), 3200);
        assert_eq!(u.visual.rows(), 5);
        // 1 + floor((3200 - 640) / 160): the feature pipeline's frame count
        assert_eq!(u.alignment.len(), 17);
        assert!(u.alignment.iter().all(|&l| l == 3));
        assert_eq!(u.transcript, vec![3]);
    }

    #[test]
    fn pure_tone_peaks_at_its_frequency() {
        let mut set = fixed_duration_set(200);
        set.audio_signature[0] = vec![(1000.0, 0.5)];
        let u = synthesize_utterance("u", &[0], &set, 0.0, 9).unwrap();
        // FFT of the steady part of the burst, zero padded to 16000 points
        // so that each bin is 1 Hz wide
        let seg = &u.audio[160..3040];
        let n = 16000;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(seg.get(i).copied().unwrap_or(0.0) as f64, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (0..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        assert_eq!(peak, 1000);
    }

    #[test]
    fn deterministic() {
        let set = SymbolSet::default();
        let a = synthesize_utterance("u", &[0, 4, 2], &set, 0.02, 42).unwrap();
        let b = synthesize_utterance("u", &[0, 4, 2], &set, 0.02, 42).unwrap();
        assert_eq!(a, b);
        let c = synthesize_utterance("u", &[0, 4, 2], &set, 0.02, 43).unwrap();
        assert_ne!(a.audio, c.audio);
    }

    #[test]
    fn unknown_symbol_is_named() {
        let set = SymbolSet::default();
        match set.indices(&["a", "zz"]) {
            Err(Error::UnknownSymbol(s)) => assert_eq!(s, "zz"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(synthesize_utterance("u", &[99], &set, 0.0, 0).is_err());
        assert!(synthesize_utterance("u", &[], &set, 0.0, 0).is_err());
    }

    #[test]
    fn alignment_collapses_to_transcript_and_visual_rate() {
        let set = SymbolSet::default();
        let syms = [1, 5, 2, 9, 0, 11];
        for seed in 0..20 {
            let u = synthesize_utterance("u", &syms, &set, 0.01, seed).unwrap();
            assert_eq!(collapse(&u.alignment), syms.to_vec());
            assert_eq!(u.transcript, syms.to_vec());
            assert_eq!(u.alignment.len(), num_frames(u.audio.len()));
            assert_eq!(
                u.visual.rows(),
                (u.duration_s() * 25.0).round() as usize
            );
        }
    }

    #[test]
    fn truncation_keeps_streams_consistent() {
        let set = SymbolSet::default();
        let u = synthesize_utterance("u", &[1, 5, 2, 9], &set, 0.0, 3).unwrap();
        let t = u.truncated(u.audio.len() / 2);
        assert_eq!(t.audio.len(), u.audio.len() / 2);
        assert_eq!(t.alignment.len(), num_frames(t.audio.len()));
        assert_eq!(t.alignment[..], u.alignment[..t.alignment.len()]);
        assert_eq!(collapse(&t.alignment), t.transcript);
        assert_eq!(t.visual.rows(), visual_frame_count(t.audio.len()));
    }
}
