//! Browser bindings for three small interactive views of the toolkit:
//! a two-speaker mixture with its ideal ratio mask, denominator posteriors
//! under leaky-HMM smoothing, and convergence of the semi-orthogonal
//! constraint.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use avsr::autodiff::Tensor;
use avsr::features::logmel;
use avsr::separation::{oracle_irm, NUM_BINS};
use avsr::seqtrain::{build_denominator, forward_backward, HmmTopology, Scores};
use avsr::synthdata::{synthesize_utterance, Bigram, Mixture, MixtureSpec, Snr, SymbolSet};
use avsr::tdnn::{orthogonality_error, semi_orthogonal_step};
use avsr::util::{derive_seed, rng, tag};
use avsr::NUM_MEL_BINS;

fn js_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn to_js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// A synthetic mixture: log-mel frames of the mixture and the oracle mask,
/// both row-major with one row per frame.
#[wasm_bindgen]
pub struct MixtureView {
    frames: usize,
    mask_frames: usize,
    logmel: Vec<f32>,
    mask: Vec<f32>,
    target: String,
    interferer: String,
    snr_db: f64,
}

#[wasm_bindgen]
impl MixtureView {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn mel_bins(&self) -> usize {
        NUM_MEL_BINS
    }

    pub fn mask_frames(&self) -> usize {
        self.mask_frames
    }

    pub fn mask_bins(&self) -> usize {
        NUM_BINS
    }

    pub fn logmel(&self) -> Vec<f32> {
        self.logmel.clone()
    }

    pub fn mask(&self) -> Vec<f32> {
        self.mask.clone()
    }

    pub fn target(&self) -> String {
        self.target.clone()
    }

    pub fn interferer(&self) -> String {
        self.interferer.clone()
    }

    /// Measured target-to-interferer ratio.
    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }
}

fn random_transcript(set: &SymbolSet, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let lm = Bigram::random(set.len(), 2.0, &mut r);
    let len = r.random_range(3..=6);
    lm.sample(len, &mut r)
}

#[wasm_bindgen]
pub fn mixture(seed: u64, snr_db: f64) -> Result<MixtureView, JsError> {
    to_js(build_mixture(seed, snr_db))
}

fn build_mixture(seed: u64, snr_db: f64) -> Result<MixtureView, String> {
    let set = SymbolSet::default();
    let t_syms = random_transcript(&set, derive_seed(seed, &[tag("target")]));
    let i_syms = random_transcript(&set, derive_seed(seed, &[tag("interferer")]));
    let target = synthesize_utterance("target", &t_syms, &set, 0.005, derive_seed(seed, &[1])).map_err(js_err)?;
    let interferer = synthesize_utterance("interferer", &i_syms, &set, 0.005, derive_seed(seed, &[2])).map_err(js_err)?;
    let spec = MixtureSpec {
        target_id: target.id.clone(),
        interferer_id: interferer.id.clone(),
        snr: Snr::Db(snr_db),
        seed,
    };
    let mix = Mixture::simulate(spec, &target, Some(&interferer)).map_err(js_err)?;
    let feats = logmel(&mix.audio).map_err(js_err)?;
    let mask = oracle_irm(&mix.target.audio, &mix.interferer_scaled).map_err(js_err)?;
    let snr = avsr::synthdata::measured_snr_db(&mix.target.audio, &mix.interferer_scaled, 1.0);
    Ok(MixtureView {
        frames: feats.rows(),
        mask_frames: mask.matrix().rows(),
        logmel: feats.into_vec(),
        mask: mask.into_matrix().into_vec(),
        target: set.names(&t_syms).join(" "),
        interferer: set.names(&i_syms).join(" "),
        snr_db: snr,
    })
}

/// Denominator-graph state posteriors for random frame scores.
#[wasm_bindgen]
pub struct PosteriorView {
    frames: usize,
    pdfs: usize,
    posteriors: Vec<f64>,
    log_total: f64,
}

#[wasm_bindgen]
impl PosteriorView {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pdfs(&self) -> usize {
        self.pdfs
    }

    /// Row-major `frames x pdfs`; each row sums to one.
    pub fn posteriors(&self) -> Vec<f64> {
        self.posteriors.clone()
    }

    pub fn log_total(&self) -> f64 {
        self.log_total
    }
}

#[wasm_bindgen]
pub fn posteriors(seed: u64, frames: usize, symbols: usize, leaky: f64) -> Result<PosteriorView, JsError> {
    to_js(build_posteriors(seed, frames, symbols, leaky))
}

fn build_posteriors(seed: u64, frames: usize, symbols: usize, leaky: f64) -> Result<PosteriorView, String> {
    if frames == 0 || symbols == 0 {
        return Err("frames and symbols must be positive".into());
    }
    let mut r = rng(seed);
    let lm = Bigram::random(symbols, 2.0, &mut r);
    let topo = HmmTopology::new(symbols, 0.75).map_err(js_err)?;
    let den = build_denominator(&lm, &topo).map_err(js_err)?;
    let scores: Vec<f64> = (0..frames * symbols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            1.5 * z
        })
        .collect();
    let scores_view = Scores::new(&scores, symbols).map_err(js_err)?;
    let fb = forward_backward(&den, scores_view, leaky).map_err(js_err)?;
    Ok(PosteriorView {
        frames,
        pdfs: symbols,
        posteriors: fb.posteriors,
        log_total: fb.log_total,
    })
}

/// `‖M Mᵀ − α² I‖_F` before and after each of `steps` constraint updates
/// of a random `rows x cols` matrix.
#[wasm_bindgen]
pub fn semi_orthogonal(rows: usize, cols: usize, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    to_js(constraint_trace(rows, cols, steps, seed))
}

fn constraint_trace(rows: usize, cols: usize, steps: usize, seed: u64) -> Result<Vec<f64>, String> {
    if rows == 0 || rows > cols {
        return Err("need 0 < rows <= cols".into());
    }
    let mut r = rng(seed);
    let data: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut m = Tensor::from_vec(&[rows, cols], data).map_err(js_err)?;
    let mut errs = vec![orthogonality_error(&m)];
    for _ in 0..steps {
        semi_orthogonal_step(&mut m);
        errs.push(orthogonality_error(&m));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_rows_normalize() {
        let v = build_posteriors(3, 12, 4, 0.1).unwrap();
        for row in v.posteriors().chunks(v.pdfs()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constraint_converges() {
        let errs = constraint_trace(8, 24, 20, 1).unwrap();
        assert_eq!(errs.len(), 21);
        assert!(errs[20] < 1e-3 && errs[20] < errs[0]);
    }

    #[test]
    fn mixture_shapes_match() {
        let v = build_mixture(5, 0.0).unwrap();
        assert_eq!(v.logmel().len(), v.frames() * v.mel_bins());
        assert_eq!(v.mask().len(), v.mask_frames() * v.mask_bins());
        assert!((v.snr_db() - 0.0).abs() < 1e-6);
        assert!(!v.target().is_empty());
    }
}
