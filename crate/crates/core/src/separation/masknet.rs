use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{stft, TfMask, NUM_BINS, STFT_HOP};
use crate::autodiff::{Checkpoint, Grads, MomentumSgd, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::features::{resample_visual, NormStats};
use crate::matrix::Matrix;
use crate::tdnn::{constrain_stacks, Affine, ArchConfig, Graph, Stack};
use crate::util;
use crate::SAMPLE_RATE;

/// Mask estimator layout and training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNetConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub frontend_layers: usize,
    pub layers: usize,
    pub offsets: Vec<isize>,
    /// When false the visual input is replaced by zeros, giving an
    /// audio-only separator with the same layout.
    pub use_visual: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub clip: f64,
    pub constraint_every: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            bottleneck: 32,
            frontend_layers: 2,
            layers: 3,
            offsets: vec![-1, 0, 1],
            use_visual: true,
            epochs: 6,
            batch_size: 8,
            lr: 0.02,
            lr_final: 0.002,
            momentum: 0.9,
            clip: 5.0,
            constraint_every: 4,
        }
    }
}

impl MaskNetConfig {
    fn arch(&self) -> ArchConfig {
        ArchConfig {
            hidden: self.hidden,
            bottleneck: self.bottleneck,
            offsets: self.offsets.clone(),
            ..ArchConfig::default()
        }
    }
}

/// `sigmoid(W · TDNN-F(concat(log|X|², frontend(v))) + b)` per STFT bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskNet {
    pub config: MaskNetConfig,
    pub visual_dim: usize,
    pub frontend: Stack,
    pub body: Stack,
    pub output: Affine,
}

impl MaskNet {
    pub fn build(config: &MaskNetConfig, visual_dim: usize, seed: u64) -> (MaskNet, ParamSet<f32>) {
        let mut rng = util::rng(util::derive_seed(seed, &[util::tag("masknet")]));
        let mut params = ParamSet::new();
        let arch = config.arch();
        let h = config.hidden;
        let frontend = Stack::new(&mut params, &mut rng, "sep.frontend", config.frontend_layers, visual_dim, h, &arch, false);
        let body = Stack::new(&mut params, &mut rng, "sep.body", config.layers, NUM_BINS + h, h, &arch, false);
        let output = Affine::zeros(&mut params, "sep.output", h, NUM_BINS);
        let net = MaskNet {
            config: config.clone(),
            visual_dim,
            frontend,
            body,
            output,
        };
        (net, params)
    }

    /// Mask logits (pre-sigmoid), `frames x NUM_BINS`.
    pub fn logits(&self, g: &mut Graph<'_, f32>, spec: &Matrix, visual: &Matrix) -> Result<crate::autodiff::Var> {
        if spec.rows() != visual.rows() {
            return Err(Error::Length(format!(
                "{} spectrogram frames vs {} visual frames",
                spec.rows(),
                visual.rows()
            )));
        }
        let v = if self.config.use_visual {
            visual.clone()
        } else {
            Matrix::zeros(visual.rows(), visual.cols())
        };
        let s = g.input(Tensor::from_matrix(spec));
        let v = g.input(Tensor::from_matrix(&v));
        let fv = self.frontend.forward(g, v)?;
        let joint = g.tape.concat(s, fv)?;
        let h = self.body.forward(g, joint)?;
        self.output.forward(g, h)
    }
}

/// Normalized network inputs and the oracle target for one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskExample {
    pub spec: Matrix,
    pub visual: Matrix,
    pub target: Matrix,
}

/// Log-power spectrogram and the 25 fps visual stream resampled onto the
/// STFT frame clock (frame `f` is centred at `f * hop` samples).
pub fn mask_features(mixture: &[f32], visual_25fps: &Matrix) -> Result<(Matrix, Matrix)> {
    let spec = stft(mixture)?.log_power();
    let hop_ms = 1000.0 * STFT_HOP as f64 / SAMPLE_RATE as f64;
    let visual = resample_visual(visual_25fps, 1000.0 / crate::VISUAL_FPS as f64, hop_ms, spec.rows())?;
    Ok((spec, visual))
}

/// A trained estimator with the normalization statistics of its inputs.
#[derive(Debug, Clone)]
pub struct MaskModel {
    pub net: MaskNet,
    pub params: ParamSet<f32>,
    pub spec_stats: NormStats,
    pub visual_stats: NormStats,
}

impl MaskModel {
    pub fn example(&self, mixture: &[f32], visual_25fps: &Matrix, target: Option<&TfMask>) -> Result<MaskExample> {
        let (spec, visual) = mask_features(mixture, visual_25fps)?;
        let frames = spec.rows();
        Ok(MaskExample {
            spec: self.spec_stats.normalize(&spec)?,
            visual: self.visual_stats.normalize(&visual)?,
            target: target.map_or_else(|| Matrix::zeros(frames, NUM_BINS), |m| m.matrix().clone()),
        })
    }

    pub fn predict(&self, ex: &MaskExample) -> Result<TfMask> {
        let mut g = Graph::new(&self.params, false);
        let logits = self.net.logits(&mut g, &ex.spec, &ex.visual)?;
        let mask = g.tape.sigmoid(logits);
        TfMask::new(g.tape.value(mask).to_matrix())
    }

    /// Mean squared error between predicted and target masks over examples.
    pub fn mse(&self, examples: &[MaskExample]) -> Result<f64> {
        let per = util::par_map(examples, |ex| -> Result<(f64, usize)> {
            let m = self.predict(ex)?;
            let se: f64 = m
                .matrix()
                .as_slice()
                .iter()
                .zip(ex.target.as_slice())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            Ok((se, ex.target.as_slice().len()))
        });
        let (mut se, mut n) = (0.0, 0usize);
        for r in per {
            let (a, b) = r?;
            se += a;
            n += b;
        }
        Ok(se / n.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: toml::to_string(&self.net.config).expect("mask config serializes"),
            norms: vec![
                ("spec".to_string(), self.spec_stats.clone()),
                ("visual".to_string(), self.visual_stats.clone()),
            ],
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: MaskNetConfig = toml::from_str(&ck.config).map_err(|e| Error::format(path, e.to_string()))?;
        let visual_stats = ck.norm("visual").ok_or_else(|| Error::format(path, "missing visual stats"))?.clone();
        let spec_stats = ck.norm("spec").ok_or_else(|| Error::format(path, "missing spectrogram stats"))?.clone();
        let (net, fresh) = MaskNet::build(&config, visual_stats.dim(), 0);
        if fresh.len() != ck.params.len()
            || fresh.iter().zip(ck.params.iter()).any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::format(path, "parameters do not match the mask network layout"));
        }
        Ok(Self {
            net,
            params: ck.params,
            spec_stats,
            visual_stats,
        })
    }
}

/// Mask for one mixture from a trained model.
pub fn learned_mask(model: &MaskModel, mixture: &[f32], visual_25fps: &Matrix) -> Result<TfMask> {
    model.predict(&model.example(mixture, visual_25fps, None)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Fits the estimator to oracle masks by minibatch MSE. `raw` holds
/// `(mixture, 25 fps visual, oracle mask)` triples; normalization statistics
/// are estimated from them.
pub fn train_masknet(
    config: &MaskNetConfig,
    raw: &[(Vec<f32>, Matrix, TfMask)],
    seed: u64,
) -> Result<(MaskModel, MaskTrainReport)> {
    if raw.is_empty() {
        return Err(Error::Empty("mask training set"));
    }
    let feats = util::par_map(raw, |(mix, v, _)| mask_features(mix, v))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let spec_stats = NormStats::estimate(feats.iter().map(|f| &f.0))?;
    let visual_stats = NormStats::estimate(feats.iter().map(|f| &f.1))?;
    let (net, params) = MaskNet::build(config, raw[0].1.cols(), seed);
    let mut model = MaskModel {
        net,
        params,
        spec_stats,
        visual_stats,
    };
    let examples = raw
        .iter()
        .zip(&feats)
        .map(|((_, _, mask), (s, v))| {
            Ok(MaskExample {
                spec: model.spec_stats.normalize(s)?,
                visual: model.visual_stats.normalize(v)?,
                target: mask.matrix().clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let batch = config.batch_size.max(1);
    let mut opt = MomentumSgd::new(
        &model.params,
        config.lr,
        config.lr_final,
        examples.len().div_ceil(batch) * config.epochs,
        config.momentum,
        config.clip,
        0.0,
    )?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = util::rng(util::derive_seed(seed, &[util::tag("masknet-shuffle")]));
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let scale = 1.0 / chunk.len() as f64;
            let results = util::par_map(chunk, |&i| -> Result<(f64, Grads<f32>)> {
                let ex = &examples[i];
                let mut g = Graph::new(&model.params, true);
                let logits = model.net.logits(&mut g, &ex.spec, &ex.visual)?;
                let mask = g.tape.sigmoid(logits);
                let target = g.input(Tensor::from_matrix(&ex.target));
                let mse = g.tape.mse(mask, target)?;
                let loss = g.tape.scale(mse, scale);
                let mut grads = model.params.zero_grads();
                g.tape.backward(loss, &mut grads)?;
                Ok((g.tape.value(mse).data()[0] as f64, grads))
            });
            let mut grads = model.params.zero_grads();
            for r in results {
                let (l, gr) = r?;
                total += l;
                grads.add_assign(&gr);
            }
            opt.step(&mut model.params, grads)?;
            if config.constraint_every > 0 && opt.steps() % config.constraint_every == 0 {
                constrain_stacks([&model.net.frontend, &model.net.body], &mut model.params);
            }
        }
        epoch_losses.push(total / examples.len() as f64);
    }
    Ok((model, MaskTrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::super::{oracle_irm, NUM_BINS};
    use super::*;
    use rand::Rng;

    fn tone(n: usize, w: f32, a: f32) -> Vec<f32> {
        (0..n).map(|i| a * (i as f32 * w).sin()).collect()
    }

    fn visual(frames: usize, seed: u64) -> Matrix {
        let mut r = util::rng(seed);
        Matrix::from_vec(frames, 4, (0..frames * 4).map(|_| r.random_range(-1.0f32..1.0)).collect())
    }

    fn small() -> MaskNetConfig {
        MaskNetConfig {
            hidden: 8,
            bottleneck: 4,
            epochs: 3,
            batch_size: 2,
            lr: 0.05,
            lr_final: 0.05,
            ..MaskNetConfig::default()
        }
    }

    #[test]
    fn untrained_mask_is_one_half() {
        let (net, params) = MaskNet::build(&small(), 4, 1);
        let model = MaskModel {
            net,
            params,
            spec_stats: NormStats::identity(NUM_BINS),
            visual_stats: NormStats::identity(4),
        };
        let m = learned_mask(&model, &tone(4000, 0.2, 0.3), &visual(7, 2)).unwrap();
        assert!(m.matrix().as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn training_reduces_mse_and_round_trips() {
        let raw: Vec<_> = (0..6)
            .map(|k| {
                let t = tone(3200, 0.1 + 0.02 * k as f32, 0.3);
                let i = tone(3200, 0.9 - 0.03 * k as f32, 0.3);
                let mix: Vec<f32> = t.iter().zip(&i).map(|(a, b)| a + b).collect();
                (mix, visual(5, k), oracle_irm(&t, &i).unwrap())
            })
            .collect();
        let cfg = small();
        let (model, report) = train_masknet(&cfg, &raw, 3).unwrap();
        let examples: Vec<_> = raw.iter().map(|(m, v, t)| model.example(m, v, Some(t)).unwrap()).collect();
        let (net0, p0) = MaskNet::build(&cfg, 4, 3);
        let untrained = MaskModel {
            net: net0,
            params: p0,
            ..model.clone()
        };
        assert!(model.mse(&examples).unwrap() < untrained.mse(&examples).unwrap());
        assert_eq!(report.epoch_losses.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.ckpt");
        model.save(&p).unwrap();
        let back = MaskModel::load(&p).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.net, model.net);
    }
}
