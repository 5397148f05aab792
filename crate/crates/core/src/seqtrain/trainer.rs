use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fb::Scores;
use super::graph::{build_denominator, build_numerator, HmmGraph, HmmTopology};
use super::lfmmi::{frame_ce, lfmmi_loss};
use crate::autodiff::{Checkpoint, Grads, ParamSet, MomentumSgd, Tensor};
use crate::decoder::{score_wer, viterbi, WerReport};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::fusion::{self, ForwardOptions};
use crate::io::write_atomic;
use crate::matrix::Matrix;
use crate::synthdata::Bigram;
use crate::tdnn::{constrain_network, semi_orthogonal_step, update_running_stats, Affine, BnObservation, Graph, Network};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Lfmmi,
    Ce,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lfmmi" => Ok(Criterion::Lfmmi),
            "ce" => Ok(Criterion::Ce),
            _ => Err(Error::Parse(format!("unknown criterion `{s}`"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Lfmmi => "lfmmi",
            Criterion::Ce => "ce",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub criterion: Criterion,
    pub lambda_ce: f64,
    pub leaky: f64,
    pub p_self: f64,
    /// Numerator boundary tolerance in frames.
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step; the rate decays
    /// geometrically from `lr`.
    pub lr_final: f64,
    pub momentum: f64,
    pub l2: f64,
    pub clip: f64,
    /// Optimizer steps between semi-orthogonal constraint applications.
    pub constraint_every: usize,
    pub lm_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::Lfmmi,
            lambda_ce: 0.1,
            leaky: 0.1,
            p_self: 0.75,
            window: 2,
            epochs: 10,
            batch_size: 16,
            lr: 0.02,
            lr_final: 0.002,
            momentum: 0.9,
            l2: 0.0,
            clip: 5.0,
            constraint_every: 4,
            lm_scale: 1.0,
        }
    }
}

/// One training or evaluation utterance, already normalized and at the
/// acoustic frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub x: Option<Matrix>,
    pub v: Option<Matrix>,
    pub alignment: Vec<usize>,
    pub transcript: Vec<usize>,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.alignment.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dev_wer: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\tstep\tloss\tgrad_norm\tdev_wer";

pub fn render_log(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let dev = r.dev_wer.map_or_else(|| "-".to_string(), |w| format!("{w:.4}"));
        let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}\t{}", r.epoch, r.step, r.loss, r.grad_norm, dev);
    }
    out
}

/// Where to write checkpoints and the training log.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config_text: String,
    pub norms: Vec<(String, NormStats)>,
}

impl CheckpointSink {
    fn save(&self, name: &str, params: &ParamSet<f32>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        Checkpoint {
            config: self.config_text.clone(),
            norms: self.norms.clone(),
            params: params.clone(),
        }
        .save(&path)?;
        Ok(path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest dev WER.
    pub best: ParamSet<f32>,
    pub best_epoch: usize,
    pub best_dev_wer: f64,
    pub final_params: ParamSet<f32>,
    pub log: Vec<TrainLogRow>,
    pub best_path: Option<PathBuf>,
}

impl TrainOutcome {
    /// Mean training loss per epoch, from the epoch summary rows.
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.epoch > 0 && r.dev_wer.is_some())
            .map(|r| r.loss)
            .collect()
    }
}

struct UttResult {
    objective: f64,
    grads: Grads<f32>,
    bn: Vec<BnObservation>,
}

/// Forward and backward for one utterance. The seed gradient is
/// `-∂F/∂scores * scale`, so summing over a minibatch gives the gradient of
/// the frame-normalized loss.
#[allow(clippy::too_many_arguments)]
fn utterance_step(
    net: &Network,
    params: &ParamSet<f32>,
    ex: &Example,
    num: Option<&HmmGraph>,
    den: &HmmGraph,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<UttResult> {
    let mut g = Graph::new(params, true).with_bn_eps(net.arch.bn_eps);
    let x = ex.x.as_ref().map(|m| g.input(Tensor::from_matrix(m)));
    let v = ex.v.as_ref().map(|m| g.input(Tensor::from_matrix(m)));
    let out = fusion::forward(net, &mut g, x, v, ForwardOptions::default())?;
    let scores = g.tape.value(out.log_post).to_f64_vec();
    let s = Scores::new(&scores, net.dims.pdfs)?;
    let (objective, grad) = match cfg.criterion {
        Criterion::Ce => frame_ce(s, &ex.alignment)?,
        Criterion::Lfmmi => {
            let num = num.expect("numerator graphs are built for LF-MMI");
            let l = lfmmi_loss(s, num, den, &ex.alignment, cfg.lambda_ce, cfg.leaky)?;
            (l.objective, l.grad)
        }
    };
    let seed: Vec<f32> = grad.iter().map(|d| (-d * scale) as f32).collect();
    let seed = Tensor::from_vec(g.tape.value(out.log_post).shape(), seed)?;
    let mut grads = params.zero_grads();
    g.tape.backward_with(out.log_post, &seed, &mut grads)?;
    Ok(UttResult {
        objective,
        grads,
        bn: g.bn_stats(),
    })
}

/// Decodes `examples` with the denominator graph as LM and returns the
/// pooled report.
pub fn decode_wer(net: &Network, params: &ParamSet<f32>, examples: &[Example], den: &HmmGraph, lm_scale: f64) -> Result<WerReport> {
    let reports = util::par_map(examples, |ex| -> Result<WerReport> {
        let hyp = decode_one(net, params, ex.x.as_ref(), ex.v.as_ref(), den, lm_scale)?;
        score_wer(&ex.transcript, &hyp)
    });
    let mut total = WerReport::default();
    for r in reports {
        total.add(&r?);
    }
    Ok(total)
}

pub fn decode_one(
    net: &Network,
    params: &ParamSet<f32>,
    x: Option<&Matrix>,
    v: Option<&Matrix>,
    den: &HmmGraph,
    lm_scale: f64,
) -> Result<Vec<usize>> {
    let out = fusion::run(net, params, x, v, ForwardOptions::default())?;
    let scores: Vec<f64> = out.log_post.as_slice().iter().map(|&v| v as f64).collect();
    Ok(viterbi(Scores::new(&scores, net.dims.pdfs)?, den, lm_scale)?.symbols)
}

/// Criterion-independent frame cross-entropy of the alignment under the
/// current model, per frame.
fn initial_frame_loss(net: &Network, params: &ParamSet<f32>, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for ex in examples {
        let out = fusion::run(net, params, ex.x.as_ref(), ex.v.as_ref(), ForwardOptions::default())?;
        for (t, &y) in ex.alignment.iter().enumerate() {
            total -= out.log_post.get(t, y) as f64;
        }
        frames += ex.frames();
    }
    Ok(total / frames.max(1) as f64)
}

/// Minibatch SGD with momentum over whole utterances. Returns the
/// parameters of the best dev epoch; with a sink, also writes
/// `epoch-NNN.ckpt`, `best.ckpt` and `train_log.tsv`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &Network,
    init: ParamSet<f32>,
    lm: &Bigram,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr_final > 0.0) {
        return Err(Error::Config("learning rates must be positive".into()));
    }
    let topo = HmmTopology::new(net.dims.pdfs, cfg.p_self)?;
    let den = build_denominator(lm, &topo)?;
    let nums: Vec<Option<HmmGraph>> = match cfg.criterion {
        Criterion::Ce => vec![None; train_set.len()],
        Criterion::Lfmmi => util::par_map(train_set, |ex| build_numerator(&ex.alignment, lm, &topo, cfg.window).map(Some))
            .into_iter()
            .collect::<Result<_>>()?,
    };
    if let Some(s) = sink {
        std::fs::create_dir_all(&s.dir)?;
    }

    let mut params = init;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut opt = MomentumSgd::new(
        &params,
        cfg.lr,
        cfg.lr_final,
        steps_per_epoch * cfg.epochs,
        cfg.momentum,
        cfg.clip,
        cfg.l2,
    )?;

    let mut log = Vec::new();
    let first_batch = &train_set[..cfg.batch_size.min(train_set.len())];
    let init_dev = if dev_set.is_empty() {
        None
    } else {
        Some(100.0 * decode_wer(net, &params, dev_set, &den, cfg.lm_scale)?.wer())
    };
    log.push(TrainLogRow {
        epoch: 0,
        step: 0,
        loss: initial_frame_loss(net, &params, first_batch)?,
        grad_norm: 0.0,
        dev_wer: init_dev,
    });
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_dev = init_dev.unwrap_or(f64::INFINITY);
    let mut best_path = None;
    let mut last_good: Option<PathBuf> = None;
    if let Some(s) = sink {
        let p = s.save("epoch-000.ckpt", &params)?;
        last_good = Some(p.clone());
        best_path = Some(s.save("best.ckpt", &params)?);
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = util::rng(util::derive_seed(seed, &[util::tag("shuffle")]));
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_frames = 0usize;
        let mut epoch_norm = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frames: usize = batch.iter().map(|&i| train_set[i].frames()).sum();
            let scale = 1.0 / frames as f64;
            let results = util::par_map(batch, |&i| {
                utterance_step(net, &params, &train_set[i], nums[i].as_ref(), &den, cfg, scale)
            });
            let mut grads = params.zero_grads();
            let mut objective = 0.0;
            let mut bn = Vec::with_capacity(batch.len());
            for r in results {
                let r = r?;
                objective += r.objective;
                grads.add_assign(&r.grads);
                bn.push(r.bn);
            }
            let loss = -objective / frames as f64;
            let diverged = || Error::Diverged {
                epoch,
                step,
                last_good: last_good.clone(),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            let norm = match opt.step(&mut params, grads) {
                Ok(n) if n.is_finite() => n,
                Ok(_) | Err(Error::NonFiniteGradient(_)) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            update_running_stats(&mut params, &bn, net.arch.bn_momentum);
            step += 1;
            if cfg.constraint_every > 0 && step % cfg.constraint_every == 0 {
                constrain_network(net, &mut params);
            }
            log.push(TrainLogRow {
                epoch,
                step,
                loss,
                grad_norm: norm,
                dev_wer: None,
            });
            epoch_loss += -objective;
            epoch_frames += frames;
            epoch_norm += norm;
        }
        let dev = if dev_set.is_empty() {
            f64::NAN
        } else {
            100.0 * decode_wer(net, &params, dev_set, &den, cfg.lm_scale)?.wer()
        };
        let mean_loss = epoch_loss / epoch_frames as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4}, dev WER {dev:.2}%");
        log.push(TrainLogRow {
            epoch,
            step,
            loss: mean_loss,
            grad_norm: epoch_norm / steps_per_epoch as f64,
            dev_wer: Some(dev),
        });
        if let Some(s) = sink {
            last_good = Some(s.save(&format!("epoch-{epoch:03}.ckpt"), &params)?);
        }
        // ties go to the later, further-annealed epoch
        if dev <= best_dev || (dev_set.is_empty() && epoch == cfg.epochs) {
            best_dev = dev;
            best_epoch = epoch;
            best = params.clone();
            if let Some(s) = sink {
                best_path = Some(s.save("best.ckpt", &params)?);
            }
        }
    }
    if let Some(s) = sink {
        write_atomic(&s.dir.join("train_log.tsv"), render_log(&log).as_bytes())?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev_wer: best_dev,
        final_params: params,
        log,
        best_path,
    })
}

/// A visual front-end trained as a frame classifier, with the linear head
/// that was trained alongside it.
#[derive(Debug, Clone)]
pub struct PretrainedFrontend {
    params: ParamSet<f32>,
    head: Affine,
}

impl PretrainedFrontend {
    /// Fraction of frames whose most likely class matches the alignment.
    pub fn frame_accuracy(&self, net: &Network, examples: &[Example]) -> Result<f64> {
        let front = net.frontend.as_ref().ok_or_else(|| Error::Architecture("network has no visual front-end".into()))?;
        let mut correct = 0usize;
        let mut frames = 0usize;
        for ex in examples {
            let v = ex.v.as_ref().ok_or(Error::Empty("visual stream"))?;
            let mut g = Graph::new(&self.params, false).with_bn_eps(net.arch.bn_eps);
            let vin = g.input(Tensor::from_matrix(v));
            let h = front.forward(&mut g, vin)?;
            let logits = self.head.forward(&mut g, h)?;
            let out = g.tape.value(logits);
            for (t, &y) in ex.alignment.iter().enumerate() {
                let row = out.row(t);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == y);
            }
            frames += ex.frames();
        }
        Ok(correct as f64 / frames.max(1) as f64)
    }
}

/// Trains the visual front-end of `net` (plus a throw-away linear head) as a
/// frame classifier against alignment labels, then copies the front-end
/// weights back into `params`. Other parameters are untouched.
pub fn pretrain_frontend(
    net: &Network,
    params: &mut ParamSet<f32>,
    examples: &[Example],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainedFrontend> {
    let front = net
        .frontend
        .as_ref()
        .ok_or_else(|| Error::Architecture("network has no visual front-end".into()))?;
    let hidden = front.dim_out().expect("front-end has layers");
    let mut local = params.clone();
    let head = Affine::zeros(&mut local, "pretrain_head", hidden, net.dims.pdfs);
    let mut frozen = Vec::new();
    for p in local.iter_mut() {
        if p.trainable && !(p.name.starts_with("frontend.") || p.name.starts_with("pretrain_head.")) {
            p.trainable = false;
            frozen.push(p.name.clone());
        }
    }
    let batch_size = cfg.batch_size.max(1);
    let mut opt = MomentumSgd::new(
        &local,
        cfg.lr,
        cfg.lr_final,
        examples.len().div_ceil(batch_size) * epochs,
        cfg.momentum,
        cfg.clip,
        cfg.l2,
    )?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = util::rng(util::derive_seed(seed, &[util::tag("pretrain")]));
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let frames: usize = batch.iter().map(|&i| examples[i].frames()).sum();
            let results = util::par_map(batch, |&i| -> Result<Grads<f32>> {
                let ex = &examples[i];
                let v = ex.v.as_ref().ok_or(Error::Empty("visual stream"))?;
                let mut g = Graph::new(&local, true).with_bn_eps(net.arch.bn_eps);
                let vin = g.input(Tensor::from_matrix(v));
                let h = front.forward(&mut g, vin)?;
                let logits = head.forward(&mut g, h)?;
                let lp = g.tape.log_softmax(logits);
                let scores = g.tape.value(lp).to_f64_vec();
                let (_, grad) = frame_ce(Scores::new(&scores, net.dims.pdfs)?, &ex.alignment)?;
                let seed: Vec<f32> = grad.iter().map(|d| (-d / frames as f64) as f32).collect();
                let seed = Tensor::from_vec(g.tape.value(lp).shape(), seed)?;
                let mut grads = local.zero_grads();
                g.tape.backward_with(lp, &seed, &mut grads)?;
                Ok(grads)
            });
            let mut grads = local.zero_grads();
            for r in results {
                grads.add_assign(&r?);
            }
            opt.step(&mut local, grads)?;
            if cfg.constraint_every > 0 && opt.steps() % cfg.constraint_every == 0 {
                for layer in &front.layers {
                    semi_orthogonal_step(&mut local.get_mut(layer.w_in).value);
                }
            }
        }
    }
    for name in frozen {
        local.by_name_mut(&name).expect("parameter exists").trainable = true;
    }
    for p in params.iter_mut() {
        if p.name.starts_with("frontend.") {
            p.value = local.by_name(&p.name).expect("same layout").value.clone();
        }
    }
    Ok(PretrainedFrontend { params: local, head })
}

pub fn write_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    write_atomic(path, render_log(rows).as_bytes())
}
