//! Factored TDNN layers and the sub-networks built from them.
//!
//! A [`Network`] only records which parameters belong to which layer; the
//! values live in a separate [`ParamSet`], so the same layout can be run in
//! `f32` for training and in `f64` for gradient checks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Audio,
    Visual,
    Concat,
    Vgate,
    Avgate,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Audio,
        FusionMode::Visual,
        FusionMode::Concat,
        FusionMode::Vgate,
        FusionMode::Avgate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Audio => "audio",
            FusionMode::Visual => "visual",
            FusionMode::Concat => "concat",
            FusionMode::Vgate => "vgate",
            FusionMode::Avgate => "avgate",
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(self, FusionMode::Vgate | FusionMode::Avgate)
    }

    pub fn uses_audio(self) -> bool {
        self != FusionMode::Visual
    }

    pub fn uses_visual(self) -> bool {
        self != FusionMode::Audio
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown fusion mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub fusion: FusionMode,
    pub plus_concat: bool,
    pub hidden: usize,
    pub bottleneck: usize,
    pub offsets: Vec<isize>,
    pub residual_scale: f64,
    pub batchnorm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub frontend_layers: usize,
    pub audio_layers: usize,
    pub visual_layers: usize,
    pub fusion_layers: usize,
    pub recog_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Audio,
            plus_concat: false,
            hidden: 128,
            bottleneck: 32,
            offsets: vec![-1, 0, 1],
            residual_scale: 0.66,
            batchnorm: false,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
            frontend_layers: 2,
            audio_layers: 6,
            visual_layers: 6,
            fusion_layers: 3,
            recog_layers: 6,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.plus_concat && !self.fusion.is_gated() {
            return Err(Error::Architecture(format!(
                "+concat is only defined for gated fusion, not `{}`",
                self.fusion
            )));
        }
        if self.hidden == 0 || self.bottleneck == 0 || self.offsets.is_empty() {
            return Err(Error::Architecture("hidden, bottleneck and offsets must be non-empty".into()));
        }
        if self.recog_layers == 0 {
            return Err(Error::Architecture("RecogNet needs at least one layer".into()));
        }
        if self.fusion.uses_visual() && self.frontend_layers == 0 {
            return Err(Error::Architecture("visual front-end needs at least one layer".into()));
        }
        if self.fusion.is_gated() && (self.audio_layers == 0 || self.visual_layers == 0) {
            return Err(Error::Architecture("gated fusion needs AudioNet and VisualNet layers".into()));
        }
        if self.fusion == FusionMode::Avgate && self.fusion_layers == 0 {
            return Err(Error::Architecture("AV gating needs FusionNet layers".into()));
        }
        Ok(())
    }
}

/// Input and output sizes fixed by the data rather than the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub audio: usize,
    pub visual: usize,
    pub pdfs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdnnfLayer {
    pub name: String,
    pub dim_in: usize,
    pub dim_out: usize,
    pub bottleneck: usize,
    pub offsets: Vec<isize>,
    /// `bottleneck x (dim_in * offsets)`, kept semi-orthogonal.
    pub w_in: ParamId,
    pub w_out: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNormIds>,
    pub relu: bool,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions<'a> {
    pub offsets: &'a [isize],
    pub bottleneck: usize,
    pub residual_scale: f64,
    pub batchnorm: bool,
    pub relu: bool,
}

fn uniform_init<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<S> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| S::from_f64(rng.random_range(-s..s))).collect();
    Tensor::from_vec(&[rows, cols], data).expect("consistent shape")
}

impl TdnnfLayer {
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        opts: LayerOptions<'_>,
    ) -> Self {
        let spliced = dim_in * opts.offsets.len();
        let bottleneck = opts.bottleneck.min(spliced);
        let w_in = params.add(format!("{name}.w_in"), uniform_init(rng, bottleneck, spliced), true);
        let w_out = params.add(format!("{name}.w_out"), uniform_init(rng, dim_out, bottleneck), true);
        let bias = params.add(format!("{name}.b"), Tensor::zeros(&[dim_out]), true);
        let bn = opts.batchnorm.then(|| BatchNormIds {
            gamma: params.add(format!("{name}.bn.gamma"), Tensor::filled(&[dim_out], S::one()), true),
            beta: params.add(format!("{name}.bn.beta"), Tensor::zeros(&[dim_out]), true),
            running_mean: params.add(format!("{name}.bn.mean"), Tensor::zeros(&[dim_out]), false),
            running_var: params.add(format!("{name}.bn.var"), Tensor::filled(&[dim_out], S::one()), false),
        });
        Self {
            name: name.to_string(),
            dim_in,
            dim_out,
            bottleneck,
            offsets: opts.offsets.to_vec(),
            w_in,
            w_out,
            bias,
            bn,
            relu: opts.relu,
            rho: if dim_in == dim_out { opts.residual_scale } else { 0.0 },
        }
    }

    /// `rho * x + relu(bn(W_out W_in splice(x) + b))`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let cols = g.tape.value(x).cols();
        if cols != self.dim_in {
            return Err(Error::shape("tdnnf", g.tape.value(x).shape(), &[self.dim_in]));
        }
        let spliced = g.tape.splice(x, &self.offsets)?;
        let w_in = g.param(self.w_in);
        let z = g.tape.linear(spliced, w_in)?;
        let w_out = g.param(self.w_out);
        let y = g.tape.linear(z, w_out)?;
        let b = g.param(self.bias);
        let mut y = g.tape.add_bias(y, b)?;
        if let Some(bn) = &self.bn {
            y = g.batchnorm(bn, y)?;
        }
        if self.relu {
            y = g.tape.relu(y);
        }
        if self.rho != 0.0 {
            let r = g.tape.scale(x, self.rho);
            y = g.tape.add(y, r)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<TdnnfLayer>,
}

impl Stack {
    /// `n` layers `dim_in -> hidden -> ... -> hidden`. When `linear_last` is
    /// set, the final layer has no nonlinearity so its outputs can be
    /// negative.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        params: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        n: usize,
        dim_in: usize,
        hidden: usize,
        arch: &ArchConfig,
        linear_last: bool,
    ) -> Self {
        let layers = (0..n)
            .map(|i| {
                let opts = LayerOptions {
                    offsets: &arch.offsets,
                    bottleneck: arch.bottleneck,
                    residual_scale: arch.residual_scale,
                    batchnorm: arch.batchnorm,
                    relu: !(linear_last && i + 1 == n),
                };
                let d_in = if i == 0 { dim_in } else { hidden };
                TdnnfLayer::new(params, rng, &format!("{name}.{i}"), d_in, hidden, opts)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn dim_out(&self) -> Option<usize> {
        self.layers.last().map(|l| l.dim_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn zeros<S: Scalar>(params: &mut ParamSet<S>, name: &str, dim_in: usize, dim_out: usize) -> Self {
        Self {
            w: params.add(format!("{name}.w"), Tensor::zeros(&[dim_out, dim_in]), true),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[dim_out]), true),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.tape.linear(x, w)?;
        let b = g.param(self.b);
        g.tape.add_bias(y, b)
    }
}

/// A tape bound to one parameter snapshot, plus the batch-norm statistics
/// observed while recording it.
pub struct Graph<'p, S> {
    pub tape: Tape<S>,
    params: &'p ParamSet<S>,
    train: bool,
    bn_eps: f64,
    bn_nodes: Vec<(BatchNormIds, Var)>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamSet<S>, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            train,
            bn_eps: 1e-5,
            bn_nodes: Vec::new(),
        }
    }

    pub fn with_bn_eps(mut self, eps: f64) -> Self {
        self.bn_eps = eps;
        self
    }

    pub fn params(&self) -> &'p ParamSet<S> {
        self.params
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.input(t)
    }

    fn batchnorm(&mut self, bn: &BatchNormIds, x: Var) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        if self.train {
            let y = self.tape.batchnorm(x, gamma, beta, None, self.bn_eps)?;
            self.bn_nodes.push((bn.clone(), y));
            Ok(y)
        } else {
            let mean = self.params.get(bn.running_mean).value.to_f64_vec();
            let var = self.params.get(bn.running_var).value.to_f64_vec();
            self.tape.batchnorm(x, gamma, beta, Some((&mean, &var)), self.bn_eps)
        }
    }

    /// Batch statistics of every training-mode batch norm on the tape.
    pub fn bn_stats(&self) -> Vec<BnObservation> {
        self.bn_nodes
            .iter()
            .filter_map(|(ids, v)| {
                self.tape.batch_stats(*v).map(|(m, s)| BnObservation {
                    ids: ids.clone(),
                    mean: m.to_vec(),
                    var: s.to_vec(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub ids: BatchNormIds,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Folds averaged minibatch statistics into the running estimates:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<S: Scalar>(params: &mut ParamSet<S>, batches: &[Vec<BnObservation>], momentum: f64) {
    let Some(first) = batches.first() else { return };
    for (k, obs) in first.iter().enumerate() {
        let n = batches.len() as f64;
        let dim = obs.mean.len();
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for b in batches {
            for j in 0..dim {
                mean[j] += b[k].mean[j] / n;
                var[j] += b[k].var[j] / n;
            }
        }
        for (id, batch) in [(obs.ids.running_mean, &mean), (obs.ids.running_var, &var)] {
            for (r, v) in params.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                *r = S::from_f64(momentum * r.as_f64() + (1.0 - momentum) * v);
            }
        }
    }
}

/// Parameter layout of a full recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchConfig,
    pub dims: Dims,
    pub frontend: Option<Stack>,
    pub audio: Option<Stack>,
    pub visual: Option<Stack>,
    pub fusion: Option<Stack>,
    pub recog: Stack,
    pub output: Affine,
}

impl Network {
    pub fn recog_input_dim(&self) -> usize {
        let h = self.arch.hidden;
        match self.arch.fusion {
            FusionMode::Audio => self.dims.audio,
            FusionMode::Visual => h,
            FusionMode::Concat => self.dims.audio + h,
            FusionMode::Vgate | FusionMode::Avgate => {
                if self.arch.plus_concat {
                    2 * h
                } else {
                    h
                }
            }
        }
    }

    /// Layout for `(arch, dims)` registered into a fresh parameter set with
    /// values drawn from `seed`.
    pub fn build<S: Scalar>(arch: &ArchConfig, dims: Dims, seed: u64) -> Result<(Network, ParamSet<S>)> {
        arch.validate()?;
        if dims.pdfs == 0 || (arch.fusion.uses_audio() && dims.audio == 0) || (arch.fusion.uses_visual() && dims.visual == 0) {
            return Err(Error::Architecture(format!("invalid dimensions {dims:?}")));
        }
        let mut rng = util::rng(util::derive_seed(seed, &[util::tag("network")]));
        let mut params = ParamSet::new();
        let h = arch.hidden;
        let mode = arch.fusion;
        let frontend = mode
            .uses_visual()
            .then(|| Stack::new(&mut params, &mut rng, "frontend", arch.frontend_layers, dims.visual, h, arch, false));
        let audio = mode
            .is_gated()
            .then(|| Stack::new(&mut params, &mut rng, "audio", arch.audio_layers, dims.audio, h, arch, false));
        let visual = mode
            .is_gated()
            .then(|| Stack::new(&mut params, &mut rng, "visual", arch.visual_layers, h, h, arch, true));
        let fusion = (mode == FusionMode::Avgate)
            .then(|| Stack::new(&mut params, &mut rng, "fusion", arch.fusion_layers, 2 * h, h, arch, true));
        let mut net = Network {
            arch: arch.clone(),
            dims,
            frontend,
            audio,
            visual,
            fusion,
            recog: Stack { layers: Vec::new() },
            output: Affine {
                w: ParamId(0),
                b: ParamId(0),
            },
        };
        let recog_in = net.recog_input_dim();
        net.recog = Stack::new(&mut params, &mut rng, "recog", arch.recog_layers, recog_in, h, arch, false);
        net.output = Affine::zeros(&mut params, "output", h, dims.pdfs);
        Ok((net, params))
    }

    /// Rebuilds the layout for stored parameters, checking that every name
    /// and shape matches.
    pub fn from_params<S: Scalar>(arch: &ArchConfig, dims: Dims, stored: &ParamSet<S>) -> Result<Network> {
        let (net, fresh) = Network::build::<S>(arch, dims, 0)?;
        if fresh.len() != stored.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                stored.len()
            )));
        }
        for (a, b) in fresh.iter().zip(stored.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Architecture(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(net)
    }

    /// Every TDNN-F layer in the network.
    pub fn layers(&self) -> impl Iterator<Item = &TdnnfLayer> {
        [&self.frontend, &self.audio, &self.visual, &self.fusion]
            .into_iter()
            .flatten()
            .chain(std::iter::once(&self.recog))
            .flat_map(|s| s.layers.iter())
    }
}

/// Trainable parameter count of a stack, from its shapes alone.
pub fn stack_param_count(stack: &Stack) -> usize {
    stack
        .layers
        .iter()
        .map(|l| {
            let bn = if l.bn.is_some() { 2 * l.dim_out } else { 0 };
            l.bottleneck * l.dim_in * l.offsets.len() + l.dim_out * l.bottleneck + l.dim_out + bn
        })
        .sum()
}

/// `‖P - α² I‖_F` for `P = M Mᵀ`, `α² = tr(P Pᵀ) / tr(P)`.
pub fn orthogonality_error<S: Scalar>(m: &Tensor<S>) -> f64 {
    let p = gram(m);
    let r = m.rows();
    let tr: f64 = (0..r).map(|i| p[i * r + i]).sum();
    if tr == 0.0 {
        return 0.0;
    }
    let alpha2 = p.iter().map(|v| v * v).sum::<f64>() / tr;
    let mut acc = 0.0;
    for i in 0..r {
        for j in 0..r {
            let d = p[i * r + j] - if i == j { alpha2 } else { 0.0 };
            acc += d * d;
        }
    }
    acc.sqrt()
}

fn gram<S: Scalar>(m: &Tensor<S>) -> Vec<f64> {
    let r = m.rows();
    let mut p = vec![0.0f64; r * r];
    for i in 0..r {
        for j in i..r {
            let v: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            p[i * r + j] = v;
            p[j * r + i] = v;
        }
    }
    p
}

/// One step of the semi-orthogonal constraint with `ν = 1/8`:
/// `M ← M − 4ν/α² (P − α² I) M`. Returns `false` (and leaves `M` alone)
/// when `tr(P) = 0` or `M` has more rows than columns.
pub fn semi_orthogonal_step<S: Scalar>(m: &mut Tensor<S>) -> bool {
    const NU: f64 = 0.125;
    let (r, c) = (m.rows(), m.cols());
    if r > c {
        log::warn!("semi-orthogonal step skipped: {r}x{c} matrix has more rows than columns");
        return false;
    }
    let mut p = gram(m);
    let tr: f64 = (0..r).map(|i| p[i * r + i]).sum();
    if tr == 0.0 {
        log::warn!("semi-orthogonal step skipped: zero matrix");
        return false;
    }
    let alpha2 = p.iter().map(|v| v * v).sum::<f64>() / tr;
    for i in 0..r {
        p[i * r + i] -= alpha2;
    }
    let step = 4.0 * NU / alpha2;
    let old: Vec<f64> = m.to_f64_vec();
    let data = m.data_mut();
    for i in 0..r {
        let mut acc = vec![0.0f64; c];
        for k in 0..r {
            let q = p[i * r + k];
            if q != 0.0 {
                for (a, v) in acc.iter_mut().zip(&old[k * c..(k + 1) * c]) {
                    *a += q * v;
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            data[i * c + j] = S::from_f64(old[i * c + j] - step * a);
        }
    }
    true
}

/// Applies [`semi_orthogonal_step`] to the constrained factor of every layer.
pub fn constrain_network<S: Scalar>(net: &Network, params: &mut ParamSet<S>) {
    for layer in net.layers() {
        semi_orthogonal_step(&mut params.get_mut(layer.w_in).value);
    }
}

pub fn constrain_stacks<'a, S: Scalar>(stacks: impl IntoIterator<Item = &'a Stack>, params: &mut ParamSet<S>) {
    for layer in stacks.into_iter().flat_map(|s| s.layers.iter()) {
        semi_orthogonal_step(&mut params.get_mut(layer.w_in).value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn dims() -> Dims {
        Dims {
            audio: 40,
            visual: 8,
            pdfs: 12,
        }
    }

    fn small_arch(fusion: FusionMode) -> ArchConfig {
        ArchConfig {
            fusion,
            hidden: 16,
            bottleneck: 8,
            ..ArchConfig::default()
        }
    }

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = util::rng(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    fn layer_with(dim_in: usize, dim_out: usize, rho: f64, relu: bool) -> (TdnnfLayer, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let mut rng = util::rng(3);
        let opts = LayerOptions {
            offsets: &[-1, 0, 1],
            bottleneck: 4,
            residual_scale: rho,
            batchnorm: false,
            relu,
        };
        let layer = TdnnfLayer::new(&mut params, &mut rng, "l", dim_in, dim_out, opts);
        (layer, params)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (layer, params) = layer_with(3, 5, 0.0, true);
        let mut g = Graph::new(&params, false);
        let x = g.input(Tensor::zeros(&[4, 3]));
        let y = layer.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_input_is_well_defined() {
        let (layer, params) = layer_with(3, 3, 0.66, true);
        let mut g = Graph::new(&params, false);
        let x = g.input(random_tensor(1, 3, 1));
        let y = layer.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y).shape(), &[1, 3]);
        assert!(g.tape.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matches_dense_reference() {
        let (layer, params) = layer_with(3, 3, 0.66, true);
        let input = random_tensor(4, 3, 9);
        let mut g = Graph::new(&params, false);
        let x = g.input(input.clone());
        let y = layer.forward(&mut g, x).unwrap();

        let w_in = &params.get(layer.w_in).value;
        let w_out = &params.get(layer.w_out).value;
        let b = &params.get(layer.bias).value;
        for t in 0..4usize {
            let mut spliced = Vec::new();
            for o in [-1isize, 0, 1] {
                let src = (t as isize + o).clamp(0, 3) as usize;
                spliced.extend_from_slice(input.row(src));
            }
            let z: Vec<f64> = (0..4)
                .map(|k| (0..9).map(|j| w_in.get2(k, j) * spliced[j]).sum())
                .collect();
            for o in 0..3 {
                let pre: f64 = (0..4).map(|k| w_out.get2(o, k) * z[k]).sum::<f64>() + b.data()[o];
                let want = 0.66 * input.get2(t, o) + pre.max(0.0);
                assert!((g.tape.value(y).get2(t, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn audio_only_has_no_visual_params() {
        let (net, params) = Network::build::<f32>(&small_arch(FusionMode::Audio), dims(), 1).unwrap();
        assert!(net.frontend.is_none() && net.visual.is_none());
        assert!(params.iter().all(|p| !p.name.starts_with("frontend") && !p.name.starts_with("visual")));
    }

    #[test]
    fn build_is_deterministic() {
        let arch = small_arch(FusionMode::Avgate);
        let (_, a) = Network::build::<f32>(&arch, dims(), 5).unwrap();
        let (_, b) = Network::build::<f32>(&arch, dims(), 5).unwrap();
        assert_eq!(a, b);
        let (_, c) = Network::build::<f32>(&arch, dims(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vgate_count_is_avgate_minus_fusion() {
        let (v_net, v) = Network::build::<f32>(&small_arch(FusionMode::Vgate), dims(), 1).unwrap();
        let (av_net, av) = Network::build::<f32>(&small_arch(FusionMode::Avgate), dims(), 1).unwrap();
        let fusion_count = stack_param_count(av_net.fusion.as_ref().unwrap());
        assert_eq!(v.count(None), av.count(None) - fusion_count);
        assert_eq!(av.count(Some("fusion.")), fusion_count);
        assert!(v_net.fusion.is_none());
    }

    #[test]
    fn plus_concat_requires_gating() {
        for mode in [FusionMode::Audio, FusionMode::Visual, FusionMode::Concat] {
            let arch = ArchConfig {
                plus_concat: true,
                ..small_arch(mode)
            };
            assert!(matches!(Network::build::<f32>(&arch, dims(), 0), Err(Error::Architecture(_))));
        }
        let arch = ArchConfig {
            plus_concat: true,
            ..small_arch(FusionMode::Vgate)
        };
        assert!(Network::build::<f32>(&arch, dims(), 0).is_ok());
    }

    #[test]
    fn layer_counts_follow_architecture() {
        let (net, _) = Network::build::<f32>(&small_arch(FusionMode::Avgate), dims(), 0).unwrap();
        assert_eq!(net.audio.as_ref().unwrap().layers.len(), 6);
        assert_eq!(net.visual.as_ref().unwrap().layers.len(), 6);
        assert_eq!(net.fusion.as_ref().unwrap().layers.len(), 3);
        assert_eq!(net.recog.layers.len(), 6);
        assert_eq!(net.frontend.as_ref().unwrap().layers.len(), 2);
    }

    #[test]
    fn from_params_detects_mismatch() {
        let (net, params) = Network::build::<f32>(&small_arch(FusionMode::Vgate), dims(), 2).unwrap();
        assert_eq!(Network::from_params(&net.arch, dims(), &params).unwrap(), net);
        assert!(Network::from_params(&small_arch(FusionMode::Avgate), dims(), &params).is_err());
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let mut m = Tensor::<f64>::from_vec(&[2, 3], vec![2.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let before = m.clone();
        semi_orthogonal_step(&mut m);
        assert_eq!(m, before);
    }

    #[test]
    fn row_vector_is_unchanged() {
        let mut m = random_tensor(1, 7, 4);
        let before = m.clone();
        semi_orthogonal_step(&mut m);
        for (a, b) in m.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_matrix_is_skipped() {
        let mut m = Tensor::<f64>::zeros(&[3, 6]);
        assert!(!semi_orthogonal_step(&mut m));
    }

    #[test]
    fn random_4x12_converges() {
        let mut rng = util::rng(11);
        let mut m = uniform_init::<f64, _>(&mut rng, 4, 12);
        let mut prev = orthogonality_error(&m);
        for _ in 0..20 {
            semi_orthogonal_step(&mut m);
            let e = orthogonality_error(&m);
            if prev > 1e-10 {
                assert!(e < prev, "{e} !< {prev}");
            } else {
                assert!(e <= prev + 1e-12);
            }
            prev = e;
        }
        assert!(prev < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn constraint_never_increases_error(seed in any::<u64>(), rows in 1usize..=64, extra in 0usize..=192) {
            let cols = (rows + extra).min(256);
            let mut rng = util::rng(seed);
            let mut m = uniform_init::<f64, _>(&mut rng, rows, cols);
            let mut prev = orthogonality_error(&m);
            for _ in 0..5 {
                semi_orthogonal_step(&mut m);
                let e = orthogonality_error(&m);
                prop_assert!(e <= prev * (1.0 + 1e-9) + 1e-12);
                prev = e;
            }
        }

        #[test]
        fn output_length_matches_input(t in 1usize..12, off in proptest::collection::vec(-3isize..=3, 1..4)) {
            let mut params = ParamSet::<f64>::new();
            let mut rng = util::rng(0);
            let opts = LayerOptions { offsets: &off, bottleneck: 4, residual_scale: 0.66, batchnorm: true, relu: true };
            let layer = TdnnfLayer::new(&mut params, &mut rng, "l", 3, 3, opts);
            for train in [false, true] {
                let mut g = Graph::new(&params, train);
                let x = g.input(random_tensor(t, 3, t as u64));
                let y = layer.forward(&mut g, x).unwrap();
                prop_assert_eq!(g.tape.value(y).shape(), &[t, 3]);
            }
        }
    }
}
