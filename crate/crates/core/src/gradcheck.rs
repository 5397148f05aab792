//! Finite-difference verification of every differentiable tape operation and
//! of the full LF-MMI gradient through each fusion architecture.
//!
//! The analytic gradient is computed at the requested precision; the
//! central-difference oracle always runs in `f64` at the same parameter
//! values (all test values are `f32`-representable).

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{Grads, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, ForwardOptions};
use crate::seqtrain::{build_denominator, build_numerator, lfmmi_loss, HmmGraph, HmmTopology, Scores};
use crate::synthdata::Bigram;
use crate::tdnn::{ArchConfig, Dims, FusionMode, Graph, Network};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Relative-error tolerance for this precision.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }

}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Parse(format!("unknown precision `{s}`"))),
        }
    }
}

/// Step of the fourth-order central difference
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
const FD_STEP: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
/// with `floor = REL_FLOOR * max(1, max |analytic gradient|)`, so entries
/// that are negligible next to the rest of the gradient are judged on the
/// gradient's own scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// ReLU input signs; see [`Tape::relu_pattern`].
    pub relu_pattern: Vec<bool>,
}

/// A scalar function of a parameter set that can be evaluated at any
/// precision, optionally accumulating its gradient.
pub trait Objective {
    fn eval<S: Scalar>(&self, params: &ParamSet<S>, grads: Option<&mut Grads<S>>) -> Result<Evaluation>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckStats {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink; the central
    /// difference is meaningless there.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error over the first `limit` usable coordinates of
/// `coords` (all trainable coordinates when `None`).
pub fn check<O: Objective>(
    obj: &O,
    master: &ParamSet<f64>,
    precision: Precision,
    coords: Option<&[(usize, usize)]>,
    limit: usize,
) -> Result<CheckStats> {
    let analytic: Vec<Vec<f64>> = match precision {
        Precision::F64 => {
            let mut g = master.zero_grads();
            obj.eval(master, Some(&mut g))?;
            g.iter().map(|b| b.to_vec()).collect()
        }
        Precision::F32 => {
            let p32 = master.cast::<f32>();
            let mut g = p32.zero_grads();
            obj.eval(&p32, Some(&mut g))?;
            g.iter().map(|b| b.iter().map(|&v| v as f64).collect()).collect()
        }
    };
    let floor = REL_FLOOR * analytic.iter().flatten().fold(1.0f64, |m, g| m.max(g.abs()));
    let base = obj.eval(master, None)?.relu_pattern;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = trainable_coords(master);
            &all
        }
    };
    let mut stats = CheckStats {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = master.clone();
    for &(pi, ei) in coords {
        if stats.checked == limit {
            break;
        }
        let id = crate::autodiff::ParamId(pi);
        let orig = probe.get(id).value.data()[ei];
        let mut at = |delta: f64| {
            probe.get_mut(id).value.data_mut()[ei] = orig + delta;
            obj.eval(&probe, None)
        };
        let evals = [at(FD_STEP)?, at(-FD_STEP)?, at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?];
        probe.get_mut(id).value.data_mut()[ei] = orig;
        if evals.iter().any(|e| e.relu_pattern != base) {
            stats.skipped += 1;
            continue;
        }
        let [hi, lo, hi2, lo2] = evals.map(|e| e.value);
        let numeric = (8.0 * (hi - lo) - (hi2 - lo2)) / (12.0 * FD_STEP);
        stats.max_rel_error = stats.max_rel_error.max(relative_error(analytic[pi][ei], numeric, floor));
        stats.checked += 1;
    }
    Ok(stats)
}

fn trainable_coords(params: &ParamSet<f64>) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(i, p)| (0..p.value.numel()).map(move |e| (i, e)))
        .collect()
}

/// Uniform values rounded to `f32`, kept at least `margin` away from zero so
/// ReLU kinks are not straddled by the finite difference.
fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < margin {
                v = margin.copysign(v);
            }
            v as f32 as f64
        })
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Linear,
    AddBias,
    Add,
    Scale,
    Relu,
    Sigmoid,
    Hadamard,
    Concat,
    Splice,
    LogSoftmax,
    BatchNormTrain,
    BatchNormEval,
    Mse,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Hadamard,
        OpKind::Concat,
        OpKind::Splice,
        OpKind::LogSoftmax,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Mse,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Hadamard => "hadamard",
            OpKind::Concat => "concat",
            OpKind::Splice => "splice",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::BatchNormTrain => "batchnorm_train",
            OpKind::BatchNormEval => "batchnorm_eval",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

/// One op applied to parameters `a` (and `b` where binary), projected to a
/// scalar by a fixed random weighting of its output.
pub struct OpCase {
    pub op: OpKind,
    pub master: ParamSet<f64>,
    projection: Tensor<f64>,
    running: (Vec<f64>, Vec<f64>),
}

impl OpCase {
    /// Random instance with shapes up to 8 x 8.
    pub fn random(op: OpKind, seed: u64) -> Self {
        let mut rng = util::rng(util::derive_seed(seed, &[util::tag(op.name())]));
        let r = rng.random_range(2..=8);
        let c = rng.random_range(2..=8);
        let k = rng.random_range(2..=8);
        let mut master = ParamSet::new();
        let margin = if op == OpKind::Relu { 1e-3 } else { 0.0 };
        let shapes: Vec<Vec<usize>> = match op {
            OpKind::Matmul => vec![vec![r, k], vec![k, c]],
            OpKind::Linear => vec![vec![r, k], vec![c, k]],
            OpKind::AddBias => vec![vec![r, c], vec![c]],
            OpKind::Concat => vec![vec![r, c], vec![r, k]],
            OpKind::Add | OpKind::Hadamard | OpKind::Mse => vec![vec![r, c], vec![r, c]],
            OpKind::BatchNormTrain | OpKind::BatchNormEval => vec![vec![r, c], vec![c], vec![c]],
            _ => vec![vec![r, c]],
        };
        for (i, s) in shapes.iter().enumerate() {
            master.add(["a", "b", "c"][i], random_tensor(&mut rng, s, margin), true);
        }
        let out_shape = {
            let mut tape = Tape::<f64>::new();
            let out = apply(op, &mut tape, &master, None).expect("valid shapes");
            tape.value(out).shape().to_vec()
        };
        let projection = random_tensor(&mut rng, &out_shape, 0.0);
        let running = (
            (0..c).map(|_| rng.random_range(-0.5..0.5) as f32 as f64).collect(),
            (0..c).map(|_| rng.random_range(0.5..2.0) as f32 as f64).collect(),
        );
        Self {
            op,
            master,
            projection,
            running,
        }
    }
}

fn apply<S: Scalar>(op: OpKind, tape: &mut Tape<S>, params: &ParamSet<S>, running: Option<(&[f64], &[f64])>) -> Result<Var> {
    let p = |tape: &mut Tape<S>, i: usize| tape.param(params, crate::autodiff::ParamId(i));
    let a = p(tape, 0);
    match op {
        OpKind::Matmul => {
            let b = p(tape, 1);
            tape.matmul(a, b)
        }
        OpKind::Linear => {
            let b = p(tape, 1);
            tape.linear(a, b)
        }
        OpKind::AddBias => {
            let b = p(tape, 1);
            tape.add_bias(a, b)
        }
        OpKind::Add => {
            let b = p(tape, 1);
            tape.add(a, b)
        }
        OpKind::Scale => Ok(tape.scale(a, -1.7)),
        OpKind::Relu => Ok(tape.relu(a)),
        OpKind::Sigmoid => Ok(tape.sigmoid(a)),
        OpKind::Hadamard => {
            let b = p(tape, 1);
            tape.hadamard(a, b)
        }
        OpKind::Concat => {
            let b = p(tape, 1);
            tape.concat(a, b)
        }
        OpKind::Splice => tape.splice(a, &[-2, 0, 1]),
        OpKind::LogSoftmax => Ok(tape.log_softmax(a)),
        OpKind::BatchNormTrain | OpKind::BatchNormEval => {
            let g = p(tape, 1);
            let b = p(tape, 2);
            let stats = if op == OpKind::BatchNormEval { running } else { None };
            tape.batchnorm(a, g, b, stats, 1e-5)
        }
        OpKind::Mse => {
            let b = p(tape, 1);
            tape.mse(a, b)
        }
        OpKind::Sum => Ok(tape.sum(a)),
        OpKind::Mean => Ok(tape.mean(a)),
    }
}

impl Objective for OpCase {
    fn eval<S: Scalar>(&self, params: &ParamSet<S>, grads: Option<&mut Grads<S>>) -> Result<Evaluation> {
        let mut tape = Tape::<S>::new();
        let running = (self.running.0.as_slice(), self.running.1.as_slice());
        let out = apply(self.op, &mut tape, params, Some(running))?;
        let w = tape.input(self.projection.cast());
        let weighted = tape.hadamard(out, w)?;
        let loss = tape.sum(weighted);
        if let Some(g) = grads {
            tape.backward(loss, g)?;
        }
        Ok(Evaluation {
            value: tape.value(loss).data()[0].as_f64(),
            relu_pattern: tape.relu_pattern(),
        })
    }
}

/// Network shapes used for the architecture checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetVariant {
    pub fusion: FusionMode,
    pub plus_concat: bool,
    pub batchnorm: bool,
}

impl NetVariant {
    pub fn label(&self) -> String {
        let mut s = self.fusion.to_string();
        if self.plus_concat {
            s.push_str("+concat");
        }
        if self.batchnorm {
            s.push_str("+bn");
        }
        s
    }

    /// Every fusion architecture, with and without the concatenation
    /// skip; batch normalisation is off as in the default configuration.
    pub fn all() -> Vec<NetVariant> {
        let v = |fusion, plus_concat, batchnorm| NetVariant {
            fusion,
            plus_concat,
            batchnorm,
        };
        vec![
            v(FusionMode::Audio, false, false),
            v(FusionMode::Visual, false, false),
            v(FusionMode::Concat, false, false),
            v(FusionMode::Vgate, false, false),
            v(FusionMode::Vgate, true, false),
            v(FusionMode::Avgate, false, false),
            v(FusionMode::Avgate, true, false),
        ]
    }
}

/// LF-MMI objective (λ_CE = 0.1, leaky = 0.1) of a small random network on
/// a `T = 5` utterance, as a function of all network parameters.
pub struct LfmmiCase {
    pub net: Network,
    pub master: ParamSet<f64>,
    x: Option<Tensor<f64>>,
    v: Option<Tensor<f64>>,
    num: HmmGraph,
    den: HmmGraph,
    alignment: Vec<usize>,
}

pub const LFMMI_FRAMES: usize = 5;
pub const LFMMI_LAMBDA_CE: f64 = 0.1;
pub const LFMMI_LEAKY: f64 = 0.1;

impl LfmmiCase {
    pub fn random(variant: NetVariant, seed: u64) -> Result<Self> {
        let arch = ArchConfig {
            fusion: variant.fusion,
            plus_concat: variant.plus_concat,
            batchnorm: variant.batchnorm,
            hidden: 6,
            bottleneck: 4,
            ..ArchConfig::default()
        };
        let pdfs = 3;
        let dims = Dims {
            audio: 4,
            visual: 3,
            pdfs,
        };
        let (net, mut master) = Network::build::<f64>(&arch, dims, seed)?;
        let mut rng = util::rng(util::derive_seed(seed, &[util::tag("gradcheck-net")]));
        for p in master.iter_mut() {
            let shape = p.value.shape().to_vec();
            let scale = if p.name.starts_with("output.") || p.name.ends_with(".b") { 1.0 } else { 0.0 };
            if scale > 0.0 {
                p.value = random_tensor(&mut rng, &shape, 0.0);
            } else {
                p.value = Tensor::from_vec(&shape, p.value.data().iter().map(|&v| v as f32 as f64).collect())?;
            }
        }
        let x = variant.fusion.uses_audio().then(|| random_tensor(&mut rng, &[LFMMI_FRAMES, dims.audio], 0.0));
        let v = variant.fusion.uses_visual().then(|| random_tensor(&mut rng, &[LFMMI_FRAMES, dims.visual], 0.0));
        let lm = Bigram::random(pdfs, 1.0, &mut rng);
        let topo = HmmTopology::new(pdfs, 0.5)?;
        let den = build_denominator(&lm, &topo)?;
        let first = rng.random_range(0..pdfs);
        let second = (first + rng.random_range(1..pdfs)) % pdfs;
        let cut = rng.random_range(1..LFMMI_FRAMES);
        let alignment: Vec<usize> = (0..LFMMI_FRAMES).map(|t| if t < cut { first } else { second }).collect();
        let num = build_numerator(&alignment, &lm, &topo, 1)?;
        Ok(Self {
            net,
            master,
            x,
            v,
            num,
            den,
            alignment,
        })
    }
}

impl Objective for LfmmiCase {
    fn eval<S: Scalar>(&self, params: &ParamSet<S>, grads: Option<&mut Grads<S>>) -> Result<Evaluation> {
        let mut g = Graph::new(params, true).with_bn_eps(self.net.arch.bn_eps);
        let x = self.x.as_ref().map(|t| g.input(t.cast()));
        let v = self.v.as_ref().map(|t| g.input(t.cast()));
        let out = fusion::forward(&self.net, &mut g, x, v, ForwardOptions::default())?;
        let scores = g.tape.value(out.log_post).to_f64_vec();
        let loss = lfmmi_loss(
            Scores::new(&scores, self.net.dims.pdfs)?,
            &self.num,
            &self.den,
            &self.alignment,
            LFMMI_LAMBDA_CE,
            LFMMI_LEAKY,
        )?;
        if let Some(gr) = grads {
            let seed: Vec<S> = loss.grad.iter().map(|&d| S::from_f64(d)).collect();
            let seed = Tensor::from_vec(g.tape.value(out.log_post).shape(), seed)?;
            g.tape.backward_with(out.log_post, &seed, gr)?;
        }
        Ok(Evaluation {
            value: loss.objective,
            relu_pattern: g.tape.relu_pattern(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub precision: Precision,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!("gradcheck seed={} precision={}\n", self.seed, self.precision);
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<24} cases={:<3} coords={:<5} kinks={:<3} max_rel={:.3e} tol={:.0e} {}",
                r.name,
                r.cases,
                r.checked,
                r.skipped,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        let passed = self.results.iter().filter(|r| r.passed()).count();
        let _ = writeln!(out, "summary: {passed}/{} passed", self.results.len());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteConfig {
    pub op_seeds: usize,
    pub net_seeds: usize,
    /// Parameter coordinates sampled per network instance.
    pub net_coords: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            op_seeds: 10,
            net_seeds: 20,
            net_coords: 48,
        }
    }
}

/// Checks one architecture over `seeds` random instances.
pub fn check_network(variant: NetVariant, root: u64, seeds: usize, coords: usize, precision: Precision) -> Result<CheckResult> {
    let mut result = CheckResult {
        name: format!("lfmmi/{}", variant.label()),
        cases: seeds,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        tolerance: precision.tolerance(),
    };
    for s in 0..seeds {
        let seed = util::derive_seed(root, &[util::tag(&variant.label()), s as u64]);
        let case = LfmmiCase::random(variant, seed)?;
        let mut all = trainable_coords(&case.master);
        let mut rng = util::rng(seed);
        rand::seq::SliceRandom::shuffle(all.as_mut_slice(), &mut rng);
        result.absorb(check(&case, &case.master, precision, Some(&all), coords)?);
    }
    Ok(result)
}

impl CheckResult {
    fn absorb(&mut self, s: CheckStats) {
        self.checked += s.checked;
        self.skipped += s.skipped;
        self.max_rel_error = self.max_rel_error.max(s.max_rel_error);
    }
}

pub fn run_suite(root: u64, precision: Precision, cfg: SuiteConfig) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for op in OpKind::ALL {
        let mut result = CheckResult {
            name: format!("op/{}", op.name()),
            cases: cfg.op_seeds,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            tolerance: precision.tolerance(),
        };
        for s in 0..cfg.op_seeds {
            let case = OpCase::random(op, util::derive_seed(root, &[s as u64]));
            result.absorb(check(&case, &case.master, precision, None, usize::MAX)?);
        }
        results.push(result);
    }
    for variant in NetVariant::all() {
        results.push(check_network(variant, root, cfg.net_seeds, cfg.net_coords, precision)?);
    }
    Ok(GradcheckReport {
        seed: root,
        precision,
        results,
    })
}
