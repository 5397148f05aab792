//! Modality fusion: the computations that turn acoustic frames `x` and
//! visual frames `v` into per-frame pdf log-posteriors.
//!
//! | mode      | RecogNet input                                   |
//! |-----------|--------------------------------------------------|
//! | `audio`   | `x`                                              |
//! | `visual`  | `VF(v)`                                          |
//! | `concat`  | `[x, VF(v)]`                                     |
//! | `vgate`   | `AudioNet(x) ⊗ σ(VisualNet(VF(v)))`              |
//! | `avgate`  | `AudioNet(x) ⊗ σ(FusionNet([VisualNet(VF(v)), AudioNet(x)]))` |
//!
//! With `plus_concat`, the gated output is additionally concatenated with
//! `VF(v)`. `VF` is the visual front-end.

use std::path::Path;

use crate::autodiff::{ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::rawmat::{self, Magic};
use crate::matrix::Matrix;
use crate::tdnn::{FusionMode, Graph, Network};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replaces the gate pre-activations `m` with this constant.
    pub gate_override: Option<f64>,
}

/// Tape handles of the gating intermediates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateVars {
    pub audio: Var,
    pub m: Var,
    pub g: Var,
    pub h: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forward {
    pub log_post: Var,
    pub gates: Option<GateVars>,
}

/// Gate activity for one utterance: `g = σ(m)` and `h = a ⊗ g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub audio: Matrix,
    pub m: Matrix,
    pub g: Matrix,
    pub h: Matrix,
}

impl GateTrace {
    pub fn from_graph<S: Scalar>(graph: &Graph<'_, S>, vars: GateVars) -> Self {
        let t = |v| graph.tape.value(v).to_matrix();
        Self {
            audio: t(vars.audio),
            m: t(vars.m),
            g: t(vars.g),
            h: t(vars.h),
        }
    }

    /// Stored as one `T x 3H` matrix `[m | g | h]`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let joined = self
            .m
            .hconcat(&self.g)
            .and_then(|mg| mg.hconcat(&self.h))
            .ok_or_else(|| Error::Length("gate trace parts differ in length".into()))?;
        rawmat::write(path, Magic::Gate, &joined)
    }

    pub fn read(path: &Path) -> Result<(Matrix, Matrix, Matrix)> {
        let joined = rawmat::read(path, Magic::Gate)?;
        if joined.cols() % 3 != 0 {
            return Err(Error::format(path, "gate dump width is not a multiple of 3"));
        }
        let h = joined.cols() / 3;
        let part = |k: usize| {
            let rows: Vec<Vec<f32>> = joined.row_iter().map(|r| r[k * h..(k + 1) * h].to_vec()).collect();
            Matrix::from_rows(&rows)
        };
        Ok((part(0), part(1), part(2)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub log_post: Matrix,
    pub trace: Option<GateTrace>,
}

/// Records the full network on `graph`. `x` is `T x D_audio` and `v` is the
/// visual stream already at the acoustic frame rate.
pub fn forward<S: Scalar>(
    net: &Network,
    graph: &mut Graph<'_, S>,
    x: Option<Var>,
    v: Option<Var>,
    opts: ForwardOptions,
) -> Result<Forward> {
    let mode = net.arch.fusion;
    let x = if mode.uses_audio() {
        Some(x.ok_or(Error::Empty("acoustic input"))?)
    } else {
        None
    };
    let v = if mode.uses_visual() {
        Some(v.ok_or(Error::Empty("visual input"))?)
    } else {
        None
    };
    if let (Some(x), Some(v)) = (x, v) {
        let (tx, tv) = (graph.tape.value(x).rows(), graph.tape.value(v).rows());
        if tx != tv {
            return Err(Error::Length(format!("{tx} acoustic frames vs {tv} visual frames")));
        }
    }
    let vf = match (&net.frontend, v) {
        (Some(front), Some(v)) => Some(front.forward(graph, v)?),
        _ => None,
    };
    let mut gates = None;
    let recog_in = match mode {
        FusionMode::Audio => x.expect("audio mode has x"),
        FusionMode::Visual => vf.expect("visual mode has VF"),
        FusionMode::Concat => graph.tape.concat(x.expect("x"), vf.expect("VF"))?,
        FusionMode::Vgate | FusionMode::Avgate => {
            let vf = vf.expect("gated mode has VF");
            let audio = net.audio.as_ref().expect("gated network has AudioNet").forward(graph, x.expect("x"))?;
            let visual = net.visual.as_ref().expect("gated network has VisualNet").forward(graph, vf)?;
            let m = match mode {
                FusionMode::Vgate => visual,
                _ => {
                    let joint = graph.tape.concat(visual, audio)?;
                    net.fusion.as_ref().expect("AV gating has FusionNet").forward(graph, joint)?
                }
            };
            let m = match opts.gate_override {
                Some(c) => {
                    let shape = graph.tape.value(m).shape().to_vec();
                    graph.input(Tensor::filled(&shape, S::from_f64(c)))
                }
                None => m,
            };
            let g = graph.tape.sigmoid(m);
            let h = graph.tape.hadamard(audio, g)?;
            gates = Some(GateVars { audio, m, g, h });
            if net.arch.plus_concat {
                graph.tape.concat(h, vf)?
            } else {
                h
            }
        }
    };
    let hidden = net.recog.forward(graph, recog_in)?;
    let logits = net.output.forward(graph, hidden)?;
    let log_post = graph.tape.log_softmax(logits);
    Ok(Forward { log_post, gates })
}

/// Evaluation-mode forward pass returning plain matrices.
pub fn run(
    net: &Network,
    params: &ParamSet<f32>,
    x: Option<&Matrix>,
    v: Option<&Matrix>,
    opts: ForwardOptions,
) -> Result<FusionOutput> {
    let mut graph = Graph::new(params, false).with_bn_eps(net.arch.bn_eps);
    let xv = x.map(|m| graph.input(Tensor::from_matrix(m)));
    let vv = v.map(|m| graph.input(Tensor::from_matrix(m)));
    let out = forward(net, &mut graph, xv, vv, opts)?;
    Ok(FusionOutput {
        log_post: graph.tape.value(out.log_post).to_matrix(),
        trace: out.gates.map(|g| GateTrace::from_graph(&graph, g)),
    })
}

fn expect_mode(net: &Network, modes: &[FusionMode]) -> Result<()> {
    if modes.contains(&net.arch.fusion) {
        Ok(())
    } else {
        Err(Error::Architecture(format!(
            "network is `{}`, expected one of {modes:?}",
            net.arch.fusion
        )))
    }
}

pub fn forward_concat(net: &Network, params: &ParamSet<f32>, x: &Matrix, v: &Matrix) -> Result<FusionOutput> {
    expect_mode(net, &[FusionMode::Concat])?;
    run(net, params, Some(x), Some(v), ForwardOptions::default())
}

pub fn forward_vgate(
    net: &Network,
    params: &ParamSet<f32>,
    x: &Matrix,
    v: &Matrix,
    opts: ForwardOptions,
) -> Result<FusionOutput> {
    expect_mode(net, &[FusionMode::Vgate])?;
    run(net, params, Some(x), Some(v), opts)
}

pub fn forward_avgate(
    net: &Network,
    params: &ParamSet<f32>,
    x: &Matrix,
    v: &Matrix,
    opts: ForwardOptions,
) -> Result<FusionOutput> {
    expect_mode(net, &[FusionMode::Avgate])?;
    run(net, params, Some(x), Some(v), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdnn::{ArchConfig, Dims};
    use crate::util;
    use rand::Rng;

    const PDFS: usize = 5;

    fn dims() -> Dims {
        Dims {
            audio: 6,
            visual: 4,
            pdfs: PDFS,
        }
    }

    fn arch(fusion: FusionMode, plus_concat: bool) -> ArchConfig {
        ArchConfig {
            fusion,
            plus_concat,
            hidden: 8,
            bottleneck: 4,
            ..ArchConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = util::rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    /// Randomizes every parameter, including the zero-initialized output.
    fn randomize(params: &mut ParamSet<f32>, seed: u64) {
        let mut rng = util::rng(seed);
        for p in params.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform_posteriors() {
        for mode in FusionMode::ALL {
            let (net, params) = Network::build::<f32>(&arch(mode, false), dims(), 1).unwrap();
            for t in [1, 7] {
                let out = run(&net, &params, Some(&random(t, 6, 2)), Some(&random(t, 4, 3)), ForwardOptions::default()).unwrap();
                assert_eq!(out.log_post.shape(), [t, PDFS]);
                let want = -(PDFS as f32).ln();
                assert!(out.log_post.as_slice().iter().all(|&v| v == want), "{mode}");
            }
        }
    }

    #[test]
    fn rows_are_normalized() {
        for mode in FusionMode::ALL {
            let (net, mut params) = Network::build::<f32>(&arch(mode, false), dims(), 1).unwrap();
            randomize(&mut params, 4);
            let out = run(&net, &params, Some(&random(9, 6, 2)), Some(&random(9, 4, 3)), ForwardOptions::default()).unwrap();
            for row in out.log_post.row_iter() {
                let s: f32 = row.iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let (net, params) = Network::build::<f32>(&arch(FusionMode::Concat, false), dims(), 1).unwrap();
        let err = forward_concat(&net, &params, &random(5, 6, 1), &random(4, 4, 1)).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn concat_is_permutation_equivariant_on_interior() {
        let a = ArchConfig {
            recog_layers: 1,
            frontend_layers: 1,
            offsets: vec![0],
            ..arch(FusionMode::Concat, false)
        };
        let (net, mut params) = Network::build::<f32>(&a, dims(), 1).unwrap();
        randomize(&mut params, 8);
        let (x, v) = (random(6, 6, 1), random(6, 4, 2));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let px = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let pv = Matrix::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>());
        let out = forward_concat(&net, &params, &x, &v).unwrap();
        let pout = forward_concat(&net, &params, &px, &pv).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pout.log_post.row(k), out.log_post.row(i));
        }
    }

    #[test]
    fn open_gate_passes_audio_through() {
        let (net, mut params) = Network::build::<f32>(&arch(FusionMode::Vgate, false), dims(), 1).unwrap();
        randomize(&mut params, 5);
        let opts = ForwardOptions {
            gate_override: Some(40.0),
        };
        let out = forward_vgate(&net, &params, &random(7, 6, 1), &random(7, 4, 2), opts).unwrap();
        let tr = out.trace.unwrap();
        for (h, a) in tr.h.as_slice().iter().zip(tr.audio.as_slice()) {
            assert!((h - a).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn closed_gate_silences_audio() {
        let (net, params) = Network::build::<f32>(&arch(FusionMode::Vgate, false), dims(), 1).unwrap();
        let opts = ForwardOptions {
            gate_override: Some(-40.0),
        };
        let out = forward_vgate(&net, &params, &random(7, 6, 1), &random(7, 4, 2), opts).unwrap();
        let tr = out.trace.unwrap();
        assert!(tr.h.as_slice().iter().all(|h| h.abs() < 1e-12));
        let want = -(PDFS as f32).ln();
        assert!(out.log_post.as_slice().iter().all(|v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn gate_trace_is_consistent() {
        for (mode, plus) in [(FusionMode::Vgate, false), (FusionMode::Avgate, true)] {
            let (net, mut params) = Network::build::<f32>(&arch(mode, plus), dims(), 1).unwrap();
            randomize(&mut params, 6);
            let out = run(&net, &params, Some(&random(8, 6, 1)), Some(&random(8, 4, 2)), ForwardOptions::default()).unwrap();
            let tr = out.trace.unwrap();
            assert!(tr.m.as_slice().iter().any(|&m| m < 0.0));
            for ((m, g), (h, a)) in tr.m.as_slice().iter().zip(tr.g.as_slice()).zip(tr.h.as_slice().iter().zip(tr.audio.as_slice())) {
                assert!(*g > 0.0 && *g < 1.0);
                let want = 1.0 / (1.0 + (-(*m as f64)).exp());
                assert!((*g as f64 - want).abs() < 1e-6);
                assert_eq!(*h, a * g);
            }
        }
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let (net, params) = Network::build::<f32>(&arch(FusionMode::Vgate, false), dims(), 1).unwrap();
        assert!(forward_avgate(&net, &params, &random(3, 6, 1), &random(3, 4, 1), ForwardOptions::default()).is_err());
    }

    #[test]
    fn gate_dump_round_trip() {
        let (net, mut params) = Network::build::<f32>(&arch(FusionMode::Avgate, false), dims(), 1).unwrap();
        randomize(&mut params, 2);
        let tr = run(&net, &params, Some(&random(4, 6, 1)), Some(&random(4, 4, 2)), ForwardOptions::default())
            .unwrap()
            .trace
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.gate");
        tr.write(&path).unwrap();
        let (m, g, h) = GateTrace::read(&path).unwrap();
        assert_eq!((m, g, h), (tr.m, tr.g, tr.h));
    }
}
