use super::graph::HmmGraph;
use crate::error::{Error, Result};
use crate::util::{log_add, log_sum_exp};

/// Frame scores as a row-major `T x num_pdfs` slice.
#[derive(Debug, Clone, Copy)]
pub struct Scores<'a> {
    pub data: &'a [f64],
    pub num_pdfs: usize,
}

impl<'a> Scores<'a> {
    pub fn new(data: &'a [f64], num_pdfs: usize) -> Result<Self> {
        if num_pdfs == 0 || data.len() % num_pdfs != 0 {
            return Err(Error::shape("scores", &[data.len()], &[num_pdfs]));
        }
        Ok(Self { data, num_pdfs })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.num_pdfs
    }

    #[inline]
    pub fn get(&self, t: usize, pdf: usize) -> f64 {
        self.data[t * self.num_pdfs + pdf]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteScore { frame: i / self.num_pdfs }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbResult {
    /// Total log score from the forward pass.
    pub log_total: f64,
    /// The same quantity computed from the backward pass.
    pub log_total_backward: f64,
    /// Pdf posteriors, `T x num_pdfs`.
    pub posteriors: Vec<f64>,
}

/// Log-semiring forward-backward. With `leaky > 0`, after every frame but
/// the last each state also receives `leaky * π(state) * Σ α`, where `π` is
/// the graph's stationary occupancy.
pub fn forward_backward(graph: &HmmGraph, scores: Scores<'_>, leaky: f64) -> Result<FbResult> {
    if !(0.0..1.0).contains(&leaky) {
        return Err(Error::Config(format!("leaky coefficient {leaky} outside [0, 1)")));
    }
    if scores.num_pdfs != graph.num_pdfs {
        return Err(Error::shape("forward_backward", &[scores.num_pdfs], &[graph.num_pdfs]));
    }
    let t_len = scores.frames();
    if t_len == 0 {
        return Err(Error::Empty("scores"));
    }
    scores.check_finite()?;
    let n = graph.num_states();
    let ninf = f64::NEG_INFINITY;
    let log_leak: Option<Vec<f64>> = (leaky > 0.0).then(|| graph.stationary().iter().map(|p| (leaky * p).ln()).collect());
    let emit = |t: usize, s: usize| scores.get(t, graph.state_pdf[s]);

    let mut alpha = vec![ninf; t_len * n];
    for s in 0..n {
        alpha[s] = graph.initial[s] + emit(0, s);
    }
    let mut carried = vec![ninf; n];
    for t in 1..t_len {
        let prev = &alpha[(t - 1) * n..t * n];
        carried.copy_from_slice(prev);
        if let Some(leak) = &log_leak {
            let total = log_sum_exp(prev);
            for (c, l) in carried.iter_mut().zip(leak) {
                *c = log_add(*c, l + total);
            }
        }
        let mut cur = vec![ninf; n];
        for a in &graph.arcs {
            let v = carried[a.src];
            if v > ninf {
                cur[a.dst] = log_add(cur[a.dst], v + a.log_weight);
            }
        }
        for (s, c) in cur.iter_mut().enumerate() {
            if *c > ninf {
                *c += emit(t, s);
            }
        }
        alpha[t * n..(t + 1) * n].copy_from_slice(&cur);
    }
    let last = &alpha[(t_len - 1) * n..];
    let log_total = log_sum_exp(&last.iter().zip(&graph.finals).map(|(a, f)| a + f).collect::<Vec<_>>());
    if log_total == ninf {
        return Err(Error::BadAlignment("graph admits no path of this length".into()));
    }

    let mut beta = vec![ninf; t_len * n];
    beta[(t_len - 1) * n..].copy_from_slice(&graph.finals);
    for t in (0..t_len - 1).rev() {
        let next: Vec<f64> = (0..n).map(|s| beta[(t + 1) * n + s] + emit(t + 1, s)).collect();
        let mut cur = vec![ninf; n];
        for a in &graph.arcs {
            let v = next[a.dst];
            if v > ninf {
                cur[a.src] = log_add(cur[a.src], v + a.log_weight);
            }
        }
        if let Some(leak) = &log_leak {
            let pooled = log_sum_exp(&cur.iter().zip(leak).map(|(b, l)| b + l).collect::<Vec<_>>());
            for c in cur.iter_mut() {
                *c = log_add(*c, pooled);
            }
        }
        beta[t * n..(t + 1) * n].copy_from_slice(&cur);
    }
    let log_total_backward = log_sum_exp(&(0..n).map(|s| graph.initial[s] + emit(0, s) + beta[s]).collect::<Vec<_>>());

    let mut posteriors = vec![0.0; t_len * graph.num_pdfs];
    for t in 0..t_len {
        let row = &mut posteriors[t * graph.num_pdfs..(t + 1) * graph.num_pdfs];
        for s in 0..n {
            let lg = alpha[t * n + s] + beta[t * n + s] - log_total;
            if lg > ninf {
                row[graph.state_pdf[s]] += lg.exp();
            }
        }
    }
    Ok(FbResult {
        log_total,
        log_total_backward,
        posteriors,
    })
}

#[cfg(test)]
mod tests {
    use super::super::graph::{build_denominator, Arc, HmmTopology};
    use super::*;
    use crate::synthdata::Bigram;

    #[test]
    fn single_state_single_frame() {
        let g = HmmGraph::new(vec![0], vec![], vec![-0.7], vec![0.0], 1).unwrap();
        let r = forward_backward(&g, Scores::new(&[1.3], 1).unwrap(), 0.0).unwrap();
        assert!((r.log_total - 0.6).abs() < 1e-15);
        assert_eq!(r.posteriors, vec![1.0]);
    }

    #[test]
    fn uniform_two_symbol_closed_form() {
        let lm = Bigram::uniform(2);
        let g = build_denominator(&lm, &HmmTopology::new(2, 0.0).unwrap()).unwrap();
        let (a1, a2) = (0.3, -1.2);
        for t_len in 1..=6 {
            let data: Vec<f64> = (0..t_len).flat_map(|_| [a1, a2]).collect();
            let r = forward_backward(&g, Scores::new(&data, 2).unwrap(), 0.0).unwrap();
            let want = t_len as f64 * (0.5 * (f64::exp(a1) + f64::exp(a2))).ln();
            assert!((r.log_total - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_score_reports_frame() {
        let g = HmmGraph::new(
            vec![0],
            vec![Arc {
                src: 0,
                dst: 0,
                pdf: 0,
                log_weight: 0.0,
            }],
            vec![0.0],
            vec![0.0],
            1,
        )
        .unwrap();
        let err = forward_backward(&g, Scores::new(&[0.0, 1.0, f64::NAN], 1).unwrap(), 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteScore { frame: 2 }));
    }

    #[test]
    fn rejects_leaky_out_of_range() {
        let g = HmmGraph::new(vec![0], vec![], vec![0.0], vec![0.0], 1).unwrap();
        assert!(forward_backward(&g, Scores::new(&[0.0], 1).unwrap(), 1.0).is_err());
    }
}
