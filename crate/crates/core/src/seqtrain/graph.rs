use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Bigram;

/// One emitting state per symbol with a self-loop; pdf id = symbol index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmTopology {
    pub num_symbols: usize,
    pub p_self: f64,
}

impl HmmTopology {
    pub fn new(num_symbols: usize, p_self: f64) -> Result<Self> {
        if num_symbols == 0 {
            return Err(Error::Config("topology needs at least one symbol".into()));
        }
        if !(0.0..1.0).contains(&p_self) {
            return Err(Error::Config(format!("self-loop probability {p_self} outside [0, 1)")));
        }
        Ok(Self { num_symbols, p_self })
    }

    /// Log-probability of moving from `from` to `to` under `lm`: the self-loop
    /// and the bigram arc merge when `from == to`.
    pub fn transition(&self, lm: &Bigram, from: usize, to: usize) -> f64 {
        let stay = if from == to { self.p_self } else { 0.0 };
        (stay + (1.0 - self.p_self) * lm.transitions[from][to]).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    /// Always the pdf of `dst`: states emit on entry.
    pub pdf: usize,
    pub log_weight: f64,
}

/// Weighted HMM graph. A path through states `s_0 .. s_{T-1}` scores
/// `initial[s_0] + Σ arc weights + final[s_{T-1}]` plus the frame scores of
/// each state's pdf.
#[derive(Debug, Clone)]
pub struct HmmGraph {
    pub state_pdf: Vec<usize>,
    pub arcs: Vec<Arc>,
    pub initial: Vec<f64>,
    pub finals: Vec<f64>,
    pub num_pdfs: usize,
    /// Frame index of each state for time-expanded graphs.
    pub state_time: Option<Vec<usize>>,
    stationary: OnceLock<Vec<f64>>,
}

impl PartialEq for HmmGraph {
    fn eq(&self, other: &Self) -> bool {
        self.state_pdf == other.state_pdf
            && self.arcs == other.arcs
            && self.initial == other.initial
            && self.finals == other.finals
            && self.num_pdfs == other.num_pdfs
            && self.state_time == other.state_time
    }
}

impl HmmGraph {
    pub fn new(state_pdf: Vec<usize>, arcs: Vec<Arc>, initial: Vec<f64>, finals: Vec<f64>, num_pdfs: usize) -> Result<Self> {
        let g = Self {
            state_pdf,
            arcs,
            initial,
            finals,
            num_pdfs,
            state_time: None,
            stationary: OnceLock::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn num_states(&self) -> usize {
        self.state_pdf.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states();
        if self.initial.len() != n || self.finals.len() != n {
            return Err(Error::Config("initial/final weights do not match state count".into()));
        }
        if let Some(&p) = self.state_pdf.iter().find(|&&p| p >= self.num_pdfs) {
            return Err(Error::Config(format!("pdf id {p} out of range")));
        }
        for a in &self.arcs {
            if a.src >= n || a.dst >= n || a.pdf != self.state_pdf[a.dst] {
                return Err(Error::Config(format!("malformed arc {a:?}")));
            }
        }
        Ok(())
    }

    /// Stationary state occupancy of the transition structure, by power
    /// iteration from the initial distribution (tolerance 1e-10, at most
    /// 10k iterations, renormalized each step).
    pub fn stationary(&self) -> &[f64] {
        self.stationary.get_or_init(|| {
            let n = self.num_states();
            let mut pi: Vec<f64> = self.initial.iter().map(|w| w.exp()).collect();
            normalize(&mut pi);
            for _ in 0..10_000 {
                let mut next = vec![0.0; n];
                for a in &self.arcs {
                    next[a.dst] += pi[a.src] * a.log_weight.exp();
                }
                if !normalize(&mut next) {
                    break;
                }
                let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
                pi = next;
                if delta < 1e-10 {
                    break;
                }
            }
            pi
        })
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|x| *x /= s);
        true
    } else {
        false
    }
}

/// Bigram composed with the topology: one state per symbol, arcs between
/// every pair of symbols the model allows.
pub fn build_denominator(lm: &Bigram, topo: &HmmTopology) -> Result<HmmGraph> {
    let names: Vec<String> = (0..lm.num_symbols()).map(|i| format!("#{i}")).collect();
    lm.validate(&names)?;
    let n = topo.num_symbols;
    if lm.num_symbols() != n {
        return Err(Error::Config(format!("bigram has {} symbols, topology {n}", lm.num_symbols())));
    }
    let mut arcs = Vec::new();
    for s in 0..n {
        for d in 0..n {
            let w = topo.transition(lm, s, d);
            if w.is_finite() {
                arcs.push(Arc {
                    src: s,
                    dst: d,
                    pdf: d,
                    log_weight: w,
                });
            }
        }
    }
    let initial = lm.start.iter().map(|p| p.ln()).collect();
    HmmGraph::new((0..n).collect(), arcs, initial, vec![0.0; n], n)
}

/// Time-expanded graph of all segmentations whose symbol boundaries lie
/// within `±window` frames of the alignment's boundaries. Arc weights match
/// the denominator's so numerator paths are a subset of denominator paths.
pub fn build_numerator(alignment: &[usize], lm: &Bigram, topo: &HmmTopology, window: usize) -> Result<HmmGraph> {
    let t_len = alignment.len();
    if t_len == 0 {
        return Err(Error::BadAlignment("empty alignment".into()));
    }
    if let Some(&bad) = alignment.iter().find(|&&s| s >= topo.num_symbols) {
        return Err(Error::BadAlignment(format!("label {bad} outside the symbol set")));
    }
    let mut syms = vec![alignment[0]];
    let mut bounds = vec![0usize];
    for (t, w) in alignment.windows(2).enumerate() {
        if w[0] != w[1] {
            syms.push(w[1]);
            bounds.push(t + 1);
        }
    }
    let k_len = syms.len();
    let w = window as isize;
    // Frames segment k may occupy: from its earliest start to one before the
    // next segment's latest start.
    let first = |k: usize| if k == 0 { 0 } else { (bounds[k] as isize - w).max(1) as usize };
    let last = |k: usize| {
        if k + 1 == k_len {
            t_len - 1
        } else {
            ((bounds[k + 1] as isize + w - 1).min(t_len as isize - 1)) as usize
        }
    };
    let allowed = |t: usize, k: usize| t >= first(k) && t <= last(k);

    let mut fwd = vec![vec![false; k_len]; t_len];
    fwd[0][0] = true;
    for t in 1..t_len {
        for k in 0..k_len {
            if allowed(t, k) {
                fwd[t][k] = fwd[t - 1][k] || (k > 0 && fwd[t - 1][k - 1]);
            }
        }
    }
    let mut bwd = vec![vec![false; k_len]; t_len];
    bwd[t_len - 1][k_len - 1] = fwd[t_len - 1][k_len - 1];
    for t in (0..t_len - 1).rev() {
        for k in 0..k_len {
            if fwd[t][k] {
                bwd[t][k] = bwd[t + 1][k] || (k + 1 < k_len && bwd[t + 1][k + 1]);
            }
        }
    }
    if !bwd[0][0] {
        return Err(Error::BadAlignment(format!(
            "{k_len} segments cannot fit in {t_len} frames"
        )));
    }
    for k in 1..k_len {
        if syms[k] == syms[k - 1] || !topo.transition(lm, syms[k - 1], syms[k]).is_finite() {
            return Err(Error::BadAlignment(format!(
                "transition {} -> {} not allowed by the LM",
                syms[k - 1],
                syms[k]
            )));
        }
    }

    let mut id = vec![vec![usize::MAX; k_len]; t_len];
    let mut state_pdf = Vec::new();
    let mut state_time = Vec::new();
    for t in 0..t_len {
        for k in 0..k_len {
            if bwd[t][k] {
                id[t][k] = state_pdf.len();
                state_pdf.push(syms[k]);
                state_time.push(t);
            }
        }
    }
    let n = state_pdf.len();
    let mut arcs = Vec::new();
    for t in 0..t_len - 1 {
        for k in 0..k_len {
            if !bwd[t][k] {
                continue;
            }
            for k2 in [k, k + 1] {
                if k2 < k_len && bwd[t + 1][k2] {
                    arcs.push(Arc {
                        src: id[t][k],
                        dst: id[t + 1][k2],
                        pdf: syms[k2],
                        log_weight: topo.transition(lm, syms[k], syms[k2]),
                    });
                }
            }
        }
    }
    let mut initial = vec![f64::NEG_INFINITY; n];
    initial[id[0][0]] = lm.start[syms[0]].ln();
    let mut finals = vec![f64::NEG_INFINITY; n];
    finals[id[t_len - 1][k_len - 1]] = 0.0;
    let mut g = HmmGraph::new(state_pdf, arcs, initial, finals, topo.num_symbols)?;
    g.state_time = Some(state_time);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(n: usize) -> HmmTopology {
        HmmTopology::new(n, 0.75).unwrap()
    }

    fn count_paths(g: &HmmGraph, t_len: usize) -> usize {
        let mut ways: Vec<usize> = g.initial.iter().map(|w| usize::from(w.is_finite())).collect();
        for _ in 1..t_len {
            let mut next = vec![0; g.num_states()];
            for a in &g.arcs {
                next[a.dst] += ways[a.src];
            }
            ways = next;
        }
        ways.iter().zip(&g.finals).filter(|(_, f)| f.is_finite()).map(|(w, _)| w).sum()
    }

    #[test]
    fn denominator_has_one_state_per_symbol() {
        let lm = Bigram::uniform(5);
        let g = build_denominator(&lm, &topo(5)).unwrap();
        assert_eq!(g.num_states(), 5);
        for s in 0..5 {
            let out: f64 = g.arcs.iter().filter(|a| a.src == s).map(|a| a.log_weight.exp()).sum();
            assert!((out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn denominator_rejects_unnormalized_row() {
        let mut lm = Bigram::uniform(3);
        lm.transitions[1][2] = 0.9;
        match build_denominator(&lm, &topo(3)) {
            Err(Error::UnnormalizedBigram { row, .. }) => assert_eq!(row, "#1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exact_numerator_has_single_path() {
        let lm = Bigram::uniform(3);
        let g = build_numerator(&[0, 0, 1], &lm, &topo(3), 0).unwrap();
        assert_eq!(count_paths(&g, 3), 1);
        assert_eq!(g.num_states(), 3);
    }

    #[test]
    fn window_two_gives_five_boundaries() {
        let lm = Bigram::uniform(2);
        let ali: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
        let g = build_numerator(&ali, &lm, &topo(2), 2).unwrap();
        assert_eq!(count_paths(&g, 20), 5);
        let depth = g.state_time.as_ref().unwrap().iter().max().unwrap() + 1;
        assert_eq!(depth, 20);
    }

    #[test]
    fn window_is_clipped_by_short_segments() {
        let lm = Bigram::uniform(3);
        let g = build_numerator(&[0, 1, 2], &lm, &topo(3), 2).unwrap();
        assert_eq!(count_paths(&g, 3), 1);
    }

    #[test]
    fn invalid_alignments_are_rejected() {
        let mut lm = Bigram::uniform(2);
        lm.transitions = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(build_numerator(&[0, 0, 1, 1, 0], &lm, &topo(2), 1).is_ok());
        assert!(matches!(build_numerator(&[], &lm, &topo(2), 1), Err(Error::BadAlignment(_))));
        assert!(matches!(build_numerator(&[0, 5], &lm, &topo(2), 1), Err(Error::BadAlignment(_))));
    }

    #[test]
    fn stationary_is_a_fixed_point() {
        let mut rng = crate::util::rng(3);
        let lm = Bigram::random(4, 2.0, &mut rng);
        let g = build_denominator(&lm, &topo(4)).unwrap();
        let pi = g.stationary();
        let mut next = vec![0.0; 4];
        for a in &g.arcs {
            next[a.dst] += pi[a.src] * a.log_weight.exp();
        }
        for (a, b) in next.iter().zip(pi) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
