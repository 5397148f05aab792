use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-9;

/// Symbol bigram: start distribution plus row-stochastic transitions.
///
/// The same model samples transcripts, drives the denominator graph and acts
/// as the decoding LM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bigram {
    pub start: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl Bigram {
    pub fn uniform(n: usize) -> Self {
        Self {
            start: vec![1.0 / n as f64; n],
            transitions: vec![vec![1.0 / n as f64; n]; n],
        }
    }

    /// Random bigram with a zero diagonal (no symbol follows itself, so
    /// transcripts survive collapsing of repeated frame labels). Row weights
    /// are drawn from `[0.15, 1]` and raised to `sharpness` before
    /// normalization; larger values make the LM more predictive.
    pub fn random<R: Rng>(n: usize, sharpness: f64, rng: &mut R) -> Self {
        assert!(n >= 2, "bigram needs at least two symbols");
        let mut draw_row = |skip: Option<usize>| -> Vec<f64> {
            let mut row: Vec<f64> = (0..n)
                .map(|j| {
                    let w: f64 = rng.random_range(0.15..1.0);
                    if Some(j) == skip {
                        0.0
                    } else {
                        w.powf(sharpness)
                    }
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
            row
        };
        let start = draw_row(None);
        let transitions = (0..n).map(|i| draw_row(Some(i))).collect();
        Self { start, transitions }
    }

    pub fn num_symbols(&self) -> usize {
        self.start.len()
    }

    pub fn validate(&self, names: &[String]) -> Result<()> {
        let n = self.start.len();
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        let check = |row: &[f64], label: String| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::UnnormalizedBigram { row: label, sum });
            }
            Ok(())
        };
        check(&self.start, "<s>".to_string())?;
        if self.transitions.len() != n {
            return Err(Error::Config(format!(
                "bigram has {} rows for {n} symbols",
                self.transitions.len()
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            check(row, name(i))?;
        }
        Ok(())
    }

    /// Samples a sequence of length `len` from the model.
    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut row = &self.start;
        for _ in 0..len {
            let s = sample_index(row, rng);
            out.push(s);
            row = &self.transitions[s];
        }
        out
    }

    pub fn log_prob(&self, seq: &[usize]) -> f64 {
        let mut lp = 0.0;
        let mut prev: Option<usize> = None;
        for &s in seq {
            let p = match prev {
                None => self.start[s],
                Some(q) => self.transitions[q][s],
            };
            lp += p.ln();
            prev = Some(s);
        }
        lp
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    #[test]
    fn random_rows_are_normalized_with_zero_diagonal() {
        let b = Bigram::random(12, 2.0, &mut rng(5));
        let names: Vec<String> = (0..12).map(|i| i.to_string()).collect();
        b.validate(&names).unwrap();
        for i in 0..12 {
            assert_eq!(b.transitions[i][i], 0.0);
        }
        let s = b.sample(50, &mut rng(1));
        assert!(s.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn unnormalized_row_is_reported() {
        let mut b = Bigram::uniform(3);
        b.transitions[1][0] = 0.9;
        let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        match b.validate(&names) {
            Err(Error::UnnormalizedBigram { row, .. }) => assert_eq!(row, "y"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
