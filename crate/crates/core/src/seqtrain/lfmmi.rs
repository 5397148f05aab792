use super::fb::{forward_backward, Scores};
use super::graph::HmmGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LfmmiLoss {
    /// `log_num - log_den + λ_CE * ce`; to be maximized.
    pub objective: f64,
    pub log_num: f64,
    pub log_den: f64,
    /// `Σ_t log_softmax(scores)[t, y_t]`.
    pub ce: f64,
    pub num_posteriors: Vec<f64>,
    pub den_posteriors: Vec<f64>,
    /// `∂objective / ∂scores`, `T x num_pdfs`.
    pub grad: Vec<f64>,
}

impl LfmmiLoss {
    pub fn mmi(&self) -> f64 {
        self.log_num - self.log_den
    }
}

/// Per-row log-softmax of a `T x P` score matrix.
pub fn log_softmax_rows(scores: Scores<'_>) -> Vec<f64> {
    let p = scores.num_pdfs;
    let mut out = Vec::with_capacity(scores.data.len());
    for row in scores.data.chunks(p) {
        let lse = crate::util::log_sum_exp(row);
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Frame cross-entropy term and its gradient: `Σ_t log_softmax(s)[t, y_t]`
/// and `one_hot(y) - softmax(s)`.
pub fn frame_ce(scores: Scores<'_>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let p = scores.num_pdfs;
    if labels.len() != scores.frames() {
        return Err(Error::Length(format!(
            "{} labels for {} frames",
            labels.len(),
            scores.frames()
        )));
    }
    scores.check_finite()?;
    let ls = log_softmax_rows(scores);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(ls.len());
    for (t, &y) in labels.iter().enumerate() {
        if y >= p {
            return Err(Error::BadAlignment(format!("label {y} at frame {t} exceeds {p} pdfs")));
        }
        let row = &ls[t * p..(t + 1) * p];
        total += row[y];
        grad.extend(row.iter().enumerate().map(|(j, v)| f64::from(u8::from(j == y)) - v.exp()));
    }
    Ok((total, grad))
}

pub fn lfmmi_loss(
    scores: Scores<'_>,
    num: &HmmGraph,
    den: &HmmGraph,
    alignment: &[usize],
    lambda_ce: f64,
    leaky: f64,
) -> Result<LfmmiLoss> {
    if lambda_ce < 0.0 {
        return Err(Error::Config(format!("λ_CE must be non-negative, got {lambda_ce}")));
    }
    let n = forward_backward(num, scores, 0.0)?;
    let d = forward_backward(den, scores, leaky)?;
    let (ce, ce_grad) = frame_ce(scores, alignment)?;
    let grad = n
        .posteriors
        .iter()
        .zip(&d.posteriors)
        .zip(&ce_grad)
        .map(|((a, b), c)| a - b + lambda_ce * c)
        .collect();
    Ok(LfmmiLoss {
        objective: n.log_total - d.log_total + lambda_ce * ce,
        log_num: n.log_total,
        log_den: d.log_total,
        ce,
        num_posteriors: n.posteriors,
        den_posteriors: d.posteriors,
        grad,
    })
}
