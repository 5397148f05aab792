//! Viterbi decoding over the bigram-composed graph and WER scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::seqtrain::{HmmGraph, Scores};
use crate::synthdata::collapse;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub symbols: Vec<usize>,
    pub log_score: f64,
    /// Best state per frame.
    pub states: Vec<usize>,
}

/// Exact max-product decoding. Path score is the sum of frame scores plus
/// `lm_scale` times the graph weights; ties go to the lower state index.
pub fn viterbi(scores: Scores<'_>, graph: &HmmGraph, lm_scale: f64) -> Result<DecodeResult> {
    if !(lm_scale > 0.0) {
        return Err(Error::Config(format!("lm_scale must be positive, got {lm_scale}")));
    }
    let t_len = scores.frames();
    if t_len == 0 {
        return Err(Error::Empty("scores"));
    }
    if scores.num_pdfs != graph.num_pdfs {
        return Err(Error::shape("viterbi", &[scores.num_pdfs], &[graph.num_pdfs]));
    }
    scores.check_finite()?;
    let n = graph.num_states();
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| scores.get(t, graph.state_pdf[s]);
    let mut delta: Vec<f64> = (0..n).map(|s| lm_scale * graph.initial[s] + emit(0, s)).collect();
    let mut back = vec![usize::MAX; t_len * n];
    for t in 1..t_len {
        let mut next = vec![ninf; n];
        let bp = &mut back[t * n..(t + 1) * n];
        for a in &graph.arcs {
            if delta[a.src] == ninf {
                continue;
            }
            let v = delta[a.src] + lm_scale * a.log_weight;
            if v > next[a.dst] || (v == next[a.dst] && a.src < bp[a.dst]) {
                next[a.dst] = v;
                bp[a.dst] = a.src;
            }
        }
        for (s, v) in next.iter_mut().enumerate() {
            if *v > ninf {
                *v += emit(t, s);
            }
        }
        delta = next;
    }
    let mut best = usize::MAX;
    let mut best_score = ninf;
    for s in 0..n {
        let v = delta[s] + lm_scale * graph.finals[s];
        if v > best_score {
            best = s;
            best_score = v;
        }
    }
    if best == usize::MAX {
        return Err(Error::BadAlignment("decode graph admits no path of this length".into()));
    }
    let mut states = vec![0; t_len];
    states[t_len - 1] = best;
    for t in (1..t_len).rev() {
        states[t - 1] = back[t * n + states[t]];
    }
    let pdfs: Vec<usize> = states.iter().map(|&s| graph.state_pdf[s]).collect();
    Ok(DecodeResult {
        symbols: collapse(&pdfs),
        log_score: best_score,
        states,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }

    pub fn add(&mut self, other: &WerReport) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_len += other.ref_len;
    }
}

/// Minimum edit distance alignment. Among alignments with the same number of
/// errors, the one with the fewest insertions plus deletions wins.
pub fn score_wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let (n, m) = (reference.len(), hyp.len());
    // cost[i][j] = (edits, insertions + deletions, insertions)
    let mut cost = vec![(0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        cost[idx(i, 0)] = (i, i, 0);
    }
    for j in 1..=m {
        cost[idx(0, j)] = (j, j, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (e, g, ins) = cost[idx(i - 1, j - 1)];
            let diag = if reference[i - 1] == hyp[j - 1] { (e, g, ins) } else { (e + 1, g, ins) };
            let (e, g, ins) = cost[idx(i - 1, j)];
            let del = (e + 1, g + 1, ins);
            let (e, g, ins) = cost[idx(i, j - 1)];
            let insert = (e + 1, g + 1, ins + 1);
            let key = |c: &(usize, usize, usize)| (c.0, c.1);
            let mut best = diag;
            for c in [del, insert] {
                if key(&c) < key(&best) {
                    best = c;
                }
            }
            cost[idx(i, j)] = best;
        }
    }
    let (edits, gaps, insertions) = cost[idx(n, m)];
    let deletions = gaps - insertions;
    Ok(WerReport {
        substitutions: edits - gaps,
        deletions,
        insertions,
        ref_len: n,
    })
}

/// One line of a WER report.
#[derive(Debug, Clone, PartialEq)]
pub struct WerRow {
    pub system: String,
    pub fusion: String,
    pub data_condition: String,
    pub snr: String,
    /// Percent.
    pub wer: f64,
    pub report: WerReport,
}

pub const AVE: &str = "AVE";
pub const POOLED: &str = "POOLED";

/// Per-condition WER (total errors over total reference length within the
/// condition), then an `AVE` row holding the unweighted mean of the
/// condition WERs and a `POOLED` row over all utterances. Conditions appear
/// in first-seen order.
pub fn aggregate(system: &str, fusion: &str, data_condition: &str, scored: &[(String, WerReport)]) -> Vec<WerRow> {
    let mut order: Vec<String> = Vec::new();
    let mut per: BTreeMap<String, WerReport> = BTreeMap::new();
    for (cond, r) in scored {
        if !per.contains_key(cond) {
            order.push(cond.clone());
        }
        per.entry(cond.clone()).or_default().add(r);
    }
    if order.is_empty() {
        return Vec::new();
    }
    let row = |snr: &str, wer: f64, report: WerReport| WerRow {
        system: system.to_string(),
        fusion: fusion.to_string(),
        data_condition: data_condition.to_string(),
        snr: snr.to_string(),
        wer,
        report,
    };
    let mut rows: Vec<WerRow> = order.iter().map(|c| row(c, 100.0 * per[c].wer(), per[c])).collect();
    let mut pooled = WerReport::default();
    for r in per.values() {
        pooled.add(r);
    }
    let ave = rows.iter().map(|r| r.wer).sum::<f64>() / rows.len() as f64;
    rows.push(row(AVE, ave, pooled));
    rows.push(row(POOLED, 100.0 * pooled.wer(), pooled));
    rows
}

pub const TSV_HEADER: &str = "system\tfusion\tdata_condition\tsnr\twer\tS\tD\tI\tN";

pub fn render_tsv_row(r: &WerRow) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\t{}",
        r.system,
        r.fusion,
        r.data_condition,
        r.snr,
        r.wer,
        r.report.substitutions,
        r.report.deletions,
        r.report.insertions,
        r.report.ref_len
    )
}

pub fn render_tsv(rows: &[WerRow]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&render_tsv_row(r));
        out.push('\n');
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<WerRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line == TSV_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(Error::Parse(format!("report line {}: expected 9 fields", n + 1)));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("report line {}: bad count `{s}`", n + 1)));
        rows.push(WerRow {
            system: f[0].into(),
            fusion: f[1].into(),
            data_condition: f[2].into(),
            snr: f[3].into(),
            wer: f[4].parse().map_err(|_| Error::Parse(format!("report line {}: bad wer", n + 1)))?,
            report: WerReport {
                substitutions: num(f[5])?,
                deletions: num(f[6])?,
                insertions: num(f[7])?,
                ref_len: num(f[8])?,
            },
        });
    }
    Ok(rows)
}

/// Report table: one line per (system, data condition), one column
/// per SNR condition followed by `AVE`.
pub fn render_table(rows: &[WerRow]) -> String {
    let mut systems: Vec<(String, String)> = Vec::new();
    let mut conds: Vec<String> = Vec::new();
    for r in rows {
        let key = (r.system.clone(), r.data_condition.clone());
        if !systems.contains(&key) {
            systems.push(key);
        }
        if r.snr != AVE && r.snr != POOLED && !conds.contains(&r.snr) {
            conds.push(r.snr.clone());
        }
    }
    conds.push(AVE.to_string());
    let label_w = systems
        .iter()
        .map(|(s, d)| s.len() + d.len() + 3)
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "system");
    for c in &conds {
        let _ = write!(out, " {:>8}", c);
    }
    out.push('\n');
    for (sys, data) in &systems {
        let _ = write!(out, "{:<label_w$}", format!("{sys} ({data})"));
        for c in &conds {
            let cell = rows
                .iter()
                .find(|r| &r.system == sys && &r.data_condition == data && &r.snr == c)
                .map(|r| format!("{:.2}", r.wer))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " {:>8}", cell);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqtrain::{build_denominator, HmmTopology};
    use crate::synthdata::Bigram;

    #[test]
    fn single_symbol_grammar() {
        let g = build_denominator(&Bigram::uniform(1), &HmmTopology::new(1, 0.75).unwrap()).unwrap();
        let r = viterbi(Scores::new(&[0.1, -2.0, 0.3, 0.0], 1).unwrap(), &g, 1.0).unwrap();
        assert_eq!(r.symbols, vec![0]);
        assert_eq!(r.states, vec![0; 4]);
    }

    #[test]
    fn ties_prefer_lower_state() {
        let g = build_denominator(&Bigram::uniform(3), &HmmTopology::new(3, 0.0).unwrap()).unwrap();
        let r = viterbi(Scores::new(&[0.0; 9], 3).unwrap(), &g, 1.0).unwrap();
        assert_eq!(r.states, vec![0, 0, 0]);
    }

    #[test]
    fn wer_examples() {
        let r = score_wer(&["a", "b", "c"], &["a", "x", "c", "d"]).unwrap();
        assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 1, 0));
        assert!((100.0 * r.wer() - 66.666_666_666).abs() < 1e-6);
        let r = score_wer(&["a", "b"], &["a", "b"]).unwrap();
        assert_eq!(r.wer(), 0.0);
        let r = score_wer(&["a", "b", "c"], &[] as &[&str]).unwrap();
        assert_eq!((r.deletions, r.wer()), (3, 1.0));
        assert!(score_wer(&[] as &[&str], &["a"]).is_err());
    }

    #[test]
    fn prefers_substitutions() {
        let r = score_wer(&["a", "b"], &["b", "a"]).unwrap();
        assert_eq!((r.substitutions, r.insertions, r.deletions), (2, 0, 0));
    }

    #[test]
    fn ave_is_mean_of_conditions() {
        let mk = |e: usize, n: usize| WerReport {
            substitutions: e,
            deletions: 0,
            insertions: 0,
            ref_len: n,
        };
        let scored = vec![
            ("10".to_string(), mk(1, 10)),
            ("0".to_string(), mk(3, 10)),
            ("10".to_string(), mk(0, 30)),
        ];
        let rows = aggregate("sys", "audio", "clean", &scored);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].snr, "10");
        assert!((rows[0].wer - 2.5).abs() < 1e-12);
        assert!((rows[1].wer - 30.0).abs() < 1e-12);
        assert!((rows[2].wer - 16.25).abs() < 1e-12);
        assert!((rows[3].wer - 8.0).abs() < 1e-12);
        assert!(aggregate("s", "f", "d", &[]).is_empty());
    }

    #[test]
    fn ave_reproduces_table_row_arithmetic() {
        let scored: Vec<(String, WerReport)> = [("10", 755), ("5", 877), ("0", 1071), ("-5", 1422)]
            .into_iter()
            .map(|(c, e)| {
                let r = WerReport {
                    substitutions: e,
                    deletions: 0,
                    insertions: 0,
                    ref_len: 10_000,
                };
                (c.to_string(), r)
            })
            .collect();
        let rows = aggregate("av", "avgate", "mult", &scored);
        assert!((rows[4].wer - 10.3125).abs() < 1e-9);
        assert_eq!(format!("{:.2}", rows[4].wer), "10.31");
    }

    #[test]
    fn tsv_round_trip() {
        let rows = aggregate(
            "av",
            "vgate",
            "mult",
            &[("snr-5".into(), WerReport { substitutions: 1, deletions: 2, insertions: 0, ref_len: 9 })],
        );
        let text = render_tsv(&rows);
        assert!(text.starts_with(TSV_HEADER));
        let back = parse_tsv(&text).unwrap();
        assert_eq!(back.len(), rows.len());
        assert_eq!(back[0].report, rows[0].report);
        assert!(render_table(&rows).contains("snr-5"));
    }
}
