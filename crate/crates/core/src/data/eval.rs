use std::fmt::Write as _;

use super::Corpus;
use crate::decoder::{AlignmentTrace, GenerateOptions};
use crate::error::{Error, Result};
use crate::masking::MaskSelection;
use crate::model::Model;
use crate::numerics::{stream_rng, NumArray};

/// Fraction of the source length used as the half-width of the diagonal band.
pub const BAND_FRACTION: f64 = 0.15;

/// Mean attention mass inside a band of half-width `0.15·L` around the
/// ideal monotonic position of each step. The ideal position of step `k`
/// out of `n` is `(k + 0.5)·L/n − 0.5`, so equal lengths put it on `j = k`.
pub fn diagonality(trace: &AlignmentTrace, speech: bool) -> Result<f64> {
    let w = trace.source(speech).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{} source is masked out in this trace",
            if speech { "speech" } else { "text" }
        ))
    })?;
    let n = w.len();
    if n == 0 {
        return Err(Error::EmptySequence("diagonality"));
    }
    let l = w[0].len();
    let half = BAND_FRACTION * l as f64;
    let mut total = 0.0;
    for (k, row) in w.iter().enumerate() {
        let ideal = (k as f64 + 0.5) * l as f64 / n as f64 - 0.5;
        total += row
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as f64 - ideal).abs() <= half + 1e-9)
            .map(|(_, x)| x)
            .sum::<f64>();
    }
    Ok((total / n as f64).clamp(0.0, 1.0))
}

/// Mean absolute difference over the first `min(T_a, T_b)` frames.
pub fn frame_l1(a: &NumArray, b: &NumArray) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("frame_l1", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let rows = a.rows().min(b.rows());
    let n = rows * a.cols();
    let sum: f64 = a.data()[..n]
        .iter()
        .zip(&b.data()[..n])
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / n as f64)
}

/// L1 of the best constant predictor: the per-band median of all target
/// frames, scored per utterance and averaged.
pub fn best_constant_l1(corpus: &Corpus) -> Result<f64> {
    let n_mels = corpus.n_mels().ok_or_else(|| Error::Corpus("empty corpus".into()))?;
    let mut bias = vec![0.0; n_mels];
    for (m, b) in bias.iter_mut().enumerate() {
        let mut col: Vec<f64> = corpus
            .utterances
            .iter()
            .flat_map(|u| (0..u.t()).map(move |f| u.target.get2(f, m)))
            .collect();
        col.sort_by(f64::total_cmp);
        *b = col[col.len() / 2];
    }
    let mut total = 0.0;
    for u in &corpus.utterances {
        let flat = NumArray::from_rows(&vec![bias.clone(); u.t()])?;
        total += frame_l1(&flat, &u.target)?;
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMode {
    pub label: String,
    pub mask: MaskSelection,
}

impl EvalMode {
    pub fn new(label: &str, mask: MaskSelection) -> Self {
        EvalMode {
            label: label.to_string(),
            mask,
        }
    }

    /// `tts`, `vc` and `hybrid` for the three masks of a joint model.
    pub fn joint_modes() -> Vec<EvalMode> {
        vec![
            EvalMode::new("tts", MaskSelection::TextOnly),
            EvalMode::new("vc", MaskSelection::SpeechOnly),
            EvalMode::new("hybrid", MaskSelection::Both),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: String,
    pub utt_id: String,
    pub l1: f64,
    pub diagonality: f64,
    /// L1 between the prediction and the source render, when there is one.
    pub l1_to_source: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: String,
    pub mean_l1: f64,
    pub mean_diagonality: f64,
    pub utterances: usize,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn modes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.mode) {
                out.push(r.mode.clone());
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<ModeSummary> {
        self.modes()
            .into_iter()
            .map(|mode| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.mode == mode).collect();
                let n = rows.len() as f64;
                ModeSummary {
                    mean_l1: rows.iter().map(|r| r.l1).sum::<f64>() / n,
                    mean_diagonality: rows.iter().map(|r| r.diagonality).sum::<f64>() / n,
                    utterances: rows.len(),
                    mode,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,utt_id,l1,diagonality,l1_to_source\n");
        for r in &self.rows {
            let src = r.l1_to_source.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{src}", r.mode, r.utt_id, r.l1, r.diagonality);
        }
        out
    }

    /// Fixed-width comparison table, one line per mode.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>10} {:>12} {:>6}\n", "mode", "mean_l1", "diagonality", "utts");
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{:<16} {:>10.4} {:>12.4} {:>6}",
                s.mode, s.mean_l1, s.mean_diagonality, s.utterances
            );
        }
        out
    }
}

/// Knobs for [`evaluate`].
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Keep pre-net dropout on while generating.
    pub dropout: bool,
    /// Seed for generation dropout; utterance `i` uses stream `i`.
    pub seed: u64,
}

/// Generates every utterance under every mode for exactly `ceil(T/r)`
/// steps, with no energy stop, so that L1 and diagonality cover the whole
/// target whether or not the model has learned to go quiet.
pub fn evaluate(model: &Model, corpus: &Corpus, modes: &[EvalMode], opts: EvalOptions) -> Result<EvalReport> {
    let r = model.config.decoder.r;
    let mut report = EvalReport::default();
    for mode in modes {
        for (i, u) in corpus.utterances.iter().enumerate() {
            let gen = GenerateOptions {
                max_steps: u.t().div_ceil(r),
                dropout: opts.dropout,
                energy_stop: false,
            };
            let mut rng = stream_rng(opts.seed, i as u64);
            let (pred, trace) = model.generate(
                Some(&u.tokens),
                u.source.as_ref(),
                mode.mask,
                gen,
                opts.dropout.then_some(&mut rng),
            )?;
            let l1_to_source = match &u.source {
                Some(s) => Some(frame_l1(&pred, s)?),
                None => None,
            };
            report.rows.push(EvalRow {
                mode: mode.label.clone(),
                utt_id: u.id.clone(),
                l1: frame_l1(&pred, &u.target)?,
                diagonality: diagonality(&trace, !mode.mask.uses_text())?,
                l1_to_source,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::StepAlignment;

    fn trace(rows: Vec<Vec<f64>>) -> AlignmentTrace {
        AlignmentTrace {
            mask: MaskSelection::TextOnly,
            steps: rows
                .into_iter()
                .map(|w| StepAlignment {
                    text: Some(w),
                    speech: None,
                })
                .collect(),
        }
    }

    #[test]
    fn one_hot_diagonal_scores_one() {
        for (n, l) in [(7, 7), (12, 6), (5, 10)] {
            let rows = (0..n)
                .map(|k| {
                    let ideal = ((k as f64 + 0.5) * l as f64 / n as f64 - 0.5).round() as usize;
                    let mut w = vec![0.0; l];
                    w[ideal.min(l - 1)] = 1.0;
                    w
                })
                .collect();
            assert_eq!(diagonality(&trace(rows), false).unwrap(), 1.0);
        }
    }

    #[test]
    fn uniform_scores_band_fraction() {
        let (n, l) = (100, 100);
        let s = diagonality(&trace(vec![vec![1.0 / l as f64; l]; n]), false).unwrap();
        assert!((s - 0.3).abs() <= 0.05, "{s}");
    }

    #[test]
    fn masked_source_is_an_error() {
        assert!(diagonality(&trace(vec![vec![1.0]]), true).is_err());
    }

    #[test]
    fn anti_diagonal_scores_low() {
        let l = 10;
        let rows = (0..l)
            .map(|k| {
                let mut w = vec![0.0; l];
                w[l - 1 - k] = 1.0;
                w
            })
            .collect();
        let s = diagonality(&trace(rows), false).unwrap();
        assert!((0.0..0.4).contains(&s), "{s}");
    }

    #[test]
    fn frame_l1_truncates() {
        let a = NumArray::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap();
        let b = NumArray::from_rows(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(frame_l1(&a, &b).unwrap(), 1.0);
    }
}
