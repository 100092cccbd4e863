//! Synthetic parallel corpus: one token sequence rendered by a target
//! speaker and by two source speakers that differ in spectral shift and
//! speaking rate.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};

use super::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{NumArray, SeededRng};

/// Value of every band in the leading and trailing silence frames.
pub const SILENCE_LEVEL: f64 = 0.05;
/// Silence frames at each end of an utterance.
pub const EDGE_SILENCE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub name: String,
    pub shift: i64,
    pub dur_scale: f64,
}

impl SpeakerProfile {
    fn new(name: &str, shift: i64, dur_scale: f64) -> Self {
        SpeakerProfile {
            name: name.to_string(),
            shift,
            dur_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub vocab: usize,
    pub n_mels: usize,
    pub target: SpeakerProfile,
    pub sources: Vec<SpeakerProfile>,
}

impl ToySpec {
    pub fn new(n_mels: usize) -> Result<Self> {
        let spec = ToySpec {
            vocab: 12,
            n_mels,
            target: SpeakerProfile::new("target", 0, 1.0),
            sources: vec![
                SpeakerProfile::new("source1", 2, 1.5),
                SpeakerProfile::new("source2", -1, 0.75),
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Frames a symbol lasts for the target speaker: 2, 3 or 4.
    pub fn duration(&self, symbol: usize) -> usize {
        2 + symbol % 3
    }

    /// Center band of a symbol before the speaker shift.
    pub fn center_band(&self, symbol: usize) -> usize {
        1 + (symbol * 7) % (self.n_mels - 3)
    }

    pub fn profile(&self, name: &str) -> Option<&SpeakerProfile> {
        std::iter::once(&self.target)
            .chain(&self.sources)
            .find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 4 || self.vocab == 0 {
            return Err(Error::InvalidArgument(format!(
                "toy corpus needs n_mels >= 4 and a non-empty vocabulary, got {} / {}",
                self.n_mels, self.vocab
            )));
        }
        for p in std::iter::once(&self.target).chain(&self.sources) {
            if p.dur_scale <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "speaker {} has non-positive rate",
                    p.name
                )));
            }
            for s in 0..self.vocab {
                let c = self.center_band(s) as i64 + p.shift;
                if c < 0 || c >= self.n_mels as i64 {
                    return Err(Error::InvalidArgument(format!(
                        "symbol {s} lands on band {c} for speaker {}, outside 0..{}",
                        p.name, self.n_mels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Frames for `tokens` under `profile`: silence, then each symbol for
    /// `ceil(d·scale)` frames, then silence.
    pub fn frame_count(&self, tokens: &[usize], profile: &SpeakerProfile) -> usize {
        2 * EDGE_SILENCE
            + tokens
                .iter()
                .map(|&s| scaled_duration(self.duration(s), profile.dur_scale))
                .sum::<usize>()
    }
}

fn scaled_duration(d: usize, scale: f64) -> usize {
    ((d as f64 * scale).ceil() as usize).max(1)
}

/// Deterministic spectrogram `[T, n_mels]` of a token sequence.
///
/// Band `m` of a frame inside symbol `σ` holds
/// `max(0, exp(−(m − c)²/2) + 0.05·sin(2π·f/8))` with `c` the shifted center
/// band and `f` the frame index; silence frames are flat at 0.05.
pub fn render(spec: &ToySpec, tokens: &[usize], profile: &SpeakerProfile) -> Result<NumArray> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence("render"));
    }
    if let Some(&bad) = tokens.iter().find(|&&s| s >= spec.vocab) {
        return Err(Error::UnknownSymbol {
            id: bad,
            vocab: spec.vocab,
        });
    }
    let n = spec.n_mels;
    let total = spec.frame_count(tokens, profile);
    let mut out = NumArray::filled(&[total, n], SILENCE_LEVEL);
    let mut f = EDGE_SILENCE;
    for &s in tokens {
        let center = (spec.center_band(s) as i64 + profile.shift) as f64;
        for _ in 0..scaled_duration(spec.duration(s), profile.dur_scale) {
            let ripple = 0.05 * (2.0 * PI * f as f64 / 8.0).sin();
            for (m, v) in out.row_mut(f).iter_mut().enumerate() {
                let d = m as f64 - center;
                *v = ((-d * d / 2.0).exp() + ripple).max(0.0);
            }
            f += 1;
        }
    }
    Ok(out)
}

/// `n_utts` utterances with uniform random lengths in `len_range` and
/// uniform symbols; source speakers alternate round-robin.
pub fn gen_corpus(spec: &ToySpec, n_utts: usize, len_range: (usize, usize), seed: u64) -> Result<Corpus> {
    if n_utts == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one utterance".into()));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("invalid length range [{lo}, {hi}]")));
    }
    spec.validate()?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let len = rng.random_range(lo..=hi);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab)).collect();
        let speaker = &spec.sources[i % spec.sources.len()];
        utterances.push(Utterance {
            id: format!("utt{i:04}"),
            source: Some(render(spec, &tokens, speaker)?),
            target: render(spec, &tokens, &spec.target)?,
            speaker: speaker.name.clone(),
            tokens,
        });
    }
    Ok(Corpus { utterances })
}
