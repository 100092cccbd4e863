//! Random per-utterance choice of which encoder(s) feed the decoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskSelection {
    TextOnly,
    SpeechOnly,
    Both,
}

impl MaskSelection {
    pub const ALL: [MaskSelection; 3] = [MaskSelection::TextOnly, MaskSelection::SpeechOnly, MaskSelection::Both];

    pub fn uses_text(self) -> bool {
        matches!(self, MaskSelection::TextOnly | MaskSelection::Both)
    }

    pub fn uses_speech(self) -> bool {
        matches!(self, MaskSelection::SpeechOnly | MaskSelection::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskSelection::TextOnly => "text",
            MaskSelection::SpeechOnly => "speech",
            MaskSelection::Both => "both",
        }
    }
}

impl fmt::Display for MaskSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(MaskSelection::TextOnly),
            "speech" => Ok(MaskSelection::SpeechOnly),
            "both" => Ok(MaskSelection::Both),
            other => Err(Error::InvalidArgument(format!("unknown mask `{other}`"))),
        }
    }
}

/// Probabilities of drawing each [`MaskSelection`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPolicy {
    pub p_text: f64,
    pub p_speech: f64,
    pub p_both: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            p_text: 1.0 / 3.0,
            p_speech: 1.0 / 3.0,
            p_both: 1.0 / 3.0,
        }
    }
}

impl MaskPolicy {
    pub fn new(p_text: f64, p_speech: f64, p_both: f64) -> Result<Self> {
        let p = MaskPolicy {
            p_text,
            p_speech,
            p_both,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_text, self.p_speech, self.p_both];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mask probabilities must be finite and non-negative, got {ps:?}"
            )));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mask probabilities must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Draws one selection; consumes exactly one uniform variate.
pub fn sample_mask(policy: &MaskPolicy, rng: &mut SeededRng) -> Result<MaskSelection> {
    policy.validate()?;
    let u: f64 = rng.random();
    Ok(if u < policy.p_text {
        MaskSelection::TextOnly
    } else if u < policy.p_text + policy.p_speech {
        MaskSelection::SpeechOnly
    } else {
        MaskSelection::Both
    })
}

/// Zeroes the context vector of every source the mask leaves out.
pub fn apply_mask(mut c_text: Vec<f64>, mut c_speech: Vec<f64>, mask: MaskSelection) -> (Vec<f64>, Vec<f64>) {
    if !mask.uses_text() {
        c_text.iter_mut().for_each(|v| *v = 0.0);
    }
    if !mask.uses_speech() {
        c_speech.iter_mut().for_each(|v| *v = 0.0);
    }
    (c_text, c_speech)
}
