//! Assembly of encoders and decoder into stand-alone and multi-source models.

use std::fmt;
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::decoder::{AlignmentTrace, Decoder, GenerateOptions, Sources};
use crate::encoders::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::masking::MaskSelection;
use crate::numerics::{Grads, NumArray, ParamSet, SeededRng};
use crate::training::{l1_grad, l1_sum};

pub const TEXT_ENCODER: &str = "text_encoder";
pub const SPEECH_ENCODER: &str = "speech_encoder";
pub const DECODER: &str = "decoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Text encoder + single-attention decoder.
    Tts,
    /// Spectrogram encoder + single-attention decoder.
    Vc,
    /// Both encoders + dual-attention decoder.
    Joint,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tts => "tts",
            ModelKind::Vc => "vc",
            ModelKind::Joint => "joint",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tts" => Ok(ModelKind::Tts),
            "vc" => Ok(ModelKind::Vc),
            "joint" => Ok(ModelKind::Joint),
            other => Err(Error::Format(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Borrowed view of one training example.
#[derive(Clone, Copy, Debug)]
pub struct ExampleRef<'a> {
    pub tokens: Option<&'a [usize]>,
    pub source: Option<&'a NumArray>,
    pub target: &'a NumArray,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamSet,
    pub text_encoder: Option<Encoder>,
    pub speech_encoder: Option<Encoder>,
    pub decoder: Decoder,
}

impl Model {
    /// Registers parameters in a fixed order: text encoder, speech encoder,
    /// decoder.
    pub fn new(kind: ModelKind, config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut ps = ParamSet::new();
        let enc = &config.encoder;
        let text_encoder = matches!(kind, ModelKind::Tts | ModelKind::Joint)
            .then(|| Encoder::new_text(&mut ps, TEXT_ENCODER, config.vocab, enc, rng))
            .transpose()?;
        let speech_encoder = matches!(kind, ModelKind::Vc | ModelKind::Joint)
            .then(|| Encoder::new_speech(&mut ps, SPEECH_ENCODER, config.decoder.n_mels, enc, rng))
            .transpose()?;
        let decoder = Decoder::new(
            &mut ps,
            DECODER,
            &config.decoder,
            text_encoder.as_ref().map(Encoder::d_state),
            speech_encoder.as_ref().map(Encoder::d_state),
            rng,
        )?;
        Ok(Model {
            kind,
            config: config.clone(),
            params: ps,
            text_encoder,
            speech_encoder,
            decoder,
        })
    }

    /// The mask a model is trained with when no policy applies.
    pub fn native_mask(&self) -> MaskSelection {
        match self.kind {
            ModelKind::Tts => MaskSelection::TextOnly,
            ModelKind::Vc => MaskSelection::SpeechOnly,
            ModelKind::Joint => MaskSelection::Both,
        }
    }

    pub fn supports(&self, mask: MaskSelection) -> bool {
        (!mask.uses_text() || self.text_encoder.is_some()) && (!mask.uses_speech() || self.speech_encoder.is_some())
    }

    fn check_mask(&self, mask: MaskSelection) -> Result<()> {
        if self.supports(mask) {
            Ok(())
        } else {
            Err(Error::InputKind(format!(
                "a {} model cannot run with mask {mask}",
                self.kind
            )))
        }
    }

    /// Inference-mode encoding of the sources the mask uses. Unused inputs
    /// are never touched.
    pub fn encode(
        &self,
        tokens: Option<&[usize]>,
        source: Option<&NumArray>,
        mask: MaskSelection,
    ) -> Result<(Option<EncoderOutput>, Option<EncoderOutput>)> {
        self.check_mask(mask)?;
        let text = if mask.uses_text() {
            let t = tokens.ok_or(Error::MissingInput { mask, missing: "text" })?;
            Some(
                self.text_encoder
                    .as_ref()
                    .unwrap()
                    .forward_text(&self.params, t, None)?
                    .0,
            )
        } else {
            None
        };
        let speech = if mask.uses_speech() {
            let s = source.ok_or(Error::MissingInput {
                mask,
                missing: "speech",
            })?;
            Some(
                self.speech_encoder
                    .as_ref()
                    .unwrap()
                    .forward_speech(&self.params, s, None)?
                    .0,
            )
        } else {
            None
        };
        Ok((text, speech))
    }

    pub fn generate(
        &self,
        tokens: Option<&[usize]>,
        source: Option<&NumArray>,
        mask: MaskSelection,
        opts: GenerateOptions,
        rng: Option<&mut SeededRng>,
    ) -> Result<(NumArray, AlignmentTrace)> {
        let (t, v) = self.encode(tokens, source, mask)?;
        let src = Sources {
            text: t.as_ref(),
            speech: v.as_ref(),
        };
        self.decoder.generate(&self.params, src, mask, opts, rng)
    }

    /// Inference-mode teacher-forced decode.
    pub fn teacher_forced(
        &self,
        tokens: Option<&[usize]>,
        source: Option<&NumArray>,
        target: &NumArray,
        mask: MaskSelection,
    ) -> Result<(NumArray, AlignmentTrace)> {
        let (t, v) = self.encode(tokens, source, mask)?;
        let src = Sources {
            text: t.as_ref(),
            speech: v.as_ref(),
        };
        self.decoder.decode_teacher_forced(&self.params, src, target, mask)
    }

    /// Teacher-forced forward and backward for one example. The loss is the
    /// summed absolute error over valid target entries divided by `norm`; its
    /// gradient accumulates into `g`. Returns the unnormalized absolute sum.
    ///
    /// Random draws happen in a fixed order: text pre-net, speech pre-net,
    /// then the decoder pre-net step by step.
    pub fn accumulate_gradients(
        &self,
        ex: ExampleRef,
        mask: MaskSelection,
        mut dropout: Option<&mut SeededRng>,
        norm: f64,
        g: &mut Grads,
    ) -> Result<f64> {
        self.check_mask(mask)?;
        let ps = &self.params;
        let text = if mask.uses_text() {
            let t = ex.tokens.ok_or(Error::MissingInput { mask, missing: "text" })?;
            Some(
                self.text_encoder
                    .as_ref()
                    .unwrap()
                    .forward_text(ps, t, dropout.as_deref_mut())?,
            )
        } else {
            None
        };
        let speech = if mask.uses_speech() {
            let s = ex.source.ok_or(Error::MissingInput {
                mask,
                missing: "speech",
            })?;
            Some(
                self.speech_encoder
                    .as_ref()
                    .unwrap()
                    .forward_speech(ps, s, dropout.as_deref_mut())?,
            )
        } else {
            None
        };
        let src = Sources {
            text: text.as_ref().map(|(o, _)| o),
            speech: speech.as_ref().map(|(o, _)| o),
        };
        let (pred, _, cache) = self.decoder.forward_teacher_forced(ps, src, ex.target, mask, dropout)?;
        let valid = ex.target.rows();
        let abs = l1_sum(&pred, ex.target, valid)?;
        if !abs.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let dpred = l1_grad(&pred, ex.target, valid, norm);
        let (dt, dv) = self.decoder.backward(ps, &cache, &dpred, g);
        if let (Some(d), Some((_, c))) = (dt, &text) {
            self.text_encoder.as_ref().unwrap().backward(ps, c, &d, g);
        }
        if let (Some(d), Some((_, c))) = (dv, &speech) {
            self.speech_encoder.as_ref().unwrap().backward(ps, c, &d, g);
        }
        Ok(abs)
    }
}
