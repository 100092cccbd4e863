//! Model and training configuration, presets, and the `key = value` text
//! form used by config files and checkpoint snapshots.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::MaskPolicy;
use crate::numerics::LrSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Published experimental hyperparameters.
    Paper,
    /// Small dimensions that train in minutes on one CPU core.
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_embed: usize,
    pub d_prenet: usize,
    pub bank_k: usize,
    pub conv_channels: usize,
    pub highway_layers: usize,
    pub d_gru: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Width of the encoder state vector and of every output frame.
    pub fn d_state(&self) -> usize {
        2 * self.d_gru
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_prenet: usize,
    pub d_attn_rnn: usize,
    pub d_dec_rnn: usize,
    pub dec_layers: usize,
    /// Frames emitted per decoder step.
    pub r: usize,
    pub n_mels: usize,
    pub dropout_rate: f64,
    /// Keep pre-net dropout on during free-running generation.
    pub generate_dropout: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub mask: MaskPolicy,
    pub checkpoint_interval: u64,
    /// Peak learning rate multiplier for fine-tuning.
    pub adapt_lr_scale: f64,
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "model.vocab",
    "encoder.d_embed",
    "encoder.d_prenet",
    "encoder.bank_k",
    "encoder.conv_channels",
    "encoder.highway_layers",
    "encoder.d_gru",
    "encoder.dropout",
    "decoder.d_prenet",
    "decoder.d_attn_rnn",
    "decoder.d_dec_rnn",
    "decoder.dec_layers",
    "decoder.r",
    "decoder.n_mels",
    "decoder.dropout",
    "decoder.generate_dropout",
    "train.batch_size",
    "train.max_steps",
    "train.peak_lr",
    "train.warmup_steps",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.clip_norm",
    "train.checkpoint_interval",
    "train.adapt_lr_scale",
    "mask.p_text",
    "mask.p_speech",
    "mask.p_both",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => RunConfig {
                preset,
                seed: 1,
                model: ModelConfig {
                    vocab: 12,
                    encoder: EncoderConfig {
                        d_embed: 256,
                        d_prenet: 128,
                        bank_k: 16,
                        conv_channels: 128,
                        highway_layers: 4,
                        d_gru: 128,
                        dropout_rate: 0.5,
                    },
                    decoder: DecoderConfig {
                        d_prenet: 128,
                        d_attn_rnn: 256,
                        d_dec_rnn: 256,
                        dec_layers: 2,
                        r: 2,
                        n_mels: 80,
                        dropout_rate: 0.5,
                        generate_dropout: true,
                    },
                },
                train: TrainConfig {
                    batch_size: 32,
                    max_steps: 100_000,
                    peak_lr: 0.002,
                    warmup_steps: 4000,
                    beta1: 0.9,
                    beta2: 0.999,
                    epsilon: 1e-8,
                    clip_norm: 1.0,
                    mask: MaskPolicy::default(),
                    checkpoint_interval: 5000,
                    adapt_lr_scale: 0.2,
                },
            },
            Preset::Desk => RunConfig {
                preset,
                seed: 1,
                model: ModelConfig {
                    vocab: 12,
                    encoder: EncoderConfig {
                        d_embed: 32,
                        d_prenet: 16,
                        bank_k: 8,
                        conv_channels: 32,
                        highway_layers: 2,
                        d_gru: 32,
                        dropout_rate: 0.0,
                    },
                    decoder: DecoderConfig {
                        d_prenet: 16,
                        d_attn_rnn: 64,
                        d_dec_rnn: 64,
                        dec_layers: 2,
                        r: 2,
                        n_mels: 20,
                        dropout_rate: 0.5,
                        generate_dropout: true,
                    },
                },
                train: TrainConfig {
                    batch_size: 16,
                    max_steps: 2000,
                    peak_lr: 0.005,
                    warmup_steps: 200,
                    beta1: 0.9,
                    beta2: 0.999,
                    epsilon: 1e-8,
                    clip_norm: 1.0,
                    mask: MaskPolicy::default(),
                    checkpoint_interval: 500,
                    adapt_lr_scale: 0.2,
                },
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let dec = &mut self.model.decoder;
        let tr = &mut self.train;
        match key {
            "preset" => {
                let p: Preset = value.trim().parse()?;
                if p != self.preset {
                    return Err(Error::Config(format!(
                        "preset `{p}` conflicts with the active preset `{}`",
                        self.preset
                    )));
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "model.vocab" => self.model.vocab = parse(key, value)?,
            "encoder.d_embed" => enc.d_embed = parse(key, value)?,
            "encoder.d_prenet" => enc.d_prenet = parse(key, value)?,
            "encoder.bank_k" => enc.bank_k = parse(key, value)?,
            "encoder.conv_channels" => enc.conv_channels = parse(key, value)?,
            "encoder.highway_layers" => enc.highway_layers = parse(key, value)?,
            "encoder.d_gru" => enc.d_gru = parse(key, value)?,
            "encoder.dropout" => enc.dropout_rate = parse(key, value)?,
            "decoder.d_prenet" => dec.d_prenet = parse(key, value)?,
            "decoder.d_attn_rnn" => dec.d_attn_rnn = parse(key, value)?,
            "decoder.d_dec_rnn" => dec.d_dec_rnn = parse(key, value)?,
            "decoder.dec_layers" => dec.dec_layers = parse(key, value)?,
            "decoder.r" => dec.r = parse(key, value)?,
            "decoder.n_mels" => dec.n_mels = parse(key, value)?,
            "decoder.dropout" => dec.dropout_rate = parse(key, value)?,
            "decoder.generate_dropout" => dec.generate_dropout = parse(key, value)?,
            "train.batch_size" => tr.batch_size = parse(key, value)?,
            "train.max_steps" => tr.max_steps = parse(key, value)?,
            "train.peak_lr" => tr.peak_lr = parse(key, value)?,
            "train.warmup_steps" => tr.warmup_steps = parse(key, value)?,
            "train.beta1" => tr.beta1 = parse(key, value)?,
            "train.beta2" => tr.beta2 = parse(key, value)?,
            "train.epsilon" => tr.epsilon = parse(key, value)?,
            "train.clip_norm" => tr.clip_norm = parse(key, value)?,
            "train.checkpoint_interval" => tr.checkpoint_interval = parse(key, value)?,
            "train.adapt_lr_scale" => tr.adapt_lr_scale = parse(key, value)?,
            "mask.p_text" => tr.mask.p_text = parse(key, value)?,
            "mask.p_speech" => tr.mask.p_speech = parse(key, value)?,
            "mask.p_both" => tr.mask.p_both = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let enc = &self.model.encoder;
        let dec = &self.model.decoder;
        let tr = &self.train;
        Some(match key {
            "preset" => self.preset.to_string(),
            "seed" => self.seed.to_string(),
            "model.vocab" => self.model.vocab.to_string(),
            "encoder.d_embed" => enc.d_embed.to_string(),
            "encoder.d_prenet" => enc.d_prenet.to_string(),
            "encoder.bank_k" => enc.bank_k.to_string(),
            "encoder.conv_channels" => enc.conv_channels.to_string(),
            "encoder.highway_layers" => enc.highway_layers.to_string(),
            "encoder.d_gru" => enc.d_gru.to_string(),
            "encoder.dropout" => enc.dropout_rate.to_string(),
            "decoder.d_prenet" => dec.d_prenet.to_string(),
            "decoder.d_attn_rnn" => dec.d_attn_rnn.to_string(),
            "decoder.d_dec_rnn" => dec.d_dec_rnn.to_string(),
            "decoder.dec_layers" => dec.dec_layers.to_string(),
            "decoder.r" => dec.r.to_string(),
            "decoder.n_mels" => dec.n_mels.to_string(),
            "decoder.dropout" => dec.dropout_rate.to_string(),
            "decoder.generate_dropout" => dec.generate_dropout.to_string(),
            "train.batch_size" => tr.batch_size.to_string(),
            "train.max_steps" => tr.max_steps.to_string(),
            "train.peak_lr" => tr.peak_lr.to_string(),
            "train.warmup_steps" => tr.warmup_steps.to_string(),
            "train.beta1" => tr.beta1.to_string(),
            "train.beta2" => tr.beta2.to_string(),
            "train.epsilon" => tr.epsilon.to_string(),
            "train.clip_norm" => tr.clip_norm.to_string(),
            "train.checkpoint_interval" => tr.checkpoint_interval.to_string(),
            "train.adapt_lr_scale" => tr.adapt_lr_scale.to_string(),
            "mask.p_text" => tr.mask.p_text.to_string(),
            "mask.p_speech" => tr.mask.p_speech.to_string(),
            "mask.p_both" => tr.mask.p_both.to_string(),
            _ => return None,
        })
    }

    /// Canonical snapshot: one `key=value` line per key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Inverse of [`RunConfig::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::build(None, &pairs, &[])
    }

    /// Layers preset, file pairs and override pairs, in that precedence.
    /// The preset comes from `preset` if given, else from a `preset` key in
    /// `file`, else desk.
    pub fn build(preset: Option<Preset>, file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let file_preset = file
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.trim().parse::<Preset>())
            .transpose()?;
        let chosen = preset.or(file_preset).unwrap_or(Preset::Desk);
        let mut cfg = RunConfig::preset(chosen);
        for (k, v) in file.iter().chain(overrides) {
            if k == "preset" {
                // Already resolved above; a command-line preset wins.
                continue;
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let t = &self.train;
        let positive = [
            ("model.vocab", self.model.vocab),
            ("encoder.d_embed", e.d_embed),
            ("encoder.d_prenet", e.d_prenet),
            ("encoder.bank_k", e.bank_k),
            ("encoder.conv_channels", e.conv_channels),
            ("encoder.d_gru", e.d_gru),
            ("decoder.d_prenet", d.d_prenet),
            ("decoder.d_attn_rnn", d.d_attn_rnn),
            ("decoder.d_dec_rnn", d.d_dec_rnn),
            ("decoder.dec_layers", d.dec_layers),
            ("decoder.r", d.r),
            ("decoder.n_mels", d.n_mels),
            ("train.batch_size", t.batch_size),
            ("train.warmup_steps", t.warmup_steps as usize),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        for (k, v) in [("encoder.dropout", e.dropout_rate), ("decoder.dropout", d.dropout_rate)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1), got {v}")));
            }
        }
        if !(t.peak_lr > 0.0 && t.clip_norm > 0.0 && t.adapt_lr_scale > 0.0 && t.epsilon > 0.0) {
            return Err(Error::Config(
                "learning rate, clip norm, adapt scale and epsilon must be positive".into(),
            ));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        t.mask.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
