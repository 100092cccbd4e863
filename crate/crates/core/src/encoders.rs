//! Symbol-sequence and source-spectrogram encoders.
//!
//! Both share one architecture: a single dense pre-net with dropout followed
//! by a CBHG block (convolution bank, max pooling, two projection
//! convolutions with a residual connection, highway stack, bidirectional
//! GRU). Each encoder returns its final state vector and a same-length
//! output sequence.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::layers::{maxpool1d_same_backward, HighwayCache};
use crate::numerics::ops::relu;
use crate::numerics::{
    dropout_mask, maxpool1d_same, BiGru, Conv1d, ConvBank, Embedding, Grads, Highway, Linear, NumArray, ParamSet,
    SeededRng,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechInput {
    pub frames: NumArray,
}

/// Final state `s` and output sequence `o` of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub state: NumArray,
    pub outputs: NumArray,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.outputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn d_state(&self) -> usize {
        self.state.len()
    }
}

/// Gradient of a loss with respect to an [`EncoderOutput`].
#[derive(Clone, Debug)]
pub struct EncoderOutputGrad {
    pub state: Vec<f64>,
    pub outputs: NumArray,
}

impl EncoderOutputGrad {
    pub fn zeros_like(out: &EncoderOutput) -> Self {
        EncoderOutputGrad {
            state: vec![0.0; out.state.len()],
            outputs: NumArray::zeros(out.outputs.shape()),
        }
    }
}

/// Dense + ReLU + inverted dropout.
#[derive(Clone, Debug)]
pub struct Prenet {
    pub fc: Linear,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug)]
pub struct PrenetCache {
    act: NumArray,
    mask: NumArray,
}

impl Prenet {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        dropout_rate: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Prenet {
            fc: Linear::new(ps, name, din, dout, rng)?,
            dropout_rate,
        })
    }

    /// `dropout` is `None` in inference mode.
    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &NumArray,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(NumArray, PrenetCache)> {
        let mut act = self.fc.forward(ps, x)?;
        act.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let mask = match dropout {
            Some(rng) => dropout_mask(act.shape(), self.dropout_rate, true, rng)?,
            None => NumArray::filled(act.shape(), 1.0),
        };
        self.forward_with_mask(act, mask)
    }

    fn forward_with_mask(&self, act: NumArray, mask: NumArray) -> Result<(NumArray, PrenetCache)> {
        let mut y = act.clone();
        for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        Ok((y, PrenetCache { act, mask }))
    }

    pub fn backward(&self, ps: &ParamSet, x: &NumArray, c: &PrenetCache, dy: &NumArray, g: &mut Grads) -> NumArray {
        let mut dpre = dy.clone();
        for ((d, a), m) in dpre.data_mut().iter_mut().zip(c.act.data()).zip(c.mask.data()) {
            *d = if *a > 0.0 { *d * m } else { 0.0 };
        }
        self.fc.backward(ps, x, &dpre, g)
    }
}

#[derive(Clone, Debug)]
pub struct Cbhg {
    pub bank: ConvBank,
    pub proj1: Conv1d,
    pub proj2: Conv1d,
    /// Present when the residual width differs from the highway width.
    pub to_highway: Option<Linear>,
    pub highways: Vec<Highway>,
    pub gru: BiGru,
    pub d_in: usize,
}

#[derive(Clone, Debug)]
pub struct CbhgCache {
    x: NumArray,
    bank_out: NumArray,
    pool_src: Vec<usize>,
    pooled: NumArray,
    p1: NumArray,
    residual: NumArray,
    hw_inputs: Vec<NumArray>,
    hw_caches: Vec<HighwayCache>,
    gru_cache: crate::numerics::layers::BiGruCache,
}

impl Cbhg {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        let bank = ConvBank::new(ps, &format!("{name}.bank"), cfg.bank_k, d_in, cfg.conv_channels, rng)?;
        let proj1 = Conv1d::new(ps, &format!("{name}.proj1"), 3, bank.out_dim(), cfg.conv_channels, rng)?;
        let proj2 = Conv1d::new(ps, &format!("{name}.proj2"), 3, cfg.conv_channels, d_in, rng)?;
        let to_highway = if d_in != cfg.d_gru {
            Some(Linear::new(ps, &format!("{name}.to_highway"), d_in, cfg.d_gru, rng)?)
        } else {
            None
        };
        let highways = (0..cfg.highway_layers)
            .map(|i| Highway::new(ps, &format!("{name}.highway{i}"), cfg.d_gru, rng))
            .collect::<Result<_>>()?;
        let gru = BiGru::new(ps, &format!("{name}.gru"), cfg.d_gru, cfg.d_gru, rng)?;
        Ok(Cbhg {
            bank,
            proj1,
            proj2,
            to_highway,
            highways,
            gru,
            d_in,
        })
    }

    pub fn forward(&self, ps: &ParamSet, x: &NumArray) -> Result<(EncoderOutput, CbhgCache)> {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::EmptySequence("cbhg"));
        }
        if x.cols() != self.d_in {
            return Err(Error::shape(
                "cbhg",
                format!("input width {} != {}", x.cols(), self.d_in),
            ));
        }
        let bank_out = self.bank.forward(ps, x)?;
        let (pooled, pool_src) = maxpool1d_same(&bank_out)?;
        let mut p1 = self.proj1.forward(ps, &pooled)?;
        p1.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let mut residual = self.proj2.forward(ps, &p1)?;
        residual.add_assign(x);

        let mut h = match &self.to_highway {
            Some(l) => l.forward(ps, &residual)?,
            None => residual.clone(),
        };
        let mut hw_inputs = Vec::with_capacity(self.highways.len());
        let mut hw_caches = Vec::with_capacity(self.highways.len());
        for hw in &self.highways {
            let (y, c) = hw.forward(ps, &h)?;
            hw_inputs.push(std::mem::replace(&mut h, y));
            hw_caches.push(c);
        }
        let (states, state, gru_cache) = self.gru.forward(ps, &h)?;
        Ok((
            EncoderOutput { state, outputs: states },
            CbhgCache {
                x: x.clone(),
                bank_out,
                pool_src,
                pooled,
                p1,
                residual,
                hw_inputs,
                hw_caches,
                gru_cache,
            },
        ))
    }

    pub fn backward(&self, ps: &ParamSet, c: &CbhgCache, d: &EncoderOutputGrad, g: &mut Grads) -> NumArray {
        let mut dh = self.gru.backward(ps, &c.gru_cache, &d.outputs, &d.state, g);
        for (i, hw) in self.highways.iter().enumerate().rev() {
            dh = hw.backward(ps, &c.hw_inputs[i], &c.hw_caches[i], &dh, g);
        }
        let dres = match &self.to_highway {
            Some(l) => l.backward(ps, &c.residual, &dh, g),
            None => dh,
        };
        // residual = proj2(p1) + x
        let mut dx = dres.clone();
        let mut dp1 = self.proj2.backward(ps, &c.p1, &dres, g);
        for (dv, v) in dp1.data_mut().iter_mut().zip(c.p1.data()) {
            if *v <= 0.0 {
                *dv = 0.0;
            }
        }
        let dpooled = self.proj1.backward(ps, &c.pooled, &dp1, g);
        let dbank = maxpool1d_same_backward(&c.pool_src, &dpooled);
        dx.add_assign(&self.bank.backward(ps, &c.x, &c.bank_out, &dbank, g));
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Text,
    Speech,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub embedding: Option<Embedding>,
    pub prenet: Prenet,
    pub cbhg: Cbhg,
    /// Symbol vocabulary (text) or number of mel bands (speech).
    pub input_size: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    tokens: Vec<usize>,
    prenet_in: NumArray,
    prenet: PrenetCache,
    cbhg: CbhgCache,
}

impl Encoder {
    pub fn new_text(
        ps: &mut ParamSet,
        name: &str,
        vocab: usize,
        cfg: &EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let embedding = Embedding::new(ps, &format!("{name}.embedding"), vocab, cfg.d_embed, rng)?;
        let prenet = Prenet::new(
            ps,
            &format!("{name}.prenet"),
            cfg.d_embed,
            cfg.d_prenet,
            cfg.dropout_rate,
            rng,
        )?;
        let cbhg = Cbhg::new(ps, &format!("{name}.cbhg"), cfg.d_prenet, cfg, rng)?;
        Ok(Encoder {
            kind: EncoderKind::Text,
            embedding: Some(embedding),
            prenet,
            cbhg,
            input_size: vocab,
        })
    }

    pub fn new_speech(
        ps: &mut ParamSet,
        name: &str,
        n_mels: usize,
        cfg: &EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let prenet = Prenet::new(
            ps,
            &format!("{name}.prenet"),
            n_mels,
            cfg.d_prenet,
            cfg.dropout_rate,
            rng,
        )?;
        let cbhg = Cbhg::new(ps, &format!("{name}.cbhg"), cfg.d_prenet, cfg, rng)?;
        Ok(Encoder {
            kind: EncoderKind::Speech,
            embedding: None,
            prenet,
            cbhg,
            input_size: n_mels,
        })
    }

    pub fn d_state(&self) -> usize {
        2 * self.cbhg.gru.hidden()
    }

    /// Embedding lookup, pre-net and CBHG. `dropout == None` means inference.
    pub fn forward_text(
        &self,
        ps: &ParamSet,
        tokens: &[usize],
        dropout: Option<&mut SeededRng>,
    ) -> Result<(EncoderOutput, EncoderCache)> {
        let emb = match (&self.kind, &self.embedding) {
            (EncoderKind::Text, Some(e)) => e,
            _ => return Err(Error::InputKind("speech encoder cannot encode symbols".into())),
        };
        if tokens.is_empty() {
            return Err(Error::EmptySequence("encode_text"));
        }
        let x = emb.forward(ps, tokens)?;
        self.forward_features(ps, tokens.to_vec(), x, dropout)
    }

    pub fn forward_speech(
        &self,
        ps: &ParamSet,
        frames: &NumArray,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(EncoderOutput, EncoderCache)> {
        if self.kind != EncoderKind::Speech {
            return Err(Error::InputKind("text encoder cannot encode spectrograms".into()));
        }
        if frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::EmptySequence("encode_speech"));
        }
        if frames.cols() != self.input_size {
            return Err(Error::shape(
                "encode_speech",
                format!("{} mel bands, encoder expects {}", frames.cols(), self.input_size),
            ));
        }
        frames.check_finite("source spectrogram")?;
        self.forward_features(ps, Vec::new(), frames.clone(), dropout)
    }

    fn forward_features(
        &self,
        ps: &ParamSet,
        tokens: Vec<usize>,
        x: NumArray,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(EncoderOutput, EncoderCache)> {
        let (pre, prenet) = self.prenet.forward(ps, &x, dropout)?;
        let (out, cbhg) = self.cbhg.forward(ps, &pre)?;
        Ok((
            out,
            EncoderCache {
                tokens,
                prenet_in: x,
                prenet,
                cbhg,
            },
        ))
    }

    /// Inference-mode text encoding.
    pub fn encode_text(&self, ps: &ParamSet, input: &TextInput) -> Result<EncoderOutput> {
        Ok(self.forward_text(ps, &input.tokens, None)?.0)
    }

    /// Inference-mode spectrogram encoding.
    pub fn encode_speech(&self, ps: &ParamSet, input: &SpeechInput) -> Result<EncoderOutput> {
        Ok(self.forward_speech(ps, &input.frames, None)?.0)
    }

    /// Backpropagates into the encoder parameters. Returns the gradient with
    /// respect to the pre-net input (embeddings or frames).
    pub fn backward(&self, ps: &ParamSet, c: &EncoderCache, d: &EncoderOutputGrad, g: &mut Grads) -> NumArray {
        let dpre = self.cbhg.backward(ps, &c.cbhg, d, g);
        let dx = self.prenet.backward(ps, &c.prenet_in, &c.prenet, &dpre, g);
        if let Some(emb) = &self.embedding {
            emb.backward(&c.tokens, &dx, g);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::config::{Preset, RunConfig};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_embed: 4,
            d_prenet: 3,
            bank_k: 2,
            conv_channels: 3,
            highway_layers: 1,
            d_gru: 2,
            dropout_rate: 0.5,
        }
    }

    #[test]
    fn single_token_and_frame() {
        let mut rng = SeededRng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let cfg = tiny_cfg();
        let te = Encoder::new_text(&mut ps, "t", 5, &cfg, &mut rng).unwrap();
        let se = Encoder::new_speech(&mut ps, "s", 6, &cfg, &mut rng).unwrap();
        let out = te.encode_text(&ps, &TextInput { tokens: vec![3] }).unwrap();
        assert_eq!(out.outputs.shape(), &[1, 4]);
        assert_eq!(out.state.shape(), &[4]);
        let out = se
            .encode_speech(
                &ps,
                &SpeechInput {
                    frames: NumArray::filled(&[1, 6], 0.2),
                },
            )
            .unwrap();
        assert_eq!(out.outputs.shape(), &[1, 4]);
    }

    #[test]
    fn errors() {
        let mut rng = SeededRng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let cfg = tiny_cfg();
        let te = Encoder::new_text(&mut ps, "t", 5, &cfg, &mut rng).unwrap();
        let se = Encoder::new_speech(&mut ps, "s", 6, &cfg, &mut rng).unwrap();
        assert!(matches!(
            te.encode_text(&ps, &TextInput { tokens: vec![1, 5] }),
            Err(Error::UnknownSymbol { id: 5, vocab: 5 })
        ));
        assert!(te.encode_text(&ps, &TextInput { tokens: vec![] }).is_err());
        assert!(matches!(
            se.encode_speech(
                &ps,
                &SpeechInput {
                    frames: NumArray::zeros(&[3, 7])
                }
            ),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_params_zero_outputs() {
        let mut rng = SeededRng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let cfg = RunConfig::preset(Preset::Desk).model.encoder;
        let se = Encoder::new_speech(&mut ps, "s", 20, &cfg, &mut rng).unwrap();
        for p in ps.iter_mut() {
            p.value.fill(0.0);
        }
        let out = se
            .encode_speech(
                &ps,
                &SpeechInput {
                    frames: NumArray::zeros(&[5, 20]),
                },
            )
            .unwrap();
        assert!(out.outputs.data().iter().all(|v| *v == 0.0));
        assert!(out.state.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inference_is_deterministic_and_lengths_preserved() {
        let mut rng = SeededRng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let cfg = RunConfig::preset(Preset::Desk).model.encoder;
        let te = Encoder::new_text(&mut ps, "t", 12, &cfg, &mut rng).unwrap();
        for m in 1..9 {
            let input = TextInput {
                tokens: (0..m).map(|i| (i * 5) % 12).collect(),
            };
            let a = te.encode_text(&ps, &input).unwrap();
            let b = te.encode_text(&ps, &input).unwrap();
            assert_eq!(a.outputs.rows(), m);
            assert_eq!(a.outputs.data(), b.outputs.data());
            assert_eq!(a.state.data(), b.state.data());
        }
    }

    #[test]
    fn zero_rate_training_equals_inference() {
        let mut rng = SeededRng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let mut cfg = tiny_cfg();
        cfg.dropout_rate = 0.0;
        let te = Encoder::new_text(&mut ps, "t", 5, &cfg, &mut rng).unwrap();
        let tokens = [1, 2, 4];
        let a = te.forward_text(&ps, &tokens, None).unwrap().0;
        let b = te.forward_text(&ps, &tokens, Some(&mut rng)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn prenet_zero_weights_inference() {
        let mut rng = SeededRng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let p = Prenet::new(&mut ps, "p", 3, 5, 0.5, &mut rng).unwrap();
        for prm in ps.iter_mut() {
            prm.value.fill(0.0);
        }
        let (y, _) = p.forward(&ps, &NumArray::filled(&[2, 3], 1.0), None).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }
}
