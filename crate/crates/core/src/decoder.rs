//! Dual-attention autoregressive decoder.
//!
//! Per output step `k`:
//!
//! ```text
//! p_k        = prenet(y_prev)
//! h_a        = AttnGRU([p_k ; c_t ; c_v], h_a)
//! c_t, c_v   = attend_t(h_a, o_t), attend_v(h_a, o_v)    (masked → 0)
//! x_0        = in_proj([h_a ; c_t ; c_v])
//! x_{l+1}    = x_l + GRU_l(x_l, h_l)                        (residual stack)
//! frames     = fc(x_L)                                      (r frames)
//! ```
//!
//! The attention-RNN state starts from `tanh(W·[s_t ; s_v] + b)` with masked
//! sources contributing zeros, contexts start at zero and `y_prev` starts as
//! an all-zero GO frame. A masked source is never read: its context is the
//! zero vector both as an RNN input and in the carried state.

use std::fmt::Write as _;

use crate::config::DecoderConfig;
use crate::encoders::{EncoderOutput, EncoderOutputGrad, Prenet, PrenetCache};
use crate::error::{Error, Result};
use crate::masking::MaskSelection;
use crate::numerics::layers::GruStep;
use crate::numerics::ops::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_backward, softmax_slice};
use crate::numerics::param::uniform;
use crate::numerics::{Grads, Gru, Linear, NumArray, ParamId, ParamSet, SeededRng};

/// Score given to padded memory positions before the softmax.
pub const PAD_SCORE: f64 = -1e9;

/// Half-width for the attention scorer. At the default
/// [`INIT_SCALE`](crate::numerics::layers::INIT_SCALE) the scores start out
/// nearly constant and on small corpora the decoder learns to ignore its
/// memory.
pub const ATTN_INIT_SCALE: f64 = 1.5;

/// Additive attention: `e_j = v·tanh(W·h + U·o_j + b)`, weights = softmax(e).
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_query: ParamId,
    pub u_memory: ParamId,
    pub v_score: ParamId,
    pub b: ParamId,
    pub d_query: usize,
    pub d_memory: usize,
    pub d_attn: usize,
}

#[derive(Clone, Debug)]
pub struct AttendCache {
    /// `tanh(W·h + U·o_j + b)` for every memory row, `[L, d_attn]`.
    act: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

impl Attention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_query: usize,
        d_memory: usize,
        d_attn: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Attention {
            w_query: ps.add(
                format!("{name}.w_query"),
                uniform(&[d_query, d_attn], ATTN_INIT_SCALE, rng),
            )?,
            u_memory: ps.add(
                format!("{name}.u_memory"),
                uniform(&[d_memory, d_attn], ATTN_INIT_SCALE, rng),
            )?,
            v_score: ps.add(format!("{name}.v_score"), uniform(&[d_attn], ATTN_INIT_SCALE, rng))?,
            b: ps.add(format!("{name}.b"), NumArray::zeros(&[d_attn]))?,
            d_query,
            d_memory,
            d_attn,
        })
    }

    /// `U·o_j` for every memory row; computed once per utterance.
    pub fn keys(&self, ps: &ParamSet, memory: &NumArray) -> Result<NumArray> {
        if memory.rank() != 2 || memory.rows() == 0 {
            return Err(Error::EmptySequence("attend"));
        }
        if memory.cols() != self.d_memory {
            return Err(Error::shape(
                "attend",
                format!("memory width {} != {}", memory.cols(), self.d_memory),
            ));
        }
        let l = memory.rows();
        let mut keys = NumArray::zeros(&[l, self.d_attn]);
        gemm_acc(
            memory.data(),
            ps.value(self.u_memory).data(),
            keys.data_mut(),
            l,
            self.d_memory,
            self.d_attn,
        );
        Ok(keys)
    }

    pub(crate) fn keys_backward(
        &self,
        ps: &ParamSet,
        memory: &NumArray,
        dkeys: &NumArray,
        dmemory: &mut NumArray,
        g: &mut Grads,
    ) {
        let l = memory.rows();
        gemm_tn_acc(
            memory.data(),
            dkeys.data(),
            g.get_mut(self.u_memory),
            l,
            self.d_memory,
            self.d_attn,
        );
        gemm_nt_acc(
            dkeys.data(),
            ps.value(self.u_memory).data(),
            dmemory.data_mut(),
            l,
            self.d_attn,
            self.d_memory,
        );
    }

    /// Positions `>= valid_len` are padding and get [`PAD_SCORE`].
    pub fn step(
        &self,
        ps: &ParamSet,
        h: &[f64],
        memory: &NumArray,
        keys: &NumArray,
        valid_len: usize,
    ) -> Result<AttendCache> {
        let l = memory.rows();
        if valid_len == 0 || valid_len > l {
            return Err(Error::InvalidArgument(format!(
                "attention valid length {valid_len} outside 1..={l}"
            )));
        }
        let da = self.d_attn;
        let mut query = ps.value(self.b).data().to_vec();
        ops::vecmat_acc(h, ps.value(self.w_query).data(), &mut query);
        let v = ps.value(self.v_score).data();
        let mut act = vec![0.0; l * da];
        let mut scores = vec![PAD_SCORE; l];
        for j in 0..valid_len {
            let row = &mut act[j * da..(j + 1) * da];
            for ((a, q), k) in row.iter_mut().zip(&query).zip(keys.row(j)) {
                *a = (q + k).tanh();
            }
            scores[j] = ops::dot(row, v);
        }
        let weights = softmax_slice(&scores)?;
        let mut context = vec![0.0; self.d_memory];
        for (j, &w) in weights.iter().enumerate() {
            ops::axpy(w, memory.row(j), &mut context);
        }
        Ok(AttendCache { act, weights, context })
    }

    /// Returns `dh`; accumulates into `dkeys` and `dmemory`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step_backward(
        &self,
        ps: &ParamSet,
        h: &[f64],
        memory: &NumArray,
        c: &AttendCache,
        dcontext: &[f64],
        dkeys: &mut NumArray,
        dmemory: &mut NumArray,
        g: &mut Grads,
    ) -> Vec<f64> {
        let l = memory.rows();
        let da = self.d_attn;
        let dw: Vec<f64> = (0..l).map(|j| ops::dot(dcontext, memory.row(j))).collect();
        for (j, &w) in c.weights.iter().enumerate() {
            if w != 0.0 {
                ops::axpy(w, dcontext, dmemory.row_mut(j));
            }
        }
        let de = softmax_backward(&c.weights, &dw);
        let v = ps.value(self.v_score).data();
        let mut dquery = vec![0.0; da];
        let mut dv = vec![0.0; da];
        for j in 0..l {
            if de[j] == 0.0 {
                continue;
            }
            let act = &c.act[j * da..(j + 1) * da];
            ops::axpy(de[j], act, &mut dv);
            let dk = dkeys.row_mut(j);
            for i in 0..da {
                let dpre = de[j] * v[i] * (1.0 - act[i] * act[i]);
                dquery[i] += dpre;
                dk[i] += dpre;
            }
        }
        ops::axpy(1.0, &dv, g.get_mut(self.v_score));
        ops::axpy(1.0, &dquery, g.get_mut(self.b));
        ops::outer_acc(h, &dquery, g.get_mut(self.w_query));
        let mut dh = vec![0.0; self.d_query];
        ops::matvec_acc(ps.value(self.w_query).data(), &dquery, &mut dh);
        dh
    }
}

/// Single-shot attention over an unpadded memory: `(weights, context)`.
pub fn attend(ps: &ParamSet, h: &[f64], memory: &NumArray, att: &Attention) -> Result<(Vec<f64>, Vec<f64>)> {
    let keys = att.keys(ps, memory)?;
    let c = att.step(ps, h, memory, &keys, memory.rows())?;
    Ok((c.weights, c.context))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h_a: Vec<f64>,
    pub h_d: Vec<Vec<f64>>,
    /// Text context; empty when the decoder has no text branch.
    pub c_t: Vec<f64>,
    /// Speech context; empty when the decoder has no speech branch.
    pub c_v: Vec<f64>,
    pub y_prev: Vec<f64>,
    pub k: usize,
}

/// Attention weights of one decoder step; `None` for a masked or absent source.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAlignment {
    pub text: Option<Vec<f64>>,
    pub speech: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTrace {
    pub mask: MaskSelection,
    pub steps: Vec<StepAlignment>,
}

impl AlignmentTrace {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Weight matrix `[n_steps][source_len]` for one source, if it was active.
    pub fn source(&self, speech: bool) -> Option<Vec<Vec<f64>>> {
        self.steps
            .iter()
            .map(|s| if speech { s.speech.clone() } else { s.text.clone() })
            .collect()
    }

    /// `step,source,position,weight` rows, sources `t` and `v`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,source,position,weight\n");
        for (k, s) in self.steps.iter().enumerate() {
            for (tag, w) in [("t", &s.text), ("v", &s.speech)] {
                if let Some(w) = w {
                    for (j, x) in w.iter().enumerate() {
                        let _ = writeln!(out, "{k},{tag},{j},{x}");
                    }
                }
            }
        }
        out
    }
}

/// Encoder outputs available to the decoder; either may be absent.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sources<'a> {
    pub text: Option<&'a EncoderOutput>,
    pub speech: Option<&'a EncoderOutput>,
}

struct ActiveMemory<'a> {
    enc: &'a EncoderOutput,
    keys: NumArray,
}

struct Prepared<'a> {
    text: Option<ActiveMemory<'a>>,
    speech: Option<ActiveMemory<'a>>,
}

struct InitCache {
    s: Vec<f64>,
    h: Vec<f64>,
}

struct StepCache {
    prenet_in: NumArray,
    prenet: PrenetCache,
    attn_gru: GruStep,
    att_t: Option<AttendCache>,
    att_v: Option<AttendCache>,
    dec_in: Vec<f64>,
    layer_gru: Vec<GruStep>,
    out: Vec<f64>,
}

/// Everything needed to backpropagate a teacher-forced decode.
pub struct DecodeCache<'a> {
    prepared: Prepared<'a>,
    init: InitCache,
    steps: Vec<StepCache>,
}

/// Free-running generation knobs.
#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub max_steps: usize,
    /// Keep pre-net dropout active (requires an rng).
    pub dropout: bool,
    /// Stop after [`STOP_PATIENCE`] consecutive quiet groups.
    pub energy_stop: bool,
}

/// Mean absolute frame value under which a group counts as quiet.
pub const STOP_ENERGY: f64 = 0.02;
pub const STOP_PATIENCE: usize = 3;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// State width of the text encoder, if the decoder has a text branch.
    pub d_text: Option<usize>,
    pub d_speech: Option<usize>,
    pub prenet: Prenet,
    pub init: Linear,
    pub attn_rnn: Gru,
    pub att_t: Option<Attention>,
    pub att_v: Option<Attention>,
    pub in_proj: Linear,
    pub layers: Vec<Gru>,
    pub fc: Linear,
}

impl Decoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cfg: &DecoderConfig,
        d_text: Option<usize>,
        d_speech: Option<usize>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if d_text.is_none() && d_speech.is_none() {
            return Err(Error::InvalidArgument("decoder needs at least one source".into()));
        }
        let dt = d_text.unwrap_or(0);
        let dv = d_speech.unwrap_or(0);
        let prenet = Prenet::new(
            ps,
            &format!("{name}.prenet"),
            cfg.n_mels,
            cfg.d_prenet,
            cfg.dropout_rate,
            rng,
        )?;
        let init = Linear::new(ps, &format!("{name}.init"), dt + dv, cfg.d_attn_rnn, rng)?;
        let attn_rnn = Gru::new(
            ps,
            &format!("{name}.attn_rnn"),
            cfg.d_prenet + dt + dv,
            cfg.d_attn_rnn,
            rng,
        )?;
        let att_t = d_text
            .map(|d| Attention::new(ps, &format!("{name}.att_t"), cfg.d_attn_rnn, d, cfg.d_attn_rnn, rng))
            .transpose()?;
        let att_v = d_speech
            .map(|d| Attention::new(ps, &format!("{name}.att_v"), cfg.d_attn_rnn, d, cfg.d_attn_rnn, rng))
            .transpose()?;
        let in_proj = Linear::new(
            ps,
            &format!("{name}.in_proj"),
            cfg.d_attn_rnn + dt + dv,
            cfg.d_dec_rnn,
            rng,
        )?;
        let layers = (0..cfg.dec_layers)
            .map(|l| Gru::new(ps, &format!("{name}.dec_rnn{l}"), cfg.d_dec_rnn, cfg.d_dec_rnn, rng))
            .collect::<Result<_>>()?;
        let fc = Linear::new(ps, &format!("{name}.fc"), cfg.d_dec_rnn, cfg.r * cfg.n_mels, rng)?;
        Ok(Decoder {
            cfg: cfg.clone(),
            d_text,
            d_speech,
            prenet,
            init,
            attn_rnn,
            att_t,
            att_v,
            in_proj,
            layers,
            fc,
        })
    }

    fn prepare<'a>(&self, ps: &ParamSet, src: Sources<'a>, mask: MaskSelection) -> Result<Prepared<'a>> {
        let pick = |uses: bool,
                    att: &Option<Attention>,
                    enc: Option<&'a EncoderOutput>,
                    label: &'static str|
         -> Result<Option<ActiveMemory<'a>>> {
            if !uses {
                return Ok(None);
            }
            let att = att
                .as_ref()
                .ok_or_else(|| Error::InputKind(format!("mask {mask} needs a {label} branch this decoder lacks")))?;
            let enc = enc.ok_or(Error::MissingInput { mask, missing: label })?;
            if enc.state.len() != att.d_memory {
                return Err(Error::shape(
                    "decoder",
                    format!("{label} state width {} != {}", enc.state.len(), att.d_memory),
                ));
            }
            Ok(Some(ActiveMemory {
                keys: att.keys(ps, &enc.outputs)?,
                enc,
            }))
        };
        Ok(Prepared {
            text: pick(mask.uses_text(), &self.att_t, src.text, "text")?,
            speech: pick(mask.uses_speech(), &self.att_v, src.speech, "speech")?,
        })
    }

    fn init_inner(&self, ps: &ParamSet, mem: &Prepared) -> (DecoderState, InitCache) {
        let dt = self.d_text.unwrap_or(0);
        let dv = self.d_speech.unwrap_or(0);
        let mut s = vec![0.0; dt + dv];
        if let Some(m) = &mem.text {
            s[..dt].copy_from_slice(m.enc.state.data());
        }
        if let Some(m) = &mem.speech {
            s[dt..].copy_from_slice(m.enc.state.data());
        }
        let mut h = self.init.forward_vec(ps, &s);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let st = DecoderState {
            h_a: h.clone(),
            h_d: vec![vec![0.0; self.cfg.d_dec_rnn]; self.cfg.dec_layers],
            c_t: vec![0.0; dt],
            c_v: vec![0.0; dv],
            y_prev: vec![0.0; self.cfg.n_mels],
            k: 0,
        };
        (st, InitCache { s, h })
    }

    pub fn init_state(&self, ps: &ParamSet, src: Sources, mask: MaskSelection) -> Result<DecoderState> {
        let mem = self.prepare(ps, src, mask)?;
        Ok(self.init_inner(ps, &mem).0)
    }

    fn step_inner(
        &self,
        ps: &ParamSet,
        st: &DecoderState,
        mem: &Prepared,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(Vec<f64>, DecoderState, StepCache)> {
        let prenet_in = NumArray::vector(&st.y_prev).reshape(&[1, self.cfg.n_mels])?;
        let (p, prenet) = self.prenet.forward(ps, &prenet_in, dropout)?;

        let mut attn_in = p.into_data();
        attn_in.extend_from_slice(&st.c_t);
        attn_in.extend_from_slice(&st.c_v);
        let attn_gru = self.attn_rnn.step(ps, &attn_in, &st.h_a);
        let h_a = &attn_gru.h;

        let attend_src = |att: &Option<Attention>, m: &Option<ActiveMemory>| -> Result<Option<AttendCache>> {
            match (att, m) {
                (Some(att), Some(m)) => Ok(Some(att.step(ps, h_a, &m.enc.outputs, &m.keys, m.enc.len())?)),
                _ => Ok(None),
            }
        };
        let att_t = attend_src(&self.att_t, &mem.text)?;
        let att_v = attend_src(&self.att_v, &mem.speech)?;
        let c_t = att_t
            .as_ref()
            .map_or_else(|| vec![0.0; st.c_t.len()], |c| c.context.clone());
        let c_v = att_v
            .as_ref()
            .map_or_else(|| vec![0.0; st.c_v.len()], |c| c.context.clone());

        let mut dec_in = h_a.clone();
        dec_in.extend_from_slice(&c_t);
        dec_in.extend_from_slice(&c_v);
        let mut x = self.in_proj.forward_vec(ps, &dec_in);
        let mut layer_gru = Vec::with_capacity(self.layers.len());
        let mut h_d = Vec::with_capacity(self.layers.len());
        for (l, gru) in self.layers.iter().enumerate() {
            let s = gru.step(ps, &x, &st.h_d[l]);
            let next: Vec<f64> = x.iter().zip(&s.h).map(|(a, b)| a + b).collect();
            h_d.push(s.h.clone());
            x = next;
            layer_gru.push(s);
        }
        let frames = self.fc.forward_vec(ps, &x);
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("decoder activations at step {}", st.k + 1)));
        }
        let n = self.cfg.n_mels;
        let next = DecoderState {
            h_a: h_a.clone(),
            h_d,
            c_t,
            c_v,
            y_prev: frames[(self.cfg.r - 1) * n..].to_vec(),
            k: st.k + 1,
        };
        Ok((
            frames,
            next,
            StepCache {
                prenet_in,
                prenet,
                attn_gru,
                att_t,
                att_v,
                dec_in,
                layer_gru,
                out: x,
            },
        ))
    }

    fn alignment(c: &StepCache) -> StepAlignment {
        StepAlignment {
            text: c.att_t.as_ref().map(|a| a.weights.clone()),
            speech: c.att_v.as_ref().map(|a| a.weights.clone()),
        }
    }

    /// One decoder step. The returned state's `y_prev` is the last emitted
    /// frame; teacher forcing overwrites it with ground truth.
    pub fn decoder_step(
        &self,
        ps: &ParamSet,
        st: &DecoderState,
        src: Sources,
        mask: MaskSelection,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(NumArray, DecoderState, StepAlignment)> {
        let mem = self.prepare(ps, src, mask)?;
        let (frames, next, cache) = self.step_inner(ps, st, &mem, dropout)?;
        let frames = NumArray::from_vec(&[self.cfg.r, self.cfg.n_mels], frames)?;
        Ok((frames, next, Self::alignment(&cache)))
    }

    /// Teacher-forced decode keeping the caches for [`Decoder::backward`].
    /// Returns predictions of shape `[ceil(T/r)·r, n_mels]`.
    pub fn forward_teacher_forced<'a>(
        &self,
        ps: &ParamSet,
        src: Sources<'a>,
        target: &NumArray,
        mask: MaskSelection,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<(NumArray, AlignmentTrace, DecodeCache<'a>)> {
        let n = self.cfg.n_mels;
        let r = self.cfg.r;
        if target.rank() != 2 || target.rows() == 0 {
            return Err(Error::EmptySequence("decode_teacher_forced"));
        }
        if target.cols() != n {
            return Err(Error::shape(
                "decode_teacher_forced",
                format!("target has {} bands, decoder emits {n}", target.cols()),
            ));
        }
        let n_steps = target.rows().div_ceil(r);
        let prepared = self.prepare(ps, src, mask)?;
        let (mut st, init) = self.init_inner(ps, &prepared);
        let mut pred = NumArray::zeros(&[n_steps * r, n]);
        let mut steps = Vec::with_capacity(n_steps);
        let mut trace = AlignmentTrace {
            mask,
            steps: Vec::with_capacity(n_steps),
        };
        for k in 0..n_steps {
            let (frames, mut next, cache) = self.step_inner(ps, &st, &prepared, dropout.as_deref_mut())?;
            pred.data_mut()[k * r * n..(k + 1) * r * n].copy_from_slice(&frames);
            // Past the end only on the last, padded group, whose successor
            // is never run.
            let last = (k + 1) * r - 1;
            next.y_prev = if last < target.rows() {
                target.row(last).to_vec()
            } else {
                vec![0.0; n]
            };
            trace.steps.push(Self::alignment(&cache));
            steps.push(cache);
            st = next;
        }
        Ok((pred, trace, DecodeCache { prepared, init, steps }))
    }

    /// Inference-mode teacher-forced decode.
    pub fn decode_teacher_forced(
        &self,
        ps: &ParamSet,
        src: Sources,
        target: &NumArray,
        mask: MaskSelection,
    ) -> Result<(NumArray, AlignmentTrace)> {
        let (pred, trace, _) = self.forward_teacher_forced(ps, src, target, mask, None)?;
        Ok((pred, trace))
    }

    /// Backpropagates `dpred` through the unrolled decode. Returns gradients
    /// for the text and speech encoder outputs (`None` when that source was
    /// masked or absent).
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &DecodeCache,
        dpred: &NumArray,
        g: &mut Grads,
    ) -> (Option<EncoderOutputGrad>, Option<EncoderOutputGrad>) {
        let rn = self.cfg.r * self.cfg.n_mels;
        let dt = self.d_text.unwrap_or(0);
        let dv = self.d_speech.unwrap_or(0);
        let da = self.cfg.d_attn_rnn;
        let dp = self.cfg.d_prenet;
        let mem = &cache.prepared;

        let mut d_text = mem.text.as_ref().map(|m| EncoderOutputGrad::zeros_like(m.enc));
        let mut d_speech = mem.speech.as_ref().map(|m| EncoderOutputGrad::zeros_like(m.enc));
        let mut dkeys_t = mem.text.as_ref().map(|m| NumArray::zeros(m.keys.shape()));
        let mut dkeys_v = mem.speech.as_ref().map(|m| NumArray::zeros(m.keys.shape()));

        let mut dh_a = vec![0.0; da];
        let mut dh_d = vec![vec![0.0; self.cfg.d_dec_rnn]; self.layers.len()];
        let mut dc_t_next = vec![0.0; dt];
        let mut dc_v_next = vec![0.0; dv];

        for (k, c) in cache.steps.iter().enumerate().rev() {
            let dframes = &dpred.data()[k * rn..(k + 1) * rn];
            let mut dx = self.fc.backward_vec(ps, &c.out, dframes, g);
            for (l, gru) in self.layers.iter().enumerate().rev() {
                // x_{l+1} = x_l + h_l
                let mut dh: Vec<f64> = dx.clone();
                ops::axpy(1.0, &dh_d[l], &mut dh);
                let (dxl, dprev) = gru.step_backward(ps, &c.layer_gru[l], &dh, g);
                ops::axpy(1.0, &dxl, &mut dx);
                dh_d[l] = dprev;
            }
            let ddec_in = self.in_proj.backward_vec(ps, &c.dec_in, &dx, g);

            let mut dh = ddec_in[..da].to_vec();
            ops::axpy(1.0, &dh_a, &mut dh);
            let h_a = &c.attn_gru.h;
            if let (Some(att), Some(ac), Some(m)) = (&self.att_t, &c.att_t, &mem.text) {
                let mut dctx = ddec_in[da..da + dt].to_vec();
                ops::axpy(1.0, &dc_t_next, &mut dctx);
                let d = d_text.as_mut().expect("active text source");
                let dhq = att.step_backward(
                    ps,
                    h_a,
                    &m.enc.outputs,
                    ac,
                    &dctx,
                    dkeys_t.as_mut().unwrap(),
                    &mut d.outputs,
                    g,
                );
                ops::axpy(1.0, &dhq, &mut dh);
            }
            if let (Some(att), Some(ac), Some(m)) = (&self.att_v, &c.att_v, &mem.speech) {
                let mut dctx = ddec_in[da + dt..].to_vec();
                ops::axpy(1.0, &dc_v_next, &mut dctx);
                let d = d_speech.as_mut().expect("active speech source");
                let dhq = att.step_backward(
                    ps,
                    h_a,
                    &m.enc.outputs,
                    ac,
                    &dctx,
                    dkeys_v.as_mut().unwrap(),
                    &mut d.outputs,
                    g,
                );
                ops::axpy(1.0, &dhq, &mut dh);
            }

            let (dattn_in, dprev) = self.attn_rnn.step_backward(ps, &c.attn_gru, &dh, g);
            dh_a = dprev;
            // Contexts entering this step were produced by step k-1 (or are the
            // zero initial contexts at k = 0, which have no upstream).
            dc_t_next.copy_from_slice(&dattn_in[dp..dp + dt]);
            dc_v_next.copy_from_slice(&dattn_in[dp + dt..]);
            if mem.text.is_none() {
                dc_t_next.iter_mut().for_each(|v| *v = 0.0);
            }
            if mem.speech.is_none() {
                dc_v_next.iter_mut().for_each(|v| *v = 0.0);
            }
            let dpre = NumArray::vector(&dattn_in[..dp])
                .reshape(&[1, dp])
                .expect("prenet width");
            self.prenet.backward(ps, &c.prenet_in, &c.prenet, &dpre, g);
        }

        // h_a0 = tanh(init(s))
        let dpre: Vec<f64> = dh_a.iter().zip(&cache.init.h).map(|(d, h)| d * (1.0 - h * h)).collect();
        let ds = self.init.backward_vec(ps, &cache.init.s, &dpre, g);

        if let (Some(att), Some(m), Some(d)) = (&self.att_t, &mem.text, d_text.as_mut()) {
            att.keys_backward(ps, &m.enc.outputs, dkeys_t.as_ref().unwrap(), &mut d.outputs, g);
            d.state.copy_from_slice(&ds[..dt]);
        }
        if let (Some(att), Some(m), Some(d)) = (&self.att_v, &mem.speech, d_speech.as_mut()) {
            att.keys_backward(ps, &m.enc.outputs, dkeys_v.as_ref().unwrap(), &mut d.outputs, g);
            d.state.copy_from_slice(&ds[dt..]);
        }
        (d_text, d_speech)
    }

    /// Free-running generation: each step's pre-net input is the last frame
    /// of the previous group. Output rows are a positive multiple of `r`.
    pub fn generate(
        &self,
        ps: &ParamSet,
        src: Sources,
        mask: MaskSelection,
        opts: GenerateOptions,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(NumArray, AlignmentTrace)> {
        if opts.max_steps < 1 {
            return Err(Error::InvalidArgument("generate needs max_steps >= 1".into()));
        }
        if opts.dropout && rng.is_none() {
            return Err(Error::InvalidArgument("generation dropout needs an rng".into()));
        }
        let prepared = self.prepare(ps, src, mask)?;
        let (mut st, _) = self.init_inner(ps, &prepared);
        let rn = self.cfg.r * self.cfg.n_mels;
        let mut frames_out = Vec::with_capacity(opts.max_steps * rn);
        let mut trace = AlignmentTrace {
            mask,
            steps: Vec::new(),
        };
        let mut quiet = 0;
        for _ in 0..opts.max_steps {
            let drop = if opts.dropout { rng.as_deref_mut() } else { None };
            let (frames, next, cache) = self.step_inner(ps, &st, &prepared, drop)?;
            trace.steps.push(Self::alignment(&cache));
            let energy = frames.iter().map(|v| v.abs()).sum::<f64>() / rn as f64;
            frames_out.extend_from_slice(&frames);
            st = next;
            if opts.energy_stop {
                quiet = if energy < STOP_ENERGY { quiet + 1 } else { 0 };
                if quiet >= STOP_PATIENCE {
                    break;
                }
            }
        }
        let rows = frames_out.len() / self.cfg.n_mels;
        Ok((NumArray::from_vec(&[rows, self.cfg.n_mels], frames_out)?, trace))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::numerics::param::uniform;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            d_prenet: 3,
            d_attn_rnn: 4,
            d_dec_rnn: 5,
            dec_layers: 2,
            r: 2,
            n_mels: 3,
            dropout_rate: 0.5,
            generate_dropout: false,
        }
    }

    fn enc(l: usize, d: usize, rng: &mut SeededRng) -> EncoderOutput {
        EncoderOutput {
            outputs: uniform(&[l, d], 1.0, rng),
            state: uniform(&[d], 1.0, rng),
        }
    }

    struct Fixture {
        ps: ParamSet,
        dec: Decoder,
        text: EncoderOutput,
        speech: EncoderOutput,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let dec = Decoder::new(&mut ps, "dec", &cfg(), Some(4), Some(6), &mut rng).unwrap();
        for p in ps.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = uniform(&shape, 0.4, &mut rng);
        }
        Fixture {
            ps,
            dec,
            text: enc(5, 4, &mut rng),
            speech: enc(7, 6, &mut rng),
        }
    }

    impl Fixture {
        fn src(&self) -> Sources<'_> {
            Sources {
                text: Some(&self.text),
                speech: Some(&self.speech),
            }
        }
    }

    fn no_dropout(max_steps: usize) -> GenerateOptions {
        GenerateOptions {
            max_steps,
            dropout: false,
            energy_stop: false,
        }
    }

    #[test]
    fn single_row_memory() {
        let f = fixture(1);
        let att = f.dec.att_t.as_ref().unwrap();
        let mem = NumArray::from_rows(&[vec![0.5, -1.0, 2.0, 3.0]]).unwrap();
        let (w, c) = attend(&f.ps, &[0.1, 0.2, 0.3, 0.4], &mem, att).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(c, mem.row(0));
    }

    #[test]
    fn zero_score_vector_is_uniform() {
        let mut f = fixture(2);
        let att = f.dec.att_t.clone().unwrap();
        f.ps.value_mut(att.v_score).fill(0.0);
        let (w, c) = attend(&f.ps, &[0.3, -0.1, 0.9, 0.0], &f.text.outputs, &att).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-15));
        for (j, cj) in c.iter().enumerate() {
            let mean = (0..5).map(|i| f.text.outputs.get2(i, j)).sum::<f64>() / 5.0;
            assert!((cj - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_positions_get_no_weight() {
        let f = fixture(3);
        let att = f.dec.att_t.as_ref().unwrap();
        let keys = att.keys(&f.ps, &f.text.outputs).unwrap();
        let c = att
            .step(&f.ps, &[0.1, 0.2, 0.3, 0.4], &f.text.outputs, &keys, 3)
            .unwrap();
        assert_eq!(&c.weights[3..], &[0.0, 0.0]);
        assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(att.step(&f.ps, &[0.0; 4], &f.text.outputs, &keys, 0).is_err());
        assert!(att.keys(&f.ps, &NumArray::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn init_state_matches_reference() {
        let f = fixture(8);
        let st = f.dec.init_state(&f.ps, f.src(), MaskSelection::Both).unwrap();
        let w = f.ps.value(f.dec.init.w);
        let b = f.ps.value(f.dec.init.b).data();
        let s: Vec<f64> = f
            .text
            .state
            .data()
            .iter()
            .chain(f.speech.state.data())
            .copied()
            .collect();
        for (i, h) in st.h_a.iter().enumerate() {
            let mut a = b[i];
            for (j, sj) in s.iter().enumerate() {
                a += sj * w.get2(j, i);
            }
            assert!((h - a.tanh()).abs() < 1e-12);
        }
        assert!(st.h_d.iter().all(|h| h.iter().all(|v| *v == 0.0)));
        assert_eq!(st.c_t, vec![0.0; 4]);
        assert_eq!(st.c_v, vec![0.0; 6]);
        assert_eq!(st.y_prev, vec![0.0; 3]);
        assert_eq!(st.k, 0);
    }

    #[test]
    fn init_state_zero_sources_gives_tanh_bias() {
        let mut f = fixture(4);
        f.text.state.fill(0.0);
        f.speech.state.fill(0.0);
        let st = f.dec.init_state(&f.ps, f.src(), MaskSelection::Both).unwrap();
        let b = f.ps.value(f.dec.init.b).data();
        for (h, bi) in st.h_a.iter().zip(b) {
            assert_eq!(*h, bi.tanh());
        }
    }

    #[test]
    fn zero_parameters_emit_tiled_bias() {
        let mut f = fixture(5);
        for p in f.ps.iter_mut() {
            p.value.fill(0.0);
        }
        f.ps.value_mut(f.dec.fc.b)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let st = f.dec.init_state(&f.ps, f.src(), MaskSelection::Both).unwrap();
        let (frames, _, _) = f
            .dec
            .decoder_step(&f.ps, &st, f.src(), MaskSelection::Both, None)
            .unwrap();
        assert_eq!(frames.data(), &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
    }

    #[test]
    fn masked_source_is_bitwise_irrelevant() {
        let f = fixture(6);
        let mut rng = SeededRng::seed_from_u64(60);
        let other_speech = enc(3, 6, &mut rng);
        let other_text = enc(9, 4, &mut rng);
        let target = uniform(&[7, 3], 1.0, &mut rng);
        for (mask, swapped) in [
            (
                MaskSelection::TextOnly,
                Sources {
                    text: Some(&f.text),
                    speech: Some(&other_speech),
                },
            ),
            (
                MaskSelection::SpeechOnly,
                Sources {
                    text: Some(&other_text),
                    speech: Some(&f.speech),
                },
            ),
        ] {
            let a = f.dec.init_state(&f.ps, f.src(), mask).unwrap();
            let b = f.dec.init_state(&f.ps, swapped, mask).unwrap();
            assert_eq!(a, b);
            let (ya, sa, _) = f.dec.decoder_step(&f.ps, &a, f.src(), mask, None).unwrap();
            let (yb, sb, _) = f.dec.decoder_step(&f.ps, &b, swapped, mask, None).unwrap();
            assert_eq!(ya.data(), yb.data());
            assert_eq!(sa, sb);
            let inactive = if mask.uses_text() { &sa.c_v } else { &sa.c_t };
            assert!(inactive.iter().all(|v| *v == 0.0));
            let (pa, ta) = f.dec.generate(&f.ps, f.src(), mask, no_dropout(4), None).unwrap();
            let (pb, tb) = f.dec.generate(&f.ps, swapped, mask, no_dropout(4), None).unwrap();
            assert_eq!(pa.data(), pb.data());
            assert_eq!(ta, tb);
            let (qa, _) = f.dec.decode_teacher_forced(&f.ps, f.src(), &target, mask).unwrap();
            let (qb, _) = f.dec.decode_teacher_forced(&f.ps, swapped, &target, mask).unwrap();
            assert_eq!(qa.data(), qb.data());
        }
        // Without the mask, the swap is visible.
        let swapped = Sources {
            text: Some(&f.text),
            speech: Some(&other_speech),
        };
        let (pa, _) = f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, no_dropout(2), None)
            .unwrap();
        let (pb, _) = f
            .dec
            .generate(&f.ps, swapped, MaskSelection::Both, no_dropout(2), None)
            .unwrap();
        assert_ne!(pa.data(), pb.data());
    }

    #[test]
    fn framing_pads_to_whole_groups() {
        let f = fixture(7);
        let mut rng = SeededRng::seed_from_u64(70);
        for t in 1..=9 {
            let target = uniform(&[t, 3], 1.0, &mut rng);
            let (pred, trace) = f
                .dec
                .decode_teacher_forced(&f.ps, f.src(), &target, MaskSelection::Both)
                .unwrap();
            assert_eq!(trace.n_steps(), t.div_ceil(2));
            assert_eq!(pred.shape(), &[t.div_ceil(2) * 2, 3]);
        }
    }

    #[test]
    fn teacher_forcing_feeds_last_frame_of_previous_group() {
        let f = fixture(9);
        let mut rng = SeededRng::seed_from_u64(90);
        let target = uniform(&[6, 3], 1.0, &mut rng);
        let (pred, _) = f
            .dec
            .decode_teacher_forced(&f.ps, f.src(), &target, MaskSelection::Both)
            .unwrap();
        // Changing rows that are never fed back (0, 2, 4, 5) leaves pred unchanged.
        let mut other = target.clone();
        for row in [0, 2, 4, 5] {
            other.row_mut(row).fill(9.0);
        }
        let (same, _) = f
            .dec
            .decode_teacher_forced(&f.ps, f.src(), &other, MaskSelection::Both)
            .unwrap();
        assert_eq!(pred.data(), same.data());
        other.row_mut(3).fill(9.0);
        let (diff, _) = f
            .dec
            .decode_teacher_forced(&f.ps, f.src(), &other, MaskSelection::Both)
            .unwrap();
        assert_eq!(pred.data()[..12], diff.data()[..12]);
        assert_ne!(pred.data()[12..], diff.data()[12..]);
    }

    #[test]
    fn generate_and_teacher_forcing_agree() {
        let f = fixture(10);
        for mask in MaskSelection::ALL {
            let (gen, gtrace) = f.dec.generate(&f.ps, f.src(), mask, no_dropout(5), None).unwrap();
            let (tf, ttrace) = f.dec.decode_teacher_forced(&f.ps, f.src(), &gen, mask).unwrap();
            assert_eq!(gen.data(), tf.data());
            assert_eq!(gtrace, ttrace);
        }
    }

    #[test]
    fn weights_sum_to_one_for_active_sources_only() {
        let f = fixture(11);
        for mask in MaskSelection::ALL {
            let (_, trace) = f.dec.generate(&f.ps, f.src(), mask, no_dropout(4), None).unwrap();
            for s in &trace.steps {
                assert_eq!(s.text.is_some(), mask.uses_text());
                assert_eq!(s.speech.is_some(), mask.uses_speech());
                for w in s.text.iter().chain(&s.speech) {
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn generate_lengths_and_stop_rule() {
        let mut f = fixture(12);
        let (p, _) = f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, no_dropout(1), None)
            .unwrap();
        assert_eq!(p.rows(), 2);
        assert!(f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, no_dropout(0), None)
            .is_err());
        let with_dropout = GenerateOptions {
            dropout: true,
            ..no_dropout(3)
        };
        assert!(f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, with_dropout, None)
            .is_err());
        let mut rng = SeededRng::seed_from_u64(1);
        let (p, _) = f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, with_dropout, Some(&mut rng))
            .unwrap();
        assert_eq!(p.rows(), 6);

        // Silent output: the energy rule stops after three quiet groups.
        f.ps.value_mut(f.dec.fc.w).fill(0.0);
        f.ps.value_mut(f.dec.fc.b).fill(0.01);
        let opts = GenerateOptions {
            energy_stop: true,
            ..no_dropout(50)
        };
        let (p, trace) = f.dec.generate(&f.ps, f.src(), MaskSelection::Both, opts, None).unwrap();
        assert_eq!(p.rows(), 6);
        assert_eq!(trace.n_steps(), 3);
    }

    #[test]
    fn input_errors() {
        let f = fixture(13);
        let text_only = Sources {
            text: Some(&f.text),
            speech: None,
        };
        assert!(matches!(
            f.dec.init_state(&f.ps, text_only, MaskSelection::Both),
            Err(Error::MissingInput { missing: "speech", .. })
        ));
        assert!(f.dec.init_state(&f.ps, text_only, MaskSelection::TextOnly).is_ok());

        let mut rng = SeededRng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let vc = Decoder::new(&mut ps, "vc", &cfg(), None, Some(6), &mut rng).unwrap();
        assert!(matches!(
            vc.init_state(&ps, f.src(), MaskSelection::TextOnly),
            Err(Error::InputKind(_))
        ));
        assert!(vc.init_state(&ps, f.src(), MaskSelection::SpeechOnly).is_ok());
        assert!(f
            .dec
            .decode_teacher_forced(&f.ps, f.src(), &NumArray::zeros(&[3, 4]), MaskSelection::Both)
            .is_err());
    }

    #[test]
    fn non_finite_output_names_the_step() {
        let mut f = fixture(14);
        f.ps.value_mut(f.dec.fc.b).data_mut()[0] = f64::NAN;
        let err = f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, no_dropout(3), None)
            .unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn alignment_csv() {
        let f = fixture(15);
        let (_, trace) = f
            .dec
            .generate(&f.ps, f.src(), MaskSelection::Both, no_dropout(2), None)
            .unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,source,position,weight"));
        assert_eq!(lines.count(), 2 * (5 + 7));
    }
}
