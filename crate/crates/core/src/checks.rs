//! Gradient checks for every differentiable block, from single layers up to
//! the full multi-source model unrolled over several decoder steps.
//!
//! Each check builds a tiny block, redraws all of its parameters from
//! `uniform(−0.5, 0.5)` so no gradient is vanishingly small, and compares
//! the analytic gradient of `L = Σ y ⊙ R` (fixed random `R`) against
//! central differences for every parameter and input coordinate.

use rand::{Rng, SeedableRng};

use crate::config::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::decoder::{Attention, Decoder, Sources};
use crate::encoders::{Cbhg, Encoder, EncoderOutput, EncoderOutputGrad, Prenet};
use crate::error::Result;
use crate::masking::MaskSelection;
use crate::model::{ExampleRef, Model, ModelKind};
use crate::numerics::gradcheck::{grad_check, GradCheckReport, GradTarget, Projection};
use crate::numerics::layers::maxpool1d_same_backward;
use crate::numerics::param::uniform;
use crate::numerics::{
    maxpool1d_same, BiGru, ConvBank, Embedding, Grads, Gru, Highway, Linear, NumArray, ParamSet, SeededRng,
};

/// Threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPSILON: f64 = 1e-5;
const PARAM_SCALE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

type Forward<'a> = dyn Fn(&ParamSet, &[NumArray], Option<&mut Grads>) -> Result<(f64, Vec<NumArray>)> + 'a;

/// Adapter from a closure that computes the loss and, given a gradient
/// buffer, also runs the backward pass.
struct Closure<'a>(Box<Forward<'a>>);

impl GradTarget for Closure<'_> {
    fn loss(&self, ps: &ParamSet, inputs: &[NumArray]) -> Result<f64> {
        Ok((self.0)(ps, inputs, None)?.0)
    }

    fn gradients(&self, ps: &ParamSet, inputs: &[NumArray]) -> Result<(Grads, Vec<NumArray>)> {
        let mut g = ps.zero_grads();
        let (_, dinputs) = (self.0)(ps, inputs, Some(&mut g))?;
        Ok((g, dinputs))
    }
}

fn randomize(ps: &mut ParamSet, rng: &mut SeededRng) {
    for p in ps.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = uniform(&shape, PARAM_SCALE, rng);
    }
}

fn run(name: &'static str, ps: &ParamSet, inputs: &[NumArray], f: Box<Forward<'_>>) -> Result<CheckResult> {
    let report = grad_check(&Closure(f), ps, inputs, EPSILON)?;
    Ok(CheckResult { name, report })
}

fn vec_row(v: &[f64]) -> NumArray {
    NumArray::from_vec(&[1, v.len()], v.to_vec()).expect("non-empty vector")
}

fn encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        d_embed: 3,
        d_prenet: 4,
        bank_k: 3,
        conv_channels: 2,
        highway_layers: 2,
        d_gru: 3,
        dropout_rate: 0.5,
    }
}

fn decoder_cfg() -> DecoderConfig {
    DecoderConfig {
        d_prenet: 3,
        d_attn_rnn: 4,
        d_dec_rnn: 3,
        dec_layers: 2,
        r: 2,
        n_mels: 3,
        dropout_rate: 0.5,
        generate_dropout: true,
    }
}

/// Configuration small enough for exhaustive finite differences.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab: 5,
        encoder: encoder_cfg(),
        decoder: decoder_cfg(),
    }
}

fn check_linear(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, "affine", 3, 4, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let x = uniform(&[5, 3], 1.0, &mut rng);
    let proj = Projection::new(&[5, 4], &mut rng);
    run(
        "affine",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            let y = lin.forward(ps, &inp[0])?;
            let loss = proj.apply(&y);
            let dx = match g {
                Some(g) => vec![lin.backward(ps, &inp[0], &proj.weights, g)],
                None => Vec::new(),
            };
            Ok((loss, dx))
        }),
    )
}

fn check_embedding(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let emb = Embedding::new(&mut ps, "embedding", 4, 3, &mut rng)?;
    let tokens = vec![2, 0, 2, 3];
    let proj = Projection::new(&[4, 3], &mut rng);
    run(
        "embedding",
        &ps,
        &[],
        Box::new(move |ps, _, g| {
            let y = emb.forward(ps, &tokens)?;
            if let Some(g) = g {
                emb.backward(&tokens, &proj.weights, g);
            }
            Ok((proj.apply(&y), Vec::new()))
        }),
    )
}

fn check_gru_step(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let gru = Gru::new(&mut ps, "gru", 3, 4, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let x = uniform(&[1, 3], 1.0, &mut rng);
    let h = uniform(&[1, 4], 1.0, &mut rng);
    let proj = Projection::new(&[1, 4], &mut rng);
    run(
        "gru_step",
        &ps,
        &[x, h],
        Box::new(move |ps, inp, g| {
            let st = gru.step(ps, inp[0].data(), inp[1].data());
            let loss = proj.apply(&vec_row(&st.h));
            let d = match g {
                Some(g) => {
                    let (dx, dh) = gru.step_backward(ps, &st, proj.weights.data(), g);
                    vec![vec_row(&dx), vec_row(&dh)]
                }
                None => Vec::new(),
            };
            Ok((loss, d))
        }),
    )
}

fn check_bigru(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let gru = BiGru::new(&mut ps, "bigru", 2, 3, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let x = uniform(&[4, 2], 1.0, &mut rng);
    let p_states = Projection::new(&[4, 6], &mut rng);
    let p_final = Projection::new(&[1, 6], &mut rng);
    run(
        "bigru",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            let (states, fin, cache) = gru.forward(ps, &inp[0])?;
            let loss = p_states.apply(&states) + p_final.apply(&fin);
            let d = match g {
                Some(g) => vec![gru.backward(ps, &cache, &p_states.weights, p_final.weights.data(), g)],
                None => Vec::new(),
            };
            Ok((loss, d))
        }),
    )
}

fn check_conv_bank(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let bank = ConvBank::new(&mut ps, "bank", 4, 2, 2, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let x = uniform(&[5, 2], 1.0, &mut rng);
    let proj = Projection::new(&[5, bank.out_dim()], &mut rng);
    run(
        "conv_bank",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            let y = bank.forward(ps, &inp[0])?;
            let loss = proj.apply(&y);
            let d = match g {
                Some(g) => vec![bank.backward(ps, &inp[0], &y, &proj.weights, g)],
                None => Vec::new(),
            };
            Ok((loss, d))
        }),
    )
}

fn check_maxpool(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let ps = ParamSet::new();
    // Distinct values spaced well beyond the probe step keep the argmax
    // fixed under perturbation.
    let mut vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = NumArray::from_vec(&[6, 2], vals)?;
    let proj = Projection::new(&[6, 2], &mut rng);
    run(
        "maxpool",
        &ps,
        &[x],
        Box::new(move |_, inp, g| {
            let (y, src) = maxpool1d_same(&inp[0])?;
            let d = match g {
                Some(_) => vec![maxpool1d_same_backward(&src, &proj.weights)],
                None => Vec::new(),
            };
            Ok((proj.apply(&y), d))
        }),
    )
}

fn check_highway(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let hw = Highway::new(&mut ps, "highway", 3, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let x = uniform(&[4, 3], 1.0, &mut rng);
    let proj = Projection::new(&[4, 3], &mut rng);
    run(
        "highway",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            let (y, cache) = hw.forward(ps, &inp[0])?;
            let d = match g {
                Some(g) => vec![hw.backward(ps, &inp[0], &cache, &proj.weights, g)],
                None => Vec::new(),
            };
            Ok((proj.apply(&y), d))
        }),
    )
}

fn check_prenet(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let pre = Prenet::new(&mut ps, "prenet", 3, 5, 0.5, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let x = uniform(&[4, 3], 1.0, &mut rng);
    let proj = Projection::new(&[4, 5], &mut rng);
    let mask_seed = rng.random();
    run(
        "prenet",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            // Same dropout mask on every evaluation.
            let mut drop = SeededRng::seed_from_u64(mask_seed);
            let (y, cache) = pre.forward(ps, &inp[0], Some(&mut drop))?;
            let d = match g {
                Some(g) => vec![pre.backward(ps, &inp[0], &cache, &proj.weights, g)],
                None => Vec::new(),
            };
            Ok((proj.apply(&y), d))
        }),
    )
}

fn output_loss(out: &EncoderOutput, p_out: &Projection, p_state: &Projection) -> f64 {
    p_out.apply(&out.outputs) + p_state.apply(&out.state)
}

fn output_grad(p_out: &Projection, p_state: &Projection) -> EncoderOutputGrad {
    EncoderOutputGrad {
        state: p_state.weights.data().to_vec(),
        outputs: p_out.weights.clone(),
    }
}

fn check_cbhg(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = encoder_cfg();
    let cbhg = Cbhg::new(&mut ps, "cbhg", cfg.d_prenet, &cfg, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let t = 5;
    let x = uniform(&[t, cfg.d_prenet], 1.0, &mut rng);
    let p_out = Projection::new(&[t, cfg.d_state()], &mut rng);
    let p_state = Projection::new(&[cfg.d_state()], &mut rng);
    run(
        "cbhg",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            let (out, cache) = cbhg.forward(ps, &inp[0])?;
            let d = match g {
                Some(g) => vec![cbhg.backward(ps, &cache, &output_grad(&p_out, &p_state), g)],
                None => Vec::new(),
            };
            Ok((output_loss(&out, &p_out, &p_state), d))
        }),
    )
}

fn check_text_encoder(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = encoder_cfg();
    let enc = Encoder::new_text(&mut ps, "text_encoder", 5, &cfg, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let tokens = vec![1, 4, 0, 4];
    let p_out = Projection::new(&[tokens.len(), cfg.d_state()], &mut rng);
    let p_state = Projection::new(&[cfg.d_state()], &mut rng);
    let mask_seed = rng.random();
    run(
        "text_encoder",
        &ps,
        &[],
        Box::new(move |ps, _, g| {
            let mut drop = SeededRng::seed_from_u64(mask_seed);
            let (out, cache) = enc.forward_text(ps, &tokens, Some(&mut drop))?;
            if let Some(g) = g {
                enc.backward(ps, &cache, &output_grad(&p_out, &p_state), g);
            }
            Ok((output_loss(&out, &p_out, &p_state), Vec::new()))
        }),
    )
}

fn check_speech_encoder(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = encoder_cfg();
    let enc = Encoder::new_speech(&mut ps, "speech_encoder", 3, &cfg, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let t = 4;
    let x = uniform(&[t, 3], 1.0, &mut rng);
    let p_out = Projection::new(&[t, cfg.d_state()], &mut rng);
    let p_state = Projection::new(&[cfg.d_state()], &mut rng);
    run(
        "speech_encoder",
        &ps,
        &[x],
        Box::new(move |ps, inp, g| {
            let (out, cache) = enc.forward_speech(ps, &inp[0], None)?;
            let d = match g {
                Some(g) => vec![enc.backward(ps, &cache, &output_grad(&p_out, &p_state), g)],
                None => Vec::new(),
            };
            Ok((output_loss(&out, &p_out, &p_state), d))
        }),
    )
}

fn check_attention(seed: u64) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let att = Attention::new(&mut ps, "attention", 3, 4, 5, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let h = uniform(&[1, 3], 1.0, &mut rng);
    let memory = uniform(&[6, 4], 1.0, &mut rng);
    let proj = Projection::new(&[1, 4], &mut rng);
    // The last position is padding and must receive no gradient.
    let valid = 5;
    run(
        "attention",
        &ps,
        &[h, memory],
        Box::new(move |ps, inp, g| {
            let keys = att.keys(ps, &inp[1])?;
            let c = att.step(ps, inp[0].data(), &inp[1], &keys, valid)?;
            let loss = proj.apply(&vec_row(&c.context));
            let d = match g {
                Some(g) => {
                    let mut dkeys = NumArray::zeros(keys.shape());
                    let mut dmem = NumArray::zeros(inp[1].shape());
                    let dh = att.step_backward(
                        ps,
                        inp[0].data(),
                        &inp[1],
                        &c,
                        proj.weights.data(),
                        &mut dkeys,
                        &mut dmem,
                        g,
                    );
                    att.keys_backward(ps, &inp[1], &dkeys, &mut dmem, g);
                    vec![vec_row(&dh), dmem]
                }
                None => Vec::new(),
            };
            Ok((loss, d))
        }),
    )
}

/// Decoder alone, fed synthetic encoder outputs given as inputs
/// `[text outputs, text state, speech outputs, speech state]`.
fn check_decoder(
    name: &'static str,
    seed: u64,
    t_len: usize,
    mask: MaskSelection,
    dropout: bool,
) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = decoder_cfg();
    let (dt, dv) = (4, 2);
    let dec = Decoder::new(&mut ps, "decoder", &cfg, Some(dt), Some(dv), &mut rng)?;
    randomize(&mut ps, &mut rng);
    let inputs = vec![
        uniform(&[3, dt], 1.0, &mut rng),
        uniform(&[1, dt], 1.0, &mut rng),
        uniform(&[5, dv], 1.0, &mut rng),
        uniform(&[1, dv], 1.0, &mut rng),
    ];
    let target = uniform(&[t_len, cfg.n_mels], 1.0, &mut rng);
    let proj = Projection::new(&[t_len.div_ceil(cfg.r) * cfg.r, cfg.n_mels], &mut rng);
    let mask_seed = rng.random();
    run(
        name,
        &ps,
        &inputs,
        Box::new(move |ps, inp, g| {
            let text = EncoderOutput {
                outputs: inp[0].clone(),
                state: inp[1].clone().reshape(&[dt])?,
            };
            let speech = EncoderOutput {
                outputs: inp[2].clone(),
                state: inp[3].clone().reshape(&[dv])?,
            };
            let src = Sources {
                text: Some(&text),
                speech: Some(&speech),
            };
            let mut drop = SeededRng::seed_from_u64(mask_seed);
            let (pred, _, cache) = dec.forward_teacher_forced(ps, src, &target, mask, dropout.then_some(&mut drop))?;
            let loss = proj.apply(&pred);
            let d = match g {
                Some(g) => {
                    let (d_t, d_v) = dec.backward(ps, &cache, &proj.weights, g);
                    let split = |d: Option<EncoderOutputGrad>, l: usize, w: usize| match d {
                        Some(d) => (d.outputs, vec_row(&d.state)),
                        None => (NumArray::zeros(&[l, w]), NumArray::zeros(&[1, w])),
                    };
                    let (a, b) = split(d_t, 3, dt);
                    let (c, e) = split(d_v, 5, dv);
                    vec![a, b, c, e]
                }
                None => Vec::new(),
            };
            Ok((loss, d))
        }),
    )
}

/// Whole joint model through the training loss, including encoders,
/// dropout and padded final group.
fn check_model(seed: u64, mask: MaskSelection) -> Result<CheckResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let mut model = Model::new(ModelKind::Joint, &cfg, &mut rng)?;
    randomize(&mut model.params, &mut rng);
    let tokens = vec![3, 1, 4];
    let source = uniform(&[4, cfg.decoder.n_mels], 1.0, &mut rng);
    let target = uniform(&[5, cfg.decoder.n_mels], 1.0, &mut rng);
    let mask_seed = rng.random();
    let ps = model.params.clone();
    let name = match mask {
        MaskSelection::TextOnly => "model_l1_text",
        MaskSelection::SpeechOnly => "model_l1_speech",
        MaskSelection::Both => "model_l1_both",
    };
    run(
        name,
        &ps,
        &[],
        Box::new(move |ps, _, g| {
            // The model owns its parameters; swap in the probed values.
            let mut m = model.clone();
            m.params = ps.clone();
            let ex = ExampleRef {
                tokens: Some(&tokens),
                source: Some(&source),
                target: &target,
            };
            let norm = target.len() as f64;
            let mut drop = SeededRng::seed_from_u64(mask_seed);
            let mut scratch;
            let g = match g {
                Some(g) => g,
                None => {
                    scratch = ps.zero_grads();
                    &mut scratch
                }
            };
            let abs = m.accumulate_gradients(ex, mask, Some(&mut drop), norm, g)?;
            Ok((abs / norm, Vec::new()))
        }),
    )
}

/// Every check in the suite, seeded by `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        check_linear(seed)?,
        check_embedding(seed)?,
        check_gru_step(seed)?,
        check_bigru(seed)?,
        check_conv_bank(seed)?,
        check_maxpool(seed)?,
        check_highway(seed)?,
        check_prenet(seed)?,
        check_cbhg(seed)?,
        check_text_encoder(seed)?,
        check_speech_encoder(seed)?,
        check_attention(seed)?,
        check_decoder("decoder_step", seed, 2, MaskSelection::Both, false)?,
        check_decoder("decoder_unrolled", seed, 5, MaskSelection::Both, true)?,
        check_decoder("decoder_text_only", seed, 6, MaskSelection::TextOnly, true)?,
        check_decoder("decoder_speech_only", seed, 6, MaskSelection::SpeechOnly, true)?,
    ];
    for mask in MaskSelection::ALL {
        out.push(check_model(seed, mask)?);
    }
    Ok(out)
}
