//! Masked L1 loss and the staged training procedure: stand-alone
//! pretraining, encoder transfer, joint training with random input masking,
//! and fine-tuning.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskSelection};
use crate::model::{ExampleRef, Model, ModelKind, DECODER, SPEECH_ENCODER, TEXT_ENCODER};
use crate::numerics::{adam_step, clip_grad_norm, noam_lr, stream_rng, NumArray};

/// Stream offset for per-epoch shuffles; step `s` draws from stream `s`.
const SHUFFLE_STREAM: u64 = 1 << 63;

fn check_loss_args(pred: &NumArray, target: &NumArray, valid_len: usize) -> Result<()> {
    if pred.cols() != target.cols() {
        return Err(Error::shape(
            "l1_loss",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if valid_len > pred.rows() || valid_len > target.rows() {
        return Err(Error::InvalidArgument(format!(
            "valid_len {valid_len} exceeds rows (pred {}, target {})",
            pred.rows(),
            target.rows()
        )));
    }
    Ok(())
}

/// Summed absolute error over the first `valid_len` rows.
pub(crate) fn l1_sum(pred: &NumArray, target: &NumArray, valid_len: usize) -> Result<f64> {
    check_loss_args(pred, target, valid_len)?;
    let n = valid_len * pred.cols();
    Ok(pred.data()[..n]
        .iter()
        .zip(&target.data()[..n])
        .map(|(p, t)| (p - t).abs())
        .sum())
}

/// Gradient of `l1_sum / norm` with respect to `pred`; padded rows get 0.
pub(crate) fn l1_grad(pred: &NumArray, target: &NumArray, valid_len: usize, norm: f64) -> NumArray {
    let mut g = NumArray::zeros(pred.shape());
    let n = valid_len * pred.cols();
    for ((d, p), t) in g.data_mut()[..n].iter_mut().zip(pred.data()).zip(target.data()) {
        let diff = p - t;
        *d = if diff > 0.0 {
            1.0 / norm
        } else if diff < 0.0 {
            -1.0 / norm
        } else {
            0.0
        };
    }
    g
}

/// Mean absolute error over the valid frames and all bands.
pub fn l1_loss(pred: &NumArray, target: &NumArray, valid_len: usize) -> Result<f64> {
    let sum = l1_sum(pred, target, valid_len)?;
    if valid_len == 0 {
        return Ok(0.0);
    }
    Ok(sum / (valid_len * pred.cols()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tts,
    Vc,
    Joint,
    Adapt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Tts => "tts",
            Stage::Vc => "vc",
            Stage::Joint => "joint",
            Stage::Adapt => "adapt",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tts" => Ok(Stage::Tts),
            "vc" => Ok(Stage::Vc),
            "joint" => Ok(Stage::Joint),
            "adapt" => Ok(Stage::Adapt),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub records: Vec<LossRecord>,
    /// Mean step loss of each epoch touched by this run.
    pub epoch_means: Vec<f64>,
    pub wall_time: Duration,
    /// Teacher-forced loss on the training corpus before and after, when
    /// measured.
    pub pre_loss: Option<f64>,
    pub post_loss: Option<f64>,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn loss_csv(&self) -> String {
        loss_csv(&self.records)
    }
}

/// `step,stage,loss,lr` with a header row.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,stage,loss,lr\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.stage, r.loss, r.lr);
    }
    out
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for interval checkpoints `<stage>_step<N>.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<Box<dyn FnMut(&LossRecord) + 'a>>,
}

fn required_inputs(kind: ModelKind) -> (bool, bool) {
    match kind {
        ModelKind::Tts => (true, false),
        ModelKind::Vc => (false, true),
        ModelKind::Joint => (true, true),
    }
}

fn example(u: &crate::data::Utterance) -> ExampleRef<'_> {
    ExampleRef {
        tokens: Some(&u.tokens),
        source: u.source.as_ref(),
        target: &u.target,
    }
}

/// Inference-mode teacher-forced loss over a corpus: total absolute error
/// divided by the total number of valid entries.
pub fn teacher_forced_loss(model: &Model, corpus: &Corpus, mask: MaskSelection) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for u in &corpus.utterances {
        let (pred, _) = model.teacher_forced(Some(&u.tokens), u.source.as_ref(), &u.target, mask)?;
        sum += l1_sum(&pred, &u.target, u.t())?;
        count += u.target.len();
    }
    if count == 0 {
        return Err(Error::Corpus("corpus has no utterances".into()));
    }
    Ok(sum / count as f64)
}

/// Runs `steps` more optimizer steps of `stage` on `ckpt`.
///
/// Every random draw derives from the run seed and the step counter, so
/// training resumed from a checkpoint reproduces the uninterrupted trace.
/// Epoch `e` visits the corpus in a shuffled order; each utterance gets a
/// mask (from the policy for joint models) and its own dropout draws.
pub fn run_stage(
    ckpt: &mut Checkpoint,
    corpus: &Corpus,
    stage: Stage,
    steps: u64,
    opts: &mut TrainOptions,
) -> Result<StageReport> {
    let (need_text, need_speech) = required_inputs(ckpt.model.kind);
    corpus.require(need_text, need_speech)?;
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    let n_mels = ckpt.model.config.decoder.n_mels;
    if let Some(u) = corpus.utterances.iter().find(|u| u.target.cols() != n_mels) {
        return Err(Error::Corpus(format!(
            "utterance {} has {} bands, model expects {n_mels}",
            u.id,
            u.target.cols()
        )));
    }
    let lr_scale = if stage == Stage::Adapt {
        cfg.train.adapt_lr_scale
    } else {
        1.0
    };
    let schedule = cfg.train.schedule();
    let batch = cfg.train.batch_size.min(corpus.len());
    let per_epoch = corpus.len().div_ceil(batch) as u64;
    let native = ckpt.model.native_mask();
    let joint = ckpt.model.kind == ModelKind::Joint;

    let started = Instant::now();
    let mut records = Vec::with_capacity(steps as usize);
    let mut epoch_means = Vec::new();
    let mut epoch_acc = (u64::MAX, 0.0, 0usize);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        let local = ckpt.global_step - ckpt.stage_start;
        let (epoch, slot) = (local / per_epoch, (local % per_epoch) as usize);
        if slot == 0 || order.is_empty() {
            order = (0..corpus.len()).collect();
            order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM | epoch));
        }
        let members = &order[slot * batch..((slot + 1) * batch).min(order.len())];

        let mut rng = stream_rng(cfg.seed, ckpt.global_step + 1);
        let norm: usize = members.iter().map(|&i| corpus.utterances[i].target.len()).sum();
        let model = &ckpt.model;
        let mut grads = model.params.zero_grads();
        let mut abs = 0.0;
        for &i in members {
            let mask = if joint {
                sample_mask(&cfg.train.mask, &mut rng)?
            } else {
                native
            };
            let u = &corpus.utterances[i];
            abs += model
                .accumulate_gradients(example(u), mask, Some(&mut rng), norm as f64, &mut grads)
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} on utterance {} at step {}", u.id, ckpt.global_step + 1))
                    }
                    other => other,
                })?;
        }
        let loss = abs / norm as f64;
        clip_grad_norm(&mut grads, cfg.train.clip_norm);
        let lr = noam_lr(local + 1, &schedule)? * lr_scale;
        ckpt.model.params.store_grads(grads);
        adam_step(&mut ckpt.model.params, &mut ckpt.optimizer, lr)?;
        ckpt.global_step += 1;

        let rec = LossRecord {
            step: ckpt.global_step,
            stage,
            loss,
            lr,
        };
        if let Some(f) = opts.on_step.as_mut() {
            f(&rec);
        }
        records.push(rec);
        if epoch_acc.0 != epoch {
            if epoch_acc.2 > 0 {
                epoch_means.push(epoch_acc.1 / epoch_acc.2 as f64);
            }
            epoch_acc = (epoch, 0.0, 0);
        }
        epoch_acc.1 += loss;
        epoch_acc.2 += 1;

        let interval = cfg.train.checkpoint_interval;
        if let Some(dir) = &opts.checkpoint_dir {
            if interval > 0 && ckpt.global_step.is_multiple_of(interval) {
                std::fs::create_dir_all(dir)?;
                ckpt.save(&dir.join(format!("{stage}_step{}.ckpt", ckpt.global_step)))?;
            }
        }
    }
    if epoch_acc.2 > 0 {
        epoch_means.push(epoch_acc.1 / epoch_acc.2 as f64);
    }
    Ok(StageReport {
        stage,
        records,
        epoch_means,
        wall_time: started.elapsed(),
        pre_loss: None,
        post_loss: None,
    })
}

fn train_standalone(
    kind: ModelKind,
    stage: Stage,
    corpus: &Corpus,
    cfg: &RunConfig,
    opts: &mut TrainOptions,
) -> Result<(Checkpoint, StageReport)> {
    cfg.validate()?;
    let (t, v) = required_inputs(kind);
    corpus.require(t, v)?;
    let model = Model::new(kind, &cfg.model, &mut stream_rng(cfg.seed, 0))?;
    let mut ckpt = Checkpoint::fresh(cfg.clone(), model);
    let report = run_stage(&mut ckpt, corpus, stage, cfg.train.max_steps, opts)?;
    Ok((ckpt, report))
}

/// Pretrains a text-input model on (text, target) pairs.
pub fn train_standalone_tts(
    corpus: &Corpus,
    cfg: &RunConfig,
    opts: &mut TrainOptions,
) -> Result<(Checkpoint, StageReport)> {
    train_standalone(ModelKind::Tts, Stage::Tts, corpus, cfg, opts)
}

/// Pretrains a many-to-one conversion model on parallel (source, target)
/// pairs from any number of source speakers.
pub fn train_standalone_vc(
    corpus: &Corpus,
    cfg: &RunConfig,
    opts: &mut TrainOptions,
) -> Result<(Checkpoint, StageReport)> {
    train_standalone(ModelKind::Vc, Stage::Vc, corpus, cfg, opts)
}

fn copy_encoder(dst: &mut Model, src: &Checkpoint, prefix: &str) -> Result<()> {
    let wanted: Vec<String> = dst
        .params
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.name.clone())
        .collect();
    for name in wanted {
        let from = src.model.params.get(&name).ok_or_else(|| Error::Incompatible {
            name: name.clone(),
            detail: "missing from the source checkpoint".into(),
        })?;
        let to = dst.params.get_mut(&name).unwrap();
        if from.value.shape() != to.value.shape() {
            return Err(Error::Incompatible {
                detail: format!("source {:?}, joint model {:?}", from.value.shape(), to.value.shape()),
                name,
            });
        }
        to.value = from.value.clone();
    }
    Ok(())
}

/// Builds a joint model whose encoders are copied from the stand-alone
/// checkpoints; the decoder and both attention scorers start fresh.
pub fn init_joint(tts: &Checkpoint, vc: &Checkpoint, cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    if tts.model.text_encoder.is_none() {
        return Err(Error::InputKind(format!(
            "{} checkpoint has no text encoder",
            tts.model.kind
        )));
    }
    if vc.model.speech_encoder.is_none() {
        return Err(Error::InputKind(format!(
            "{} checkpoint has no speech encoder",
            vc.model.kind
        )));
    }
    let mut model = Model::new(ModelKind::Joint, &cfg.model, &mut stream_rng(cfg.seed, 0))?;
    copy_encoder(&mut model, tts, &format!("{TEXT_ENCODER}."))?;
    copy_encoder(&mut model, vc, &format!("{SPEECH_ENCODER}."))?;
    Ok(model)
}

/// [`init_joint`], then also copies every decoder blob whose name and shape
/// match: first from the TTS decoder (pre-net, text attention, decoder
/// RNNs, output layer), then the speech attention from the VC decoder.
/// Blobs whose width depends on both sources stay fresh. Returns the model
/// and the names of the transferred decoder blobs.
pub fn init_joint_with_decoder(tts: &Checkpoint, vc: &Checkpoint, cfg: &RunConfig) -> Result<(Model, Vec<String>)> {
    let mut model = init_joint(tts, vc, cfg)?;
    let mut copied = Vec::new();
    let prefix = format!("{DECODER}.");
    for src in [tts, vc] {
        for p in src.model.params.iter().filter(|p| p.name.starts_with(&prefix)) {
            if copied.contains(&p.name) {
                continue;
            }
            if let Some(dst) = model.params.get_mut(&p.name) {
                if dst.value.shape() == p.value.shape() {
                    dst.value = p.value.clone();
                    copied.push(p.name.clone());
                }
            }
        }
    }
    Ok((model, copied))
}

/// Trains a joint model with a per-utterance mask drawn from the policy.
pub fn train_joint(
    model: Model,
    corpus: &Corpus,
    cfg: &RunConfig,
    opts: &mut TrainOptions,
) -> Result<(Checkpoint, StageReport)> {
    cfg.validate()?;
    if model.kind != ModelKind::Joint {
        return Err(Error::InputKind(format!("train_joint got a {} model", model.kind)));
    }
    if model.config != cfg.model {
        return Err(Error::Config("model does not match the run config".into()));
    }
    let mut ckpt = Checkpoint::fresh(cfg.clone(), model);
    let report = run_stage(&mut ckpt, corpus, Stage::Joint, cfg.train.max_steps, opts)?;
    Ok((ckpt, report))
}

/// Continues training every parameter on a small corpus at the peak rate
/// scaled by `adapt_lr_scale`. The schedule restarts; the optimizer moments
/// carry over. Reports teacher-forced loss before and after.
pub fn adapt_finetune(
    ckpt: &Checkpoint,
    small_corpus: &Corpus,
    cfg: &RunConfig,
    opts: &mut TrainOptions,
) -> Result<(Checkpoint, StageReport)> {
    cfg.validate()?;
    if cfg.model != ckpt.config.model {
        return Err(Error::Config(
            "adaptation config changes model dimensions of the checkpoint".into(),
        ));
    }
    let mut out = ckpt.clone();
    out.config = cfg.clone();
    out.stage_start = out.global_step;
    let mask = out.model.native_mask();
    let (t, v) = required_inputs(out.model.kind);
    small_corpus.require(t, v)?;
    let pre = teacher_forced_loss(&out.model, small_corpus, mask)?;
    let mut report = run_stage(&mut out, small_corpus, Stage::Adapt, cfg.train.max_steps, opts)?;
    report.pre_loss = Some(pre);
    report.post_loss = Some(if cfg.train.max_steps == 0 {
        pre
    } else {
        teacher_forced_loss(&out.model, small_corpus, mask)?
    });
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let t = NumArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(l1_loss(&t, &t, 3).unwrap(), 0.0);
        let mut p = t.clone();
        p.data_mut().iter_mut().for_each(|v| *v += 1.0);
        assert_eq!(l1_loss(&p, &t, 3).unwrap(), 1.0);
        let mut q = t.clone();
        q.row_mut(2).copy_from_slice(&[50.0, -9.0]);
        assert_eq!(l1_loss(&q, &t, 2).unwrap(), 0.0);
        assert!(l1_loss(&t, &t, 4).is_err());
    }

    #[test]
    fn l1_grad_masks_padding() {
        let t = NumArray::zeros(&[3, 2]);
        let p = NumArray::from_rows(&[vec![1.0, -1.0], vec![0.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let g = l1_grad(&p, &t, 2, 4.0);
        assert_eq!(g.data(), &[0.25, -0.25, 0.0, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Tts, Stage::Vc, Stage::Joint, Stage::Adapt] {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("x".parse::<Stage>().is_err());
    }
}
