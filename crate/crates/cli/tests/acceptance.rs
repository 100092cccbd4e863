//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use msq_core::data::{best_constant_l1, diagonality, evaluate, load_corpus, EvalMode, EvalOptions};
use msq_core::decoder::StepAlignment;
use msq_core::masking::MaskPolicy;
use msq_core::numerics::{adam_step, noam_lr, stream_rng, NumArray, OptimizerState, ParamSet};
use msq_core::training::{train_joint, TrainOptions};
use msq_core::{AlignmentTrace, Checkpoint, GenerateOptions, MaskSelection, Model, ModelKind, Preset, RunConfig};
use rand::Rng;

const MSQ: &str = env!("CARGO_BIN_EXE_msq");

type Outcome = Result<String, String>;

fn msq(args: &[&str]) -> Result<String, String> {
    let out = Command::new(MSQ)
        .args(args)
        .output()
        .map_err(|e| format!("cannot start msq: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`msq {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let out = msq(&["gradcheck", "--seed", "1"])?;
    let elapsed = t.elapsed();
    let worst = out
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().nth(1)?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max rel err {worst:.2e} in {:.1}s", elapsed.as_secs_f64()),
    )
}

fn desk() -> RunConfig {
    RunConfig::preset(Preset::Desk)
}

fn random_mel(rows: usize, cols: usize, rng: &mut impl Rng) -> NumArray {
    let data = (0..rows * cols).map(|_| rng.random_range(0.0..1.5)).collect();
    NumArray::from_vec(&[rows, cols], data).unwrap()
}

fn mask_invariance() -> Outcome {
    let cfg = desk();
    let model = Model::new(ModelKind::Joint, &cfg.model, &mut stream_rng(5, 0)).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(6, 0);
    let n_mels = cfg.model.decoder.n_mels;
    let opts = GenerateOptions {
        max_steps: 8,
        dropout: true,
        energy_stop: false,
    };
    let gen = |tokens: &[usize], src: &NumArray, mask| -> Result<NumArray, String> {
        let mut d = stream_rng(7, 0);
        let (y, _) = model
            .generate(Some(tokens), Some(src), mask, opts, Some(&mut d))
            .map_err(|e| e.to_string())?;
        Ok(y)
    };
    let mut pairs = 0;
    for _ in 0..10 {
        let tokens: Vec<usize> = (0..rng.random_range(2..10))
            .map(|_| rng.random_range(0..cfg.model.vocab))
            .collect();
        let other: Vec<usize> = (0..rng.random_range(2..10))
            .map(|_| rng.random_range(0..cfg.model.vocab))
            .collect();
        let a = random_mel(rng.random_range(3..30), n_mels, &mut rng);
        let b = random_mel(rng.random_range(3..30), n_mels, &mut rng);
        let same_text = gen(&tokens, &a, MaskSelection::TextOnly)? == gen(&tokens, &b, MaskSelection::TextOnly)?;
        let same_speech = gen(&tokens, &a, MaskSelection::SpeechOnly)? == gen(&other, &a, MaskSelection::SpeechOnly)?;
        if !(same_text && same_speech) {
            return Err(format!(
                "pair {pairs} changed output (text {same_text}, speech {same_speech})"
            ));
        }
        pairs += 1;
    }
    Ok(format!("{pairs} random pairs bitwise identical in both directions"))
}

fn masked_gradient_isolation() -> Outcome {
    let mut cfg = desk();
    cfg.train.mask = MaskPolicy::new(1.0, 0.0, 0.0).unwrap();
    cfg.train.max_steps = 1;
    let spec = msq_core::data::ToySpec::new(cfg.model.decoder.n_mels).unwrap();
    let corpus = msq_core::data::gen_corpus(&spec, cfg.train.batch_size, (5, 12), 3).unwrap();
    let model = Model::new(ModelKind::Joint, &cfg.model, &mut stream_rng(cfg.seed, 0)).unwrap();
    let before = model.params.clone();
    let (ck, _) = train_joint(model, &corpus, &cfg, &mut TrainOptions::default()).map_err(|e| e.to_string())?;
    let mut speech = 0;
    let mut moved = 0;
    for (a, b) in before.iter().zip(ck.model.params.iter()) {
        if a.name.starts_with("speech_encoder.") {
            speech += 1;
            if a.value.data() != b.value.data() {
                return Err(format!("{} changed", a.name));
            }
        } else if a.value.data() != b.value.data() {
            moved += 1;
        }
    }
    check(
        speech > 0 && moved > 0,
        format!("{speech} speech-encoder tensors unchanged, {moved} other tensors updated"),
    )
}

fn framing() -> Outcome {
    let cfg = desk();
    let r = cfg.model.decoder.r;
    let model = Model::new(ModelKind::Joint, &cfg.model, &mut stream_rng(2, 0)).unwrap();
    let mut rng = stream_rng(3, 0);
    for t in 1..=9 {
        let target = random_mel(t, cfg.model.decoder.n_mels, &mut rng);
        let tokens = [1, 2, 3];
        let (pred, _) = model
            .teacher_forced(Some(&tokens), Some(&target), &target, MaskSelection::Both)
            .map_err(|e| e.to_string())?;
        if pred.rows() != t.div_ceil(r) * r {
            return Err(format!("T={t}: teacher-forced emitted {} rows", pred.rows()));
        }
        let opts = GenerateOptions {
            max_steps: t,
            dropout: false,
            energy_stop: true,
        };
        let (gen, _) = model
            .generate(Some(&tokens), Some(&target), MaskSelection::Both, opts, None)
            .map_err(|e| e.to_string())?;
        if gen.rows() == 0 || gen.rows() % r != 0 {
            return Err(format!("T={t}: generate emitted {} rows", gen.rows()));
        }
    }
    Ok(format!(
        "T=1..9 give ceil(T/{r})*{r} teacher-forced rows and positive multiples of {r} generated"
    ))
}

struct Pipeline {
    data: PathBuf,
    run: PathBuf,
    outputs: PathBuf,
    eval: PathBuf,
    train_time: Duration,
}

fn pipeline(root: &Path) -> Result<Pipeline, String> {
    let p = Pipeline {
        data: root.join("data"),
        run: root.join("run"),
        outputs: root.join("outputs"),
        eval: root.join("eval"),
        train_time: Duration::ZERO,
    };
    let t = Instant::now();
    msq(&["gendata", "--out", s(&p.data), "--n", "32"])?;
    for stage in ["tts", "vc"] {
        msq(&["train", "--stage", stage, "--data", s(&p.data), "--out", s(&p.run)])?;
    }
    let tts = p.run.join("tts.ckpt");
    let vc = p.run.join("vc.ckpt");
    msq(&[
        "train",
        "--stage",
        "joint",
        "--data",
        s(&p.data),
        "--out",
        s(&p.run),
        "--init-tts",
        s(&tts),
        "--init-vc",
        s(&vc),
    ])?;
    let train_time = t.elapsed();
    let joint = p.run.join("joint.ckpt");
    for mode in ["tts", "vc", "hybrid"] {
        msq(&[
            "run",
            "--checkpoint",
            s(&joint),
            "--mode",
            mode,
            "--data",
            s(&p.data),
            "--utt",
            "utt0000",
            "--out",
            s(&p.outputs),
            "--dump-align",
        ])?;
    }
    msq(&[
        "eval",
        "--checkpoint",
        s(&joint),
        "--standalone-tts",
        s(&tts),
        "--standalone-vc",
        s(&vc),
        "--data",
        s(&p.data),
        "--out",
        s(&p.eval),
    ])?;
    Ok(Pipeline { train_time, ..p })
}

fn epoch_means(path: &Path) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect())
}

fn staged_overfit(p: &Pipeline) -> Outcome {
    let em = epoch_means(&p.run.join("joint_epochs.csv"))?;
    let (first, last) = (em[0], em[em.len() - 1]);
    let ratio = last / first;
    check(
        ratio < 0.2 && p.train_time < Duration::from_secs(30 * 60),
        format!(
            "joint epoch-mean {first:.4} -> {last:.4} ({:.1}%), tts+vc+joint in {:.0}s",
            100.0 * ratio,
            p.train_time.as_secs_f64()
        ),
    )
}

struct EvalRow {
    l1: f64,
    diagonality: f64,
    l1_to_source: Option<f64>,
}

fn eval_rows(p: &Pipeline) -> Result<BTreeMap<String, Vec<EvalRow>>, String> {
    let text = fs::read_to_string(p.eval.join("eval.csv")).map_err(|e| e.to_string())?;
    let mut out: BTreeMap<String, Vec<EvalRow>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line}: {e}"));
        out.entry(f[0].to_string()).or_default().push(EvalRow {
            l1: num(2)?,
            diagonality: num(3)?,
            l1_to_source: f.get(4).and_then(|v| v.parse().ok()),
        });
    }
    Ok(out)
}

fn mode_correctness(p: &Pipeline) -> Outcome {
    let rows = eval_rows(p)?;
    let corpus = load_corpus(&p.data).map_err(|e| e.to_string())?.head(8);
    let baseline = best_constant_l1(&corpus).map_err(|e| e.to_string())?;
    let tts = &rows["hybrid_tts"];
    let tts_l1 = tts.iter().map(|r| r.l1).sum::<f64>() / tts.len() as f64;
    let vc = &rows["hybrid_vc"];
    let closer = vc.iter().filter(|r| r.l1_to_source.is_some_and(|s| r.l1 < s)).count();
    check(
        tts_l1 < 0.5 * baseline && closer == vc.len() && vc.len() == 8,
        format!(
            "tts-mode L1 {tts_l1:.4} vs 0.5 x baseline {:.4}; vc-mode closer to target on {closer}/{}",
            0.5 * baseline,
            vc.len()
        ),
    )
}

fn uniform_diagonality(corpus: &msq_core::Corpus, r: usize) -> f64 {
    let mut total = 0.0;
    for u in &corpus.utterances {
        let l = u.tokens.len();
        let steps = (0..u.t().div_ceil(r))
            .map(|_| StepAlignment {
                text: Some(vec![1.0 / l as f64; l]),
                speech: None,
            })
            .collect();
        let trace = AlignmentTrace {
            mask: MaskSelection::TextOnly,
            steps,
        };
        total += diagonality(&trace, false).unwrap();
    }
    total / corpus.len() as f64
}

fn attention_health(p: &Pipeline) -> Outcome {
    let corpus = load_corpus(&p.data).map_err(|e| e.to_string())?.head(8);
    let trained = Checkpoint::load(&p.run.join("tts.ckpt")).map_err(|e| e.to_string())?;
    let cfg = &trained.config;
    let untrained = Model::new(ModelKind::Tts, &cfg.model, &mut stream_rng(cfg.seed, 0)).unwrap();
    let mode = [EvalMode::new("tts", MaskSelection::TextOnly)];
    let opts = EvalOptions::default();
    let pre = evaluate(&untrained, &corpus, &mode, opts).map_err(|e| e.to_string())?;
    let post = evaluate(&trained.model, &corpus, &mode, opts).map_err(|e| e.to_string())?;
    let improved = pre
        .rows
        .iter()
        .zip(&post.rows)
        .filter(|(a, b)| b.diagonality > a.diagonality)
        .count();
    let mean = |rows: &[msq_core::data::EvalRow]| rows.iter().map(|r| r.diagonality).sum::<f64>() / rows.len() as f64;
    let uniform = uniform_diagonality(&corpus, cfg.model.decoder.r);
    check(
        improved == corpus.len() && (uniform - 0.3).abs() <= 0.05,
        format!(
            "tts diagonality {:.3} -> {:.3}, higher on {improved}/{}; uniform {uniform:.3}",
            mean(&pre.rows),
            mean(&post.rows),
            corpus.len()
        ),
    )
}

fn schedule_and_optimizer() -> Outcome {
    let paper = RunConfig::preset(Preset::Paper);
    let sched = paper.train.schedule();
    let peak = noam_lr(sched.warmup_steps, &sched).unwrap();

    let mut ps = ParamSet::new();
    ps.add("w", NumArray::vector(&[0.5, -1.5, 2.0])).unwrap();
    let t = &paper.train;
    let mut opt = OptimizerState::new(&ps, t.beta1, t.beta2, t.epsilon);
    let grads = [[0.3, -0.2, 1.0], [-0.1, 0.4, 0.5], [0.2, 0.0, -2.0]];
    let mut w = [0.5f64, -1.5, 2.0];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    let mut worst = 0.0f64;
    for (step, g) in grads.iter().enumerate() {
        ps.get_mut("w").unwrap().grad.data_mut().copy_from_slice(g);
        adam_step(&mut ps, &mut opt, 0.002).unwrap();
        let k = step as i32 + 1;
        for j in 0..3 {
            m[j] = t.beta1 * m[j] + (1.0 - t.beta1) * g[j];
            v[j] = t.beta2 * v[j] + (1.0 - t.beta2) * g[j] * g[j];
            let mh = m[j] / (1.0 - t.beta1.powi(k));
            let vh = v[j] / (1.0 - t.beta2.powi(k));
            w[j] -= 0.002 * mh / (vh.sqrt() + t.epsilon);
            worst = worst.max((ps.get("w").unwrap().value.data()[j] - w[j]).abs());
        }
    }
    check(
        peak == 0.002 && worst < 1e-12,
        format!("noam_lr(warmup) = {peak}; 3-step Adam max deviation {worst:.1e}"),
    )
}

fn file_bytes(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn reproducibility(a: &Pipeline, b: &Pipeline) -> Outcome {
    let mut compared = 0;
    for name in ["tts_loss.csv", "vc_loss.csv", "joint_loss.csv"] {
        if file_bytes(&a.run.join(name))? != file_bytes(&b.run.join(name))? {
            return Err(format!("{name} differs between runs"));
        }
        compared += 1;
    }
    for mode in ["tts", "vc", "hybrid"] {
        let name = format!("{mode}.mel");
        if file_bytes(&a.outputs.join(&name))? != file_bytes(&b.outputs.join(&name))? {
            return Err(format!("{name} differs between runs"));
        }
        compared += 1;
    }
    for stage in ["tts", "vc", "joint"] {
        let path = a.run.join(format!("{stage}.ckpt"));
        let bytes = file_bytes(&path)?;
        let again = Checkpoint::from_bytes(&bytes)
            .and_then(|c| c.to_bytes())
            .map_err(|e| e.to_string())?;
        if again != bytes {
            return Err(format!("{stage}.ckpt is not stable under load/save"));
        }
        if bytes != file_bytes(&b.run.join(format!("{stage}.ckpt")))? {
            return Err(format!("{stage}.ckpt differs between runs"));
        }
    }
    Ok(format!(
        "{compared} loss/MEL1 files identical across runs; 3 checkpoints round-trip bitwise"
    ))
}

fn comparison_report(p: &Pipeline) -> Outcome {
    let rows = eval_rows(p)?;
    let expected = [
        "hybrid_both",
        "hybrid_tts",
        "hybrid_vc",
        "standalone_tts",
        "standalone_vc",
    ];
    let modes: Vec<&str> = rows.keys().map(String::as_str).collect();
    let total: usize = rows.values().map(Vec::len).sum();
    let all_finite = rows
        .values()
        .flatten()
        .all(|r| r.l1.is_finite() && r.diagonality.is_finite());
    let mut table = String::new();
    for (mode, rs) in &rows {
        let l1 = rs.iter().map(|r| r.l1).sum::<f64>() / rs.len() as f64;
        let d = rs.iter().map(|r| r.diagonality).sum::<f64>() / rs.len() as f64;
        table.push_str(&format!("\n      {mode:<16} L1 {l1:.4}  diagonality {d:.3}"));
    }
    check(
        modes == expected && total == 5 * 8 && all_finite,
        format!("{total} rows over {} modes{table}", modes.len()),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; answer those
    // without running the suite.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args
        .iter()
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return;
    }

    let root = tempfile::tempdir().expect("temp dir");
    let first = pipeline(&root.path().join("a"));
    let second = pipeline(&root.path().join("b"));

    let results: Vec<(&str, Outcome)> = vec![
        ("gradient integrity", gradient_integrity()),
        ("mask invariance", mask_invariance()),
        ("masked-gradient isolation", masked_gradient_isolation()),
        ("framing", framing()),
        (
            "staged-pipeline overfit",
            first.as_ref().map_err(Clone::clone).and_then(staged_overfit),
        ),
        (
            "mode correctness",
            first.as_ref().map_err(Clone::clone).and_then(mode_correctness),
        ),
        (
            "attention health",
            first.as_ref().map_err(Clone::clone).and_then(attention_health),
        ),
        ("schedule and optimizer", schedule_and_optimizer()),
        (
            "reproducibility",
            match (&first, &second) {
                (Ok(a), Ok(b)) => reproducibility(a, b),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            },
        ),
        (
            "hybrid comparison report",
            first.as_ref().map_err(Clone::clone).and_then(comparison_report),
        ),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail}", i + 1);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
