use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msq_core::checks;
use msq_core::config::parse_pairs;
use msq_core::data::{
    best_constant_l1, evaluate, gen_corpus, load_corpus, load_mel, save_corpus, save_mel, EvalMode, EvalOptions,
    EvalReport, ToySpec,
};
use msq_core::model::ModelKind;
use msq_core::numerics::stream_rng;
use msq_core::training::{
    adapt_finetune, init_joint, init_joint_with_decoder, train_joint, train_standalone_tts, train_standalone_vc,
    LossRecord, StageReport, TrainOptions,
};
use msq_core::{Checkpoint, Corpus, GenerateOptions, MaskSelection, RunConfig};

use crate::{Cli, Command, GlobalArgs, ModeArg, StageArg};

pub const RUN_MANIFEST: &str = "run_manifest.txt";
const PROGRESS_EVERY: u64 = 250;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Check(String),
    Core(msq_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use msq_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 4,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(
                E::MissingInput { .. }
                | E::InputKind(_)
                | E::Config(_)
                | E::InvalidArgument(_)
                | E::UnknownSymbol { .. },
            ) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<msq_core::Error> for CliError {
    fn from(e: msq_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Worker-thread cap from `MSQ_THREADS`. Every command here runs on one
/// thread, which satisfies any cap.
fn thread_cap() -> Result<usize> {
    match std::env::var("MSQ_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("MSQ_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Preset, then config file, then `--seed` and `--set` pairs.
pub fn run_config(g: &GlobalArgs) -> Result<RunConfig> {
    let file = match &g.config {
        Some(p) => parse_pairs(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    if let Some(seed) = g.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    for s in &g.overrides {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::build(g.preset.map(Into::into), &file, &overrides)?)
}

/// One `== title` section per command; rerunning a command replaces its
/// section and keeps the others.
struct Manifest {
    title: String,
    lines: Vec<String>,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    fn new(title: &str) -> Result<Self> {
        Ok(Manifest {
            title: title.to_string(),
            lines: vec![format!("threads={}", thread_cap()?)],
            artifacts: Vec::new(),
        })
    }

    fn note(&mut self, key: &str, value: impl fmt::Display) {
        self.lines.push(format!("{key}={value}"));
    }

    fn write_file(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(path, bytes)?;
        self.artifacts.push(path.to_path_buf());
        Ok(())
    }

    fn add(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// No timestamps, so reruns with the same flags write the same bytes.
    fn finish(self, out: &Path) -> Result<()> {
        let path = out.join(RUN_MANIFEST);
        let header = format!("== {}\n", self.title);
        let mut text = String::new();
        if let Ok(old) = fs::read_to_string(&path) {
            for block in old.split_inclusive('\n').fold(Vec::<String>::new(), |mut acc, line| {
                if line.starts_with("== ") || acc.is_empty() {
                    acc.push(String::new());
                }
                acc.last_mut().unwrap().push_str(line);
                acc
            }) {
                if !block.starts_with(&header) {
                    text.push_str(&block);
                }
            }
        }
        text.push_str(&header);
        for l in &self.lines {
            text.push_str(l);
            text.push('\n');
        }
        for a in &self.artifacts {
            let name = a.strip_prefix(out).unwrap_or(a);
            text.push_str(&format!("artifact={} {}\n", name.display(), fs::metadata(a)?.len()));
        }
        fs::write(path, text)?;
        Ok(())
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    thread_cap()?;
    let g = &cli.global;
    match &cli.command {
        Command::Gendata { n, min_len, max_len } => gendata(g, *n, *min_len, *max_len),
        Command::Train {
            stage,
            data,
            init_tts,
            init_vc,
            transfer_decoder,
            init,
            limit,
        } => train(
            g,
            *stage,
            data,
            Inits {
                tts: init_tts.as_deref(),
                vc: init_vc.as_deref(),
                base: init.as_deref(),
                transfer_decoder: *transfer_decoder,
            },
            *limit,
        ),
        Command::Run {
            checkpoint,
            mode,
            tokens,
            source_mel,
            utt,
            data,
            max_steps,
            no_dropout,
            dump_align,
        } => run(
            g,
            checkpoint,
            *mode,
            RunInputs {
                tokens: tokens.as_deref(),
                source_mel: source_mel.as_deref(),
                utt: utt.as_deref(),
                data: data.as_deref(),
            },
            *max_steps,
            !*no_dropout,
            *dump_align,
        ),
        Command::Gradcheck => gradcheck(g),
        Command::Eval {
            checkpoint,
            data,
            standalone_tts,
            standalone_vc,
            limit,
        } => eval(
            g,
            checkpoint,
            data,
            standalone_tts.as_deref(),
            standalone_vc.as_deref(),
            *limit,
        ),
    }
}

fn gendata(g: &GlobalArgs, n: usize, min_len: usize, max_len: usize) -> Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if min_len == 0 || min_len > max_len {
        return Err(usage(format!(
            "invalid length range --min-len {min_len} --max-len {max_len}"
        )));
    }
    let cfg = run_config(g)?;
    let spec = ToySpec::new(cfg.model.decoder.n_mels)?;
    if spec.vocab != cfg.model.vocab {
        return Err(usage(format!(
            "toy corpus has {} symbols, model.vocab is {}",
            spec.vocab, cfg.model.vocab
        )));
    }
    let corpus = gen_corpus(&spec, n, (min_len, max_len), cfg.seed)?;
    save_corpus(&g.out, &corpus)?;
    let mut m = Manifest::new("gendata")?;
    m.note("seed", cfg.seed);
    m.note("n", n);
    m.note("n_mels", spec.n_mels);
    m.finish(&g.out)?;
    println!("wrote {} utterances to {}", corpus.len(), g.out.display());
    Ok(())
}

fn load_data(dir: &Path, limit: Option<usize>) -> Result<Corpus> {
    let c = load_corpus(dir)?;
    Ok(match limit {
        Some(0) => return Err(usage("--limit must be at least 1")),
        Some(n) => c.head(n),
        None => c,
    })
}

fn progress(label: String, total: u64) -> TrainOptions<'static> {
    TrainOptions {
        checkpoint_dir: None,
        on_step: Some(Box::new(move |r: &LossRecord| {
            if r.step.is_multiple_of(PROGRESS_EVERY) || r.step == total {
                eprintln!("{label} step {} loss {:.5} lr {:.6}", r.step, r.loss, r.lr);
            }
        })),
    }
}

struct Inits<'a> {
    tts: Option<&'a Path>,
    vc: Option<&'a Path>,
    base: Option<&'a Path>,
    transfer_decoder: bool,
}

fn train(g: &GlobalArgs, stage: StageArg, data: &Path, inits: Inits, limit: Option<usize>) -> Result<()> {
    let cfg = run_config(g)?;
    let Inits {
        tts: init_tts,
        vc: init_vc,
        base: init,
        transfer_decoder,
    } = inits;
    if transfer_decoder && stage != StageArg::Joint {
        return Err(usage("--transfer-decoder only applies to --stage joint"));
    }
    match stage {
        StageArg::Joint if init_tts.is_none() || init_vc.is_none() => {
            return Err(usage("--stage joint requires --init-tts and --init-vc"));
        }
        StageArg::Adapt if init.is_none() => return Err(usage("--stage adapt requires --init")),
        _ => {}
    }
    fs::create_dir_all(&g.out)?;
    let name = format!("{stage:?}").to_lowercase();
    let config_path = g.out.join(format!("{name}_config.txt"));
    fs::write(&config_path, cfg.to_text())?;
    let corpus = load_data(data, limit)?;
    let mut opts = progress(name.clone(), cfg.train.max_steps);
    opts.checkpoint_dir = Some(g.out.join("checkpoints"));

    let (ckpt, report) = match stage {
        StageArg::Tts => train_standalone_tts(&corpus, &cfg, &mut opts)?,
        StageArg::Vc => train_standalone_vc(&corpus, &cfg, &mut opts)?,
        StageArg::Joint => {
            let tts = Checkpoint::load(init_tts.unwrap())?;
            let vc = Checkpoint::load(init_vc.unwrap())?;
            let model = if transfer_decoder {
                let (model, copied) = init_joint_with_decoder(&tts, &vc, &cfg)?;
                eprintln!("transferred {} decoder blobs", copied.len());
                model
            } else {
                init_joint(&tts, &vc, &cfg)?
            };
            train_joint(model, &corpus, &cfg, &mut opts)?
        }
        StageArg::Adapt => {
            let base = Checkpoint::load(init.unwrap())?;
            adapt_finetune(&base, &corpus, &cfg, &mut opts)?
        }
    };

    let mut m = Manifest::new(&format!("train {name}"))?;
    m.note("corpus", data.display());
    m.note("utterances", corpus.len());
    for (flag, p) in [("init_tts", init_tts), ("init_vc", init_vc), ("init", init)] {
        if let Some(p) = p {
            m.note(flag, p.display());
        }
    }
    if transfer_decoder {
        m.note("transfer_decoder", true);
    }
    let ckpt_path = g.out.join(format!("{name}.ckpt"));
    ckpt.save(&ckpt_path)?;
    m.add(&ckpt_path);
    m.write_file(&g.out.join(format!("{name}_loss.csv")), report.loss_csv())?;
    m.add(&config_path);
    m.write_file(&g.out.join(format!("{name}_epochs.csv")), epoch_csv(&report))?;
    m.finish(&g.out)?;
    print_summary(&name, &report);
    Ok(())
}

fn epoch_csv(report: &StageReport) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (i, l) in report.epoch_means.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

fn print_summary(name: &str, report: &StageReport) {
    let em = &report.epoch_means;
    println!(
        "stage {name}: {} steps in {:.1}s",
        report.records.len(),
        report.wall_time.as_secs_f64()
    );
    if let (Some(first), Some(last)) = (em.first(), em.last()) {
        println!("epoch-mean loss {first:.5} -> {last:.5} ({:.1}%)", 100.0 * last / first);
    }
    if let (Some(pre), Some(post)) = (report.pre_loss, report.post_loss) {
        println!("teacher-forced loss on adaptation data {pre:.5} -> {post:.5}");
    }
}

struct RunInputs<'a> {
    tokens: Option<&'a str>,
    source_mel: Option<&'a Path>,
    utt: Option<&'a str>,
    data: Option<&'a Path>,
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| usage(format!("bad token `{t}`"))))
        .collect()
}

fn mode_mask(mode: ModeArg) -> MaskSelection {
    match mode {
        ModeArg::Tts => MaskSelection::TextOnly,
        ModeArg::Vc => MaskSelection::SpeechOnly,
        ModeArg::Hybrid => MaskSelection::Both,
    }
}

fn run(
    g: &GlobalArgs,
    checkpoint: &Path,
    mode: ModeArg,
    inputs: RunInputs,
    max_steps: Option<usize>,
    dropout: bool,
    dump_align: bool,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let r = ckpt.model.config.decoder.r;
    let (tokens, source, target_len) = match (inputs.utt, inputs.data) {
        (Some(id), Some(dir)) => {
            if inputs.tokens.is_some() || inputs.source_mel.is_some() {
                return Err(usage("--utt cannot be combined with --tokens or --source-mel"));
            }
            let corpus = load_corpus(dir)?;
            let u = corpus
                .utterances
                .into_iter()
                .find(|u| u.id == id)
                .ok_or_else(|| usage(format!("no utterance `{id}` in {}", dir.display())))?;
            let t = u.t();
            (u.has_text().then_some(u.tokens), u.source, Some(t))
        }
        (Some(_), None) => return Err(usage("--utt requires --data")),
        (None, _) => {
            let tokens = inputs.tokens.map(parse_tokens).transpose()?;
            let source = inputs.source_mel.map(load_mel).transpose()?;
            (tokens, source, None)
        }
    };
    let mask = mode_mask(mode);
    // Without a reference length, allow twice the longest plausible render.
    let steps = max_steps.or(target_len.map(|t| t.div_ceil(r))).unwrap_or_else(|| {
        let from_text = tokens.as_ref().map_or(0, |t| 4 * t.len() + 4);
        let from_speech = source.as_ref().map_or(0, |s| s.rows());
        (2 * from_text.max(from_speech)).div_ceil(r).max(1)
    });
    let seed = g.seed.unwrap_or(ckpt.config.seed);
    let dropout = dropout && ckpt.model.config.decoder.generate_dropout;
    let mut rng = stream_rng(seed, 0);
    let opts = GenerateOptions {
        max_steps: steps,
        dropout,
        energy_stop: true,
    };
    let (mel, trace) = ckpt.model.generate(
        tokens.as_deref(),
        source.as_ref(),
        mask,
        opts,
        dropout.then_some(&mut rng),
    )?;

    fs::create_dir_all(&g.out)?;
    let name = format!("{mode:?}").to_lowercase();
    let mut m = Manifest::new(&format!("run {name}"))?;
    m.note("checkpoint", checkpoint.display());
    m.note("mask", mask);
    m.note("seed", seed);
    m.note("dropout", dropout);
    let mel_path = g.out.join(format!("{name}.mel"));
    save_mel(&mel_path, &mel)?;
    m.add(&mel_path);
    if dump_align {
        m.write_file(&g.out.join(format!("{name}_align.csv")), trace.to_csv())?;
    }
    m.finish(&g.out)?;
    println!(
        "{name}: {} frames x {} bands in {} steps -> {}",
        mel.rows(),
        mel.cols(),
        trace.n_steps(),
        mel_path.display()
    );
    Ok(())
}

fn gradcheck(g: &GlobalArgs) -> Result<()> {
    let seed = g.seed.unwrap_or(1);
    let started = Instant::now();
    let results = checks::run_all(seed)?;
    let mut failed = Vec::new();
    println!("{:<22} {:>12} {:>8}  worst", "check", "max_rel_err", "coords");
    for r in &results {
        let flag = if r.passed() { "" } else { "  FAIL" };
        println!(
            "{:<22} {:>12.3e} {:>8}  {}{flag}",
            r.name, r.report.max_rel_err, r.report.checked, r.report.worst
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    println!(
        "{} checks, tolerance {:e}, {:.1}s",
        results.len(),
        checks::TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn eval(
    g: &GlobalArgs,
    checkpoint: &Path,
    data: &Path,
    standalone_tts: Option<&Path>,
    standalone_vc: Option<&Path>,
    limit: usize,
) -> Result<()> {
    let corpus = load_data(data, Some(limit))?;
    let opts = EvalOptions {
        dropout: false,
        seed: g.seed.unwrap_or(0),
    };
    let main = Checkpoint::load(checkpoint)?;
    let modes: Vec<EvalMode> = match main.model.kind {
        ModelKind::Joint => vec![
            EvalMode::new("hybrid_tts", MaskSelection::TextOnly),
            EvalMode::new("hybrid_vc", MaskSelection::SpeechOnly),
            EvalMode::new("hybrid_both", MaskSelection::Both),
        ],
        kind => vec![EvalMode::new(&format!("standalone_{kind}"), main.model.native_mask())],
    };
    let mut report = evaluate(&main.model, &corpus, &modes, opts)?;
    for (path, label, kind) in [
        (standalone_tts, "standalone_tts", ModelKind::Tts),
        (standalone_vc, "standalone_vc", ModelKind::Vc),
    ] {
        let Some(path) = path else { continue };
        let c = Checkpoint::load(path)?;
        if c.model.kind != kind {
            return Err(usage(format!(
                "{} holds a {} model, expected {kind}",
                path.display(),
                c.model.kind
            )));
        }
        report.extend(evaluate(
            &c.model,
            &corpus,
            &[EvalMode::new(label, c.model.native_mask())],
            opts,
        )?);
    }
    check_finite(&report)?;

    fs::create_dir_all(&g.out)?;
    let mut m = Manifest::new("eval")?;
    m.note("checkpoint", checkpoint.display());
    m.note("corpus", data.display());
    m.note("utterances", corpus.len());
    m.write_file(&g.out.join("eval.csv"), report.to_csv())?;
    m.finish(&g.out)?;
    print!("{}", report.table());
    println!("bias-only baseline L1 {:.4}", best_constant_l1(&corpus)?);
    Ok(())
}

fn check_finite(report: &EvalReport) -> Result<()> {
    match report
        .rows
        .iter()
        .find(|r| !r.l1.is_finite() || !r.diagonality.is_finite())
    {
        Some(r) => Err(msq_core::Error::NonFinite(format!("eval metrics for {} in mode {}", r.utt_id, r.mode)).into()),
        None => Ok(()),
    }
}
