use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "encoder.d_embed=8",
    "encoder.d_prenet=6",
    "encoder.bank_k=3",
    "encoder.conv_channels=6",
    "encoder.highway_layers=1",
    "encoder.d_gru=5",
    "decoder.d_prenet=6",
    "decoder.d_attn_rnn=8",
    "decoder.d_dec_rnn=8",
    "decoder.n_mels=8",
    "train.batch_size=2",
    "train.warmup_steps=4",
    "train.max_steps=3",
];

fn msq(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_msq"));
    cmd.current_dir(dir).args(args);
    for kv in TINY {
        cmd.args(["--set", kv]);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = msq(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gendata(dir: &Path) {
    ok(
        dir,
        &[
            "gendata",
            "--out",
            "data",
            "--n",
            "4",
            "--min-len",
            "2",
            "--max-len",
            "4",
        ],
    );
}

fn read_mel(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[..4], b"MEL1");
    let t = u32::from_le_bytes(b[4..8].try_into().unwrap());
    let m = u32::from_le_bytes(b[8..12].try_into().unwrap());
    assert_eq!(b.len(), 12 + 4 * (t * m) as usize);
    (t, m)
}

#[test]
fn gendata_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    gendata(d.path());
    ok(
        d.path(),
        &[
            "gendata",
            "--out",
            "again",
            "--n",
            "4",
            "--min-len",
            "2",
            "--max-len",
            "4",
        ],
    );
    for f in ["manifest.csv", "mels/utt0000_target.mel", "mels/utt0003_source.mel"] {
        let a = std::fs::read(d.path().join("data").join(f)).unwrap();
        let b = std::fs::read(d.path().join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&msq(d.path(), &["gendata", "--out", "x", "--n", "0"])), 2);
    assert_eq!(
        code(&msq(d.path(), &["gendata", "--out", "x", "--set", "bogus.key=1"])),
        2
    );
    gendata(d.path());
    let out = msq(
        d.path(),
        &["train", "--stage", "joint", "--data", "data", "--out", "run"],
    );
    assert_eq!(code(&out), 2);
    let out = msq(
        d.path(),
        &["train", "--stage", "adapt", "--data", "data", "--out", "run"],
    );
    assert_eq!(code(&out), 2);
    let out = msq(
        d.path(),
        &[
            "train",
            "--stage",
            "tts",
            "--transfer-decoder",
            "--data",
            "data",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn tts_mode_without_text_names_the_missing_input() {
    let d = tempfile::tempdir().unwrap();
    gendata(d.path());
    ok(d.path(), &["train", "--stage", "tts", "--data", "data", "--out", "run"]);
    let out = msq(
        d.path(),
        &[
            "run",
            "--checkpoint",
            "run/tts.ckpt",
            "--mode",
            "tts",
            "--source-mel",
            "data/mels/utt0000_source.mel",
            "--out",
            "gen",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("text"));
}

#[test]
fn pipeline_through_eval() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    gendata(p);
    ok(p, &["train", "--stage", "tts", "--data", "data", "--out", "run"]);
    ok(p, &["train", "--stage", "vc", "--data", "data", "--out", "run"]);
    let out = ok(
        p,
        &[
            "train",
            "--stage",
            "joint",
            "--data",
            "data",
            "--out",
            "run",
            "--init-tts",
            "run/tts.ckpt",
            "--init-vc",
            "run/vc.ckpt",
            "--transfer-decoder",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("decoder blobs"));
    for f in [
        "joint.ckpt",
        "joint_loss.csv",
        "joint_epochs.csv",
        "joint_config.txt",
        "run_manifest.txt",
    ] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }

    ok(
        p,
        &[
            "run",
            "--checkpoint",
            "run/joint.ckpt",
            "--mode",
            "vc",
            "--data",
            "data",
            "--utt",
            "utt0001",
            "--out",
            "gen",
        ],
    );
    let (t, m) = read_mel(&p.join("gen/vc.mel"));
    assert!(t > 0);
    assert_eq!(m, 8);

    ok(
        p,
        &[
            "run",
            "--checkpoint",
            "run/joint.ckpt",
            "--mode",
            "hybrid",
            "--tokens",
            "1,2,3",
            "--source-mel",
            "data/mels/utt0000_source.mel",
            "--max-steps",
            "3",
            "--dump-align",
            "--out",
            "gen",
        ],
    );
    assert_eq!(read_mel(&p.join("gen/hybrid.mel")), (6, 8));
    let align = std::fs::read_to_string(p.join("gen/hybrid_align.csv")).unwrap();
    assert!(align.starts_with("step,source,position,weight"));
    assert!(align.lines().any(|l| l.contains(",t,")) && align.lines().any(|l| l.contains(",v,")));

    ok(
        p,
        &[
            "eval",
            "--checkpoint",
            "run/joint.ckpt",
            "--standalone-tts",
            "run/tts.ckpt",
            "--standalone-vc",
            "run/vc.ckpt",
            "--data",
            "data",
            "--limit",
            "3",
            "--out",
            "report",
        ],
    );
    let csv = std::fs::read_to_string(p.join("report/eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "mode,utt_id,l1,diagonality,l1_to_source");
    assert_eq!(csv.lines().count(), 1 + 5 * 3);

    ok(
        p,
        &[
            "train",
            "--stage",
            "adapt",
            "--data",
            "data",
            "--out",
            "adapted",
            "--init",
            "run/joint.ckpt",
            "--limit",
            "2",
        ],
    );
    assert!(p.join("adapted/adapt.ckpt").is_file());
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["gradcheck", "--out", "gc"]);
    assert!(!String::from_utf8_lossy(&out.stdout).is_empty());
}
