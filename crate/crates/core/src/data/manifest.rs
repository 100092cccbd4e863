use std::fs;
use std::path::Path;

use super::melio::{load_mel, save_mel};
use super::{Corpus, Utterance};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const HEADER: [&str; 5] = [
    "id",
    "text_tokens",
    "source_speaker",
    "source_mel_path",
    "target_mel_path",
];

/// Writes `dir/manifest.csv` and one MEL1 file per mel under `dir/mels`.
/// Paths in the manifest are relative to `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join("mels"))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    w.write_record(HEADER)?;
    for u in &corpus.utterances {
        let tokens = u.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let src_path = match &u.source {
            Some(s) => {
                let rel = format!("mels/{}_source.mel", u.id);
                save_mel(&dir.join(&rel), s)?;
                rel
            }
            None => String::new(),
        };
        let tgt_path = format!("mels/{}_target.mel", u.id);
        save_mel(&dir.join(&tgt_path), &u.target)?;
        w.write_record([u.id.as_str(), &tokens, &u.speaker, &src_path, &tgt_path])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mut r = csv::Reader::from_path(dir.join(MANIFEST_FILE))?;
    if r.headers()?.iter().ne(HEADER) {
        return Err(Error::Format(format!("manifest header must be {}", HEADER.join(","))));
    }
    let mut utterances = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec[0].to_string();
        let tokens = rec[1]
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("utterance {id}: bad token {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let source = match &rec[3] {
            "" => None,
            p => Some(load_mel(&dir.join(p))?),
        };
        let target = load_mel(&dir.join(&rec[4]))?;
        if let Some(s) = &source {
            if s.cols() != target.cols() {
                return Err(Error::Format(format!(
                    "utterance {id}: source has {} bands, target {}",
                    s.cols(),
                    target.cols()
                )));
            }
        }
        utterances.push(Utterance {
            id,
            tokens,
            speaker: rec[2].to_string(),
            source,
            target,
        });
    }
    if utterances.is_empty() {
        return Err(Error::Corpus(format!(
            "{} lists no utterances",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    Ok(Corpus { utterances })
}
