//! Parallel corpora of token-id sequences, with loaders for the JSONL
//! interchange format and a whitespace-tokenized plain-text variant.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for end-of-sentence by the plain-text loader.
pub const EOS_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
    src_vocab: u32,
    tgt_vocab: u32,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<u32>, Vec<u32>)>, src_vocab: u32, tgt_vocab: u32) -> Result<Self> {
        for (i, (src, tgt)) in pairs.iter().enumerate() {
            if tgt.is_empty() {
                return Err(Error::invalid_argument(format!(
                    "sentence {} has an empty target sequence",
                    i
                )));
            }
            if let Some(&t) = src.iter().find(|&&t| t >= src_vocab) {
                return Err(Error::invalid_argument(format!(
                    "sentence {}: source token {} exceeds vocabulary size {}",
                    i, t, src_vocab
                )));
            }
            if let Some(&t) = tgt.iter().find(|&&t| t >= tgt_vocab) {
                return Err(Error::invalid_argument(format!(
                    "sentence {}: target token {} exceeds vocabulary size {}",
                    i, t, tgt_vocab
                )));
            }
        }
        Ok(ParallelCorpus { pairs, src_vocab, tgt_vocab })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    #[inline]
    pub fn source(&self, i: usize) -> &[u32] {
        &self.pairs[i].0
    }

    #[inline]
    pub fn target(&self, i: usize) -> &[u32] {
        &self.pairs[i].1
    }

    #[inline]
    pub fn src_vocab(&self) -> u32 {
        self.src_vocab
    }

    #[inline]
    pub fn tgt_vocab(&self) -> u32 {
        self.tgt_vocab
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], &[u32])> {
        self.pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice()))
    }

    /// Total target token count: the datastore entry count.
    pub fn total_target_tokens(&self) -> u64 {
        self.pairs.iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// One JSON object per line: `{"src": [ints], "tgt": [ints]}`.
    /// Vocabulary sizes default to max id + 1 unless overridden.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl_with_vocab(path, None, None)
    }

    pub fn from_jsonl_with_vocab(
        path: impl AsRef<Path>,
        src_vocab: Option<u32>,
        tgt_vocab: Option<u32>,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            src: Vec<u32>,
            tgt: Vec<u32>,
        }
        let file = File::open(path.as_ref())?;
        let reader = BufReader::new(file);
        let mut pairs = Vec::new();
        let mut max_src = 0u32;
        let mut max_tgt = 0u32;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| {
                Error::invalid_argument(format!("line {}: {}", lineno + 1, e))
            })?;
            max_src = max_src.max(rec.src.iter().copied().max().map_or(0, |m| m + 1));
            max_tgt = max_tgt.max(rec.tgt.iter().copied().max().map_or(0, |m| m + 1));
            pairs.push((rec.src, rec.tgt));
        }
        Self::new(
            pairs,
            src_vocab.unwrap_or(max_src.max(1)),
            tgt_vocab.unwrap_or(max_tgt.max(1)),
        )
    }
}

/// Word-to-id maps built by the plain-text loader. Id 0 is reserved for the
/// end-of-sentence marker on both sides.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl Vocabulary {
    pub fn src_word(&self, id: u32) -> Option<&str> {
        self.src.get(id as usize).map(|s| s.as_str())
    }

    pub fn tgt_word(&self, id: u32) -> Option<&str> {
        self.tgt.get(id as usize).map(|s| s.as_str())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("vocabulary encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::invalid_argument(format!("vocabulary parse: {e}")))
    }

    /// Map a source sentence through the vocabulary; unknown words error.
    pub fn encode_src(&self, line: &str) -> Result<Vec<u32>> {
        let lookup: HashMap<&str, u32> = self
            .src
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i as u32))
            .collect();
        line.split_whitespace()
            .map(|w| {
                lookup.get(w).copied().ok_or_else(|| {
                    Error::invalid_argument(format!("word not in source vocabulary: {w}"))
                })
            })
            .collect()
    }

    pub fn decode_tgt(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != EOS_ID)
            .map(|&t| self.tgt_word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Build a corpus from whitespace-tokenized parallel text files. Targets get
/// the end-of-sentence token appended so generation has a stopping symbol.
pub fn corpus_from_text(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
) -> Result<(ParallelCorpus, Vocabulary)> {
    let src_lines = read_lines(src_path.as_ref())?;
    let tgt_lines = read_lines(tgt_path.as_ref())?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::invalid_argument(format!(
            "parallel files disagree: {} source lines vs {} target lines",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    let mut src_words = vec!["</s>".to_string()];
    let mut tgt_words = vec!["</s>".to_string()];
    let mut src_map: HashMap<String, u32> = HashMap::new();
    let mut tgt_map: HashMap<String, u32> = HashMap::new();
    src_map.insert("</s>".into(), EOS_ID);
    tgt_map.insert("</s>".into(), EOS_ID);

    let intern = |word: &str, words: &mut Vec<String>, map: &mut HashMap<String, u32>| {
        if let Some(&id) = map.get(word) {
            id
        } else {
            let id = words.len() as u32;
            words.push(word.to_string());
            map.insert(word.to_string(), id);
            id
        }
    };

    let mut pairs = Vec::with_capacity(src_lines.len());
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let src: Vec<u32> = s
            .split_whitespace()
            .map(|w| intern(w, &mut src_words, &mut src_map))
            .collect();
        let mut tgt: Vec<u32> = t
            .split_whitespace()
            .map(|w| intern(w, &mut tgt_words, &mut tgt_map))
            .collect();
        tgt.push(EOS_ID);
        pairs.push((src, tgt));
    }
    let vocab = Vocabulary { src: src_words, tgt: tgt_words };
    let corpus = ParallelCorpus::new(pairs, vocab.src.len() as u32, vocab.tgt.len() as u32)?;
    Ok((corpus, vocab))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path)?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(Error::Io))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_target() {
        let err = ParallelCorpus::new(vec![(vec![1], vec![])], 4, 4).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        assert!(ParallelCorpus::new(vec![(vec![5], vec![1])], 4, 4).is_err());
        assert!(ParallelCorpus::new(vec![(vec![1], vec![9])], 4, 4).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"src\": [1, 2], \"tgt\": [3, 0]}\n{\"src\": [0], \"tgt\": [1]}\n")
            .unwrap();
        let c = ParallelCorpus::from_jsonl(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.source(0), &[1, 2]);
        assert_eq!(c.target(1), &[1]);
        assert_eq!(c.src_vocab(), 3);
        assert_eq!(c.tgt_vocab(), 4);
        assert_eq!(c.total_target_tokens(), 3);
    }

    #[test]
    fn text_loader_builds_vocab_and_appends_eos() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("s.txt");
        let tp = dir.path().join("t.txt");
        std::fs::write(&sp, "der hund\nder ball\n").unwrap();
        std::fs::write(&tp, "the dog\nthe ball\n").unwrap();
        let (c, v) = corpus_from_text(&sp, &tp).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.target(0).last(), Some(&EOS_ID));
        assert_eq!(v.tgt_word(EOS_ID), Some("</s>"));
        assert_eq!(v.decode_tgt(c.target(0)), "the dog");
        assert_eq!(v.encode_src("ball der").unwrap(), vec![3, 1]);
    }
}
