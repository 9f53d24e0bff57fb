//! Vocabulary and text ↔ id conversion.
//!
//! Ids 0–3 are fixed to `<unk>`, `<bos>`, `<eos>` and `<sep>`. Two
//! segmentation modes exist: plain whitespace tokens, and greedy
//! longest-match against a loaded piece inventory.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{QgError, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<unk>", "<bos>", "<eos>", "<sep>"];

/// Word-start marker used by piece inventories exported from unigram-LM tools.
pub const WORD_MARKER: char = '\u{2581}';

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segmentation {
    Whitespace,
    /// Greedy longest match; `word_marker` means pieces carry a leading `▁`
    /// at word starts.
    Pieces { word_marker: bool },
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    segmentation: Segmentation,
    longest_piece: usize,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 5 {
            return Err(QgError::Config(format!("vocabulary max_size {max_size} < 5")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                seen_any = true;
                if !SPECIALS.contains(&tok) {
                    *counts.entry(tok.to_string()).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(QgError::EmptyInput("vocabulary corpus has no tokens".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_pieces(ranked.into_iter().map(|(p, _)| p), Segmentation::Whitespace)
    }

    pub fn from_pieces<I>(pieces: I, segmentation: Segmentation) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            all.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        for p in pieces {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(QgError::Config(format!("invalid vocabulary piece {p:?}")));
            }
            if index.contains_key(&p) {
                return Err(QgError::Config(format!("duplicate vocabulary piece {p:?}")));
            }
            index.insert(p.clone(), all.len() as u32);
            all.push(p);
        }
        let longest_piece = all.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Self {
            pieces: all,
            index,
            segmentation,
            longest_piece,
        })
    }

    /// Whitespace-mode vocabulary file: one token per line, line `n` is id `n + 4`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pieces(read_lines(path)?, Segmentation::Whitespace)
    }

    /// Piece inventory (same file layout) applied by greedy longest match.
    pub fn load_piece_inventory(path: &Path) -> Result<Self> {
        let pieces = read_lines(path)?;
        let word_marker = pieces.iter().any(|p| p.starts_with(WORD_MARKER));
        Self::from_pieces(pieces, Segmentation::Pieces { word_marker })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces[SPECIALS.len()..].join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn segmentation(&self) -> Segmentation {
        self.segmentation
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Ids for one whitespace token. Special-token literals map to their ids.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(pos) = SPECIALS.iter().position(|s| *s == word) {
            return vec![pos as u32];
        }
        match self.segmentation {
            Segmentation::Whitespace => vec![self.id(word).unwrap_or(UNK)],
            Segmentation::Pieces { word_marker } => {
                let text = if word_marker {
                    format!("{WORD_MARKER}{word}")
                } else {
                    word.to_string()
                };
                self.longest_match(&text)
            }
        }
    }

    fn longest_match(&self, text: &str) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let max = self.longest_piece.min(chars.len() - pos);
            let found = (1..=max).rev().find_map(|len| {
                let cand: String = chars[pos..pos + len].iter().collect();
                self.id(&cand).map(|id| (id, len))
            });
            match found {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(UNK);
                    pos += 1;
                }
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().flat_map(|w| self.encode_word(w.as_ref())).collect()
    }

    /// Space-joined pieces, specials included as literal markers.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let pieces = ids
            .iter()
            .map(|&id| {
                self.piece(id).ok_or(QgError::Decode {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(pieces.join(" "))
    }

    /// Surface text with `<bos>`, `<eos>` and `<sep>` dropped and word-marked
    /// pieces merged back into words.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let kept: Vec<u32> = ids.iter().copied().filter(|&id| !matches!(id, BOS | EOS | SEP)).collect();
        match self.segmentation {
            Segmentation::Pieces { word_marker: true } => {
                let mut s = String::new();
                for &id in &kept {
                    let p = self.piece(id).ok_or(QgError::Decode {
                        id,
                        size: self.len(),
                    })?;
                    if id == UNK {
                        s.push(' ');
                        s.push_str(p);
                    } else {
                        s.push_str(&p.replace(WORD_MARKER, " "));
                    }
                }
                Ok(s.split_whitespace().collect::<Vec<_>>().join(" "))
            }
            _ => self.decode(&kept),
        }
    }

    /// Stable digest of the id ↔ piece mapping, stored in checkpoints.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        h.update(format!("{:?}", self.segmentation).as_bytes());
        hex::encode(h.finalize())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
