//! Word-piece vocabulary and greedy longest-match tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Prefix marking a piece that continues the previous word.
pub const CONTINUATION: &str = "##";

const MAX_WORD_CHARS: usize = 100;

/// Dense id ↔ piece table. Ids are line numbers of the vocabulary file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
}

impl Vocabulary {
    /// Validates uniqueness and the presence of every reserved token.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Invalid(format!("empty word piece at id {i}")));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate word piece `{p}` at id {i}")));
            }
        }
        let find = |tok: &str| {
            index
                .get(tok)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("vocabulary lacks reserved token {tok}")))
        };
        Ok(Self {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            sep: find(SEP)?,
            mask: find(MASK)?,
            pieces,
            index,
        })
    }

    /// Reserved tokens first, then `pieces` in order (duplicates dropped).
    pub fn with_reserved<I, P>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = P>,
        P: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = all.iter().cloned().collect();
        for p in pieces {
            let p = p.into();
            if seen.insert(p.clone()) {
                all.push(p);
            }
        }
        Self::from_pieces(all)
    }

    /// One piece per line; line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_pieces(pieces).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// True when `id` continues the word started by an earlier piece.
    pub fn is_continuation(&self, id: usize) -> bool {
        self.piece(id).is_some_and(|p| p.starts_with(CONTINUATION))
    }

    /// Ids that may stand in for a word piece during random replacement.
    pub fn ordinary_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special(i)).collect()
    }
}

/// Lowercases and splits on whitespace, emitting punctuation as its own word.
pub fn basic_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '#' && ch != '[' && ch != ']' {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Greedy longest-match segmentation of a single word. A word that cannot
/// be fully segmented maps to a single `[UNK]`.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Vec<usize> {
    if let Some(id) = vocab.id(word) {
        return vec![id];
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk_id()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut sub: String = chars[start..end].iter().collect();
            if start > 0 {
                sub.insert_str(0, CONTINUATION);
            }
            if let Some(id) = vocab.id(&sub) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    out
}

/// Tokenizes free text into word-piece ids.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    basic_words(text)
        .iter()
        .flat_map(|w| {
            if RESERVED.contains(&w.to_uppercase().as_str()) {
                vec![vocab.id(&w.to_uppercase()).unwrap_or(vocab.unk_id())]
            } else {
                wordpiece(w, vocab)
            }
        })
        .collect()
}

/// Maps piece strings (as stored in supervision files) to ids.
pub fn pieces_to_ids(pieces: &[String], vocab: &Vocabulary) -> Vec<usize> {
    pieces
        .iter()
        .map(|p| vocab.id(p).unwrap_or(vocab.unk_id()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_reserved(["adi", "##das", "was", "founded", "by", "adolf", "##d", "a", "."]).unwrap()
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab();
        let ids = tokenize("adidas", &v);
        assert_eq!(ids, vec![v.id("adi").unwrap(), v.id("##das").unwrap()]);
    }

    #[test]
    fn whole_word_single_id() {
        let v = vocab();
        assert_eq!(tokenize("Founded", &v), vec![v.id("founded").unwrap()]);
    }

    #[test]
    fn unknown_word_is_unk() {
        let v = vocab();
        assert_eq!(tokenize("zebra", &v), vec![v.unk_id()]);
        assert_eq!(tokenize("by zebra.", &v), vec![v.id("by").unwrap(), v.unk_id(), v.id(".").unwrap()]);
    }

    #[test]
    fn empty_text_is_empty() {
        assert!(tokenize("", &vocab()).is_empty());
    }

    #[test]
    fn reserved_tokens_required_once() {
        assert!(Vocabulary::from_pieces(vec!["a".into(), "b".into()]).is_err());
        let mut p: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        p.push(MASK.into());
        assert!(Vocabulary::from_pieces(p).is_err());
    }

    #[test]
    fn id_piece_round_trip() {
        let v = vocab();
        for id in 0..v.len() {
            assert_eq!(v.id(v.piece(id).unwrap()), Some(id));
        }
    }
}
