//! On-disk record formats and their conversion into model inputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Example, KbSet};
use crate::scalar::Scalar;
use crate::vocab::{self, Vocabulary};

/// One line of the unlabeled corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub sent_a: String,
    pub sent_b: String,
    pub is_next: bool,
}

/// One line of an entity-linking supervision (or gold) file. Spans are
/// inclusive piece offsets into `pieces`; a gold id equal to the knowledge
/// base's entity count, or `null`, denotes the NULL entity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElRecord {
    pub pieces: Vec<String>,
    pub spans: Vec<[usize; 2]>,
    pub gold: Vec<Option<usize>>,
}

/// Reads a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

/// Short SHA-256 digest of a value's JSON serialization.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Tokenizes and frames a sentence pair and runs every candidate selector.
pub fn corpus_example<S: Scalar>(rec: &CorpusRecord, vocab: &Vocabulary, kbs: &KbSet<S>, max_len: usize) -> Result<Example> {
    let a = vocab::tokenize(&rec.sent_a, vocab);
    let b = vocab::tokenize(&rec.sent_b, vocab);
    if a.is_empty() {
        return Err(Error::Invalid("empty first sentence".into()));
    }
    let mut ex = Example::frame(&a, (!b.is_empty()).then_some(b.as_slice()), vocab, max_len)?;
    ex.is_next = Some(rec.is_next);
    ex.select_candidates(kbs, vocab);
    Ok(ex)
}

/// Frames a supervision record as a single sentence and attaches gold
/// candidate indices for knowledge base `kb`. Gold spans the selector did
/// not propose, or whose gold entity is not among the candidates, stay
/// unsupervised.
pub fn supervised_example<S: Scalar>(rec: &ElRecord, vocab: &Vocabulary, kbs: &KbSet<S>, kb: &str, max_len: usize) -> Result<Example> {
    let base = kbs
        .get(kb)
        .ok_or_else(|| Error::Config(format!("no knowledge base named `{kb}`")))?;
    if rec.spans.len() != rec.gold.len() {
        return Err(Error::Invalid(format!(
            "{} spans but {} gold labels",
            rec.spans.len(),
            rec.gold.len()
        )));
    }
    let pieces = vocab::pieces_to_ids(&rec.pieces, vocab);
    let mut ex = Example::frame(&pieces, None, vocab, max_len)?;
    ex.select_candidates(kbs, vocab);
    let list = &ex.candidates[kb];
    let mut gold = vec![None; list.len()];
    for (&[s, e], g) in rec.spans.iter().zip(&rec.gold) {
        if s > e || e >= rec.pieces.len() {
            return Err(Error::OutOfRange {
                what: "supervised span",
                index: e,
                limit: rec.pieces.len(),
            });
        }
        let entity = g.unwrap_or(base.null_id());
        if entity > base.null_id() {
            return Err(Error::UnknownEntity {
                kb: kb.to_string(),
                id: entity,
            });
        }
        if let Some(m) = list.spans.iter().position(|sp| sp.start == s + 1 && sp.end == e + 1) {
            gold[m] = list.spans[m].position_of(entity);
        }
    }
    ex.gold.insert(kb.to_string(), gold);
    Ok(ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{Candidate, CandidateDictionary, KnowledgeBase};
    use crate::tensor::Tensor2;

    fn setup() -> (Vocabulary, KbSet<f64>) {
        let vocab = Vocabulary::with_reserved(["mercury", "orbits", "the", "sun"]).unwrap();
        let mut dict = CandidateDictionary::new();
        dict.insert(
            "mercury",
            vec![Candidate { entity: 0, prior: 0.5 }, Candidate { entity: 1, prior: 0.4 }],
            2,
        )
        .unwrap();
        let kb = KnowledgeBase::new("w", vec!["planet".into(), "element".into()], Tensor2::zeros(2, 2), dict).unwrap();
        let mut kbs = KbSet::new();
        kbs.insert("w".into(), kb);
        (vocab, kbs)
    }

    #[test]
    fn gold_maps_to_candidate_index() {
        let (v, kbs) = setup();
        let rec = ElRecord {
            pieces: vec!["mercury".into(), "orbits".into(), "the".into(), "sun".into()],
            spans: vec![[0, 0]],
            gold: vec![Some(1)],
        };
        let ex = supervised_example(&rec, &v, &kbs, "w", 16).unwrap();
        assert_eq!(ex.gold["w"], vec![Some(1)]);
        let null_rec = ElRecord {
            gold: vec![None],
            ..rec.clone()
        };
        let ex = supervised_example(&null_rec, &v, &kbs, "w", 16).unwrap();
        assert_eq!(ex.gold["w"], vec![Some(2)]);
        let bad = ElRecord {
            gold: vec![Some(7)],
            ..rec
        };
        assert!(matches!(supervised_example(&bad, &v, &kbs, "w", 16), Err(Error::UnknownEntity { .. })));
    }

    #[test]
    fn overlength_is_an_error() {
        let (v, kbs) = setup();
        let rec = CorpusRecord {
            sent_a: "the sun the sun the sun".into(),
            sent_b: "the sun".into(),
            is_next: true,
        };
        assert!(matches!(corpus_example(&rec, &v, &kbs, 8), Err(Error::Overlength { len: 11, max: 8 })));
    }
}
