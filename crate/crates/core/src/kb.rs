//! Knowledge bases: entity tables with frozen embeddings and a
//! dictionary-driven candidate selector.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;
use crate::vocab::{Vocabulary, CONTINUATION};

/// Candidates kept per mention span, before NULL padding.
pub const MAX_CANDIDATES: usize = 30;
/// Slack allowed on the per-mention prior sum.
pub const PRIOR_SUM_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: usize,
    pub prior: f64,
}

/// One candidate mention: inclusive word-piece range plus its candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub candidates: Vec<Candidate>,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, position: usize) -> bool {
        self.start <= position && position <= self.end
    }

    pub fn position_of(&self, entity: usize) -> Option<usize> {
        self.candidates.iter().position(|c| c.entity == entity)
    }
}

/// Output of candidate selection for one sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub spans: Vec<Span>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_candidates(&self) -> usize {
        self.spans.iter().map(|s| s.candidates.len()).sum()
    }

    /// Shifts every span by `offset` word pieces.
    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            spans: self
                .spans
                .iter()
                .map(|s| Span {
                    start: s.start + offset,
                    end: s.end + offset,
                    candidates: s.candidates.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self, seq_len: usize, entity_rows: usize) -> Result<()> {
        for s in &self.spans {
            if s.start > s.end || s.end >= seq_len {
                return Err(Error::OutOfRange {
                    what: "candidate span",
                    index: s.end,
                    limit: seq_len,
                });
            }
            if s.candidates.is_empty() {
                return Err(Error::Invalid(format!("span {}..={} has no candidates", s.start, s.end)));
            }
            for c in &s.candidates {
                if c.entity >= entity_rows {
                    return Err(Error::OutOfRange {
                        what: "candidate entity",
                        index: c.entity,
                        limit: entity_rows,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Normalized mention surface → candidates sorted by descending prior.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateDictionary {
    entries: HashMap<String, Vec<Candidate>>,
}

impl CandidateDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates priors, sorts by descending prior (ties by entity id) and
    /// truncates to [`MAX_CANDIDATES`].
    pub fn insert(&mut self, mention: &str, mut candidates: Vec<Candidate>, entity_count: usize) -> Result<()> {
        let key = mention.to_lowercase();
        if self.entries.contains_key(&key) {
            return Err(Error::Invalid(format!("duplicate mention `{mention}`")));
        }
        let mut sum = 0.0;
        for c in &candidates {
            if !(0.0..=1.0).contains(&c.prior) {
                return Err(Error::Invalid(format!("prior {} out of [0, 1] for `{mention}`", c.prior)));
            }
            if c.entity >= entity_count {
                return Err(Error::Invalid(format!("entity id {} >= {} for `{mention}`", c.entity, entity_count)));
            }
            sum += c.prior;
        }
        if sum > 1.0 + PRIOR_SUM_SLACK {
            return Err(Error::Invalid(format!("priors for `{mention}` sum to {sum} > 1")));
        }
        candidates.sort_by(|a, b| b.prior.total_cmp(&a.prior).then(a.entity.cmp(&b.entity)));
        candidates.truncate(MAX_CANDIDATES);
        self.entries.insert(key, candidates);
        Ok(())
    }

    pub fn get(&self, surface: &str) -> Option<&[Candidate]> {
        self.entries.get(surface).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Candidate])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Word-level surface → lemma rewrites applied before dictionary lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LemmaRules {
    rules: HashMap<String, String>,
}

impl LemmaRules {
    pub fn insert(&mut self, surface: &str, lemma: &str) {
        self.rules.insert(surface.to_lowercase(), lemma.to_lowercase());
    }

    pub fn lemma<'a>(&'a self, word: &'a str) -> &'a str {
        self.rules.get(word).map_or(word, String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// Longest mention considered, in word pieces.
    pub max_mention_len: usize,
    /// Append the NULL entity to every candidate list.
    pub null_padding: bool,
    /// Lower bound on the NULL prior `1 - Σ priors`.
    pub null_prior_floor: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            max_mention_len: 5,
            null_padding: true,
            null_prior_floor: 0.01,
        }
    }
}

/// A fixed collection of `K` entities with frozen embeddings.
///
/// Entity ids are dense `0..K`; `K` is the NULL entity and `K + 1` the MASK
/// entity. Their embedding rows are trainable and live with the model
/// parameters, not in this table.
#[derive(Clone, Debug)]
pub struct KnowledgeBase<S> {
    name: String,
    names: Vec<String>,
    embeddings: Tensor2<S>,
    dictionary: CandidateDictionary,
    lemmas: LemmaRules,
    pub selector: SelectorConfig,
}

#[derive(Deserialize)]
struct EntityRecord {
    id: usize,
    name: String,
}

#[derive(Deserialize)]
struct DictionaryRecord {
    mention: String,
    candidates: Vec<(usize, f64)>,
}

#[derive(Deserialize)]
struct LemmaRecord {
    surface: String,
    lemma: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

impl<S: Scalar> KnowledgeBase<S> {
    pub fn new(name: impl Into<String>, names: Vec<String>, embeddings: Tensor2<S>, dictionary: CandidateDictionary) -> Result<Self> {
        let name = name.into();
        if embeddings.rows() != names.len() {
            return Err(Error::Invalid(format!(
                "knowledge base `{name}`: {} entity names but {} embedding rows",
                names.len(),
                embeddings.rows()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::Invalid(format!("knowledge base `{name}`: non-finite embedding")));
        }
        for (_, cands) in dictionary.iter() {
            if let Some(c) = cands.iter().find(|c| c.entity >= names.len()) {
                return Err(Error::UnknownEntity { kb: name, id: c.entity });
            }
        }
        Ok(Self {
            name,
            names,
            embeddings,
            dictionary,
            lemmas: LemmaRules::default(),
            selector: SelectorConfig::default(),
        })
    }

    pub fn with_lemmas(mut self, lemmas: LemmaRules) -> Self {
        self.lemmas = lemmas;
        self
    }

    pub fn with_selector(mut self, selector: SelectorConfig) -> Self {
        self.selector = selector;
        self
    }

    /// Loads and validates the three (optionally four) knowledge-base files.
    pub fn load(
        name: impl Into<String>,
        entity_file: impl AsRef<Path>,
        embedding_file: impl AsRef<Path>,
        dictionary_file: impl AsRef<Path>,
        lemma_file: Option<&Path>,
    ) -> Result<Self> {
        let entity_file = entity_file.as_ref();
        let embedding_file = embedding_file.as_ref();
        let dictionary_file = dictionary_file.as_ref();

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (line, text) in jsonl_lines(&read(entity_file)?) {
            let rec: EntityRecord =
                serde_json::from_str(text).map_err(|e| Error::parse(entity_file, line, e.to_string()))?;
            if !seen.insert(rec.id) {
                return Err(Error::parse(entity_file, line, format!("duplicate entity id {}", rec.id)));
            }
            records.push((line, rec));
        }
        let count = records.len();
        let mut names = vec![String::new(); count];
        for (line, rec) in records {
            if rec.id >= count {
                return Err(Error::parse(
                    entity_file,
                    line,
                    format!("entity id {} not in dense range 0..{count}", rec.id),
                ));
            }
            names[rec.id] = rec.name;
        }

        let emb_text = read(embedding_file)?;
        let mut lines = emb_text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(embedding_file, 1, "missing `K E` header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(embedding_file, 1, format!("bad header: {e}")))?;
        let [k, e] = dims[..] else {
            return Err(Error::parse(embedding_file, 1, "header must be `K E`"));
        };
        if k != count {
            return Err(Error::parse(
                embedding_file,
                1,
                format!("header declares {k} entities, entity file has {count}"),
            ));
        }
        let mut data = Vec::with_capacity(k * e);
        let mut rows = 0;
        for (line, text) in lines {
            if text.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|err| Error::parse(embedding_file, line, format!("bad number: {err}")))?;
            if vals.len() != e {
                return Err(Error::parse(
                    embedding_file,
                    line,
                    format!("expected {e} values, found {}", vals.len()),
                ));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(embedding_file, line, "non-finite value"));
            }
            data.extend(vals.into_iter().map(S::lit));
            rows += 1;
        }
        if rows != k {
            return Err(Error::parse(
                embedding_file,
                rows + 1,
                format!("expected {k} embedding rows, found {rows}"),
            ));
        }
        let embeddings = Tensor2::from_vec(k, e, data)?;

        let mut dictionary = CandidateDictionary::new();
        for (line, text) in jsonl_lines(&read(dictionary_file)?) {
            let rec: DictionaryRecord =
                serde_json::from_str(text).map_err(|e| Error::parse(dictionary_file, line, e.to_string()))?;
            let cands = rec
                .candidates
                .into_iter()
                .map(|(entity, prior)| Candidate { entity, prior })
                .collect();
            dictionary
                .insert(&rec.mention, cands, count)
                .map_err(|e| Error::parse(dictionary_file, line, e.to_string()))?;
        }

        let mut lemmas = LemmaRules::default();
        if let Some(lemma_file) = lemma_file {
            for (line, text) in jsonl_lines(&read(lemma_file)?) {
                let rec: LemmaRecord =
                    serde_json::from_str(text).map_err(|e| Error::parse(lemma_file, line, e.to_string()))?;
                lemmas.insert(&rec.surface, &rec.lemma);
            }
        }

        Ok(Self::new(name, names, embeddings, dictionary)?.with_lemmas(lemmas))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of real entities `K`.
    pub fn entity_count(&self) -> usize {
        self.names.len()
    }

    pub fn null_id(&self) -> usize {
        self.names.len()
    }

    pub fn mask_id(&self) -> usize {
        self.names.len() + 1
    }

    /// Rows of the full entity table including the NULL and MASK rows.
    pub fn table_shape(&self) -> (usize, usize) {
        (self.names.len() + 2, self.embedding_dim())
    }

    /// Width of the stored (frozen) embeddings.
    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor2<S> {
        &self.embeddings
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        if id == self.null_id() {
            Some("NULL")
        } else if id == self.mask_id() {
            Some("MASK")
        } else {
            self.names.get(id).map(String::as_str)
        }
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id == self.null_id() || id == self.mask_id()
    }

    pub fn dictionary(&self) -> &CandidateDictionary {
        &self.dictionary
    }

    /// Frozen embedding row of a real entity.
    pub fn embedding(&self, id: usize) -> Result<&[S]> {
        if id >= self.entity_count() {
            return Err(Error::UnknownEntity {
                kb: self.name.clone(),
                id,
            });
        }
        Ok(self.embeddings.row(id))
    }

    fn normalize_word(&self, word: &str) -> String {
        let lower = word.to_lowercase();
        self.lemmas.lemma(&lower).to_string()
    }

    /// Candidate list (with NULL padding when configured) for a surface form.
    pub fn lookup(&self, words: &[String]) -> Option<Vec<Candidate>> {
        let raw = words.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ");
        let lemma = words
            .iter()
            .map(|w| self.normalize_word(w))
            .collect::<Vec<_>>()
            .join(" ");
        let found = self.dictionary.get(&lemma).or_else(|| self.dictionary.get(&raw))?;
        let mut cands = found.to_vec();
        if self.selector.null_padding {
            let mass: f64 = cands.iter().map(|c| c.prior).sum();
            cands.push(Candidate {
                entity: self.null_id(),
                prior: (1.0 - mass).max(self.selector.null_prior_floor),
            });
        }
        Some(cands)
    }

    /// Scans contiguous whole-word n-grams of at most
    /// `selector.max_mention_len` pieces and returns every dictionary hit.
    /// Spans never contain special tokens. Overlapping spans are kept.
    pub fn select_candidates(&self, pieces: &[usize], vocab: &Vocabulary) -> CandidateList {
        let mut spans = Vec::new();
        let n = pieces.len();
        let usable = |i: usize| !vocab.is_special(pieces[i]);
        let word_start = |i: usize| usable(i) && !vocab.is_continuation(pieces[i]);
        let word_end = |i: usize| i + 1 >= n || !vocab.is_continuation(pieces[i + 1]);
        for start in 0..n {
            if !word_start(start) {
                continue;
            }
            let mut words: Vec<String> = Vec::new();
            for end in start..n.min(start + self.selector.max_mention_len) {
                if !usable(end) {
                    break;
                }
                let piece = vocab.piece(pieces[end]).unwrap_or_default();
                match piece.strip_prefix(CONTINUATION) {
                    Some(rest) if !words.is_empty() => words.last_mut().expect("non-empty").push_str(rest),
                    _ => words.push(piece.to_string()),
                }
                if !word_end(end) {
                    continue;
                }
                if let Some(candidates) = self.lookup(&words) {
                    spans.push(Span { start, end, candidates });
                }
            }
        }
        CandidateList { spans }
    }
}

/// Standard file names of a knowledge base stored in one directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbPaths {
    pub entities: std::path::PathBuf,
    pub embeddings: std::path::PathBuf,
    pub dictionary: std::path::PathBuf,
    pub lemmas: Option<std::path::PathBuf>,
}

impl KbPaths {
    /// `entities.jsonl`, `embeddings.txt`, `dictionary.jsonl` and, when
    /// present, `lemmas.jsonl` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let lemmas = dir.join("lemmas.jsonl");
        Self {
            entities: dir.join("entities.jsonl"),
            embeddings: dir.join("embeddings.txt"),
            dictionary: dir.join("dictionary.jsonl"),
            lemmas: lemmas.exists().then_some(lemmas),
        }
    }
}

#[derive(Serialize)]
struct EntityOut<'a> {
    id: usize,
    name: &'a str,
}

#[derive(Serialize)]
struct DictionaryOut<'a> {
    mention: &'a str,
    candidates: Vec<(usize, f64)>,
}

impl<S: Scalar> KnowledgeBase<S> {
    pub fn load_paths(name: impl Into<String>, paths: &KbPaths) -> Result<Self> {
        Self::load(name, &paths.entities, &paths.embeddings, &paths.dictionary, paths.lemmas.as_deref())
    }

    /// Writes the files read by [`KnowledgeBase::load`]. Dictionary lines
    /// are sorted by mention so the output is byte-stable.
    pub fn save(&self, paths: &KbPaths) -> Result<()> {
        let mut ents = String::new();
        for (id, name) in self.names.iter().enumerate() {
            ents.push_str(&serde_json::to_string(&EntityOut { id, name })?);
            ents.push('\n');
        }
        fs::write(&paths.entities, ents).map_err(|e| Error::io(&paths.entities, e))?;

        let mut emb = format!("{} {}\n", self.embeddings.rows(), self.embeddings.cols());
        for r in 0..self.embeddings.rows() {
            let row: Vec<String> = self.embeddings.row(r).iter().map(|v| format!("{}", v.to_f64_lossy())).collect();
            emb.push_str(&row.join(" "));
            emb.push('\n');
        }
        fs::write(&paths.embeddings, emb).map_err(|e| Error::io(&paths.embeddings, e))?;

        let mut entries: Vec<_> = self.dictionary.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut dict = String::new();
        for (mention, cands) in entries {
            let rec = DictionaryOut {
                mention,
                candidates: cands.iter().map(|c| (c.entity, c.prior)).collect(),
            };
            dict.push_str(&serde_json::to_string(&rec)?);
            dict.push('\n');
        }
        fs::write(&paths.dictionary, dict).map_err(|e| Error::io(&paths.dictionary, e))?;

        if let Some(path) = &paths.lemmas {
            let mut rules: Vec<_> = self.lemmas.rules.iter().collect();
            rules.sort();
            let mut out = String::new();
            for (surface, lemma) in rules {
                out.push_str(&serde_json::to_string(&serde_json::json!({"surface": surface, "lemma": lemma}))?);
                out.push('\n');
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
