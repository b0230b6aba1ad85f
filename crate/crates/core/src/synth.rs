//! Synthetic benchmarks: a fact-recall set whose held-out objects are only
//! recoverable through the knowledge base, and a separable sense-linking set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, CorpusRecord, ElRecord};
use crate::error::{Error, Result};
use crate::eval::{ProbeTuple, RestrictedInstance};
use crate::kb::{Candidate, CandidateDictionary, KbPaths, KnowledgeBase};
use crate::seed;
use crate::tensor::Tensor2;
use crate::vocab::{self, Vocabulary, CONTINUATION};

/// Relation names and their verbalizations.
pub const RELATIONS: [(&str, &str); 20] = [
    ("born_in", "SUBJ was born in OBJ ."),
    ("works_for", "SUBJ works for OBJ ."),
    ("citizen_of", "SUBJ is a citizen of OBJ ."),
    ("plays", "SUBJ plays the OBJ ."),
    ("speaks", "SUBJ speaks OBJ ."),
    ("studied_at", "SUBJ studied at OBJ ."),
    ("died_in", "SUBJ died in OBJ ."),
    ("married_to", "SUBJ is married to OBJ ."),
    ("founded_by", "SUBJ was founded by OBJ ."),
    ("located_in", "SUBJ is located in OBJ ."),
    ("belongs_to", "SUBJ belongs to OBJ ."),
    ("owned_by", "SUBJ is owned by OBJ ."),
    ("written_by", "SUBJ was written by OBJ ."),
    ("capital_of", "SUBJ is the capital of OBJ ."),
    ("follows", "SUBJ follows OBJ ."),
    ("named_after", "SUBJ is named after OBJ ."),
    ("member_of", "SUBJ is a member of OBJ ."),
    ("created_by", "SUBJ was created by OBJ ."),
    ("lives_near", "SUBJ lives near OBJ ."),
    ("borders", "SUBJ shares a border with OBJ ."),
];

/// Second sentence of every corpus pair.
pub const NEXT_TEMPLATE: &str = "SUBJ is well known .";

const SUBJECT_CONSONANTS: [char; 10] = ['b', 'k', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const OBJECT_ONSETS: [char; 5] = ['d', 'g', 'l', 'f', 'h'];
const CODAS: [char; 9] = ['d', 'g', 'l', 'f', 'h', 'n', 'r', 's', 't'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactsConfig {
    pub seed: u64,
    /// One fact per subject.
    pub facts: usize,
    /// Facts whose subject never appears in the corpus.
    pub held_out: usize,
    pub relations: usize,
    pub objects: usize,
    /// Copies of each training fact in the corpus.
    pub multiplicity: usize,
    pub dim: usize,
    /// Standard deviation of the noise added to a subject's object code.
    pub noise: f64,
}

impl Default for FactsConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            facts: 500,
            held_out: 100,
            relations: 20,
            objects: 50,
            multiplicity: 4,
            dim: 16,
            noise: 0.1,
        }
    }
}

impl FactsConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.relations == 0 || self.relations > RELATIONS.len() {
            return fail(format!("relations must be in 1..={}", RELATIONS.len()));
        }
        if self.held_out >= self.facts {
            return fail(format!("held_out {} must be below facts {}", self.held_out, self.facts));
        }
        if self.facts < self.relations {
            return fail(format!("{} facts cannot cover {} relations", self.facts, self.relations));
        }
        if self.objects < 2 || self.objects > 120 {
            return fail("objects must be in 2..=120".into());
        }
        if self.facts > 20_000 {
            return fail("at most 20000 facts".into());
        }
        if self.multiplicity == 0 || self.dim == 0 || !(self.noise >= 0.0) {
            return fail("multiplicity and dim must be positive and noise non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub held_out: bool,
}

/// The generated benchmark in memory.
#[derive(Clone, Debug)]
pub struct FactsBenchmark {
    pub config: FactsConfig,
    pub vocab: Vocabulary,
    pub kb: KnowledgeBase<f64>,
    pub subjects: Vec<String>,
    pub objects: Vec<String>,
    pub facts: Vec<Fact>,
    /// Training sentences (held-out subjects never occur).
    pub corpus: Vec<CorpusRecord>,
    /// Sentence pairs about held-out facts, for perplexity.
    pub eval_corpus: Vec<CorpusRecord>,
    /// Entity-linking supervision over training sentences.
    pub supervision: Vec<ElRecord>,
    /// Held-out facts as probe tuples.
    pub probes: Vec<ProbeTuple>,
    /// Training facts as probe tuples.
    pub train_probes: Vec<ProbeTuple>,
}

fn subject_name<R: Rng + ?Sized>(rng: &mut R) -> (String, Vec<String>) {
    let n = rng.random_range(2..=3);
    let mut word = String::new();
    let mut pieces = Vec::new();
    for i in 0..n {
        let syl: String = [*SUBJECT_CONSONANTS.choose(rng).unwrap(), *VOWELS.choose(rng).unwrap()].iter().collect();
        word.push_str(&syl);
        pieces.push(if i == 0 { syl } else { format!("{CONTINUATION}{syl}") });
    }
    (word, pieces)
}

fn cvc<R: Rng + ?Sized>(rng: &mut R) -> String {
    [*OBJECT_ONSETS.choose(rng).unwrap(), *VOWELS.choose(rng).unwrap(), *CODAS.choose(rng).unwrap()]
        .iter()
        .collect()
}

/// Object names: about half a single piece, half two pieces, with every
/// piece distinct across objects.
fn object_names<R: Rng + ?Sized>(count: usize, reserved: &BTreeSet<String>, rng: &mut R) -> Vec<(String, Vec<String>)> {
    let mut used: BTreeSet<String> = reserved.clone();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let first = cvc(rng);
        if used.contains(&first) {
            continue;
        }
        if out.len() % 2 == 0 {
            used.insert(first.clone());
            out.push((first.clone(), vec![first]));
        } else {
            let second = cvc(rng);
            let cont = format!("{CONTINUATION}{second}");
            if used.contains(&cont) {
                continue;
            }
            used.insert(first.clone());
            used.insert(cont.clone());
            out.push((format!("{first}{second}"), vec![first, cont]));
        }
    }
    out
}

fn template_words(relations: usize) -> BTreeSet<String> {
    RELATIONS[..relations]
        .iter()
        .map(|r| r.1)
        .chain([NEXT_TEMPLATE])
        .flat_map(|t| vocab::basic_words(&t.replace("SUBJ", " ").replace("OBJ", " ")))
        .collect()
}

fn fill(template: &str, subject: &str, object: &str) -> String {
    template.replace("SUBJ", subject).replace("OBJ", object)
}

fn piece_strings(text: &str, v: &Vocabulary) -> Vec<String> {
    vocab::tokenize(text, v)
        .into_iter()
        .map(|id| v.piece(id).unwrap_or(vocab::UNK).to_string())
        .collect()
}

fn find_run(hay: &[String], needle: &[String]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

impl FactsBenchmark {
    pub fn generate(config: &FactsConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, "synth.facts", 0);
        let words = template_words(config.relations);

        let objects = object_names(config.objects, &words, &mut rng);
        let mut subjects: Vec<(String, Vec<String>)> = Vec::with_capacity(config.facts);
        let mut taken = BTreeSet::new();
        while subjects.len() < config.facts {
            let (name, pieces) = subject_name(&mut rng);
            if words.contains(&name) || words.contains(&pieces[0]) || !taken.insert(name.clone()) {
                continue;
            }
            subjects.push((name, pieces));
        }

        let mut pieces: BTreeSet<String> = words.clone();
        for (_, p) in subjects.iter().chain(&objects) {
            pieces.extend(p.iter().cloned());
        }
        let vocab = Vocabulary::with_reserved(pieces)?;

        // Objects are entities 0..O, subjects O..O+F.
        let codes = Tensor2::<f64>::random_normal(config.objects, config.dim, 1.0, &mut rng);
        let mut held: Vec<bool> = (0..config.facts).map(|i| i < config.held_out).collect();
        held.shuffle(&mut rng);
        let facts: Vec<Fact> = (0..config.facts)
            .map(|i| Fact {
                subject: i,
                relation: i % config.relations,
                object: rng.random_range(0..config.objects),
                held_out: held[i],
            })
            .collect();

        let k = config.objects + config.facts;
        let mut emb = Tensor2::<f64>::zeros(k, config.dim);
        for o in 0..config.objects {
            emb.row_mut(o).copy_from_slice(codes.row(o));
        }
        let noise = Tensor2::<f64>::random_normal(config.facts, config.dim, config.noise, &mut rng);
        for f in &facts {
            let row = emb.row_mut(config.objects + f.subject);
            for ((r, c), n) in row.iter_mut().zip(codes.row(f.object)).zip(noise.row(f.subject)) {
                *r = c + n;
            }
        }
        let mut names: Vec<String> = objects.iter().map(|o| o.0.clone()).collect();
        names.extend(subjects.iter().map(|s| s.0.clone()));
        let mut dict = CandidateDictionary::new();
        for (id, name) in names.iter().enumerate() {
            dict.insert(name, vec![Candidate { entity: id, prior: 1.0 }], k)?;
        }
        let kb = KnowledgeBase::new("facts", names, emb, dict)?;

        let subject_of = |f: &Fact| subjects[f.subject].0.as_str();
        let object_of = |f: &Fact| objects[f.object].0.as_str();
        let tuple = |f: &Fact| ProbeTuple {
            relation: RELATIONS[f.relation].0.to_string(),
            template: RELATIONS[f.relation].1.to_string(),
            subject: subject_of(f).to_string(),
            object: object_of(f).to_string(),
        };
        let train: Vec<&Fact> = facts.iter().filter(|f| !f.held_out).collect();
        let test: Vec<&Fact> = facts.iter().filter(|f| f.held_out).collect();

        let pair = |f: &Fact, pool: &[&Fact], rng: &mut seed::Rng| {
            let is_next = rng.random_bool(0.5);
            let other = if is_next {
                f
            } else {
                loop {
                    let o = *pool.choose(rng).expect("nonempty pool");
                    if o.subject != f.subject || pool.len() == 1 {
                        break o;
                    }
                }
            };
            CorpusRecord {
                sent_a: fill(RELATIONS[f.relation].1, subject_of(f), object_of(f)),
                sent_b: fill(NEXT_TEMPLATE, subject_of(other), ""),
                is_next,
            }
        };
        let mut corpus = Vec::with_capacity(train.len() * config.multiplicity);
        for _ in 0..config.multiplicity {
            for f in &train {
                corpus.push(pair(f, &train, &mut rng));
            }
        }
        corpus.shuffle(&mut rng);
        let eval_corpus: Vec<CorpusRecord> = test.iter().map(|f| pair(f, &test, &mut rng)).collect();

        let mut supervision = Vec::with_capacity(train.len());
        for f in &train {
            let sentence = fill(RELATIONS[f.relation].1, subject_of(f), object_of(f));
            let ps = piece_strings(&sentence, &vocab);
            let mut spans = Vec::new();
            let mut gold = Vec::new();
            for (surface, entity) in [(subject_of(f), config.objects + f.subject), (object_of(f), f.object)] {
                let needle = piece_strings(surface, &vocab);
                let start = find_run(&ps, &needle).ok_or_else(|| Error::Invalid(format!("`{surface}` not found in `{sentence}`")))?;
                spans.push([start, start + needle.len() - 1]);
                gold.push(Some(entity));
            }
            supervision.push(ElRecord { pieces: ps, spans, gold });
        }

        let bench = Self {
            config: config.clone(),
            vocab,
            kb,
            subjects: subjects.iter().map(|s| s.0.clone()).collect(),
            objects: objects.iter().map(|o| o.0.clone()).collect(),
            probes: test.iter().map(|f| tuple(f)).collect(),
            train_probes: train.iter().map(|f| tuple(f)).collect(),
            facts,
            corpus,
            eval_corpus,
            supervision,
        };
        for t in bench.probes.iter().chain(&bench.train_probes) {
            t.validate(&bench.vocab)?;
        }
        Ok(bench)
    }

    /// Held-out subjects that appear anywhere in the training corpus or
    /// supervision (always empty by construction).
    pub fn leaked_subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        for r in &self.corpus {
            seen.extend(vocab::basic_words(&r.sent_a));
            seen.extend(vocab::basic_words(&r.sent_b));
        }
        for r in &self.supervision {
            let text: String = r.pieces.iter().map(|p| p.strip_prefix(CONTINUATION).map_or(format!(" {p}"), str::to_string)).collect();
            seen.extend(vocab::basic_words(&text));
        }
        self.probes.iter().filter(|p| seen.contains(&p.subject)).map(|p| p.subject.clone()).collect()
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "benchmark": "facts",
            "seed": self.config.seed,
            "config": self.config,
            "sizes": {
                "entities": self.kb.entity_count(),
                "facts": self.facts.len(),
                "relations": self.config.relations,
                "objects": self.objects.len(),
                "held_out": self.probes.len(),
                "corpus": self.corpus.len(),
                "eval_corpus": self.eval_corpus.len(),
                "supervision": self.supervision.len(),
                "vocab": self.vocab.len(),
            },
            "files": {
                "vocab": "vocab.txt",
                "kb": "kb",
                "corpus": "corpus.jsonl",
                "eval_corpus": "eval_corpus.jsonl",
                "supervision": "supervision.jsonl",
                "probes": "probes.jsonl",
                "train_probes": "train_probes.jsonl",
                "facts": "facts.jsonl",
            },
        })
    }

    /// Writes every artifact under `dir`, creating it when missing.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let kb_dir = dir.join("kb");
        fs::create_dir_all(&kb_dir).map_err(|e| Error::io(&kb_dir, e))?;
        self.vocab.save(dir.join("vocab.txt"))?;
        self.kb.save(&KbPaths {
            lemmas: None,
            ..KbPaths::in_dir(&kb_dir)
        })?;
        data::write_jsonl(dir.join("corpus.jsonl"), &self.corpus)?;
        data::write_jsonl(dir.join("eval_corpus.jsonl"), &self.eval_corpus)?;
        data::write_jsonl(dir.join("supervision.jsonl"), &self.supervision)?;
        data::write_jsonl(dir.join("probes.jsonl"), &self.probes)?;
        data::write_jsonl(dir.join("train_probes.jsonl"), &self.train_probes)?;
        data::write_jsonl(dir.join("facts.jsonl"), &self.facts)?;
        data::write_json(dir.join("manifest.json"), &self.manifest())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensesConfig {
    pub seed: u64,
    /// Ambiguous mention words.
    pub mentions: usize,
    /// Senses per ambiguous mention.
    pub senses: usize,
    /// Unambiguous cue words per sense.
    pub cues: usize,
    pub train: usize,
    pub test: usize,
    /// Fraction of sentences without a cue, whose gold is the top-prior sense.
    pub uncued: f64,
    pub dim: usize,
}

impl Default for SensesConfig {
    fn default() -> Self {
        Self {
            seed: 29,
            mentions: 12,
            senses: 3,
            cues: 2,
            train: 1500,
            test: 300,
            uncued: 0.1,
            dim: 16,
        }
    }
}

impl SensesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mentions == 0 || self.senses < 2 || self.cues == 0 || self.train == 0 || self.test == 0 {
            return Err(Error::Config("senses benchmark sizes must be positive (senses >= 2)".into()));
        }
        if self.mentions * self.senses * self.cues > 900 || !(0.0..=1.0).contains(&self.uncued) || self.dim == 0 {
            return Err(Error::Config("senses benchmark too large or invalid".into()));
        }
        Ok(())
    }
}

const FILLERS: [&str; 24] = [
    "the", "a", "one", "that", "we", "they", "saw", "found", "near", "with", "today", "again", "old", "new", "small",
    "large", "quiet", "busy", "here", "there", "then", "later", "often", "once",
];

/// Ambiguous mentions with several senses each. Every sense owns cue words
/// that are themselves unambiguous knowledge-base mentions, so the correct
/// sense is determined by which cue co-occurs.
#[derive(Clone, Debug)]
pub struct SensesBenchmark {
    pub config: SensesConfig,
    pub vocab: Vocabulary,
    pub kb: KnowledgeBase<f64>,
    pub train: Vec<ElRecord>,
    pub test: Vec<ElRecord>,
    /// The ambiguous spans of `test`, restricted to the mention's senses.
    pub test_instances: Vec<RestrictedInstance>,
}

impl SensesBenchmark {
    pub fn generate(config: &SensesConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, "synth.senses", 0);
        let sense_count = config.mentions * config.senses;
        let cue_count = sense_count * config.cues;
        // Entities: senses first, then cues.
        let mentions: Vec<String> = (0..config.mentions).map(|i| format!("zork{}", letters(i))).collect();
        let cues: Vec<String> = (0..cue_count).map(|i| format!("qix{}", letters(i))).collect();
        let mut names = Vec::with_capacity(sense_count + cue_count);
        for m in &mentions {
            for s in 0..config.senses {
                names.push(format!("{m}_{s}"));
            }
        }
        names.extend(cues.iter().cloned());
        let k = names.len();
        let emb = Tensor2::<f64>::random_normal(k, config.dim, 1.0, &mut rng);
        let mut dict = CandidateDictionary::new();
        // Priors decrease with sense index, leaving mass for NULL.
        let weights: Vec<f64> = (0..config.senses).map(|s| 1.0 / (s as f64 + 2.0)).collect();
        let total: f64 = weights.iter().sum::<f64>() / 0.95;
        for (m, word) in mentions.iter().enumerate() {
            let cands = (0..config.senses)
                .map(|s| Candidate {
                    entity: m * config.senses + s,
                    prior: weights[s] / total,
                })
                .collect();
            dict.insert(word, cands, k)?;
        }
        for (c, word) in cues.iter().enumerate() {
            dict.insert(word, vec![Candidate { entity: sense_count + c, prior: 1.0 }], k)?;
        }
        let kb = KnowledgeBase::new("senses", names, emb, dict)?;

        let mut pieces: BTreeSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
        pieces.insert(".".into());
        pieces.extend(mentions.iter().cloned());
        pieces.extend(cues.iter().cloned());
        let vocab = Vocabulary::with_reserved(pieces)?;

        let sentence = |rng: &mut seed::Rng| -> ElRecord {
            let m = rng.random_range(0..config.mentions);
            let cued = !rng.random_bool(config.uncued);
            let sense = if cued { rng.random_range(0..config.senses) } else { 0 };
            let entity = m * config.senses + sense;
            let mut words: Vec<(String, Option<usize>)> = (0..rng.random_range(2..=4))
                .map(|_| (FILLERS.choose(rng).unwrap().to_string(), None))
                .collect();
            let mut linked = vec![(mentions[m].clone(), Some(entity))];
            if cued {
                let c = entity * config.cues + rng.random_range(0..config.cues);
                linked.push((cues[c].clone(), Some(sense_count + c)));
            }
            for w in linked {
                let at = rng.random_range(0..=words.len());
                words.insert(at, w);
            }
            let mut record = ElRecord {
                pieces: Vec::with_capacity(words.len() + 1),
                spans: Vec::new(),
                gold: Vec::new(),
            };
            for (i, (w, id)) in words.into_iter().enumerate() {
                if id.is_some() {
                    record.spans.push([i, i]);
                    record.gold.push(id);
                }
                record.pieces.push(w);
            }
            record.pieces.push(".".into());
            record
        };
        let train: Vec<ElRecord> = (0..config.train).map(|_| sentence(&mut rng)).collect();
        let test: Vec<ElRecord> = (0..config.test).map(|_| sentence(&mut rng)).collect();
        let mut test_instances = Vec::new();
        for r in &test {
            for (&span, g) in r.spans.iter().zip(&r.gold) {
                let g = g.expect("synthetic gold is never NULL");
                if g < sense_count {
                    let m = g / config.senses;
                    test_instances.push(RestrictedInstance {
                        pieces: r.pieces.clone(),
                        span,
                        allowed: (m * config.senses..(m + 1) * config.senses).collect(),
                        gold: g,
                    });
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            vocab,
            kb,
            train,
            test,
            test_instances,
        })
    }

    /// Unlabeled single-sentence corpus built from the training sentences.
    pub fn corpus(&self) -> Vec<CorpusRecord> {
        self.train
            .iter()
            .map(|r| CorpusRecord {
                sent_a: r.pieces.join(" "),
                sent_b: String::new(),
                is_next: true,
            })
            .collect()
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "benchmark": "senses",
            "seed": self.config.seed,
            "config": self.config,
            "sizes": {
                "entities": self.kb.entity_count(),
                "train": self.train.len(),
                "test": self.test.len(),
                "test_instances": self.test_instances.len(),
                "vocab": self.vocab.len(),
            },
            "files": {
                "vocab": "vocab.txt",
                "kb": "kb",
                "supervision": "supervision.jsonl",
                "el_gold": "el_gold.jsonl",
                "wsd": "wsd.jsonl",
            },
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let kb_dir = dir.join("kb");
        fs::create_dir_all(&kb_dir).map_err(|e| Error::io(&kb_dir, e))?;
        self.vocab.save(dir.join("vocab.txt"))?;
        self.kb.save(&KbPaths {
            lemmas: None,
            ..KbPaths::in_dir(&kb_dir)
        })?;
        data::write_jsonl(dir.join("supervision.jsonl"), &self.train)?;
        data::write_jsonl(dir.join("el_gold.jsonl"), &self.test)?;
        data::write_jsonl(dir.join("wsd.jsonl"), &self.test_instances)?;
        data::write_json(dir.join("manifest.json"), &self.manifest())
    }
}

/// `0 -> "a"`, `25 -> "z"`, `26 -> "ba"`, ... (letters only, so the word
/// stays a single piece).
fn letters(mut i: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

/// Objects ranked by how often they complete each relation in training text.
pub fn object_counts(bench: &FactsBenchmark) -> BTreeMap<String, BTreeMap<usize, usize>> {
    let mut out: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for f in bench.facts.iter().filter(|f| !f.held_out) {
        *out.entry(RELATIONS[f.relation].0.to_string()).or_default().entry(f.object).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FactsConfig {
        FactsConfig {
            facts: 60,
            held_out: 12,
            relations: 6,
            objects: 10,
            multiplicity: 2,
            ..Default::default()
        }
    }

    #[test]
    fn held_out_subjects_never_in_training_text() {
        let b = FactsBenchmark::generate(&small()).unwrap();
        assert_eq!(b.probes.len(), 12);
        assert!(b.leaked_subjects().is_empty());
        for p in &b.probes {
            for r in &b.corpus {
                assert!(!vocab::basic_words(&r.sent_a).contains(&p.subject));
            }
        }
    }

    #[test]
    fn fillers_tokenize_and_objects_split() {
        let b = FactsBenchmark::generate(&FactsConfig::default()).unwrap();
        let lens: Vec<usize> = b.objects.iter().map(|o| vocab::tokenize(o, &b.vocab).len()).collect();
        assert!(lens.contains(&1) && lens.contains(&2));
        for s in &b.subjects {
            let p = vocab::tokenize(s, &b.vocab);
            assert!(!p.contains(&b.vocab.unk_id()));
            let ex = crate::model::Example::frame(&p, None, &b.vocab, 16).unwrap();
            let list = b.kb.select_candidates(&ex.pieces, &b.vocab);
            assert_eq!(list.spans.len(), 1, "{s}");
        }
    }

    #[test]
    fn inconsistent_sizes_rejected() {
        let bad = FactsConfig {
            held_out: 60,
            ..small()
        };
        assert!(FactsBenchmark::generate(&bad).is_err());
        let bad = FactsConfig {
            relations: 21,
            ..small()
        };
        assert!(FactsBenchmark::generate(&bad).is_err());
    }

    #[test]
    fn senses_records_are_consistent() {
        let b = SensesBenchmark::generate(&SensesConfig::default()).unwrap();
        assert!(!b.test_instances.is_empty());
        for r in &b.train {
            assert_eq!(r.spans.len(), r.gold.len());
            for &[s, e] in &r.spans {
                let ids = vocab::pieces_to_ids(&r.pieces[s..=e], &b.vocab);
                assert!(!ids.contains(&b.vocab.unk_id()));
            }
        }
        for i in &b.test_instances {
            assert!(i.allowed.contains(&i.gold));
        }
    }

    #[test]
    fn letters_are_bijective_prefix() {
        assert_eq!(letters(0), "a");
        assert_eq!(letters(25), "z");
        assert_eq!(letters(26), "ba");
    }
}
