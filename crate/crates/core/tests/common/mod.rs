#![allow(dead_code)]

use kblm::kar::KarConfig;
use kblm::kb::{Candidate, CandidateDictionary, KnowledgeBase};
use kblm::model::{EncoderConfig, Example, KbSet, MlmTarget, Model};
use kblm::vocab::{self, Vocabulary};
use kblm::{seed, Tensor};
use rand::Rng;

pub const KB: &str = "geo";

pub const WORDS: [&str; 14] = [
    "paris", "is", "new", "york", "cat", "the", "sat", "on", "mat", "big", "city", "a", "##s", "old",
];

pub fn vocab() -> Vocabulary {
    Vocabulary::with_reserved(WORDS).unwrap()
}

/// Seven entities; `paris` has three candidates, `new york` two, `cat` one.
pub fn kb_with(seed_root: u64, entities: usize, kb_dim: usize) -> KnowledgeBase<f64> {
    let mut rng = seed::stream(seed_root, "fixture.kb", 0);
    let mut emb = Tensor::zeros(entities, kb_dim);
    for v in emb.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut dict = CandidateDictionary::new();
    let c = |entity, prior| Candidate { entity, prior };
    dict.insert("paris", vec![c(0, 0.6), c(1, 0.3), c(2, 0.1)], entities).unwrap();
    dict.insert("new york", vec![c(3, 0.7), c(4, 0.3)], entities).unwrap();
    dict.insert("cat", vec![c(5, 1.0)], entities).unwrap();
    let names = (0..entities).map(|i| format!("ent{i}")).collect();
    KnowledgeBase::new(KB, names, emb, dict).unwrap()
}

pub fn kbs(seed_root: u64) -> KbSet<f64> {
    let mut kbs = KbSet::new();
    kbs.insert(KB.to_string(), kb_with(seed_root, 7, 3));
    kbs
}

pub fn tiny_config(vocab: &Vocabulary, threshold: f64) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        ffn: 12,
        max_len: 8,
        vocab_size: vocab.len(),
        kar: vec![KarConfig {
            kb: KB.into(),
            layer: 1,
            entity_dim: 4,
            heads: 2,
            ffn: 6,
            score_hidden: 5,
            threshold,
            ..Default::default()
        }],
    }
}

/// `[CLS] paris is new york [SEP] cat [SEP]`: eight pieces, three spans,
/// at most four candidates per span, every objective supervised.
pub fn tiny_example(vocab: &Vocabulary, kbs: &KbSet<f64>) -> Example {
    let a = vocab::tokenize("paris is new york", vocab);
    let b = vocab::tokenize("cat", vocab);
    let mut ex = Example::frame(&a, Some(&b), vocab, 8).unwrap();
    ex.select_candidates(kbs, vocab);
    ex.is_next = Some(true);
    ex.mlm = vec![
        MlmTarget { position: 2, gold: vocab.id("is").unwrap() },
        MlmTarget { position: 3, gold: vocab.id("new").unwrap() },
    ];
    ex.pieces[2] = vocab.mask_id();
    let spans = ex.candidates[KB].len();
    let gold = (0..spans).map(|i| Some(i % 2)).collect::<Vec<_>>();
    ex.gold.insert(KB.to_string(), gold);
    ex
}

pub fn tiny_model(seed_root: u64, threshold: f64) -> (Vocabulary, KbSet<f64>, Model<f64>, Example) {
    let v = vocab();
    let kbs = kbs(seed_root);
    let model = Model::new(tiny_config(&v, threshold), &kbs, seed_root).unwrap();
    let ex = tiny_example(&v, &kbs);
    (v, kbs, model, ex)
}

/// Adds `N(0, std²)` noise to every parameter so that a gradient probe
/// point sits away from ReLU kinks and zero-initialized biases.
pub fn jitter(model: &mut Model<f64>, seed_root: u64, std: f64) {
    let mut rng = seed::stream(seed_root, "fixture.jitter", 0);
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.sample(normal);
        }
    }
}
