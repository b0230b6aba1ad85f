//! Masked-LM target selection with matching entity-candidate masking.
//!
//! A fraction of word pieces is selected; each selected piece is replaced by
//! `[MASK]`, by a random piece, or left unchanged. Candidate spans that
//! overlap a selected piece follow the same regime: their candidates become
//! the single MASK entity, random real entities, or stay as they are.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{Candidate, CandidateList};
use crate::model::{Example, KbSet, MlmTarget};
use crate::scalar::Scalar;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Keep,
    Random,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    /// Probability that an ordinary word piece is selected.
    pub rate: f64,
    /// Of selected pieces, the fraction replaced by `[MASK]`.
    pub mask: f64,
    /// Of selected pieces, the fraction replaced by a random piece.
    pub random: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask: 0.8,
            random: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if p(self.rate) && p(self.mask) && p(self.random) && self.mask + self.random <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid masking proportions {self:?}")))
        }
    }
}

/// What masking did to one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskRecord {
    /// Selected positions and the regime applied to each.
    pub positions: Vec<(usize, Regime)>,
    /// Per knowledge base, per span: the regime applied, `None` when the
    /// span overlaps no selected piece.
    pub spans: Vec<(String, Vec<Option<Regime>>)>,
}

fn draw_regime<R: Rng + ?Sized>(cfg: &MaskingConfig, rng: &mut R) -> Regime {
    let u: f64 = rng.random();
    if u < cfg.mask {
        Regime::Mask
    } else if u < cfg.mask + cfg.random {
        Regime::Random
    } else {
        Regime::Keep
    }
}

/// Masks one example. A span overlapping several selected pieces takes the
/// strongest of their regimes (`Mask` over `Random` over `Keep`), so a span
/// touching any `[MASK]` piece never reveals its candidates.
pub fn mask_example<S: Scalar, R: Rng + ?Sized>(
    example: &Example,
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> (Example, MaskRecord) {
    let mut out = example.clone();
    let mut record = MaskRecord::default();
    let ordinary = vocab.ordinary_ids();
    let mut regime_at = vec![None; example.pieces.len()];
    out.mlm.clear();
    for (pos, &piece) in example.pieces.iter().enumerate() {
        if vocab.is_special(piece) {
            continue;
        }
        if !rng.random_bool(cfg.rate) {
            continue;
        }
        let regime = draw_regime(cfg, rng);
        match regime {
            Regime::Mask => out.pieces[pos] = vocab.mask_id(),
            Regime::Random => out.pieces[pos] = ordinary[rng.random_range(0..ordinary.len())],
            Regime::Keep => {}
        }
        out.mlm.push(MlmTarget { position: pos, gold: piece });
        regime_at[pos] = Some(regime);
        record.positions.push((pos, regime));
    }
    for (name, list) in out.candidates.iter_mut() {
        let mut applied = Vec::with_capacity(list.len());
        let kb = kbs.get(name);
        for span in list.spans.iter_mut() {
            let regime = (span.start..=span.end).filter_map(|p| regime_at.get(p).copied().flatten()).max();
            match (regime, kb) {
                (Some(Regime::Mask), Some(kb)) => {
                    span.candidates = vec![Candidate {
                        entity: kb.mask_id(),
                        prior: 1.0,
                    }];
                }
                (Some(Regime::Random), Some(kb)) if kb.entity_count() > 0 => {
                    for c in span.candidates.iter_mut() {
                        if !kb.is_reserved(c.entity) {
                            c.entity = rng.random_range(0..kb.entity_count());
                        }
                    }
                }
                _ => {}
            }
            applied.push(regime);
        }
        record.spans.push((name.clone(), applied));
    }
    (out, record)
}

/// Masks each example in order from one generator.
pub fn mask_batch<S: Scalar, R: Rng + ?Sized>(
    examples: &[Example],
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Vec<Example> {
    examples.iter().map(|e| mask_example(e, vocab, kbs, cfg, rng).0).collect()
}

/// True when every span overlapping a `[MASK]`-substituted piece carries
/// only the MASK entity.
pub fn spans_hidden<S: Scalar>(masked: &Example, record: &MaskRecord, kbs: &KbSet<S>) -> bool {
    record.spans.iter().all(|(name, regimes)| {
        let (Some(list), Some(kb)) = (masked.candidates.get(name), kbs.get(name)) else {
            return true;
        };
        hidden_in(list, regimes, kb.mask_id())
    })
}

fn hidden_in(list: &CandidateList, regimes: &[Option<Regime>], mask_id: usize) -> bool {
    list.spans.iter().zip(regimes).all(|(s, r)| {
        *r != Some(Regime::Mask) || (s.candidates.len() == 1 && s.candidates[0].entity == mask_id && s.candidates[0].prior == 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{CandidateDictionary, KnowledgeBase};
    use crate::seed;
    use crate::tensor::Tensor2;

    fn setup() -> (Vocabulary, KbSet<f64>, Example) {
        let vocab = Vocabulary::with_reserved(["paris", "is", "big", "and", "old"]).unwrap();
        let mut dict = CandidateDictionary::new();
        dict.insert("paris", vec![Candidate { entity: 0, prior: 0.9 }], 2).unwrap();
        let kb = KnowledgeBase::new("geo", vec!["Paris".into(), "Texas".into()], Tensor2::zeros(2, 3), dict).unwrap();
        let mut kbs = KbSet::new();
        kbs.insert("geo".into(), kb);
        let pieces = crate::vocab::tokenize("paris is big and old", &vocab);
        let mut ex = Example::frame(&pieces, None, &vocab, 16).unwrap();
        ex.select_candidates(&kbs, &vocab);
        (vocab, kbs, ex)
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (v, kbs, ex) = setup();
        let cfg = MaskingConfig {
            rate: 0.5,
            ..Default::default()
        };
        let a = mask_example(&ex, &v, &kbs, &cfg, &mut seed::stream(3, "mask", 0));
        let b = mask_example(&ex, &v, &kbs, &cfg, &mut seed::stream(3, "mask", 0));
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn masked_span_carries_only_mask_entity() {
        let (v, kbs, ex) = setup();
        let cfg = MaskingConfig {
            rate: 1.0,
            mask: 1.0,
            random: 0.0,
        };
        let (m, rec) = mask_example(&ex, &v, &kbs, &cfg, &mut seed::stream(1, "mask", 0));
        let span = &m.candidates["geo"].spans[0];
        assert_eq!(span.candidates, vec![Candidate { entity: 3, prior: 1.0 }]);
        assert!(spans_hidden(&m, &rec, &kbs));
        assert!(m.pieces[1..6].iter().all(|&p| p == v.mask_id()));
        assert_eq!(m.pieces[0], v.cls_id());
    }

    #[test]
    fn random_regime_keeps_length_and_null() {
        let (v, kbs, ex) = setup();
        let cfg = MaskingConfig {
            rate: 1.0,
            mask: 0.0,
            random: 1.0,
        };
        let (m, _) = mask_example(&ex, &v, &kbs, &cfg, &mut seed::stream(1, "mask", 0));
        let before = &ex.candidates["geo"].spans[0].candidates;
        let after = &m.candidates["geo"].spans[0].candidates;
        assert_eq!(before.len(), after.len());
        assert_eq!(after.last().unwrap().entity, 2);
        assert!(after[0].entity < 2);
        assert_eq!(after[0].prior, before[0].prior);
    }

    #[test]
    fn special_tokens_never_selected() {
        let (v, kbs, ex) = setup();
        let cfg = MaskingConfig {
            rate: 1.0,
            ..Default::default()
        };
        let (m, _) = mask_example(&ex, &v, &kbs, &cfg, &mut seed::stream(9, "mask", 0));
        assert!(m.mlm.iter().all(|t| t.position != 0 && t.position != ex.len() - 1));
        assert_eq!(m.mlm.len(), 5);
    }
}
