//! Intrinsic probes run against a frozen model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{Candidate, CandidateList};
use crate::model::{Example, KbSet, MlmTarget, Model};
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::seed;
use crate::training::{mask_example, MaskingConfig};
use crate::vocab::{self, Vocabulary};

use super::metrics::{self, Link, Prf, RankAggregation};

/// Examples scored per forward pass.
pub const EVAL_BATCH: usize = 16;

pub const SUBJECT_SLOT: &str = "SUBJ";
pub const OBJECT_SLOT: &str = "OBJ";

/// A fact verbalized through a template with `SUBJ` and `OBJ` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTuple {
    pub relation: String,
    pub template: String,
    pub subject: String,
    pub object: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Subject,
    Object,
}

/// A probe sentence with the target filler masked.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInstance {
    pub relation: String,
    pub slot: Slot,
    pub example: Example,
}

fn filler_pieces(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let pieces = vocab::tokenize(text, vocab);
    if pieces.is_empty() || pieces.contains(&vocab.unk_id()) {
        return Err(Error::Invalid(format!("filler `{text}` does not tokenize within the vocabulary")));
    }
    Ok(pieces)
}

impl ProbeTuple {
    /// Splits the template into `(before, first slot, between, second slot, after)`.
    fn parts(&self) -> Result<(&str, Slot, &str, Slot, &str)> {
        let count = |s: &str| self.template.matches(s).count();
        let subj = count(SUBJECT_SLOT);
        let obj = count(OBJECT_SLOT);
        if subj != 1 || obj != 1 {
            return Err(Error::Invalid(format!(
                "template `{}` must contain {SUBJECT_SLOT} and {OBJECT_SLOT} exactly once",
                self.template
            )));
        }
        let s = self.template.find(SUBJECT_SLOT).expect("counted");
        let o = self.template.find(OBJECT_SLOT).expect("counted");
        let t = self.template.as_str();
        Ok(if s < o {
            (&t[..s], Slot::Subject, &t[s + SUBJECT_SLOT.len()..o], Slot::Object, &t[o + OBJECT_SLOT.len()..])
        } else {
            (&t[..o], Slot::Object, &t[o + OBJECT_SLOT.len()..s], Slot::Subject, &t[s + SUBJECT_SLOT.len()..])
        })
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.parts()?;
        filler_pieces(&self.subject, vocab)?;
        filler_pieces(&self.object, vocab)?;
        Ok(())
    }

    /// The filled sentence with the template text substituted.
    pub fn sentence(&self) -> String {
        self.template.replace(SUBJECT_SLOT, &self.subject).replace(OBJECT_SLOT, &self.object)
    }

    /// Word pieces of the filled sentence and the piece range of each filler.
    pub fn render(&self, vocab: &Vocabulary) -> Result<(Vec<usize>, BTreeMap<Slot, std::ops::Range<usize>>)> {
        let (before, first, between, second, after) = self.parts()?;
        let filler = |slot| match slot {
            Slot::Subject => &self.subject,
            Slot::Object => &self.object,
        };
        let mut pieces = vocab::tokenize(before, vocab);
        let mut ranges = BTreeMap::new();
        for (slot, tail) in [(first, between), (second, after)] {
            let p = filler_pieces(filler(slot), vocab)?;
            ranges.insert(slot, pieces.len()..pieces.len() + p.len());
            pieces.extend(p);
            pieces.extend(vocab::tokenize(tail, vocab));
        }
        Ok((pieces, ranges))
    }

    /// Frames the sentence, masks every piece of `slot` and hides the
    /// candidates of any span overlapping it behind the MASK entity.
    pub fn instance<S: Scalar>(&self, slot: Slot, vocab: &Vocabulary, kbs: &KbSet<S>, max_len: usize) -> Result<ProbeInstance> {
        let (pieces, ranges) = self.render(vocab)?;
        let mut ex = Example::frame(&pieces, None, vocab, max_len)?;
        ex.select_candidates(kbs, vocab);
        let target = &ranges[&slot];
        for p in target.clone() {
            let pos = p + 1;
            ex.mlm.push(MlmTarget {
                position: pos,
                gold: ex.pieces[pos],
            });
            ex.pieces[pos] = vocab.mask_id();
        }
        for (name, list) in ex.candidates.iter_mut() {
            let Some(kb) = kbs.get(name) else { continue };
            for span in list.spans.iter_mut() {
                if (target.start + 1..target.end + 1).any(|p| span.overlaps(p)) {
                    span.candidates = vec![Candidate {
                        entity: kb.mask_id(),
                        prior: 1.0,
                    }];
                }
            }
        }
        Ok(ProbeInstance {
            relation: self.relation.clone(),
            slot,
            example: ex,
        })
    }
}

/// Log-probabilities (as `f64`) of every masked target, per example.
fn masked_log_probs<S: Scalar>(model: &Model<S>, examples: &[Example], kbs: &KbSet<S>) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let g = Graph::frozen(&model.params);
        let fwd = model.forward(&g, chunk, kbs)?;
        let mut rows = Vec::new();
        for (ex, b) in chunk.iter().zip(&fwd.bounds) {
            rows.extend(ex.mlm.iter().map(|m| b.start + m.position));
        }
        if rows.is_empty() {
            out.extend(chunk.iter().map(|_| Vec::new()));
            continue;
        }
        let lp = model.mlm_log_probs(&g, fwd.last(), &rows)?;
        let lp = g.tape().value(lp);
        let mut r = 0;
        for ex in chunk {
            let mut per = Vec::with_capacity(ex.mlm.len());
            for _ in &ex.mlm {
                per.push(lp.row(r).iter().map(|v| v.to_f64_lossy()).collect());
                r += 1;
            }
            out.push(per);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub value: f64,
    pub positions: usize,
}

/// Masked-LM perplexity. Example `i` is masked from the `eval.mask` stream
/// at index `i`, so the result does not depend on how examples are batched.
pub fn perplexity<S: Scalar>(
    model: &Model<S>,
    examples: &[Example],
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
    masking: &MaskingConfig,
    seed_root: u64,
) -> Result<PerplexityResult> {
    if examples.is_empty() {
        return Err(Error::Invalid("perplexity over an empty corpus".into()));
    }
    let masked: Vec<Example> = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| mask_example(ex, vocab, kbs, masking, &mut seed::stream(seed_root, "eval.mask", i as u64)).0)
        .collect();
    perplexity_of_masked(model, &masked, kbs)
}

/// Perplexity over examples whose `mlm` targets are already set.
pub fn perplexity_of_masked<S: Scalar>(model: &Model<S>, masked: &[Example], kbs: &KbSet<S>) -> Result<PerplexityResult> {
    let lps = masked_log_probs(model, masked, kbs)?;
    let mut nll = Vec::new();
    for (ex, per) in masked.iter().zip(&lps) {
        for (m, row) in ex.mlm.iter().zip(per) {
            nll.push(-row[m.gold]);
        }
    }
    Ok(PerplexityResult {
        value: metrics::perplexity_from_nll(&nll)?,
        positions: nll.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrrConfig {
    pub slots: Vec<Slot>,
    pub aggregation: RankAggregation,
}

impl Default for MrrConfig {
    fn default() -> Self {
        Self {
            slots: vec![Slot::Subject, Slot::Object],
            aggregation: RankAggregation::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrrResult {
    pub total: f64,
    pub per_relation: BTreeMap<String, f64>,
    pub instances: usize,
    /// Per instance: relation, slot and reciprocal rank.
    pub scores: Vec<(String, Slot, f64)>,
}

/// Mean reciprocal rank of masked filler pieces. Per-piece reciprocal ranks
/// combine into an instance score, instances average per relation and
/// overall.
pub fn mrr_probe<S: Scalar>(
    model: &Model<S>,
    tuples: &[ProbeTuple],
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
    cfg: &MrrConfig,
) -> Result<MrrResult> {
    let mut instances = Vec::new();
    for t in tuples {
        t.validate(vocab)?;
        for &slot in &cfg.slots {
            instances.push(t.instance(slot, vocab, kbs, model.config.max_len)?);
        }
    }
    if instances.is_empty() {
        return Err(Error::Invalid("no probe instances".into()));
    }
    let examples: Vec<Example> = instances.iter().map(|i| i.example.clone()).collect();
    let lps = masked_log_probs(model, &examples, kbs)?;
    let mut scores = Vec::with_capacity(instances.len());
    for (inst, per) in instances.iter().zip(&lps) {
        let ranks: Vec<usize> = inst
            .example
            .mlm
            .iter()
            .zip(per)
            .map(|(m, row)| metrics::rank_of(row, m.gold))
            .collect();
        scores.push((
            inst.relation.clone(),
            inst.slot,
            metrics::instance_reciprocal_rank(&ranks, cfg.aggregation),
        ));
    }
    Ok(summarize_mrr(scores))
}

pub fn summarize_mrr(scores: Vec<(String, Slot, f64)>) -> MrrResult {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (rel, _, rr) in &scores {
        groups.entry(rel.clone()).or_default().push(*rr);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all: Vec<f64> = scores.iter().map(|s| s.2).collect();
    MrrResult {
        total: mean(&all),
        per_relation: groups.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
        instances: scores.len(),
        scores,
    }
}

/// A non-NULL entity-linking decision. Spans index the sentence pieces
/// (without `[CLS]`), inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElPrediction {
    pub link: Link,
    pub score: f64,
}

/// Argmax candidate per proposed span of knowledge base `kb`; spans where
/// NULL (or MASK) wins produce nothing. `examples[i]` becomes document `i`.
pub fn predict_links<S: Scalar>(model: &Model<S>, examples: &[Example], kbs: &KbSet<S>, kb: &str) -> Result<Vec<ElPrediction>> {
    let base = kbs
        .get(kb)
        .ok_or_else(|| Error::Config(format!("no knowledge base named `{kb}`")))?;
    let mut out = Vec::new();
    for (c, chunk) in examples.chunks(EVAL_BATCH).enumerate() {
        let g = Graph::frozen(&model.params);
        let fwd = model.forward_linker(&g, chunk, kbs, kb)?;
        for (j, (ex, o)) in chunk.iter().zip(&fwd.kar[kb]).enumerate() {
            let Some(vars) = &o.vars else { continue };
            let psi = g.tape().value(vars.psi);
            for (span, seg) in ex.candidates[kb].spans.iter().zip(&vars.segments) {
                let Some(best) = argmax(seg.clone().map(|r| psi.get(r, 0).to_f64_lossy())) else {
                    continue;
                };
                let cand = span.candidates[best];
                if base.is_reserved(cand.entity) {
                    continue;
                }
                out.push(ElPrediction {
                    link: Link {
                        doc: c * EVAL_BATCH + j,
                        start: span.start - 1,
                        end: span.end - 1,
                        entity: cand.entity,
                    },
                    score: psi.get(seg.start + best, 0).to_f64_lossy(),
                });
            }
        }
    }
    Ok(out)
}

/// First index of the largest value.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Gold links from supervision-format records; NULL gold produces none.
pub fn gold_links(records: &[crate::data::ElRecord], null_id: usize) -> Vec<Link> {
    let mut out = Vec::new();
    for (doc, r) in records.iter().enumerate() {
        for (&[start, end], g) in r.spans.iter().zip(&r.gold) {
            if let Some(entity) = g.filter(|&e| e < null_id) {
                out.push(Link { doc, start, end, entity });
            }
        }
    }
    out
}

/// Strong-match micro P/R/F1 of the model's links against gold records.
pub fn el_f1<S: Scalar>(
    model: &Model<S>,
    records: &[crate::data::ElRecord],
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
    kb: &str,
) -> Result<Prf> {
    let base = kbs
        .get(kb)
        .ok_or_else(|| Error::Config(format!("no knowledge base named `{kb}`")))?;
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let pieces = vocab::pieces_to_ids(&r.pieces, vocab);
        let mut ex = Example::frame(&pieces, None, vocab, model.config.max_len)?;
        ex.select_candidates(kbs, vocab);
        examples.push(ex);
    }
    let predictions: Vec<Link> = predict_links(model, &examples, kbs, kb)?.into_iter().map(|p| p.link).collect();
    Ok(metrics::strong_match_prf(&predictions, &gold_links(records, base.null_id())))
}

/// A sense-linking instance: one mention span whose candidates are
/// restricted to `allowed` (e.g. senses matching the gold lemma and POS).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictedInstance {
    pub pieces: Vec<String>,
    /// Inclusive piece offsets of the mention.
    pub span: [usize; 2],
    pub allowed: Vec<usize>,
    pub gold: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RestrictedResult {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Instances excluded because the gold entity was not an allowed
    /// candidate of a proposed span.
    pub invalid: usize,
}

/// Removes candidates outside `allowed` from the span `[start, end]`
/// (framed coordinates). Returns `false` when no such span exists, the
/// restricted set is empty, or it excludes `gold`.
pub fn restrict_candidates(list: &mut CandidateList, start: usize, end: usize, allowed: &[usize], gold: usize) -> bool {
    let Some(span) = list.spans.iter_mut().find(|s| s.start == start && s.end == end) else {
        return false;
    };
    span.candidates.retain(|c| allowed.contains(&c.entity));
    !span.candidates.is_empty() && span.candidates.iter().any(|c| c.entity == gold)
}

/// Fraction of valid instances whose restricted argmax equals the gold entity.
pub fn restricted_linking_accuracy<S: Scalar>(
    model: &Model<S>,
    instances: &[RestrictedInstance],
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
    kb: &str,
) -> Result<RestrictedResult> {
    if !kbs.contains_key(kb) {
        return Err(Error::Config(format!("no knowledge base named `{kb}`")));
    }
    let mut valid = Vec::new();
    let mut result = RestrictedResult::default();
    for inst in instances {
        let pieces = vocab::pieces_to_ids(&inst.pieces, vocab);
        let mut ex = Example::frame(&pieces, None, vocab, model.config.max_len)?;
        ex.select_candidates(kbs, vocab);
        let [s, e] = inst.span;
        let ok = ex
            .candidates
            .get_mut(kb)
            .is_some_and(|l| restrict_candidates(l, s + 1, e + 1, &inst.allowed, inst.gold));
        if ok {
            valid.push((ex, inst));
        } else {
            result.invalid += 1;
        }
    }
    for chunk in valid.chunks(EVAL_BATCH) {
        let examples: Vec<Example> = chunk.iter().map(|(ex, _)| ex.clone()).collect();
        let g = Graph::frozen(&model.params);
        let fwd = model.forward_linker(&g, &examples, kbs, kb)?;
        for ((ex, inst), o) in chunk.iter().zip(&fwd.kar[kb]) {
            let vars = o.vars.as_ref().expect("restricted span has candidates");
            let psi = g.tape().value(vars.psi);
            let list = &ex.candidates[kb];
            let m = list
                .spans
                .iter()
                .position(|sp| sp.start == inst.span[0] + 1 && sp.end == inst.span[1] + 1)
                .expect("validated above");
            let seg = vars.segments[m].clone();
            let best = argmax(seg.clone().map(|r| psi.get(r, 0).to_f64_lossy())).expect("nonempty");
            result.evaluated += 1;
            if list.spans[m].candidates[best].entity == inst.gold {
                result.correct += 1;
            }
        }
    }
    result.accuracy = if result.evaluated == 0 {
        0.0
    } else {
        result.correct as f64 / result.evaluated as f64
    };
    Ok(result)
}
