//! Knowledge attention and recontextualization (KAR).
//!
//! `H' = KAR(H, C)`: word-piece states are projected to the entity
//! dimension, pooled over candidate mention spans, contextualized by
//! span-to-span self-attention and scored against candidate entities. The
//! thresholded softmax over those scores weights the entity embeddings that
//! are added to the span vectors; word pieces then attend to the enhanced
//! spans, and the result is projected back and added residually.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{CandidateList, KnowledgeBase};
use crate::linalg::pseudoinverse;
use crate::nn::{self, BlockDims};
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor2;

/// Entity-linking objective used when supervision is available.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElLoss {
    /// Negative log-likelihood of the gold candidate.
    #[default]
    Softmax,
    /// Hinge on the gold score plus hinges on every other candidate.
    Margin,
}

/// Settings for one KAR insertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KarConfig {
    /// Knowledge base name.
    pub kb: String,
    /// Applied to the output of encoder block `layer` (1-based).
    pub layer: usize,
    pub entity_dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub score_hidden: usize,
    /// Scores below this are dropped before the softmax weighting.
    pub threshold: f64,
    pub margin: f64,
    pub loss: ElLoss,
}

impl Default for KarConfig {
    fn default() -> Self {
        Self {
            kb: String::new(),
            layer: 3,
            entity_dim: 16,
            heads: 4,
            ffn: 128,
            score_hidden: 100,
            threshold: 0.0,
            margin: 0.1,
            loss: ElLoss::Softmax,
        }
    }
}

impl KarConfig {
    pub fn prefix(&self) -> String {
        format!("kar.{}", self.kb)
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.entity_dim,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    /// Parameter names trained while pretraining the linker: the down
    /// projection, span pooling, span self-attention, the scoring MLP and
    /// the learned projection of raw entity embeddings.
    pub fn is_linker_param(&self, name: &str) -> bool {
        let p = self.prefix();
        ["proj_down.", "pool.", "span.", "score.", "entity_proj."]
            .iter()
            .any(|part| name.starts_with(&format!("{p}.{part}")))
    }
}

/// Creates every KAR parameter and applies [`init_alignment`].
pub fn init_kar<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &KarConfig, model_dim: usize, kb_dim: usize, rng: &mut R) -> Result<()> {
    cfg.block_dims().validate()?;
    if cfg.score_hidden == 0 {
        return Err(Error::Config("score_hidden must be positive".into()));
    }
    let p = cfg.prefix();
    let e = cfg.entity_dim;
    // unit-scale singular values keep the initial pseudoinverse well conditioned
    store.init_weight(format!("{p}.proj_down.w"), model_dim, e, 1.0 / (model_dim as f64).sqrt(), rng);
    store.init_zeros(format!("{p}.proj_down.b"), 1, e);
    store.init_weight(format!("{p}.pool.w"), e, 1, nn::INIT_STD, rng);
    nn::init_block(store, &format!("{p}.span"), cfg.block_dims(), rng);
    nn::init_linear(store, &format!("{p}.score.in"), 2, cfg.score_hidden, rng);
    nn::init_linear(store, &format!("{p}.score.out"), cfg.score_hidden, 1, rng);
    nn::init_block(store, &format!("{p}.recontext"), cfg.block_dims(), rng);
    store.insert(format!("{p}.proj_up.w"), Tensor2::zeros(e, model_dim), true);
    store.init_zeros(format!("{p}.proj_up.b"), 1, model_dim);
    store.init_weight(format!("{p}.null"), 1, e, nn::INIT_STD, rng);
    store.init_weight(format!("{p}.mask"), 1, e, nn::INIT_STD, rng);
    if kb_dim != e {
        store.init_weight(format!("{p}.entity_proj.w"), kb_dim, e, 1.0 / (kb_dim as f64).sqrt(), rng);
    }
    init_alignment(store, cfg)
}

/// Sets `W2 ← W1⁺` and `b2 ← 0`.
pub fn init_alignment<S: Scalar>(store: &mut ParamStore<S>, cfg: &KarConfig) -> Result<()> {
    let p = cfg.prefix();
    let w1 = store.get(&format!("{p}.proj_down.w"))?.clone();
    let w2 = pseudoinverse(&w1)?;
    *store.get_mut(&format!("{p}.proj_up.w"))? = w2;
    let b2 = store.get_mut(&format!("{p}.proj_up.b"))?;
    *b2 = Tensor2::zeros(b2.rows(), b2.cols());
    Ok(())
}

/// `H W1 + b1`.
pub fn project_down<S: Scalar>(g: &Graph<'_, S>, h: Var, cfg: &KarConfig) -> Result<Var> {
    nn::linear(g, h, &format!("{}.proj_down", cfg.prefix()))
}

/// Self-attentive span pooling: per span, softmax over `w · h_t` for the
/// pieces `t` in the span, then the weighted sum of those pieces.
pub fn pool_spans<S: Scalar>(g: &Graph<'_, S>, h_proj: Var, spans: &CandidateList, cfg: &KarConfig) -> Result<Var> {
    let t = g.tape();
    let (n, e) = t.shape(h_proj);
    if spans.is_empty() {
        return Ok(t.constant(Tensor2::zeros(0, e)));
    }
    let w = g.param(&format!("{}.pool.w", cfg.prefix()))?;
    let mut rows = Vec::with_capacity(spans.len());
    for s in &spans.spans {
        if s.start > s.end || s.end >= n {
            return Err(Error::OutOfRange {
                what: "pool_spans",
                index: s.end,
                limit: n,
            });
        }
        let idx: Vec<usize> = (s.start..=s.end).collect();
        let piece_rows = t.select_rows(h_proj, &idx)?;
        if idx.len() == 1 {
            rows.push(piece_rows);
            continue;
        }
        let scores = t.transpose(t.matmul(piece_rows, w)?);
        let weights = t.softmax_rows(scores);
        rows.push(t.matmul(weights, piece_rows)?);
    }
    t.concat_rows(&rows)
}

/// Transformer block over the mention-span vectors; identity when `C = 0`.
pub fn span_self_attention<S: Scalar>(g: &Graph<'_, S>, s: Var, cfg: &KarConfig) -> Result<Var> {
    if g.tape().shape(s).0 == 0 {
        return Ok(s);
    }
    nn::transformer_block(g, s, cfg.heads, &format!("{}.span", cfg.prefix()))
}

/// Embeddings of every candidate, stacked in span order (`ΣM x E`).
///
/// Only the rows referenced by the candidate list are read from the frozen
/// table, so cost does not depend on the knowledge-base size. Frozen rows
/// enter the tape as constants; NULL and MASK rows are parameters.
pub fn candidate_embeddings<S: Scalar>(g: &Graph<'_, S>, candidates: &CandidateList, kb: &KnowledgeBase<S>, cfg: &KarConfig) -> Result<Var> {
    let t = g.tape();
    let p = cfg.prefix();
    let mut real_rows: Vec<S> = Vec::new();
    let mut n_real = 0;
    let mut index = Vec::with_capacity(candidates.total_candidates());
    // placeholders resolved once the number of real rows is known
    enum Slot {
        Real(usize),
        Null,
        Mask,
    }
    let mut slots = Vec::with_capacity(index.capacity());
    for s in &candidates.spans {
        for c in &s.candidates {
            if c.entity == kb.null_id() {
                slots.push(Slot::Null);
            } else if c.entity == kb.mask_id() {
                slots.push(Slot::Mask);
            } else {
                real_rows.extend_from_slice(kb.embedding(c.entity)?);
                slots.push(Slot::Real(n_real));
                n_real += 1;
            }
        }
    }
    let null = g.param(&format!("{p}.null"))?;
    let mask = g.param(&format!("{p}.mask"))?;
    let mut parts = Vec::with_capacity(3);
    if n_real > 0 {
        let raw = t.constant(Tensor2::from_vec(n_real, kb.embedding_dim(), real_rows)?);
        let projected = if kb.embedding_dim() != cfg.entity_dim {
            project_entity_embeddings(g, raw, &format!("{p}.entity_proj.w"))?
        } else {
            raw
        };
        parts.push(projected);
    }
    parts.push(null);
    parts.push(mask);
    let stacked = t.concat_rows(&parts)?;
    for slot in slots {
        index.push(match slot {
            Slot::Real(i) => i,
            Slot::Null => n_real,
            Slot::Mask => n_real + 1,
        });
    }
    t.select_rows(stacked, &index)
}

/// Applies the learned linear map to raw (frozen) entity embeddings.
pub fn project_entity_embeddings<S: Scalar>(g: &Graph<'_, S>, raw: Var, proj_name: &str) -> Result<Var> {
    let proj = g.param(proj_name)?;
    g.tape().matmul(raw, proj)
}

/// Row ranges of each span's candidates within the stacked candidate rows.
pub fn segments(candidates: &CandidateList) -> Vec<Range<usize>> {
    let mut off = 0;
    candidates
        .spans
        .iter()
        .map(|s| {
            let r = off..off + s.candidates.len();
            off = r.end;
            r
        })
        .collect()
}

/// `ψ_mk = MLP(p_mk, s^e_m · e_mk)` for every candidate, as a `ΣM x 1` column.
pub fn score_candidates<S: Scalar>(g: &Graph<'_, S>, s_e: Var, candidates: &CandidateList, entity_rows: Var, cfg: &KarConfig) -> Result<Var> {
    let t = g.tape();
    let mut span_of = Vec::with_capacity(candidates.total_candidates());
    let mut priors = Vec::with_capacity(span_of.capacity());
    for (m, s) in candidates.spans.iter().enumerate() {
        for c in &s.candidates {
            span_of.push(m);
            priors.push(S::lit(c.prior));
        }
    }
    let span_rows = t.select_rows(s_e, &span_of)?;
    let dots = t.row_sum(t.mul(span_rows, entity_rows)?);
    let prior_col = t.constant(Tensor2::column_vector(&priors));
    let features = t.concat_cols(&[prior_col, dots])?;
    let p = cfg.prefix();
    let hidden = t.relu(nn::linear(g, features, &format!("{p}.score.in"))?);
    nn::linear(g, hidden, &format!("{p}.score.out"))
}

fn check_gold(segments: &[Range<usize>], gold: &[Option<usize>]) -> Result<()> {
    if gold.len() != segments.len() {
        return Err(Error::Invalid(format!(
            "{} gold labels for {} spans",
            gold.len(),
            segments.len()
        )));
    }
    for (s, g) in segments.iter().zip(gold) {
        if let Some(k) = *g {
            if k >= s.len() {
                return Err(Error::OutOfRange {
                    what: "gold candidate",
                    index: k,
                    limit: s.len(),
                });
            }
        }
    }
    Ok(())
}

/// `-Σ_m log softmax(ψ_m)[gold_m]` over supervised spans; `None` when no
/// span is supervised.
pub fn el_loss_softmax<S: Scalar>(g: &Graph<'_, S>, psi: Var, segments: &[Range<usize>], gold: &[Option<usize>]) -> Result<Option<Var>> {
    check_gold(segments, gold)?;
    let picks: Vec<(usize, usize)> = segments
        .iter()
        .zip(gold)
        .filter_map(|(s, g)| g.map(|k| (s.start + k, 0)))
        .collect();
    if picks.is_empty() {
        return Ok(None);
    }
    let t = g.tape();
    let logp = t.segment_log_softmax(psi, segments)?;
    let chosen = t.pick(logp, &picks)?;
    Ok(Some(t.scale(t.sum_all(chosen), -S::one())))
}

/// `max(0, γ - ψ_g) + Σ_{k≠g} max(0, γ + ψ_k)` summed over supervised spans.
pub fn el_loss_margin<S: Scalar>(g: &Graph<'_, S>, psi: Var, segments: &[Range<usize>], gold: &[Option<usize>], margin: f64) -> Result<Option<Var>> {
    check_gold(segments, gold)?;
    let mut rows = Vec::new();
    let mut signs = Vec::new();
    for (s, gk) in segments.iter().zip(gold) {
        if let Some(k) = *gk {
            for (j, r) in s.clone().enumerate() {
                rows.push(r);
                signs.push(if j == k { -S::one() } else { S::one() });
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let t = g.tape();
    let picked = t.select_rows(psi, &rows)?;
    let signed = t.mul(picked, t.constant(Tensor2::column_vector(&signs)))?;
    let hinge = t.relu(t.add_scalar(signed, S::lit(margin)));
    Ok(Some(t.sum_all(hinge)))
}

/// Thresholded, renormalized candidate weights and the weighted entity
/// embedding per span. Spans with no surviving candidate take the NULL row.
pub fn weighted_entity_embedding<S: Scalar>(
    g: &Graph<'_, S>,
    psi: Var,
    segments: &[Range<usize>],
    entity_rows: Var,
    null_row: Var,
    threshold: f64,
) -> Result<(Var, Var)> {
    let t = g.tape();
    let psi_tilde = t.threshold_softmax(psi, segments, S::lit(threshold))?;
    let weighted = t.segment_sum(t.mul_col(entity_rows, psi_tilde)?, segments)?;
    let fallback: Vec<S> = {
        let v = t.value(psi_tilde);
        segments
            .iter()
            .map(|s| {
                if s.clone().all(|i| v.get(i, 0) == S::zero()) {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect()
    };
    if fallback.iter().all(|&f| f == S::zero()) {
        return Ok((psi_tilde, weighted));
    }
    let indicator = t.constant(Tensor2::column_vector(&fallback));
    let null_part = t.matmul(indicator, null_row)?;
    Ok((psi_tilde, t.add(weighted, null_part)?))
}

/// `s'^e = s^e + ẽ`.
pub fn update_spans<S: Scalar>(g: &Graph<'_, S>, s_e: Var, e_tilde: Var) -> Result<Var> {
    g.tape().add(s_e, e_tilde)
}

/// Word-to-entity-span attention followed by a position-wise MLP, with the
/// projected word pieces as queries and the enhanced spans as keys/values.
pub fn recontextualize<S: Scalar>(g: &Graph<'_, S>, h_proj: Var, s_prime_e: Var, cfg: &KarConfig) -> Result<Var> {
    nn::attention_block(g, h_proj, s_prime_e, cfg.heads, &format!("{}.recontext", cfg.prefix()))
}

/// `H' = H'^proj W2 + b2 + H`.
pub fn project_up<S: Scalar>(g: &Graph<'_, S>, h_recontext: Var, h: Var, cfg: &KarConfig) -> Result<Var> {
    let up = nn::linear(g, h_recontext, &format!("{}.proj_up", cfg.prefix()))?;
    g.tape().add(up, h)
}

/// Tape handles of every KAR intermediate.
#[derive(Clone, Debug)]
pub struct KarVars {
    pub h_proj: Var,
    pub s: Var,
    pub s_e: Var,
    pub entity_rows: Var,
    pub psi: Var,
    pub segments: Vec<Range<usize>>,
    pub psi_tilde: Option<Var>,
    pub e_tilde: Option<Var>,
    pub s_prime_e: Option<Var>,
    pub h_recontext: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct KarOutput {
    pub h_prime: Var,
    pub el_loss: Option<Var>,
    /// Spans that contributed to `el_loss`.
    pub supervised_spans: usize,
    /// `None` when the candidate list was empty and the layer passed through.
    pub vars: Option<KarVars>,
}

/// Mention-span representations and candidate scores (the entity linker).
pub fn link<S: Scalar>(g: &Graph<'_, S>, h: Var, candidates: &CandidateList, kb: &KnowledgeBase<S>, cfg: &KarConfig) -> Result<KarVars> {
    let (n, _) = g.tape().shape(h);
    candidates.validate(n, kb.entity_count() + 2)?;
    let h_proj = project_down(g, h, cfg)?;
    let s = pool_spans(g, h_proj, candidates, cfg)?;
    let s_e = span_self_attention(g, s, cfg)?;
    let entity_rows = candidate_embeddings(g, candidates, kb, cfg)?;
    let psi = score_candidates(g, s_e, candidates, entity_rows, cfg)?;
    Ok(KarVars {
        h_proj,
        s,
        s_e,
        entity_rows,
        psi,
        segments: segments(candidates),
        psi_tilde: None,
        e_tilde: None,
        s_prime_e: None,
        h_recontext: None,
    })
}

/// Entity-linking loss for the configured objective.
pub fn el_loss<S: Scalar>(g: &Graph<'_, S>, vars: &KarVars, gold: &[Option<usize>], cfg: &KarConfig) -> Result<Option<Var>> {
    match cfg.loss {
        ElLoss::Softmax => el_loss_softmax(g, vars.psi, &vars.segments, gold),
        ElLoss::Margin => el_loss_margin(g, vars.psi, &vars.segments, gold, cfg.margin),
    }
}

/// Full KAR layer. With an empty candidate list the input passes through
/// unchanged.
pub fn kar_forward<S: Scalar>(
    g: &Graph<'_, S>,
    h: Var,
    candidates: &CandidateList,
    kb: &KnowledgeBase<S>,
    cfg: &KarConfig,
    gold: Option<&[Option<usize>]>,
) -> Result<KarOutput> {
    if candidates.is_empty() {
        return Ok(KarOutput {
            h_prime: h,
            el_loss: None,
            supervised_spans: 0,
            vars: None,
        });
    }
    let mut vars = link(g, h, candidates, kb, cfg)?;
    let (el_loss, supervised_spans) = match gold {
        Some(gold) => (el_loss(g, &vars, gold, cfg)?, gold.iter().flatten().count()),
        None => (None, 0),
    };
    let null = g.param(&format!("{}.null", cfg.prefix()))?;
    let (psi_tilde, e_tilde) = weighted_entity_embedding(g, vars.psi, &vars.segments, vars.entity_rows, null, cfg.threshold)?;
    let s_prime_e = update_spans(g, vars.s_e, e_tilde)?;
    let h_recontext = recontextualize(g, vars.h_proj, s_prime_e, cfg)?;
    let h_prime = project_up(g, h_recontext, h, cfg)?;
    vars.psi_tilde = Some(psi_tilde);
    vars.e_tilde = Some(e_tilde);
    vars.s_prime_e = Some(s_prime_e);
    vars.h_recontext = Some(h_recontext);
    Ok(KarOutput {
        h_prime,
        el_loss,
        supervised_spans,
        vars: Some(vars),
    })
}

/// Every KAR intermediate as plain numbers, keyed by symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KarTrace {
    #[serde(rename = "H_proj")]
    pub h_proj: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "S_e")]
    pub s_e: Vec<Vec<f64>>,
    /// Ragged: one row per span.
    pub psi: Vec<Vec<f64>>,
    pub psi_tilde: Vec<Vec<f64>>,
    pub e_tilde: Vec<Vec<f64>>,
    #[serde(rename = "S_prime_e")]
    pub s_prime_e: Vec<Vec<f64>>,
    #[serde(rename = "H_prime")]
    pub h_prime: Vec<Vec<f64>>,
}

fn ragged<S: Scalar>(col: &Tensor2<S>, segments: &[Range<usize>]) -> Vec<Vec<f64>> {
    segments
        .iter()
        .map(|s| s.clone().map(|i| col.get(i, 0).to_f64_lossy()).collect())
        .collect()
}

impl KarTrace {
    /// Reads the values of a completed forward pass.
    pub fn capture<S: Scalar>(g: &Graph<'_, S>, out: &KarOutput) -> Option<Self> {
        let v = out.vars.as_ref()?;
        let t = g.tape();
        let rows = |x: Var| t.value(x).to_f64_rows();
        Some(Self {
            h_proj: rows(v.h_proj),
            s: rows(v.s),
            s_e: rows(v.s_e),
            psi: ragged(&t.value(v.psi), &v.segments),
            psi_tilde: ragged(&t.value(v.psi_tilde?), &v.segments),
            e_tilde: rows(v.e_tilde?),
            s_prime_e: rows(v.s_prime_e?),
            h_prime: rows(out.h_prime),
        })
    }

    /// Largest absolute difference over all intermediates, per field.
    pub fn max_differences(&self, other: &Self) -> Vec<(&'static str, f64)> {
        fn diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    if x.len() != y.len() {
                        return f64::INFINITY;
                    }
                    x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        }
        vec![
            ("H_proj", diff(&self.h_proj, &other.h_proj)),
            ("S", diff(&self.s, &other.s)),
            ("S_e", diff(&self.s_e, &other.s_e)),
            ("psi", diff(&self.psi, &other.psi)),
            ("psi_tilde", diff(&self.psi_tilde, &other.psi_tilde)),
            ("e_tilde", diff(&self.e_tilde, &other.e_tilde)),
            ("S_prime_e", diff(&self.s_prime_e, &other.s_prime_e)),
            ("H_prime", diff(&self.h_prime, &other.h_prime)),
        ]
    }
}
