//! Miniature BERT-style encoder: embeddings, post-norm transformer blocks
//! with KAR insertion points, and the masked-LM and next-sentence heads.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kar::{self, KarConfig, KarOutput, KarVars};
use crate::kb::{CandidateList, KnowledgeBase};
use crate::nn::{self, BlockDims};
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::seed;
use crate::tape::Var;
use crate::vocab::Vocabulary;

/// Knowledge bases by name.
pub type KbSet<S> = BTreeMap<String, KnowledgeBase<S>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Longest framed sequence, `[CLS]`/`[SEP]` included.
    pub max_len: usize,
    pub vocab_size: usize,
    /// KAR insertions in bottom-to-top order.
    pub kar: Vec<KarConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            ffn: 256,
            max_len: 64,
            vocab_size: 0,
            kar: Vec::new(),
        }
    }
}

impl EncoderConfig {
    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if self.layers == 0 || self.ffn == 0 {
            return Err(Error::Config("encoder needs at least one layer and a positive ffn width".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must leave room for [CLS] and [SEP]".into()));
        }
        let mut last = 0;
        let mut names = std::collections::BTreeSet::new();
        for k in &self.kar {
            if k.layer == 0 || k.layer >= self.layers {
                return Err(Error::Config(format!(
                    "KAR for `{}` at layer {} outside 1..={}",
                    k.kb,
                    k.layer,
                    self.layers - 1
                )));
            }
            if k.layer <= last {
                return Err(Error::StageOrder(format!(
                    "KAR for `{}` at layer {} is not above the previous insertion at layer {last}",
                    k.kb, k.layer
                )));
            }
            if !names.insert(k.kb.as_str()) {
                return Err(Error::Config(format!("knowledge base `{}` inserted twice", k.kb)));
            }
            k.block_dims().validate()?;
            last = k.layer;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmTarget {
    pub position: usize,
    pub gold: usize,
}

/// One framed input sequence with its targets and candidate lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub pieces: Vec<usize>,
    pub segments: Vec<usize>,
    pub mlm: Vec<MlmTarget>,
    pub is_next: Option<bool>,
    pub candidates: BTreeMap<String, CandidateList>,
    /// Gold candidate index per span of `candidates[kb]`.
    pub gold: BTreeMap<String, Vec<Option<usize>>>,
}

impl Example {
    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]` with segment ids.
    pub fn frame(a: &[usize], b: Option<&[usize]>, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let len = a.len() + 2 + b.map_or(0, |b| b.len() + 1);
        if len > max_len {
            return Err(Error::Overlength { len, max: max_len });
        }
        let mut pieces = Vec::with_capacity(len);
        let mut segments = Vec::with_capacity(len);
        pieces.push(vocab.cls_id());
        pieces.extend_from_slice(a);
        pieces.push(vocab.sep_id());
        segments.resize(pieces.len(), 0);
        if let Some(b) = b {
            pieces.extend_from_slice(b);
            pieces.push(vocab.sep_id());
            segments.resize(pieces.len(), 1);
        }
        Ok(Self {
            pieces,
            segments,
            ..Self::default()
        })
    }

    /// Runs every knowledge base's candidate selector over the pieces.
    pub fn select_candidates<S: Scalar>(&mut self, kbs: &KbSet<S>, vocab: &Vocabulary) {
        for (name, kb) in kbs {
            self.candidates.insert(name.clone(), kb.select_candidates(&self.pieces, vocab));
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// Which loss terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objectives {
    pub mlm: bool,
    pub nsp: bool,
    pub el: bool,
}

impl Objectives {
    pub const ALL: Self = Self {
        mlm: true,
        nsp: true,
        el: true,
    };
    pub const LM: Self = Self {
        mlm: true,
        nsp: true,
        el: false,
    };
    pub const EL: Self = Self {
        mlm: false,
        nsp: false,
        el: true,
    };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mlm: f64,
    pub nsp: f64,
    pub el: BTreeMap<String, f64>,
    pub total: f64,
}

/// Tape handles from one batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Packed `H_0..H_L`; `H_i` is the output of block `i` before any KAR.
    pub layers: Vec<Var>,
    /// Rows of each example inside the packed activations.
    pub bounds: Vec<Range<usize>>,
    /// Per knowledge base, one KAR output per example.
    pub kar: BTreeMap<String, Vec<KarOutput>>,
}

impl Forward {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding layer")
    }
}

/// Encoder parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: EncoderConfig,
    pub params: ParamStore<S>,
}

fn block_prefix(i: usize) -> String {
    format!("layer{i}")
}

impl<S: Scalar> Model<S> {
    /// Fresh encoder; every configured KAR is inserted in order.
    pub fn new(config: EncoderConfig, kbs: &KbSet<S>, seed_root: u64) -> Result<Self> {
        config.validate()?;
        let kars = config.kar.clone();
        let mut model = Self::encoder_only(
            EncoderConfig {
                kar: Vec::new(),
                ..config
            },
            seed_root,
        )?;
        for k in kars {
            let kb = kbs
                .get(&k.kb)
                .ok_or_else(|| Error::Config(format!("no knowledge base named `{}`", k.kb)))?;
            model.insert_kb(k, kb.embedding_dim(), seed_root)?;
        }
        Ok(model)
    }

    fn encoder_only(config: EncoderConfig, seed_root: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed_root, "init.encoder", 0);
        let mut p = ParamStore::new();
        let d = config.dim;
        p.init_weight("emb.token", config.vocab_size, d, nn::INIT_STD, &mut rng);
        p.init_weight("emb.position", config.max_len, d, nn::INIT_STD, &mut rng);
        p.init_weight("emb.segment", 2, d, nn::INIT_STD, &mut rng);
        nn::init_layer_norm(&mut p, "emb.ln", d);
        for i in 1..=config.layers {
            nn::init_block(&mut p, &block_prefix(i), config.block_dims(), &mut rng);
        }
        nn::init_linear(&mut p, "mlm.transform", d, d, &mut rng);
        nn::init_layer_norm(&mut p, "mlm.ln", d);
        p.init_zeros("mlm.bias", 1, config.vocab_size);
        nn::init_linear(&mut p, "nsp.pool", d, d, &mut rng);
        nn::init_linear(&mut p, "nsp.out", d, 2, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Adds a KAR above every existing one.
    pub fn insert_kb(&mut self, cfg: KarConfig, kb_dim: usize, seed_root: u64) -> Result<()> {
        let mut next = self.config.clone();
        next.kar.push(cfg.clone());
        next.validate()?;
        let mut rng = seed::stream(seed_root, &format!("init.kar.{}", cfg.kb), 0);
        kar::init_kar(&mut self.params, &cfg, self.config.dim, kb_dim, &mut rng)?;
        self.config = next;
        Ok(())
    }

    pub fn kar_config(&self, kb: &str) -> Option<&KarConfig> {
        self.config.kar.iter().find(|k| k.kb == kb)
    }

    /// Learning-rate group of a parameter: `kar` for KAR weights, and
    /// `below_kb` / `above_kb` relative to the topmost insertion. Without
    /// any KAR every parameter is in `encoder`.
    pub fn param_group(&self, name: &str) -> &'static str {
        if name.starts_with("kar.") {
            return "kar";
        }
        let Some(top) = self.config.kar.last().map(|k| k.layer) else {
            return "encoder";
        };
        if name.starts_with("emb.") {
            return "below_kb";
        }
        if let Some(rest) = name.strip_prefix("layer") {
            let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            return if idx <= top { "below_kb" } else { "above_kb" };
        }
        "above_kb"
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.pieces.is_empty() {
            return Err(Error::Invalid("empty sequence".into()));
        }
        if ex.pieces.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: ex.pieces.len(),
                max: self.config.max_len,
            });
        }
        if ex.segments.len() != ex.pieces.len() {
            return Err(Error::Invalid(format!(
                "{} segment ids for {} pieces",
                ex.segments.len(),
                ex.pieces.len()
            )));
        }
        if let Some(&bad) = ex.pieces.iter().find(|&&p| p >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "word piece id",
                index: bad,
                limit: self.config.vocab_size,
            });
        }
        if let Some(&bad) = ex.segments.iter().find(|&&s| s > 1) {
            return Err(Error::OutOfRange {
                what: "segment id",
                index: bad,
                limit: 2,
            });
        }
        Ok(())
    }

    fn embed(&self, g: &Graph<'_, S>, examples: &[Example]) -> Result<(Var, Vec<Range<usize>>)> {
        let t = g.tape();
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut bounds = Vec::with_capacity(examples.len());
        for ex in examples {
            self.check_example(ex)?;
            let start = tokens.len();
            tokens.extend_from_slice(&ex.pieces);
            positions.extend(0..ex.pieces.len());
            segments.extend_from_slice(&ex.segments);
            bounds.push(start..tokens.len());
        }
        let tok = t.select_rows(g.param("emb.token")?, &tokens)?;
        let pos = t.select_rows(g.param("emb.position")?, &positions)?;
        let seg = t.select_rows(g.param("emb.segment")?, &segments)?;
        let sum = t.add(t.add(tok, pos)?, seg)?;
        Ok((nn::layer_norm(g, sum, "emb.ln")?, bounds))
    }

    fn apply_kar(
        &self,
        g: &Graph<'_, S>,
        h: Var,
        bounds: &[Range<usize>],
        examples: &[Example],
        kb: &KnowledgeBase<S>,
        cfg: &KarConfig,
        link_only: bool,
    ) -> Result<(Var, Vec<KarOutput>)> {
        let t = g.tape();
        let empty = CandidateList::default();
        let mut outs = Vec::with_capacity(examples.len());
        let mut rows = Vec::with_capacity(examples.len());
        let mut any = false;
        for (ex, b) in examples.iter().zip(bounds) {
            let cands = ex.candidates.get(&cfg.kb).unwrap_or(&empty);
            let gold = ex.gold.get(&cfg.kb).map(Vec::as_slice);
            if cands.is_empty() {
                outs.push(KarOutput {
                    h_prime: h,
                    el_loss: None,
                    supervised_spans: 0,
                    vars: None,
                });
                rows.push(None);
                continue;
            }
            any = true;
            let he = t.select_rows(h, &b.clone().collect::<Vec<_>>())?;
            let out = if link_only {
                let vars = kar::link(g, he, cands, kb, cfg)?;
                let (el_loss, supervised_spans) = match gold {
                    Some(gold) => (kar::el_loss(g, &vars, gold, cfg)?, gold.iter().flatten().count()),
                    None => (None, 0),
                };
                KarOutput {
                    h_prime: he,
                    el_loss,
                    supervised_spans,
                    vars: Some(vars),
                }
            } else {
                kar::kar_forward(g, he, cands, kb, cfg, gold)?
            };
            rows.push(Some(out.h_prime));
            outs.push(out);
        }
        if !any || link_only {
            return Ok((h, outs));
        }
        let mut parts = Vec::with_capacity(rows.len());
        for (r, b) in rows.into_iter().zip(bounds) {
            parts.push(match r {
                Some(v) => v,
                None => t.select_rows(h, &b.clone().collect::<Vec<_>>())?,
            });
        }
        Ok((t.concat_rows(&parts)?, outs))
    }

    fn run(&self, g: &Graph<'_, S>, examples: &[Example], kbs: &KbSet<S>, stop_at: Option<&str>) -> Result<Forward> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (mut h, bounds) = self.embed(g, examples)?;
        let mut layers = vec![h];
        let mut kar_out = BTreeMap::new();
        for i in 1..=self.config.layers {
            h = nn::attention_block_grouped(g, h, h, self.config.heads, &block_prefix(i), &bounds, &bounds)?;
            layers.push(h);
            for cfg in self.config.kar.iter().filter(|k| k.layer == i) {
                let kb = kbs
                    .get(&cfg.kb)
                    .ok_or_else(|| Error::Config(format!("no knowledge base named `{}`", cfg.kb)))?;
                let stop = stop_at == Some(cfg.kb.as_str());
                let (next, outs) = self.apply_kar(g, h, &bounds, examples, kb, cfg, stop)?;
                kar_out.insert(cfg.kb.clone(), outs);
                if stop {
                    return Ok(Forward {
                        layers,
                        bounds,
                        kar: kar_out,
                    });
                }
                h = next;
            }
        }
        if let Some(name) = stop_at {
            return Err(Error::Config(format!("no KAR for knowledge base `{name}`")));
        }
        Ok(Forward {
            layers,
            bounds,
            kar: kar_out,
        })
    }

    /// Embedding plus every block, running each KAR at its insertion layer.
    pub fn forward(&self, g: &Graph<'_, S>, examples: &[Example], kbs: &KbSet<S>) -> Result<Forward> {
        self.run(g, examples, kbs, None)
    }

    /// Runs the encoder up to the named KAR and only its linker (span
    /// representations and candidate scores); nothing above is computed.
    pub fn forward_linker(&self, g: &Graph<'_, S>, examples: &[Example], kbs: &KbSet<S>, kb: &str) -> Result<Forward> {
        self.run(g, examples, kbs, Some(kb))
    }

    /// MLM log-probabilities over the vocabulary for packed rows of `h`.
    pub fn mlm_log_probs(&self, g: &Graph<'_, S>, h: Var, rows: &[usize]) -> Result<Var> {
        let t = g.tape();
        let x = t.select_rows(h, rows)?;
        let x = t.gelu(nn::linear(g, x, "mlm.transform")?);
        let x = nn::layer_norm(g, x, "mlm.ln")?;
        let logits = t.add_row(t.matmul_t(x, g.param("emb.token")?)?, g.param("mlm.bias")?)?;
        Ok(t.log_softmax_rows(logits))
    }

    /// Mean negative log-likelihood of `gold[j]` at packed row `rows[j]`.
    pub fn mlm_loss(&self, g: &Graph<'_, S>, h: Var, rows: &[usize], gold: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Invalid("masked-LM loss needs at least one masked position".into()));
        }
        if rows.len() != gold.len() {
            return Err(Error::Invalid(format!("{} masked rows but {} targets", rows.len(), gold.len())));
        }
        let n = g.tape().shape(h).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::OutOfRange {
                what: "masked position",
                index: bad,
                limit: n,
            });
        }
        if let Some(&bad) = gold.iter().find(|&&v| v >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "masked-LM target",
                index: bad,
                limit: self.config.vocab_size,
            });
        }
        let t = g.tape();
        let lp = self.mlm_log_probs(g, h, rows)?;
        let picks: Vec<(usize, usize)> = gold.iter().enumerate().map(|(j, &v)| (j, v)).collect();
        let sum = t.sum_all(t.pick(lp, &picks)?);
        Ok(t.scale(sum, -S::one() / S::lit(rows.len() as f64)))
    }

    /// Next-sentence log-probabilities (`[is not next, is next]`) at `cls_rows`.
    pub fn nsp_log_probs(&self, g: &Graph<'_, S>, h: Var, cls_rows: &[usize]) -> Result<Var> {
        let t = g.tape();
        let x = t.select_rows(h, cls_rows)?;
        let pooled = t.tanh(nn::linear(g, x, "nsp.pool")?);
        Ok(t.log_softmax_rows(nn::linear(g, pooled, "nsp.out")?))
    }

    /// Mean binary cross-entropy of the next-sentence labels.
    pub fn nsp_loss(&self, g: &Graph<'_, S>, h: Var, cls_rows: &[usize], labels: &[bool]) -> Result<Var> {
        if cls_rows.is_empty() || cls_rows.len() != labels.len() {
            return Err(Error::Invalid("next-sentence loss needs one label per [CLS] row".into()));
        }
        let t = g.tape();
        let lp = self.nsp_log_probs(g, h, cls_rows)?;
        let picks: Vec<(usize, usize)> = labels.iter().enumerate().map(|(j, &l)| (j, l as usize)).collect();
        let sum = t.sum_all(t.pick(lp, &picks)?);
        Ok(t.scale(sum, -S::one() / S::lit(labels.len() as f64)))
    }

    /// Batch loss: MLM mean over all masked positions, NSP mean over
    /// labelled examples, and per knowledge base the EL loss summed over
    /// spans and divided by the number of supervised spans.
    pub fn loss(&self, g: &Graph<'_, S>, fwd: &Forward, examples: &[Example], objectives: Objectives) -> Result<(Var, LossReport)> {
        let t = g.tape();
        let h = fwd.last();
        let mut terms = Vec::new();
        let mut report = LossReport::default();
        if objectives.mlm {
            let mut rows = Vec::new();
            let mut gold = Vec::new();
            for (ex, b) in examples.iter().zip(&fwd.bounds) {
                for m in &ex.mlm {
                    if m.position >= ex.len() {
                        return Err(Error::OutOfRange {
                            what: "masked position",
                            index: m.position,
                            limit: ex.len(),
                        });
                    }
                    rows.push(b.start + m.position);
                    gold.push(m.gold);
                }
            }
            if !rows.is_empty() {
                let l = self.mlm_loss(g, h, &rows, &gold)?;
                report.mlm = t.value(l).get(0, 0).to_f64_lossy();
                terms.push(l);
            }
        }
        if objectives.nsp {
            let (rows, labels): (Vec<usize>, Vec<bool>) = examples
                .iter()
                .zip(&fwd.bounds)
                .filter_map(|(ex, b)| ex.is_next.map(|l| (b.start, l)))
                .unzip();
            if !rows.is_empty() {
                let l = self.nsp_loss(g, h, &rows, &labels)?;
                report.nsp = t.value(l).get(0, 0).to_f64_lossy();
                terms.push(l);
            }
        }
        if objectives.el {
            for (name, outs) in &fwd.kar {
                let spans: usize = outs.iter().map(|o| o.supervised_spans).sum();
                let parts: Vec<Var> = outs.iter().filter_map(|o| o.el_loss).collect();
                if spans == 0 || parts.is_empty() {
                    continue;
                }
                let mut sum = parts[0];
                for &p in &parts[1..] {
                    sum = t.add(sum, p)?;
                }
                let l = t.scale(sum, S::one() / S::lit(spans as f64));
                report.el.insert(name.clone(), t.value(l).get(0, 0).to_f64_lossy());
                terms.push(l);
            }
        }
        let Some(&first) = terms.first() else {
            return Err(Error::Invalid("batch has no supervised objective".into()));
        };
        let mut total = first;
        for &v in &terms[1..] {
            total = t.add(total, v)?;
        }
        report.total = report.mlm + report.nsp + report.el.values().sum::<f64>();
        Ok((total, report))
    }

    /// Linker outputs of one knowledge base for a single example.
    pub fn link_example(&self, g: &Graph<'_, S>, example: &Example, kbs: &KbSet<S>, kb: &str) -> Result<Option<KarVars>> {
        let fwd = self.forward_linker(g, std::slice::from_ref(example), kbs, kb)?;
        Ok(fwd.kar.get(kb).and_then(|o| o[0].vars.clone()))
    }

    /// SHA-256 over every parameter.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}
