//! Staged training: linker pretraining with everything else frozen, then
//! multitask training over homogeneous unlabeled and entity-linking batches.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kar::{self, KarConfig};
use crate::model::{Example, KbSet, LossReport, Model, Objectives};
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::seed;
use crate::vocab::Vocabulary;

use super::masking::{mask_batch, MaskingConfig};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::ScheduleConfig;

/// Batches prepared ahead of the optimizer.
const PREFETCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub masking: MaskingConfig,
    /// Validation interval for early stopping; 0 disables it.
    pub eval_every: usize,
    /// Consecutive non-improving validations tolerated before stopping.
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as improvement.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            masking: MaskingConfig::default(),
            eval_every: 0,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.masking.validate()?;
        if self.eval_every > 0 && self.patience == 0 {
            return Err(Error::Config("patience must be positive when validation is enabled".into()));
        }
        Ok(())
    }
}

/// Unlabeled corpus plus per-knowledge-base supervision.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub unlabeled: Vec<Example>,
    pub supervised: BTreeMap<String, Vec<Example>>,
    /// Held-out supervision used for early stopping of the linker stage.
    pub validation: BTreeMap<String, Vec<Example>>,
}

impl TrainData {
    pub fn has_supervision(&self, kb: &str) -> bool {
        self.supervised.get(kb).is_some_and(|v| !v.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Unlabeled,
    Supervised(String),
}

/// A homogeneous batch: every example comes from the same source.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub step: usize,
    pub source: Source,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkerStatus {
    Trained { steps: usize },
    Skipped,
}

/// Which stages have completed, per knowledge base.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub linker: BTreeMap<String, LinkerStatus>,
    /// Knowledge bases whose up-projection was reset to the pseudoinverse
    /// after their linker stage.
    pub aligned: BTreeSet<String>,
    pub multitask_steps: usize,
}

/// Position inside the phase currently being run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: String,
    pub config_hash: String,
    /// Updates completed so far.
    pub step: usize,
    pub best: Option<f64>,
    pub stale_evals: usize,
    pub done: bool,
}

/// Model, optimizer state and stage bookkeeping.
#[derive(Clone, Debug)]
pub struct Session<S: Scalar> {
    pub model: Model<S>,
    pub optimizer: AdamW<S>,
    pub stages: Stages,
    pub progress: Option<Progress>,
    pub seed: u64,
}

impl<S: Scalar> Session<S> {
    pub fn new(model: Model<S>, optimizer: AdamWConfig, seed: u64) -> Self {
        Self {
            model,
            optimizer: AdamW::new(optimizer),
            stages: Stages::default(),
            progress: None,
            seed,
        }
    }

    /// Inserts a knowledge base above the existing ones. Rejected while a
    /// phase is unfinished.
    pub fn add_kb(&mut self, cfg: KarConfig, kbs: &KbSet<S>) -> Result<()> {
        if let Some(p) = &self.progress {
            if !p.done {
                return Err(Error::StageOrder(format!("phase `{}` is unfinished", p.phase)));
            }
        }
        let kb = kbs
            .get(&cfg.kb)
            .ok_or_else(|| Error::Config(format!("no knowledge base named `{}`", cfg.kb)))?;
        self.model.insert_kb(cfg, kb.embedding_dim(), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Entity-linker pretraining for one knowledge base.
    Linker(String),
    /// Joint masked-LM, next-sentence and entity-linking training.
    Multitask,
}

impl Phase {
    pub fn tag(&self) -> String {
        match self {
            Phase::Linker(kb) => format!("linker:{kb}"),
            Phase::Multitask => "multitask".into(),
        }
    }
}

/// One logged update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    /// 1-based update number within the phase.
    pub step: usize,
    pub source: Source,
    pub loss: LossReport,
    pub lr: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// Stop after this update, leaving the phase resumable.
    Pause,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: String,
    pub steps: usize,
    pub skipped: bool,
    pub stopped_early: bool,
    pub paused: bool,
    pub best_validation: Option<f64>,
}

/// Callback invoked after every update with the session in its new state.
pub type Observer<'a, S> = dyn FnMut(&StepRecord, &Session<S>) -> Result<Control> + 'a;

fn supervised_sources<S: Scalar>(model: &Model<S>, data: &TrainData) -> Vec<String> {
    model
        .config
        .kar
        .iter()
        .filter(|k| data.has_supervision(&k.kb))
        .map(|k| k.kb.clone())
        .collect()
}

/// Batch for update `step` (0-based) of `phase`. A pure function of the
/// seed and step, so batches can be prepared ahead or regenerated on resume.
#[allow(clippy::too_many_arguments)]
pub fn make_batch<S: Scalar>(
    phase: &Phase,
    sources: &[String],
    data: &TrainData,
    cfg: &TrainConfig,
    seed_root: u64,
    step: usize,
    vocab: &Vocabulary,
    kbs: &KbSet<S>,
) -> Result<TrainingBatch> {
    let b = cfg.schedule.batch_size;
    let mut rng = seed::stream(seed_root, &format!("sample.{}", phase.tag()), step as u64);
    let source = match phase {
        Phase::Linker(kb) => Source::Supervised(kb.clone()),
        Phase::Multitask => {
            let unlabeled = data.unlabeled.is_empty() || sources.is_empty() || rng.random_bool(cfg.schedule.unlabeled_fraction());
            if unlabeled {
                Source::Unlabeled
            } else {
                Source::Supervised(sources[rng.random_range(0..sources.len())].clone())
            }
        }
    };
    let pool: &[Example] = match &source {
        Source::Unlabeled => &data.unlabeled,
        Source::Supervised(kb) => data.supervised.get(kb).map(Vec::as_slice).unwrap_or_default(),
    };
    if pool.is_empty() {
        return Err(Error::Invalid(format!("no training examples for source {source:?}")));
    }
    let picked: Vec<Example> = (0..b).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
    let examples = match source {
        Source::Unlabeled => {
            let mut mrng = seed::stream(seed_root, &format!("mask.{}", phase.tag()), step as u64);
            mask_batch(&picked, vocab, kbs, &cfg.masking, &mut mrng)
        }
        Source::Supervised(_) => picked,
    };
    Ok(TrainingBatch { step, source, examples })
}

fn has_objective(batch: &TrainingBatch, obj: Objectives) -> bool {
    batch.examples.iter().any(|e| {
        (obj.mlm && !e.mlm.is_empty()) || (obj.nsp && e.is_next.is_some()) || (obj.el && e.gold.values().flatten().any(Option::is_some))
    })
}

/// Mean entity-linking loss per supervised span on held-out examples.
pub fn linker_validation_loss<S: Scalar>(model: &Model<S>, kbs: &KbSet<S>, kb: &str, examples: &[Example], batch_size: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut spans = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let g = Graph::frozen(&model.params);
        let fwd = model.forward_linker(&g, chunk, kbs, kb)?;
        for out in &fwd.kar[kb] {
            if let Some(l) = out.el_loss {
                total += g.tape().value(l).get(0, 0).to_f64_lossy();
                spans += out.supervised_spans;
            }
        }
    }
    Ok((spans > 0).then(|| total / spans as f64))
}

fn begin_phase<S: Scalar>(session: &mut Session<S>, phase: &Phase, hash: &str) -> Result<Progress> {
    let tag = phase.tag();
    match &session.progress {
        Some(p) if !p.done && p.phase == tag => {
            if p.config_hash != hash {
                return Err(Error::Config(format!(
                    "resume mismatch: phase `{tag}` was started with configuration {} but now has {hash}",
                    p.config_hash
                )));
            }
            Ok(p.clone())
        }
        Some(p) if !p.done => Err(Error::StageOrder(format!("phase `{}` is unfinished; cannot start `{tag}`", p.phase))),
        _ => {
            session.optimizer.state.clear();
            Ok(Progress {
                phase: tag,
                config_hash: hash.to_string(),
                step: 0,
                best: None,
                stale_evals: 0,
                done: false,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_phase<S: Scalar>(
    session: &mut Session<S>,
    kbs: &KbSet<S>,
    vocab: &Vocabulary,
    data: &TrainData,
    phase: Phase,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, S>,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    let hash = crate::data::hash_json(&(phase.tag(), cfg));
    let mut progress = begin_phase(session, &phase, &hash)?;
    let total = cfg.schedule.total_steps;
    let sources = supervised_sources(&session.model, data);
    let linker_cfg = match &phase {
        Phase::Linker(kb) => Some(
            session
                .model
                .kar_config(kb)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no KAR for knowledge base `{kb}`")))?,
        ),
        Phase::Multitask => None,
    };
    let seed_root = session.seed;
    let start = progress.step;
    let mut summary = PhaseSummary {
        phase: phase.tag(),
        steps: start,
        skipped: false,
        stopped_early: false,
        paused: false,
        best_validation: progress.best,
    };
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<TrainingBatch>>(PREFETCH);
        let producer_phase = phase.clone();
        let producer_sources = sources.clone();
        scope.spawn(move || {
            for step in start..total {
                let batch = make_batch(&producer_phase, &producer_sources, data, cfg, seed_root, step, vocab, kbs);
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in start..total {
            let batch = rx
                .recv()
                .map_err(|_| Error::Invalid("batch producer stopped".into()))??;
            let objectives = match batch.source {
                Source::Unlabeled => Objectives::LM,
                Source::Supervised(_) => Objectives::EL,
            };
            let (report, grads) = if has_objective(&batch, objectives) {
                let model = &session.model;
                let g = match &linker_cfg {
                    Some(k) => {
                        let k = k.clone();
                        Graph::with_filter(&model.params, move |n| k.is_linker_param(n))
                    }
                    None => Graph::new(&model.params),
                };
                let fwd = match &phase {
                    Phase::Linker(kb) => model.forward_linker(&g, &batch.examples, kbs, kb)?,
                    Phase::Multitask => model.forward(&g, &batch.examples, kbs)?,
                };
                let (loss, report) = model.loss(&g, &fwd, &batch.examples, objectives)?;
                (report, g.backward(loss)?)
            } else {
                (LossReport::default(), Default::default())
            };
            let update = step + 1;
            let mut lr = BTreeMap::new();
            let mut lr_by_param = BTreeMap::new();
            for name in grads.keys() {
                let group = session.model.param_group(name);
                let v = cfg.schedule.lr_at(update, group)?;
                lr.insert(group.to_string(), v);
                lr_by_param.insert(name.clone(), v);
            }
            let grad_norm = session
                .optimizer
                .step(&mut session.model.params, &grads, |n| Ok(lr_by_param[n]))?;
            progress.step = update;
            let mut validation = None;
            if let (Phase::Linker(kb), true) = (&phase, cfg.eval_every > 0 && update % cfg.eval_every == 0) {
                if let Some(v) = data.validation.get(kb) {
                    validation = linker_validation_loss(&session.model, kbs, kb, v, cfg.schedule.batch_size)?;
                }
                if let Some(v) = validation {
                    if progress.best.is_none_or(|b| v < b - cfg.min_delta) {
                        progress.best = Some(v);
                        progress.stale_evals = 0;
                    } else {
                        progress.stale_evals += 1;
                    }
                }
            }
            let converged = progress.stale_evals >= cfg.patience && cfg.eval_every > 0;
            progress.done = converged || update == total;
            session.progress = Some(progress.clone());
            summary.steps = update;
            summary.best_validation = progress.best;
            let record = StepRecord {
                phase: phase.tag(),
                step: update,
                source: batch.source,
                loss: report,
                lr,
                grad_norm,
                validation,
            };
            let control = observer(&record, session)?;
            if converged {
                summary.stopped_early = update < total;
                break;
            }
            if control == Control::Pause && !progress.done {
                summary.paused = true;
                break;
            }
        }
        drop(rx);
        Ok(())
    })?;
    if start >= total {
        progress.done = true;
        session.progress = Some(progress);
    }
    Ok(summary)
}

/// Trains only the linker of `kb` (down-projection, span pooling, span
/// self-attention, scoring MLP, and the entity projection when present) on
/// its entity-linking supervision, stopping early when held-out loss stops
/// improving. Without supervision the stage is recorded as skipped.
pub fn pretrain_linker<S: Scalar>(
    session: &mut Session<S>,
    kbs: &KbSet<S>,
    vocab: &Vocabulary,
    data: &TrainData,
    kb: &str,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, S>,
) -> Result<PhaseSummary> {
    if session.model.kar_config(kb).is_none() {
        return Err(Error::Config(format!("no KAR for knowledge base `{kb}`")));
    }
    if !data.has_supervision(kb) {
        session.stages.linker.insert(kb.to_string(), LinkerStatus::Skipped);
        return Ok(PhaseSummary {
            phase: Phase::Linker(kb.to_string()).tag(),
            steps: 0,
            skipped: true,
            stopped_early: false,
            paused: false,
            best_validation: None,
        });
    }
    let summary = run_phase(session, kbs, vocab, data, Phase::Linker(kb.to_string()), cfg, observer)?;
    if !summary.paused {
        session.stages.linker.insert(kb.to_string(), LinkerStatus::Trained { steps: summary.steps });
        session.stages.aligned.remove(kb);
    }
    Ok(summary)
}

/// Resets the up-projection of every KAR whose linker was retrained, then
/// trains all parameters on homogeneous batches sampled at the configured
/// unlabeled:supervised ratio. Unlabeled batches contribute masked-LM and
/// next-sentence losses only; supervised batches contribute only their
/// entity-linking loss.
pub fn multitask_train<S: Scalar>(
    session: &mut Session<S>,
    kbs: &KbSet<S>,
    vocab: &Vocabulary,
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, S>,
) -> Result<PhaseSummary> {
    let resuming = session
        .progress
        .as_ref()
        .is_some_and(|p| !p.done && p.phase == Phase::Multitask.tag());
    if !resuming {
        for k in session.model.config.kar.clone() {
            if data.has_supervision(&k.kb) && !session.stages.linker.contains_key(&k.kb) {
                return Err(Error::StageOrder(format!(
                    "knowledge base `{}` has supervision but its linker stage has not run",
                    k.kb
                )));
            }
            if !session.stages.aligned.contains(&k.kb) {
                kar::init_alignment(&mut session.model.params, &k)?;
                session.stages.aligned.insert(k.kb.clone());
            }
        }
    }
    let summary = run_phase(session, kbs, vocab, data, Phase::Multitask, cfg, observer)?;
    if !summary.paused {
        session.stages.multitask_steps += summary.steps;
    }
    Ok(summary)
}

/// Observer that never interrupts.
pub fn keep_going<S: Scalar>(_: &StepRecord, _: &Session<S>) -> Result<Control> {
    Ok(Control::Continue)
}
