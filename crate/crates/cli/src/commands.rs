use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use kblm::data::{self, CorpusRecord, ElRecord};
use kblm::eval::{self, ProbeTuple, Report, RestrictedInstance};
use kblm::kb::{KbPaths, KnowledgeBase};
use kblm::model::{Example, KbSet, Model};
use kblm::synth::{FactsBenchmark, FactsConfig, SensesBenchmark, SensesConfig};
use kblm::training::{self, Checkpoint, Control, Phase, Session, StepRecord, TrainData};
use kblm::vocab::{self, Vocabulary};
use kblm::worked::WorkedExample;
use kblm::{Error, Graph};

use crate::config::{self, KbEntry, RunConfig};

/// Everything loaded from a run configuration.
pub struct Workspace {
    pub config: RunConfig,
    pub hash: String,
    pub vocab: Vocabulary,
    pub kbs: KbSet<f64>,
}

impl Workspace {
    pub fn open(path: &Path, overrides: &[String]) -> Result<Self> {
        let (config, hash) = RunConfig::load(path, overrides)?;
        let vocab = Vocabulary::load(&config.vocab)?;
        let mut kbs = KbSet::new();
        for entry in &config.kb {
            let kb = KnowledgeBase::load_paths(entry.name.clone(), &KbPaths::in_dir(&entry.dir))
                .with_context(|| format!("loading knowledge base `{}`", entry.name))?;
            if kbs.insert(entry.name.clone(), kb).is_some() {
                bail!(Error::Config(format!("knowledge base `{}` declared twice", entry.name)));
            }
        }
        Ok(Self { config, hash, vocab, kbs })
    }

    fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    fn corpus_examples(&self, path: &Path) -> Result<Vec<Example>> {
        let records: Vec<CorpusRecord> = data::read_jsonl(path)?;
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                data::corpus_example(r, &self.vocab, &self.kbs, self.max_len())
                    .with_context(|| format!("{}: record {}", path.display(), i + 1))
            })
            .collect()
    }

    fn supervised_examples(&self, path: &Path, kb: &str) -> Result<Vec<Example>> {
        let records: Vec<ElRecord> = data::read_jsonl(path)?;
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                data::supervised_example(r, &self.vocab, &self.kbs, kb, self.max_len())
                    .with_context(|| format!("{}: record {}", path.display(), i + 1))
            })
            .collect()
    }

    pub fn train_data(&self) -> Result<TrainData> {
        let mut data = TrainData::default();
        if let Some(p) = &self.config.corpus {
            data.unlabeled = self.corpus_examples(p)?;
        }
        for entry in &self.config.kb {
            if let Some(p) = &entry.supervision {
                data.supervised.insert(entry.name.clone(), self.supervised_examples(p, &entry.name)?);
            }
            if let Some(p) = &entry.validation {
                data.validation.insert(entry.name.clone(), self.supervised_examples(p, &entry.name)?);
            }
        }
        Ok(data)
    }

    /// Resumes from the run's checkpoint when present, otherwise starts a
    /// fresh session.
    pub fn session(&self) -> Result<Session<f64>> {
        let encoder = self.config.encoder_config(self.vocab.len());
        let path = self.config.checkpoint_path();
        if path.exists() {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.config != encoder || ckpt.seed != self.config.seed {
                bail!(Error::Config(format!(
                    "resume mismatch: {} was written with a different encoder configuration or seed",
                    path.display()
                )));
            }
            return Ok(ckpt.restore()?);
        }
        let model = Model::new(encoder, &self.kbs, self.config.seed)?;
        Ok(Session::new(model, self.config.train.optimizer.clone(), self.config.seed))
    }

    pub fn load_model(&self, checkpoint: Option<&Path>) -> Result<(Model<f64>, u64)> {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| self.config.checkpoint_path());
        if !path.exists() {
            bail!(Error::Config(format!("checkpoint `{}` does not exist", path.display())));
        }
        let session: Session<f64> = Checkpoint::load(&path)?.restore()?;
        for k in &session.model.config.kar {
            if !self.kbs.contains_key(&k.kb) {
                bail!(Error::Config(format!("checkpoint uses knowledge base `{}` which the configuration does not load", k.kb)));
            }
        }
        Ok((session.model, session.seed))
    }

    fn kb_entry(&self, name: Option<&str>, has: impl Fn(&KbEntry) -> bool, what: &str) -> Result<&KbEntry> {
        let matching: Vec<&KbEntry> = self
            .config
            .kb
            .iter()
            .filter(|k| name.is_none_or(|n| k.name == n))
            .filter(|k| has(k))
            .collect();
        match matching.as_slice() {
            [one] => Ok(one),
            [] => bail!(Error::Config(format!("no knowledge base{} provides {what}", name.map(|n| format!(" named `{n}`")).unwrap_or_default()))),
            _ => bail!(Error::Config(format!("several knowledge bases provide {what}; pick one with --kb"))),
        }
    }
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Benchmark {
    Facts,
    Senses,
}

pub fn synth(benchmark: Benchmark, out: &Path, config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let mut value = config::load_value(config, overrides)?;
    if let (Some(s), toml::Value::Table(t)) = (seed, &mut value) {
        t.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match benchmark {
        Benchmark::Facts => {
            let cfg: FactsConfig = config::decode(value, "facts benchmark configuration")?;
            let bench = FactsBenchmark::generate(&cfg)?;
            bench.write(out)?;
            write_run_template(out, &facts_run_template(&bench))?;
            println!(
                "wrote facts benchmark to {} ({} entities, {} corpus pairs, {} probes, seed {})",
                out.display(),
                bench.kb.entity_count(),
                bench.corpus.len(),
                bench.probes.len(),
                cfg.seed
            );
        }
        Benchmark::Senses => {
            let cfg: SensesConfig = config::decode(value, "senses benchmark configuration")?;
            let bench = SensesBenchmark::generate(&cfg)?;
            bench.write(out)?;
            data::write_jsonl(out.join("corpus.jsonl"), &bench.corpus())?;
            write_run_template(out, &senses_run_template(&bench))?;
            println!(
                "wrote senses benchmark to {} ({} entities, {} training sentences, {} test instances, seed {})",
                out.display(),
                bench.kb.entity_count(),
                bench.train.len(),
                bench.test_instances.len(),
                cfg.seed
            );
        }
    }
    Ok(())
}

fn write_run_template(out: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing run template")?;
    fs::write(out.join("run.toml"), text).with_context(|| format!("writing {}", out.join("run.toml").display()))
}

fn facts_run_template(b: &FactsBenchmark) -> RunConfig {
    let mut cfg = RunConfig {
        seed: b.config.seed,
        out_dir: "run".into(),
        vocab: "vocab.txt".into(),
        corpus: Some("corpus.jsonl".into()),
        eval_corpus: Some("eval_corpus.jsonl".into()),
        probes: Some("probes.jsonl".into()),
        ..Default::default()
    };
    cfg.encoder.max_len = 32;
    cfg.kb.push(KbEntry {
        name: b.kb.name().to_string(),
        dir: "kb".into(),
        supervision: Some("supervision.jsonl".into()),
        kar: kblm::kar::KarConfig {
            kb: b.kb.name().to_string(),
            layer: 2,
            ..Default::default()
        },
        ..Default::default()
    });
    cfg.linker.schedule.total_steps = 200;
    cfg.train.schedule.total_steps = 2000;
    cfg.eval.mrr.slots = vec![eval::Slot::Object];
    cfg
}

fn senses_run_template(b: &SensesBenchmark) -> RunConfig {
    let mut cfg = RunConfig {
        seed: b.config.seed,
        out_dir: "run".into(),
        vocab: "vocab.txt".into(),
        corpus: Some("corpus.jsonl".into()),
        ..Default::default()
    };
    cfg.encoder.max_len = 16;
    cfg.kb.push(KbEntry {
        name: b.kb.name().to_string(),
        dir: "kb".into(),
        supervision: Some("supervision.jsonl".into()),
        el_gold: Some("el_gold.jsonl".into()),
        wsd: Some("wsd.jsonl".into()),
        kar: kblm::kar::KarConfig {
            kb: b.kb.name().to_string(),
            layer: 2,
            ..Default::default()
        },
        ..Default::default()
    });
    cfg.linker.schedule.total_steps = 4000;
    cfg.linker.schedule.lr = 3e-3;
    cfg.train.schedule.total_steps = 1000;
    cfg
}

// ---------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Linker,
    Full,
}

#[derive(Serialize)]
struct LogLine<'a> {
    seed: u64,
    #[serde(flatten)]
    record: &'a StepRecord,
}

fn log_path(out: &Path, phase: &Phase) -> PathBuf {
    out.join("logs").join(format!("{}.jsonl", phase.tag().replace(':', "-")))
}

/// Opens the phase log, truncating it unless the phase is being resumed.
fn open_log(out: &Path, phase: &Phase, session: &Session<f64>) -> Result<BufWriter<File>> {
    let path = log_path(out, phase);
    fs::create_dir_all(path.parent().expect("logs dir")).with_context(|| format!("creating {}", out.display()))?;
    let resuming = session.progress.as_ref().is_some_and(|p| !p.done && p.phase == phase.tag());
    let file = if resuming {
        OpenOptions::new().append(true).create(true).open(&path)
    } else {
        File::create(&path)
    }
    .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(file))
}

struct Budget {
    remaining: Option<usize>,
}

impl Budget {
    fn exhausted(&self) -> bool {
        self.remaining == Some(0)
    }
}

fn observer<'a>(
    log: &'a mut BufWriter<File>,
    ckpt_path: &'a Path,
    every: usize,
    budget: &'a mut Budget,
    seed: u64,
) -> impl FnMut(&StepRecord, &Session<f64>) -> kblm::Result<Control> + 'a {
    move |record, session| {
        let line = serde_json::to_string(&LogLine { seed, record })?;
        writeln!(log, "{line}").map_err(|e| Error::Invalid(format!("writing training log: {e}")))?;
        if every > 0 && record.step % every == 0 {
            log.flush().map_err(|e| Error::Invalid(format!("writing training log: {e}")))?;
            Checkpoint::capture(session).save(ckpt_path)?;
        }
        if record.step % 100 == 0 {
            eprintln!("{} step {} loss {:.4}", record.phase, record.step, record.loss.total);
        }
        if let Some(r) = budget.remaining.as_mut() {
            *r = r.saturating_sub(1);
            if *r == 0 {
                return Ok(Control::Pause);
            }
        }
        Ok(Control::Continue)
    }
}

pub fn train(ws: &Workspace, stage: Stage, max_steps: Option<usize>) -> Result<()> {
    let cfg = &ws.config;
    let data = ws.train_data()?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let ckpt_path = cfg.checkpoint_path();
    let mut session = ws.session()?;
    let mut budget = Budget { remaining: max_steps };
    let paused = match stage {
        Stage::Linker => {
            let mut paused = false;
            for entry in &cfg.kb {
                let phase = Phase::Linker(entry.name.clone());
                let resuming = session.progress.as_ref().is_some_and(|p| !p.done && p.phase == phase.tag());
                if !resuming && session.stages.linker.contains_key(&entry.name) {
                    println!("linker stage for `{}` already complete", entry.name);
                    continue;
                }
                if budget.exhausted() {
                    paused = true;
                    break;
                }
                let mut log = open_log(&cfg.out_dir, &phase, &session)?;
                let summary = {
                    let mut obs = observer(&mut log, &ckpt_path, cfg.checkpoint_every, &mut budget, cfg.seed);
                    training::pretrain_linker(&mut session, &ws.kbs, &ws.vocab, &data, &entry.name, &cfg.linker, &mut obs)?
                };
                log.flush()?;
                if summary.skipped {
                    println!("linker stage for `{}` skipped: no entity-linking supervision", entry.name);
                } else if summary.paused {
                    paused = true;
                    break;
                } else {
                    println!(
                        "linker stage for `{}` finished after {} steps{}",
                        entry.name,
                        summary.steps,
                        if summary.stopped_early { " (early stop)" } else { "" }
                    );
                }
            }
            paused
        }
        Stage::Full => {
            let phase = Phase::Multitask;
            let resuming = session.progress.as_ref().is_some_and(|p| !p.done && p.phase == phase.tag());
            if !resuming && session.stages.multitask_steps > 0 {
                println!("multitask stage already complete");
                println!("checksum {}", session.model.checksum());
                return Ok(());
            }
            let mut log = open_log(&cfg.out_dir, &phase, &session)?;
            let summary = {
                let mut obs = observer(&mut log, &ckpt_path, cfg.checkpoint_every, &mut budget, cfg.seed);
                training::multitask_train(&mut session, &ws.kbs, &ws.vocab, &data, &cfg.train, &mut obs)?
            };
            log.flush()?;
            if !summary.paused {
                println!("multitask stage finished after {} steps", summary.steps);
            }
            summary.paused
        }
    };
    Checkpoint::capture(&session).save(&ckpt_path)?;
    if paused {
        println!("paused; rerun the same command to resume from {}", ckpt_path.display());
    }
    println!("checksum {}", session.model.checksum());
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Probe {
    Ppl,
    Mrr,
    El,
    Wsd,
}

pub fn evaluate(ws: &Workspace, probe: Probe, kb: Option<&str>, checkpoint: Option<&Path>) -> Result<Report> {
    let cfg = &ws.config;
    let (model, _) = ws.load_model(checkpoint)?;
    let report = match probe {
        Probe::Ppl => {
            let Some(path) = &cfg.eval_corpus else {
                bail!(Error::Config("the ppl probe needs `eval_corpus`".into()));
            };
            let examples = ws.corpus_examples(path)?;
            let r = eval::perplexity(&model, &examples, &ws.vocab, &ws.kbs, &cfg.eval.masking, cfg.seed)?;
            Report::new("perplexity", r.value, cfg.seed, &ws.hash).detail("positions", r.positions as f64)
        }
        Probe::Mrr => {
            let Some(path) = &cfg.probes else {
                bail!(Error::Config("the mrr probe needs `probes`".into()));
            };
            let tuples: Vec<ProbeTuple> = data::read_jsonl(path)?;
            let r = eval::mrr_probe(&model, &tuples, &ws.vocab, &ws.kbs, &cfg.eval.mrr)?;
            let mut rep = Report::new("mrr", r.total, cfg.seed, &ws.hash).detail("instances", r.instances as f64);
            rep.per_relation = r.per_relation;
            rep
        }
        Probe::El => {
            let entry = ws.kb_entry(kb, |k| k.el_gold.is_some(), "`el_gold`")?;
            let records: Vec<ElRecord> = data::read_jsonl(entry.el_gold.as_ref().expect("filtered"))?;
            let prf = eval::el_f1(&model, &records, &ws.vocab, &ws.kbs, &entry.name)?;
            Report::new("el_f1", prf.f1, cfg.seed, &ws.hash)
                .detail("precision", prf.precision)
                .detail("recall", prf.recall)
                .detail("correct", prf.correct as f64)
                .detail("predicted", prf.predicted as f64)
                .detail("gold", prf.gold as f64)
        }
        Probe::Wsd => {
            let entry = ws.kb_entry(kb, |k| k.wsd.is_some(), "`wsd`")?;
            let instances: Vec<RestrictedInstance> = data::read_jsonl(entry.wsd.as_ref().expect("filtered"))?;
            let r = eval::restricted_linking_accuracy(&model, &instances, &ws.vocab, &ws.kbs, &entry.name)?;
            Report::new("restricted_accuracy", r.accuracy, cfg.seed, &ws.hash)
                .detail("correct", r.correct as f64)
                .detail("evaluated", r.evaluated as f64)
                .detail("invalid", r.invalid as f64)
        }
    };
    let dir = cfg.out_dir.join("reports");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = format!("{probe:?}").to_lowercase();
    data::write_json(dir.join(format!("{stem}.json")), &report)?;
    fs::write(dir.join(format!("{stem}.txt")), report.to_table())?;
    print!("{}", report.to_table());
    Ok(report)
}

// ---------------------------------------------------------------- link

#[derive(Debug, Serialize)]
pub struct LinkedCandidate {
    pub entity: usize,
    pub name: String,
    pub prior: f64,
    pub psi: f64,
    pub psi_tilde: f64,
}

#[derive(Debug, Serialize)]
pub struct LinkedSpan {
    pub kb: String,
    /// Inclusive piece offsets into the sentence (without `[CLS]`).
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub candidates: Vec<LinkedCandidate>,
    /// `None` means NULL.
    pub chosen: Option<String>,
}

fn entity_label<S: kblm::Scalar>(kb: &KnowledgeBase<S>, id: usize) -> String {
    if id == kb.null_id() {
        "NULL".into()
    } else if id == kb.mask_id() {
        "MASK".into()
    } else {
        kb.entity_name(id).unwrap_or("?").to_string()
    }
}

pub fn link_sentence(ws: &Workspace, sentence: &str, checkpoint: Option<&Path>) -> Result<Vec<LinkedSpan>> {
    let (model, _) = ws.load_model(checkpoint)?;
    let pieces = vocab::tokenize(sentence, &ws.vocab);
    if pieces.is_empty() {
        bail!(Error::Invalid("sentence has no word pieces".into()));
    }
    let mut ex = Example::frame(&pieces, None, &ws.vocab, model.config.max_len)?;
    ex.select_candidates(&ws.kbs, &ws.vocab);
    let g = Graph::frozen(&model.params);
    let fwd = model.forward(&g, std::slice::from_ref(&ex), &ws.kbs)?;
    let mut out = Vec::new();
    for (name, outs) in &fwd.kar {
        let Some(vars) = &outs[0].vars else { continue };
        let kb = &ws.kbs[name];
        let t = g.tape();
        let psi = t.value(vars.psi);
        let psi_tilde = t.value(vars.psi_tilde.expect("full forward"));
        for (span, seg) in ex.candidates[name].spans.iter().zip(&vars.segments) {
            let candidates: Vec<LinkedCandidate> = span
                .candidates
                .iter()
                .zip(seg.clone())
                .map(|(c, r)| LinkedCandidate {
                    entity: c.entity,
                    name: entity_label(kb, c.entity),
                    prior: c.prior,
                    psi: psi.get(r, 0),
                    psi_tilde: psi_tilde.get(r, 0),
                })
                .collect();
            let best = candidates
                .iter()
                .filter(|c| c.psi_tilde > 0.0)
                .fold(None::<&LinkedCandidate>, |b, c| match b {
                    Some(b) if b.psi_tilde >= c.psi_tilde => Some(b),
                    _ => Some(c),
                });
            let chosen = best.filter(|c| !kb.is_reserved(c.entity)).map(|c| c.name.clone());
            let text = ex.pieces[span.start..=span.end]
                .iter()
                .map(|&p| ws.vocab.piece(p).unwrap_or(vocab::UNK))
                .collect::<Vec<_>>()
                .join(" ");
            out.push(LinkedSpan {
                kb: name.clone(),
                start: span.start - 1,
                end: span.end - 1,
                text,
                candidates,
                chosen,
            });
        }
    }
    Ok(out)
}

pub fn print_links(spans: &[LinkedSpan], top_k: usize) {
    if spans.is_empty() {
        println!("no candidate mentions");
        return;
    }
    for s in spans {
        println!(
            "[{}] {}..{} \"{}\" -> {}",
            s.kb,
            s.start,
            s.end,
            s.text,
            s.chosen.as_deref().unwrap_or("NULL")
        );
        let mut ranked: Vec<&LinkedCandidate> = s.candidates.iter().collect();
        ranked.sort_by(|a, b| b.psi.total_cmp(&a.psi));
        for c in ranked.into_iter().take(top_k) {
            println!(
                "    {:<24} prior {:.3}  psi {:>9.4}  psi~ {:.4}",
                c.name, c.prior, c.psi, c.psi_tilde
            );
        }
    }
}

// ---------------------------------------------------------------- trace

pub fn trace(out: Option<&Path>) -> Result<()> {
    let worked = WorkedExample::bundled()?;
    let computed = worked.compute()?;
    for (name, d) in computed.max_differences(&worked.trace) {
        eprintln!("{name:<10} max |computed - reference| = {d:.3e}");
    }
    let doc = serde_json::json!({ "inputs": worked.inputs, "trace": computed });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
