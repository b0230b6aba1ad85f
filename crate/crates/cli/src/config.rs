//! Run configuration: one TOML file plus `--set key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use kblm::eval::MrrConfig;
use kblm::kar::KarConfig;
use kblm::model::EncoderConfig;
use kblm::training::{MaskingConfig, TrainConfig};
use kblm::Error;

/// One knowledge base and the KAR inserted for it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbEntry {
    pub name: String,
    /// Directory holding `entities.jsonl`, `embeddings.txt`, `dictionary.jsonl`.
    pub dir: PathBuf,
    pub supervision: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Gold links for the `el` probe.
    pub el_gold: Option<PathBuf>,
    /// Restricted instances for the `wsd` probe.
    pub wsd: Option<PathBuf>,
    pub kar: KarConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub masking: MaskingConfig,
    pub mrr: MrrConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub vocab: PathBuf,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub probes: Option<PathBuf>,
    /// Knowledge bases in insertion order (bottom to top).
    pub kb: Vec<KbEntry>,
    /// Encoder shape; its KAR list is built from `kb`.
    pub encoder: EncoderConfig,
    pub linker: TrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Save a checkpoint every this many updates; 0 saves only at the end
    /// of a stage or on pause.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            vocab: PathBuf::from("vocab.txt"),
            corpus: None,
            eval_corpus: None,
            probes: None,
            kb: Vec::new(),
            encoder: EncoderConfig::default(),
            linker: TrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 0,
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies `a.b.c=value`; numeric segments index arrays.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let Some((path, value)) = spec.split_once('=') else {
        bail!(Error::Config(format!("override `{spec}` is not of the form key.path=value")));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(Error::Config(format!("empty key in override `{spec}`")));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(key.to_string(), parse_literal(value.trim()));
                    return Ok(());
                }
                t.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}` in override `{spec}` must index an array")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range ({len}) in override `{spec}`")))?;
                if last {
                    *slot = parse_literal(value.trim());
                    return Ok(());
                }
                slot
            }
            _ => bail!(Error::Config(format!("`{key}` in override `{spec}` is not a table"))),
        };
    }
    Ok(())
}

/// Loads a TOML document (or an empty one) and applies overrides.
pub fn load_value(path: Option<&Path>, overrides: &[String]) -> Result<toml::Value> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::Value::Table(toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    Ok(value)
}

pub fn decode<T: serde::de::DeserializeOwned>(value: toml::Value, what: &str) -> Result<T> {
    Ok(value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{what}: {e}")))?)
}

impl RunConfig {
    /// Reads the file, applies overrides, resolves relative paths against
    /// the file's directory and checks that every input exists.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, String)> {
        let value = load_value(Some(path), overrides)?;
        let mut cfg: RunConfig = decode(value, "run configuration")?;
        let hash = cfg.hash();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok((cfg, hash))
    }

    /// Digest of every behavior-affecting setting; the output directory is
    /// excluded so identical runs in different places hash alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        kblm::data::hash_json(&c)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.vocab);
        for p in [&mut self.corpus, &mut self.eval_corpus, &mut self.probes].into_iter().flatten() {
            fix(p);
        }
        for kb in &mut self.kb {
            fix(&mut kb.dir);
            for p in [&mut kb.supervision, &mut kb.validation, &mut kb.el_gold, &mut kb.wsd].into_iter().flatten() {
                fix(p);
            }
            kb.kar.kb = kb.name.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let must_exist = |p: &Path, what: &str| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                bail!(Error::Config(format!("{what} `{}` does not exist", p.display())))
            }
        };
        must_exist(&self.vocab, "vocab")?;
        for (p, what) in [(&self.corpus, "corpus"), (&self.eval_corpus, "eval_corpus"), (&self.probes, "probes")] {
            if let Some(p) = p {
                must_exist(p, what)?;
            }
        }
        for kb in &self.kb {
            if kb.name.is_empty() {
                bail!(Error::Config("every [[kb]] needs a name".into()));
            }
            must_exist(&kb.dir, "knowledge base directory")?;
            for (p, what) in [
                (&kb.supervision, "supervision"),
                (&kb.validation, "validation"),
                (&kb.el_gold, "el_gold"),
                (&kb.wsd, "wsd"),
            ] {
                if let Some(p) = p {
                    must_exist(p, what)?;
                }
            }
        }
        if !self.encoder.kar.is_empty() {
            bail!(Error::Config("declare KARs under [[kb]] entries, not encoder.kar".into()));
        }
        self.linker.validate()?;
        self.train.validate()?;
        self.eval.masking.validate()?;
        Ok(())
    }

    /// Encoder configuration with the KAR list filled in.
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let mut enc = self.encoder.clone();
        enc.vocab_size = vocab_size;
        enc.kar = self.kb.iter().map(|k| k.kar.clone()).collect();
        enc
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_and_array_keys() {
        let mut v: toml::Value = toml::from_str::<toml::Table>("seed = 1\n[[kb]]\nname = \"a\"\n").map(toml::Value::Table).unwrap();
        apply_override(&mut v, "seed=9").unwrap();
        apply_override(&mut v, "train.schedule.total_steps=12").unwrap();
        apply_override(&mut v, "kb.0.kar.layer=2").unwrap();
        apply_override(&mut v, "out_dir=some/where").unwrap();
        let c: RunConfig = decode(v, "test").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.schedule.total_steps, 12);
        assert_eq!(c.kb[0].kar.layer, 2);
        assert_eq!(c.out_dir, PathBuf::from("some/where"));
    }

    #[test]
    fn bad_overrides_are_validation_errors() {
        let mut v = toml::Value::Table(toml::Table::new());
        let e = apply_override(&mut v, "no_equals").unwrap_err();
        assert!(e.downcast_ref::<Error>().is_some_and(Error::is_validation));
        let e = decode::<RunConfig>(toml::Value::Table(toml::from_str("bogus = 1").unwrap()), "x").unwrap_err();
        assert!(e.downcast_ref::<Error>().is_some_and(Error::is_validation));
    }
}
