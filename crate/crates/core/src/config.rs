//! Experiment configuration files.
//!
//! A config is a TOML document: `key = value` lines grouped under
//! `[section]` headers. Relative paths resolve against the file's directory.
//!
//! ```toml
//! seeds = [1, 2, 3]
//! output_dir = "runs/ner"
//!
//! [data]
//! train = "train.txt"
//! dev = "dev.txt"
//! columns = 4
//! tag_column = 3
//! source_scheme = "iob1"
//!
//! [model]
//! preset = "conll2003-ner"
//! mode = "output_first"
//!
//! [lm]
//! forward = "fwd.lm"
//! backward = "none"
//!
//! [training]
//! batch_size = 16
//!
//! [training.schedule]
//! initial_lr = 0.001
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{read_conll, SchemeKind, Sentence};
use crate::error::{Error, Result};
use crate::tagger::{InsertionMode, TaggerConfig};
use crate::training::TrainSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_columns")]
    pub columns: usize,
    /// Zero-based column holding the tag.
    #[serde(default = "default_tag_column")]
    pub tag_column: usize,
    #[serde(default = "default_source_scheme")]
    pub source_scheme: SchemeKind,
    /// Pre-trained word vectors, one `word v1 … vd` per line.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub subsample_fraction: f64,
    #[serde(default)]
    pub subsample_seed: u64,
}

fn default_columns() -> usize {
    4
}
fn default_tag_column() -> usize {
    3
}
fn default_source_scheme() -> SchemeKind {
    SchemeKind::Iob1
}
fn default_fraction() -> f64 {
    0.01
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Option<String>,
    pub tagger: Option<TaggerConfig>,
    /// Overrides the insertion mode of the preset or explicit config.
    pub mode: Option<InsertionMode>,
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<TaggerConfig> {
        let mut cfg = match (&self.preset, &self.tagger) {
            (Some(_), Some(_)) => return Err(Error::Config("give either model.preset or model.tagger, not both".into())),
            (Some(p), None) => TaggerConfig::preset(p)?,
            (None, Some(t)) => t.clone(),
            (None, None) => return Err(Error::Config("model.preset or model.tagger is required".into())),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        Ok(cfg)
    }
}

/// A model path, or the literal `none`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmRefs {
    #[serde(default)]
    pub forward: Option<String>,
    #[serde(default)]
    pub backward: Option<String>,
    /// Embedding cache container, read if present and written back.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn model_path(v: &Option<String>) -> Option<PathBuf> {
    v.as_deref().filter(|s| *s != "none").map(PathBuf::from)
}

impl LmRefs {
    pub fn forward_path(&self) -> Option<PathBuf> {
        model_path(&self.forward)
    }

    pub fn backward_path(&self) -> Option<PathBuf> {
        model_path(&self.backward)
    }

    pub fn any(&self) -> bool {
        self.forward_path().is_some() || self.backward_path().is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub lm: LmRefs,
    #[serde(default)]
    pub training: TrainSettings,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` and makes its relative paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.train);
        fix(&mut self.data.dev);
        self.data.test.as_mut().map(fix);
        self.data.embeddings.as_mut().map(fix);
        self.lm.cache.as_mut().map(fix);
        for m in [&mut self.lm.forward, &mut self.lm.backward] {
            if let Some(s) = m.as_mut().filter(|s| *s != "none") {
                let p = Path::new(s.as_str());
                if p.is_relative() {
                    *s = base.join(p).to_string_lossy().into_owned();
                }
            }
        }
    }

    /// Checks everything that can be checked without reading data, so a bad
    /// mode/LM combination fails before any training.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let tagger = self.model.resolve()?;
        tagger.clone().with_lm(InsertionMode::None, 0).validate()?;
        self.training.schedule.validate()?;
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if tagger.mode.uses_lm() && !self.lm.any() {
            return Err(Error::Config(format!(
                "mode {} needs a language model but lm.forward and lm.backward are both none",
                tagger.mode
            )));
        }
        Ok(())
    }

    /// Train, dev and optional test splits with their source tags.
    pub fn read_splits(&self) -> Result<(Vec<Sentence>, Vec<Sentence>, Option<Vec<Sentence>>)> {
        let d = &self.data;
        let read = |p: &Path| read_conll(p, d.columns, d.tag_column);
        Ok((read(&d.train)?, read(&d.dev)?, d.test.as_deref().map(read).transpose()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seeds = [3, 4]
output_dir = "out"

[data]
train = "train.txt"
dev = "/abs/dev.txt"

[model]
preset = "desk-ner"
mode = "output_first"

[lm]
forward = "f.lm"
backward = "none"

[training]
batch_size = 8

[training.schedule]
initial_lr = 0.01
patience = 2
"#;

    #[test]
    fn parses_and_rebases() {
        let mut c = ExperimentConfig::parse(EXAMPLE).unwrap();
        c.rebase(Path::new("/cfg"));
        assert_eq!(c.seeds, [3, 4]);
        assert_eq!(c.data.train, Path::new("/cfg/train.txt"));
        assert_eq!(c.data.dev, Path::new("/abs/dev.txt"));
        assert_eq!(c.data.source_scheme, SchemeKind::Iob1);
        assert_eq!(c.lm.forward_path(), Some(PathBuf::from("/cfg/f.lm")));
        assert_eq!(c.lm.backward_path(), None);
        assert_eq!(c.training.schedule.initial_lr, 0.01);
        assert_eq!(c.training.schedule.anneal_epochs, 5);
        assert_eq!(c.model.resolve().unwrap().mode, InsertionMode::OutputFirst);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let c = ExperimentConfig::parse(EXAMPLE).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn lm_mode_without_lm_rejected() {
        let text = EXAMPLE.replace("forward = \"f.lm\"", "forward = \"none\"");
        let err = ExperimentConfig::parse(&text).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let ok = text.replace("mode = \"output_first\"", "mode = \"none\"");
        ExperimentConfig::parse(&ok).unwrap().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = EXAMPLE.replace("seeds", "sedes");
        assert!(ExperimentConfig::parse(&text).is_err());
    }
}
