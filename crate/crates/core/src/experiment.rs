//! Data preparation, LM feature extraction and multi-seed comparison runs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::corpus::{convert_scheme, normalize, LabelScheme, SchemeKind, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{report, ReportRow};
use crate::langmodel::{Direction, LanguageModel, LmEmbeddingSet};
use crate::layers::load_embeddings;
use crate::persist::{lm_container, lm_from_container, Container};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tagger::{InsertionMode, TaggerConfig, TaggerModel};
use crate::training::{
    evaluate, multi_seed, summarize, train_tagger, welch_test, LabeledSet, RunResult, SampleSummary, TrainSettings,
};
use crate::tensor::Tensor;

/// Hex SHA-256 of a sentence's raw tokens.
pub fn sentence_hash(s: &Sentence) -> String {
    let mut h = Sha256::new();
    for (i, w) in s.raws().enumerate() {
        if i > 0 {
            h.update(b"\n");
        }
        h.update(w.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Rewrites every sentence's tags from `from` into `to`.
pub fn convert_sentences(sentences: &[Sentence], from: SchemeKind, to: SchemeKind) -> Result<Vec<Sentence>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tags = s
                .tags()
                .ok_or_else(|| Error::Data(format!("sentence {i} has no tags")))?;
            let tags = convert_scheme(tags, from, to).map_err(|e| Error::Data(format!("sentence {i}: {e}")))?;
            Sentence::new(s.tokens.clone(), Some(tags))
        })
        .collect()
}

/// Labeled splits with vocabularies and tag inventory, tags already in the
/// model's scheme.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Option<Vec<Sentence>>,
    pub words: Vocabulary,
    pub chars: Vocabulary,
    pub scheme: LabelScheme,
    /// `[words × dim]` pre-trained word vectors.
    pub pretrained: Option<Tensor<f64>>,
}

impl TaskData {
    /// Vocabularies come from `train` only; the tag inventory from all splits.
    pub fn prepare(
        train: Vec<Sentence>,
        dev: Vec<Sentence>,
        test: Option<Vec<Sentence>>,
        source: SchemeKind,
        target: SchemeKind,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let train = convert_sentences(&train, source, target)?;
        let dev = convert_sentences(&dev, source, target)?;
        let test = test.map(|t| convert_sentences(&t, source, target)).transpose()?;
        let all_tags = train
            .iter()
            .chain(&dev)
            .chain(test.iter().flatten())
            .flat_map(|s| s.tags().unwrap_or_default().iter().map(String::as_str));
        let scheme = LabelScheme::infer(target, all_tags)?;
        let words = Vocabulary::build(train.iter().flat_map(|s| s.norms()), 1);
        let chars = Vocabulary::build_chars(train.iter().flat_map(|s| s.raws()), 1);
        Ok(Self {
            train,
            dev,
            test,
            words,
            chars,
            scheme,
            pretrained: None,
        })
    }

    /// Adds the embedding file's words to the vocabulary and initializes the
    /// word table from it.
    pub fn with_pretrained(mut self, text: &str, seed: u64) -> Result<Self> {
        let file_words: Vec<String> = text
            .lines()
            .filter_map(|l| l.split_whitespace().next())
            .map(normalize)
            .collect();
        let words = Vocabulary::build(
            self.train.iter().flat_map(|s| s.norms()).chain(file_words.iter().map(String::as_str)),
            1,
        );
        let loaded = load_embeddings::<f64, _>(text.as_bytes(), &words, &mut RngStream::new(seed).fork(0x656d))?;
        self.words = words;
        self.pretrained = Some(loaded.table);
        Ok(self)
    }

    pub fn word_dim(&self) -> Option<usize> {
        self.pretrained.as_ref().map(Tensor::cols)
    }

    /// Fresh model whose initialization is drawn from `seed`.
    pub fn build_model<T: Scalar>(&self, config: &TaggerConfig, seed: u64) -> Result<TaggerModel<T>> {
        let pretrained = match &self.pretrained {
            Some(t) if config.mode != InsertionMode::LmOnly => Some(t.cast()),
            _ => None,
        };
        TaggerModel::new(
            config.clone(),
            self.words.clone(),
            self.chars.clone(),
            self.scheme.clone(),
            pretrained,
            &mut RngStream::new(seed).fork(0x696e),
        )
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.words.len(), self.chars.len(), self.scheme.num_tags())
    }
}

/// Which LM directions feed the tagger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmSelection {
    Forward,
    Backward,
    Both,
}

impl LmSelection {
    pub fn label(self) -> &'static str {
        match self {
            LmSelection::Forward => "fwd",
            LmSelection::Backward => "bwd",
            LmSelection::Both => "fwd+bwd",
        }
    }

    pub fn pick<T: Scalar>(self, set: &LmEmbeddingSet<T>) -> Result<Tensor<T>> {
        let missing = |d: &str| Error::Config(format!("no {d} language model loaded"));
        match self {
            LmSelection::Forward => set.forward.clone().ok_or_else(|| missing("forward")),
            LmSelection::Backward => set.backward.clone().ok_or_else(|| missing("backward")),
            LmSelection::Both => {
                let f = set.forward.as_ref().ok_or_else(|| missing("forward"))?;
                let b = set.backward.as_ref().ok_or_else(|| missing("backward"))?;
                Tensor::hcat(&[f, b])
            }
        }
    }
}

/// Frozen forward and/or backward LMs.
#[derive(Clone, Debug)]
pub struct LmEmbedder<T: Scalar = f64> {
    pub forward: Option<LanguageModel<T>>,
    pub backward: Option<LanguageModel<T>>,
    key: String,
}

impl<T: Scalar> LmEmbedder<T> {
    pub fn new(forward: Option<LanguageModel<T>>, backward: Option<LanguageModel<T>>) -> Result<Self> {
        if forward.is_none() && backward.is_none() {
            return Err(Error::Config("at least one language model direction is required".into()));
        }
        for (m, want) in [(&forward, Direction::Forward), (&backward, Direction::Backward)] {
            if let Some(m) = m {
                if m.direction() != want {
                    return Err(Error::Config(format!("expected a {want:?} language model")));
                }
            }
        }
        let mut h = Sha256::new();
        for m in [&forward, &backward] {
            h.update(m.as_ref().map(|m| lm_container(m).checksum()).unwrap_or_default());
            h.update(b"/");
        }
        let key = hex::encode(h.finalize());
        let freeze = |m: Option<LanguageModel<T>>| {
            m.map(|mut m| {
                m.freeze();
                m
            })
        };
        Ok(Self {
            forward: freeze(forward),
            backward: freeze(backward),
            key,
        })
    }

    /// Identifies the model pair; cache entries are only valid under it.
    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn dim(&self, selection: LmSelection) -> usize {
        let f = self.forward.as_ref().map_or(0, LanguageModel::output_dim);
        let b = self.backward.as_ref().map_or(0, LanguageModel::output_dim);
        match selection {
            LmSelection::Forward => f,
            LmSelection::Backward => b,
            LmSelection::Both => f + b,
        }
    }

    /// The widest selection the loaded models support.
    pub fn default_selection(&self) -> LmSelection {
        match (&self.forward, &self.backward) {
            (Some(_), Some(_)) => LmSelection::Both,
            (Some(_), None) => LmSelection::Forward,
            _ => LmSelection::Backward,
        }
    }

    pub fn extract(&self, s: &Sentence) -> Result<LmEmbeddingSet<T>> {
        Ok(LmEmbeddingSet {
            forward: self.forward.as_ref().map(|m| m.embeddings(s)).transpose()?,
            backward: self.backward.as_ref().map(|m| m.embeddings(s)).transpose()?,
        })
    }

    /// Embeddings for every sentence, reusing and filling `cache`.
    pub fn extract_all(&self, sentences: &[Sentence], cache: &mut EmbeddingCache<T>) -> Result<Vec<LmEmbeddingSet<T>>> {
        if cache.key != self.key {
            return Err(Error::Config("embedding cache was built from different language models".into()));
        }
        let hashes: Vec<String> = sentences.par_iter().map(sentence_hash).collect();
        let fresh: Vec<(String, LmEmbeddingSet<T>)> = sentences
            .par_iter()
            .zip(&hashes)
            .filter(|(_, h)| !cache.entries.contains_key(*h))
            .map(|(s, h)| Ok((h.clone(), self.extract(s)?)))
            .collect::<Result<_>>()?;
        cache.entries.extend(fresh);
        Ok(hashes.iter().map(|h| cache.entries[h].clone()).collect())
    }
}

pub const CACHE_KIND: &str = "lm-embeddings";

/// Per-sentence LM embeddings keyed by sentence hash.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache<T: Scalar = f64> {
    pub key: String,
    pub entries: BTreeMap<String, LmEmbeddingSet<T>>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    key: String,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn for_embedder(e: &LmEmbedder<T>) -> Self {
        Self {
            key: e.key().to_string(),
            entries: BTreeMap::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = toml::to_string(&CacheMeta { key: self.key.clone() }).expect("metadata serializes");
        let mut c = Container::new(CACHE_KIND, meta);
        for (h, set) in &self.entries {
            if let Some(f) = &set.forward {
                c.push(format!("{h}.fwd"), f);
            }
            if let Some(b) = &set.backward {
                c.push(format!("{h}.bwd"), b);
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CACHE_KIND {
            return Err(Error::Container(format!("container holds a `{}`, expected `{CACHE_KIND}`", c.kind)));
        }
        let meta: CacheMeta = c.meta_as()?;
        let mut entries: BTreeMap<String, LmEmbeddingSet<T>> = BTreeMap::new();
        for st in &c.tensors {
            let (h, dir) = st
                .name
                .rsplit_once('.')
                .ok_or_else(|| Error::Container(format!("bad cache entry `{}`", st.name)))?;
            let t = c.tensor::<T>(&st.name)?;
            let e = entries.entry(h.to_string()).or_insert(LmEmbeddingSet {
                forward: None,
                backward: None,
            });
            match dir {
                "fwd" => e.forward = Some(t),
                "bwd" => e.backward = Some(t),
                _ => return Err(Error::Container(format!("bad cache entry `{}`", st.name))),
            }
        }
        Ok(Self { key: meta.key, entries })
    }
}

/// LM embedding sets aligned with the task splits.
#[derive(Clone, Debug)]
pub struct LmFeatures<T: Scalar = f64> {
    pub train: Vec<LmEmbeddingSet<T>>,
    pub dev: Vec<LmEmbeddingSet<T>>,
    pub test: Option<Vec<LmEmbeddingSet<T>>>,
    pub forward_dim: usize,
    pub backward_dim: usize,
}

impl<T: Scalar> LmFeatures<T> {
    pub fn extract(embedder: &LmEmbedder<T>, task: &TaskData, cache: &mut EmbeddingCache<T>) -> Result<Self> {
        Ok(Self {
            train: embedder.extract_all(&task.train, cache)?,
            dev: embedder.extract_all(&task.dev, cache)?,
            test: task.test.as_ref().map(|t| embedder.extract_all(t, cache)).transpose()?,
            forward_dim: embedder.dim(LmSelection::Forward),
            backward_dim: embedder.dim(LmSelection::Backward),
        })
    }

    pub fn dim(&self, selection: LmSelection) -> usize {
        match selection {
            LmSelection::Forward => self.forward_dim,
            LmSelection::Backward => self.backward_dim,
            LmSelection::Both => self.forward_dim + self.backward_dim,
        }
    }

    pub fn has(&self, selection: LmSelection) -> bool {
        match selection {
            LmSelection::Forward => self.forward_dim > 0,
            LmSelection::Backward => self.backward_dim > 0,
            LmSelection::Both => self.forward_dim > 0 && self.backward_dim > 0,
        }
    }

    pub fn default_selection(&self) -> LmSelection {
        match (self.forward_dim > 0, self.backward_dim > 0) {
            (true, true) => LmSelection::Both,
            (true, false) => LmSelection::Forward,
            _ => LmSelection::Backward,
        }
    }
}

/// One named tagger configuration in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TaggerConfig,
    pub lm: Option<LmSelection>,
    /// Train on this fraction of the training split instead of all of it.
    pub subsample: Option<f64>,
}

impl Variant {
    pub fn baseline(name: impl Into<String>, base: &TaggerConfig) -> Self {
        Self {
            name: name.into(),
            config: base.clone().with_lm(InsertionMode::None, 0),
            lm: None,
            subsample: None,
        }
    }

    pub fn with_lm(name: impl Into<String>, base: &TaggerConfig, mode: InsertionMode, lm: LmSelection, dim: usize) -> Self {
        Self {
            name: name.into(),
            config: base.clone().with_lm(mode, dim),
            lm: Some(lm),
            subsample: None,
        }
    }
}

fn labeled<T: Scalar>(
    sentences: &[Sentence],
    features: Option<&Vec<LmEmbeddingSet<T>>>,
    lm: Option<LmSelection>,
) -> Result<LabeledSet<T>> {
    let lm = match (lm, features) {
        (None, _) => None,
        (Some(sel), Some(f)) => Some(f.iter().map(|s| sel.pick(s)).collect::<Result<Vec<_>>>()?),
        (Some(_), None) => return Err(Error::Config("variant needs LM embeddings but none were provided".into())),
    };
    LabeledSet::new(sentences.to_vec(), lm)
}

/// Sentences and their LM features for each split of one variant.
pub struct VariantData<T: Scalar = f64> {
    pub train: LabeledSet<T>,
    pub dev: LabeledSet<T>,
    pub test: Option<LabeledSet<T>>,
}

impl<T: Scalar> VariantData<T> {
    pub fn build(task: &TaskData, features: Option<&LmFeatures<T>>, variant: &Variant, subsample_seed: u64) -> Result<Self> {
        if variant.config.mode.uses_lm() != variant.lm.is_some() {
            return Err(Error::Config(format!(
                "variant `{}`: mode {} does not match its LM selection",
                variant.name, variant.config.mode
            )));
        }
        let mut train = labeled(&task.train, features.map(|f| &f.train), variant.lm)?;
        if let Some(frac) = variant.subsample {
            train = subsample_set(&train, frac, subsample_seed)?;
        }
        Ok(Self {
            train,
            dev: labeled(&task.dev, features.map(|f| &f.dev), variant.lm)?,
            test: task
                .test
                .as_ref()
                .map(|t| labeled(t, features.and_then(|f| f.test.as_ref()), variant.lm))
                .transpose()?,
        })
    }
}

/// Same draw as `corpus::subsample`, carried over to the LM features.
pub fn subsample_set<T: Scalar>(set: &LabeledSet<T>, fraction: f64, seed: u64) -> Result<LabeledSet<T>> {
    let picked = crate::corpus::subsample_indices(set.len(), fraction, &mut RngStream::new(seed).fork(0x7373))?;
    LabeledSet::new(
        picked.iter().map(|&i| set.sentences[i].clone()).collect(),
        set.lm.as_ref().map(|l| picked.iter().map(|&i| l[i].clone()).collect()),
    )
}

/// Trains and scores one variant for a single seed.
pub fn run_variant_seed<T: Scalar>(
    task: &TaskData,
    data: &VariantData<T>,
    variant: &Variant,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(RunResult, TaggerModel<T>)> {
    if data.train.is_empty() {
        return Err(Error::Data(format!("variant `{}` has no training sentences", variant.name)));
    }
    let model = task.build_model::<T>(&variant.config, seed)?;
    let trained = train_tagger(model, &data.train, &data.dev, settings, seed)?;
    let dev_counts = evaluate(&trained.best, &data.dev)?;
    let test_counts = data.test.as_ref().map(|t| evaluate(&trained.best, t)).transpose()?;
    Ok((
        RunResult {
            seed,
            log: trained.log,
            best_epoch: trained.best_epoch,
            dev_f1: dev_counts.f1(),
            test_f1: test_counts.as_ref().map(|c| c.f1()),
            dev_counts,
            test_counts,
        },
        trained.best,
    ))
}

/// All seeds of one variant.
pub fn run_variant<T: Scalar>(
    task: &TaskData,
    features: Option<&LmFeatures<T>>,
    variant: &Variant,
    settings: &TrainSettings,
    seeds: &[u64],
    subsample_seed: u64,
) -> Result<Vec<RunResult>> {
    let data = VariantData::build(task, features, variant, subsample_seed)?;
    multi_seed(seeds, |s| Ok(run_variant_seed(task, &data, variant, settings, s)?.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Insertion,
    LmCombo,
    NoRnn,
    ParamMatch,
    Subsample,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::Insertion,
        AblationKind::LmCombo,
        AblationKind::NoRnn,
        AblationKind::ParamMatch,
        AblationKind::Subsample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::Insertion => "insertion",
            AblationKind::LmCombo => "lm-combo",
            AblationKind::NoRnn => "no-rnn",
            AblationKind::ParamMatch => "param-match",
            AblationKind::Subsample => "subsample",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation `{s}` (expected one of insertion, lm-combo, no-rnn, param-match, subsample)")))
    }
}

pub const BASELINE_NAME: &str = "no LM";

/// The configurations compared by an ablation. `base` supplies the task
/// network and the TagLM insertion mode.
pub fn ablation_variants(
    kind: AblationKind,
    base: &TaggerConfig,
    task: &TaskData,
    features: &LmFeatures<impl Scalar>,
    subsample_fraction: f64,
) -> Result<Vec<Variant>> {
    let sel = features.default_selection();
    let dim = features.dim(sel);
    let mode = if base.mode.uses_lm() { base.mode } else { InsertionMode::OutputFirst };
    let taglm = |name: &str| Variant::with_lm(name, base, mode, sel, dim);
    let baseline = Variant::baseline(BASELINE_NAME, base);
    Ok(match kind {
        AblationKind::Insertion => [InsertionMode::InputFirst, InsertionMode::OutputFirst, InsertionMode::OutputSecond]
            .into_iter()
            .map(|m| Variant::with_lm(m.as_str(), base, m, sel, dim))
            .collect(),
        AblationKind::LmCombo => {
            let mut v = vec![baseline];
            for s in [LmSelection::Forward, LmSelection::Backward, LmSelection::Both] {
                if features.has(s) {
                    v.push(Variant::with_lm(s.label(), base, mode, s, features.dim(s)));
                }
            }
            v
        }
        AblationKind::NoRnn => vec![
            baseline,
            taglm("TagLM"),
            Variant::with_lm(InsertionMode::LmOnly.as_str(), base, InsertionMode::LmOnly, sel, dim),
        ],
        AblationKind::ParamMatch => {
            let (nw, nc, nt) = task.counts();
            let with = taglm("TagLM");
            let n_base = baseline.config.parameter_count(nw, nc, nt);
            let n_lm = with.config.parameter_count(nw, nc, nt);
            let mut big = baseline.clone();
            big.name = "no LM, matched".into();
            big.config = baseline.config.match_parameters(n_lm, nw, nc, nt)?;
            let mut small = with.clone();
            small.name = "TagLM, matched".into();
            small.config = with.config.match_parameters(n_base, nw, nc, nt)?;
            vec![baseline, with, big, small]
        }
        AblationKind::Subsample => {
            let mut b = baseline;
            let mut t = taglm("TagLM");
            b.subsample = Some(subsample_fraction);
            t.subsample = Some(subsample_fraction);
            vec![b, t]
        }
    })
}

/// Per-variant runs with a summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variants: Vec<Variant>,
    pub runs: Vec<Vec<RunResult>>,
}

impl Comparison {
    pub fn run<T: Scalar>(
        task: &TaskData,
        features: Option<&LmFeatures<T>>,
        variants: Vec<Variant>,
        settings: &TrainSettings,
        seeds: &[u64],
        subsample_seed: u64,
    ) -> Result<Self> {
        let runs = variants
            .iter()
            .map(|v| run_variant(task, features, v, settings, seeds, subsample_seed))
            .collect::<Result<_>>()?;
        Ok(Self { variants, runs })
    }

    pub fn scores(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.variants.iter().position(|v| v.name == name)?;
        Some(self.runs[i].iter().map(RunResult::headline_f1).collect())
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.variants
            .iter()
            .zip(&self.runs)
            .map(|(v, r)| {
                let f1: Vec<f64> = r.iter().map(RunResult::headline_f1).collect();
                let (mean, std) = summarize(&f1);
                ReportRow {
                    name: v.name.clone(),
                    mean,
                    std,
                    runs: f1.len(),
                }
            })
            .collect()
    }

    /// Table plus, when a baseline row exists, Welch p-values against it.
    pub fn table(&self) -> String {
        let base = self.variants.iter().any(|v| v.name == BASELINE_NAME).then_some(BASELINE_NAME);
        let mut out = report(&self.rows(), base);
        if let Some(b) = base.and_then(|b| self.scores(b)) {
            for (v, r) in self.variants.iter().zip(&self.runs) {
                if v.name == BASELINE_NAME || r.len() < 2 || b.len() < 2 {
                    continue;
                }
                let f1: Vec<f64> = r.iter().map(RunResult::headline_f1).collect();
                if let Ok(w) = welch_test(SampleSummary::of(&f1), SampleSummary::of(&b)) {
                    out.push_str(&format!("{} vs {BASELINE_NAME}: t = {:.3}, p = {:.4}\n", v.name, w.t, w.p));
                }
            }
        }
        out
    }
}

/// Loads whichever LM containers are given.
pub fn load_embedder<T: Scalar>(forward: Option<&Path>, backward: Option<&Path>) -> Result<Option<LmEmbedder<T>>> {
    let load = |p: Option<&Path>| p.map(|p| lm_from_container::<T>(&Container::load(p)?)).transpose();
    let (f, b) = (load(forward)?, load(backward)?);
    if f.is_none() && b.is_none() {
        return Ok(None);
    }
    LmEmbedder::new(f, b).map(Some)
}

/// Reads the splits, converts their tags and loads pre-trained vectors.
pub fn prepare_task(cfg: &ExperimentConfig, tagger: &TaggerConfig) -> Result<TaskData> {
    let (train, dev, test) = cfg.read_splits()?;
    let task = TaskData::prepare(train, dev, test, cfg.data.source_scheme, tagger.scheme)?;
    match &cfg.data.embeddings {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let task = task.with_pretrained(&text, cfg.data.subsample_seed)?;
            if task.word_dim() != Some(tagger.word_dim) {
                return Err(Error::Config(format!(
                    "embedding file has dimension {:?} but word_dim is {}",
                    task.word_dim(),
                    tagger.word_dim
                )));
            }
            Ok(task)
        }
        None => Ok(task),
    }
}

/// LM features for the task, going through the configured cache file.
pub fn prepare_features<T: Scalar>(cfg: &ExperimentConfig, task: &TaskData) -> Result<Option<LmFeatures<T>>> {
    let Some(embedder) = load_embedder::<T>(cfg.lm.forward_path().as_deref(), cfg.lm.backward_path().as_deref())? else {
        return Ok(None);
    };
    let mut cache = match &cfg.lm.cache {
        Some(p) if p.exists() => {
            let c = EmbeddingCache::from_container(&Container::load(p)?)?;
            if c.key == embedder.key() {
                c
            } else {
                EmbeddingCache::for_embedder(&embedder)
            }
        }
        _ => EmbeddingCache::for_embedder(&embedder),
    };
    let features = LmFeatures::extract(&embedder, task, &mut cache)?;
    if let Some(p) = &cfg.lm.cache {
        cache.to_container().save(p)?;
    }
    Ok(Some(features))
}

/// The config's tagger with its LM width filled in from `features`.
pub fn main_variant<T: Scalar>(tagger: &TaggerConfig, features: Option<&LmFeatures<T>>) -> Result<Variant> {
    if !tagger.mode.uses_lm() {
        return Ok(Variant::baseline("model", tagger));
    }
    let f = features.ok_or_else(|| Error::Config(format!("mode {} needs a language model", tagger.mode)))?;
    let sel = f.default_selection();
    Ok(Variant::with_lm("model", tagger, tagger.mode, sel, f.dim(sel)))
}
