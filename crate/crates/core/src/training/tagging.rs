use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_schedule, AdamState, EpochRecord, EpochRunner, ScheduleConfig, CLIP_NORM};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::evaluation::{score, EvalCounts};
use crate::graph::{clip_gradients, GradBuffer, Graph, ParamStore};
use crate::layers::Phase;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tagger::TaggerModel;
use crate::tensor::Tensor;

/// Sentences tagged in the model's scheme, with their LM embeddings when
/// the model takes them.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet<T: Scalar = f64> {
    pub sentences: Vec<Sentence>,
    pub lm: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn new(sentences: Vec<Sentence>, lm: Option<Vec<Tensor<T>>>) -> Result<Self> {
        if let Some(l) = &lm {
            if l.len() != sentences.len() {
                return Err(Error::Data(format!(
                    "{} LM embedding matrices for {} sentences",
                    l.len(),
                    sentences.len()
                )));
            }
        }
        Ok(Self { sentences, lm })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn lm_for(&self, i: usize) -> Option<&Tensor<T>> {
        self.lm.as_ref().map(|l| &l[i])
    }

    pub fn gold(&self) -> Result<Vec<Vec<String>>> {
        self.sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.tags()
                    .map(<[String]>::to_vec)
                    .ok_or_else(|| Error::Data(format!("sentence {i} has no tags")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub clip: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            batch_size: 16,
            clip: CLIP_NORM,
        }
    }
}

pub fn predict_all<T: Scalar>(model: &TaggerModel<T>, set: &LabeledSet<T>) -> Result<Vec<Vec<String>>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| model.predict(&set.sentences[i], set.lm_for(i)))
        .collect()
}

pub fn evaluate<T: Scalar>(model: &TaggerModel<T>, set: &LabeledSet<T>) -> Result<EvalCounts> {
    let predicted = predict_all(model, set)?;
    score(&set.gold()?, &predicted, model.scheme.kind())
}

struct TaggerRunner<'a, T: Scalar> {
    model: TaggerModel<T>,
    adam: AdamState<T>,
    train: &'a LabeledSet<T>,
    dev: &'a LabeledSet<T>,
    settings: &'a TrainSettings,
    rng: RngStream,
    order: Vec<usize>,
}

impl<T: Scalar> EpochRunner for TaggerRunner<'_, T> {
    type Checkpoint = (ParamStore<T>, AdamState<T>);

    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
        self.rng.shuffle(&mut self.order);
        let mut grads = GradBuffer::for_store(&self.model.store);
        let mut total = 0.0;
        for batch in self.order.chunks(self.settings.batch_size) {
            grads.zero();
            for &i in batch {
                let mut g = Graph::with_params(&self.model.store);
                let loss = self.model.loss(
                    &mut g,
                    &self.train.sentences[i],
                    self.train.lm_for(i),
                    &mut Phase::Train(&mut self.rng),
                )?;
                let value = g.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite tagger loss at epoch {epoch}, sentence {i}")));
                }
                total += value;
                grads.accumulate(&g.backward(loss)?);
            }
            grads.scale(T::one() / T::from_usize_lossy(batch.len()));
            clip_gradients(&self.model.store, &mut grads, T::lit(self.settings.clip))?;
            self.adam.step(&mut self.model.store, &grads, lr)?;
        }
        Ok(total / self.order.len() as f64)
    }

    fn dev_score(&mut self) -> Result<f64> {
        Ok(evaluate(&self.model, self.dev)?.f1())
    }

    fn checkpoint(&self) -> Self::Checkpoint {
        (self.model.store.clone(), self.adam.clone())
    }

    fn restore(&mut self, c: &Self::Checkpoint) {
        self.model.store.copy_values_from(&c.0).expect("same parameter layout");
        self.adam = c.1.clone();
    }
}

#[derive(Clone, Debug)]
pub struct TrainedTagger<T: Scalar = f64> {
    /// Parameters of the best dev epoch.
    pub best: TaggerModel<T>,
    /// Parameters after the final epoch.
    pub last: TaggerModel<T>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

/// Trains with Adam under the annealing schedule. The seed drives batch
/// order and dropout; initialization is the caller's.
pub fn train_tagger<T: Scalar>(
    model: TaggerModel<T>,
    train: &LabeledSet<T>,
    dev: &LabeledSet<T>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainedTagger<T>> {
    if train.is_empty() {
        return Err(Error::Data("no training sentences".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let template = model.clone();
    let mut runner = TaggerRunner {
        adam: AdamState::new(&model.store),
        model,
        train,
        dev,
        settings,
        rng: RngStream::new(seed).fork(0x7461),
        order: (0..train.len()).collect(),
    };
    let outcome = run_schedule(&mut runner, &settings.schedule)?;
    let with = |store: &ParamStore<T>| {
        let mut m = template.clone();
        m.store.copy_values_from(store).expect("same parameter layout");
        m
    };
    Ok(TrainedTagger {
        best: with(&outcome.best.0),
        last: with(&outcome.last.0),
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        best_dev: outcome.best_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub test_f1: Option<f64>,
    pub dev_counts: EvalCounts,
    pub test_counts: Option<EvalCounts>,
}

impl RunResult {
    /// Test F1 when a test set was scored, else dev F1.
    pub fn headline_f1(&self) -> f64 {
        self.test_f1.unwrap_or(self.dev_f1)
    }
}

/// Runs `run` once per seed in parallel; results come back sorted by seed.
pub fn multi_seed<F>(seeds: &[u64], run: F) -> Result<Vec<RunResult>>
where
    F: Fn(u64) -> Result<RunResult> + Sync,
{
    let mut out: Vec<RunResult> = seeds.par_iter().map(|&s| run(s)).collect::<Result<_>>()?;
    out.sort_by_key(|r| r.seed);
    Ok(out)
}
