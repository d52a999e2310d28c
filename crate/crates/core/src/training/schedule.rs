use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate plan: constant `initial_lr` until the dev score has not
/// improved for more than `patience` epochs, then restore the best epoch and
/// train `anneal_epochs` epochs at each of `anneal_phases` rates, each a
/// factor `anneal_factor` below the previous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub patience: usize,
    pub anneal_epochs: usize,
    pub anneal_phases: usize,
    pub anneal_factor: f64,
    /// Cap on constant-rate epochs; annealing starts from the best epoch
    /// once it is reached.
    pub max_constant_epochs: usize,
    /// When false, no dev signal is consulted: exactly
    /// `max_constant_epochs` constant epochs run before annealing.
    pub monitor_dev: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            patience: 5,
            anneal_epochs: 5,
            anneal_phases: 2,
            anneal_factor: 10.0,
            max_constant_epochs: 50,
            monitor_dev: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(self.anneal_factor > 0.0) || self.max_constant_epochs == 0 {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    /// Rate used in anneal phase `k` (1-based).
    pub fn anneal_lr(&self, k: usize) -> f64 {
        self.initial_lr / self.anneal_factor.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePhase {
    Constant,
    Anneal(usize),
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub phase: SchedulePhase,
    pub train_loss: f64,
    pub dev_score: f64,
    /// Epoch trained past the dev peak and rolled back when annealing began.
    pub discarded: bool,
}

/// What a training loop exposes to the schedule.
pub trait EpochRunner {
    type Checkpoint: Clone;
    /// Trains one epoch at rate `lr`, returning the mean training loss.
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64>;
    /// Dev-set score; higher is better.
    fn dev_score(&mut self) -> Result<f64>;
    fn checkpoint(&self) -> Self::Checkpoint;
    fn restore(&mut self, checkpoint: &Self::Checkpoint);
}

#[derive(Clone, Debug)]
pub struct ScheduleOutcome<C> {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub best: C,
    pub last: C,
}

impl<C> ScheduleOutcome<C> {
    /// Epochs that count toward the final model, in order.
    pub fn kept(&self) -> impl Iterator<Item = &EpochRecord> {
        self.log.iter().filter(|r| !r.discarded)
    }
}

pub fn run_schedule<R: EpochRunner>(runner: &mut R, cfg: &ScheduleConfig) -> Result<ScheduleOutcome<R::Checkpoint>> {
    cfg.validate()?;
    let mut log = Vec::new();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best = runner.checkpoint();
    let mut epoch = 0;

    loop {
        epoch += 1;
        let loss = runner.train_epoch(epoch, cfg.initial_lr)?;
        let score = runner.dev_score()?;
        log.push(EpochRecord {
            epoch,
            lr: cfg.initial_lr,
            phase: SchedulePhase::Constant,
            train_loss: loss,
            dev_score: score,
            discarded: false,
        });
        if score > best_score || !cfg.monitor_dev {
            best_score = score;
            best_epoch = epoch;
            best = runner.checkpoint();
        }
        let stalled = cfg.monitor_dev && epoch - best_epoch > cfg.patience;
        if stalled || epoch >= cfg.max_constant_epochs {
            break;
        }
    }

    for rec in log.iter_mut().filter(|r| r.epoch > best_epoch) {
        rec.discarded = true;
    }
    runner.restore(&best);
    epoch = best_epoch;

    for k in 1..=cfg.anneal_phases {
        let lr = cfg.anneal_lr(k);
        for _ in 0..cfg.anneal_epochs {
            epoch += 1;
            let loss = runner.train_epoch(epoch, lr)?;
            let score = runner.dev_score()?;
            log.push(EpochRecord {
                epoch,
                lr,
                phase: SchedulePhase::Anneal(k),
                train_loss: loss,
                dev_score: score,
                discarded: false,
            });
            if score > best_score || !cfg.monitor_dev {
                best_score = score;
                best_epoch = epoch;
                best = runner.checkpoint();
            }
        }
    }
    Ok(ScheduleOutcome {
        log,
        best_epoch,
        best_score,
        best,
        last: runner.checkpoint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a scripted dev curve; the "parameters" are the epoch count.
    struct Scripted {
        curve: Vec<f64>,
        calls: usize,
        state: usize,
    }

    impl EpochRunner for Scripted {
        type Checkpoint = usize;
        fn train_epoch(&mut self, _epoch: usize, _lr: f64) -> Result<f64> {
            self.state += 1;
            Ok(0.0)
        }
        fn dev_score(&mut self) -> Result<f64> {
            let s = self.curve.get(self.calls).copied().unwrap_or(0.0);
            self.calls += 1;
            Ok(s)
        }
        fn checkpoint(&self) -> usize {
            self.state
        }
        fn restore(&mut self, c: &usize) {
            self.state = *c;
        }
    }

    fn scripted(curve: Vec<f64>) -> Scripted {
        Scripted { curve, calls: 0, state: 0 }
    }

    #[test]
    fn peak_at_seven_patience_zero() {
        let mut curve: Vec<f64> = (1..=7).map(|e| e as f64).collect();
        curve.push(6.5);
        let mut r = scripted(curve);
        let cfg = ScheduleConfig { patience: 0, ..Default::default() };
        let out = run_schedule(&mut r, &cfg).unwrap();
        let kept: Vec<(usize, f64)> = out.kept().map(|e| (e.epoch, e.lr)).collect();
        assert_eq!(kept.len(), 17);
        for (e, lr) in kept {
            let expect = match e {
                1..=7 => 1e-3,
                8..=12 => 1e-4,
                13..=17 => 1e-5,
                _ => panic!("epoch {e}"),
            };
            assert_eq!(lr, expect);
        }
        assert_eq!(out.log.iter().filter(|e| e.discarded).count(), 1);
        assert_eq!(out.log.last().unwrap().epoch, 17);
        assert_eq!(out.best_epoch, 7);
        assert_eq!(out.best, 7);
    }

    #[test]
    fn increasing_curve_waits_for_plateau() {
        let mut curve: Vec<f64> = (1..=20).map(|e| e as f64).collect();
        curve.extend([20.0; 3]);
        let mut r = scripted(curve);
        let cfg = ScheduleConfig { patience: 3, ..Default::default() };
        let out = run_schedule(&mut r, &cfg).unwrap();
        let constant = out.log.iter().filter(|e| e.phase == SchedulePhase::Constant).count();
        assert_eq!(constant, 24);
        assert_eq!(out.best_epoch, 20);
        let annealed: Vec<f64> = out.kept().filter(|e| e.epoch > 20).map(|e| e.lr).collect();
        assert_eq!(annealed, [vec![1e-4; 5], vec![1e-5; 5]].concat());
    }

    #[test]
    fn best_checkpoint_can_come_from_anneal() {
        let mut curve = vec![1.0, 2.0, 1.0];
        curve.extend([3.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let mut r = scripted(curve);
        let cfg = ScheduleConfig { patience: 0, ..Default::default() };
        let out = run_schedule(&mut r, &cfg).unwrap();
        assert_eq!(out.best_epoch, 3);
        // restored to epoch 2's state, then one anneal epoch
        assert_eq!(out.best, 3);
        assert_eq!(out.last, 12);
    }

    #[test]
    fn fixed_epoch_mode() {
        let mut r = scripted(vec![5.0, 1.0, 1.0]);
        let cfg = ScheduleConfig { monitor_dev: false, max_constant_epochs: 3, ..Default::default() };
        let out = run_schedule(&mut r, &cfg).unwrap();
        assert_eq!(out.log.len(), 13);
        assert!(out.log.iter().all(|e| !e.discarded));
        assert_eq!(out.best_epoch, 13);
    }
}
