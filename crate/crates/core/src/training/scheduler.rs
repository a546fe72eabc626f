use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerAction {
    None,
    ReduceLr,
    Stop,
}

/// A dev score where larger is better, compared lexicographically: the
/// tie-break only matters when the primary values are equal.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DevScore {
    pub primary: f64,
    pub tie_break: f64,
}

impl From<f64> for DevScore {
    fn from(primary: f64) -> Self {
        Self {
            primary,
            tie_break: 0.0,
        }
    }
}

/// Reduces the learning rate when the tracked dev score stops improving.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub best: Option<DevScore>,
    pub evals_since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            best: None,
            evals_since_improvement: 0,
            patience: cfg.patience,
            factor: cfg.factor,
            floor: cfg.min_lr,
        }
    }

    /// Records a dev score. On `ReduceLr`, `lr` has been multiplied by the
    /// factor; on `Stop` it is unchanged because the reduced rate would fall
    /// below the floor.
    pub fn update(&mut self, score: impl Into<DevScore>, lr: &mut f64) -> SchedulerAction {
        let score = score.into();
        if self.is_improvement(score) {
            self.best = Some(score);
            self.evals_since_improvement = 0;
            return SchedulerAction::None;
        }
        self.evals_since_improvement += 1;
        if self.evals_since_improvement < self.patience {
            return SchedulerAction::None;
        }
        self.evals_since_improvement = 0;
        let reduced = *lr * self.factor;
        if reduced < self.floor {
            return SchedulerAction::Stop;
        }
        *lr = reduced;
        SchedulerAction::ReduceLr
    }

    pub fn is_improvement(&self, score: DevScore) -> bool {
        self.best.is_none_or(|b| score > b)
    }
}
