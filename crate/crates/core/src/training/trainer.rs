use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint;
use super::scheduler::{PlateauScheduler, SchedulerAction};
use super::TrainingState;
use crate::config::RunConfig;
use crate::data::{make_batch, Sample, Vocabularies};
use crate::evaluation::{evaluate, EvalOptions, Evaluation};
use crate::model::SignTransformer;
use crate::params::{ParamId, ParamStore};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAINING_LOG: &str = "train_log.jsonl";

/// One line of the training log. Dev fields are present on evaluation
/// iterations only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recognition_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation_loss: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<[f64; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    LearningRateFloor,
}

pub struct TrainOutcome {
    /// Parameters at the best dev evaluation.
    pub best: SignTransformer,
    pub best_eval: Evaluation,
    /// Parameters and optimizer state when training stopped.
    pub last: SignTransformer,
    pub state: TrainingState,
    pub log: Vec<LogEntry>,
    pub stop: StopReason,
}

/// Order-sensitive hash of every parameter bit pattern.
pub fn param_hash(store: &ParamStore) -> u64 {
    let mut h = DefaultHasher::new();
    for (_, p) in store.iter() {
        h.write(p.name.as_bytes());
        for v in p.tensor.data() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

fn dropout_seed(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(BEST_CHECKPOINT)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(TRAINING_LOG)
    }
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    pub model: SignTransformer,
    pub adam: Adam,
    pub scheduler: PlateauScheduler,
    pub iteration: u64,
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, vocabs: Vocabularies, d_in: usize) -> Result<Self> {
        cfg.validate()?;
        let model = SignTransformer::new(cfg.model, cfg.protocol, d_in, vocabs, cfg.seed)?;
        let adam = Adam::new(&model.store, &cfg.optim);
        Ok(Self {
            cfg,
            adam,
            scheduler: PlateauScheduler::new(&cfg.optim),
            model,
            iteration: 0,
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn next_batch<'s>(&mut self, train: &'s [Sample]) -> Vec<&'s Sample> {
        let size = self.cfg.optim.batch_size.min(train.len());
        if self.order.len() != train.len() || self.cursor + size > self.order.len() {
            self.order = (0..train.len()).collect();
            self.order.shuffle(&mut self.order_rng);
            self.cursor = 0;
        }
        let picked = self.order[self.cursor..self.cursor + size].iter().map(|&i| &train[i]).collect();
        self.cursor += size;
        picked
    }

    /// One optimizer update; returns the log entry without dev fields.
    pub fn step(&mut self, train: &[Sample]) -> Result<LogEntry> {
        let batch = make_batch(&self.next_batch(train))?;
        let weights = self.cfg.weights()?;
        let (grads, stats, values) = {
            let mut f = self.model.train_forward(dropout_seed(self.cfg.seed, self.iteration));
            let terms = self.model.loss(&mut f, &batch, weights, self.cfg.loss.mode)?;
            let value = |v: Option<crate::numerics::Var>| v.map(|v| f.graph.value(v).item());
            let values = (
                f.graph.value(terms.total).item(),
                value(terms.recognition),
                value(terms.translation),
            );
            let g = f.graph.backward(terms.total)?;
            let grads: Vec<(ParamId, Tensor)> = f
                .bound()
                .filter(|(id, _)| self.model.store.param(*id).trainable)
                .map(|(id, var)| (id, g.get(var)))
                .collect();
            (grads, terms.stats, values)
        };
        if !values.0.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became {} at iteration {}",
                values.0, self.iteration
            )));
        }
        self.adam.step(&mut self.model.store, &grads)?;
        if let Some(stats) = stats {
            self.model.spatial.update_running_stats(&mut self.model.store, &stats);
        }
        self.iteration += 1;
        Ok(LogEntry {
            iteration: self.iteration,
            loss: values.0,
            recognition_loss: values.1,
            translation_loss: values.2,
            lr: self.adam.lr(),
            dev_wer: None,
            dev_bleu: None,
        })
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            iteration: self.iteration,
            adam: self.adam.clone(),
            scheduler: self.scheduler,
        }
    }

    fn track_wer(&self) -> bool {
        self.cfg.loss.lambda_r > 0.0
    }

    pub fn evaluate_dev(&self, dev: &[Sample]) -> Result<Evaluation> {
        evaluate(&self.model, dev, &EvalOptions::greedy(self.cfg.decode.max_len))
    }
}

/// Trains until `max_iterations` or until the learning rate would drop below
/// its floor, evaluating greedily on `dev` every `eval_every` iterations.
/// With `out`, the best checkpoint and the log are written there.
pub fn train(
    cfg: &RunConfig,
    train: &[Sample],
    dev: &[Sample],
    vocabs: Vocabularies,
    out: Option<&OutputDir>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Corpus("no training samples".into()));
    }
    if dev.is_empty() {
        return Err(Error::Corpus("no dev samples".into()));
    }
    let d_in = train[0].features.dim();
    let mut trainer = Trainer::new(cfg, vocabs, d_in)?;
    let mut log_file = match out {
        Some(o) => {
            let path = o.log();
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(SignTransformer, Evaluation)> = None;
    let mut stop = StopReason::MaxIterations;
    let max_iterations = cfg.optim.max_iterations as u64;
    while trainer.iteration < max_iterations {
        let mut entry = trainer.step(train)?;
        let eval_now = trainer.iteration % cfg.optim.eval_every as u64 == 0 || trainer.iteration == max_iterations;
        let mut halt = false;
        if eval_now {
            let eval = trainer.evaluate_dev(dev)?;
            entry.dev_wer = eval.wer.map(|w| w.wer);
            entry.dev_bleu = eval.bleu.as_ref().map(|b| b.bleu);
            let score = eval.tracked(trainer.track_wer());
            let improved = trainer.scheduler.is_improvement(score);
            let mut lr = trainer.adam.lr();
            let action = trainer.scheduler.update(score, &mut lr);
            trainer.adam.set_lr(lr);
            log::info!(
                "iteration {} loss {:.4} lr {:.2e} dev wer {:?} bleu4 {:?}",
                trainer.iteration,
                entry.loss,
                lr,
                entry.dev_wer,
                entry.dev_bleu.map(|b| b[3])
            );
            if improved {
                if let Some(o) = out {
                    checkpoint::save(&o.checkpoint(), &trainer.model, &trainer.state())?;
                }
                best = Some((trainer.model.clone(), eval));
            }
            if action == SchedulerAction::Stop {
                stop = StopReason::LearningRateFloor;
                halt = true;
            }
        }
        if let Some((file, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(entry);
        if halt {
            break;
        }
    }
    let (best, best_eval) = best.expect("the final iteration always evaluates");
    let state = trainer.state();
    Ok(TrainOutcome {
        best,
        best_eval,
        last: trainer.model,
        state,
        log,
        stop,
    })
}
