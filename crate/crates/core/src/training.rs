//! Learning-rate schedule, the training loop, evaluation and run files.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::encoders::Vocabulary;
use crate::model::{DecodeStrategy, PreparedSample, Scga};
use crate::nn::Ctx;
use crate::rng::{Rng, RngState};
use crate::tensor::{
    adam_step, checkpoint_meta, decode_checkpoint, write_checkpoint, AdamConfig, ParamStore, Tape,
};
use crate::{Error, Result};

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("learning-rate schedule starts at step 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::config("warmup and d_model must be positive"));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Where the loop is; enough to resume a run bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Sample order of the current epoch; empty between epochs.
    pub order: Vec<usize>,
    /// Position in `order`.
    pub cursor: usize,
    pub rng: RngState,
    pub best_val: Option<f64>,
    /// Running sum and count of batch losses in the current epoch.
    pub epoch_loss: f64,
    pub epoch_batches: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub token_acc: f64,
    pub referent_acc: Option<f64>,
    pub exact_match: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean per-sample teacher-forced loss.
    pub loss: f64,
    /// Teacher-forced token accuracy, `<eos>` steps included.
    pub token_acc: f64,
    /// Eval-mode history selection against planted referents.
    pub referent_acc: Option<f64>,
    pub exact_match: Option<f64>,
}

/// Teacher-forced metrics and, with `strategy`, decoded exact match.
pub fn evaluate(
    model: &Scga,
    store: &ParamStore,
    samples: &[PreparedSample],
    strategy: Option<DecodeStrategy>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let (mut loss, mut correct, mut steps, mut hits, mut planted, mut exact) = (0.0, 0, 0, 0, 0, 0);
    for s in samples {
        let mut tape = Tape::new();
        let tf = model.teacher_forced(&mut tape, store, s, &mut Ctx::eval())?;
        loss += tape.value(tf.loss).item();
        correct += tf.correct;
        steps += tf.steps;
        if let Some(hit) = tf.referent_hit(s) {
            planted += 1;
            hits += usize::from(hit);
        }
        if let Some(strategy) = strategy {
            let out = model.decode(store, s, strategy)?;
            exact += usize::from(out.words(&model.vocab, &s.question_words) == s.answer_words);
        }
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        samples: samples.len(),
        loss: loss / n,
        token_acc: correct as f64 / steps as f64,
        referent_acc: (planted > 0).then(|| hits as f64 / planted as f64),
        exact_match: strategy.map(|_| exact as f64 / n),
    })
}

/// Output files of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    fn append_metrics(&self, m: &EpochMetrics) -> Result<()> {
        let path = self.metrics();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: Config,
    vocab: Vec<String>,
    state: TrainState,
}

/// Model, parameters, optimizer moments and loop state of one run.
pub struct Trainer {
    pub model: Scga,
    pub store: ParamStore,
    pub state: TrainState,
    rng: Rng,
    adam: AdamConfig,
}

impl Trainer {
    /// Initializes parameters from `config.seed`; the same stream then
    /// drives shuffling, dropout and Gumbel noise.
    pub fn new(config: &Config, vocab: Vocabulary) -> Result<Self> {
        let (model, store, rng) = crate::model::init_model(config, vocab)?;
        Ok(Self {
            model,
            store,
            state: TrainState {
                step: 0,
                epoch: 0,
                order: Vec::new(),
                cursor: 0,
                rng: rng.state(),
                best_val: None,
                epoch_loss: 0.0,
                epoch_batches: 0,
            },
            rng,
            adam: AdamConfig::default(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    fn meta(&self) -> serde_json::Value {
        let mut state = self.state.clone();
        state.rng = self.rng.state();
        let vocab = (crate::encoders::RESERVED.len()..self.model.vocab.len())
            .map(|i| self.model.vocab.token(i).to_string())
            .collect();
        serde_json::to_value(CheckpointMeta {
            config: self.model.config.clone(),
            vocab,
            state,
        })
        .expect("meta serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.store, &self.meta())
    }

    /// Restores a run saved with [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta: CheckpointMeta = serde_json::from_value(checkpoint_meta(&bytes)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut trainer = Trainer::new(&meta.config, Vocabulary::new(&meta.vocab))?;
        decode_checkpoint(&bytes, &mut trainer.store)?;
        trainer.rng = Rng::from_state(&meta.state.rng)?;
        trainer.state = meta.state;
        Ok(trainer)
    }

    /// One optimizer step on `batch`: per-sample tapes, gradients averaged
    /// by accumulation. Returns the batch loss and the learning rate used.
    pub fn train_step(&mut self, batch: &[&PreparedSample]) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let cfg = self.model.config.clone();
        self.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for s in batch {
            let mut tape = Tape::new();
            let mut ctx = Ctx::train(&mut self.rng, cfg.dropout, cfg.temperature);
            let tf = self
                .model
                .teacher_forced(&mut tape, &self.store, s, &mut ctx)?;
            let loss = tape.value(tf.loss).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {} on sample {}",
                    self.state.step + 1,
                    s.id
                )));
            }
            total += loss;
            let scaled = tape.scale(tf.loss, scale);
            tape.backward(scaled, &mut self.store)?;
        }
        self.state.step += 1;
        let lr = cfg.lr_scale * lr_schedule(self.state.step, cfg.d, cfg.warmup)?;
        adam_step(&mut self.store, lr, &self.adam)?;
        Ok((total * scale, lr))
    }

    fn limit_reached(&self) -> bool {
        let cfg = &self.model.config;
        self.state.epoch >= cfg.epochs || (cfg.max_steps > 0 && self.state.step >= cfg.max_steps)
    }

    /// Trains until `epochs` or `max_steps`, evaluating on `val` after each
    /// epoch. `on_epoch` may stop the run early by returning `false`.
    pub fn fit<F>(
        &mut self,
        train: &[PreparedSample],
        val: &[PreparedSample],
        run: Option<&RunDir>,
        mut on_epoch: F,
    ) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&EpochMetrics) -> bool,
    {
        if train.is_empty() || val.is_empty() {
            return Err(Error::contract(
                "training needs non-empty train and validation sets",
            ));
        }
        let batch_size = self.model.config.batch_size;
        let mut history = Vec::new();
        while !self.limit_reached() {
            if self.state.order.is_empty() {
                let mut order: Vec<usize> = (0..train.len()).collect();
                self.rng.shuffle(&mut order);
                self.state.order = order;
                self.state.cursor = 0;
            }
            let end = (self.state.cursor + batch_size).min(train.len());
            let batch: Vec<&PreparedSample> = self.state.order[self.state.cursor..end]
                .iter()
                .map(|&i| &train[i])
                .collect();
            let (loss, lr) = self.train_step(&batch)?;
            self.state.cursor = end;
            self.state.epoch_loss += loss;
            self.state.epoch_batches += 1;
            log::debug!("step {} loss {loss:.6} lr {lr:.3e}", self.state.step);

            if self.state.cursor == train.len() {
                let metrics = self.end_epoch(val, lr)?;
                if let Some(run) = run {
                    run.append_metrics(&metrics)?;
                    if self.state.best_val == Some(metrics.val_loss) {
                        self.save(&run.best())?;
                    }
                }
                history.push(metrics.clone());
                if !on_epoch(&metrics) {
                    break;
                }
            }
        }
        if let Some(run) = run {
            self.save(&run.last())?;
        }
        Ok(history)
    }

    fn end_epoch(&mut self, val: &[PreparedSample], lr: f64) -> Result<EpochMetrics> {
        let strategy = self
            .model
            .config
            .eval_decode
            .then_some(DecodeStrategy::Greedy);
        let report = evaluate(&self.model, &self.store, val, strategy)?;
        self.state.epoch += 1;
        let metrics = EpochMetrics {
            epoch: self.state.epoch,
            step: self.state.step,
            lr,
            train_loss: self.state.epoch_loss / self.state.epoch_batches as f64,
            val_loss: report.loss,
            token_acc: report.token_acc,
            referent_acc: report.referent_acc,
            exact_match: report.exact_match,
        };
        log::info!(
            "epoch {} step {} train {:.5} val {:.5} token_acc {:.4}",
            metrics.epoch,
            metrics.step,
            metrics.train_loss,
            metrics.val_loss,
            metrics.token_acc
        );
        if self.state.best_val.map_or(true, |b| report.loss < b) {
            self.state.best_val = Some(report.loss);
        }
        self.state.order.clear();
        self.state.cursor = 0;
        self.state.epoch_loss = 0.0;
        self.state.epoch_batches = 0;
        Ok(metrics)
    }
}
