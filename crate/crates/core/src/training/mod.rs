//! Multi-task training: task definitions, batching, the one-by-one and
//! round-robin curricula, and the training log.

mod checkpoint;
mod optim;

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{self, Embedding, ForwardCache, Grads, ModelParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{self, ContrastiveConfig, LabeledPair, LossOutput, SimilarityRemap};
use crate::textproc::{self, TokenSequence, Vocabulary};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use optim::{adam_step, lr_at, warmup_steps, AdamState, ADAM_EPS, BETA1, BETA2};

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// One training or evaluation record: two texts and an optional binary label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub text_a: String,
    pub text_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl PairExample {
    pub fn labeled(a: impl Into<String>, b: impl Into<String>, label: u8) -> Self {
        Self {
            text_a: a.into(),
            text_b: b.into(),
            label: Some(label),
        }
    }

    pub fn positive(a: impl Into<String>, b: impl Into<String>) -> Self {
        Self {
            text_a: a.into(),
            text_b: b.into(),
            label: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    MultipleNegatives,
}

/// A dataset bound to the loss that trains on it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub loss_kind: LossKind,
    pub dataset: Vec<PairExample>,
    pub batch_size: usize,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, loss_kind: LossKind, dataset: Vec<PairExample>) -> Self {
        Self {
            name: name.into(),
            loss_kind,
            dataset,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    /// Tokenizes every example and checks the task's label contract.
    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Result<EncodedTask> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "task `{}`: batch_size must be at least 1",
                self.name
            )));
        }
        let invalid = |index: usize, reason: String| Error::InvalidExample {
            task: self.name.clone(),
            index,
            reason,
        };
        let mut pairs = Vec::with_capacity(self.dataset.len());
        for (i, ex) in self.dataset.iter().enumerate() {
            match (self.loss_kind, ex.label) {
                (LossKind::Contrastive, None) => return Err(invalid(i, "contrastive tasks need a label".into())),
                (LossKind::Contrastive, Some(y)) if y > 1 => {
                    return Err(invalid(i, format!("label {y} not in {{0, 1}}")))
                }
                (LossKind::MultipleNegatives, Some(_)) => {
                    return Err(invalid(
                        i,
                        "multiple-negatives tasks take unlabeled positive pairs".into(),
                    ))
                }
                _ => {}
            }
            let a = textproc::encode(&ex.text_a, vocab, max_len)?;
            let b = textproc::encode(&ex.text_b, vocab, max_len)?;
            if a.is_empty() || b.is_empty() {
                return Err(invalid(i, "text is empty after tokenization".into()));
            }
            pairs.push(EncodedPair { a, b, label: ex.label });
        }
        Ok(EncodedTask {
            name: self.name.clone(),
            loss_kind: self.loss_kind,
            batch_size: self.batch_size,
            pairs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub a: TokenSequence,
    pub b: TokenSequence,
    pub label: Option<u8>,
}

/// A task whose examples are already token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTask {
    pub name: String,
    pub loss_kind: LossKind,
    pub batch_size: usize,
    pub pairs: Vec<EncodedPair>,
}

impl EncodedTask {
    pub fn batches(&self, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
        batch_indices(
            &self.name,
            self.pairs.len(),
            self.batch_size,
            self.loss_kind,
            seed,
            epoch,
        )
    }
}

/// Shuffles a task's examples with a stream keyed by (seed, task, epoch)
/// and chunks them into batches of example indices.
pub fn make_batches(task: &TaskSpec, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batch_indices(
        &task.name,
        task.dataset.len(),
        task.batch_size,
        task.loss_kind,
        seed,
        epoch,
    )
}

fn batch_indices(
    name: &str,
    n: usize,
    batch_size: usize,
    kind: LossKind,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset(name.to_string()));
    }
    if batch_size == 0 {
        return Err(Error::Config(format!("task `{name}`: batch_size must be at least 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut batch_rng(seed, name, epoch));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if kind == LossKind::MultipleNegatives && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    Ok(batches)
}

fn batch_rng(seed: u64, name: &str, epoch: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"batches");
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curriculum {
    /// Each task trained to completion, in order.
    Obo,
    /// One batch per task per visit, cycling in a fixed order.
    Rr,
}

impl fmt::Display for Curriculum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curriculum::Obo => "obo",
            Curriculum::Rr => "rr",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub curriculum: Curriculum,
    /// Task names in visiting order; empty means registration order.
    pub task_order: Vec<String>,
    pub seed: u64,
    pub margin: f64,
    pub hard_mining: bool,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 2e-5,
            warmup_fraction: 0.1,
            curriculum: Curriculum::Rr,
            task_order: Vec::new(),
            seed: 0,
            margin: 0.5,
            hard_mining: true,
            epsilon: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            margin: self.margin,
            hard_mining: self.hard_mining,
        }
    }

    pub fn remap(&self) -> SimilarityRemap {
        SimilarityRemap { epsilon: self.epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        self.contrastive().validate()?;
        self.remap().validate()
    }

    /// Resolves `task_order` against the registered tasks.
    fn ordered<'a>(&self, tasks: &'a [EncodedTask]) -> Result<Vec<&'a EncodedTask>> {
        if tasks.is_empty() {
            return Err(Error::Config("no tasks to train".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task name `{}`", t.name)));
            }
        }
        if self.task_order.is_empty() {
            return Ok(tasks.iter().collect());
        }
        if self.task_order.len() != tasks.len() {
            return Err(Error::Config("task_order must list every task exactly once".into()));
        }
        let mut out = Vec::with_capacity(tasks.len());
        for name in &self.task_order {
            let t = tasks
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Config(format!("task_order names unknown task `{name}`")))?;
            if out.iter().any(|o: &&EncodedTask| o.name == *name) {
                return Err(Error::Config(format!("task `{name}` appears twice in task_order")));
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// One optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub task: String,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.task, self.epoch, self.loss, self.lr
        )
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        writeln!(out, "{rec}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
}

/// Owns the parameters and optimizer state across steps.
struct Trainer {
    params: ModelParams,
    adam: AdamState,
    exec: Exec,
    contrastive: ContrastiveConfig,
    remap: SimilarityRemap,
    log: Vec<LogRecord>,
}

impl Trainer {
    fn new(params: ModelParams, cfg: &TrainConfig, exec: Exec) -> Self {
        let n = params.values().len();
        Self {
            params,
            adam: AdamState::new(n),
            exec,
            contrastive: cfg.contrastive(),
            remap: cfg.remap(),
            log: Vec::new(),
        }
    }

    fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(self.params.values().len());
    }

    fn step(&mut self, task: &EncodedTask, batch: &[usize], epoch: usize, lr: f64) -> Result<()> {
        let step = self.log.len();
        let (loss, grads) = batch_gradient(&self.params, task, batch, &self.contrastive, &self.remap, self.exec)?;
        let non_finite = |detail: String| Error::NonFinite {
            task: task.name.clone(),
            step,
            detail,
        };
        if !loss.is_finite() {
            return Err(non_finite(format!("loss is {loss}")));
        }
        let version = self.params.version();
        adam_step(&mut self.params, &grads, &mut self.adam, lr).map_err(|e| match e {
            Error::NonFinite { detail, .. } => non_finite(detail),
            other => other,
        })?;
        debug_assert_eq!(self.params.version(), version + 1);
        self.log.push(LogRecord {
            step,
            task: task.name.clone(),
            epoch,
            loss,
            lr,
        });
        Ok(())
    }
}

/// Loss and parameter gradient for one batch of a task.
///
/// Both sides of every pair are encoded with the same parameters; per
/// sequence gradients are computed with `exec` and summed in batch order,
/// so the result does not depend on the execution mode.
pub fn batch_gradient(
    params: &ModelParams,
    task: &EncodedTask,
    batch: &[usize],
    contrastive: &ContrastiveConfig,
    remap: &SimilarityRemap,
    exec: Exec,
) -> Result<(f64, Grads)> {
    let seqs: Vec<&TokenSequence> = batch
        .iter()
        .flat_map(|&i| {
            let p = &task.pairs[i];
            [&p.a, &p.b]
        })
        .collect();
    let encoded: Vec<(Embedding, ForwardCache)> = exec.try_map(&seqs, |s| encoder::forward(params, s))?;
    if let Some((_, c)) = encoded.iter().find(|(_, c)| c.version() != params.version()) {
        return Err(Error::ShapeMismatch(format!(
            "stale activations: cache version {} vs parameters {}",
            c.version(),
            params.version()
        )));
    }
    let emb = |k: usize| &encoded[k].0[..];
    let out: LossOutput = match task.loss_kind {
        LossKind::Contrastive => {
            let pairs: Vec<LabeledPair> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| (emb(2 * k), emb(2 * k + 1), task.pairs[i].label.unwrap_or(u8::MAX)))
                .collect();
            losses::contrastive_loss(&pairs, contrastive)?
        }
        LossKind::MultipleNegatives => {
            let pairs: Vec<(&[f64], &[f64])> = (0..batch.len()).map(|k| (emb(2 * k), emb(2 * k + 1))).collect();
            losses::multiple_negatives_loss(&pairs, remap)?
        }
    };
    let upstream: Vec<(&ForwardCache, &[f64])> = (0..batch.len())
        .flat_map(|k| {
            [
                (&encoded[2 * k].1, &out.grad_a[k][..]),
                (&encoded[2 * k + 1].1, &out.grad_b[k][..]),
            ]
        })
        .collect();
    let seq_grads = exec.try_map(&upstream, |(cache, g)| encoder::backward(params, cache, g))?;
    let mut grads = Grads::zeros_like(params);
    for sg in &seq_grads {
        grads.accumulate(params, sg);
    }
    Ok((out.loss, grads))
}

/// Encodes every task against one vocabulary.
pub fn encode_tasks(tasks: &[TaskSpec], vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedTask>> {
    tasks.iter().map(|t| t.encode(vocab, max_len)).collect()
}

/// One-by-one curriculum: every task runs all epochs, with its own warmup
/// schedule and fresh optimizer moments, before the next task starts.
pub fn train_obo(params: ModelParams, tasks: &[EncodedTask], cfg: &TrainConfig, exec: Exec) -> Result<TrainOutput> {
    cfg.validate()?;
    let order = cfg.ordered(tasks)?;
    let mut trainer = Trainer::new(params, cfg, exec);
    for task in order {
        trainer.reset_optimizer();
        let per_epoch: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
            .map(|e| task.batches(cfg.seed, e))
            .collect::<Result<_>>()?;
        let total: usize = per_epoch.iter().map(Vec::len).sum();
        let mut local = 0;
        for (epoch, batches) in per_epoch.iter().enumerate() {
            for batch in batches {
                let lr = lr_at(local, total, cfg.learning_rate, cfg.warmup_fraction);
                trainer.step(task, batch, epoch, lr)?;
                local += 1;
            }
        }
    }
    Ok(TrainOutput {
        params: trainer.params,
        log: trainer.log,
    })
}

/// Visiting order of one round-robin round: `(task position, batch index)`.
///
/// Tasks are cycled in order, one batch per visit; exhausted tasks are
/// skipped until every task is exhausted.
pub fn round_robin_order(batch_counts: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(batch_counts.iter().sum());
    let rounds = batch_counts.iter().copied().max().unwrap_or(0);
    for b in 0..rounds {
        for (t, &count) in batch_counts.iter().enumerate() {
            if b < count {
                out.push((t, b));
            }
        }
    }
    out
}

/// Round-robin curriculum: tasks alternate batch by batch within each
/// round, under one warmup schedule spanning all rounds.
pub fn train_rr(params: ModelParams, tasks: &[EncodedTask], cfg: &TrainConfig, exec: Exec) -> Result<TrainOutput> {
    cfg.validate()?;
    let order = cfg.ordered(tasks)?;
    let rounds: Vec<Vec<Vec<Vec<usize>>>> = (0..cfg.epochs)
        .map(|e| order.iter().map(|t| t.batches(cfg.seed, e)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let total: usize = rounds.iter().flatten().map(Vec::len).sum();
    let mut trainer = Trainer::new(params, cfg, exec);
    let mut global = 0;
    for (epoch, per_task) in rounds.iter().enumerate() {
        let counts: Vec<usize> = per_task.iter().map(Vec::len).collect();
        for (t, b) in round_robin_order(&counts) {
            let lr = lr_at(global, total, cfg.learning_rate, cfg.warmup_fraction);
            trainer.step(order[t], &per_task[t][b], epoch, lr)?;
            global += 1;
        }
    }
    Ok(TrainOutput {
        params: trainer.params,
        log: trainer.log,
    })
}

/// Dispatches on `cfg.curriculum`.
pub fn train(params: ModelParams, tasks: &[EncodedTask], cfg: &TrainConfig, exec: Exec) -> Result<TrainOutput> {
    match cfg.curriculum {
        Curriculum::Obo => train_obo(params, tasks, cfg, exec),
        Curriculum::Rr => train_rr(params, tasks, cfg, exec),
    }
}
