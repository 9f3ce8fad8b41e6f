//! The run configuration file.
//!
//! Relative data paths are resolved against the directory holding the
//! config file, so a config and its data can be moved together.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use qembed::calibration::Policy;
use qembed::encoder::EncoderConfig;
use qembed::training::{LossKind, TrainConfig, DEFAULT_BATCH_SIZE};
use qembed::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Overrides both the encoder and the training seed when set.
    pub seed: Option<u64>,
    #[serde(default = "default_min_count")]
    pub vocab_min_count: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub calibration: Vec<CalibrationEntry>,
    #[serde(default)]
    pub eval: Vec<EvalEntry>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_min_count() -> usize {
    1
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub loss: LossKind,
    pub data: PathBuf,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationEntry {
    pub task: String,
    pub policy: Policy,
    /// Labeled pairs to calibrate on.
    pub data: PathBuf,
}

fn default_ks() -> Vec<usize> {
    vec![1, 3, 5]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalEntry {
    /// Labeled pairs scored by cosine similarity against the task filter.
    Classification { task: String, data: PathBuf },
    /// Positive (query, relevant question) pairs plus a distractor corpus.
    QeRetrieval {
        task: String,
        data: PathBuf,
        distractors: PathBuf,
        target_size: usize,
        #[serde(default = "default_ks")]
        ks: Vec<usize>,
    },
    /// Labeled (question, candidate sentence) pairs grouped by question.
    AnswerSelection { task: String, data: PathBuf },
    /// `{question, context, answer}` records.
    ExactMatch { task: String, data: PathBuf },
}

impl EvalEntry {
    pub fn task(&self) -> &str {
        match self {
            EvalEntry::Classification { task, .. }
            | EvalEntry::QeRetrieval { task, .. }
            | EvalEntry::AnswerSelection { task, .. }
            | EvalEntry::ExactMatch { task, .. } => task,
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            EvalEntry::QeRetrieval { data, distractors, .. } => vec![data, distractors],
            EvalEntry::Classification { data, .. }
            | EvalEntry::AnswerSelection { data, .. }
            | EvalEntry::ExactMatch { data, .. } => vec![data],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let cfg = Self::parse(&text, base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out_dir);
        self.tasks.iter_mut().for_each(|t| join(&mut t.data));
        self.calibration.iter_mut().for_each(|c| join(&mut c.data));
        for e in &mut self.eval {
            e.paths_mut().into_iter().for_each(join);
        }
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.encoder.seed = s;
            self.train.seed = s;
        }
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("config lists no tasks".into()));
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task name `{}`", t.name)));
            }
            if t.batch_size == 0 {
                return Err(Error::Config(format!("task `{}` has batch_size 0", t.name)));
            }
        }
        let known = |task: &str, what: &str| {
            if names.contains(task) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} refers to unknown task `{task}`")))
            }
        };
        let mut paths: Vec<&Path> = self.tasks.iter().map(|t| t.data.as_path()).collect();
        let mut calibrated = BTreeSet::new();
        for c in &self.calibration {
            known(&c.task, "calibration entry")?;
            if !calibrated.insert(c.task.as_str()) {
                return Err(Error::Config(format!("task `{}` is calibrated twice", c.task)));
            }
            paths.push(&c.data);
        }
        let mut with_roc = BTreeSet::new();
        for e in &self.eval {
            known(e.task(), "eval entry")?;
            if matches!(e, EvalEntry::Classification { .. }) && !with_roc.insert(e.task()) {
                return Err(Error::Config(format!(
                    "two classification entries for task `{}`",
                    e.task()
                )));
            }
            match e {
                EvalEntry::QeRetrieval {
                    data, distractors, ks, ..
                } => {
                    if ks.is_empty() || ks.contains(&0) {
                        return Err(Error::Config("ks must be non-empty and positive".into()));
                    }
                    paths.extend([data.as_path(), distractors.as_path()]);
                }
                EvalEntry::Classification { data, .. }
                | EvalEntry::AnswerSelection { data, .. }
                | EvalEntry::ExactMatch { data, .. } => paths.push(data),
            }
        }
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("data file {} does not exist", missing.display())));
        }
        Ok(())
    }
}
