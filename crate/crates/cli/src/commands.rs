//! What each subcommand does, minus argument parsing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use qembed::calibration::{calibrate, ThresholdFilter};
use qembed::encoder::ModelParams;
use qembed::evaluation::{accuracy_at_k, classify_metrics, roc_curve, write_metrics, write_roc, MetricRecord};
use qembed::jsonl::read_jsonl;
use qembed::losses::cosine;
use qembed::retrieval::{
    answer_select, build_qe_corpus, embed_text, exact_match_in_sentence, read_corpus, split_sentences, DocId, Document,
    QeQuery, QueryResult, RetrievalIndex,
};
use qembed::textproc::{build_vocab, Vocabulary};
use qembed::training::{encode_tasks, load_checkpoint, save_checkpoint, train, write_log, PairExample, TaskSpec};
use qembed::{Error, Exec, Result};
use serde::Deserialize;

use crate::config::{EvalEntry, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.qemb";
pub const LOG_FILE: &str = "train.log";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FILTERS_FILE: &str = "filters.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn read_pairs(path: &Path) -> Result<Vec<PairExample>> {
    let pairs: Vec<PairExample> = read_jsonl(path)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(pairs)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

pub struct TrainSummary {
    pub steps: usize,
    pub vocab_size: usize,
    pub checkpoint: PathBuf,
}

/// Builds the vocabulary over all task texts, trains with the configured
/// curriculum and writes checkpoint, log and vocabulary.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let mut specs = Vec::with_capacity(cfg.tasks.len());
    for t in &cfg.tasks {
        let mut spec = TaskSpec::new(&t.name, t.loss, read_pairs(&t.data)?);
        spec.batch_size = t.batch_size;
        specs.push(spec);
    }
    let texts: Vec<&str> = specs
        .iter()
        .flat_map(|s| &s.dataset)
        .flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()])
        .collect();
    let vocab = build_vocab(&texts, cfg.vocab_min_count)?;
    let tasks = encode_tasks(&specs, &vocab, cfg.encoder.max_len)?;
    let params = ModelParams::init(&cfg.encoder, vocab.len())?;
    info!(
        "training {} tasks, {} parameters, vocabulary {}",
        tasks.len(),
        params.values().len(),
        vocab.len()
    );
    let out = train(params, &tasks, &cfg.train, Exec::default())?;
    create_out_dir(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&out.params, &vocab, &checkpoint)?;
    write_log(cfg.out_dir.join(LOG_FILE), &out.log)?;
    vocab.save(cfg.out_dir.join(VOCAB_FILE))?;
    Ok(TrainSummary {
        steps: out.log.len(),
        vocab_size: vocab.len(),
        checkpoint,
    })
}

fn checkpoint_or_default(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

/// Cosine similarity and label for every labeled pair.
pub fn score_pairs(params: &ModelParams, vocab: &Vocabulary, pairs: &[PairExample]) -> Result<Vec<(f64, u8)>> {
    let indexed: Vec<(usize, &PairExample)> = pairs.iter().enumerate().collect();
    Exec::default().try_map(&indexed, |(i, p)| {
        let label = p.label.ok_or_else(|| Error::InvalidExample {
            task: String::new(),
            index: *i,
            reason: "scoring needs a label".into(),
        })?;
        let a = embed_text(params, vocab, &format!("pair {i} text_a"), &p.text_a)?;
        let b = embed_text(params, vocab, &format!("pair {i} text_b"), &p.text_b)?;
        Ok((cosine(&a, &b)?, label))
    })
}

/// Calibrates every configured task and writes the filters file.
pub fn cmd_calibrate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<ThresholdFilter>> {
    if cfg.calibration.is_empty() {
        return Err(Error::Config("config has no calibration entries".into()));
    }
    let (params, vocab) = load_checkpoint(checkpoint_or_default(cfg, checkpoint))?;
    let mut filters = Vec::with_capacity(cfg.calibration.len());
    for c in &cfg.calibration {
        let scored = score_pairs(&params, &vocab, &read_pairs(&c.data)?)?;
        filters.push(calibrate(&c.task, &scored, c.policy)?);
    }
    create_out_dir(&cfg.out_dir)?;
    let json = serde_json::to_string_pretty(&filters).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(cfg.out_dir.join(FILTERS_FILE), json + "\n")?;
    Ok(filters)
}

pub fn read_filters(path: &Path) -> Result<Vec<ThresholdFilter>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Deserialize)]
struct QcaRecord {
    question: String,
    context: String,
    answer: String,
}

struct Evaluator<'a> {
    params: &'a ModelParams,
    vocab: &'a Vocabulary,
    filters: BTreeMap<String, ThresholdFilter>,
    seed: u64,
    out_dir: &'a Path,
}

impl Evaluator<'_> {
    fn filter(&self, task: &str) -> Option<&ThresholdFilter> {
        self.filters.get(task)
    }

    fn classification(&self, task: &str, data: &Path) -> Result<Vec<MetricRecord>> {
        let scored = score_pairs(self.params, self.vocab, &read_pairs(data)?)?;
        let filter = self.filter(task).ok_or_else(|| {
            Error::Config(format!(
                "no threshold for task `{task}`; run calibrate or pass --threshold"
            ))
        })?;
        let report = classify_metrics(&scored, filter)?;
        let roc = roc_curve(&scored)?;
        write_roc(self.out_dir.join(format!("roc_{task}.tsv")), &roc)?;
        Ok(vec![
            MetricRecord::new("accuracy", task, report.accuracy),
            MetricRecord::new("precision", task, report.precision),
            MetricRecord::new("recall", task, report.recall),
            MetricRecord::new("f1", task, report.f1),
            MetricRecord::new("auc", task, roc.auc),
            MetricRecord::new("threshold", task, filter.threshold),
        ])
    }

    fn qe_retrieval(
        &self,
        task: &str,
        data: &Path,
        distractor_path: &Path,
        target_size: usize,
        ks: &[usize],
    ) -> Result<Vec<MetricRecord>> {
        let pairs = read_pairs(data)?;
        // relevant documents get ids 0.. in order of first appearance
        let mut doc_ids: BTreeMap<&str, DocId> = BTreeMap::new();
        let mut order: Vec<&str> = Vec::new();
        let mut by_query: BTreeMap<&str, Vec<Document>> = BTreeMap::new();
        for p in &pairs {
            let next = doc_ids.len() as DocId;
            let id = *doc_ids.entry(p.text_b.as_str()).or_insert(next);
            if !by_query.contains_key(p.text_a.as_str()) {
                order.push(&p.text_a);
            }
            let rel = by_query.entry(&p.text_a).or_default();
            if !rel.iter().any(|d| d.id == id) {
                rel.push(Document {
                    id,
                    text: p.text_b.clone(),
                });
            }
        }
        let queries: Vec<QeQuery> = order
            .iter()
            .enumerate()
            .map(|(i, q)| QeQuery {
                query_id: format!("q{i:06}"),
                text: q.to_string(),
                relevant: by_query[q].clone(),
            })
            .collect();
        let offset = doc_ids.len() as DocId;
        let distractors: Vec<Document> = read_corpus(distractor_path)?
            .into_iter()
            .filter(|d| !doc_ids.contains_key(d.text.as_str()))
            .enumerate()
            .map(|(i, d)| Document {
                id: offset + i as DocId,
                text: d.text,
            })
            .collect();
        let corpus = build_qe_corpus(&queries, &distractors, self.seed, target_size)?;
        if corpus.short {
            warn!(
                "{task}: only {} documents available for target size {target_size}",
                corpus.docs.len()
            );
        }
        let index = RetrievalIndex::build(&corpus.docs, self.params, self.vocab)?;
        let kmax = ks.iter().copied().max().unwrap_or(1);
        let results = Exec::default().try_map(&queries, |q| -> Result<(String, QueryResult)> {
            let emb = embed_text(self.params, self.vocab, &q.query_id, &q.text)?;
            Ok((
                q.query_id.clone(),
                index.search_embedding_with(&emb, kmax, Exec::Sequential)?,
            ))
        })?;
        let results: BTreeMap<String, QueryResult> = results.into_iter().collect();
        let acc = accuracy_at_k(&results, &corpus.gold, ks)?;
        let mut out: Vec<MetricRecord> = acc
            .into_iter()
            .map(|(k, v)| MetricRecord::new(format!("accuracy@{k}"), task, v))
            .collect();
        out.push(MetricRecord::new("corpus_size", task, corpus.docs.len() as f64));
        Ok(out)
    }

    fn answer_selection(&self, task: &str, data: &Path) -> Result<Vec<MetricRecord>> {
        let pairs = read_pairs(data)?;
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<(&str, u8)>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            let label = p.label.ok_or_else(|| Error::InvalidExample {
                task: task.into(),
                index: i,
                reason: "answer selection needs labeled pairs".into(),
            })?;
            if !groups.contains_key(p.text_a.as_str()) {
                order.push(&p.text_a);
            }
            groups.entry(&p.text_a).or_default().push((&p.text_b, label));
        }
        let filter = self.filter(task);
        let outcomes = Exec::default().try_map(&order, |q| -> Result<(bool, bool)> {
            let cands = &groups[q];
            let docs: Vec<Document> = cands
                .iter()
                .enumerate()
                .map(|(i, (t, _))| Document {
                    id: i as DocId,
                    text: t.to_string(),
                })
                .collect();
            let index = RetrievalIndex::build_with(&docs, self.params, self.vocab, Exec::Sequential)?;
            let r = answer_select(&index, self.params, self.vocab, q, filter)?;
            let answerable = cands.iter().any(|(_, l)| *l == 1);
            let correct = match (r.no_answer, r.top()) {
                (true, _) | (false, None) => !answerable,
                (false, Some((id, _))) => cands[id as usize].1 == 1,
            };
            Ok((correct, r.no_answer))
        })?;
        let n = outcomes.len() as f64;
        Ok(vec![
            MetricRecord::new(
                "answer_accuracy",
                task,
                outcomes.iter().filter(|o| o.0).count() as f64 / n,
            ),
            MetricRecord::new(
                "no_answer_rate",
                task,
                outcomes.iter().filter(|o| o.1).count() as f64 / n,
            ),
        ])
    }

    fn exact_match(&self, task: &str, data: &Path) -> Result<Vec<MetricRecord>> {
        let records: Vec<QcaRecord> = read_jsonl(data)?;
        if records.is_empty() {
            return Err(Error::EmptyDataset(data.display().to_string()));
        }
        let hits = Exec::default().try_map(&records, |r| -> Result<bool> {
            let docs: Vec<Document> = split_sentences(&r.context)
                .into_iter()
                .enumerate()
                .map(|(i, text)| Document { id: i as DocId, text })
                .collect();
            if docs.is_empty() {
                return Ok(false);
            }
            let index = RetrievalIndex::build_with(&docs, self.params, self.vocab, Exec::Sequential)?;
            let res = answer_select(&index, self.params, self.vocab, &r.question, None)?;
            Ok(res
                .top()
                .is_some_and(|(id, _)| exact_match_in_sentence(&docs[id as usize].text, &r.answer)))
        })?;
        let rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
        Ok(vec![MetricRecord::new("exact_match", task, rate)])
    }
}

/// Runs every eval entry and writes the metrics report (and ROC files for
/// classification entries). `threshold` replaces all calibrated filters.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, threshold: Option<f64>) -> Result<Vec<MetricRecord>> {
    if cfg.eval.is_empty() {
        return Err(Error::Config("config has no eval entries".into()));
    }
    let (params, vocab) = load_checkpoint(checkpoint_or_default(cfg, checkpoint))?;
    let filters: BTreeMap<String, ThresholdFilter> = match threshold {
        Some(t) => cfg
            .tasks
            .iter()
            .map(|task| (task.name.clone(), ThresholdFilter::fixed(&task.name, t)))
            .collect(),
        None => {
            let path = cfg.out_dir.join(FILTERS_FILE);
            if path.exists() {
                read_filters(&path)?.into_iter().map(|f| (f.task.clone(), f)).collect()
            } else {
                BTreeMap::new()
            }
        }
    };
    create_out_dir(&cfg.out_dir)?;
    let ev = Evaluator {
        params: &params,
        vocab: &vocab,
        filters,
        seed: cfg.train.seed,
        out_dir: &cfg.out_dir,
    };
    let mut records = Vec::new();
    for entry in &cfg.eval {
        let mut r = match entry {
            EvalEntry::Classification { task, data } => ev.classification(task, data)?,
            EvalEntry::QeRetrieval {
                task,
                data,
                distractors,
                target_size,
                ks,
            } => ev.qe_retrieval(task, data, distractors, *target_size, ks)?,
            EvalEntry::AnswerSelection { task, data } => ev.answer_selection(task, data)?,
            EvalEntry::ExactMatch { task, data } => ev.exact_match(task, data)?,
        };
        if let Some(bad) = r.iter().find(|m| !m.value.is_finite()) {
            return Err(Error::NonFinite {
                task: bad.task.clone(),
                step: 0,
                detail: format!("metric {} is {}", bad.metric, bad.value),
            });
        }
        records.append(&mut r);
    }
    write_metrics(cfg.out_dir.join(METRICS_FILE), &records)?;
    Ok(records)
}

/// One line of search output.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub rank: usize,
    pub id: DocId,
    pub similarity: f64,
    pub text: String,
}

/// Ranks `corpus` against `query`. With a threshold, hits below it are
/// dropped, so an empty result means "no answer".
pub fn cmd_search(checkpoint: &Path, corpus: &Path, query: &str, k: usize, threshold: Option<f64>) -> Result<Vec<Hit>> {
    let (params, vocab) = load_checkpoint(checkpoint)?;
    let docs = read_corpus(corpus)?;
    let index = RetrievalIndex::build(&docs, &params, &vocab)?;
    let result = index.search(&params, &vocab, query, k)?;
    Ok(result
        .ranked
        .iter()
        .filter(|(_, s)| threshold.is_none_or(|t| *s >= t))
        .enumerate()
        .map(|(i, &(id, similarity))| Hit {
            rank: i + 1,
            id,
            similarity,
            text: index.text(id).unwrap_or_default().to_string(),
        })
        .collect())
}
