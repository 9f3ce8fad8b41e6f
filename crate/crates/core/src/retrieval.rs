//! Exact cosine search over an embedded corpus, plus the retrieval
//! protocols built on it: equivalent-question corpus construction,
//! thresholded answer selection, and sentence-level exact match.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::ThresholdFilter;
use crate::encoder::{self, Embedding, ModelParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::textproc::{self, Vocabulary};

pub type DocId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocId,
    pub text: String,
}

#[derive(Debug, Clone)]
struct Entry {
    id: DocId,
    text: String,
    embedding: Embedding,
    norm: f64,
}

/// Immutable corpus of embedded documents.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    entries: Vec<Entry>,
}

/// Ranked `(doc id, similarity)` pairs, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub ranked: Vec<(DocId, f64)>,
    #[serde(default)]
    pub no_answer: bool,
}

impl QueryResult {
    pub fn top(&self) -> Option<(DocId, f64)> {
        self.ranked.first().copied()
    }
}

fn by_score_then_id(a: &(DocId, f64), b: &(DocId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Embeds one text, rejecting texts with no tokens.
pub fn embed_text(params: &ModelParams, vocab: &Vocabulary, id: &str, text: &str) -> Result<Embedding> {
    let seq = textproc::encode(text, vocab, params.config().max_len)?;
    if seq.is_empty() {
        return Err(Error::EmptyText { id: id.to_string() });
    }
    encoder::embed(params, &seq)
}

impl RetrievalIndex {
    pub fn build(docs: &[Document], params: &ModelParams, vocab: &Vocabulary) -> Result<Self> {
        Self::build_with(docs, params, vocab, Exec::default())
    }

    pub fn build_with(docs: &[Document], params: &ModelParams, vocab: &Vocabulary, exec: Exec) -> Result<Self> {
        let embeddings = exec.try_map(docs, |d| embed_text(params, vocab, &d.id.to_string(), &d.text))?;
        Self::from_embeddings(
            docs.iter()
                .zip(embeddings)
                .map(|(d, e)| (d.id, d.text.clone(), e))
                .collect(),
        )
    }

    /// Builds an index from precomputed embeddings.
    pub fn from_embeddings(items: Vec<(DocId, String, Embedding)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("retrieval corpus is empty".into()));
        }
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(items.len());
        for (id, text, embedding) in items {
            if !seen.insert(id) {
                return Err(Error::Format(format!("duplicate document id {id}")));
            }
            let norm = embedding.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::ZeroNorm);
            }
            entries.push(Entry {
                id,
                text,
                embedding,
                norm,
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn text(&self, id: DocId) -> Option<&str> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.text.as_str())
    }

    pub fn embedding(&self, id: DocId) -> Option<&Embedding> {
        self.entries.iter().find(|e| e.id == id).map(|e| &e.embedding)
    }

    /// Exact top-k by cosine; `k` larger than the corpus returns everything.
    pub fn search_embedding(&self, query: &[f64], k: usize) -> Result<QueryResult> {
        self.search_embedding_with(query, k, Exec::default())
    }

    pub fn search_embedding_with(&self, query: &[f64], k: usize, exec: Exec) -> Result<QueryResult> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(Error::ZeroNorm);
        }
        if let Some(e) = self.entries.first() {
            if e.embedding.len() != query.len() {
                return Err(Error::ShapeMismatch(format!(
                    "query has {} dims, index has {}",
                    query.len(),
                    e.embedding.len()
                )));
            }
        }
        let mut scored: Vec<(DocId, f64)> = exec.map(&self.entries, |e| {
            let dot: f64 = e.embedding.iter().zip(query).map(|(a, b)| a * b).sum();
            (e.id, (dot / (e.norm * qn)).clamp(-1.0, 1.0))
        });
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_score_then_id);
            scored.truncate(k);
        }
        scored.sort_by(by_score_then_id);
        Ok(QueryResult {
            ranked: scored,
            no_answer: false,
        })
    }

    pub fn search(&self, params: &ModelParams, vocab: &Vocabulary, query: &str, k: usize) -> Result<QueryResult> {
        let q = embed_text(params, vocab, "query", query)?;
        self.search_embedding(&q, k)
    }
}

/// Top-1 retrieval with an optional no-answer threshold.
pub fn answer_select_embedding(
    index: &RetrievalIndex,
    query: &[f64],
    filter: Option<&ThresholdFilter>,
) -> Result<QueryResult> {
    let mut result = index.search_embedding(query, 1)?;
    if let (Some(f), Some((_, sim))) = (filter, result.top()) {
        result.no_answer = !f.apply(sim);
    }
    Ok(result)
}

pub fn answer_select(
    index: &RetrievalIndex,
    params: &ModelParams,
    vocab: &Vocabulary,
    query: &str,
    filter: Option<&ThresholdFilter>,
) -> Result<QueryResult> {
    let q = embed_text(params, vocab, "query", query)?;
    answer_select_embedding(index, &q, filter)
}

/// A query with the documents that count as relevant to it.
#[derive(Debug, Clone, PartialEq)]
pub struct QeQuery {
    pub query_id: String,
    pub text: String,
    pub relevant: Vec<Document>,
}

/// Corpus for equivalent-question retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct QeCorpus {
    pub docs: Vec<Document>,
    pub gold: BTreeMap<String, Vec<DocId>>,
    /// Set when there were too few distractors to reach the target size.
    pub short: bool,
}

/// Every relevant document goes in first; seeded distractors fill the rest
/// up to `target_size`. Documents are returned sorted by id.
pub fn build_qe_corpus(
    queries: &[QeQuery],
    distractors: &[Document],
    seed: u64,
    target_size: usize,
) -> Result<QeCorpus> {
    let mut docs: BTreeMap<DocId, Document> = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for q in queries {
        if q.relevant.is_empty() {
            return Err(Error::Format(format!(
                "query `{}` has no relevant document",
                q.query_id
            )));
        }
        let mut ids = Vec::with_capacity(q.relevant.len());
        for d in &q.relevant {
            if let Some(prev) = docs.get(&d.id) {
                if prev.text != d.text {
                    return Err(Error::Format(format!("document id {} used for two texts", d.id)));
                }
            }
            docs.insert(d.id, d.clone());
            ids.push(d.id);
        }
        ids.sort_unstable();
        ids.dedup();
        if gold.insert(q.query_id.clone(), ids).is_some() {
            return Err(Error::Format(format!("duplicate query id `{}`", q.query_id)));
        }
    }
    if target_size < docs.len() {
        return Err(Error::Config(format!(
            "target size {target_size} is below the {} relevant documents",
            docs.len()
        )));
    }
    let mut pool: Vec<&Document> = distractors.iter().filter(|d| !docs.contains_key(&d.id)).collect();
    pool.sort_by_key(|d| d.id);
    pool.dedup_by_key(|d| d.id);
    let need = target_size - docs.len();
    let short = pool.len() < need;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in pool.choose_multiple(&mut rng, need.min(pool.len())) {
        docs.insert(d.id, (*d).clone());
    }
    Ok(QeCorpus {
        docs: docs.into_values().collect(),
        gold,
        short,
    })
}

/// Splits after every run of `.`, `!` or `?` that is followed by
/// whitespace, the end of the text, or an uppercase letter. There is no
/// abbreviation handling, so "D.C." splits into "D." and "C.".
pub fn split_sentences(paragraph: &str) -> Vec<String> {
    let chars: Vec<char> = paragraph.chars().collect();
    let is_term = |c: char| matches!(c, '.' | '!' | '?');
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        current.push(c);
        i += 1;
        if is_term(c) {
            while i < chars.len() && is_term(chars[i]) {
                current.push(chars[i]);
                i += 1;
            }
            let boundary = chars.get(i).is_none_or(|n| n.is_whitespace() || n.is_uppercase());
            if boundary {
                let s = current.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                current.clear();
            }
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether the answer phrase occurs in the sentence, ignoring case and
/// whitespace runs. An empty phrase never matches.
pub fn exact_match_in_sentence(sentence: &str, answer: &str) -> bool {
    let a = normalize(answer);
    !a.is_empty() && normalize(sentence).contains(&a)
}

#[derive(Serialize, Deserialize)]
struct GoldRecord {
    query_id: String,
    relevant_ids: Vec<DocId>,
}

/// Corpus file: one `{"id", "text"}` record per line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    crate::jsonl::read_jsonl(path.as_ref())
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    crate::jsonl::write_jsonl(path.as_ref(), docs)
}

/// Gold map file: one `{"query_id", "relevant_ids"}` record per line.
pub fn read_gold(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<DocId>>> {
    let recs: Vec<GoldRecord> = crate::jsonl::read_jsonl(path.as_ref())?;
    Ok(recs.into_iter().map(|r| (r.query_id, r.relevant_ids)).collect())
}

pub fn write_gold(path: impl AsRef<Path>, gold: &BTreeMap<String, Vec<DocId>>) -> Result<()> {
    crate::jsonl::write_jsonl(
        path.as_ref(),
        gold.iter().map(|(q, ids)| GoldRecord {
            query_id: q.clone(),
            relevant_ids: ids.clone(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ThresholdFilter;

    fn emb(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    fn index(vs: &[(DocId, &[f64])]) -> RetrievalIndex {
        RetrievalIndex::from_embeddings(vs.iter().map(|(id, v)| (*id, format!("doc {id}"), emb(v))).collect()).unwrap()
    }

    #[test]
    fn identical_query_ranks_first() {
        let idx = index(&[(1, &[1.0, 0.0]), (2, &[0.0, 1.0]), (3, &[1.0, 1.0])]);
        let r = idx.search_embedding(&[0.0, 2.0], 2).unwrap();
        assert_eq!(r.ranked[0], (2, 1.0));
        assert_eq!(r.ranked.len(), 2);
        assert!((r.ranked[1].1 - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_id_and_large_k_returns_all() {
        let idx = index(&[(9, &[1.0, 1.0]), (4, &[2.0, 2.0]), (6, &[0.0, 1.0])]);
        let r = idx.search_embedding(&[1.0, 1.0], 10).unwrap();
        assert_eq!(r.ranked.iter().map(|x| x.0).collect::<Vec<_>>(), vec![4, 9, 6]);
        assert!(idx.search_embedding(&[1.0, 1.0], 0).is_err());
        assert!(idx.search_embedding(&[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn index_rejects_bad_entries() {
        assert!(RetrievalIndex::from_embeddings(vec![]).is_err());
        let dup = vec![(1, "a".into(), emb(&[1.0])), (1, "b".into(), emb(&[2.0]))];
        assert!(RetrievalIndex::from_embeddings(dup).is_err());
        assert!(matches!(
            RetrievalIndex::from_embeddings(vec![(1, "a".into(), emb(&[0.0]))]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn answer_select_threshold() {
        let idx = index(&[(1, &[1.0, 0.0])]);
        let q90 = [0.9, (1.0f64 - 0.81).sqrt()];
        let q50 = [0.5, (1.0f64 - 0.25).sqrt()];
        let f = ThresholdFilter::fixed("qa", 0.65);
        assert!(!answer_select_embedding(&idx, &q90, Some(&f)).unwrap().no_answer);
        assert!(answer_select_embedding(&idx, &q50, Some(&f)).unwrap().no_answer);
        let r = answer_select_embedding(&idx, &q50, None).unwrap();
        assert!(!r.no_answer);
        assert_eq!(r.top().unwrap().0, 1);
    }

    fn docs(ids: std::ops::Range<u64>) -> Vec<Document> {
        ids.map(|id| Document {
            id,
            text: format!("question {id}"),
        })
        .collect()
    }

    #[test]
    fn qe_corpus_examples() {
        let queries = vec![
            QeQuery {
                query_id: "a".into(),
                text: "qa".into(),
                relevant: docs(0..1),
            },
            QeQuery {
                query_id: "b".into(),
                text: "qb".into(),
                relevant: docs(1..2),
            },
        ];
        let distractors = docs(100..108);
        let c = build_qe_corpus(&queries, &distractors, 3, 10).unwrap();
        assert_eq!(c.docs.len(), 10);
        assert_eq!(c.gold.len(), 2);
        assert!(!c.short);
        assert_eq!(c, build_qe_corpus(&queries, &distractors, 3, 10).unwrap());

        let c = build_qe_corpus(&queries, &distractors, 3, 2).unwrap();
        assert_eq!(c.docs.iter().map(|d| d.id).collect::<Vec<_>>(), vec![0, 1]);

        let c = build_qe_corpus(&queries, &distractors, 3, 20).unwrap();
        assert!(c.short);
        assert_eq!(c.docs.len(), 10);
        assert!(build_qe_corpus(&queries, &distractors, 3, 1).is_err());
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("A b. C d."), vec!["A b.", "C d."]);
        assert_eq!(
            split_sentences("Washington, D.C. is the capital."),
            vec!["Washington, D.", "C.", "is the capital."]
        );
        assert_eq!(
            split_sentences("no terminal punctuation here"),
            vec!["no terminal punctuation here"]
        );
        assert_eq!(
            split_sentences("Really?! Yes.  Pi is 3.14 exactly"),
            vec!["Really?!", "Yes.", "Pi is 3.14 exactly"]
        );
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn exact_match() {
        assert!(exact_match_in_sentence("The sky is blue.", "blue"));
        assert!(!exact_match_in_sentence("The sky is blue.", "green"));
        assert!(exact_match_in_sentence("Founded in  1853.", "in 1853"));
        assert!(exact_match_in_sentence("Founded IN\t1853.", "in 1853"));
        assert!(!exact_match_in_sentence("anything", "  "));
    }

    #[test]
    fn corpus_and_gold_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = docs(3..6);
        write_corpus(dir.path().join("c.jsonl"), &d).unwrap();
        assert_eq!(read_corpus(dir.path().join("c.jsonl")).unwrap(), d);
        let line = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
        assert!(line.starts_with("{\"id\":3,\"text\":\"question 3\"}\n"));
        let gold: BTreeMap<String, Vec<DocId>> = [("q1".to_string(), vec![3, 5])].into();
        write_gold(dir.path().join("g.jsonl"), &gold).unwrap();
        assert_eq!(read_gold(dir.path().join("g.jsonl")).unwrap(), gold);
    }
}
