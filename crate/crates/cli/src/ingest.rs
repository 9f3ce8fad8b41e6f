//! Normalizes raw datasets into canonical pair records.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use qembed::jsonl::write_jsonl;
use qembed::retrieval::{exact_match_in_sentence, split_sentences};
use qembed::training::PairExample;
use qembed::{Error, Result};
use serde::Deserialize;

/// Largest tolerated share of malformed input records.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// `text_a <TAB> text_b <TAB> 0|1`
    PairsLabeled,
    /// `text_a <TAB> text_b`, every row a positive.
    PairsPositive,
    /// `question <TAB> topic`
    QuestionTopic,
    /// JSON lines `{"question", "context", "answer"}`.
    QuestionContextAnswer,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pairs_labeled" => Self::PairsLabeled,
            "pairs_positive" => Self::PairsPositive,
            "question_topic" => Self::QuestionTopic,
            "question_context_answer" => Self::QuestionContextAnswer,
            other => return Err(Error::Config(format!("unknown input format `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    /// Non-blank input lines.
    pub read: usize,
    pub written: usize,
    /// Unparseable records.
    pub malformed: usize,
    /// Well-formed records with no sentence containing the answer.
    pub dropped: usize,
}

impl fmt::Display for IngestStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "read {}, written {}, malformed {}, dropped {}",
            self.read, self.written, self.malformed, self.dropped
        )
    }
}

#[derive(Deserialize)]
struct QcaRecord {
    question: String,
    context: String,
    answer: String,
}

enum Outcome {
    Keep(PairExample),
    Malformed,
    Dropped,
}

fn non_empty(s: &str) -> Option<&str> {
    let t = s.trim();
    (!t.is_empty()).then_some(t)
}

fn tsv_fields(line: &str, n: usize) -> Option<Vec<&str>> {
    let f: Vec<&str> = line.split('\t').collect();
    (f.len() == n).then_some(f)
}

fn parse_line(format: InputFormat, line: &str) -> Outcome {
    let keep = |p: Option<PairExample>| p.map_or(Outcome::Malformed, Outcome::Keep);
    match format {
        InputFormat::PairsLabeled => keep((|| {
            let f = tsv_fields(line, 3)?;
            let label = match f[2].trim() {
                "0" => 0,
                "1" => 1,
                _ => return None,
            };
            Some(PairExample::labeled(non_empty(f[0])?, non_empty(f[1])?, label))
        })()),
        InputFormat::PairsPositive | InputFormat::QuestionTopic => keep((|| {
            let f = tsv_fields(line, 2)?;
            Some(PairExample::positive(non_empty(f[0])?, non_empty(f[1])?))
        })()),
        InputFormat::QuestionContextAnswer => {
            let Ok(rec) = serde_json::from_str::<QcaRecord>(line) else {
                return Outcome::Malformed;
            };
            let (Some(q), Some(_)) = (non_empty(&rec.question), non_empty(&rec.answer)) else {
                return Outcome::Malformed;
            };
            match split_sentences(&rec.context)
                .into_iter()
                .find(|s| exact_match_in_sentence(s, &rec.answer))
            {
                Some(sentence) => Outcome::Keep(PairExample::positive(q, sentence)),
                None => Outcome::Dropped,
            }
        }
    }
}

/// Converts `text` in `format` to canonical records. Fails if more than
/// [`MAX_MALFORMED_FRACTION`] of the records are malformed.
pub fn normalize(text: &str, format: InputFormat) -> Result<(Vec<PairExample>, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut out = Vec::new();
    for line in text.lines().map(|l| l.trim_end_matches('\r')) {
        if line.trim().is_empty() {
            continue;
        }
        stats.read += 1;
        match parse_line(format, line) {
            Outcome::Keep(p) => out.push(p),
            Outcome::Malformed => stats.malformed += 1,
            Outcome::Dropped => stats.dropped += 1,
        }
    }
    stats.written = out.len();
    if stats.malformed as f64 > MAX_MALFORMED_FRACTION * stats.read as f64 {
        return Err(Error::Format(format!(
            "{} of {} records are malformed (limit {}%)",
            stats.malformed,
            stats.read,
            MAX_MALFORMED_FRACTION * 100.0
        )));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("ingest produced no records".into()));
    }
    Ok((out, stats))
}

/// Reads `input`, normalizes it and writes the records to `output`.
pub fn ingest_file(input: &Path, format: InputFormat, output: &Path) -> Result<IngestStats> {
    let text = std::fs::read_to_string(input)?;
    let (records, stats) = normalize(&text, format)?;
    write_jsonl(output, &records)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_rows_become_records() {
        let text: String = (0..10).map(|i| format!("q{i}\tr{i}\t{}\n", i % 2)).collect();
        let (recs, stats) = normalize(&text, InputFormat::PairsLabeled).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(stats.written, 10);
        assert_eq!(recs[1], PairExample::labeled("q1", "r1", 1));
    }

    #[test]
    fn topics_pair_question_with_topic() {
        let (recs, _) = normalize("how do magnets work\tScience\n", InputFormat::QuestionTopic).unwrap();
        assert_eq!(recs, vec![PairExample::positive("how do magnets work", "Science")]);
    }

    #[test]
    fn answer_bearing_sentence_is_selected() {
        let line =
            r#"{"question":"Who won?","context":"It rained. The Reds won the cup. Fans left.","answer":"the reds"}"#;
        let (recs, _) = normalize(line, InputFormat::QuestionContextAnswer).unwrap();
        assert_eq!(recs[0].text_b, "The Reds won the cup.");
        assert_eq!(recs[0].label, None);
    }

    #[test]
    fn answer_across_a_boundary_is_dropped_and_counted() {
        let ok = r#"{"question":"q","context":"Alpha beta. Gamma.","answer":"alpha"}"#;
        let split =
            r#"{"question":"Where?","context":"He moved to Washington, D.C. in May.","answer":"Washington, D.C."}"#;
        let (recs, stats) = normalize(&format!("{ok}\n{split}\n"), InputFormat::QuestionContextAnswer).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((stats.read, stats.dropped, stats.malformed), (2, 1, 0));
    }

    #[test]
    fn malformed_share_limit() {
        let good: String = (0..100).map(|i| format!("a{i}\tb{i}\n")).collect();
        let one_bad = format!("{good}only-one-field\n");
        let (_, stats) = normalize(&one_bad, InputFormat::PairsPositive).unwrap();
        assert_eq!(stats.malformed, 1);
        let two_bad = format!("{one_bad}a\tb\tc\n");
        assert!(matches!(
            normalize(&two_bad, InputFormat::PairsPositive),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_labels_are_malformed() {
        for row in ["a\tb\t2", "a\tb", "\tb\t1", "a\tb\t1\textra"] {
            let (_, stats) = normalize(
                &format!("{row}\n{}", "x\ty\t0\n".repeat(200)),
                InputFormat::PairsLabeled,
            )
            .unwrap();
            assert_eq!(stats.malformed, 1, "{row}");
        }
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!("csv".parse::<InputFormat>(), Err(Error::Config(_))));
    }
}
