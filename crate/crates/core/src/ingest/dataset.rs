//! Normalized dataset: vocabularies, per-visit and per-question sequences, labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::events::{Block, ProcEvent, QuestionSequence, ResponseStatus, Visit};
use super::log::{LogSchema, ParsedLog};
use super::replay::{assign_statuses, final_statuses, segment_visits, AnswerKey};
use crate::error::{Error, Result};
use crate::provenance::Provenance;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const UNK_EVENT: &str = "<unk>";

/// Ordered question → block assignment. The order fixes the layout of student vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMap {
    pub questions: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub question_id: String,
    pub block: Block,
}

impl BlockMap {
    pub fn new(questions: Vec<BlockEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for q in &questions {
            if !seen.insert(&q.question_id) {
                return Err(Error::Config(format!(
                    "question {} appears twice in block map",
                    q.question_id
                )));
            }
        }
        Ok(Self { questions })
    }

    pub fn block_of(&self, question_id: &str) -> Option<Block> {
        self.questions
            .iter()
            .find(|q| q.question_id == question_id)
            .map(|q| q.block)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BlockMap =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Self::new(map.questions)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("block map serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInfo {
    pub id: String,
    pub block: Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub question: usize,
    pub status: ResponseStatus,
    pub events: Vec<ProcEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub id: String,
    pub partition: Partition,
    /// Chronological visits.
    pub visits: Vec<VisitRecord>,
    /// Final status per question index; unvisited questions are incomplete.
    pub outcomes: Vec<ResponseStatus>,
}

impl StudentRecord {
    pub fn visited(&self, question: usize) -> bool {
        self.visits.iter().any(|v| v.question == question)
    }

    /// All events on one question, visits concatenated in visit order. Empty if never visited.
    pub fn question_events(&self, question: usize) -> Vec<ProcEvent> {
        self.visits
            .iter()
            .filter(|v| v.question == question)
            .flat_map(|v| v.events.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDataset {
    pub format_version: u32,
    pub block_time_limit: f64,
    /// Index 0 is the unknown event type.
    pub event_vocab: Vec<String>,
    pub questions: Vec<QuestionInfo>,
    pub students: Vec<StudentRecord>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Fraction of students held out as the fixed test partition.
    pub test_fraction: f64,
    pub block_time_limit: f64,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            block_time_limit: 1800.0,
            seed: 0,
        }
    }
}

/// String ↔ index table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Event-type vocabulary: unknown type at 0, then observed types in sorted order.
    pub fn events_from<'a>(observed: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = observed.into_iter().collect();
        let mut tokens = vec![UNK_EVENT.to_string()];
        tokens.extend(set.into_iter().filter(|t| *t != UNK_EVENT).map(str::to_string));
        Self::from_tokens(tokens)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn get_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One `QuestionSequence` per (student, visited question), ordered as in the block map.
pub fn build_question_sequences(
    visits: &[Visit],
    block_map: &BlockMap,
    event_vocab: &Vocabulary,
) -> Result<Vec<QuestionSequence>> {
    let qindex: HashMap<&str, usize> = block_map
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (q.question_id.as_str(), i))
        .collect();
    let mut grouped: BTreeMap<(String, usize), Vec<ProcEvent>> = BTreeMap::new();
    for v in visits {
        let Some(&q) = qindex.get(v.question_id.as_str()) else {
            return Err(Error::Config(format!(
                "question {} is missing from the block map",
                v.question_id
            )));
        };
        let status = v.status.ok_or_else(|| {
            Error::Contract(format!("visit to {} has no status assigned", v.question_id))
        })?;
        let seq = grouped.entry((v.student_id.clone(), q)).or_default();
        seq.extend(v.events.iter().map(|e| ProcEvent {
            a: event_vocab.get_or_unk(&e.event_type),
            m: e.timestamp,
            q,
            c: status,
        }));
    }
    Ok(grouped
        .into_iter()
        .map(|((student_id, q), events)| QuestionSequence {
            student_id,
            question_id: block_map.questions[q].question_id.clone(),
            block: block_map.questions[q].block,
            events,
        })
        .collect())
}

/// Parse → segment → replay → vectorize for every student.
pub fn normalize(
    parsed: &ParsedLog,
    key: &AnswerKey,
    block_map: &BlockMap,
    schema: &LogSchema,
    options: IngestOptions,
    provenance: Provenance,
) -> Result<NormalizedDataset> {
    if !(0.0..1.0).contains(&options.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} must lie in [0, 1)",
            options.test_fraction
        )));
    }
    if options.block_time_limit <= 0.0 {
        return Err(Error::Config("block time limit must be positive".into()));
    }
    let qindex: HashMap<&str, usize> = block_map
        .questions
        .iter()
        .enumerate()
        .map(|(i, q)| (q.question_id.as_str(), i))
        .collect();

    let mut ids: Vec<&String> = parsed.students.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    ids.shuffle(&mut rng);
    let n_test = (ids.len() as f64 * options.test_fraction).round() as usize;
    let test: BTreeSet<&String> = ids[..n_test].iter().copied().collect();

    let event_vocab = Vocabulary::events_from(
        parsed
            .students
            .iter()
            .filter(|(id, _)| !test.contains(id))
            .flat_map(|(_, events)| events.iter().map(|e| e.event_type.as_str())),
    );

    let mut students = Vec::with_capacity(parsed.students.len());
    for (id, events) in &parsed.students {
        let mut visits = segment_visits(events);
        assign_statuses(&mut visits, key, &schema.mutations);
        let mut records = Vec::with_capacity(visits.len());
        for v in &visits {
            let q = *qindex.get(v.question_id.as_str()).ok_or_else(|| {
                Error::Config(format!(
                    "question {} is missing from the block map",
                    v.question_id
                ))
            })?;
            let status = v.status.expect("status assigned above");
            records.push(VisitRecord {
                question: q,
                status,
                events: v
                    .events
                    .iter()
                    .map(|e| ProcEvent {
                        a: event_vocab.get_or_unk(&e.event_type),
                        m: e.timestamp,
                        q,
                        c: status,
                    })
                    .collect(),
            });
        }
        let finals = final_statuses(&visits);
        let outcomes = block_map
            .questions
            .iter()
            .map(|q| {
                finals
                    .get(&q.question_id)
                    .copied()
                    .unwrap_or(ResponseStatus::Incomplete)
            })
            .collect();
        students.push(StudentRecord {
            id: id.clone(),
            partition: if test.contains(id) {
                Partition::Test
            } else {
                Partition::Train
            },
            visits: records,
            outcomes,
        });
    }

    Ok(NormalizedDataset {
        format_version: DATASET_FORMAT_VERSION,
        block_time_limit: options.block_time_limit,
        event_vocab: event_vocab.tokens().to_vec(),
        questions: block_map
            .questions
            .iter()
            .map(|q| QuestionInfo {
                id: q.question_id.clone(),
                block: q.block,
            })
            .collect(),
        students,
        provenance,
    })
}

/// Per-student labels derived from block-B outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    /// 1 iff the student's block-B correct count is strictly above the cohort mean.
    pub score: Vec<u8>,
    /// Block-B question indices, in block-map order.
    pub block_b_questions: Vec<usize>,
    /// Per student, 1 iff correct on each block-B question.
    pub per_question: Vec<Vec<u8>>,
}

pub fn derive_labels(dataset: &NormalizedDataset) -> Labels {
    let block_b = dataset.block_questions(Block::B);
    let per_question: Vec<Vec<u8>> = dataset
        .students
        .iter()
        .map(|s| {
            block_b
                .iter()
                .map(|&q| u8::from(s.outcomes[q].is_correct()))
                .collect()
        })
        .collect();
    let counts: Vec<f64> = per_question
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).sum())
        .collect();
    let mean = if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<f64>() / counts.len() as f64
    };
    Labels {
        score: counts.iter().map(|&c| u8::from(c > mean)).collect(),
        block_b_questions: block_b,
        per_question,
    }
}

impl NormalizedDataset {
    pub fn event_vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.event_vocab.clone())
    }

    pub fn question_ids(&self) -> Vec<String> {
        self.questions.iter().map(|q| q.id.clone()).collect()
    }

    /// Question indices of one block, in block-map order.
    pub fn block_questions(&self, block: Block) -> Vec<usize> {
        self.questions
            .iter()
            .enumerate()
            .filter(|(_, q)| q.block == block)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn student_indices(&self, partition: Partition) -> Vec<usize> {
        self.students
            .iter()
            .enumerate()
            .filter(|(_, s)| s.partition == partition)
            .map(|(i, _)| i)
            .collect()
    }

    /// Seconds at which the block containing `question` starts.
    pub fn time_origin(&self, question: usize) -> f64 {
        self.questions[question].block.index() as f64 * self.block_time_limit
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json("dataset", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if ds.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                ds.format_version
            )));
        }
        Ok(ds)
    }

    /// Keep only the given students (used by tests and sub-sampling).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            students: indices.iter().map(|&i| self.students[i].clone()).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::events::{QuestionType, RawEvent};
    use crate::ingest::replay::KeyEntry;

    fn raw(student: &str, q: &str, event_type: &str, t: f64, extra: &[(&str, &str)]) -> RawEvent {
        RawEvent {
            student_id: student.into(),
            question_id: q.into(),
            question_type: QuestionType::MultipleChoice,
            event_type: event_type.into(),
            timestamp: t,
            extra: extra
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            row: 0,
        }
    }

    fn block_map() -> BlockMap {
        BlockMap::new(vec![
            BlockEntry {
                question_id: "Q1".into(),
                block: Block::A,
            },
            BlockEntry {
                question_id: "Q2".into(),
                block: Block::A,
            },
            BlockEntry {
                question_id: "Q3".into(),
                block: Block::B,
            },
        ])
        .unwrap()
    }

    fn visit(q: &str, n: usize, t0: f64, status: ResponseStatus) -> Visit {
        Visit {
            student_id: "s".into(),
            question_id: q.into(),
            events: (0..n).map(|i| raw("s", q, "scroll", t0 + i as f64, &[])).collect(),
            status: Some(status),
        }
    }

    #[test]
    fn question_sequences_concatenate_visits() {
        let visits = vec![
            visit("Q1", 2, 0.0, ResponseStatus::Incomplete),
            visit("Q2", 1, 2.0, ResponseStatus::Correct),
            visit("Q1", 1, 3.0, ResponseStatus::Correct),
        ];
        let vocab = Vocabulary::events_from(["scroll"]);
        let seqs = build_question_sequences(&visits, &block_map(), &vocab).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].question_id, "Q1");
        let stamps: Vec<f64> = seqs[0].events.iter().map(|e| e.m).collect();
        assert_eq!(stamps, vec![0.0, 1.0, 3.0]);
        // each visit keeps its own status
        assert_eq!(seqs[0].events[0].c, ResponseStatus::Incomplete);
        assert_eq!(seqs[0].events[2].c, ResponseStatus::Correct);
        assert_eq!(seqs[1].events.len(), 1);
        assert!(seqs.iter().all(|s| s.question_id != "Q3"));
    }

    #[test]
    fn single_visit_sequence_matches_visit() {
        let visits = vec![visit("Q2", 3, 0.0, ResponseStatus::Incorrect)];
        let vocab = Vocabulary::events_from(["scroll"]);
        let seqs = build_question_sequences(&visits, &block_map(), &vocab).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].events.len(), 3);
        assert_eq!(seqs[0].block, Block::A);
    }

    #[test]
    fn unknown_question_is_config_error() {
        let visits = vec![visit("Q9", 1, 0.0, ResponseStatus::Correct)];
        let vocab = Vocabulary::events_from(["scroll"]);
        assert!(matches!(
            build_question_sequences(&visits, &block_map(), &vocab),
            Err(Error::Config(_))
        ));
    }

    fn dataset_with_b_outcomes(outcomes: &[Vec<ResponseStatus>]) -> NormalizedDataset {
        let questions: Vec<QuestionInfo> = (0..outcomes[0].len())
            .map(|i| QuestionInfo {
                id: format!("B{i}"),
                block: Block::B,
            })
            .collect();
        NormalizedDataset {
            format_version: DATASET_FORMAT_VERSION,
            block_time_limit: 1800.0,
            event_vocab: vec![UNK_EVENT.into()],
            questions,
            students: outcomes
                .iter()
                .enumerate()
                .map(|(i, o)| StudentRecord {
                    id: format!("s{i}"),
                    partition: Partition::Train,
                    visits: vec![],
                    outcomes: o.clone(),
                })
                .collect(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn labels_examples() {
        use ResponseStatus::*;
        let ds = dataset_with_b_outcomes(&[
            vec![Correct, Correct, Correct],
            vec![Correct, Incorrect, Incomplete],
        ]);
        let labels = derive_labels(&ds);
        assert_eq!(labels.score, vec![1, 0]);
        assert_eq!(labels.per_question[1], vec![1, 0, 0]);

        let same = dataset_with_b_outcomes(&[vec![Correct, Incorrect], vec![Correct, Incorrect]]);
        assert_eq!(derive_labels(&same).score, vec![0, 0]);
    }

    #[test]
    fn normalize_builds_vocab_from_train_only() {
        let key = AnswerKey::new(vec![KeyEntry {
            question_id: "Q1".into(),
            required_fields: ["choice".to_string()].into(),
            acceptable_answers: vec![[("choice".to_string(), "A".to_string())].into()],
        }])
        .unwrap();
        let mut parsed = ParsedLog::default();
        for i in 0..10 {
            let sid = format!("s{i}");
            let mut events = vec![
                raw(&sid, "Q1", "enter_item", 0.0, &[]),
                raw(&sid, "Q1", "select_option", 1.0, &[("field", "choice"), ("value", "A")]),
                raw(&sid, "Q2", "enter_item", 2.0, &[]),
            ];
            events.push(raw(&sid, "Q2", &format!("rare_{i}"), 3.0, &[]));
            parsed.students.insert(sid, events);
        }
        let opts = IngestOptions {
            test_fraction: 0.3,
            seed: 5,
            ..IngestOptions::default()
        };
        let ds = normalize(&parsed, &key, &block_map(), &LogSchema::default(), opts, Provenance::default())
            .unwrap();
        assert_eq!(ds.student_indices(Partition::Test).len(), 3);
        let vocab = ds.event_vocabulary();
        for s in &ds.students {
            let rare = format!("rare_{}", &s.id[1..]);
            match s.partition {
                Partition::Train => assert!(vocab.get(&rare).is_some()),
                Partition::Test => {
                    assert!(vocab.get(&rare).is_none());
                    let last = s.visits.last().unwrap().events.last().unwrap();
                    assert_eq!(last.a, 0);
                }
            }
            assert_eq!(s.outcomes[0], ResponseStatus::Correct);
            assert_eq!(s.outcomes[1], ResponseStatus::Incomplete);
            assert_eq!(s.outcomes[2], ResponseStatus::Incomplete);
            assert!(!s.visited(2));
        }
        let again = normalize(&parsed, &key, &block_map(), &LogSchema::default(), opts, Provenance::default())
            .unwrap();
        assert_eq!(
            serde_json::to_string(&ds).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }
}
