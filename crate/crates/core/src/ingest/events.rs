use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    MultipleChoice,
    Matching,
    FillIn,
    Mixed,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::MultipleChoice => "multiple_choice",
            QuestionType::Matching => "matching",
            QuestionType::FillIn => "fill_in",
            QuestionType::Mixed => "mixed",
        }
    }
}

impl FromStr for QuestionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "multiple_choice" => Ok(QuestionType::MultipleChoice),
            "matching" => Ok(QuestionType::Matching),
            "fill_in" => Ok(QuestionType::FillIn),
            "mixed" => Ok(QuestionType::Mixed),
            other => Err(format!("unknown question type `{other}`")),
        }
    }
}

/// Outcome of a visit, broadcast to every event in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Correct,
    Incorrect,
    Incomplete,
}

impl ResponseStatus {
    pub const ALL: [ResponseStatus; 3] = [
        ResponseStatus::Correct,
        ResponseStatus::Incorrect,
        ResponseStatus::Incomplete,
    ];

    /// Position in the one-hot encoding and the status prediction head.
    pub fn index(self) -> usize {
        match self {
            ResponseStatus::Correct => 0,
            ResponseStatus::Incorrect => 1,
            ResponseStatus::Incomplete => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Binary correctness label; incomplete counts as incorrect.
    pub fn is_correct(self) -> bool {
        self == ResponseStatus::Correct
    }
}

impl fmt::Display for ResponseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResponseStatus::Correct => "correct",
            ResponseStatus::Incorrect => "incorrect",
            ResponseStatus::Incomplete => "incomplete",
        })
    }
}

/// Assessment section. Block A is observed, block B is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    A,
    B,
}

impl Block {
    /// Blocks are consecutive timed sections; block `i` starts at `i × time limit`.
    pub fn index(self) -> usize {
        match self {
            Block::A => 0,
            Block::B => 1,
        }
    }
}

impl FromStr for Block {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Block::A),
            "B" | "b" => Ok(Block::B),
            other => Err(format!("unknown block `{other}`")),
        }
    }
}

/// One logged student action as read from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub student_id: String,
    pub question_id: String,
    pub question_type: QuestionType,
    pub event_type: String,
    /// Seconds since test start.
    pub timestamp: f64,
    pub extra: BTreeMap<String, String>,
    /// 1-based source line, for diagnostics.
    pub row: usize,
}

/// Normalized event `(a, m, q, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcEvent {
    /// Event-type vocabulary index (0 is the unknown type).
    pub a: usize,
    /// Seconds since test start.
    pub m: f64,
    /// Question vocabulary index.
    pub q: usize,
    pub c: ResponseStatus,
}

/// Maximal run of consecutive events on one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub student_id: String,
    pub question_id: String,
    pub events: Vec<RawEvent>,
    pub status: Option<ResponseStatus>,
}

/// All of one student's events on one question, visits concatenated in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSequence {
    pub student_id: String,
    pub question_id: String,
    pub block: Block,
    pub events: Vec<ProcEvent>,
}
