//! Clickstream ingestion: parsing, visit segmentation, response replay and labels.

pub mod dataset;
pub mod events;
pub mod log;
pub mod replay;

pub use dataset::{
    build_question_sequences, derive_labels, normalize, BlockEntry, BlockMap, IngestOptions, Labels,
    NormalizedDataset, Partition, QuestionInfo, StudentRecord, VisitRecord, Vocabulary,
};
pub use events::{Block, ProcEvent, QuestionSequence, QuestionType, RawEvent, ResponseStatus, Visit};
pub use log::{parse_log, parse_reader, write_delimited, LogFormat, LogSchema, ParsedLog, RowError};
pub use replay::{
    assign_response_status, assign_statuses, segment_visits, AnswerKey, KeyEntry, Mutation,
    MutationTable, ResponseState,
};
