//! Visit segmentation and response-state replay.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::events::{RawEvent, ResponseStatus, Visit};
use crate::error::{Error, Result};

/// Current answer of one question: field id → value.
pub type ResponseState = BTreeMap<String, String>;

/// How one event type changes the response state. Field ids and values are
/// read from the event's `extra` map under the named keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Mutation {
    Set { field_key: String, value_key: String },
    Clear { field_key: String },
    ClearAll,
}

/// Declarative `event_type → mutation` table. Event types not listed are no-ops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MutationTable {
    pub rules: BTreeMap<String, Mutation>,
}

impl MutationTable {
    /// Table matching the event vocabulary written by the synthetic generator.
    pub fn standard() -> Self {
        let set = || Mutation::Set {
            field_key: "field".into(),
            value_key: "value".into(),
        };
        let mut rules = BTreeMap::new();
        rules.insert("select_option".to_string(), set());
        rules.insert("drag_match".to_string(), set());
        rules.insert("type_text".to_string(), set());
        rules.insert(
            "clear_answer".to_string(),
            Mutation::Clear {
                field_key: "field".into(),
            },
        );
        rules.insert("reset_item".to_string(), Mutation::ClearAll);
        Self { rules }
    }

    pub fn mutates(&self, event_type: &str) -> bool {
        self.rules.contains_key(event_type)
    }

    pub fn apply(&self, state: &mut ResponseState, event: &RawEvent) {
        let Some(rule) = self.rules.get(&event.event_type) else {
            return;
        };
        match rule {
            Mutation::Set {
                field_key,
                value_key,
            } => {
                if let (Some(field), Some(value)) =
                    (event.extra.get(field_key), event.extra.get(value_key))
                {
                    state.insert(field.clone(), value.clone());
                }
            }
            Mutation::Clear { field_key } => {
                if let Some(field) = event.extra.get(field_key) {
                    state.remove(field);
                }
            }
            Mutation::ClearAll => state.clear(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub question_id: String,
    pub required_fields: BTreeSet<String>,
    /// Each acceptable answer assigns a value to every required field.
    pub acceptable_answers: Vec<ResponseState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnswerKey {
    entries: BTreeMap<String, KeyEntry>,
}

#[derive(Serialize, Deserialize)]
struct AnswerKeyFile {
    entries: Vec<KeyEntry>,
}

impl AnswerKey {
    pub fn new(entries: Vec<KeyEntry>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entries {
            if e.required_fields.is_empty() {
                return Err(Error::Config(format!(
                    "answer key entry {} has no required fields",
                    e.question_id
                )));
            }
            let id = e.question_id.clone();
            if map.insert(id.clone(), e).is_some() {
                return Err(Error::Config(format!("question {id} appears twice in answer key")));
            }
        }
        Ok(Self { entries: map })
    }

    pub fn get(&self, question_id: &str) -> Option<&KeyEntry> {
        self.entries.get(question_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &KeyEntry> {
        self.entries.values()
    }

    pub fn to_json(&self) -> String {
        let file = AnswerKeyFile {
            entries: self.entries.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("answer key serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: AnswerKeyFile =
            serde_json::from_str(text).map_err(|e| Error::json("answer key", e))?;
        Self::new(file.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Status of a final response state against this key.
    pub fn score(&self, question_id: &str, state: &ResponseState) -> ResponseStatus {
        let Some(entry) = self.get(question_id) else {
            return ResponseStatus::Incomplete;
        };
        if !entry.required_fields.iter().all(|f| state.contains_key(f)) {
            return ResponseStatus::Incomplete;
        }
        let projected: ResponseState = entry
            .required_fields
            .iter()
            .map(|f| (f.clone(), state[f].clone()))
            .collect();
        if entry.acceptable_answers.contains(&projected) {
            ResponseStatus::Correct
        } else {
            ResponseStatus::Incorrect
        }
    }
}

/// Split one student's time-ordered events into visits. A new visit starts
/// exactly where the question id changes.
pub fn segment_visits(events: &[RawEvent]) -> Vec<Visit> {
    let mut visits: Vec<Visit> = Vec::new();
    for e in events {
        match visits.last_mut() {
            Some(v) if v.question_id == e.question_id => v.events.push(e.clone()),
            _ => visits.push(Visit {
                student_id: e.student_id.clone(),
                question_id: e.question_id.clone(),
                events: vec![e.clone()],
                status: None,
            }),
        }
    }
    visits
}

/// Replay a single visit from an empty response and score it.
pub fn assign_response_status(
    visit: &Visit,
    key: &AnswerKey,
    table: &MutationTable,
) -> ResponseStatus {
    let mut state = ResponseState::new();
    replay_visit(&mut state, visit, key, table)
}

fn replay_visit(
    state: &mut ResponseState,
    visit: &Visit,
    key: &AnswerKey,
    table: &MutationTable,
) -> ResponseStatus {
    for e in &visit.events {
        table.apply(state, e);
    }
    key.score(&visit.question_id, state)
}

/// Assign statuses to all of one student's visits in order. The response to a
/// question persists across visits, so a revisit starts from the state the
/// previous visit left behind.
pub fn assign_statuses(visits: &mut [Visit], key: &AnswerKey, table: &MutationTable) {
    let mut states: HashMap<String, ResponseState> = HashMap::new();
    for v in visits.iter_mut() {
        let state = states.entry(v.question_id.clone()).or_default();
        v.status = Some(replay_visit(state, v, key, table));
    }
}

/// Final status per question: the status of the last visit to it.
pub fn final_statuses(visits: &[Visit]) -> BTreeMap<String, ResponseStatus> {
    let mut out = BTreeMap::new();
    for v in visits {
        if let Some(s) = v.status {
            out.insert(v.question_id.clone(), s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::events::QuestionType;
    use proptest::prelude::*;

    fn ev(q: &str, event_type: &str, extra: &[(&str, &str)], t: f64) -> RawEvent {
        RawEvent {
            student_id: "s".into(),
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

    fn key_choice(q: &str, answer: &str) -> AnswerKey {
        AnswerKey::new(vec![KeyEntry {
            question_id: q.into(),
            required_fields: ["choice".to_string()].into(),
            acceptable_answers: vec![[("choice".to_string(), answer.to_string())].into()],
        }])
        .unwrap()
    }

    /// Independent partition oracle: cut points where consecutive ids differ.
    fn partition_oracle(ids: &[&str]) -> Vec<(String, usize)> {
        let mut cuts = vec![0];
        for i in 1..ids.len() {
            if ids[i] != ids[i - 1] {
                cuts.push(i);
            }
        }
        cuts.push(ids.len());
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (ids[w[0]].to_string(), w[1] - w[0]))
            .collect()
    }

    fn shape(visits: &[Visit]) -> Vec<(String, usize)> {
        visits
            .iter()
            .map(|v| (v.question_id.clone(), v.events.len()))
            .collect()
    }

    #[test]
    fn segment_examples() {
        for ids in [
            vec!["Q1", "Q1", "Q2", "Q1"],
            vec!["Q1", "Q1", "Q1"],
            vec!["Q1", "Q2", "Q1", "Q2"],
        ] {
            let events: Vec<RawEvent> = ids
                .iter()
                .enumerate()
                .map(|(i, q)| ev(q, "x", &[], i as f64))
                .collect();
            assert_eq!(shape(&segment_visits(&events)), partition_oracle(&ids));
        }
        assert_eq!(
            partition_oracle(&["Q1", "Q1", "Q2", "Q1"]),
            vec![("Q1".into(), 2), ("Q2".into(), 1), ("Q1".into(), 1)]
        );
        assert_eq!(partition_oracle(&["Q1", "Q2", "Q1", "Q2"]).len(), 4);
        assert!(segment_visits(&[]).is_empty());
    }

    #[test]
    fn status_examples() {
        let key = key_choice("Q1", "A");
        let table = MutationTable::standard();
        let filled = Visit {
            student_id: "s".into(),
            question_id: "Q1".into(),
            events: vec![ev("Q1", "select_option", &[("field", "choice"), ("value", "A")], 0.0)],
            status: None,
        };
        assert_eq!(assign_response_status(&filled, &key, &table), ResponseStatus::Correct);

        let idle = Visit {
            events: vec![ev("Q1", "scroll", &[], 0.0)],
            ..filled.clone()
        };
        assert_eq!(assign_response_status(&idle, &key, &table), ResponseStatus::Incomplete);

        let changed = Visit {
            events: vec![
                ev("Q1", "select_option", &[("field", "choice"), ("value", "A")], 0.0),
                ev("Q1", "select_option", &[("field", "choice"), ("value", "B")], 1.0),
            ],
            ..filled.clone()
        };
        assert_eq!(assign_response_status(&changed, &key, &table), ResponseStatus::Incorrect);

        let unknown_question = Visit {
            question_id: "Q9".into(),
            events: vec![ev("Q9", "select_option", &[("field", "choice"), ("value", "A")], 0.0)],
            ..filled
        };
        assert_eq!(
            assign_response_status(&unknown_question, &key, &table),
            ResponseStatus::Incomplete
        );
    }

    #[test]
    fn revisit_keeps_previous_answer() {
        let key = key_choice("Q1", "A");
        let table = MutationTable::standard();
        let events = vec![
            ev("Q1", "select_option", &[("field", "choice"), ("value", "A")], 0.0),
            ev("Q2", "scroll", &[], 1.0),
            ev("Q1", "scroll", &[], 2.0),
        ];
        let mut visits = segment_visits(&events);
        assign_statuses(&mut visits, &key, &table);
        assert_eq!(visits[2].status, Some(ResponseStatus::Correct));
        assert_eq!(final_statuses(&visits)["Q1"], ResponseStatus::Correct);
    }

    #[test]
    fn clear_and_reset_rules() {
        let key = key_choice("Q1", "A");
        let table = MutationTable::standard();
        let v = |events| Visit {
            student_id: "s".into(),
            question_id: "Q1".into(),
            events,
            status: None,
        };
        let cleared = v(vec![
            ev("Q1", "select_option", &[("field", "choice"), ("value", "A")], 0.0),
            ev("Q1", "clear_answer", &[("field", "choice")], 1.0),
        ]);
        assert_eq!(assign_response_status(&cleared, &key, &table), ResponseStatus::Incomplete);
        let reset = v(vec![
            ev("Q1", "select_option", &[("field", "choice"), ("value", "A")], 0.0),
            ev("Q1", "reset_item", &[], 1.0),
        ]);
        assert_eq!(assign_response_status(&reset, &key, &table), ResponseStatus::Incomplete);
    }

    #[test]
    fn duplicate_key_entry_rejected() {
        let entry = KeyEntry {
            question_id: "Q1".into(),
            required_fields: ["f".to_string()].into(),
            acceptable_answers: vec![],
        };
        assert!(AnswerKey::new(vec![entry.clone(), entry]).is_err());
    }

    proptest! {
        #[test]
        fn visits_partition_the_log(ids in proptest::collection::vec(0u8..3, 0..40)) {
            let events: Vec<RawEvent> = ids
                .iter()
                .enumerate()
                .map(|(i, q)| ev(&format!("Q{q}"), "x", &[], i as f64))
                .collect();
            let visits = segment_visits(&events);
            let rejoined: Vec<RawEvent> = visits.iter().flat_map(|v| v.events.clone()).collect();
            prop_assert_eq!(rejoined, events);
            for w in visits.windows(2) {
                prop_assert_ne!(&w[0].question_id, &w[1].question_id);
            }
        }

        #[test]
        fn non_mutating_events_never_change_status(
            answers in proptest::collection::vec(0u8..3, 0..5),
            noise in proptest::collection::vec(0u8..4, 0..6),
        ) {
            let key = key_choice("Q1", "A");
            let table = MutationTable::standard();
            let letters = ["A", "B", "C"];
            let mut events: Vec<RawEvent> = answers
                .iter()
                .map(|a| ev("Q1", "select_option", &[("field", "choice"), ("value", letters[*a as usize])], 0.0))
                .collect();
            let visit = Visit { student_id: "s".into(), question_id: "Q1".into(), events: events.clone(), status: None };
            let before = assign_response_status(&visit, &key, &table);
            let names = ["scroll", "open_calculator", "draw", "enter_item"];
            events.extend(noise.iter().map(|n| ev("Q1", names[*n as usize], &[], 1.0)));
            let visit = Visit { events, ..visit };
            prop_assert_eq!(assign_response_status(&visit, &key, &table), before);
        }
    }
}
