//! Synthetic cohorts with planted abilities, difficulties and behavior archetypes.
//!
//! The generator writes the same log, answer-key and block-map files that
//! ingestion reads. It tracks each question's response by construction, so the
//! recorded ground truth is an independent check on the replay engine.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    write_delimited, AnswerKey, Block, BlockEntry, BlockMap, KeyEntry, QuestionType, RawEvent,
    ResponseState, ResponseStatus,
};
use crate::provenance::Provenance;

/// Smallest gap between consecutive events, in seconds.
pub const MIN_GAP: f64 = 0.01;
/// Fewest events a completed question needs (enter + one answer event).
const MIN_EVENTS_PER_QUESTION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Rapid,
    ToolUser,
    Checker,
    TimeRunnerOut,
    HighEffort,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Rapid,
        Archetype::ToolUser,
        Archetype::Checker,
        Archetype::TimeRunnerOut,
        Archetype::HighEffort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Rapid => "rapid",
            Archetype::ToolUser => "tool_user",
            Archetype::Checker => "checker",
            Archetype::TimeRunnerOut => "time_runner_out",
            Archetype::HighEffort => "high_effort",
        }
    }

    pub fn params(self) -> ArchetypeParams {
        match self {
            Archetype::Rapid => ArchetypeParams {
                pace: 0.35,
                gap_sigma: 0.5,
                think_fraction: 0.0,
                revisit_prob: 0.03,
                tool_prob: 0.05,
                explore_events: 0.6,
                change_prob: 0.05,
                effect: -0.9,
                tool_effect: 0.4,
            },
            Archetype::ToolUser => ArchetypeParams {
                pace: 1.0,
                gap_sigma: 0.6,
                think_fraction: 0.0,
                revisit_prob: 0.1,
                tool_prob: 0.85,
                explore_events: 2.0,
                change_prob: 0.1,
                effect: 0.1,
                tool_effect: 0.9,
            },
            Archetype::Checker => ArchetypeParams {
                pace: 0.8,
                gap_sigma: 0.6,
                think_fraction: 0.0,
                revisit_prob: 0.7,
                tool_prob: 0.2,
                explore_events: 1.5,
                change_prob: 0.3,
                effect: 0.5,
                tool_effect: 0.4,
            },
            Archetype::TimeRunnerOut => ArchetypeParams {
                pace: 1.5,
                gap_sigma: 0.7,
                think_fraction: 1.6,
                revisit_prob: 0.05,
                tool_prob: 0.25,
                explore_events: 3.0,
                change_prob: 0.1,
                effect: 0.0,
                tool_effect: 0.4,
            },
            Archetype::HighEffort => ArchetypeParams {
                pace: 1.2,
                gap_sigma: 0.6,
                think_fraction: 0.3,
                revisit_prob: 0.35,
                tool_prob: 0.6,
                explore_events: 6.0,
                change_prob: 0.15,
                effect: 0.6,
                tool_effect: 0.4,
            },
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| format!("unknown archetype `{s}`"))
    }
}

/// Behavioral knobs of one archetype.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeParams {
    /// Multiplier on the cohort's median inter-event gap.
    pub pace: f64,
    /// Log-space standard deviation of inter-event gaps.
    pub gap_sigma: f64,
    /// Minimum time on a question before answering, as a multiple of `limit / questions`.
    pub think_fraction: f64,
    pub revisit_prob: f64,
    /// Probability of using the calculator on a question.
    pub tool_prob: f64,
    /// Mean number of exploration events per visit.
    pub explore_events: f64,
    /// Probability of first entering a different answer.
    pub change_prob: f64,
    /// Logit shift on every question.
    pub effect: f64,
    /// Additional logit shift on questions where the calculator was used.
    pub tool_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_students: usize,
    pub n_questions_per_block: usize,
    /// Seconds per block.
    pub block_time_limit: f64,
    pub archetype_mix: Vec<(Archetype, f64)>,
    /// Scales every planted behavior effect; 0 gives plain 1PL outcomes.
    pub effect_scale: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            n_questions_per_block: 10,
            block_time_limit: 1800.0,
            archetype_mix: vec![
                (Archetype::Rapid, 0.2),
                (Archetype::ToolUser, 0.2),
                (Archetype::Checker, 0.2),
                (Archetype::TimeRunnerOut, 0.15),
                (Archetype::HighEffort, 0.25),
            ],
            effect_scale: 1.0,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.n_questions_per_block == 0 {
            return Err(Error::Generation("student and question counts must be >= 1".into()));
        }
        if !(self.block_time_limit.is_finite() && self.block_time_limit > 0.0) {
            return Err(Error::Generation("block time limit must be positive".into()));
        }
        if self.archetype_mix.is_empty() {
            return Err(Error::Generation("archetype mix is empty".into()));
        }
        if self.archetype_mix.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::Generation("archetype probabilities must be >= 0".into()));
        }
        let total: f64 = self.archetype_mix.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Generation(format!(
                "archetype probabilities sum to {total}, expected 1"
            )));
        }
        for (a, _) in &self.archetype_mix {
            let p = a.params();
            if p.pace <= 0.0 || p.gap_sigma <= 0.0 || p.explore_events <= 0.0 || p.tool_prob <= 0.0 {
                return Err(Error::Generation(format!("{} has non-positive rates", a.as_str())));
            }
            if !(0.0..=1.0).contains(&p.revisit_prob) {
                return Err(Error::Generation(format!("{} revisit probability", a.as_str())));
            }
        }
        let needed = self.n_questions_per_block as f64 * MIN_EVENTS_PER_QUESTION * MIN_GAP;
        if needed > self.block_time_limit {
            return Err(Error::Generation(format!(
                "{} questions need at least {needed:.2}s but the block limit is {}s",
                self.n_questions_per_block, self.block_time_limit
            )));
        }
        Ok(())
    }

    pub fn question_ids(&self) -> Vec<(String, Block)> {
        let mut ids = Vec::new();
        for block in [Block::A, Block::B] {
            for j in 0..self.n_questions_per_block {
                let letter = if block == Block::A { 'A' } else { 'B' };
                ids.push((format!("{letter}{:02}", j + 1), block));
            }
        }
        ids
    }

    /// Median inter-event gap for pace 1: a typical student uses about half the block.
    fn base_gap(&self) -> f64 {
        0.5 * self.block_time_limit / (self.n_questions_per_block as f64 * 8.0)
    }
}

/// Planted quantities, for test oracles only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub student_ids: Vec<String>,
    pub question_ids: Vec<String>,
    pub abilities: Vec<f64>,
    pub difficulties: Vec<f64>,
    pub archetypes: Vec<Archetype>,
    /// `[student][question]` logit shift from behavior.
    pub behavior_effects: Vec<Vec<f64>>,
    /// `[student][question]` realized status (unvisited → incomplete).
    pub outcomes: Vec<Vec<ResponseStatus>>,
    /// `[student][question]` whether the question was visited at all.
    pub visited: Vec<Vec<bool>>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub events: Vec<RawEvent>,
    pub answer_key: AnswerKey,
    pub block_map: BlockMap,
    pub truth: GroundTruth,
}

impl Cohort {
    /// Write `log.csv`, `answer_key.json`, `block_map.json` and `ground_truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("log.csv");
        let file = std::fs::File::create(&log).map_err(|e| Error::io(&log, e))?;
        write_delimited(std::io::BufWriter::new(file), &self.events)?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("answer_key.json", self.answer_key.to_json())?;
        write("block_map.json", self.block_map.to_json())?;
        write(
            "ground_truth.json",
            serde_json::to_string_pretty(&self.truth).map_err(|e| Error::json("ground truth", e))?,
        )?;
        Ok(())
    }
}

struct QuestionSpec {
    id: String,
    block: Block,
    kind: QuestionType,
    fields: Vec<String>,
    correct: ResponseState,
    /// Values usable for wrong answers, per field.
    options: Vec<Vec<String>>,
}

impl QuestionSpec {
    fn new<R: Rng>(id: String, block: Block, kind: QuestionType, rng: &mut R) -> Self {
        let letters: Vec<String> = ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect();
        let numbers: Vec<String> = (0..8).map(|i| format!("{}", 10 + i * 7)).collect();
        let pairs: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let (fields, options): (Vec<String>, Vec<Vec<String>>) = match kind {
            QuestionType::MultipleChoice => (vec!["choice".into()], vec![letters]),
            QuestionType::FillIn => (vec!["f1".into()], vec![numbers]),
            QuestionType::Matching => (
                vec!["m1".into(), "m2".into(), "m3".into()],
                vec![pairs.clone(), pairs.clone(), pairs],
            ),
            QuestionType::Mixed => (vec!["choice".into(), "f1".into()], vec![letters, numbers]),
        };
        let correct = fields
            .iter()
            .zip(&options)
            .map(|(f, o)| (f.clone(), o.choose(rng).expect("options").clone()))
            .collect();
        Self {
            id,
            block,
            kind,
            fields,
            correct,
            options,
        }
    }

    fn wrong_answer<R: Rng>(&self, rng: &mut R) -> ResponseState {
        let mut ans = self.correct.clone();
        let k = rng.random_range(0..self.fields.len());
        let field = &self.fields[k];
        let alternatives: Vec<&String> = self.options[k]
            .iter()
            .filter(|v| **v != self.correct[field])
            .collect();
        ans.insert(field.clone(), (*alternatives.choose(rng).expect("alternatives")).clone());
        ans
    }

    fn answer_event_type(&self, field: &str) -> &'static str {
        match (self.kind, field) {
            (QuestionType::MultipleChoice, _) | (QuestionType::Mixed, "choice") => "select_option",
            (QuestionType::Matching, _) => "drag_match",
            _ => "type_text",
        }
    }

    fn key_entry(&self) -> KeyEntry {
        let mut acceptable = vec![self.correct.clone()];
        if self.kind == QuestionType::FillIn {
            // equivalent numeric spelling
            let mut alt = self.correct.clone();
            alt.insert("f1".into(), format!("{}.0", self.correct["f1"]));
            acceptable.push(alt);
        }
        KeyEntry {
            question_id: self.id.clone(),
            required_fields: self.fields.iter().cloned().collect(),
            acceptable_answers: acceptable,
        }
    }
}

/// Event emitter for one student's block, enforcing strictly increasing times
/// and the block deadline.
struct Clock {
    now: f64,
    deadline: f64,
    gap: LogNormal<f64>,
    out_of_time: bool,
}

impl Clock {
    fn tick<R: Rng>(&mut self, rng: &mut R, at_least: f64) -> Option<f64> {
        if self.out_of_time {
            return None;
        }
        let gap = self.gap.sample(rng).max(MIN_GAP);
        let t = round_ms((self.now + gap).max(at_least));
        if t > self.deadline {
            self.out_of_time = true;
            return None;
        }
        self.now = t;
        Some(t)
    }
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

struct StudentCtx<'a> {
    id: &'a str,
    events: &'a mut Vec<RawEvent>,
}

impl StudentCtx<'_> {
    fn emit(&mut self, q: &QuestionSpec, event_type: &str, t: f64, extra: &[(&str, &str)]) {
        self.events.push(RawEvent {
            student_id: self.id.to_string(),
            question_id: q.id.clone(),
            question_type: q.kind,
            event_type: event_type.to_string(),
            timestamp: t,
            extra: extra
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            row: 0,
        });
    }
}

const EXPLORE_TYPES: [&str; 5] = ["scroll", "highlight", "draw", "zoom", "text_to_speech"];

pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

    let kinds = [
        QuestionType::MultipleChoice,
        QuestionType::MultipleChoice,
        QuestionType::Matching,
        QuestionType::FillIn,
        QuestionType::MultipleChoice,
        QuestionType::Mixed,
    ];
    let questions: Vec<QuestionSpec> = config
        .question_ids()
        .into_iter()
        .enumerate()
        .map(|(i, (id, block))| QuestionSpec::new(id, block, kinds[i % kinds.len()], &mut rng))
        .collect();
    let difficulties: Vec<f64> = questions.iter().map(|_| std_normal.sample(&mut rng)).collect();

    let n_q = questions.len();
    let mut truth = GroundTruth {
        student_ids: Vec::new(),
        question_ids: questions.iter().map(|q| q.id.clone()).collect(),
        abilities: Vec::new(),
        difficulties: difficulties.clone(),
        archetypes: Vec::new(),
        behavior_effects: Vec::new(),
        outcomes: Vec::new(),
        visited: Vec::new(),
        provenance: Provenance::default(),
    };
    let mut events = Vec::new();
    let width = ((config.n_students as f64).log10().floor() as usize + 1).max(4);

    for s in 0..config.n_students {
        let id = format!("S{:0width$}", s + 1);
        let ability = std_normal.sample(&mut rng);
        let archetype = sample_archetype(&config.archetype_mix, &mut rng);
        let params = archetype.params();
        let mut effects = vec![0.0; n_q];
        let mut outcomes = vec![ResponseStatus::Incomplete; n_q];
        let mut visited = vec![false; n_q];
        let mut ctx = StudentCtx {
            id: &id,
            events: &mut events,
        };

        for block in [Block::A, Block::B] {
            let start = block.index() as f64 * config.block_time_limit;
            let median = config.base_gap() * params.pace;
            let mut clock = Clock {
                now: start,
                deadline: start + config.block_time_limit,
                gap: LogNormal::new(median.ln(), params.gap_sigma).expect("valid log-normal"),
                out_of_time: false,
            };
            let in_block: Vec<usize> = (0..n_q).filter(|&j| questions[j].block == block).collect();
            let think = params.think_fraction * config.block_time_limit / in_block.len() as f64;
            let mut states: BTreeMap<usize, ResponseState> = BTreeMap::new();
            let mut planned: BTreeMap<usize, ResponseState> = BTreeMap::new();

            // first pass, in order
            for &j in &in_block {
                let q = &questions[j];
                let tool = rng.random::<f64>() < params.tool_prob;
                let effect = config.effect_scale * (params.effect + if tool { params.tool_effect } else { 0.0 });
                effects[j] = effect;
                let p = crate::irt::irt_prob(ability, difficulties[j], effect);
                let final_answer = if rng.random::<f64>() < p {
                    q.correct.clone()
                } else {
                    q.wrong_answer(&mut rng)
                };
                let change = rng.random::<f64>() < params.change_prob;
                let revisit = rng.random::<f64>() < params.revisit_prob;
                // a checker-style change on revisit: first pass enters the alternative
                let defer = change && revisit;
                let first_answer = if defer {
                    alternative(q, &final_answer, &mut rng)
                } else {
                    final_answer.clone()
                };
                if revisit {
                    planned.insert(j, final_answer);
                }

                let Some(t) = clock.tick(&mut rng, 0.0) else { break };
                let visit_start = t;
                visited[j] = true;
                ctx.emit(q, "enter_item", t, &[]);
                let state = states.entry(j).or_default();
                let n_explore = Poisson::new(params.explore_events)
                    .map(|d| d.sample(&mut rng) as usize)
                    .unwrap_or(0);
                for _ in 0..n_explore {
                    let kind = if q.kind == QuestionType::MultipleChoice && rng.random::<f64>() < 0.25 {
                        "eliminate_choice"
                    } else {
                        EXPLORE_TYPES[rng.random_range(0..EXPLORE_TYPES.len())]
                    };
                    let Some(t) = clock.tick(&mut rng, 0.0) else { break };
                    ctx.emit(q, kind, t, &[]);
                }
                if tool {
                    if let Some(t) = clock.tick(&mut rng, 0.0) {
                        ctx.emit(q, "open_calculator", t, &[]);
                    }
                    for _ in 0..rng.random_range(1..4) {
                        if let Some(t) = clock.tick(&mut rng, 0.0) {
                            ctx.emit(q, "calculate", t, &[]);
                        }
                    }
                    if archetype != Archetype::ToolUser {
                        if let Some(t) = clock.tick(&mut rng, 0.0) {
                            ctx.emit(q, "close_calculator", t, &[]);
                        }
                    }
                }
                if change && !defer {
                    let alt = alternative(q, &first_answer, &mut rng);
                    write_answer(&mut ctx, &mut clock, &mut rng, q, &alt, state, visit_start + think);
                }
                write_answer(&mut ctx, &mut clock, &mut rng, q, &first_answer, state, visit_start + think);
                if clock.out_of_time {
                    break;
                }
            }

            // second pass over planned revisits
            for (&j, answer) in &planned {
                if clock.out_of_time || !visited[j] {
                    break;
                }
                let q = &questions[j];
                let Some(t) = clock.tick(&mut rng, 0.0) else { break };
                ctx.emit(q, "enter_item", t, &[]);
                if let Some(t) = clock.tick(&mut rng, 0.0) {
                    ctx.emit(q, "scroll", t, &[]);
                }
                let state = states.entry(j).or_default();
                if state != answer {
                    write_answer(&mut ctx, &mut clock, &mut rng, q, answer, state, 0.0);
                }
            }

            for &j in &in_block {
                outcomes[j] = match states.get(&j) {
                    Some(state) => score_by_construction(&questions[j], state),
                    None => ResponseStatus::Incomplete,
                };
            }
        }

        truth.student_ids.push(id.clone());
        truth.abilities.push(ability);
        truth.archetypes.push(archetype);
        truth.behavior_effects.push(effects);
        truth.outcomes.push(outcomes);
        truth.visited.push(visited);
    }

    let answer_key = AnswerKey::new(questions.iter().map(QuestionSpec::key_entry).collect())?;
    let block_map = BlockMap::new(
        questions
            .iter()
            .map(|q| BlockEntry {
                question_id: q.id.clone(),
                block: q.block,
            })
            .collect(),
    )?;
    Ok(Cohort {
        events,
        answer_key,
        block_map,
        truth,
    })
}

/// An answer that differs from `answer` in at least one field.
fn alternative<R: Rng>(q: &QuestionSpec, answer: &ResponseState, rng: &mut R) -> ResponseState {
    let k = rng.random_range(0..q.fields.len());
    let field = &q.fields[k];
    let choices: Vec<&String> = q.options[k].iter().filter(|v| **v != answer[field]).collect();
    let mut alt = answer.clone();
    alt.insert(field.clone(), (*choices.choose(rng).expect("alternatives")).clone());
    alt
}

/// Emit one event per field whose value differs from the current state.
#[allow(clippy::too_many_arguments)]
fn write_answer<R: Rng>(
    ctx: &mut StudentCtx<'_>,
    clock: &mut Clock,
    rng: &mut R,
    q: &QuestionSpec,
    answer: &ResponseState,
    state: &mut ResponseState,
    not_before: f64,
) {
    let mut first = true;
    for field in &q.fields {
        let value = &answer[field];
        if state.get(field) == Some(value) {
            continue;
        }
        let at_least = if first { not_before } else { 0.0 };
        first = false;
        let Some(t) = clock.tick(rng, at_least) else { return };
        ctx.emit(
            q,
            q.answer_event_type(field),
            t,
            &[("field", field), ("value", value)],
        );
        state.insert(field.clone(), value.clone());
    }
}

/// Status from the generator's own record of what it wrote.
fn score_by_construction(q: &QuestionSpec, state: &ResponseState) -> ResponseStatus {
    if q.fields.iter().any(|f| !state.contains_key(f)) {
        ResponseStatus::Incomplete
    } else if q.key_entry().acceptable_answers.contains(state) {
        ResponseStatus::Correct
    } else {
        ResponseStatus::Incorrect
    }
}

fn sample_archetype<R: Rng>(mix: &[(Archetype, f64)], rng: &mut R) -> Archetype {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in mix {
        acc += p;
        if u < acc {
            return *a;
        }
    }
    mix.last().expect("non-empty mix").0
}
