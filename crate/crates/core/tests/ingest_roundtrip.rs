use procbert::ingest::{
    derive_labels, normalize, parse_log, AnswerKey, BlockMap, IngestOptions, LogSchema, ResponseStatus,
};
use procbert::provenance::Provenance;
use procbert::synthgen::{generate_cohort, CohortConfig};

#[test]
fn generated_cohort_round_trips_through_ingest() {
    let cfg = CohortConfig {
        n_students: 100,
        seed: 17,
        ..CohortConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cohort.write(dir.path()).unwrap();

    let schema = LogSchema::default();
    let parsed = parse_log(&dir.path().join("log.csv"), &schema).unwrap();
    assert!(parsed.errors.is_empty(), "{:?}", &parsed.errors[..1]);
    assert_eq!(parsed.event_count(), cohort.events.len());
    let key = AnswerKey::load(&dir.path().join("answer_key.json")).unwrap();
    let blocks = BlockMap::load(&dir.path().join("block_map.json")).unwrap();
    let ds = normalize(&parsed, &key, &blocks, &schema, IngestOptions::default(), Provenance::default()).unwrap();

    let truth = &cohort.truth;
    let mut mismatches = 0;
    for (s, student) in ds.students.iter().enumerate() {
        assert_eq!(student.id, truth.student_ids[s]);
        for (q, status) in student.outcomes.iter().enumerate() {
            if *status != truth.outcomes[s][q] {
                mismatches += 1;
            }
            assert_eq!(student.visited(q), truth.visited[s][q]);
        }
    }
    assert_eq!(mismatches, 0);

    let n_pairs = (ds.students.len() * ds.questions.len()) as f64;
    let count = |st: ResponseStatus| {
        ds.students.iter().flat_map(|s| s.outcomes.iter()).filter(|o| **o == st).count() as f64 / n_pairs
    };
    eprintln!(
        "correct {:.3} incorrect {:.3} incomplete {:.3}; events/student {:.1}",
        count(ResponseStatus::Correct),
        count(ResponseStatus::Incorrect),
        count(ResponseStatus::Incomplete),
        parsed.event_count() as f64 / ds.students.len() as f64
    );
    let labels = derive_labels(&ds);
    let positives = labels.score.iter().filter(|&&y| y == 1).count();
    assert!(positives > 10 && positives < 90);
}
