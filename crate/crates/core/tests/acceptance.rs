//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.
//!
//! `ACCEPT=1,4` runs a subset.

use std::time::{Duration, Instant};

use ndarray::Array2;
use procbert::evaluate::{auc, run_experiment, Ablation, Ablations, ExperimentConfig, ExperimentResults, Task};
use procbert::ingest::{normalize, parse_log, AnswerKey, BlockMap, IngestOptions, LogSchema, NormalizedDataset, ResponseStatus};
use procbert::irt::{fit_base, pair_loss, BehaviorNet, IrtConfig, IrtTerms, PairSet, Response};
use procbert::model::{predictive_context, EncoderConfig, EventSeq, ProcessModel};
use procbert::pretrain::{pretrain_loss, time_ratio, PretrainConfig, PretrainHeads};
use procbert::provenance::Provenance;
use procbert::synthgen::{generate_cohort, Archetype, Cohort, CohortConfig};
use procbert_nn::{Graph, ParamId, ParamMask, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_seq<R: Rng>(rng: &mut R, len: usize, n_types: usize, n_questions: usize) -> EventSeq {
    let mut t = 0.0;
    let stamps: Vec<f64> = (0..len)
        .map(|_| {
            t += rng.random::<f64>() * 5.0;
            t
        })
        .collect();
    let statuses = [ResponseStatus::Correct, ResponseStatus::Incorrect, ResponseStatus::Incomplete];
    EventSeq {
        types: (0..len).map(|_| rng.random_range(0..n_types)).collect(),
        questions: (0..len).map(|_| rng.random_range(0..n_questions)).collect(),
        statuses: (0..len).map(|_| statuses[rng.random_range(0..3)]).collect(),
        times: stamps.iter().map(|s| s / 200.0).collect(),
        stamps,
    }
}

fn cohort_dataset(cohort: &Cohort) -> NormalizedDataset {
    let dir = tempfile::tempdir().unwrap();
    cohort.write(dir.path()).unwrap();
    let schema = LogSchema::default();
    let parsed = parse_log(&dir.path().join("log.csv"), &schema).unwrap();
    let key = AnswerKey::load(&dir.path().join("answer_key.json")).unwrap();
    let blocks = BlockMap::load(&dir.path().join("block_map.json")).unwrap();
    normalize(&parsed, &key, &blocks, &schema, IngestOptions::default(), Provenance::default()).unwrap()
}

fn synthetic(n_students: usize, seed: u64) -> NormalizedDataset {
    let cfg = CohortConfig {
        n_students,
        seed,
        ..CohortConfig::default()
    };
    cohort_dataset(&generate_cohort(&cfg).unwrap())
}

fn leakage() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = EncoderConfig {
        event_dim: 6,
        question_dim: 4,
        hidden: 8,
        ..EncoderConfig::new(7, 5)
    };
    let mut store = ParamStore::new();
    let model = ProcessModel::new(&mut store, cfg, &mut rng);
    let mut changed = 0;
    for _ in 0..100 {
        let len = rng.random_range(1..=12);
        let seq = random_seq(&mut rng, len, 7, 5);
        let t = rng.random_range(1..=len);
        let mut mutated = seq.clone();
        let i = t - 1;
        mutated.types[i] = (seq.types[i] + 1 + rng.random_range(0..6)) % 7;
        mutated.questions[i] = (seq.questions[i] + 1) % 5;
        mutated.statuses[i] = match seq.statuses[i] {
            ResponseStatus::Correct => ResponseStatus::Incorrect,
            _ => ResponseStatus::Correct,
        };
        mutated.times[i] = rng.random::<f64>();
        let a = predictive_context(&model.encode(&store, &seq).unwrap(), t).unwrap();
        let b = predictive_context(&model.encode(&store, &mutated).unwrap(), t).unwrap();
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            changed += 1;
        }
    }
    outcome(changed == 0, format!("{changed} of 100 contexts changed"))
}

/// Largest relative error between the tape gradient and central differences.
fn worst_gradient_error(store: &mut ParamStore, ids: &[ParamId], loss: &dyn Fn(&ParamStore, bool) -> (f64, Option<procbert_nn::Gradients>)) -> (f64, String) {
    let (_, grads) = loss(store, true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for &id in ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).dim()));
        let cols = analytic.ncols();
        for k in 0..analytic.len() {
            let (r, c) = (k / cols, k % cols);
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + h;
            let up = loss(store, false).0;
            store.get_mut(id)[[r, c]] = orig - h;
            let down = loss(store, false).0;
            store.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            if rel > worst.0 {
                worst = (rel, format!("{}[{r},{c}]", store.name(id)));
            }
        }
    }
    worst
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = EncoderConfig {
        event_dim: 3,
        question_dim: 2,
        hidden: 3,
        ..EncoderConfig::new(5, 4)
    };
    let mut store = ParamStore::new();
    let model = ProcessModel::new(&mut store, cfg, &mut rng);
    let heads = PretrainHeads::new(&mut store, &cfg, true, &mut rng);
    randomize(&mut store, &mut rng);
    let seqs: Vec<EventSeq> = [3, 1, 4].iter().map(|&l| random_seq(&mut rng, l, 5, 4)).collect();
    let pcfg = PretrainConfig {
        enable_question_id: true,
        ..PretrainConfig::default()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let pre = |s: &ParamStore, grad: bool| {
        let refs: Vec<&EventSeq> = seqs.iter().collect();
        let mut g = if grad { Graph::new(ParamMask::only(&ids)) } else { Graph::inference() };
        let (l, _) = pretrain_loss(&mut g, s, &model, &heads, &refs, &pcfg).unwrap();
        let v = g.scalar(l);
        (v, grad.then(|| g.backward(l, 1.0)))
    };
    let (pre_err, pre_at) = worst_gradient_error(&mut store, &ids, &pre);

    let bcfg = EncoderConfig {
        status_input: false,
        ..cfg
    };
    let mut store = ParamStore::new();
    let encoder = ProcessModel::new(&mut store, bcfg, &mut rng);
    let net = BehaviorNet::new(&mut store, encoder, 3, 0.0, &mut rng).unwrap();
    let terms = IrtTerms::new(&mut store, 3, 4);
    randomize(&mut store, &mut rng);
    let seqs: Vec<EventSeq> = (0..5).map(|i| random_seq(&mut rng, 1 + i % 3, 5, 4)).collect();
    let responses: Vec<Response> = (0..5)
        .map(|i| Response {
            student: i % 3,
            question: (i * 3) % 4,
            correct: i % 2 == 0,
        })
        .collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let joint = |s: &ParamStore, grad: bool| {
        let pairs = PairSet {
            responses: &responses,
            sequences: Some(&seqs),
        };
        let mut g = if grad { Graph::new(ParamMask::only(&ids)) } else { Graph::inference() };
        let l = pair_loss(&mut g, s, &terms, Some(&net), pairs).unwrap();
        let v = g.scalar(l);
        (v, grad.then(|| g.backward(l, 1.0)))
    };
    let (irt_err, irt_at) = worst_gradient_error(&mut store, &ids, &joint);
    outcome(
        pre_err < 1e-3 && irt_err < 1e-3,
        format!("worst relative error: pre-training {pre_err:.2e} at {pre_at}, joint IRT {irt_err:.2e} at {irt_at}"),
    )
}

fn time_ratios() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut bad = 0;
    for _ in 0..2000 {
        let n = rng.random_range(1..40);
        let mut t = rng.random_range(-100.0..100.0);
        let m: Vec<f64> = (0..n)
            .map(|_| {
                // ties included
                if rng.random_bool(0.8) {
                    t += rng.random::<f64>() * 10.0;
                }
                t
            })
            .collect();
        let r = time_ratio(&m).unwrap();
        let in_range = r.iter().all(|x| (0.0..=1.0).contains(x));
        let ends = r[0] == 0.0 && (n == 1 || r[n - 1] == 1.0);
        if !(in_range && ends) {
            bad += 1;
        }
    }
    let mut uniform_bad = 0;
    for _ in 0..200 {
        let n = rng.random_range(3..40);
        let (start, step) = (rng.random_range(-50.0..50.0), rng.random_range(0.01..5.0));
        let m: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
        let r = time_ratio(&m).unwrap();
        if r[1..n - 1].iter().any(|x| (x - 0.5).abs() > 1e-9) {
            uniform_bad += 1;
        }
    }
    outcome(
        bad == 0 && uniform_bad == 0,
        format!("{bad} of 2000 random lists out of contract, {uniform_bad} of 200 uniform lists off 0.5"),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=200);
        // coarse scores force ties
        let levels = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        worst = worst.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
        done += 1;
    }
    outcome(worst <= 1e-12, format!("1000 instances, max |difference| {worst:.1e}"))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn irt_recovery() -> Outcome {
    let cfg = CohortConfig {
        n_students: 200,
        n_questions_per_block: 15,
        effect_scale: 0.0,
        archetype_mix: vec![
            (Archetype::Rapid, 0.25),
            (Archetype::ToolUser, 0.25),
            (Archetype::Checker, 0.25),
            (Archetype::HighEffort, 0.25),
        ],
        seed: 7,
        ..CohortConfig::default()
    };
    let truth = generate_cohort(&cfg).unwrap().truth;
    let responses: Vec<Response> = truth
        .outcomes
        .iter()
        .enumerate()
        .flat_map(|(s, row)| {
            row.iter().enumerate().map(move |(q, o)| Response {
                student: s,
                question: q,
                correct: o.is_correct(),
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fit = fit_base(&responses, 200, 30, None, &IrtConfig::default(), &mut rng).unwrap();
    let rk = pearson(&fit.params.abilities, &truth.abilities);
    let rd = pearson(&fit.params.difficulties, &truth.difficulties);
    outcome(rk >= 0.9 && rd >= 0.9, format!("ability r = {rk:.4}, difficulty r = {rd:.4}"))
}

fn run(task: Task, ablations: Ablations, ds: &NormalizedDataset, seed: u64) -> ExperimentResults {
    let cfg = ExperimentConfig {
        task,
        ablations,
        seed,
        ..ExperimentConfig::default()
    };
    run_experiment(&cfg, ds).unwrap()
}

fn fmt(r: &ExperimentResults) -> String {
    format!("{:.4} ± {:.4}", r.summary.mean, r.summary.std)
}

fn directional() -> Outcome {
    let ds = synthetic(500, 3);
    let full = run(Task::Score, Ablations::none(), &ds, 1);
    let no_status = run(Task::Score, Ablations::none().with(Ablation::NoStatusInput), &ds, 1);
    let behavior = run(Task::IrtBehavior, Ablations::none(), &ds, 1);
    let base = run(Task::Irt, Ablations::none(), &ds, 1);
    let a = full.summary.mean > 0.5 + 3.0 * full.summary.std;
    let b = no_status.summary.mean < full.summary.mean;
    let c = behavior.summary.mean >= base.summary.mean;
    outcome(
        a && b && c,
        format!(
            "(a) {} full score AUC {}; (b) {} without status input {}; (c) {} IRT with behavior {} vs base {}",
            if a { "ok" } else { "FAILED" },
            fmt(&full),
            if b { "ok" } else { "FAILED" },
            fmt(&no_status),
            if c { "ok" } else { "FAILED" },
            fmt(&behavior),
            fmt(&base)
        ),
    )
}

/// Full model plus the six single-component removals on the score task.
fn table_rows() -> Vec<Ablations> {
    let mut rows = vec![Ablations::none()];
    for flag in [
        Ablation::SkipEventType,
        Ablation::SkipTime,
        Ablation::SkipStatus,
        Ablation::SkipAllPretrain,
        Ablation::NoAttention,
        Ablation::NoFinetune,
    ] {
        rows.push(Ablations::none().with(flag));
    }
    rows
}

fn ablation_matrix(ds: &NormalizedDataset) -> (Outcome, Option<ExperimentResults>) {
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    let mut means = Vec::new();
    let mut full = None;
    for abl in table_rows() {
        let name = abl.to_list();
        let r = run(Task::Score, abl.clone(), ds, 11);
        let path = dir.path().join(format!("{}.json", name.replace(',', "+")));
        r.write(&path).unwrap();
        let back = ExperimentResults::load(&path).unwrap();
        if back.folds.len() != 5 {
            problems.push(format!("{name}: {} fold rows", back.folds.len()));
        }
        let pretrained = back
            .folds
            .iter()
            .any(|f| f.phases.iter().any(|p| p == "pretrain") || !f.history.totals("pretrain", "train").is_empty());
        if abl.has(Ablation::SkipAllPretrain) == pretrained {
            problems.push(format!("{name}: pretrain phase present = {pretrained}"));
        }
        means.push(format!("{name} {:.3}", back.summary.mean));
        if abl == Ablations::none() {
            full = Some(back);
        }
    }
    let detail = if problems.is_empty() {
        format!("7 configurations, 5 folds each; mean AUC {}", means.join(", "))
    } else {
        problems.join("; ")
    };
    (outcome(problems.is_empty(), detail), full)
}

fn reproducibility(ds: &NormalizedDataset, earlier: Option<&ExperimentResults>) -> Outcome {
    let first = match earlier {
        Some(r) => r.clone(),
        None => run(Task::Score, Ablations::none(), ds, 11),
    };
    let again = run(Task::Score, Ablations::none(), ds, 11);
    let mut worst = (first.summary.mean - again.summary.mean)
        .abs()
        .max((first.summary.std - again.summary.std).abs());
    for (a, b) in first.folds.iter().zip(&again.folds) {
        worst = worst.max((a.test_auc - b.test_auc).abs());
    }
    let irt_a = run(Task::Irt, Ablations::none(), ds, 11);
    let irt_b = run(Task::Irt, Ablations::none(), ds, 11);
    worst = worst.max((irt_a.summary.mean - irt_b.summary.mean).abs());
    outcome(worst <= 1e-9, format!("score and IRT reruns, max |difference| {worst:.1e}"))
}

fn ingest_round_trip() -> Outcome {
    let cfg = CohortConfig {
        n_students: 100,
        seed: 909,
        ..CohortConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let ds = cohort_dataset(&cohort);
    let truth = &cohort.truth;
    let mut total = 0;
    let mut matched = 0;
    for (s, id) in truth.student_ids.iter().enumerate() {
        for (q, planted) in truth.outcomes[s].iter().enumerate() {
            total += 1;
            let got = ds
                .students
                .iter()
                .find(|r| &r.id == id)
                .and_then(|r| {
                    let qi = ds.questions.iter().position(|x| x.id == truth.question_ids[q])?;
                    Some(r.outcomes[qi])
                });
            if got == Some(*planted) {
                matched += 1;
            }
        }
    }
    outcome(matched == total, format!("{matched} of {total} pairs match the planted status"))
}

fn report(n: usize, name: &str, limit: Option<Duration>, start: Instant, o: Outcome) -> bool {
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    let budget = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
    println!(
        "criterion {n} {name}: {} | {} | {:.1}s{budget}",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    let wanted: Option<Vec<usize>> = std::env::var("ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let on = |n: usize| wanted.as_ref().is_none_or(|w| w.contains(&n));
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let mut ok = true;
    if on(1) {
        ok &= report(1, "leakage-freedom", mins(1), Instant::now(), leakage());
    }
    if on(2) {
        ok &= report(2, "gradient correctness", mins(2), Instant::now(), gradients());
    }
    if on(3) {
        ok &= report(3, "time-ratio contract", None, Instant::now(), time_ratios());
    }
    if on(4) {
        ok &= report(4, "AUC oracle equivalence", None, Instant::now(), auc_oracle());
    }
    if on(5) {
        ok &= report(5, "IRT recovery", mins(5), Instant::now(), irt_recovery());
    }
    if on(6) {
        ok &= report(6, "directional ordering", mins(30), Instant::now(), directional());
    }
    let small = (on(7) || on(8)).then(|| synthetic(100, 5));
    let mut full = None;
    if on(7) {
        let start = Instant::now();
        let (o, r) = ablation_matrix(small.as_ref().unwrap());
        full = r;
        ok &= report(7, "ablation matrix smoke", mins(20), start, o);
    }
    if on(8) {
        let start = Instant::now();
        ok &= report(8, "reproducibility", None, start, reproducibility(small.as_ref().unwrap(), full.as_ref()));
    }
    if on(9) {
        ok &= report(9, "ingest round trip", None, Instant::now(), ingest_round_trip());
    }
    if !ok {
        std::process::exit(1);
    }
}
