//! One-parameter IRT, plain and with a learned behavior shift.
//!
//! Both fits run through the same loop; the behavior variant only adds the
//! network output `B_ij` to each logit, so with that output frozen at zero the
//! two produce identical trajectories.

use std::fmt::Write as _;

use ndarray::Array2;
use procbert_nn::{sigmoid, Adam, AdamConfig, Graph, Mat, ParamId, ParamMask, ParamStore, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{EventSeq, ProcessModel};
use crate::provenance::Provenance;
use crate::train::{check_finite, length_batches, BestTracker, History, LossRecord};
use crate::transfer::{pool_sequences, AttentionPool, TransferHead};

/// `P(Y = 1) = σ(ability − difficulty + behavior)`.
pub fn irt_prob(ability: f64, difficulty: f64, behavior: f64) -> f64 {
    sigmoid(ability - difficulty + behavior)
}

/// One scored (student, question) pair; incomplete counts as incorrect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub student: usize,
    pub question: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrtConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once the epoch loss changes by less than this.
    pub tolerance: f64,
    /// Bound on |k| and |d|.
    pub clip: f64,
    /// `None` fits on the full set each step.
    pub batch_size: Option<usize>,
}

impl Default for IrtConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            max_epochs: 3000,
            tolerance: 1e-6,
            clip: 10.0,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtParams {
    pub abilities: Vec<f64>,
    pub difficulties: Vec<f64>,
}

impl IrtParams {
    pub fn prob(&self, student: usize, question: usize, behavior: f64) -> f64 {
        irt_prob(self.abilities[student], self.difficulties[question], behavior)
    }

    /// Shift so the mean ability over `present` students is zero.
    pub fn anchor(&mut self, present: &[bool]) {
        let (sum, n) = self
            .abilities
            .iter()
            .zip(present)
            .filter(|(_, &p)| p)
            .fold((0.0, 0usize), |(s, n), (k, _)| (s + k, n + 1));
        if n == 0 {
            return;
        }
        let shift = sum / n as f64;
        self.abilities.iter_mut().for_each(|k| *k -= shift);
        self.difficulties.iter_mut().for_each(|d| *d -= shift);
    }

    /// `kind,id,value` rows behind a provenance comment.
    pub fn to_csv(&self, students: &[String], questions: &[String], provenance: &Provenance) -> String {
        let mut out = format!("# {}\nkind,id,value\n", provenance.header());
        for (id, k) in students.iter().zip(&self.abilities) {
            let _ = writeln!(out, "ability,{id},{k}");
        }
        for (id, d) in questions.iter().zip(&self.difficulties) {
            let _ = writeln!(out, "difficulty,{id},{d}");
        }
        out
    }
}

/// Behavior network: status-free encoder, attention pool and a scalar head.
#[derive(Debug, Clone)]
pub struct BehaviorNet {
    pub encoder: ProcessModel,
    pub pool: AttentionPool,
    pub head: TransferHead,
}

impl BehaviorNet {
    /// The head's output layer starts at zero, so `B ≡ 0` until trained.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        encoder: ProcessModel,
        head_hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if encoder.config.status_input {
            return Err(contract(
                "behavior model must not read response status; build the encoder with status input off",
            ));
        }
        let width = encoder.config.context_dim();
        let pool = AttentionPool::new(store, "behavior", width, rng);
        let head = TransferHead::new(store, "behavior.head", width, head_hidden, 1, dropout, rng);
        for id in head.output.params() {
            let dim = store.get(id).dim();
            store.set(id, Mat::zeros(dim));
        }
        Ok(Self { encoder, pool, head })
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = self.pool.params();
        ids.extend(self.head.params());
        ids
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[&EventSeq],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if self.encoder.config.status_input {
            return Err(contract("behavior model reads response status"));
        }
        let pooled = pool_sequences(g, store, &self.encoder, Some(&self.pool), seqs)?;
        Ok(self.head.forward(g, store, pooled, rng))
    }

    /// `B_ij` for each sequence.
    pub fn scalars(&self, store: &ParamStore, seqs: &[EventSeq]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(128) {
            let refs: Vec<&EventSeq> = chunk.iter().collect();
            let mut g = Graph::inference();
            let b = self.forward(&mut g, store, &refs, None)?;
            out.extend(g.value(b).iter().copied());
        }
        Ok(out)
    }

    /// Pooled vector and `B_ij` for each sequence.
    pub fn represent(&self, store: &ParamStore, seqs: &[EventSeq]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut vectors = Vec::with_capacity(seqs.len());
        let mut scalars = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(128) {
            let refs: Vec<&EventSeq> = chunk.iter().collect();
            let mut g = Graph::inference();
            let pooled = pool_sequences(&mut g, store, &self.encoder, Some(&self.pool), &refs)?;
            let b = self.head.forward(&mut g, store, pooled, None);
            vectors.extend(g.value(pooled).outer_iter().map(|r| r.to_vec()));
            scalars.extend(g.value(b).iter().copied());
        }
        Ok((vectors, scalars))
    }
}

/// IRT parameters living in a store next to any network parameters.
#[derive(Debug, Clone, Copy)]
pub struct IrtTerms {
    pub abilities: ParamId,
    pub difficulties: ParamId,
}

impl IrtTerms {
    pub fn new(store: &mut ParamStore, n_students: usize, n_questions: usize) -> Self {
        Self {
            abilities: store.add("irt.ability", Mat::zeros((n_students, 1))),
            difficulties: store.add("irt.difficulty", Mat::zeros((n_questions, 1))),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.abilities, self.difficulties]
    }

    pub fn read(&self, store: &ParamStore) -> IrtParams {
        IrtParams {
            abilities: store.get(self.abilities).iter().copied().collect(),
            difficulties: store.get(self.difficulties).iter().copied().collect(),
        }
    }

    fn clip(&self, store: &mut ParamStore, bound: f64) {
        for id in self.params() {
            store.get_mut(id).mapv_inplace(|x| x.clamp(-bound, bound));
        }
    }
}

/// Responses plus, for the behavior model, one event sequence per response.
#[derive(Debug, Clone, Copy)]
pub struct PairSet<'a> {
    pub responses: &'a [Response],
    pub sequences: Option<&'a [EventSeq]>,
}

/// Mean BCE of a batch of responses on the tape.
fn batch_loss(
    g: &mut Graph,
    store: &ParamStore,
    terms: &IrtTerms,
    net: Option<&BehaviorNet>,
    pairs: PairSet<'_>,
    idx: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let students: Vec<usize> = idx.iter().map(|&i| pairs.responses[i].student).collect();
    let questions: Vec<usize> = idx.iter().map(|&i| pairs.responses[i].question).collect();
    let k = g.param(store, terms.abilities);
    let d = g.param(store, terms.difficulties);
    let k = g.gather_rows(k, &students);
    let d = g.gather_rows(d, &questions);
    let mut logit = g.sub(k, d);
    if let Some(net) = net {
        let seqs = pairs
            .sequences
            .ok_or_else(|| contract("behavior model needs one sequence per response"))?;
        let refs: Vec<&EventSeq> = idx.iter().map(|&i| &seqs[i]).collect();
        let b = net.forward(g, store, &refs, rng)?;
        logit = g.add(logit, b);
    }
    let n = idx.len();
    let targets = Array2::from_shape_fn((n, 1), |(r, _)| f64::from(u8::from(pairs.responses[idx[r]].correct)));
    let weights = Array2::from_elem((n, 1), 1.0 / n as f64);
    Ok(g.bce_with_logits(logit, &targets, &weights))
}

/// Mean BCE over every pair on the tape, without dropout.
pub fn pair_loss(
    g: &mut Graph,
    store: &ParamStore,
    terms: &IrtTerms,
    net: Option<&BehaviorNet>,
    pairs: PairSet<'_>,
) -> Result<Var> {
    let idx: Vec<usize> = (0..pairs.responses.len()).collect();
    batch_loss(g, store, terms, net, pairs, &idx, None)
}

/// Mean BCE over a whole set, no updates.
pub fn evaluate_bce(
    store: &ParamStore,
    terms: &IrtTerms,
    net: Option<&BehaviorNet>,
    pairs: PairSet<'_>,
) -> Result<f64> {
    let n = pairs.responses.len();
    if n == 0 {
        return Err(Error::Data("no responses to evaluate".into()));
    }
    let mut total = 0.0;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(256) {
        let mut g = Graph::inference();
        let l = batch_loss(&mut g, store, terms, net, pairs, chunk, None)?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Probability for each response.
pub fn predict_probs(
    store: &ParamStore,
    terms: &IrtTerms,
    net: Option<&BehaviorNet>,
    pairs: PairSet<'_>,
) -> Result<Vec<f64>> {
    let params = terms.read(store);
    let behavior = match (net, pairs.sequences) {
        (Some(net), Some(seqs)) => net.scalars(store, seqs)?,
        (Some(_), None) => return Err(contract("behavior model needs one sequence per response")),
        (None, _) => vec![0.0; pairs.responses.len()],
    };
    Ok(pairs
        .responses
        .iter()
        .zip(behavior)
        .map(|(r, b)| params.prob(r.student, r.question, b))
        .collect())
}

/// One optimisation phase of the shared loop.
#[derive(Debug, Clone, Copy)]
pub struct IrtPhase<'a> {
    pub name: &'a str,
    pub epochs: usize,
    pub tolerance: f64,
    pub batch_size: Option<usize>,
    pub irt_lr: f64,
    pub net_lr: f64,
    pub clip: f64,
}

#[derive(Debug, Clone)]
pub struct IrtOutcome {
    pub history: History,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Minimize BCE over `k`, `d` and `net_trainable`. Selection is by validation
/// loss when a validation set is given, otherwise the last epoch is kept.
#[allow(clippy::too_many_arguments)]
pub fn run_phase<R: Rng>(
    store: &mut ParamStore,
    terms: &IrtTerms,
    net: Option<&BehaviorNet>,
    net_trainable: &[ParamId],
    train: PairSet<'_>,
    validation: Option<PairSet<'_>>,
    phase: IrtPhase<'_>,
    rng: &mut R,
) -> Result<IrtOutcome> {
    let n = train.responses.len();
    if n == 0 {
        return Err(Error::Data("no responses to fit".into()));
    }
    let irt_ids = terms.params().to_vec();
    let mut all = irt_ids.clone();
    all.extend_from_slice(net_trainable);
    let mask = ParamMask::only(&all);
    let adam_config = |lr| AdamConfig {
        lr,
        clip_norm: None,
        ..AdamConfig::default()
    };
    let mut irt_adam = Adam::new(adam_config(phase.irt_lr), store, &irt_ids);
    let mut net_adam = Adam::new(adam_config(phase.net_lr), store, net_trainable);
    let dropout = !net_trainable.is_empty();

    let record = |epoch: usize, split: &str, total: f64| LossRecord {
        phase: phase.name.to_string(),
        epoch,
        split: split.to_string(),
        components: vec![("bce".into(), Some(total))],
        total,
    };
    let mut history = History::default();
    let mut best = match validation {
        Some(v) => {
            let loss = evaluate_bce(store, terms, net, v)?;
            history.push(record(0, "validation", loss));
            Some(BestTracker::new(store, &all, loss))
        }
        None => None,
    };

    let lengths: Vec<usize> = match train.sequences {
        Some(seqs) if net.is_some() => seqs.iter().map(|s| s.len()).collect(),
        _ => vec![1; n],
    };
    let mut previous = f64::INFINITY;
    let mut epochs_run = 0;
    for epoch in 1..=phase.epochs {
        let batches = match phase.batch_size {
            Some(size) => length_batches(&lengths, size, rng),
            None => vec![(0..n).collect()],
        };
        let mut running = 0.0;
        for idx in batches {
            let mut g = Graph::new(mask.clone());
            let drop_rng = if dropout { Some(&mut *rng as &mut dyn RngCore) } else { None };
            let loss = batch_loss(&mut g, store, terms, net, train, &idx, drop_rng)?;
            let value = g.scalar(loss);
            check_finite(value, phase.name, epoch)?;
            running += value * idx.len() as f64;
            let grads = g.backward(loss, 1.0);
            irt_adam.step(store, &grads);
            if !net_trainable.is_empty() {
                net_adam.step(store, &grads);
            }
            terms.clip(store, phase.clip);
        }
        let epoch_loss = running / n as f64;
        history.push(record(epoch, "train", epoch_loss));
        epochs_run = epoch;
        if let (Some(v), Some(best)) = (validation, best.as_mut()) {
            let loss = evaluate_bce(store, terms, net, v)?;
            check_finite(loss, phase.name, epoch)?;
            history.push(record(epoch, "validation", loss));
            best.observe(store, epoch, loss);
        }
        if phase.tolerance > 0.0 && (previous - epoch_loss).abs() < phase.tolerance {
            break;
        }
        previous = epoch_loss;
    }
    let best_epoch = match &best {
        Some(b) => {
            b.restore(store);
            b.best_epoch
        }
        None => epochs_run,
    };
    Ok(IrtOutcome {
        history,
        epochs_run,
        best_epoch,
    })
}

fn presence(responses: &[Response], n_students: usize, n_questions: usize) -> (Vec<bool>, Vec<bool>) {
    let mut students = vec![false; n_students];
    let mut questions = vec![false; n_questions];
    for r in responses {
        students[r.student] = true;
        questions[r.question] = true;
    }
    (students, questions)
}

fn check_indices(responses: &[Response], n_students: usize, n_questions: usize) -> Result<()> {
    if let Some(r) = responses
        .iter()
        .find(|r| r.student >= n_students || r.question >= n_questions)
    {
        return Err(contract(format!(
            "response ({}, {}) outside {n_students} students × {n_questions} questions",
            r.student, r.question
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BaseFit {
    pub store: ParamStore,
    pub terms: IrtTerms,
    pub params: IrtParams,
    pub outcome: IrtOutcome,
}

/// Plain 1PL by gradient descent on BCE, anchored to mean ability 0.
pub fn fit_base<R: Rng>(
    responses: &[Response],
    n_students: usize,
    n_questions: usize,
    validation: Option<&[Response]>,
    config: &IrtConfig,
    rng: &mut R,
) -> Result<BaseFit> {
    check_indices(responses, n_students, n_questions)?;
    let (students, questions) = presence(responses, n_students, n_questions);
    let missing = students.iter().filter(|p| !**p).count() + questions.iter().filter(|p| !**p).count();
    if missing > 0 {
        log::warn!("{missing} students or questions have no training responses; their parameters stay at 0");
    }
    let mut store = ParamStore::new();
    let terms = IrtTerms::new(&mut store, n_students, n_questions);
    let phase = IrtPhase {
        name: "irt",
        epochs: config.max_epochs,
        tolerance: config.tolerance,
        batch_size: config.batch_size,
        irt_lr: config.lr,
        net_lr: 0.0,
        clip: config.clip,
    };
    let train = PairSet {
        responses,
        sequences: None,
    };
    let validation = validation.map(|v| PairSet {
        responses: v,
        sequences: None,
    });
    let outcome = run_phase(&mut store, &terms, None, &[], train, validation, phase, rng)?;
    let mut params = terms.read(&store);
    params.anchor(&students);
    store.set(terms.abilities, Mat::from_shape_vec((n_students, 1), params.abilities.clone()).expect("column"));
    store.set(terms.difficulties, Mat::from_shape_vec((n_questions, 1), params.difficulties.clone()).expect("column"));
    Ok(BaseFit {
        store,
        terms,
        params,
        outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorConfig {
    pub irt: IrtConfig,
    pub head_hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr_scale: f64,
    /// Keep the behavior network fixed (its output stays 0).
    pub freeze_behavior: bool,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            irt: IrtConfig {
                lr: 0.02,
                ..IrtConfig::default()
            },
            head_hidden: 64,
            dropout: 0.25,
            epochs: 15,
            batch_size: 64,
            lr: 1e-3,
            finetune: true,
            finetune_epochs: 5,
            finetune_lr_scale: 0.1,
            freeze_behavior: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BehaviorFit {
    pub terms: IrtTerms,
    pub params: IrtParams,
    pub history: History,
}

/// Joint fit of `k`, `d` and the behavior network: a phase with the process
/// model frozen, then (optionally) a phase updating everything. The network
/// parameters live in `store`, which is updated in place.
#[allow(clippy::too_many_arguments)]
pub fn fit_behavior<R: Rng>(
    store: &mut ParamStore,
    net: &BehaviorNet,
    train: PairSet<'_>,
    validation: Option<PairSet<'_>>,
    n_students: usize,
    n_questions: usize,
    config: &BehaviorConfig,
    rng: &mut R,
) -> Result<BehaviorFit> {
    if net.encoder.config.status_input {
        return Err(contract("behavior model reads response status"));
    }
    let check = |set: PairSet<'_>| -> Result<()> {
        check_indices(set.responses, n_students, n_questions)?;
        match set.sequences {
            Some(s) if s.len() == set.responses.len() => Ok(()),
            _ => Err(contract("behavior model needs one sequence per response")),
        }
    };
    check(train)?;
    if let Some(v) = validation {
        check(v)?;
    }
    let terms = IrtTerms::new(store, n_students, n_questions);
    let (students, _) = presence(train.responses, n_students, n_questions);
    let frozen = IrtPhase {
        name: "irt_frozen",
        epochs: config.epochs,
        tolerance: 0.0,
        batch_size: Some(config.batch_size),
        irt_lr: config.irt.lr,
        net_lr: config.lr,
        clip: config.irt.clip,
    };
    let head = if config.freeze_behavior { Vec::new() } else { net.head_params() };
    let mut history = run_phase(store, &terms, Some(net), &head, train, validation, frozen, rng)?.history;
    if config.finetune && !config.freeze_behavior {
        let mut all = net.encoder.params();
        all.extend(head);
        let phase = IrtPhase {
            name: "irt_finetune",
            epochs: config.finetune_epochs,
            net_lr: config.lr * config.finetune_lr_scale,
            ..frozen
        };
        history.extend(run_phase(store, &terms, Some(net), &all, train, validation, phase, rng)?.history);
    }
    let mut params = terms.read(store);
    params.anchor(&students);
    store.set(terms.abilities, Mat::from_shape_vec((n_students, 1), params.abilities.clone()).expect("column"));
    store.set(terms.difficulties, Mat::from_shape_vec((n_questions, 1), params.difficulties.clone()).expect("column"));
    Ok(BehaviorFit { terms, params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_seq;
    use crate::model::EncoderConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn resp(student: usize, question: usize, correct: bool) -> Response {
        Response {
            student,
            question,
            correct,
        }
    }

    #[test]
    fn prob_examples() {
        assert_eq!(irt_prob(0.7, 0.7, 0.0), 0.5);
        assert!((irt_prob(3f64.ln(), 0.0, 0.0) - 0.75).abs() < 1e-15);
        assert!(irt_prob(0.0, 0.0, -1.0) < irt_prob(0.0, 0.0, 0.0));
        assert!(irt_prob(0.0, 0.0, 0.0) < irt_prob(0.0, 0.0, 1.0));
    }

    proptest! {
        #[test]
        fn translation_invariance(k in -4096i32..4096, d in -4096i32..4096, b in -4096i32..4096, c in -4096i32..4096) {
            // dyadic values keep every sum exact
            let (k, d, b, c) = (k as f64 / 1024.0, d as f64 / 1024.0, b as f64 / 1024.0, c as f64 / 1024.0);
            prop_assert_eq!(irt_prob(k, d, b), irt_prob(k + c, d + c, b));
        }

        #[test]
        fn probabilities_bounded(k in -10.0f64..10.0, d in -10.0f64..10.0, b in -10.0f64..10.0) {
            let p = irt_prob(k, d, b);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn all_correct_fits_above_half() {
        let responses: Vec<Response> = (0..4).flat_map(|s| (0..3).map(move |q| resp(s, q, true))).collect();
        let fit = fit_base(&responses, 4, 3, None, &IrtConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for r in &responses {
            assert!(fit.params.prob(r.student, r.question, 0.0) >= 0.5);
        }
        assert!(fit.params.abilities.iter().chain(&fit.params.difficulties).all(|x| x.abs() <= 10.0 + 1e-12));
        let mean: f64 = fit.params.abilities.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn identical_patterns_share_ability() {
        let pattern = [true, false, true, true, false];
        let mut responses = Vec::new();
        for s in 0..6 {
            for (q, &c) in pattern.iter().enumerate() {
                let c = if s >= 2 { (s + q) % 3 != 0 } else { c };
                responses.push(resp(s, q, c));
            }
        }
        let fit = fit_base(&responses, 6, 5, None, &IrtConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((fit.params.abilities[0] - fit.params.abilities[1]).abs() < 1e-3);
    }

    #[test]
    fn fit_recovers_planted_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let abilities: Vec<f64> = (0..60).map(|i| (i as f64 - 30.0) / 15.0).collect();
        let difficulties: Vec<f64> = (0..12).map(|j| (j as f64 - 6.0) / 4.0).collect();
        let mut responses = Vec::new();
        for (s, k) in abilities.iter().enumerate() {
            for (q, d) in difficulties.iter().enumerate() {
                responses.push(resp(s, q, rng.random::<f64>() < irt_prob(*k, *d, 0.0)));
            }
        }
        let fit = fit_base(&responses, 60, 12, None, &IrtConfig::default(), &mut rng).unwrap();
        let corr = pearson(&fit.params.difficulties, &difficulties);
        assert!(corr > 0.8, "{corr}");
        assert!(fit.outcome.epochs_run < IrtConfig::default().max_epochs);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn tiny_net(store: &mut ParamStore, status_input: bool) -> Result<BehaviorNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = EncoderConfig {
            event_dim: 3,
            question_dim: 2,
            hidden: 3,
            status_input,
            ..EncoderConfig::new(6, 4)
        };
        let encoder = ProcessModel::new(store, config, &mut rng);
        BehaviorNet::new(store, encoder, 4, 0.0, &mut rng)
    }

    fn pair_data(n_students: usize, n_questions: usize, seed: u64) -> (Vec<Response>, Vec<EventSeq>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut responses = Vec::new();
        let mut seqs = Vec::new();
        for s in 0..n_students {
            for q in 0..n_questions {
                let seq = random_seq(&mut rng, 1 + (s + q) % 4);
                responses.push(resp(s, q, rng.random::<f64>() < 0.5));
                seqs.push(seq);
            }
        }
        (responses, seqs)
    }

    #[test]
    fn leakage_guard() {
        let mut store = ParamStore::new();
        assert!(matches!(tiny_net(&mut store, true), Err(Error::Contract(_))));
        let mut store = ParamStore::new();
        let net = tiny_net(&mut store, false).unwrap();
        let (responses, seqs) = pair_data(3, 2, 1);
        let mut leaky = net.clone();
        leaky.encoder.config.status_input = true;
        let set = PairSet {
            responses: &responses,
            sequences: Some(&seqs),
        };
        let r = fit_behavior(&mut store, &leaky, set, None, 3, 2, &BehaviorConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::Contract(_))));
        // statuses never reach the network
        let b1 = net.scalars(&store, &seqs).unwrap();
        let mut other = seqs.clone();
        for s in &mut other {
            s.statuses.reverse();
        }
        for id in net.head.output.params() {
            let dim = store.get(id).dim();
            store.set(id, Mat::from_elem(dim, 0.3));
        }
        let b1b = net.scalars(&store, &seqs).unwrap();
        assert_eq!(b1b, net.scalars(&store, &other).unwrap());
        assert!(b1.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn frozen_zero_behavior_reduces_to_base() {
        let (responses, seqs) = pair_data(5, 4, 2);
        // equal lengths so the length-bucketed batches match the plain shuffle
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<EventSeq> = seqs.iter().map(|_| random_seq(&mut rng, 3)).collect();
        let config = BehaviorConfig {
            irt: IrtConfig {
                max_epochs: 12,
                tolerance: 0.0,
                batch_size: Some(6),
                ..IrtConfig::default()
            },
            epochs: 12,
            batch_size: 6,
            freeze_behavior: true,
            ..BehaviorConfig::default()
        };
        let mut store = ParamStore::new();
        let net = tiny_net(&mut store, false).unwrap();
        let set = PairSet {
            responses: &responses,
            sequences: Some(&seqs),
        };
        let behavior = fit_behavior(&mut store, &net, set, None, 5, 4, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let base = fit_base(&responses, 5, 4, None, &config.irt, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(behavior.params, base.params);
        assert_eq!(
            behavior.history.totals("irt_frozen", "train"),
            base.outcome.history.totals("irt", "train")
        );
    }

    #[test]
    fn joint_gradient_two_by_two() {
        let mut store = ParamStore::new();
        let net = tiny_net(&mut store, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in net.head.output.params() {
            let dim = store.get(id).dim();
            store.set(id, Mat::from_shape_fn(dim, |_| rng.random::<f64>() - 0.5));
        }
        let terms = IrtTerms::new(&mut store, 2, 2);
        store.set(terms.abilities, Mat::from_shape_vec((2, 1), vec![0.3, -0.4]).unwrap());
        store.set(terms.difficulties, Mat::from_shape_vec((2, 1), vec![-0.2, 0.5]).unwrap());
        let (responses, seqs) = pair_data(2, 2, 6);
        let set = PairSet {
            responses: &responses,
            sequences: Some(&seqs),
        };
        let idx: Vec<usize> = (0..4).collect();
        let ids: Vec<ParamId> = store.ids().collect();
        let mut g = Graph::new(ParamMask::only(&ids));
        let l = batch_loss(&mut g, &store, &terms, Some(&net), set, &idx, None).unwrap();
        let grads = g.backward(l, 1.0);
        let loss_at = |s: &ParamStore| {
            let mut g = Graph::inference();
            let l = batch_loss(&mut g, s, &terms, Some(&net), set, &idx, None).unwrap();
            g.scalar(l)
        };
        let h = 1e-5;
        for id in ids {
            let dim = store.get(id).dim();
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(dim));
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + h;
                    let up = loss_at(&store);
                    store.get_mut(id)[[r, c]] = orig - h;
                    let down = loss_at(&store);
                    store.get_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                    assert!(rel < 1e-3, "{} [{r},{c}]: {a} vs {numeric}", store.name(id));
                }
            }
        }
    }
}
