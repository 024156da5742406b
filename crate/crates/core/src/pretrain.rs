//! Self-supervised objectives on per-question sequences: event type, time ratio,
//! response status and (for the student-level variant) question id, each read
//! from the predictive context `(h→_{t−1}, h←_{t+1})`.

use ndarray::Array2;
use procbert_nn::{softplus, Adam, AdamConfig, Graph, Linear, ParamId, ParamMask, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::ingest::ResponseStatus;
use crate::model::{EncoderConfig, EventSeq, ProcessModel};
use crate::train::{check_finite, eval_batches, length_batches, BestTracker, History, LossRecord};

/// Fractional position of each timestamp between its neighbours. The first and
/// last entries are fixed to 0 and 1; a zero-width neighbourhood gives 0.5.
pub fn time_ratio(m: &[f64]) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(contract("time ratio of an empty sequence"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(contract("non-finite timestamp"));
    }
    if let Some(w) = m.windows(2).position(|w| w[1] < w[0]) {
        return Err(contract(format!(
            "timestamps decrease at position {}: {} then {}",
            w + 1,
            m[w],
            m[w + 1]
        )));
    }
    let n = m.len();
    let mut r = vec![0.0; n];
    for t in 1..n.saturating_sub(1) {
        let span = m[t + 1] - m[t - 1];
        r[t] = if span > 0.0 {
            ((m[t] - m[t - 1]) / span).clamp(0.0, 1.0)
        } else {
            0.5
        };
    }
    if n > 1 {
        r[n - 1] = 1.0;
    }
    Ok(r)
}

/// Cross-entropy of `softmax(logits)` against class `target`.
pub fn event_type_loss(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Binary cross-entropy of `σ(logit)` against the soft target `r`.
pub fn time_loss(logit: f64, r: f64) -> f64 {
    softplus(logit) - r * logit
}

pub fn status_loss(logits: &[f64], status: ResponseStatus) -> f64 {
    event_type_loss(logits, status.index())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the parameters of the epoch with the lowest validation loss.
    BestValidation,
    LastEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub enable_event_type: bool,
    pub enable_time: bool,
    pub enable_status: bool,
    pub enable_question_id: bool,
    pub weight_event_type: f64,
    pub weight_time: f64,
    pub weight_status: f64,
    pub weight_question_id: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub selection: Selection,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enable_event_type: true,
            enable_time: true,
            enable_status: true,
            enable_question_id: false,
            weight_event_type: 1.0,
            weight_time: 1.0,
            weight_status: 1.0,
            weight_question_id: 1.0,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            selection: Selection::BestValidation,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_event_type || self.enable_time || self.enable_status || self.enable_question_id) {
            return Err(Error::Config("at least one pre-training objective must be enabled".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }
}

/// Linear prediction heads on the predictive context.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    pub event_type: Linear,
    pub time: Linear,
    pub status: Linear,
    pub question: Option<Linear>,
}

impl PretrainHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        with_question: bool,
        rng: &mut R,
    ) -> Self {
        let z = config.context_dim();
        Self {
            event_type: Linear::new(store, "pretrain.event_type", z, config.n_event_types, true, rng),
            time: Linear::new(store, "pretrain.time", z, 1, true, rng),
            status: Linear::new(store, "pretrain.status", z, 3, true, rng),
            question: with_question.then(|| Linear::new(store, "pretrain.question", z, config.n_questions, true, rng)),
        }
    }

    /// Parameters of the heads whose objectives are enabled.
    pub fn params(&self, config: &PretrainConfig) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if config.enable_event_type {
            ids.extend(self.event_type.params());
        }
        if config.enable_time {
            ids.extend(self.time.params());
        }
        if config.enable_status {
            ids.extend(self.status.params());
        }
        if config.enable_question_id {
            if let Some(q) = &self.question {
                ids.extend(q.params());
            }
        }
        ids
    }
}

/// Per-token mean of each objective; `None` when disabled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveLosses {
    pub event_type: Option<f64>,
    pub time: Option<f64>,
    pub status: Option<f64>,
    pub question: Option<f64>,
    pub total: f64,
}

impl ObjectiveLosses {
    fn components(&self) -> Vec<(String, Option<f64>)> {
        vec![
            ("event_type".into(), self.event_type),
            ("time".into(), self.time),
            ("status".into(), self.status),
            ("question_id".into(), self.question),
        ]
    }

    fn accumulate(&mut self, other: &ObjectiveLosses, weight: f64) {
        fn add(a: &mut Option<f64>, b: Option<f64>, w: f64) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + w * b);
            }
        }
        add(&mut self.event_type, other.event_type, weight);
        add(&mut self.time, other.time, weight);
        add(&mut self.status, other.status, weight);
        add(&mut self.question, other.question, weight);
        self.total += weight * other.total;
    }

    fn record(&self, phase: &str, epoch: usize, split: &str) -> LossRecord {
        LossRecord {
            phase: phase.into(),
            epoch,
            split: split.into(),
            components: self.components(),
            total: self.total,
        }
    }
}

/// `L_PT` of a batch, summed over enabled objectives and real time steps and
/// divided by the number of real time steps.
pub fn pretrain_loss(
    g: &mut Graph,
    store: &ParamStore,
    model: &ProcessModel,
    heads: &PretrainHeads,
    batch: &[&EventSeq],
    config: &PretrainConfig,
) -> Result<(Var, ObjectiveLosses)> {
    config.validate()?;
    if config.enable_question_id && heads.question.is_none() {
        return Err(Error::Config("question-id objective enabled without a question head".into()));
    }
    let states = model.encode_batch(g, store, batch)?;
    let z = states.predictive_contexts(g);
    let b = states.batch;
    let rows = states.steps * b;
    let mask = states.token_mask();
    let tokens: f64 = mask.iter().sum();
    let weights: Vec<f64> = mask.iter().map(|m| m / tokens).collect();

    let mut types = vec![0; rows];
    let mut statuses = vec![0; rows];
    let mut questions = vec![0; rows];
    let mut ratios = Array2::zeros((rows, 1));
    for (j, seq) in batch.iter().enumerate() {
        let r = if config.enable_time {
            time_ratio(&seq.stamps)?
        } else {
            Vec::new()
        };
        for t in 0..seq.len() {
            let row = t * b + j;
            types[row] = seq.types[t];
            statuses[row] = seq.statuses[t].index();
            questions[row] = seq.questions[t];
            if let Some(&v) = r.get(t) {
                ratios[[row, 0]] = v;
            }
        }
    }

    let mut losses = ObjectiveLosses::default();
    let mut terms: Vec<Var> = Vec::new();
    if config.enable_event_type {
        let logits = heads.event_type.forward(g, store, z);
        let l = g.softmax_cross_entropy(logits, &types, &weights);
        losses.event_type = Some(g.scalar(l));
        terms.push(g.scale(l, config.weight_event_type));
    }
    if config.enable_time {
        let logits = heads.time.forward(g, store, z);
        let w = Array2::from_shape_vec((rows, 1), weights.clone()).expect("weight column");
        let l = g.bce_with_logits(logits, &ratios, &w);
        losses.time = Some(g.scalar(l));
        terms.push(g.scale(l, config.weight_time));
    }
    if config.enable_status {
        let logits = heads.status.forward(g, store, z);
        let l = g.softmax_cross_entropy(logits, &statuses, &weights);
        losses.status = Some(g.scalar(l));
        terms.push(g.scale(l, config.weight_status));
    }
    if config.enable_question_id {
        let head = heads.question.as_ref().expect("checked above");
        let logits = head.forward(g, store, z);
        let l = g.softmax_cross_entropy(logits, &questions, &weights);
        losses.question = Some(g.scalar(l));
        terms.push(g.scale(l, config.weight_question_id));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    losses.total = g.scalar(total);
    Ok((total, losses))
}

/// Token-weighted mean losses over a set of sequences, without updating anything.
pub fn evaluate_pretrain(
    store: &ParamStore,
    model: &ProcessModel,
    heads: &PretrainHeads,
    seqs: &[EventSeq],
    config: &PretrainConfig,
) -> Result<ObjectiveLosses> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let total_tokens: usize = lengths.iter().sum();
    let mut out = ObjectiveLosses::default();
    for idx in eval_batches(&lengths, config.batch_size) {
        let batch: Vec<&EventSeq> = idx.iter().map(|&i| &seqs[i]).collect();
        let tokens: usize = idx.iter().map(|&i| lengths[i]).sum();
        let mut g = Graph::inference();
        let (_, parts) = pretrain_loss(&mut g, store, model, heads, &batch, config)?;
        out.accumulate(&parts, tokens as f64 / total_tokens as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Minimize `L_PT` over `train`, selecting the epoch by loss on `validation`
/// (or on `train` when `validation` is empty). Epoch 0 is the untrained model.
pub fn run_pretraining<R: Rng + ?Sized>(
    store: &mut ParamStore,
    model: &ProcessModel,
    heads: &PretrainHeads,
    train: &[EventSeq],
    validation: &[EventSeq],
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    const PHASE: &str = "pretrain";
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no sequences to pre-train on".into()));
    }
    let mut params = model.params();
    params.extend(heads.params(config));
    let mask = ParamMask::only(&params);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        store,
        &params,
    );

    let selection_set = if validation.is_empty() { train } else { validation };
    let mut history = History::default();
    let initial = evaluate_pretrain(store, model, heads, train, config)?;
    history.push(initial.record(PHASE, 0, "train"));
    let initial_sel = if validation.is_empty() {
        initial
    } else {
        let v = evaluate_pretrain(store, model, heads, validation, config)?;
        history.push(v.record(PHASE, 0, "validation"));
        v
    };
    check_finite(initial_sel.total, PHASE, 0)?;
    let mut best = BestTracker::new(store, &params, initial_sel.total);

    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let total_tokens: usize = lengths.iter().sum();
    for epoch in 1..=config.epochs {
        let mut running = ObjectiveLosses::default();
        for idx in length_batches(&lengths, config.batch_size, rng) {
            let batch: Vec<&EventSeq> = idx.iter().map(|&i| &train[i]).collect();
            let tokens: usize = idx.iter().map(|&i| lengths[i]).sum();
            let mut g = Graph::new(mask.clone());
            let (loss, parts) = pretrain_loss(&mut g, store, model, heads, &batch, config)?;
            check_finite(parts.total, PHASE, epoch)?;
            let grads = g.backward(loss, 1.0);
            adam.step(store, &grads);
            running.accumulate(&parts, tokens as f64 / total_tokens as f64);
        }
        history.push(running.record(PHASE, epoch, "train"));
        let sel = if validation.is_empty() {
            running
        } else {
            let v = evaluate_pretrain(store, model, heads, selection_set, config)?;
            history.push(v.record(PHASE, epoch, "validation"));
            v
        };
        check_finite(sel.total, PHASE, epoch)?;
        match config.selection {
            Selection::BestValidation => best.observe(store, epoch, sel.total),
            Selection::LastEpoch => {
                best = BestTracker::new(store, &params, sel.total);
                best.best_epoch = epoch;
            }
        }
    }
    best.restore(store);
    Ok(PretrainOutcome {
        history,
        best_epoch: best.best_epoch,
        best_loss: best.best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_seq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, ProcessModel, PretrainHeads) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let config = EncoderConfig {
            event_dim: 3,
            question_dim: 2,
            hidden: 3,
            ..EncoderConfig::new(6, 4)
        };
        let model = ProcessModel::new(&mut store, config, &mut rng);
        let heads = PretrainHeads::new(&mut store, &config, true, &mut rng);
        (store, model, heads)
    }

    fn only(a: bool, m: bool, c: bool, q: bool) -> PretrainConfig {
        PretrainConfig {
            enable_event_type: a,
            enable_time: m,
            enable_status: c,
            enable_question_id: q,
            ..PretrainConfig::default()
        }
    }

    fn batch_loss(store: &ParamStore, model: &ProcessModel, heads: &PretrainHeads, seqs: &[EventSeq], cfg: &PretrainConfig) -> f64 {
        let refs: Vec<&EventSeq> = seqs.iter().collect();
        let mut g = Graph::inference();
        let (l, _) = pretrain_loss(&mut g, store, model, heads, &refs, cfg).unwrap();
        g.scalar(l)
    }

    #[test]
    fn time_ratio_examples() {
        assert_eq!(time_ratio(&[0.0, 5.0, 10.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        let r = time_ratio(&[0.0, 1.0, 10.0]).unwrap();
        assert!((r[1] - 0.1).abs() < 1e-15);
        assert_eq!(time_ratio(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(time_ratio(&[4.0]).unwrap(), vec![0.0]);
        assert!(time_ratio(&[1.0, 0.5]).is_err());
        assert!(time_ratio(&[]).is_err());
    }

    proptest! {
        #[test]
        fn time_ratio_in_range(gaps in proptest::collection::vec(0.0f64..50.0, 1..40), start in 0.0f64..1e4) {
            let mut m = vec![start];
            for g in &gaps {
                m.push(m.last().unwrap() + g);
            }
            let r = time_ratio(&m).unwrap();
            prop_assert_eq!(r[0], 0.0);
            prop_assert_eq!(*r.last().unwrap(), 1.0);
            prop_assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn event_type_loss_examples() {
        assert!((event_type_loss(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-12);
        let at = |x: f64| event_type_loss(&[0.0, x, 0.0, 0.0], 1);
        assert!(at(0.0) > at(5.0) && at(5.0) > at(10.0) && at(10.0) > 0.0);
        let a = event_type_loss(&[0.3, 1.0, -2.0, 0.7], 1);
        let b = event_type_loss(&[-2.0, 1.0, 0.7, 0.3], 1);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn time_loss_examples() {
        assert!((time_loss(0.0, 0.5) - 2f64.ln()).abs() < 1e-12);
        assert!(time_loss(-1.0, 1.0) > time_loss(0.0, 1.0));
        assert!(time_loss(0.0, 1.0) > time_loss(1.0, 1.0));
        // golden-section search for the minimizer at r = 0.25
        let f = |x: f64| time_loss(x, 0.25);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        assert!(((lo + hi) / 2.0 - (-1.0986122886681098)).abs() < 1e-6);
    }

    #[test]
    fn status_loss_examples() {
        assert!((status_loss(&[0.0; 3], ResponseStatus::Incomplete) - 3f64.ln()).abs() < 1e-12);
        assert!(status_loss(&[10.0, 0.0, 0.0], ResponseStatus::Correct) < 1e-4);
    }

    #[test]
    fn batched_loss_matches_per_event_oracle() {
        let (store, model, heads) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seqs: Vec<EventSeq> = [3, 1, 5].iter().map(|&l| random_seq(&mut rng, l)).collect();
        let cfg = only(true, true, true, true);
        let got = batch_loss(&store, &model, &heads, &seqs, &cfg);

        let mut sum = 0.0;
        let mut n = 0.0;
        for seq in &seqs {
            let lat = model.encode(&store, seq).unwrap();
            let r = time_ratio(&seq.stamps).unwrap();
            for t in 1..=seq.len() {
                let z = crate::model::predictive_context(&lat, t).unwrap();
                sum += event_type_loss(&heads.event_type.apply(&store, &z), seq.types[t - 1]);
                sum += time_loss(heads.time.apply(&store, &z)[0], r[t - 1]);
                sum += status_loss(&heads.status.apply(&store, &z), seq.statuses[t - 1]);
                sum += event_type_loss(&heads.question.as_ref().unwrap().apply(&store, &z), seq.questions[t - 1]);
                n += 1.0;
            }
        }
        assert!((got - sum / n).abs() < 1e-10, "{got} vs {}", sum / n);
    }

    #[test]
    fn single_event_time_only_is_boundary_bce() {
        let (store, model, heads) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(&mut rng, 1);
        let got = batch_loss(&store, &model, &heads, std::slice::from_ref(&seq), &only(false, true, false, false));
        let x = heads.time.apply(&store, &[0.0; 6])[0];
        assert!((got - time_loss(x, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn duplication_and_additivity() {
        let (store, model, heads) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let seqs: Vec<EventSeq> = [4, 2, 6].iter().map(|&l| random_seq(&mut rng, l)).collect();
        let all = only(true, true, true, false);
        let base = batch_loss(&store, &model, &heads, &seqs, &all);
        let doubled: Vec<EventSeq> = seqs.iter().chain(seqs.iter()).cloned().collect();
        assert!((base - batch_loss(&store, &model, &heads, &doubled, &all)).abs() < 1e-6);

        let singles = batch_loss(&store, &model, &heads, &seqs, &only(true, false, false, false))
            + batch_loss(&store, &model, &heads, &seqs, &only(false, true, false, false))
            + batch_loss(&store, &model, &heads, &seqs, &only(false, false, true, false));
        assert!((base - singles).abs() < 1e-6);

        let none = only(false, false, false, false);
        let refs: Vec<&EventSeq> = seqs.iter().collect();
        let mut g = Graph::inference();
        assert!(matches!(
            pretrain_loss(&mut g, &store, &model, &heads, &refs, &none),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn status_ablation_ignores_statuses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let config = EncoderConfig {
            event_dim: 3,
            question_dim: 2,
            hidden: 3,
            status_input: false,
            ..EncoderConfig::new(6, 4)
        };
        let model = ProcessModel::new(&mut store, config, &mut rng);
        let heads = PretrainHeads::new(&mut store, &config, false, &mut rng);
        let seqs: Vec<EventSeq> = [4, 2, 6].iter().map(|&l| random_seq(&mut rng, l)).collect();
        let mut permuted = seqs.clone();
        for s in &mut permuted {
            s.statuses.reverse();
            s.statuses.rotate_left(1);
        }
        let cfg = only(true, true, false, false);
        assert_eq!(
            batch_loss(&store, &model, &heads, &seqs, &cfg),
            batch_loss(&store, &model, &heads, &permuted, &cfg)
        );
    }

    #[test]
    fn composite_loss_gradient_matches_finite_differences() {
        let (mut store, model, heads) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let seqs: Vec<EventSeq> = [3, 1, 4].iter().map(|&l| random_seq(&mut rng, l)).collect();
        let refs: Vec<&EventSeq> = seqs.iter().collect();
        let cfg = only(true, true, true, true);
        let ids: Vec<ParamId> = store.ids().collect();
        let mut g = Graph::new(ParamMask::only(&ids));
        let (loss, _) = pretrain_loss(&mut g, &store, &model, &heads, &refs, &cfg).unwrap();
        let grads = g.backward(loss, 1.0);
        let h = 1e-5;
        for id in ids {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| ndarray::Array2::zeros(store.get(id).dim()));
            for k in 0..analytic.len() {
                let (r, c) = (k / analytic.ncols(), k % analytic.ncols());
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = batch_loss(&store, &model, &heads, &seqs, &cfg);
                store.get_mut(id)[[r, c]] = orig - h;
                let down = batch_loss(&store, &model, &heads, &seqs, &cfg);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                assert!(rel < 1e-3, "{} [{r},{c}]: {a} vs {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut store, model, heads) = tiny();
        let before = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train: Vec<EventSeq> = (0..10).map(|i| random_seq(&mut rng, 1 + i % 4)).collect();
        let cfg = PretrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        run_pretraining(&mut store, &model, &heads, &train, &train[..3], &cfg, &mut rng).unwrap();
        for id in store.ids() {
            assert_eq!(store.get(id), before.get(id));
        }
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let run = || {
            let (mut store, model, heads) = tiny();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let train: Vec<EventSeq> = (0..40).map(|i| random_seq(&mut rng, 2 + i % 6)).collect();
            let cfg = PretrainConfig {
                lr: 1e-2,
                epochs: 5,
                batch_size: 8,
                ..PretrainConfig::default()
            };
            run_pretraining(&mut store, &model, &heads, &train, &train[..8], &cfg, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        let t = a.history.totals("pretrain", "train");
        assert!(t.last().unwrap() < &t[0]);
        let v = a.history.totals("pretrain", "validation");
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_loss, min);
    }
}
