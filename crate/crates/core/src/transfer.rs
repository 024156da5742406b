//! Transfer function: attention pooling of latent states into question-level
//! vectors, per-student assembly, and the prediction heads trained with the
//! freeze then fine-tune protocol. Also holds the student-level GRU variant.

use std::collections::BTreeMap;

use ndarray::Array2;
use procbert_nn::{Adam, AdamConfig, Graph, GruCell, Linear, Mat, ParamId, ParamMask, ParamStore, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::ingest::{Block, NormalizedDataset};
use crate::model::{EventSeq, ProcessModel};
use crate::train::{check_finite, length_batches, BestTracker, History, LossRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub head_hidden: usize,
    pub dropout: f64,
    /// Pool with attention; when off, use the final states `(h→_T, h←_1)`.
    pub attention: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr_scale: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            head_hidden: 256,
            dropout: 0.25,
            attention: true,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            finetune: true,
            finetune_epochs: 10,
            finetune_lr_scale: 0.1,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || self.head_hidden == 0 {
            return Err(Error::Config("batch size and head width must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.finetune_lr_scale >= 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `φ_w`: one score per latent state, no bias (a bias would cancel in the softmax).
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub score: Linear,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            score: Linear::new(store, &format!("{name}.attention"), width, 1, false, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.score.params()
    }

    /// Weights and pooled vector for one sequence of transfer contexts (`T × 2H`).
    pub fn apply(&self, store: &ParamStore, contexts: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        if contexts.nrows() == 0 {
            return Err(contract("attention over an empty sequence"));
        }
        let scores: Vec<f64> = contexts
            .outer_iter()
            .map(|z| self.score.apply(store, z.as_slice().expect("contiguous row"))[0])
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let weights: Vec<f64> = exp.iter().map(|e| e / total).collect();
        let mut pooled = vec![0.0; contexts.ncols()];
        for (w, z) in weights.iter().zip(contexts.outer_iter()) {
            for (p, v) in pooled.iter_mut().zip(z.iter()) {
                *p += w * v;
            }
        }
        Ok((weights, pooled))
    }
}

/// `φ_p`: `input → hidden → ReLU → dropout → output`.
#[derive(Debug, Clone)]
pub struct TransferHead {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl TransferHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, true, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, output, true, rng),
            dropout,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.params();
        ids.extend(self.output.params());
        ids
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, rng: Option<&mut dyn RngCore>) -> Var {
        let h = self.hidden.forward(g, store, x);
        let mut h = g.relu(h);
        if let Some(rng) = rng {
            if self.dropout > 0.0 {
                h = g.dropout(h, self.dropout, rng);
            }
        }
        self.output.forward(g, store, h)
    }
}

/// Pooled `N × 2H` vectors for a set of sequences, by attention or by final states.
pub fn pool_sequences(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &ProcessModel,
    pool: Option<&AttentionPool>,
    seqs: &[&EventSeq],
) -> Result<Var> {
    let states = encoder.encode_batch(g, store, seqs)?;
    let Some(pool) = pool else {
        return Ok(states.final_states(g));
    };
    let n = states.batch;
    let steps = states.steps;
    let z = states.transfer_contexts(g);
    let scores = pool.score.forward(g, store, z);
    let scores = g.reshape(scores, steps, n);
    let scores = g.transpose(scores);
    let mask = Array2::from_shape_fn((n, steps), |(j, t)| if t < states.lengths[j] { 1.0 } else { 0.0 });
    let w = g.masked_softmax_rows(scores, &mask);
    let w = g.transpose(w);
    let w = g.reshape(w, steps * n, 1);
    let weighted = g.mul_col(z, w);
    let mut pooled = g.slice_rows(weighted, 0, n);
    for t in 1..steps {
        let part = g.slice_rows(weighted, t * n, n);
        pooled = g.add(pooled, part);
    }
    Ok(pooled)
}

/// `[b_1, …, b_Q]` in `order`; unvisited questions are zero blocks.
pub fn assemble_student(pools: &BTreeMap<usize, Vec<f64>>, order: &[usize], width: usize) -> Result<Vec<f64>> {
    if let Some(q) = pools.keys().find(|q| !order.contains(q)) {
        return Err(contract(format!("pooled vector for question {q} outside the block")));
    }
    let mut out = vec![0.0; order.len() * width];
    for (slot, q) in order.iter().enumerate() {
        if let Some(b) = pools.get(q) {
            if b.len() != width {
                return Err(contract(format!("pooled vector of width {} (expected {width})", b.len())));
            }
            out[slot * width..(slot + 1) * width].copy_from_slice(b);
        }
    }
    Ok(out)
}

/// Sequences of one student on the ordered question set; `slot` indexes that order.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentInput {
    pub sequences: Vec<(usize, EventSeq)>,
}

pub fn student_inputs(dataset: &NormalizedDataset, students: &[usize], questions: &[usize]) -> Vec<StudentInput> {
    students
        .iter()
        .map(|&i| {
            let s = &dataset.students[i];
            let sequences = questions
                .iter()
                .enumerate()
                .filter_map(|(slot, &q)| {
                    let events = s.question_events(q);
                    (!events.is_empty()).then(|| (slot, EventSeq::from_events(&events, dataset)))
                })
                .collect();
            StudentInput { sequences }
        })
        .collect()
}

/// A model trained on per-student labels by the phase protocol.
pub trait Downstream {
    type Input;

    /// `B × outputs` logits; `rng` enables dropout.
    fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Self::Input],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var>;

    fn outputs(&self) -> usize;

    /// Parameters outside the process model.
    fn head_params(&self) -> Vec<ParamId>;

    fn encoder_params(&self) -> Vec<ParamId>;

    /// Work estimate used for batching similar inputs together.
    fn size(input: &Self::Input) -> usize;
}

#[derive(Debug, Clone)]
pub struct TransferModel {
    pub encoder: ProcessModel,
    pub pool: AttentionPool,
    pub head: TransferHead,
    pub n_slots: usize,
    pub attention: bool,
}

impl TransferModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        encoder: ProcessModel,
        n_slots: usize,
        outputs: usize,
        config: &TransferConfig,
        rng: &mut R,
    ) -> Self {
        let width = encoder.config.context_dim();
        let pool = AttentionPool::new(store, "transfer", width, rng);
        let head = TransferHead::new(
            store,
            "transfer.head",
            n_slots * width,
            config.head_hidden,
            outputs,
            config.dropout,
            rng,
        );
        Self {
            encoder,
            pool,
            head,
            n_slots,
            attention: config.attention,
        }
    }

    /// `B × Q·2H` student vectors on the tape.
    pub fn student_vectors(&self, g: &mut Graph, store: &ParamStore, batch: &[&StudentInput]) -> Result<Var> {
        let mut seqs = Vec::new();
        let mut targets = Vec::new();
        for (b, input) in batch.iter().enumerate() {
            for (slot, seq) in &input.sequences {
                if *slot >= self.n_slots {
                    return Err(contract(format!("question slot {slot} outside {} slots", self.n_slots)));
                }
                seqs.push(seq);
                targets.push((b, *slot));
            }
        }
        if seqs.is_empty() {
            return Ok(g.zeros(batch.len(), self.n_slots * self.encoder.config.context_dim()));
        }
        let pool = self.attention.then_some(&self.pool);
        let pooled = pool_sequences(g, store, &self.encoder, pool, &seqs)?;
        Ok(g.scatter_blocks(pooled, &targets, batch.len(), self.n_slots))
    }

    pub fn vector(&self, store: &ParamStore, input: &StudentInput) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let v = self.student_vectors(&mut g, store, &[input])?;
        Ok(g.value(v).iter().copied().collect())
    }

    /// `φ_p(b)` for a plain student vector.
    pub fn predict_label(&self, store: &ParamStore, vector: &[f64]) -> Result<Vec<f64>> {
        let width = self.n_slots * self.encoder.config.context_dim();
        if vector.len() != width {
            return Err(contract(format!("student vector of length {} (expected {width})", vector.len())));
        }
        let mut g = Graph::inference();
        let x = g.constant(Array2::from_shape_vec((1, width), vector.to_vec()).expect("row"));
        let y = self.head.forward(&mut g, store, x, None);
        Ok(g.value(y).iter().copied().collect())
    }
}

impl Downstream for TransferModel {
    type Input = StudentInput;

    fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&StudentInput],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let v = self.student_vectors(g, store, batch)?;
        Ok(self.head.forward(g, store, v, rng))
    }

    fn outputs(&self) -> usize {
        self.head.output.output
    }

    fn head_params(&self) -> Vec<ParamId> {
        let mut ids = if self.attention { self.pool.params() } else { Vec::new() };
        ids.extend(self.head.params());
        ids
    }

    fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    fn size(input: &StudentInput) -> usize {
        input.sequences.iter().map(|(_, s)| s.len()).max().unwrap_or(0)
    }
}

/// Logits for every input, in order.
pub fn predict<M: Downstream>(store: &ParamStore, model: &M, inputs: &[M::Input], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&M::Input> = chunk.iter().collect();
        let mut g = Graph::inference();
        let y = model.logits(&mut g, store, &refs, None)?;
        out.extend(g.value(y).outer_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

fn label_loss(g: &mut Graph, logits: Var, labels: &[&Vec<f64>]) -> Result<Var> {
    let (b, k) = g.value(logits).dim();
    if labels.iter().any(|l| l.len() != k) {
        return Err(contract(format!("labels do not match {k} outputs")));
    }
    let targets = Array2::from_shape_fn((b, k), |(i, j)| labels[i][j]);
    let weights = Array2::from_elem((b, k), 1.0 / (b * k) as f64);
    Ok(g.bce_with_logits(logits, &targets, &weights))
}

/// Mean BCE over a labelled set.
pub fn evaluate_loss<M: Downstream>(
    store: &ParamStore,
    model: &M,
    inputs: &[M::Input],
    labels: &[Vec<f64>],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, ys) in inputs.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let refs: Vec<&M::Input> = chunk.iter().collect();
        let ys: Vec<&Vec<f64>> = ys.iter().collect();
        let mut g = Graph::inference();
        let y = model.logits(&mut g, store, &refs, None)?;
        let l = label_loss(&mut g, y, &ys)?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / inputs.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseSpec<'a> {
    pub name: &'a str,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Labelled data for one split.
#[derive(Debug)]
pub struct Labelled<'a, I> {
    pub inputs: &'a [I],
    pub labels: &'a [Vec<f64>],
}

impl<I> Clone for Labelled<'_, I> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<I> Copy for Labelled<'_, I> {}

/// Train `trainable` on BCE, keeping the epoch with the lowest validation loss
/// (train loss when the validation split is empty).
pub fn train_phase<M: Downstream, R: Rng>(
    store: &mut ParamStore,
    model: &M,
    train: Labelled<'_, M::Input>,
    validation: Labelled<'_, M::Input>,
    trainable: &[ParamId],
    spec: PhaseSpec<'_>,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    if train.inputs.is_empty() || train.inputs.len() != train.labels.len() {
        return Err(Error::Data(format!(
            "{} phase needs matching non-empty inputs and labels",
            spec.name
        )));
    }
    let selection = if validation.inputs.is_empty() { train } else { validation };
    let record = |epoch: usize, split: &str, total: f64| LossRecord {
        phase: spec.name.to_string(),
        epoch,
        split: split.to_string(),
        components: vec![("bce".into(), Some(total))],
        total,
    };
    let mut history = History::default();
    let initial_train = evaluate_loss(store, model, train.inputs, train.labels, spec.batch_size)?;
    history.push(record(0, "train", initial_train));
    let initial = if validation.inputs.is_empty() {
        initial_train
    } else {
        let v = evaluate_loss(store, model, selection.inputs, selection.labels, spec.batch_size)?;
        history.push(record(0, "validation", v));
        v
    };
    check_finite(initial, spec.name, 0)?;
    let mut best = BestTracker::new(store, trainable, initial);
    let mask = ParamMask::only(trainable);
    let mut adam = Adam::new(
        AdamConfig {
            lr: spec.lr,
            ..AdamConfig::default()
        },
        store,
        trainable,
    );
    let sizes: Vec<usize> = train.inputs.iter().map(M::size).collect();
    for epoch in 1..=spec.epochs {
        let mut running = 0.0;
        for idx in length_batches(&sizes, spec.batch_size, rng) {
            let refs: Vec<&M::Input> = idx.iter().map(|&i| &train.inputs[i]).collect();
            let ys: Vec<&Vec<f64>> = idx.iter().map(|&i| &train.labels[i]).collect();
            let mut g = Graph::new(mask.clone());
            let y = model.logits(&mut g, store, &refs, Some(&mut *rng as &mut dyn RngCore))?;
            let loss = label_loss(&mut g, y, &ys)?;
            let value = g.scalar(loss);
            check_finite(value, spec.name, epoch)?;
            running += value * idx.len() as f64;
            let grads = g.backward(loss, 1.0);
            adam.step(store, &grads);
        }
        let train_loss = running / train.inputs.len() as f64;
        history.push(record(epoch, "train", train_loss));
        let sel = if validation.inputs.is_empty() {
            train_loss
        } else {
            let v = evaluate_loss(store, model, selection.inputs, selection.labels, spec.batch_size)?;
            history.push(record(epoch, "validation", v));
            v
        };
        check_finite(sel, spec.name, epoch)?;
        best.observe(store, epoch, sel);
    }
    best.restore(store);
    Ok(PhaseOutcome {
        history,
        best_epoch: best.best_epoch,
        best_loss: best.best_loss,
    })
}

/// Train pool and head on a frozen process model.
pub fn train_transfer_frozen<M: Downstream, R: Rng>(
    store: &mut ParamStore,
    model: &M,
    train: Labelled<'_, M::Input>,
    validation: Labelled<'_, M::Input>,
    config: &TransferConfig,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    config.validate()?;
    let spec = PhaseSpec {
        name: "transfer",
        epochs: config.epochs,
        lr: config.lr,
        batch_size: config.batch_size,
    };
    train_phase(store, model, train, validation, &model.head_params(), spec, rng)
}

/// Jointly update the process model and the transfer function. Returns `None`
/// without touching anything when fine-tuning is disabled.
pub fn fine_tune<M: Downstream, R: Rng>(
    store: &mut ParamStore,
    model: &M,
    train: Labelled<'_, M::Input>,
    validation: Labelled<'_, M::Input>,
    config: &TransferConfig,
    rng: &mut R,
) -> Result<Option<PhaseOutcome>> {
    if !config.finetune {
        return Ok(None);
    }
    config.validate()?;
    let mut params = model.encoder_params();
    params.extend(model.head_params());
    let spec = PhaseSpec {
        name: "finetune",
        epochs: config.finetune_epochs,
        lr: config.lr * config.finetune_lr_scale,
        batch_size: config.batch_size,
    };
    train_phase(store, model, train, validation, &params, spec, rng).map(Some)
}

/// `(h→_T, h←_1)` for one sequence.
pub fn ablation_final_state(store: &ParamStore, encoder: &ProcessModel, seq: &EventSeq) -> Result<Vec<f64>> {
    let lat = encoder.encode(store, seq)?;
    let t = lat.len();
    let mut out = lat.forward.row(t).to_vec();
    out.extend(lat.backward.row(1).iter());
    Ok(out)
}

/// Visits of one student in chronological order, each encoded on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitInput {
    pub visits: Vec<EventSeq>,
}

/// Visit sequences of `block`, ordered by first-event timestamp.
pub fn visit_inputs(dataset: &NormalizedDataset, students: &[usize], block: Block) -> Vec<VisitInput> {
    students
        .iter()
        .map(|&i| {
            let mut visits: Vec<EventSeq> = dataset.students[i]
                .visits
                .iter()
                .filter(|v| dataset.questions[v.question].block == block && !v.events.is_empty())
                .map(|v| EventSeq::from_events(&v.events, dataset))
                .collect();
            visits.sort_by(|a, b| a.stamps[0].total_cmp(&b.stamps[0]));
            VisitInput { visits }
        })
        .collect()
}

/// Attention-pooled visits fed in order to a GRU; its final state is the
/// student-level representation and a linear map of it is the label logit.
#[derive(Debug, Clone)]
pub struct StudentLevelModel {
    pub encoder: ProcessModel,
    pub pool: AttentionPool,
    pub gru: GruCell,
    pub output: Linear,
}

impl StudentLevelModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, encoder: ProcessModel, hidden: usize, rng: &mut R) -> Self {
        let width = encoder.config.context_dim();
        Self {
            pool: AttentionPool::new(store, "student_level", width, rng),
            gru: GruCell::new(store, "student_level.gru", width, hidden, rng),
            output: Linear::new(store, "student_level.output", hidden, 1, true, rng),
            encoder,
        }
    }

    /// GRU states after each visit step, `B × hidden` per step.
    pub fn states(&self, g: &mut Graph, store: &ParamStore, batch: &[&VisitInput]) -> Result<Vec<Var>> {
        if let Some(i) = batch.iter().position(|s| s.visits.is_empty()) {
            return Err(contract(format!("student {i} in batch has no visits")));
        }
        let b = batch.len();
        let mut seqs = Vec::new();
        let mut offsets = Vec::with_capacity(b);
        for input in batch {
            offsets.push(seqs.len());
            seqs.extend(input.visits.iter());
        }
        let pooled = pool_sequences(g, store, &self.encoder, Some(&self.pool), &seqs)?;
        let steps = batch.iter().map(|s| s.visits.len()).max().unwrap_or(0);
        let mut h = g.zeros(b, self.gru.hidden);
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let idx: Vec<usize> = (0..b)
                .map(|j| offsets[j] + k.min(batch[j].visits.len() - 1))
                .collect();
            let x = g.gather_rows(pooled, &idx);
            let stepped = self.gru.step(g, store, x, h);
            h = if batch.iter().all(|s| k < s.visits.len()) {
                stepped
            } else {
                let m = Array2::from_shape_fn((b, 1), |(j, _)| if k < batch[j].visits.len() { 1.0 } else { 0.0 });
                let m = g.constant(m);
                let diff = g.sub(stepped, h);
                let keep = g.mul_col(diff, m);
                g.add(h, keep)
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Final GRU state of each student.
    pub fn represent(&self, store: &ParamStore, inputs: &[VisitInput]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let refs: Vec<&VisitInput> = chunk.iter().collect();
            let mut g = Graph::inference();
            let states = self.states(&mut g, store, &refs)?;
            let last = *states.last().expect("non-empty");
            out.extend(g.value(last).outer_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

impl Downstream for StudentLevelModel {
    type Input = VisitInput;

    fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&VisitInput],
        _rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let states = self.states(g, store, batch)?;
        let last = *states.last().expect("non-empty");
        Ok(self.output.forward(g, store, last))
    }

    fn outputs(&self) -> usize {
        1
    }

    fn head_params(&self) -> Vec<ParamId> {
        let mut ids = self.pool.params();
        ids.extend(self.gru.params());
        ids.extend(self.output.params());
        ids
    }

    fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    fn size(input: &VisitInput) -> usize {
        input.visits.len()
    }
}
