//! Sequence-autoencoder baseline: an LSTM encoder whose final hidden state is
//! the bottleneck, and an LSTM decoder that reconstructs event types and time
//! ratios from it. Bottlenecks go through the same student assembly and head
//! as the main model.

use ndarray::Array2;
use procbert_nn::{embedding_table, Adam, AdamConfig, Graph, Linear, LstmCell, ParamId, ParamMask, ParamStore, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::EventSeq;
use crate::pretrain::time_ratio;
use crate::train::{check_finite, eval_batches, length_batches, BestTracker, History, LossRecord};
use crate::transfer::{Downstream, StudentInput, TransferConfig, TransferHead};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub n_event_types: usize,
    pub n_questions: usize,
    pub event_dim: usize,
    pub question_dim: usize,
    /// Bottleneck width.
    pub bottleneck: usize,
    pub status_input: bool,
}

impl AeConfig {
    /// Bottleneck matched to a bidirectional encoder with `hidden` units per direction.
    pub fn new(n_event_types: usize, n_questions: usize, hidden: usize) -> Self {
        Self {
            n_event_types,
            n_questions,
            event_dim: 16,
            question_dim: 16,
            bottleneck: 2 * hidden,
            status_input: true,
        }
    }

    fn input_dim(&self) -> usize {
        self.event_dim + self.question_dim + if self.status_input { 3 } else { 0 } + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Feed the true previous token to the decoder during training.
    pub teacher_forcing: bool,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            teacher_forcing: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub emb_event: ParamId,
    pub emb_question: ParamId,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub out_type: Linear,
    pub out_time: Linear,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: AeConfig, rng: &mut R) -> Self {
        let emb_event = embedding_table(store, "ae.emb_event", config.n_event_types, config.event_dim, rng);
        let emb_question = embedding_table(store, "ae.emb_question", config.n_questions, config.question_dim, rng);
        let encoder = LstmCell::new(store, "ae.encoder", config.input_dim(), config.bottleneck, rng);
        let decoder = LstmCell::new(store, "ae.decoder", config.event_dim + 1, config.bottleneck, rng);
        let out_type = Linear::new(store, "ae.out_type", config.bottleneck, config.n_event_types, true, rng);
        let out_time = Linear::new(store, "ae.out_time", config.bottleneck, 1, true, rng);
        Self {
            config,
            emb_event,
            emb_question,
            encoder,
            decoder,
            out_type,
            out_time,
        }
    }

    /// Parameters that produce the bottleneck.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb_event, self.emb_question];
        ids.extend(self.encoder.params());
        ids
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_params();
        ids.extend(self.decoder.params());
        ids.extend(self.out_type.params());
        ids.extend(self.out_time.params());
        ids
    }

    fn check(&self, seq: &EventSeq) -> Result<()> {
        if seq.is_empty() {
            return Err(contract("cannot encode an empty sequence"));
        }
        if seq.types.iter().any(|&a| a >= self.config.n_event_types)
            || seq.questions.iter().any(|&q| q >= self.config.n_questions)
        {
            return Err(contract("event or question index outside the vocabulary"));
        }
        Ok(())
    }

    /// `B × bottleneck` final encoder states.
    pub fn encode_batch(&self, g: &mut Graph, store: &ParamStore, batch: &[&EventSeq]) -> Result<Var> {
        if batch.is_empty() {
            return Err(contract("empty batch"));
        }
        for s in batch {
            self.check(s)?;
        }
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let rows = steps * b;
        let mut types = vec![0; rows];
        let mut questions = vec![0; rows];
        let mut status = Array2::zeros((rows, 3));
        let mut time = Array2::zeros((rows, 1));
        for (j, seq) in batch.iter().enumerate() {
            for t in 0..seq.len() {
                let r = t * b + j;
                types[r] = seq.types[t];
                questions[r] = seq.questions[t];
                status[[r, seq.statuses[t].index()]] = 1.0;
                time[[r, 0]] = seq.times[t];
            }
        }
        let ta = g.param(store, self.emb_event);
        let tq = g.param(store, self.emb_question);
        let ea = g.gather_rows(ta, &types);
        let eq = g.gather_rows(tq, &questions);
        let time = g.constant(time);
        let x = if self.config.status_input {
            let status = g.constant(status);
            g.concat_cols(&[ea, eq, status, time])
        } else {
            g.concat_cols(&[ea, eq, time])
        };
        let cell = self.encoder.bind(g, store);
        let proj = cell.project(g, x);
        let mut h = g.zeros(b, self.config.bottleneck);
        let mut c = g.zeros(b, self.config.bottleneck);
        for t in 0..steps {
            let p = g.slice_rows(proj, t * b, b);
            let (hn, cn) = cell.step(g, p, h, c);
            if lengths.iter().all(|&l| t < l) {
                h = hn;
                c = cn;
            } else {
                // finished sequences keep their last state
                let m = g.constant(Array2::from_shape_fn((b, 1), |(j, _)| if t < lengths[j] { 1.0 } else { 0.0 }));
                let dh = g.sub(hn, h);
                let dh = g.mul_col(dh, m);
                h = g.add(h, dh);
                let dc = g.sub(cn, c);
                let dc = g.mul_col(dc, m);
                c = g.add(c, dc);
            }
        }
        Ok(h)
    }

    /// Reconstruction loss per real time step (event-type CE plus time-ratio BCE).
    /// With `teacher_forcing` the decoder reads the true previous token; without
    /// it, its own previous prediction.
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&EventSeq],
        teacher_forcing: bool,
    ) -> Result<(Var, f64, f64)> {
        let bottleneck = self.encode_batch(g, store, batch)?;
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let tokens: usize = lengths.iter().sum();
        let ratios: Vec<Vec<f64>> = batch.iter().map(|s| time_ratio(&s.stamps)).collect::<Result<_>>()?;

        let table = g.param(store, self.emb_event);
        let cell = self.decoder.bind(g, store);
        let mut h = bottleneck;
        let mut c = g.zeros(b, self.config.bottleneck);
        let mut prev_emb = g.zeros(b, self.config.event_dim);
        let mut prev_time = g.zeros(b, 1);
        let all_ones = Array2::from_elem((b, self.config.n_event_types), 1.0);
        let mut ce_terms = Vec::with_capacity(steps);
        let mut bce_terms = Vec::with_capacity(steps);
        for t in 0..steps {
            let input = g.concat_cols(&[prev_emb, prev_time]);
            let p = cell.project(g, input);
            let (hn, cn) = cell.step(g, p, h, c);
            h = hn;
            c = cn;
            let logits = self.out_type.forward(g, store, h);
            let time_logit = self.out_time.forward(g, store, h);
            let targets: Vec<usize> = batch.iter().map(|s| if t < s.len() { s.types[t] } else { 0 }).collect();
            let weights: Vec<f64> = lengths
                .iter()
                .map(|&l| if t < l { 1.0 / tokens as f64 } else { 0.0 })
                .collect();
            let r = Array2::from_shape_fn((b, 1), |(j, _)| ratios[j].get(t).copied().unwrap_or(0.0));
            let w = Array2::from_shape_vec((b, 1), weights.clone()).expect("column");
            ce_terms.push(g.softmax_cross_entropy(logits, &targets, &weights));
            bce_terms.push(g.bce_with_logits(time_logit, &r, &w));
            if t + 1 < steps {
                if teacher_forcing {
                    prev_emb = g.gather_rows(table, &targets);
                    prev_time = g.constant(r);
                } else {
                    let probs = g.masked_softmax_rows(logits, &all_ones);
                    prev_emb = g.matmul(probs, table);
                    prev_time = g.sigmoid(time_logit);
                }
            }
        }
        let mut ce = ce_terms[0];
        for &x in &ce_terms[1..] {
            ce = g.add(ce, x);
        }
        let mut bce = bce_terms[0];
        for &x in &bce_terms[1..] {
            bce = g.add(bce, x);
        }
        let (ce_v, bce_v) = (g.scalar(ce), g.scalar(bce));
        Ok((g.add(ce, bce), ce_v, bce_v))
    }

    pub fn encode(&self, store: &ParamStore, seq: &EventSeq) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let h = self.encode_batch(&mut g, store, &[seq])?;
        Ok(g.value(h).iter().copied().collect())
    }
}

/// Bottleneck of one sequence.
pub fn ae_encode(store: &ParamStore, model: &Autoencoder, seq: &EventSeq) -> Result<Vec<f64>> {
    model.encode(store, seq)
}

/// Mean reconstruction loss over a set, decoder fed its own predictions.
pub fn evaluate_reconstruction(store: &ParamStore, model: &Autoencoder, seqs: &[EventSeq], batch_size: usize) -> Result<(f64, f64, f64)> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let total: usize = lengths.iter().sum();
    let (mut sum, mut ce, mut bce) = (0.0, 0.0, 0.0);
    for idx in eval_batches(&lengths, batch_size) {
        let batch: Vec<&EventSeq> = idx.iter().map(|&i| &seqs[i]).collect();
        let w = idx.iter().map(|&i| lengths[i]).sum::<usize>() as f64 / total as f64;
        let mut g = Graph::inference();
        let (l, c, b) = model.reconstruction_loss(&mut g, store, &batch, false)?;
        sum += w * g.scalar(l);
        ce += w * c;
        bce += w * b;
    }
    Ok((sum, ce, bce))
}

#[derive(Debug, Clone)]
pub struct AeOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Train on reconstruction, keeping the epoch with the lowest validation loss.
pub fn ae_train<R: Rng>(
    store: &mut ParamStore,
    model: &Autoencoder,
    train: &[EventSeq],
    validation: &[EventSeq],
    config: &AeTrainConfig,
    rng: &mut R,
) -> Result<AeOutcome> {
    const PHASE: &str = "autoencoder";
    if train.is_empty() {
        return Err(Error::Data("no sequences to train the autoencoder on".into()));
    }
    let record = |epoch: usize, split: &str, (total, ce, bce): (f64, f64, f64)| LossRecord {
        phase: PHASE.into(),
        epoch,
        split: split.into(),
        components: vec![("event_type".into(), Some(ce)), ("time".into(), Some(bce))],
        total,
    };
    let selection = if validation.is_empty() { train } else { validation };
    let mut history = History::default();
    let initial = evaluate_reconstruction(store, model, selection, config.batch_size)?;
    history.push(record(0, "validation", initial));
    check_finite(initial.0, PHASE, 0)?;
    let params = model.params();
    let mut best = BestTracker::new(store, &params, initial.0);
    let mask = ParamMask::only(&params);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        store,
        &params,
    );
    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let total: usize = lengths.iter().sum();
    for epoch in 1..=config.epochs {
        let mut running = (0.0, 0.0, 0.0);
        for idx in length_batches(&lengths, config.batch_size, rng) {
            let batch: Vec<&EventSeq> = idx.iter().map(|&i| &train[i]).collect();
            let w = idx.iter().map(|&i| lengths[i]).sum::<usize>() as f64 / total as f64;
            let mut g = Graph::new(mask.clone());
            let (loss, ce, bce) = model.reconstruction_loss(&mut g, store, &batch, config.teacher_forcing)?;
            let value = g.scalar(loss);
            check_finite(value, PHASE, epoch)?;
            running.0 += w * value;
            running.1 += w * ce;
            running.2 += w * bce;
            let grads = g.backward(loss, 1.0);
            adam.step(store, &grads);
        }
        history.push(record(epoch, "train", running));
        let v = evaluate_reconstruction(store, model, selection, config.batch_size)?;
        check_finite(v.0, PHASE, epoch)?;
        history.push(record(epoch, "validation", v));
        best.observe(store, epoch, v.0);
    }
    best.restore(store);
    Ok(AeOutcome {
        history,
        best_epoch: best.best_epoch,
        best_loss: best.best_loss,
    })
}

/// Bottlenecks assembled per student and passed through the transfer head.
#[derive(Debug, Clone)]
pub struct AeTransferModel {
    pub ae: Autoencoder,
    pub head: TransferHead,
    pub n_slots: usize,
}

impl AeTransferModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        ae: Autoencoder,
        n_slots: usize,
        outputs: usize,
        config: &TransferConfig,
        rng: &mut R,
    ) -> Self {
        let head = TransferHead::new(
            store,
            "ae_transfer.head",
            n_slots * ae.config.bottleneck,
            config.head_hidden,
            outputs,
            config.dropout,
            rng,
        );
        Self { ae, head, n_slots }
    }

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
            return Ok(g.zeros(batch.len(), self.n_slots * self.ae.config.bottleneck));
        }
        let h = self.ae.encode_batch(g, store, &seqs)?;
        Ok(g.scatter_blocks(h, &targets, batch.len(), self.n_slots))
    }
}

impl Downstream for AeTransferModel {
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
        self.head.params()
    }

    fn encoder_params(&self) -> Vec<ParamId> {
        self.ae.encoder_params()
    }

    fn size(input: &StudentInput) -> usize {
        input.sequences.iter().map(|(_, s)| s.len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_seq;
    use crate::transfer::{predict, train_transfer_frozen, Labelled};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> (ParamStore, Autoencoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = AeConfig {
            event_dim: 3,
            question_dim: 2,
            ..AeConfig::new(6, 4, 3)
        };
        let model = Autoencoder::new(&mut store, config, &mut rng);
        (store, model)
    }

    #[test]
    fn bottleneck_shape_and_determinism() {
        let (store, model) = tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in [1, 5, 50] {
            let seq = random_seq(&mut rng, len);
            let a = ae_encode(&store, &model, &seq).unwrap();
            assert_eq!(a.len(), 6);
            assert_eq!(a, ae_encode(&store, &model, &seq.clone()).unwrap());
        }
        let seq = random_seq(&mut rng, 4);
        let mut changed = seq.clone();
        changed.types[3] = (changed.types[3] + 1) % 6;
        assert_ne!(ae_encode(&store, &model, &seq).unwrap(), ae_encode(&store, &model, &changed).unwrap());
        let empty = EventSeq {
            types: vec![],
            questions: vec![],
            statuses: vec![],
            times: vec![],
            stamps: vec![],
        };
        assert!(ae_encode(&store, &model, &empty).is_err());
    }

    #[test]
    fn padded_batch_keeps_final_states() {
        let (store, model) = tiny(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<EventSeq> = [2, 6, 1].iter().map(|&l| random_seq(&mut rng, l)).collect();
        let refs: Vec<&EventSeq> = seqs.iter().collect();
        let mut g = Graph::inference();
        let h = model.encode_batch(&mut g, &store, &refs).unwrap();
        for (j, s) in seqs.iter().enumerate() {
            let single = model.encode(&store, s).unwrap();
            for (c, v) in single.iter().enumerate() {
                assert!((g.value(h)[[j, c]] - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decoder_without_teacher_forcing_ignores_later_truth() {
        // changing a target at position t leaves the loss terms before t untouched
        let (store, model) = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = random_seq(&mut rng, 4);
        let run = |s: &EventSeq, tf: bool| {
            let mut g = Graph::inference();
            let (_, ce, _) = model.reconstruction_loss(&mut g, &store, &[s], tf).unwrap();
            ce
        };
        // free-running decoding depends on the input only through the bottleneck
        let mut other = seq.clone();
        other.types[2] = (other.types[2] + 1) % 6;
        let a = run(&seq, false);
        let b = run(&other, false);
        assert_ne!(a, b);
        let a_tf = run(&seq, true);
        assert_ne!(a, a_tf);
    }

    #[test]
    fn training_reduces_reconstruction_and_zero_lr_is_inert() {
        let run = |lr: f64| {
            let (mut store, model) = tiny(7);
            let before = store.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let train: Vec<EventSeq> = (0..40).map(|i| random_seq(&mut rng, 2 + i % 5)).collect();
            let config = AeTrainConfig {
                epochs: 6,
                batch_size: 8,
                lr,
                teacher_forcing: true,
            };
            let out = ae_train(&mut store, &model, &train, &train[..10], &config, &mut rng).unwrap();
            (out, store, before)
        };
        let (out, _, _) = run(1e-2);
        let v = out.history.totals("autoencoder", "validation");
        assert!(out.best_loss < v[0]);
        let (again, _, _) = run(1e-2);
        assert_eq!(out.history, again.history);
        let (_, store, before) = run(0.0);
        for id in store.ids() {
            assert_eq!(store.get(id), before.get(id));
        }
    }

    #[test]
    fn transfer_on_bottlenecks() {
        let (mut store, ae) = tiny(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let config = TransferConfig {
            head_hidden: 8,
            epochs: 3,
            batch_size: 4,
            ..TransferConfig::default()
        };
        let model = AeTransferModel::new(&mut store, ae, 3, 2, &config, &mut rng);
        let inputs: Vec<StudentInput> = (0..8)
            .map(|i| StudentInput {
                sequences: (0..3).filter(|s| (i + s) % 3 != 0).map(|s| (s, random_seq(&mut rng, 3))).collect(),
            })
            .collect();
        let labels: Vec<Vec<f64>> = (0..8).map(|i| vec![(i % 2) as f64, 1.0]).collect();
        let out = predict(&store, &model, &inputs, 3).unwrap();
        assert!(out.iter().all(|r| r.len() == 2));
        let mut g = Graph::inference();
        let v = model.student_vectors(&mut g, &store, &[&inputs[0]]).unwrap();
        // student 0 skips slot 0
        assert!(g.value(v).row(0).iter().take(6).all(|&x| x == 0.0));
        let data = Labelled {
            inputs: &inputs,
            labels: &labels,
        };
        let enc = model.encoder_params();
        let fp = store.fingerprint(&enc);
        train_transfer_frozen(&mut store, &model, data, data, &config, &mut rng).unwrap();
        assert_eq!(store.fingerprint(&enc), fp);
    }
}
