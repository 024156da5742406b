//! Event vectorization and the bidirectional LSTM process model.
//!
//! Batches are laid out time-major: row `t·B + b` of every stacked matrix is
//! time step `t` of sequence `b`. Shorter sequences are padded at the end; the
//! backward direction resets its state to zero on padded steps, so each
//! sequence sees exactly the states it would see on its own.

use ndarray::Array2;
use procbert_nn::{embedding_table, Graph, LstmCell, Mat, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::ingest::{NormalizedDataset, ProcEvent, ResponseStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_event_types: usize,
    pub n_questions: usize,
    pub event_dim: usize,
    pub question_dim: usize,
    pub hidden: usize,
    /// Feed the one-hot response status as input.
    pub status_input: bool,
}

impl EncoderConfig {
    pub fn new(n_event_types: usize, n_questions: usize) -> Self {
        Self {
            n_event_types,
            n_questions,
            event_dim: 16,
            question_dim: 16,
            hidden: 64,
            status_input: true,
        }
    }

    /// Width of one event vector.
    pub fn input_dim(&self) -> usize {
        self.event_dim + self.question_dim + if self.status_input { 3 } else { 0 } + 1
    }

    /// Width of a context vector `(h→, h←)`.
    pub fn context_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// One sequence ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSeq {
    pub types: Vec<usize>,
    pub questions: Vec<usize>,
    pub statuses: Vec<ResponseStatus>,
    /// Seconds since block start divided by the block limit.
    pub times: Vec<f64>,
    /// Raw seconds since test start.
    pub stamps: Vec<f64>,
}

impl EventSeq {
    pub fn from_events(events: &[ProcEvent], dataset: &NormalizedDataset) -> Self {
        let limit = dataset.block_time_limit;
        Self {
            types: events.iter().map(|e| e.a).collect(),
            questions: events.iter().map(|e| e.q).collect(),
            statuses: events.iter().map(|e| e.c).collect(),
            times: events
                .iter()
                .map(|e| ((e.m - dataset.time_origin(e.q)) / limit).clamp(0.0, 1.0))
                .collect(),
            stamps: events.iter().map(|e| e.m).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ProcessModel {
    pub config: EncoderConfig,
    pub emb_event: ParamId,
    pub emb_question: ParamId,
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// States of a batch, one `B × H` node per time step and direction.
#[derive(Debug, Clone)]
pub struct BatchStates {
    pub batch: usize,
    pub steps: usize,
    pub hidden: usize,
    pub lengths: Vec<usize>,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

/// Latent states of one sequence. `forward` row `t` is h→_t for `t ∈ 0..=T`
/// (row 0 is the zero boundary); `backward` row `t` is h←_t for `t ∈ 1..=T+1`
/// (row `T+1` is the zero boundary, row 0 is unused and zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStates {
    pub forward: Mat,
    pub backward: Mat,
}

impl LatentStates {
    pub fn len(&self) -> usize {
        self.forward.nrows() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden(&self) -> usize {
        self.forward.ncols()
    }
}

impl ProcessModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Self {
        let emb_event = embedding_table(store, "encoder.emb_event", config.n_event_types, config.event_dim, rng);
        let emb_question =
            embedding_table(store, "encoder.emb_question", config.n_questions, config.question_dim, rng);
        let input = config.input_dim();
        let forward = LstmCell::new(store, "encoder.forward", input, config.hidden, rng);
        let backward = LstmCell::new(store, "encoder.backward", input, config.hidden, rng);
        Self {
            config,
            emb_event,
            emb_question,
            forward,
            backward,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb_event, self.emb_question];
        ids.extend(self.forward.params());
        ids.extend(self.backward.params());
        ids
    }

    fn check(&self, seq: &EventSeq) -> Result<()> {
        if seq.is_empty() {
            return Err(contract("cannot encode an empty sequence"));
        }
        let n = seq.len();
        if seq.questions.len() != n || seq.statuses.len() != n || seq.times.len() != n {
            return Err(contract("event sequence fields have different lengths"));
        }
        if let Some(a) = seq.types.iter().find(|&&a| a >= self.config.n_event_types) {
            return Err(contract(format!(
                "event type index {a} outside vocabulary of {}",
                self.config.n_event_types
            )));
        }
        if let Some(q) = seq.questions.iter().find(|&&q| q >= self.config.n_questions) {
            return Err(contract(format!(
                "question index {q} outside vocabulary of {}",
                self.config.n_questions
            )));
        }
        Ok(())
    }

    /// Event vectors for a batch, stacked time-major (`T·B × E`). Padding rows use
    /// index 0 and zero features.
    pub fn embed_batch(&self, g: &mut Graph, store: &ParamStore, batch: &[&EventSeq]) -> Result<Var> {
        if batch.is_empty() {
            return Err(contract("empty batch"));
        }
        for seq in batch {
            self.check(seq)?;
        }
        let b = batch.len();
        let steps = batch.iter().map(|s| s.len()).max().unwrap_or(0);
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
        let table_a = g.param(store, self.emb_event);
        let table_q = g.param(store, self.emb_question);
        let ea = g.gather_rows(table_a, &types);
        let eq = g.gather_rows(table_q, &questions);
        let time = g.constant(time);
        let parts = if self.config.status_input {
            let status = g.constant(status);
            vec![ea, eq, status, time]
        } else {
            vec![ea, eq, time]
        };
        Ok(g.concat_cols(&parts))
    }

    pub fn encode_batch(&self, g: &mut Graph, store: &ParamStore, batch: &[&EventSeq]) -> Result<BatchStates> {
        let x = self.embed_batch(g, store, batch)?;
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let h = self.config.hidden;
        let masks: Vec<Option<Var>> = (0..steps)
            .map(|t| {
                if lengths.iter().all(|&l| t < l) {
                    None
                } else {
                    let m = Array2::from_shape_fn((b, 1), |(j, _)| if t < lengths[j] { 1.0 } else { 0.0 });
                    Some(g.constant(m))
                }
            })
            .collect();

        let fwd_cell = self.forward.bind(g, store);
        let proj = fwd_cell.project(g, x);
        let mut hs = g.zeros(b, h);
        let mut cs = g.zeros(b, h);
        let mut forward = Vec::with_capacity(steps);
        for (t, mask) in masks.iter().enumerate() {
            let p = g.slice_rows(proj, t * b, b);
            let (mut hn, mut cn) = fwd_cell.step(g, p, hs, cs);
            if let Some(m) = mask {
                hn = g.mul_col(hn, *m);
                cn = g.mul_col(cn, *m);
            }
            forward.push(hn);
            hs = hn;
            cs = cn;
        }

        let bwd_cell = self.backward.bind(g, store);
        let proj = bwd_cell.project(g, x);
        let mut hs = g.zeros(b, h);
        let mut cs = g.zeros(b, h);
        let mut backward = vec![hs; steps];
        for t in (0..steps).rev() {
            let p = g.slice_rows(proj, t * b, b);
            let (mut hn, mut cn) = bwd_cell.step(g, p, hs, cs);
            if let Some(m) = masks[t] {
                hn = g.mul_col(hn, m);
                cn = g.mul_col(cn, m);
            }
            backward[t] = hn;
            hs = hn;
            cs = cn;
        }

        Ok(BatchStates {
            batch: b,
            steps,
            hidden: h,
            lengths,
            forward,
            backward,
        })
    }

    /// Event vectors of one sequence (`T × E`).
    pub fn embed(&self, store: &ParamStore, seq: &EventSeq) -> Result<Mat> {
        let mut g = Graph::inference();
        let x = self.embed_batch(&mut g, store, &[seq])?;
        Ok(g.value(x).clone())
    }

    pub fn encode(&self, store: &ParamStore, seq: &EventSeq) -> Result<LatentStates> {
        let mut g = Graph::inference();
        let states = self.encode_batch(&mut g, store, &[seq])?;
        Ok(states.latents(&g, 0))
    }
}

impl BatchStates {
    /// 1 on real time steps, 0 on padding, in time-major row order.
    pub fn token_mask(&self) -> Vec<f64> {
        let mut mask = vec![0.0; self.steps * self.batch];
        for (j, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                mask[t * self.batch + j] = 1.0;
            }
        }
        mask
    }

    /// `z_t = (h→_{t−1}, h←_{t+1})`, zero at the boundaries (`T·B × 2H`).
    pub fn predictive_contexts(&self, g: &mut Graph) -> Var {
        let zero = g.zeros(self.batch, self.hidden);
        let mut left = vec![zero];
        left.extend_from_slice(&self.forward[..self.steps - 1]);
        let mut right = self.backward[1..].to_vec();
        right.push(zero);
        let left = g.concat_rows(&left);
        let right = g.concat_rows(&right);
        g.concat_cols(&[left, right])
    }

    /// `z_t = (h→_t, h←_t)` (`T·B × 2H`).
    pub fn transfer_contexts(&self, g: &mut Graph) -> Var {
        let f = g.concat_rows(&self.forward);
        let b = g.concat_rows(&self.backward);
        g.concat_cols(&[f, b])
    }

    /// `(h→_T, h←_1)` per sequence (`B × 2H`).
    pub fn final_states(&self, g: &mut Graph) -> Var {
        let stacked = g.concat_rows(&self.forward);
        let idx: Vec<usize> = self
            .lengths
            .iter()
            .enumerate()
            .map(|(j, &len)| (len - 1) * self.batch + j)
            .collect();
        let last = g.gather_rows(stacked, &idx);
        g.concat_cols(&[last, self.backward[0]])
    }

    /// Extract the states of sequence `j` with boundary rows attached.
    pub fn latents(&self, g: &Graph, j: usize) -> LatentStates {
        let len = self.lengths[j];
        let h = self.hidden;
        let mut forward = Array2::zeros((len + 1, h));
        let mut backward = Array2::zeros((len + 2, h));
        for t in 0..len {
            forward.row_mut(t + 1).assign(&g.value(self.forward[t]).row(j));
            backward.row_mut(t + 1).assign(&g.value(self.backward[t]).row(j));
        }
        LatentStates { forward, backward }
    }
}

/// `(h→_{t−1}, h←_{t+1})` for 1-based `t`.
pub fn predictive_context(latents: &LatentStates, t: usize) -> Result<Vec<f64>> {
    let len = latents.len();
    if t == 0 || t > len {
        return Err(contract(format!("time step {t} outside 1..={len}")));
    }
    let mut z = latents.forward.row(t - 1).to_vec();
    z.extend(latents.backward.row(t + 1).iter());
    Ok(z)
}

/// `(h→_t, h←_t)` for 1-based `t`.
pub fn transfer_context(latents: &LatentStates, t: usize) -> Result<Vec<f64>> {
    let len = latents.len();
    if t == 0 || t > len {
        return Err(contract(format!("time step {t} outside 1..={len}")));
    }
    let mut z = latents.forward.row(t).to_vec();
    z.extend(latents.backward.row(t).iter());
    Ok(z)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn small_model(status_input: bool) -> (ParamStore, ProcessModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let config = EncoderConfig {
            event_dim: 4,
            question_dim: 3,
            hidden: 5,
            status_input,
            ..EncoderConfig::new(6, 4)
        };
        let model = ProcessModel::new(&mut store, config, &mut rng);
        (store, model)
    }

    pub fn random_seq<R: Rng>(rng: &mut R, len: usize) -> EventSeq {
        let q = rng.random_range(0..4);
        let mut t = 0.0;
        let mut stamps = Vec::new();
        for _ in 0..len {
            t += rng.random::<f64>() * 5.0;
            stamps.push(t);
        }
        EventSeq {
            types: (0..len).map(|_| rng.random_range(0..6)).collect(),
            questions: vec![q; len],
            statuses: (0..len)
                .map(|_| ResponseStatus::from_index(rng.random_range(0..3)).unwrap())
                .collect(),
            times: stamps.iter().map(|s| s / 1800.0).collect(),
            stamps,
        }
    }

    #[test]
    fn embed_shapes_and_status_dims() {
        let (store, model) = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = random_seq(&mut rng, 1);
        let x = model.embed(&store, &seq).unwrap();
        assert_eq!(x.dim(), (1, 4 + 3 + 3 + 1));

        let mut a = random_seq(&mut rng, 2);
        a.types[1] = a.types[0];
        a.questions[1] = a.questions[0];
        a.times[1] = a.times[0];
        a.statuses = vec![ResponseStatus::Correct, ResponseStatus::Incomplete];
        let x = model.embed(&store, &a).unwrap();
        for c in 0..x.ncols() {
            let differs = x[[0, c]] != x[[1, c]];
            assert_eq!(differs, (7..10).contains(&c) && c != 8, "column {c}");
        }

        let (store2, ablated) = small_model(false);
        let x2 = ablated.embed(&store2, &seq).unwrap();
        assert_eq!(x2.ncols() + 3, 11);
    }

    #[test]
    fn out_of_vocabulary_and_empty_rejected() {
        let (store, model) = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seq = random_seq(&mut rng, 3);
        seq.types[1] = 6;
        assert!(model.embed(&store, &seq).is_err());
        let empty = EventSeq {
            types: vec![],
            questions: vec![],
            statuses: vec![],
            times: vec![],
            stamps: vec![],
        };
        assert!(model.encode(&store, &empty).is_err());
    }

    #[test]
    fn boundaries_are_zero() {
        let (store, model) = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in [1, 3, 7] {
            let lat = model.encode(&store, &random_seq(&mut rng, len)).unwrap();
            assert!(lat.forward.row(0).iter().all(|&x| x == 0.0));
            assert!(lat.backward.row(len + 1).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn predictive_context_boundaries() {
        let (store, model) = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = model.encode(&store, &random_seq(&mut rng, 1)).unwrap();
        assert!(predictive_context(&lat, 1).unwrap().iter().all(|&x| x == 0.0));

        let lat = model.encode(&store, &random_seq(&mut rng, 3)).unwrap();
        let z1 = predictive_context(&lat, 1).unwrap();
        assert!(z1[..5].iter().all(|&x| x == 0.0));
        assert!(z1[5..].iter().any(|&x| x != 0.0));
        let z3 = predictive_context(&lat, 3).unwrap();
        assert!(z3[5..].iter().all(|&x| x == 0.0));
        assert!(predictive_context(&lat, 0).is_err());
        assert!(predictive_context(&lat, 4).is_err());
    }

    #[test]
    fn causality_under_perturbation() {
        let (store, model) = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = random_seq(&mut rng, 5);
        let base = model.encode(&store, &seq).unwrap();

        let mut last = seq.clone();
        last.types[4] = (last.types[4] + 1) % 6;
        let lat = model.encode(&store, &last).unwrap();
        assert_eq!(base.forward.slice(ndarray::s![..5, ..]), lat.forward.slice(ndarray::s![..5, ..]));
        assert_ne!(base.forward.row(5), lat.forward.row(5));

        let mut first = seq.clone();
        first.times[0] += 0.1;
        let lat = model.encode(&store, &first).unwrap();
        assert_eq!(base.backward.slice(ndarray::s![2.., ..]), lat.backward.slice(ndarray::s![2.., ..]));
        assert_ne!(base.backward.row(1), lat.backward.row(1));
    }

    #[test]
    fn padded_batch_matches_single() {
        let (store, model) = small_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seqs: Vec<EventSeq> = [4, 1, 7, 3].iter().map(|&l| random_seq(&mut rng, l)).collect();
        let refs: Vec<&EventSeq> = seqs.iter().collect();
        let mut g = Graph::inference();
        let states = model.encode_batch(&mut g, &store, &refs).unwrap();
        for (j, seq) in seqs.iter().enumerate() {
            let single = model.encode(&store, seq).unwrap();
            let batched = states.latents(&g, j);
            let diff = (&single.forward - &batched.forward)
                .iter()
                .chain((&single.backward - &batched.backward).iter())
                .fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-5, "sequence {j}: {diff}");
        }
    }
}
