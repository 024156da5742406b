//! Pieces shared by every training loop: batching, best-epoch snapshots and
//! loss histories.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use procbert_nn::{Mat, ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::Provenance;

/// One row of a loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    /// Named components; `None` for disabled ones.
    pub components: Vec<(String, Option<f64>)>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<LossRecord>,
}

impl History {
    pub fn push(&mut self, record: LossRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: History) {
        self.records.extend(other.records);
    }

    pub fn phases(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.phase) {
                out.push(r.phase.clone());
            }
        }
        out
    }

    /// Totals for one phase and split, in epoch order.
    pub fn totals(&self, phase: &str, split: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.phase == phase && r.split == split)
            .map(|r| r.total)
            .collect()
    }

    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.records {
            for (n, _) in &r.components {
                if !names.contains(&n.as_str()) {
                    names.push(n);
                }
            }
        }
        let mut out = format!("# {}\nphase,epoch,split", provenance.header());
        for n in &names {
            let _ = write!(out, ",{n}");
        }
        out.push_str(",total\n");
        for r in &self.records {
            let _ = write!(out, "{},{},{}", r.phase, r.epoch, r.split);
            for n in &names {
                match r.components.iter().find(|(k, _)| k == n).and_then(|(_, v)| *v) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{}", r.total);
        }
        out
    }

    pub fn write_csv(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv(provenance).as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Batches of similar-length items: sort by length with random tie-breaking,
/// chunk, then shuffle the chunk order.
pub fn length_batches<R: Rng + ?Sized>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut keyed: Vec<(usize, u64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, rng.random::<u64>(), i))
        .collect();
    keyed.sort_unstable();
    let mut batches: Vec<Vec<usize>> = keyed
        .chunks(batch_size)
        .map(|c| c.iter().map(|k| k.2).collect())
        .collect();
    batches.shuffle(rng);
    batches
}

/// Fixed-order batches for evaluation.
pub fn eval_batches(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

pub fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Mat> {
    ids.iter().map(|&id| store.get(id).clone()).collect()
}

pub fn restore(store: &mut ParamStore, ids: &[ParamId], values: &[Mat]) {
    for (&id, v) in ids.iter().zip(values) {
        store.set(id, v.clone());
    }
}

pub fn check_finite(value: f64, phase: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase: phase.to_string(),
            epoch,
            detail: format!("loss became {value}"),
        })
    }
}

/// Tracks the epoch with the lowest validation loss and its parameters.
#[derive(Debug, Clone)]
pub struct BestTracker {
    pub ids: Vec<ParamId>,
    pub best_loss: f64,
    pub best_epoch: usize,
    values: Vec<Mat>,
}

impl BestTracker {
    pub fn new(store: &ParamStore, ids: &[ParamId], loss: f64) -> Self {
        Self {
            ids: ids.to_vec(),
            best_loss: loss,
            best_epoch: 0,
            values: snapshot(store, ids),
        }
    }

    pub fn observe(&mut self, store: &ParamStore, epoch: usize, loss: f64) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.values = snapshot(store, &self.ids);
        }
    }

    pub fn restore(&self, store: &mut ParamStore) {
        restore(store, &self.ids, &self.values);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_partition_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lengths: Vec<usize> = (0..53).map(|i| (i * 7) % 11 + 1).collect();
        let batches = length_batches(&lengths, 8, &mut rng);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 8));
    }

    #[test]
    fn csv_leaves_disabled_components_empty() {
        let mut h = History::default();
        h.push(LossRecord {
            phase: "pretrain".into(),
            epoch: 0,
            split: "train".into(),
            components: vec![("a".into(), Some(1.5)), ("b".into(), None)],
            total: 1.5,
        });
        let csv = h.to_csv(&Provenance::new("abc", 4));
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].contains("abc"));
        assert_eq!(lines[1], "phase,epoch,split,a,b,total");
        assert_eq!(lines[2], "pretrain,0,train,1.5,,1.5");
    }
}
