//! Versioned JSON checkpoints: architecture, vocabulary hashes and tensors.

use std::path::Path;

use procbert_nn::{NamedTensor, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline_ae::{AeConfig, AeTransferModel, Autoencoder};
use crate::error::{Error, Result};
use crate::ingest::NormalizedDataset;
use crate::irt::{BehaviorNet, IrtTerms};
use crate::model::{EncoderConfig, ProcessModel};
use crate::pretrain::PretrainHeads;
use crate::provenance::Provenance;
use crate::transfer::{StudentLevelModel, TransferConfig, TransferModel};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Transfer-head settings needed to rebuild a head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub n_slots: usize,
    pub outputs: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub attention: bool,
}

impl HeadSpec {
    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            attention: self.attention,
            ..TransferConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Pretrained {
        encoder: EncoderConfig,
        with_question: bool,
    },
    Transfer {
        encoder: EncoderConfig,
        head: HeadSpec,
    },
    Behavior {
        encoder: EncoderConfig,
        head_hidden: usize,
        dropout: f64,
        n_students: usize,
    },
    StudentLevel {
        encoder: EncoderConfig,
        hidden: usize,
    },
    Autoencoder {
        ae: AeConfig,
        head: Option<HeadSpec>,
    },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Pretrained { .. } => "pretrained",
            Architecture::Transfer { .. } => "transfer",
            Architecture::Behavior { .. } => "behavior",
            Architecture::StudentLevel { .. } => "student_level",
            Architecture::Autoencoder { .. } => "autoencoder",
        }
    }
}

/// A rebuilt model with its parameters.
#[derive(Debug, Clone)]
pub enum Built {
    Pretrained(ProcessModel, PretrainHeads),
    Transfer(TransferModel),
    Behavior(BehaviorNet, IrtTerms),
    StudentLevel(StudentLevelModel),
    Autoencoder(Autoencoder, Option<AeTransferModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub event_vocab_hash: String,
    pub question_hash: String,
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
}

fn digest<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for s in items {
        h.update(s.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn event_vocab_hash(ds: &NormalizedDataset) -> String {
    digest(ds.event_vocab.iter().map(String::as_str))
}

pub fn question_hash(ds: &NormalizedDataset) -> String {
    let rows: Vec<String> = ds.questions.iter().map(|q| format!("{}:{:?}", q.id, q.block)).collect();
    digest(rows.iter().map(String::as_str))
}

impl Checkpoint {
    pub fn new(architecture: Architecture, store: &ParamStore, dataset: &NormalizedDataset, provenance: Provenance) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            architecture,
            event_vocab_hash: event_vocab_hash(dataset),
            question_hash: question_hash(dataset),
            provenance,
            tensors: store.to_tensors(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json("checkpoint", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// The dataset must use the vocabularies the checkpoint was trained on.
    pub fn check_dataset(&self, dataset: &NormalizedDataset) -> Result<()> {
        if self.event_vocab_hash != event_vocab_hash(dataset) {
            return Err(Error::Checkpoint("event vocabulary differs from the checkpoint's".into()));
        }
        if self.question_hash != question_hash(dataset) {
            return Err(Error::Checkpoint("question set differs from the checkpoint's".into()));
        }
        Ok(())
    }

    /// Rebuild the architecture and load the stored tensors into it.
    pub fn build(&self) -> Result<(ParamStore, Built)> {
        // initial values are overwritten below; the rng only fixes shapes
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let built = match &self.architecture {
            Architecture::Pretrained { encoder, with_question } => {
                let model = ProcessModel::new(&mut store, *encoder, &mut rng);
                let heads = PretrainHeads::new(&mut store, encoder, *with_question, &mut rng);
                Built::Pretrained(model, heads)
            }
            Architecture::Transfer { encoder, head } => {
                let model = ProcessModel::new(&mut store, *encoder, &mut rng);
                Built::Transfer(TransferModel::new(
                    &mut store,
                    model,
                    head.n_slots,
                    head.outputs,
                    &head.transfer_config(),
                    &mut rng,
                ))
            }
            Architecture::Behavior {
                encoder,
                head_hidden,
                dropout,
                n_students,
            } => {
                let model = ProcessModel::new(&mut store, *encoder, &mut rng);
                let net = BehaviorNet::new(&mut store, model, *head_hidden, *dropout, &mut rng)?;
                let terms = IrtTerms::new(&mut store, *n_students, encoder.n_questions);
                Built::Behavior(net, terms)
            }
            Architecture::StudentLevel { encoder, hidden } => {
                let model = ProcessModel::new(&mut store, *encoder, &mut rng);
                Built::StudentLevel(StudentLevelModel::new(&mut store, model, *hidden, &mut rng))
            }
            Architecture::Autoencoder { ae, head } => {
                let model = Autoencoder::new(&mut store, *ae, &mut rng);
                let transfer = head.map(|h| {
                    AeTransferModel::new(&mut store, model.clone(), h.n_slots, h.outputs, &h.transfer_config(), &mut rng)
                });
                Built::Autoencoder(model, transfer)
            }
        };
        store
            .load_tensors(&self.tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((store, built))
    }
}
