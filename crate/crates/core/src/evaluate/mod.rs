//! Experiments: cross-validated phase pipelines, metrics and results files.

mod metrics;
pub mod split;

pub use metrics::{auc, macro_auc, MacroAuc, Summary};
pub use split::{multilabel_kfold, multilabel_stratified_split, stratified_kfold, Fold, PairSplit};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use procbert_nn::{sigmoid, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline_ae::{ae_train, AeConfig, AeTrainConfig, AeTransferModel, Autoencoder};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::ingest::{derive_labels, Block, NormalizedDataset, Partition, ResponseStatus};
use crate::irt::{evaluate_bce, fit_base, fit_behavior, predict_probs, BehaviorConfig, BehaviorNet, IrtConfig, PairSet, Response};
use crate::model::{EncoderConfig, EventSeq, ProcessModel};
use crate::pretrain::{run_pretraining, PretrainConfig, PretrainHeads};
use crate::provenance::Provenance;
use crate::train::History;
use crate::transfer::{
    fine_tune, predict, student_inputs, train_phase, train_transfer_frozen, Downstream, Labelled, PhaseSpec,
    StudentInput, TransferConfig, TransferModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Score,
    PerQuestion,
    Irt,
    IrtBehavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Main,
    AeBaseline,
}

macro_rules! str_enum {
    ($ty:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s { $($s => Ok(Self::$v),)* other => Err(Error::Config(format!("unknown value `{other}`"))) }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(Task { Score => "score", PerQuestion => "per_question", Irt => "irt", IrtBehavior => "irt_behavior" });
str_enum!(ModelKind { Main => "main", AeBaseline => "ae_baseline" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SkipEventType,
    SkipTime,
    SkipStatus,
    SkipAllPretrain,
    NoAttention,
    NoFinetune,
    NoStatusInput,
}

str_enum!(Ablation {
    SkipEventType => "skip_event_type",
    SkipTime => "skip_time",
    SkipStatus => "skip_status",
    SkipAllPretrain => "skip_all_pretrain",
    NoAttention => "no_attention",
    NoFinetune => "no_finetune",
    NoStatusInput => "no_status_input",
});

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::SkipEventType,
        Ablation::SkipTime,
        Ablation::SkipStatus,
        Ablation::SkipAllPretrain,
        Ablation::NoAttention,
        Ablation::NoFinetune,
        Ablation::NoStatusInput,
    ];
}

/// Active ablation flags. Setting `skip_all_pretrain` also sets the three
/// individual objective skips.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    flags: Vec<Ablation>,
}

impl Ablations {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, flag: Ablation) -> Self {
        self.insert(flag);
        self
    }

    pub fn insert(&mut self, flag: Ablation) {
        let implied: &[Ablation] = if flag == Ablation::SkipAllPretrain {
            &[Ablation::SkipEventType, Ablation::SkipTime, Ablation::SkipStatus]
        } else {
            &[]
        };
        for &f in implied.iter().chain([&flag]) {
            if !self.flags.contains(&f) {
                self.flags.push(f);
            }
        }
        self.flags.sort_unstable();
    }

    pub fn has(&self, flag: Ablation) -> bool {
        self.flags.contains(&flag)
    }

    pub fn flags(&self) -> &[Ablation] {
        &self.flags
    }

    /// Comma-separated list; empty or `none` means no ablation.
    pub fn parse_list(text: &str) -> Result<Self> {
        let mut out = Self::none();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            out.insert(part.parse()?);
        }
        Ok(out)
    }

    pub fn to_list(&self) -> String {
        if self.flags.is_empty() {
            "none".into()
        } else {
            self.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(",")
        }
    }
}

/// Embedding and hidden sizes shared by the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub event_dim: usize,
    pub question_dim: usize,
    pub hidden: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            event_dim: 16,
            question_dim: 16,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub ablations: Ablations,
    pub folds: usize,
    pub seed: u64,
    pub encoder: EncoderDims,
    /// Objective switches are overridden by the ablation flags.
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
    pub ae: AeTrainConfig,
    pub irt: IrtConfig,
    pub behavior: BehaviorConfig,
    /// Share of each IRT training fold held out for model selection.
    pub irt_validation_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Score,
            model: ModelKind::Main,
            ablations: Ablations::none(),
            folds: 5,
            seed: 0,
            encoder: EncoderDims::default(),
            pretrain: PretrainConfig::default(),
            transfer: TransferConfig::default(),
            ae: AeTrainConfig::default(),
            irt: IrtConfig::default(),
            behavior: BehaviorConfig::default(),
            irt_validation_fraction: 0.1,
        }
    }
}

const KEYS: &[&str] = &[
    "task",
    "model",
    "ablate",
    "folds",
    "seed",
    "encoder.event_dim",
    "encoder.question_dim",
    "encoder.hidden",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.weight_event_type",
    "pretrain.weight_time",
    "pretrain.weight_status",
    "transfer.head_hidden",
    "transfer.dropout",
    "transfer.epochs",
    "transfer.batch_size",
    "transfer.lr",
    "transfer.finetune_epochs",
    "transfer.finetune_lr_scale",
    "ae.epochs",
    "ae.batch_size",
    "ae.lr",
    "ae.teacher_forcing",
    "irt.lr",
    "irt.max_epochs",
    "irt.tolerance",
    "irt.clip",
    "irt.validation_fraction",
    "behavior.irt_lr",
    "behavior.head_hidden",
    "behavior.dropout",
    "behavior.epochs",
    "behavior.batch_size",
    "behavior.lr",
    "behavior.finetune_epochs",
    "behavior.finetune_lr_scale",
];

impl ExperimentConfig {
    /// Defaults overridden by whatever keys `kv` sets.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_known(KEYS)?;
        let mut c = Self::default();
        kv.read_into("task", &mut c.task)?;
        kv.read_into("model", &mut c.model)?;
        if let Some(list) = kv.get("ablate") {
            c.ablations = Ablations::parse_list(list)?;
        }
        kv.read_into("folds", &mut c.folds)?;
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("encoder.event_dim", &mut c.encoder.event_dim)?;
        kv.read_into("encoder.question_dim", &mut c.encoder.question_dim)?;
        kv.read_into("encoder.hidden", &mut c.encoder.hidden)?;
        kv.read_into("pretrain.epochs", &mut c.pretrain.epochs)?;
        kv.read_into("pretrain.batch_size", &mut c.pretrain.batch_size)?;
        kv.read_into("pretrain.lr", &mut c.pretrain.lr)?;
        kv.read_into("pretrain.weight_event_type", &mut c.pretrain.weight_event_type)?;
        kv.read_into("pretrain.weight_time", &mut c.pretrain.weight_time)?;
        kv.read_into("pretrain.weight_status", &mut c.pretrain.weight_status)?;
        kv.read_into("transfer.head_hidden", &mut c.transfer.head_hidden)?;
        kv.read_into("transfer.dropout", &mut c.transfer.dropout)?;
        kv.read_into("transfer.epochs", &mut c.transfer.epochs)?;
        kv.read_into("transfer.batch_size", &mut c.transfer.batch_size)?;
        kv.read_into("transfer.lr", &mut c.transfer.lr)?;
        kv.read_into("transfer.finetune_epochs", &mut c.transfer.finetune_epochs)?;
        kv.read_into("transfer.finetune_lr_scale", &mut c.transfer.finetune_lr_scale)?;
        kv.read_into("ae.epochs", &mut c.ae.epochs)?;
        kv.read_into("ae.batch_size", &mut c.ae.batch_size)?;
        kv.read_into("ae.lr", &mut c.ae.lr)?;
        kv.read_into("ae.teacher_forcing", &mut c.ae.teacher_forcing)?;
        kv.read_into("irt.lr", &mut c.irt.lr)?;
        kv.read_into("irt.max_epochs", &mut c.irt.max_epochs)?;
        kv.read_into("irt.tolerance", &mut c.irt.tolerance)?;
        kv.read_into("irt.clip", &mut c.irt.clip)?;
        kv.read_into("irt.validation_fraction", &mut c.irt_validation_fraction)?;
        kv.read_into("behavior.irt_lr", &mut c.behavior.irt.lr)?;
        kv.read_into("behavior.head_hidden", &mut c.behavior.head_hidden)?;
        kv.read_into("behavior.dropout", &mut c.behavior.dropout)?;
        kv.read_into("behavior.epochs", &mut c.behavior.epochs)?;
        kv.read_into("behavior.batch_size", &mut c.behavior.batch_size)?;
        kv.read_into("behavior.lr", &mut c.behavior.lr)?;
        kv.read_into("behavior.finetune_epochs", &mut c.behavior.finetune_epochs)?;
        kv.read_into("behavior.finetune_lr_scale", &mut c.behavior.finetune_lr_scale)?;
        c.behavior.irt.max_epochs = c.irt.max_epochs;
        c.behavior.irt.clip = c.irt.clip;
        c.validate()?;
        Ok(c)
    }

    /// Every setting as key-value text, the seed excluded.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let mut set = |k: &str, v: String| kv.set(k, v);
        set("task", self.task.to_string());
        set("model", self.model.to_string());
        set("ablate", self.ablations.to_list());
        set("folds", self.folds.to_string());
        set("encoder.event_dim", self.encoder.event_dim.to_string());
        set("encoder.question_dim", self.encoder.question_dim.to_string());
        set("encoder.hidden", self.encoder.hidden.to_string());
        set("pretrain.epochs", self.pretrain.epochs.to_string());
        set("pretrain.batch_size", self.pretrain.batch_size.to_string());
        set("pretrain.lr", self.pretrain.lr.to_string());
        set("pretrain.weight_event_type", self.pretrain.weight_event_type.to_string());
        set("pretrain.weight_time", self.pretrain.weight_time.to_string());
        set("pretrain.weight_status", self.pretrain.weight_status.to_string());
        set("transfer.head_hidden", self.transfer.head_hidden.to_string());
        set("transfer.dropout", self.transfer.dropout.to_string());
        set("transfer.epochs", self.transfer.epochs.to_string());
        set("transfer.batch_size", self.transfer.batch_size.to_string());
        set("transfer.lr", self.transfer.lr.to_string());
        set("transfer.finetune_epochs", self.transfer.finetune_epochs.to_string());
        set("transfer.finetune_lr_scale", self.transfer.finetune_lr_scale.to_string());
        set("ae.epochs", self.ae.epochs.to_string());
        set("ae.batch_size", self.ae.batch_size.to_string());
        set("ae.lr", self.ae.lr.to_string());
        set("ae.teacher_forcing", self.ae.teacher_forcing.to_string());
        set("irt.lr", self.irt.lr.to_string());
        set("irt.max_epochs", self.irt.max_epochs.to_string());
        set("irt.tolerance", self.irt.tolerance.to_string());
        set("irt.clip", self.irt.clip.to_string());
        set("irt.validation_fraction", self.irt_validation_fraction.to_string());
        set("behavior.irt_lr", self.behavior.irt.lr.to_string());
        set("behavior.head_hidden", self.behavior.head_hidden.to_string());
        set("behavior.dropout", self.behavior.dropout.to_string());
        set("behavior.epochs", self.behavior.epochs.to_string());
        set("behavior.batch_size", self.behavior.batch_size.to_string());
        set("behavior.lr", self.behavior.lr.to_string());
        set("behavior.finetune_epochs", self.behavior.finetune_epochs.to_string());
        set("behavior.finetune_lr_scale", self.behavior.finetune_lr_scale.to_string());
        kv
    }

    pub fn config_hash(&self) -> String {
        self.to_kv().hash()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.config_hash(), self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        use Ablation::*;
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        let a = &self.ablations;
        let status_off = a.has(SkipStatus) || a.has(NoStatusInput);
        if a.has(SkipEventType) && a.has(SkipTime) && status_off && !a.has(SkipAllPretrain) {
            return Err(Error::Config(
                "every pre-training objective is skipped; use skip_all_pretrain".into(),
            ));
        }
        let allowed: &[Ablation] = match (self.task, self.model) {
            (Task::Score | Task::PerQuestion, ModelKind::Main) => &Ablation::ALL,
            (Task::Score | Task::PerQuestion, ModelKind::AeBaseline) => &[NoFinetune],
            (Task::Irt, ModelKind::Main) => &[],
            (Task::IrtBehavior, ModelKind::Main) => &[SkipEventType, SkipTime, SkipStatus, SkipAllPretrain, NoFinetune],
            (_, ModelKind::AeBaseline) => {
                return Err(Error::Config("the autoencoder baseline only runs the score and per-question tasks".into()))
            }
        };
        if let Some(bad) = a.flags().iter().find(|f| !allowed.contains(f)) {
            return Err(Error::Config(format!(
                "ablation {bad} does not apply to task {} with model {}",
                self.task, self.model
            )));
        }
        if !(self.irt_validation_fraction > 0.0 && self.irt_validation_fraction < 1.0) {
            return Err(Error::Config("irt.validation_fraction must lie in (0, 1)".into()));
        }
        self.transfer.validate()
    }

    pub(crate) fn encoder_config(&self, ds: &NormalizedDataset, status_input: bool) -> EncoderConfig {
        EncoderConfig {
            event_dim: self.encoder.event_dim,
            question_dim: self.encoder.question_dim,
            hidden: self.encoder.hidden,
            status_input,
            ..EncoderConfig::new(ds.event_vocab.len(), ds.questions.len())
        }
    }

    /// Pre-training settings after ablations; `None` when pre-training is skipped.
    pub(crate) fn pretrain_config(&self, status_input: bool) -> Option<PretrainConfig> {
        let a = &self.ablations;
        if a.has(Ablation::SkipAllPretrain) {
            return None;
        }
        Some(PretrainConfig {
            enable_event_type: !a.has(Ablation::SkipEventType),
            enable_time: !a.has(Ablation::SkipTime),
            enable_status: status_input && !a.has(Ablation::SkipStatus),
            enable_question_id: false,
            ..self.pretrain
        })
    }

    pub(crate) fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            attention: !self.ablations.has(Ablation::NoAttention),
            finetune: !self.ablations.has(Ablation::NoFinetune),
            ..self.transfer
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Loss of the selected epoch of the last phase.
    pub validation_loss: f64,
    pub validation_auc: Option<f64>,
    pub test_auc: f64,
    /// IRT tasks: test AUC over pairs that were answered (incomplete left out).
    pub test_auc_answered: Option<f64>,
    /// Questions left out of a macro AUC for having one class.
    pub excluded_questions: Vec<String>,
    pub phases: Vec<String>,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub provenance: Provenance,
    pub task: Task,
    pub model: ModelKind,
    pub ablations: Vec<String>,
    pub config: String,
    pub dataset: Provenance,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
    pub summary_answered: Option<Summary>,
}

impl ExperimentResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

pub(crate) fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

/// Cross-validate `config` on `dataset`. Each fold trains from scratch,
/// pre-training included.
pub fn run_experiment(config: &ExperimentConfig, dataset: &NormalizedDataset) -> Result<ExperimentResults> {
    config.validate()?;
    let folds = match config.task {
        Task::Score | Task::PerQuestion => run_student_folds(config, dataset)?,
        Task::Irt | Task::IrtBehavior => run_pair_folds(config, dataset)?,
    };
    let tests: Vec<f64> = folds.iter().map(|f| f.test_auc).collect();
    let answered: Option<Vec<f64>> = folds.iter().map(|f| f.test_auc_answered).collect();
    Ok(ExperimentResults {
        provenance: config.provenance(),
        task: config.task,
        model: config.model,
        ablations: config.ablations.flags().iter().map(|f| f.to_string()).collect(),
        config: config.to_kv().to_text(),
        dataset: dataset.provenance.clone(),
        summary: Summary::of(&tests),
        summary_answered: answered.map(|a| Summary::of(&a)),
        folds,
    })
}

/// Score or per-question AUC from logits; labels and logits are per student.
pub(crate) fn label_auc(logits: &[Vec<f64>], labels: &[Vec<f64>], names: &[String]) -> Result<(f64, Vec<String>)> {
    let k = names.len();
    if k == 1 {
        let s: Vec<f64> = logits.iter().map(|l| sigmoid(l[0])).collect();
        let y: Vec<bool> = labels.iter().map(|l| l[0] > 0.5).collect();
        return Ok((auc(&s, &y)?, Vec::new()));
    }
    let s: Vec<Vec<f64>> = (0..k).map(|q| logits.iter().map(|l| sigmoid(l[q])).collect()).collect();
    let y: Vec<Vec<bool>> = (0..k).map(|q| labels.iter().map(|l| l[q] > 0.5).collect()).collect();
    let m = macro_auc(&s, &y)?;
    Ok((m.mean, m.excluded.iter().map(|&q| names[q].clone()).collect()))
}

/// Label rows per student and the output names for a student-level task.
pub(crate) fn student_labels(task: Task, ds: &NormalizedDataset) -> (Vec<Vec<f64>>, Vec<String>) {
    let labels = derive_labels(ds);
    match task {
        Task::PerQuestion => (
            labels.per_question.iter().map(|r| r.iter().map(|&y| f64::from(y)).collect()).collect(),
            labels.block_b_questions.iter().map(|&q| ds.questions[q].id.clone()).collect(),
        ),
        _ => (
            labels.score.iter().map(|&y| vec![f64::from(y)]).collect(),
            vec!["score".to_string()],
        ),
    }
}

pub(crate) fn flatten(inputs: &[StudentInput]) -> Vec<EventSeq> {
    inputs.iter().flat_map(|i| i.sequences.iter().map(|(_, s)| s.clone())).collect()
}

fn run_student_folds(config: &ExperimentConfig, ds: &NormalizedDataset) -> Result<Vec<FoldResult>> {
    let labels = derive_labels(ds);
    let (label_rows, names) = student_labels(config.task, ds);
    let pool = ds.student_indices(Partition::Train);
    let test = ds.student_indices(Partition::Test);
    if test.is_empty() {
        return Err(Error::Data("the dataset has no test partition".into()));
    }
    // per-question folds are stratified on the score label as well
    let strat: Vec<u8> = pool.iter().map(|&i| labels.score[i]).collect();
    let block_a = ds.block_questions(Block::A);
    let pick = |idx: &[usize]| -> (Vec<StudentInput>, Vec<Vec<f64>>) {
        (student_inputs(ds, idx, &block_a), idx.iter().map(|&i| label_rows[i].clone()).collect())
    };
    let (test_inputs, test_labels) = pick(&test);
    let mut out = Vec::with_capacity(config.folds);
    for (f, fold) in stratified_kfold(&strat, config.folds, config.seed)?.into_iter().enumerate() {
        let train_idx: Vec<usize> = fold.train.iter().map(|&i| pool[i]).collect();
        let val_idx: Vec<usize> = fold.validation.iter().map(|&i| pool[i]).collect();
        let (train_inputs, train_labels) = pick(&train_idx);
        let (val_inputs, val_labels) = pick(&val_idx);
        let data = FoldData {
            train: Labelled { inputs: &train_inputs, labels: &train_labels },
            validation: Labelled { inputs: &val_inputs, labels: &val_labels },
            test: Labelled { inputs: &test_inputs, labels: &test_labels },
            names: &names,
        };
        let mut rng = fold_rng(config.seed, f);
        let result = match config.model {
            ModelKind::Main => main_fold(config, ds, data, f, &mut rng)?,
            ModelKind::AeBaseline => ae_fold(config, ds, data, f, &mut rng)?,
        };
        log::info!("fold {f}: test AUC {:.4}", result.test_auc);
        out.push(result);
    }
    Ok(out)
}

pub(crate) struct FoldData<'a, I> {
    pub train: Labelled<'a, I>,
    pub validation: Labelled<'a, I>,
    pub test: Labelled<'a, I>,
    pub names: &'a [String],
}

impl<I> Clone for FoldData<'_, I> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<I> Copy for FoldData<'_, I> {}

/// Frozen transfer then fine-tuning, or a single joint phase from scratch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn downstream_phases<M: Downstream>(
    store: &mut ParamStore,
    model: &M,
    data: FoldData<'_, M::Input>,
    tcfg: &TransferConfig,
    from_scratch: bool,
    rng: &mut ChaCha8Rng,
    history: &mut History,
    fold: usize,
) -> Result<FoldResult> {
    let last = if from_scratch {
        let mut params = model.encoder_params();
        params.extend(model.head_params());
        let spec = PhaseSpec {
            name: "scratch",
            epochs: tcfg.epochs,
            lr: tcfg.lr,
            batch_size: tcfg.batch_size,
        };
        let out = train_phase(store, model, data.train, data.validation, &params, spec, rng)?;
        history.extend(out.history.clone());
        out
    } else {
        let frozen = train_transfer_frozen(store, model, data.train, data.validation, tcfg, rng)?;
        history.extend(frozen.history.clone());
        match fine_tune(store, model, data.train, data.validation, tcfg, rng)? {
            Some(ft) => {
                history.extend(ft.history.clone());
                ft
            }
            None => frozen,
        }
    };
    let test_logits = predict(store, model, data.test.inputs, tcfg.batch_size)?;
    let (test_auc, excluded) = label_auc(&test_logits, data.test.labels, data.names)?;
    let validation_auc = if data.validation.inputs.is_empty() {
        None
    } else {
        let logits = predict(store, model, data.validation.inputs, tcfg.batch_size)?;
        label_auc(&logits, data.validation.labels, data.names).ok().map(|a| a.0)
    };
    Ok(FoldResult {
        fold,
        validation_loss: last.best_loss,
        validation_auc,
        test_auc,
        test_auc_answered: None,
        excluded_questions: excluded,
        phases: history.phases(),
        history: history.clone(),
    })
}

fn main_fold(
    config: &ExperimentConfig,
    ds: &NormalizedDataset,
    data: FoldData<'_, StudentInput>,
    fold: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FoldResult> {
    let status_input = !config.ablations.has(Ablation::NoStatusInput);
    let enc_cfg = config.encoder_config(ds, status_input);
    let mut store = ParamStore::new();
    let encoder = ProcessModel::new(&mut store, enc_cfg, rng);
    let mut history = History::default();
    let pcfg = config.pretrain_config(status_input);
    if let Some(pcfg) = &pcfg {
        let heads = PretrainHeads::new(&mut store, &enc_cfg, false, rng);
        let out = run_pretraining(
            &mut store,
            &encoder,
            &heads,
            &flatten(data.train.inputs),
            &flatten(data.validation.inputs),
            pcfg,
            rng,
        )?;
        history.extend(out.history);
    }
    let tcfg = config.transfer_config();
    let model = TransferModel::new(&mut store, encoder, ds.block_questions(Block::A).len(), data.names.len(), &tcfg, rng);
    downstream_phases(&mut store, &model, data, &tcfg, pcfg.is_none(), rng, &mut history, fold)
}

fn ae_fold(
    config: &ExperimentConfig,
    ds: &NormalizedDataset,
    data: FoldData<'_, StudentInput>,
    fold: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FoldResult> {
    let ae_cfg = AeConfig {
        event_dim: config.encoder.event_dim,
        question_dim: config.encoder.question_dim,
        ..AeConfig::new(ds.event_vocab.len(), ds.questions.len(), config.encoder.hidden)
    };
    let mut store = ParamStore::new();
    let ae = Autoencoder::new(&mut store, ae_cfg, rng);
    let out = ae_train(
        &mut store,
        &ae,
        &flatten(data.train.inputs),
        &flatten(data.validation.inputs),
        &config.ae,
        rng,
    )?;
    let mut history = out.history;
    let tcfg = config.transfer_config();
    let model = AeTransferModel::new(&mut store, ae, ds.block_questions(Block::A).len(), data.names.len(), &tcfg, rng);
    downstream_phases(&mut store, &model, data, &tcfg, false, rng, &mut history, fold)
}

/// Every visited (student, question) pair with its outcome and event sequence.
pub struct PairData {
    pub pairs: Vec<(usize, usize)>,
    pub responses: Vec<Response>,
    pub statuses: Vec<ResponseStatus>,
    pub sequences: Vec<EventSeq>,
}

pub fn visited_pairs(ds: &NormalizedDataset) -> PairData {
    let mut data = PairData {
        pairs: Vec::new(),
        responses: Vec::new(),
        statuses: Vec::new(),
        sequences: Vec::new(),
    };
    for (s, student) in ds.students.iter().enumerate() {
        for q in 0..ds.questions.len() {
            let events = student.question_events(q);
            if events.is_empty() {
                continue;
            }
            let status = student.outcomes[q];
            data.pairs.push((s, q));
            data.responses.push(Response {
                student: s,
                question: q,
                correct: status.is_correct(),
            });
            data.statuses.push(status);
            data.sequences.push(EventSeq::from_events(&events, ds));
        }
    }
    data
}

fn run_pair_folds(config: &ExperimentConfig, ds: &NormalizedDataset) -> Result<Vec<FoldResult>> {
    let data = visited_pairs(ds);
    if data.pairs.is_empty() {
        return Err(Error::Data("no visited (student, question) pairs".into()));
    }
    let n_s = ds.students.len();
    let n_q = ds.questions.len();
    let test_folds = multilabel_kfold(&data.pairs, config.folds, config.seed)?;
    let mut out = Vec::with_capacity(config.folds);
    for (f, test) in test_folds.iter().enumerate() {
        let mut in_test = vec![false; data.pairs.len()];
        for &i in test {
            in_test[i] = true;
        }
        let rest: Vec<usize> = (0..data.pairs.len()).filter(|&i| !in_test[i]).collect();
        let rest_pairs: Vec<(usize, usize)> = rest.iter().map(|&i| data.pairs[i]).collect();
        let inner = multilabel_stratified_split(&rest_pairs, config.irt_validation_fraction, config.seed.wrapping_add(f as u64 + 1))?;
        let train: Vec<usize> = inner.train.iter().map(|&i| rest[i]).collect();
        let validation: Vec<usize> = inner.test.iter().map(|&i| rest[i]).collect();
        let take_r = |idx: &[usize]| -> Vec<Response> { idx.iter().map(|&i| data.responses[i]).collect() };
        let take_s = |idx: &[usize]| -> Vec<EventSeq> { idx.iter().map(|&i| data.sequences[i].clone()).collect() };
        let (train_r, val_r, test_r) = (take_r(&train), take_r(&validation), take_r(test));
        let mut rng = fold_rng(config.seed, f);
        let mut history = History::default();
        let (val_probs, test_probs, validation_loss) = match config.task {
            Task::Irt => {
                let fit = fit_base(&train_r, n_s, n_q, Some(&val_r), &config.irt, &mut rng)?;
                history.extend(fit.outcome.history.clone());
                fn set(r: &[Response]) -> PairSet<'_> {
                    PairSet { responses: r, sequences: None }
                }
                let vp = predict_probs(&fit.store, &fit.terms, None, set(&val_r))?;
                let tp = predict_probs(&fit.store, &fit.terms, None, set(&test_r))?;
                let vl = evaluate_bce(&fit.store, &fit.terms, None, set(&val_r))?;
                (vp, tp, vl)
            }
            _ => {
                let (train_s, val_s, test_s) = (take_s(&train), take_s(&validation), take_s(test));
                let enc_cfg = config.encoder_config(ds, false);
                let mut store = ParamStore::new();
                let encoder = ProcessModel::new(&mut store, enc_cfg, &mut rng);
                if let Some(pcfg) = config.pretrain_config(false) {
                    let heads = PretrainHeads::new(&mut store, &enc_cfg, false, &mut rng);
                    let out = run_pretraining(&mut store, &encoder, &heads, &train_s, &val_s, &pcfg, &mut rng)?;
                    history.extend(out.history);
                }
                let net = BehaviorNet::new(&mut store, encoder, config.behavior.head_hidden, config.behavior.dropout, &mut rng)?;
                let bcfg = BehaviorConfig {
                    finetune: !config.ablations.has(Ablation::NoFinetune),
                    ..config.behavior
                };
                let train_set = PairSet { responses: &train_r, sequences: Some(&train_s) };
                let val_set = PairSet { responses: &val_r, sequences: Some(&val_s) };
                let test_set = PairSet { responses: &test_r, sequences: Some(&test_s) };
                let fit = fit_behavior(&mut store, &net, train_set, Some(val_set), n_s, n_q, &bcfg, &mut rng)?;
                history.extend(fit.history);
                let vp = predict_probs(&store, &fit.terms, Some(&net), val_set)?;
                let tp = predict_probs(&store, &fit.terms, Some(&net), test_set)?;
                let vl = evaluate_bce(&store, &fit.terms, Some(&net), val_set)?;
                (vp, tp, vl)
            }
        };
        let labels = |r: &[Response]| -> Vec<bool> { r.iter().map(|x| x.correct).collect() };
        let test_auc = auc(&test_probs, &labels(&test_r))?;
        let answered: Vec<usize> = (0..test.len())
            .filter(|&j| data.statuses[test[j]] != ResponseStatus::Incomplete)
            .collect();
        let test_auc_answered = auc(
            &answered.iter().map(|&j| test_probs[j]).collect::<Vec<_>>(),
            &answered.iter().map(|&j| test_r[j].correct).collect::<Vec<_>>(),
        )
        .ok();
        log::info!("fold {f}: test AUC {test_auc:.4}");
        out.push(FoldResult {
            fold: f,
            validation_loss,
            validation_auc: auc(&val_probs, &labels(&val_r)).ok(),
            test_auc,
            test_auc_answered,
            excluded_questions: Vec::new(),
            phases: history.phases(),
            history,
        });
    }
    Ok(out)
}
