//! Single training runs on the train partition. Each produces a checkpoint and
//! a report; the test partition, when present, is only used for the final AUC.

use std::path::Path;

use procbert_nn::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline_ae::{ae_train, AeConfig, AeTransferModel, Autoencoder};
use crate::checkpoint::{Architecture, Checkpoint, HeadSpec};
use crate::error::{Error, Result};
use crate::evaluate::split::multilabel_stratified_split;
use crate::evaluate::{
    downstream_phases, flatten, fold_rng, student_labels, visited_pairs, Ablation, ExperimentConfig, FoldData, Task,
};
use crate::ingest::{Block, NormalizedDataset, Partition};
use crate::irt::{fit_base, fit_behavior, BehaviorConfig, BehaviorNet, IrtParams, PairSet, Response};
use crate::model::{EncoderConfig, EventSeq, ProcessModel};
use crate::pretrain::{run_pretraining, PretrainHeads};
use crate::provenance::Provenance;
use crate::train::History;
use crate::transfer::{student_inputs, visit_inputs, Labelled, StudentLevelModel, TransferModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub stage: String,
    pub phases: Vec<String>,
    pub validation_loss: f64,
    pub validation_auc: Option<f64>,
    /// `None` when the dataset has no test partition.
    pub test_auc: Option<f64>,
    pub excluded_questions: Vec<String>,
    pub history: History,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Train-partition students split into training and validation at random.
pub fn holdout(ds: &NormalizedDataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pool = ds.student_indices(Partition::Train);
    if pool.len() < 2 {
        return Err(Error::Data(format!("{} training students; at least 2 are needed", pool.len())));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((pool.len() as f64 * fraction).ceil() as usize).clamp(1, pool.len() - 1);
    let mut validation = pool.split_off(pool.len() - n_val);
    pool.sort_unstable();
    validation.sort_unstable();
    Ok((pool, validation))
}

fn block_a_sequences(ds: &NormalizedDataset, students: &[usize]) -> Vec<EventSeq> {
    flatten(&student_inputs(ds, students, &ds.block_questions(Block::A)))
}

fn status_input(config: &ExperimentConfig) -> bool {
    !config.ablations.has(Ablation::NoStatusInput)
}

/// Pre-train a process model on block-A sequences. `question_id` adds the
/// question-identity objective used by the student-level variant.
pub fn pretrain(config: &ExperimentConfig, ds: &NormalizedDataset, question_id: bool) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    let status = status_input(config) && !matches!(config.task, Task::Irt | Task::IrtBehavior);
    let mut pcfg = config
        .pretrain_config(status)
        .ok_or_else(|| Error::Config("pre-training is disabled by skip_all_pretrain".into()))?;
    pcfg.enable_question_id = question_id;
    let (train, validation) = holdout(ds, config.irt_validation_fraction, config.seed)?;
    let enc_cfg = config.encoder_config(ds, status);
    let mut rng = fold_rng(config.seed, 0);
    let mut store = ParamStore::new();
    let encoder = ProcessModel::new(&mut store, enc_cfg, &mut rng);
    let heads = PretrainHeads::new(&mut store, &enc_cfg, question_id, &mut rng);
    let out = run_pretraining(
        &mut store,
        &encoder,
        &heads,
        &block_a_sequences(ds, &train),
        &block_a_sequences(ds, &validation),
        &pcfg,
        &mut rng,
    )?;
    let arch = Architecture::Pretrained {
        encoder: enc_cfg,
        with_question: question_id,
    };
    let ck = Checkpoint::new(arch, &store, ds, config.provenance());
    let report = RunReport {
        provenance: config.provenance(),
        stage: "pretrain".into(),
        phases: out.history.phases(),
        validation_loss: out.best_loss,
        validation_auc: None,
        test_auc: None,
        excluded_questions: Vec::new(),
        history: out.history,
    };
    Ok((ck, report))
}

/// Copy the process-model weights of a pre-trained checkpoint into `store`.
fn load_encoder(store: &mut ParamStore, encoder: &ProcessModel, pretrained: &Checkpoint, ds: &NormalizedDataset) -> Result<()> {
    pretrained.check_dataset(ds)?;
    match &pretrained.architecture {
        Architecture::Pretrained { encoder: cfg, .. } if *cfg == encoder.config => {}
        Architecture::Pretrained { encoder: cfg, .. } => {
            return Err(Error::Checkpoint(format!(
                "pre-trained encoder {cfg:?} does not match the configured {:?}",
                encoder.config
            )))
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "expected a pretrained checkpoint, got {}",
                other.name()
            )))
        }
    }
    let (source, _) = pretrained.build()?;
    for id in encoder.params() {
        let name = store.name(id).to_string();
        let from = source
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks {name}")))?;
        store.set(id, source.get(from).clone());
    }
    Ok(())
}

/// Encoder for a downstream run: loaded from `pretrained`, pre-trained here,
/// or left untrained for a single joint phase. Returns whether it is untrained.
#[allow(clippy::too_many_arguments)]
fn prepare_encoder(
    config: &ExperimentConfig,
    ds: &NormalizedDataset,
    store: &mut ParamStore,
    enc_cfg: EncoderConfig,
    pretrained: Option<&Checkpoint>,
    question_id: bool,
    train: &[usize],
    validation: &[usize],
    rng: &mut ChaCha8Rng,
    history: &mut History,
) -> Result<(ProcessModel, bool)> {
    let encoder = ProcessModel::new(store, enc_cfg, rng);
    if let Some(ck) = pretrained {
        load_encoder(store, &encoder, ck, ds)?;
        return Ok((encoder, false));
    }
    match config.pretrain_config(enc_cfg.status_input) {
        Some(mut pcfg) => {
            pcfg.enable_question_id = question_id;
            let heads = PretrainHeads::new(store, &enc_cfg, question_id, rng);
            let out = run_pretraining(
                store,
                &encoder,
                &heads,
                &block_a_sequences(ds, train),
                &block_a_sequences(ds, validation),
                &pcfg,
                rng,
            )?;
            history.extend(out.history);
            Ok((encoder, false))
        }
        None => Ok((encoder, true)),
    }
}

fn report(config: &ExperimentConfig, stage: &str, r: crate::evaluate::FoldResult, has_test: bool) -> RunReport {
    RunReport {
        provenance: config.provenance(),
        stage: stage.into(),
        phases: r.phases,
        validation_loss: r.validation_loss,
        validation_auc: r.validation_auc,
        test_auc: has_test.then_some(r.test_auc),
        excluded_questions: r.excluded_questions,
        history: r.history,
    }
}

/// Train the transfer model for a student task. With `student_level` the
/// model is the visit-sequence GRU variant, the task must be `score`, and
/// pre-training run here includes the question-identity objective.
pub fn transfer(
    config: &ExperimentConfig,
    ds: &NormalizedDataset,
    pretrained: Option<&Checkpoint>,
    student_level: bool,
) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    match (config.task, student_level) {
        (Task::Score, _) | (Task::PerQuestion, false) => {}
        (task, _) => {
            return Err(Error::Config(format!(
                "transfer runs student tasks only; `{task}` is not one{}",
                if student_level { " the student-level model supports" } else { "" }
            )))
        }
    }
    let (train, validation) = holdout(ds, config.irt_validation_fraction, config.seed)?;
    let test = ds.student_indices(Partition::Test);
    let (label_rows, names) = student_labels(config.task, ds);
    let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| label_rows[i].clone()).collect() };
    let (train_y, val_y, test_y) = (pick(&train), pick(&validation), pick(&test));
    let enc_cfg = config.encoder_config(ds, status_input(config));
    let mut rng = fold_rng(config.seed, 0);
    let mut store = ParamStore::new();
    let mut history = History::default();
    let (encoder, scratch) = prepare_encoder(
        config,
        ds,
        &mut store,
        enc_cfg,
        pretrained,
        student_level,
        &train,
        &validation,
        &mut rng,
        &mut history,
    )?;
    let tcfg = config.transfer_config();
    let block_a = ds.block_questions(Block::A);
    let (arch, result) = if student_level {
        let model = StudentLevelModel::new(&mut store, encoder, config.encoder.hidden, &mut rng);
        let inputs = |idx: &[usize]| visit_inputs(ds, idx, Block::A);
        let (tr, va, te) = (inputs(&train), inputs(&validation), inputs(&test));
        let data = FoldData {
            train: Labelled { inputs: &tr, labels: &train_y },
            validation: Labelled { inputs: &va, labels: &val_y },
            test: Labelled { inputs: &te, labels: &test_y },
            names: &names,
        };
        let r = run_downstream(&mut store, &model, data, &tcfg, scratch, &mut rng, &mut history)?;
        let arch = Architecture::StudentLevel {
            encoder: enc_cfg,
            hidden: config.encoder.hidden,
        };
        (arch, r)
    } else {
        let model = TransferModel::new(&mut store, encoder, block_a.len(), names.len(), &tcfg, &mut rng);
        let inputs = |idx: &[usize]| student_inputs(ds, idx, &block_a);
        let (tr, va, te) = (inputs(&train), inputs(&validation), inputs(&test));
        let data = FoldData {
            train: Labelled { inputs: &tr, labels: &train_y },
            validation: Labelled { inputs: &va, labels: &val_y },
            test: Labelled { inputs: &te, labels: &test_y },
            names: &names,
        };
        let r = run_downstream(&mut store, &model, data, &tcfg, scratch, &mut rng, &mut history)?;
        let arch = Architecture::Transfer {
            encoder: enc_cfg,
            head: HeadSpec {
                n_slots: block_a.len(),
                outputs: names.len(),
                head_hidden: tcfg.head_hidden,
                dropout: tcfg.dropout,
                attention: tcfg.attention,
            },
        };
        (arch, r)
    };
    let stage = if student_level { "student_level" } else { "transfer" };
    let ck = Checkpoint::new(arch, &store, ds, config.provenance());
    Ok((ck, report(config, stage, result, !test.is_empty())))
}

/// `downstream_phases` with an empty test set tolerated.
fn run_downstream<M: crate::transfer::Downstream>(
    store: &mut ParamStore,
    model: &M,
    data: FoldData<'_, M::Input>,
    tcfg: &crate::transfer::TransferConfig,
    scratch: bool,
    rng: &mut ChaCha8Rng,
    history: &mut History,
) -> Result<crate::evaluate::FoldResult> {
    if data.test.inputs.is_empty() {
        // score the validation split in place of the missing test split
        let data = FoldData { test: data.validation, ..data };
        return downstream_phases(store, model, data, tcfg, scratch, rng, history, 0);
    }
    downstream_phases(store, model, data, tcfg, scratch, rng, history, 0)
}

/// Result of an IRT run over every visited pair.
#[derive(Debug, Clone)]
pub struct IrtRun {
    pub params: IrtParams,
    /// Behavior checkpoint; `None` for the base model.
    pub checkpoint: Option<Checkpoint>,
    pub report: RunReport,
}

impl IrtRun {
    pub fn params_csv(&self, ds: &NormalizedDataset) -> String {
        let students: Vec<String> = ds.students.iter().map(|s| s.id.clone()).collect();
        self.params.to_csv(&students, &ds.question_ids(), &self.report.provenance)
    }
}

/// Fit the base (`irt`) or behavior-augmented (`irt_behavior`) model on all
/// visited pairs, holding out a multi-label stratified share for selection.
pub fn irt(config: &ExperimentConfig, ds: &NormalizedDataset) -> Result<IrtRun> {
    config.validate()?;
    if !matches!(config.task, Task::Irt | Task::IrtBehavior) {
        return Err(Error::Config(format!("`{}` is not an IRT task", config.task)));
    }
    let data = visited_pairs(ds);
    if data.pairs.is_empty() {
        return Err(Error::Data("no visited (student, question) pairs".into()));
    }
    let (n_s, n_q) = (ds.students.len(), ds.questions.len());
    let split = multilabel_stratified_split(&data.pairs, config.irt_validation_fraction, config.seed)?;
    let take = |idx: &[usize]| -> Vec<Response> { idx.iter().map(|&i| data.responses[i]).collect() };
    let (train_r, val_r) = (take(&split.train), take(&split.test));
    let mut rng = fold_rng(config.seed, 0);
    let mut history = History::default();
    let (params, checkpoint, validation_loss) = if config.task == Task::Irt {
        let fit = fit_base(&train_r, n_s, n_q, Some(&val_r), &config.irt, &mut rng)?;
        history.extend(fit.outcome.history.clone());
        let loss = crate::irt::evaluate_bce(&fit.store, &fit.terms, None, PairSet { responses: &val_r, sequences: None })?;
        (fit.params, None, loss)
    } else {
        let seqs = |idx: &[usize]| -> Vec<EventSeq> { idx.iter().map(|&i| data.sequences[i].clone()).collect() };
        let (train_s, val_s) = (seqs(&split.train), seqs(&split.test));
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
        let fit = fit_behavior(&mut store, &net, train_set, Some(val_set), n_s, n_q, &bcfg, &mut rng)?;
        history.extend(fit.history);
        let loss = crate::irt::evaluate_bce(&store, &fit.terms, Some(&net), val_set)?;
        let arch = Architecture::Behavior {
            encoder: enc_cfg,
            head_hidden: config.behavior.head_hidden,
            dropout: config.behavior.dropout,
            n_students: n_s,
        };
        (fit.params, Some(Checkpoint::new(arch, &store, ds, config.provenance())), loss)
    };
    Ok(IrtRun {
        params,
        checkpoint,
        report: RunReport {
            provenance: config.provenance(),
            stage: config.task.to_string(),
            phases: history.phases(),
            validation_loss,
            validation_auc: None,
            test_auc: None,
            excluded_questions: Vec::new(),
            history,
        },
    })
}

/// Train the sequence autoencoder, then its transfer head on a student task.
pub fn baseline(config: &ExperimentConfig, ds: &NormalizedDataset) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    if !matches!(config.task, Task::Score | Task::PerQuestion) {
        return Err(Error::Config(format!("the baseline runs student tasks only, not `{}`", config.task)));
    }
    let (train, validation) = holdout(ds, config.irt_validation_fraction, config.seed)?;
    let test = ds.student_indices(Partition::Test);
    let (label_rows, names) = student_labels(config.task, ds);
    let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| label_rows[i].clone()).collect() };
    let block_a = ds.block_questions(Block::A);
    let inputs = |idx: &[usize]| student_inputs(ds, idx, &block_a);
    let (tr, va, te) = (inputs(&train), inputs(&validation), inputs(&test));
    let (train_y, val_y, test_y) = (pick(&train), pick(&validation), pick(&test));
    let ae_cfg = AeConfig {
        event_dim: config.encoder.event_dim,
        question_dim: config.encoder.question_dim,
        ..AeConfig::new(ds.event_vocab.len(), ds.questions.len(), config.encoder.hidden)
    };
    let mut rng = fold_rng(config.seed, 0);
    let mut store = ParamStore::new();
    let ae = Autoencoder::new(&mut store, ae_cfg, &mut rng);
    let out = ae_train(&mut store, &ae, &flatten(&tr), &flatten(&va), &config.ae, &mut rng)?;
    let mut history = out.history;
    let tcfg = config.transfer_config();
    let model = AeTransferModel::new(&mut store, ae, block_a.len(), names.len(), &tcfg, &mut rng);
    let data = FoldData {
        train: Labelled { inputs: &tr, labels: &train_y },
        validation: Labelled { inputs: &va, labels: &val_y },
        test: Labelled { inputs: &te, labels: &test_y },
        names: &names,
    };
    let r = run_downstream(&mut store, &model, data, &tcfg, false, &mut rng, &mut history)?;
    let arch = Architecture::Autoencoder {
        ae: ae_cfg,
        head: Some(HeadSpec {
            n_slots: block_a.len(),
            outputs: names.len(),
            head_hidden: tcfg.head_hidden,
            dropout: tcfg.dropout,
            attention: tcfg.attention,
        }),
    };
    let ck = Checkpoint::new(arch, &store, ds, config.provenance());
    Ok((ck, report(config, "baseline", r, !test.is_empty())))
}
