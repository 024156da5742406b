use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use procbert::checkpoint::Checkpoint;
use procbert::config::KvConfig;
use procbert::evaluate::{run_experiment, Ablations, ExperimentConfig, ModelKind, Task};
use procbert::ingest::{normalize, parse_log, AnswerKey, BlockMap, IngestOptions, LogSchema, NormalizedDataset};
use procbert::pipeline;
use procbert::provenance::Provenance;
use procbert::synthgen::{generate_cohort, Archetype, CohortConfig};
use procbert::viz::{embed_2d, export_vectors, render_plot, ColorBy, PlotStyle, TsneConfig, VectorLevel, VectorTable};
use procbert::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRAINING: u8 = 3;

#[derive(Parser)]
#[command(name = "procbert", version, about = "Representations of student process data")]
struct Cli {
    /// Seed for every random choice; overrides `seed` in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Train {
    /// Normalized dataset written by `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON run report with loss history.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort: log, answer key, block map and ground truth.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        students: usize,
        #[arg(long, default_value_t = 10)]
        questions_per_block: usize,
        #[arg(long, default_value_t = 1.0)]
        effect_scale: f64,
        /// Archetype mix such as `rapid=0.5,high_effort=0.5`.
        #[arg(long)]
        mix: Option<String>,
    },
    /// Parse and normalize a raw log into a dataset file.
    Ingest {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        answer_key: PathBuf,
        #[arg(long)]
        block_map: PathBuf,
        /// JSON log schema; the default matches `generate` output.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 1800.0)]
        block_time_limit: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a process model on block-A sequences.
    Pretrain {
        #[command(flatten)]
        train: Train,
        /// Add the question-identity objective (for `transfer --student-level`).
        #[arg(long)]
        question_id: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a transfer model for `score` or `per_question`.
    Transfer {
        #[command(flatten)]
        train: Train,
        /// Pre-trained checkpoint; without it pre-training runs first.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        /// Visit-sequence GRU variant with a student-level representation.
        #[arg(long)]
        student_level: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the base or behavior-augmented IRT model.
    Irt {
        #[command(flatten)]
        train: Train,
        /// `irt` or `irt_behavior`.
        #[arg(long, default_value = "irt")]
        task: Task,
        /// Ability and difficulty estimates.
        #[arg(long)]
        params: PathBuf,
        /// Behavior-model checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the sequence-autoencoder baseline and its transfer head.
    Baseline {
        #[command(flatten)]
        train: Train,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate every task × ablation cell and write one result per cell.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Repeatable; defaults to the config's task.
        #[arg(long)]
        task: Vec<Task>,
        /// Repeatable comma-separated flag lists; `none` is the full model.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        folds: Option<usize>,
        /// Directory for the result files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write question- or student-level vectors from a checkpoint.
    ExportVectors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `question` or `student`.
        #[arg(long)]
        level: VectorLevel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed exported vectors in 2-D and draw a scatter plot.
    Plot {
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `behavior`, `label` or `none`.
        #[arg(long, default_value = "behavior")]
        color_by: ColorBy,
        #[arg(long, default_value_t = 1.0)]
        subsample: f64,
        #[arg(long)]
        perplexity: Option<f64>,
        /// Also write the 2-D coordinates as CSV.
        #[arg(long)]
        coords: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | None => EXIT_USAGE,
        Some(Error::Divergence { .. } | Error::Nn(_)) => EXIT_TRAINING,
        Some(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn experiment_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let kv = match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::new(),
    };
    let mut c = ExperimentConfig::from_kv(&kv)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn load_data(path: &Path) -> anyhow::Result<NormalizedDataset> {
    Ok(NormalizedDataset::load(path)?)
}

fn write_report(path: Option<&Path>, report: &pipeline::RunReport) -> anyhow::Result<()> {
    if let Some(p) = path {
        report.write(p)?;
    }
    Ok(())
}

fn print_run(report: &pipeline::RunReport) {
    println!("{}", report.provenance.header());
    println!("phases: {}", report.phases.join(", "));
    println!("validation loss: {:.6}", report.validation_loss);
    if let Some(a) = report.test_auc {
        println!("test AUC: {a:.4}");
    }
}

fn parse_mix(text: &str) -> anyhow::Result<Vec<(Archetype, f64)>> {
    text.split(',')
        .map(|part| {
            let (name, p) = part
                .split_once('=')
                .with_context(|| format!("mix entry `{part}` is not name=probability"))?;
            let a = Archetype::ALL
                .into_iter()
                .find(|a| a.as_str() == name.trim())
                .ok_or_else(|| Error::Config(format!("unknown archetype `{name}`")))?;
            let p: f64 = p.trim().parse().map_err(|_| Error::Config(format!("bad probability `{p}`")))?;
            Ok((a, p))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Generate {
            out,
            students,
            questions_per_block,
            effect_scale,
            mix,
        } => {
            let mut cfg = CohortConfig {
                n_students: students,
                n_questions_per_block: questions_per_block,
                effect_scale,
                seed: seed.unwrap_or(0),
                ..CohortConfig::default()
            };
            if let Some(m) = &mix {
                cfg.archetype_mix = parse_mix(m)?;
            }
            let mut kv = KvConfig::new();
            kv.set("students", students.to_string());
            kv.set("questions_per_block", questions_per_block.to_string());
            kv.set("effect_scale", effect_scale.to_string());
            kv.set("mix", mix.unwrap_or_default());
            let mut cohort = generate_cohort(&cfg)?;
            cohort.truth.provenance = Provenance::new(kv.hash(), cfg.seed);
            cohort.write(&out)?;
            println!("{}", cohort.truth.provenance.header());
            println!("{} events for {students} students in {}", cohort.events.len(), out.display());
        }
        Command::Ingest {
            log,
            answer_key,
            block_map,
            schema,
            test_fraction,
            block_time_limit,
            out,
        } => {
            let schema = match &schema {
                Some(p) => LogSchema::load(p)?,
                None => LogSchema::default(),
            };
            let options = IngestOptions {
                test_fraction,
                block_time_limit,
                seed: seed.unwrap_or(0),
            };
            let mut kv = KvConfig::new();
            kv.set("test_fraction", test_fraction.to_string());
            kv.set("block_time_limit", block_time_limit.to_string());
            let prov = Provenance::new(kv.hash(), options.seed);
            let parsed = parse_log(&log, &schema)?;
            for e in &parsed.errors {
                log::warn!("row {} column {}: {}", e.row, e.column, e.message);
            }
            let key = AnswerKey::load(&answer_key)?;
            let blocks = BlockMap::load(&block_map)?;
            let ds = normalize(&parsed, &key, &blocks, &schema, options, prov)?;
            ds.save(&out)?;
            println!("{}", ds.provenance.header());
            println!(
                "{} students, {} questions, {} event types; {} rows rejected",
                ds.students.len(),
                ds.questions.len(),
                ds.event_vocab.len(),
                parsed.errors.len()
            );
        }
        Command::Pretrain { train, question_id, out } => {
            let config = experiment_config(train.config.as_deref(), seed)?;
            let ds = load_data(&train.data)?;
            let (ck, report) = pipeline::pretrain(&config, &ds, question_id)?;
            ck.save(&out)?;
            write_report(train.report.as_deref(), &report)?;
            print_run(&report);
        }
        Command::Transfer {
            train,
            pretrained,
            task,
            student_level,
            out,
        } => {
            let mut config = experiment_config(train.config.as_deref(), seed)?;
            if let Some(t) = task {
                config.task = t;
            }
            let ds = load_data(&train.data)?;
            let pre = pretrained.as_deref().map(Checkpoint::load).transpose()?;
            let (ck, report) = pipeline::transfer(&config, &ds, pre.as_ref(), student_level)?;
            ck.save(&out)?;
            write_report(train.report.as_deref(), &report)?;
            print_run(&report);
        }
        Command::Irt {
            train,
            task,
            params,
            out,
        } => {
            let mut config = experiment_config(train.config.as_deref(), seed)?;
            config.task = task;
            let ds = load_data(&train.data)?;
            let fit = pipeline::irt(&config, &ds)?;
            std::fs::write(&params, fit.params_csv(&ds)).map_err(|e| Error::io(&params, e))?;
            match (&fit.checkpoint, &out) {
                (Some(ck), Some(p)) => ck.save(p)?,
                (None, Some(_)) => bail!(Error::Config("the base IRT model has no network checkpoint".into())),
                _ => {}
            }
            write_report(train.report.as_deref(), &fit.report)?;
            print_run(&fit.report);
        }
        Command::Baseline { train, task, out } => {
            let mut config = experiment_config(train.config.as_deref(), seed)?;
            config.model = ModelKind::AeBaseline;
            if let Some(t) = task {
                config.task = t;
            }
            let ds = load_data(&train.data)?;
            let (ck, report) = pipeline::baseline(&config, &ds)?;
            ck.save(&out)?;
            write_report(train.report.as_deref(), &report)?;
            print_run(&report);
        }
        Command::Evaluate {
            data,
            config,
            task,
            ablate,
            model,
            folds,
            out,
        } => {
            let mut base = experiment_config(config.as_deref(), seed)?;
            if let Some(m) = model {
                base.model = m;
            }
            if let Some(k) = folds {
                base.folds = k;
            }
            let tasks = if task.is_empty() { vec![base.task] } else { task };
            let ablations = if ablate.is_empty() {
                vec![base.ablations.clone()]
            } else {
                ablate.iter().map(|a| Ablations::parse_list(a)).collect::<Result<_, _>>()?
            };
            // reject bad cells before any training starts
            let mut cells = Vec::new();
            for &t in &tasks {
                for a in &ablations {
                    let c = ExperimentConfig {
                        task: t,
                        ablations: a.clone(),
                        ..base.clone()
                    };
                    c.validate()?;
                    cells.push(c);
                }
            }
            let ds = load_data(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            println!("seed={}", base.seed);
            println!("{:<14} {:<12} {:<40} {:>8} {:>8} config_hash", "task", "model", "ablations", "mean", "std");
            for c in cells {
                let results = run_experiment(&c, &ds)?;
                let name = format!("{}__{}__{}.json", c.task, c.model, c.ablations.to_list().replace(',', "+"));
                results.write(&out.join(name))?;
                println!(
                    "{:<14} {:<12} {:<40} {:>8.4} {:>8.4} {}",
                    c.task.as_str(),
                    c.model.as_str(),
                    c.ablations.to_list(),
                    results.summary.mean,
                    results.summary.std,
                    results.provenance.config_hash
                );
            }
        }
        Command::ExportVectors {
            checkpoint,
            data,
            level,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_data(&data)?;
            let table = export_vectors(&ck, &ds, level)?;
            table.write(&out)?;
            println!("{}", table.provenance.header());
            println!("{} rows of dimension {}", table.rows.len(), table.dim());
        }
        Command::Plot {
            vectors,
            out,
            color_by,
            subsample,
            perplexity,
            coords,
        } => {
            let table = VectorTable::load(&vectors)?;
            let seed = seed.unwrap_or(table.provenance.seed);
            let x: Vec<Vec<f64>> = table.rows.iter().map(|r| r.vector.clone()).collect();
            let tsne = TsneConfig {
                perplexity,
                seed,
                ..TsneConfig::default()
            };
            let y = embed_2d(&x, &tsne)?;
            let style = PlotStyle {
                color_by,
                subsample,
                seed,
                ..PlotStyle::default()
            };
            let summary = render_plot(&y, &table.rows, &style, &out)?;
            if let Some(p) = &coords {
                let mut text = format!("# {}\nstudent_id,question_id,x,y\n", Provenance::new(table.provenance.config_hash.clone(), seed).header());
                for (r, c) in table.rows.iter().zip(&y) {
                    text.push_str(&format!("{},{},{},{}\n", r.student_id, r.question_id, c[0], c[1]));
                }
                std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
            }
            println!("config_hash={} seed={seed}", table.provenance.config_hash);
            println!("{} of {} points drawn to {}", summary.drawn.len(), table.rows.len(), out.display());
        }
    }
    Ok(())
}
