//! `smta`: one binary wiring cohort generation, preprocessing, training,
//! evaluation, and attention export into reproducible runs. All randomness
//! flows from `--seed`; identical inputs and seed give byte-identical outputs.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{echo_config, load_file_config, ModelSection};
use smta_core::model::{load_checkpoint, save_checkpoint, ModelConfig, SmtaFormer};
use smta_core::pipeline::{
    self, default_roster, load_dataset, PatientRecord, PreprocessConfig, ProcessedDataset,
};
use smta_core::synth::{self, SynthConfig};
use smta_core::tensor::grad_check;
use smta_core::train::{
    compute_metrics, cross_validate, cv_report_rows, export_attention, report_table, train,
    MetricSummary, TrainConfig,
};
use smta_core::{Result, SmtaError};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "smta", about = "Static + multivariate-temporal attentive fusion model runs", version)]
struct Cli {
    /// JSON configuration file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Parallel jobs for fold-level work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Fusion strategy: concat, saf, or dsaf.
    #[arg(long)]
    fusion: Option<String>,
    /// Encoder depth (1, 2, or 3).
    #[arg(long)]
    encoder_layers: Option<usize>,
    /// Model width d.
    #[arg(long)]
    width: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward inner width.
    #[arg(long)]
    ff_width: Option<usize>,
    /// Prediction head hidden width.
    #[arg(long)]
    head_hidden: Option<usize>,
}

impl ModelFlags {
    fn as_section(&self) -> ModelSection {
        ModelSection {
            width: self.width,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            ff_width: self.ff_width,
            head_hidden: self.head_hidden,
            fusion: self.fusion.clone(),
            share_channel_encoders: None,
            use_positional_encoding: None,
        }
    }
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// L2 penalty strength.
    #[arg(long)]
    l2: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, mut tc: TrainConfig, seed: u64) -> TrainConfig {
        if let Some(v) = self.lr {
            tc.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.epochs {
            tc.max_epochs = v;
        }
        if let Some(v) = self.patience {
            tc.patience = v;
        }
        if let Some(v) = self.l2 {
            tc.l2 = v;
        }
        tc.seed = seed;
        tc
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted risk signal.
    GenData {
        /// Number of stays.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Target positive rate.
        #[arg(long)]
        positive_rate: Option<f64>,
        /// Signal strength in [0, 1].
        #[arg(long)]
        signal: Option<f64>,
        /// Per-event drop probability.
        #[arg(long)]
        missingness: Option<f64>,
    },
    /// Filter, label, aggregate, split, and normalize a raw cohort.
    Preprocess {
        /// Newline-delimited RawStay JSON.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window_hours: Option<usize>,
        #[arg(long)]
        horizon_days: Option<i64>,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Train one model (one fold held out as the early-stop monitor).
    Train {
        /// Preprocessed dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Which fold to hold out as validation.
        #[arg(long, default_value_t = 0)]
        val_fold: usize,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        tflags: TrainFlags,
    },
    /// K-fold cross-validation against the fixed test split.
    CrossValidate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        tflags: TrainFlags,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// test, train, or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export fusion attention weights averaged over positive records.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// test, train, or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Finite-difference gradient audit of the full model on a toy shape.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn exit_code(err: &SmtaError) -> i32 {
    match err {
        SmtaError::Config(_) => 2,
        SmtaError::Data(_)
        | SmtaError::Io(_)
        | SmtaError::Serde(_)
        | SmtaError::PipelineOrder(_) => 3,
        SmtaError::Numeric(_)
        | SmtaError::Dimension { .. }
        | SmtaError::NotScalar { .. }
        | SmtaError::EmptySequence(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn split_records<'d>(ds: &'d ProcessedDataset, split: &str) -> Result<Vec<&'d PatientRecord>> {
    match split {
        "test" => Ok(ds.test_records()),
        "train" => Ok(ds.train_records()),
        "all" => Ok(ds.records.iter().collect()),
        other => Err(SmtaError::Config(format!(
            "unknown split {other:?}; expected test, train, or all"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_config = load_file_config(cli.config.as_deref())?;
    let out = &cli.out;

    match cli.command {
        Command::GenData { n, positive_rate, signal, missingness } => {
            let mut sc = file_config.synth.unwrap_or_default();
            sc.records = n;
            sc.seed = cli.seed;
            if let Some(v) = positive_rate {
                sc.positive_rate = v;
            }
            if let Some(v) = signal {
                sc.signal_strength = v;
            }
            if let Some(v) = missingness {
                sc.missingness = v;
            }
            cmd_gen_data(&sc, out)
        }
        Command::Preprocess { input, window_hours, horizon_days, test_fraction, folds } => {
            let mut pc = file_config.preprocess.unwrap_or_default();
            pc.seed = cli.seed;
            if let Some(v) = window_hours {
                pc.window_hours = v;
            }
            if let Some(v) = horizon_days {
                pc.horizon_days = v;
            }
            if let Some(v) = test_fraction {
                pc.test_fraction = v;
            }
            if let Some(v) = folds {
                pc.folds = v;
            }
            cmd_preprocess(&input, &pc, out)
        }
        Command::Train { data, val_fold, model, tflags } => {
            let ds = load_dataset(&data)?;
            let mc = file_config.model.resolve(&model.as_section(), &ds.meta)?;
            let tc = tflags.apply(file_config.train.unwrap_or_default(), cli.seed);
            cmd_train(&ds, &mc, &tc, val_fold, out)
        }
        Command::CrossValidate { data, model, tflags } => {
            let ds = load_dataset(&data)?;
            let mc = file_config.model.resolve(&model.as_section(), &ds.meta)?;
            let tc = tflags.apply(file_config.train.unwrap_or_default(), cli.seed);
            cmd_cross_validate(&ds, &mc, &tc, cli.jobs, out)
        }
        Command::Eval { checkpoint, data, split } => {
            let ds = load_dataset(&data)?;
            let model = load_checkpoint(&checkpoint)?;
            cmd_eval(&ds, &model, &split, out)
        }
        Command::ExportAttention { checkpoint, data, split } => {
            let ds = load_dataset(&data)?;
            let model = load_checkpoint(&checkpoint)?;
            cmd_export_attention(&ds, &model, &split, out)
        }
        Command::GradCheck { eps, tolerance } => cmd_grad_check(eps, tolerance, cli.seed),
    }
}

fn cmd_gen_data(sc: &SynthConfig, out: &Path) -> Result<()> {
    let (stays, truth) = synth::generate(sc)?;
    std::fs::create_dir_all(out)?;
    let file = std::fs::File::create(out.join("cohort.ndjson"))?;
    pipeline::write_raw_stays(std::io::BufWriter::new(file), &stays)?;
    std::fs::write(
        out.join("ground_truth.json"),
        serde_json::to_string_pretty(&truth)?,
    )?;
    echo_config(out, sc)?;
    let positives = truth.labels.iter().filter(|&&l| l == 1).count();
    println!(
        "wrote {} stays ({positives} positive) to {}",
        stays.len(),
        out.join("cohort.ndjson").display()
    );
    if let Some(auc) = synth::oracle_auc(&truth) {
        println!("oracle risk AUC: {auc:.4}");
    }
    Ok(())
}

fn cmd_preprocess(input: &Path, pc: &PreprocessConfig, out: &Path) -> Result<()> {
    let file = std::fs::File::open(input)
        .map_err(|e| SmtaError::Data(format!("cannot open {}: {e}", input.display())))?;
    let stays = pipeline::read_raw_stays(std::io::BufReader::new(file))?;
    let ds = pipeline::preprocess(stays, &default_roster(), pc)?;
    pipeline::write_dataset(out, &ds)?;
    echo_config(out, pc)?;
    println!(
        "kept {} of {} stays; {} train / {} test ({} positives total); {} folds",
        ds.exclusions.retained,
        ds.exclusions.input,
        ds.manifest.counts.train,
        ds.manifest.counts.test,
        ds.meta.positives,
        ds.manifest.fold_ids.len(),
    );
    if !ds.normalizer.dropped.is_empty() {
        println!("dropped zero-variance variables: {:?}", ds.normalizer.dropped);
    }
    Ok(())
}

fn cmd_train(
    ds: &ProcessedDataset,
    mc: &ModelConfig,
    tc: &TrainConfig,
    val_fold: usize,
    out: &Path,
) -> Result<()> {
    let k = ds.manifest.fold_ids.len();
    if val_fold >= k {
        return Err(SmtaError::Config(format!(
            "val fold {val_fold} out of range for {k} folds"
        )));
    }
    let val = ds.records_by_ids(&ds.manifest.fold_ids[val_fold]);
    let train_ids: Vec<String> = ds
        .manifest
        .fold_ids
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != val_fold)
        .flat_map(|(_, ids)| ids.clone())
        .collect();
    let train_recs = ds.records_by_ids(&train_ids);

    let mut model = SmtaFormer::init(mc.clone(), tc.seed)?;
    let history = train(&mut model, &train_recs, &val, tc)?;

    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.json"), &model)?;
    std::fs::write(out.join("history.csv"), history.to_csv())?;

    let test = ds.test_records();
    let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
    let scores = model.predict(&test)?;
    let metrics = compute_metrics(&scores, &labels, 0.5)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    let row = MetricSummary {
        accuracy: metrics.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        auc: metrics.auc.unwrap_or(f64::NAN),
    };
    let table = report_table(&[(format!("{} test", mc.fusion), row)]);
    std::fs::write(out.join("metrics.txt"), &table)?;
    echo_config(out, &serde_json::json!({ "model": mc, "train": tc, "val_fold": val_fold }))?;
    println!(
        "best epoch {} (stopped {}); test metrics:\n{table}",
        history.best_epoch, history.stopped_epoch
    );
    Ok(())
}

fn cmd_cross_validate(
    ds: &ProcessedDataset,
    mc: &ModelConfig,
    tc: &TrainConfig,
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let outcome = cross_validate(ds, mc, tc, jobs)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    let table = report_table(&cv_report_rows(&mc.fusion.to_string(), &outcome.report));
    std::fs::write(out.join("report.txt"), &table)?;
    for (i, (model, history)) in outcome
        .fold_models
        .iter()
        .zip(&outcome.fold_histories)
        .enumerate()
    {
        let fold_dir = out.join(format!("fold_{i}"));
        std::fs::create_dir_all(&fold_dir)?;
        save_checkpoint(&fold_dir.join("checkpoint.json"), model)?;
        std::fs::write(fold_dir.join("history.csv"), history.to_csv())?;
    }
    echo_config(out, &serde_json::json!({ "model": mc, "train": tc, "jobs": jobs }))?;
    println!("{table}");
    Ok(())
}

fn cmd_eval(ds: &ProcessedDataset, model: &SmtaFormer, split: &str, out: &Path) -> Result<()> {
    let records = split_records(ds, split)?;
    if records.is_empty() {
        return Err(SmtaError::Config(format!("split {split:?} is empty")));
    }
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let scores = model.predict(&records)?;
    let metrics = compute_metrics(&scores, &labels, 0.5)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    let row = MetricSummary {
        accuracy: metrics.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        auc: metrics.auc.unwrap_or(f64::NAN),
    };
    let table = report_table(&[(format!("{} {split}", model.config.fusion), row)]);
    std::fs::write(out.join("metrics.txt"), &table)?;
    echo_config(out, &serde_json::json!({ "split": split, "model": model.config }))?;
    println!("{table}");
    Ok(())
}

fn cmd_export_attention(
    ds: &ProcessedDataset,
    model: &SmtaFormer,
    split: &str,
    out: &Path,
) -> Result<()> {
    let records = split_records(ds, split)?;
    let positives: Vec<&PatientRecord> =
        records.into_iter().filter(|r| r.label == 1).collect();
    let export = export_attention(model, &positives, &ds.meta.channel_names)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("heatmap.csv"), export.to_csv())?;
    std::fs::write(out.join("attention_summary.json"), export.summary_json()?)?;
    echo_config(out, &serde_json::json!({ "split": split, "records_used": export.records_used }))?;
    println!(
        "averaged {} positive records; static weight {:.4}, temporal mean {:.6}",
        export.records_used, export.static_mean, export.temporal_mean
    );
    Ok(())
}

fn cmd_grad_check(eps: f64, tolerance: f64, seed: u64) -> Result<()> {
    // toy shape: two channels, two steps, width 4, one head, one layer
    let config = ModelConfig {
        steps: 2,
        channel_widths: vec![1, 3],
        static_width: 3,
        width: 4,
        heads: 1,
        encoder_layers: 1,
        ff_width: 8,
        head_hidden: 2,
        fusion: smta_core::model::FusionStrategy::DoubleAttention,
        share_channel_encoders: true,
        use_positional_encoding: true,
    };
    let model = SmtaFormer::init(config.clone(), seed)?;
    let mut rng = smta_core::rng::derive_rng(seed, "grad-check-records", 0);
    let records: Vec<PatientRecord> = (0..2)
        .map(|i| random_record(&config, &format!("gc{i}"), (i % 2) as u8, &mut rng))
        .collect();
    let labels: Vec<f64> = records.iter().map(|r| r.label as f64).collect();
    let refs: Vec<&PatientRecord> = records.iter().collect();

    let err = grad_check(
        |g, bp| {
            let fwd = model.forward_batch(g, bp, &refs)?;
            g.bce_loss(fwd.predictions, &labels)
        },
        &model.params,
        eps,
    )?;
    println!(
        "max relative gradient error over {} parameters: {err:.3e} (tolerance {tolerance:.1e})",
        model.params.num_scalars()
    );
    if err < tolerance {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(SmtaError::Numeric(format!(
            "gradient check failed: {err:.3e} >= {tolerance:.1e}"
        )))
    }
}

fn random_record(
    config: &ModelConfig,
    id: &str,
    label: u8,
    rng: &mut impl rand::Rng,
) -> PatientRecord {
    PatientRecord {
        id: id.to_string(),
        label,
        static_features: (0..config.static_width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        channels: config
            .channel_widths
            .iter()
            .map(|&w| (0..config.steps * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    }
}
