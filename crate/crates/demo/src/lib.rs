//! Browser demo: generate a small synthetic cohort, run it through the
//! preprocessing pipeline, train a compact fusion model, and inspect the loss
//! curve, ROC curve, and fusion-attention heatmap.
//!
//! Everything crosses the JS boundary as JSON strings, so this crate builds
//! and tests on native targets too; only the `wasm_bindgen` attributes become
//! meaningful in the browser.

use serde::Serialize;
use smta_core::model::{FusionStrategy, ModelConfig, SmtaFormer};
use smta_core::pipeline::{self, default_roster, PreprocessConfig, ProcessedDataset};
use smta_core::synth::{self, SynthConfig};
use smta_core::train::{
    self, compute_metrics, export_attention, train as run_training, TrainConfig,
};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct CohortSummary {
    records: usize,
    positives: usize,
    train: usize,
    test: usize,
    oracle_auc: Option<f64>,
    channel_names: Vec<String>,
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: Vec<EpochPoint>,
    best_epoch: usize,
    stopped_epoch: usize,
    test_accuracy: f64,
    test_precision: f64,
    test_recall: f64,
    test_auc: Option<f64>,
    fusion: String,
}

#[derive(Serialize)]
struct EpochPoint {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_auc: Option<f64>,
}

#[derive(Serialize)]
struct RocPoint {
    fpr: f64,
    tpr: f64,
}

#[derive(Serialize)]
struct Heatmap {
    keys: Vec<String>,
    rows: Vec<Vec<f64>>,
    static_mean: f64,
    temporal_mean: f64,
}

fn err_string(e: smta_core::SmtaError) -> String {
    e.to_string()
}

/// One interactive session: a generated cohort plus an optionally trained
/// model over it.
#[wasm_bindgen]
pub struct DemoSession {
    dataset: Option<ProcessedDataset>,
    model: Option<SmtaFormer>,
    oracle_auc: Option<f64>,
}

impl Default for DemoSession {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new() -> DemoSession {
        DemoSession { dataset: None, model: None, oracle_auc: None }
    }

    /// Generate a cohort and run the preprocessing pipeline over it.
    /// `signal` is the planted signal strength in [0, 1].
    pub fn generate(&mut self, records: usize, signal: f64, seed: u32) -> Result<String, String> {
        let config = SynthConfig {
            records,
            signal_strength: signal,
            seed: seed as u64,
            positive_rate: 0.2,
            missingness: 0.15,
        };
        let (stays, truth) = synth::generate(&config).map_err(err_string)?;
        self.oracle_auc = synth::oracle_auc(&truth);
        // short window keeps in-browser training quick
        let pc = PreprocessConfig {
            window_hours: 8,
            folds: 4,
            seed: seed as u64,
            ..Default::default()
        };
        let ds = pipeline::preprocess(stays, &default_roster(), &pc).map_err(err_string)?;
        let summary = CohortSummary {
            records: ds.meta.records,
            positives: ds.meta.positives,
            train: ds.manifest.counts.train,
            test: ds.manifest.counts.test,
            oracle_auc: self.oracle_auc,
            channel_names: ds.meta.channel_names.clone(),
        };
        self.model = None;
        self.dataset = Some(ds);
        serde_json::to_string(&summary).map_err(|e| e.to_string())
    }

    /// Train a compact model on the generated cohort and return the loss
    /// history plus held-out test metrics.
    pub fn train(&mut self, epochs: usize, fusion: &str, seed: u32) -> Result<String, String> {
        let ds = self.dataset.as_ref().ok_or("generate a cohort first")?;
        let strategy: FusionStrategy = fusion.parse().map_err(err_string)?;
        let mut mc = ModelConfig::new(
            ds.meta.steps,
            ds.meta.channel_widths.clone(),
            ds.meta.static_width,
        );
        mc.width = 16;
        mc.heads = 2;
        mc.encoder_layers = 1;
        mc.ff_width = 32;
        mc.head_hidden = 8;
        mc.fusion = strategy;
        let tc = TrainConfig {
            max_epochs: epochs.clamp(1, 60),
            patience: epochs.clamp(1, 60),
            learning_rate: 0.002,
            batch_size: 16,
            seed: seed as u64,
            ..Default::default()
        };

        let val = ds.records_by_ids(&ds.manifest.fold_ids[0]);
        let train_ids: Vec<String> = ds.manifest.fold_ids[1..]
            .iter()
            .flatten()
            .cloned()
            .collect();
        let train_recs = ds.records_by_ids(&train_ids);

        let mut model = SmtaFormer::init(mc, seed as u64).map_err(err_string)?;
        let history = run_training(&mut model, &train_recs, &val, &tc).map_err(err_string)?;

        let test = ds.test_records();
        let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
        let scores = model.predict(&test).map_err(err_string)?;
        let metrics = compute_metrics(&scores, &labels, 0.5).map_err(err_string)?;

        let summary = TrainSummary {
            epochs: history
                .epochs
                .iter()
                .map(|e| EpochPoint {
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    val_loss: e.val_loss,
                    val_auc: e.val_auc,
                })
                .collect(),
            best_epoch: history.best_epoch,
            stopped_epoch: history.stopped_epoch,
            test_accuracy: metrics.accuracy,
            test_precision: metrics.precision,
            test_recall: metrics.recall,
            test_auc: metrics.auc,
            fusion: strategy.to_string(),
        };
        self.model = Some(model);
        serde_json::to_string(&summary).map_err(|e| e.to_string())
    }

    /// ROC curve of the trained model on the test split.
    pub fn roc_curve(&self) -> Result<String, String> {
        let ds = self.dataset.as_ref().ok_or("generate a cohort first")?;
        let model = self.model.as_ref().ok_or("train a model first")?;
        let test = ds.test_records();
        let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
        let scores = model.predict(&test).map_err(err_string)?;

        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let pos = labels.iter().filter(|&&l| l == 1).count().max(1) as f64;
        let neg = labels.iter().filter(|&&l| l == 0).count().max(1) as f64;
        let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
        let (mut tp, mut fp) = (0.0, 0.0);
        for &i in &order {
            if labels[i] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            points.push(RocPoint { fpr: fp / neg, tpr: tp / pos });
        }
        serde_json::to_string(&points).map_err(|e| e.to_string())
    }

    /// Fusion attention heatmap averaged over positive records.
    pub fn attention_heatmap(&self) -> Result<String, String> {
        let ds = self.dataset.as_ref().ok_or("generate a cohort first")?;
        let model = self.model.as_ref().ok_or("train a model first")?;
        let positives: Vec<&pipeline::PatientRecord> =
            ds.records.iter().filter(|r| r.label == 1).collect();
        let export =
            export_attention(model, &positives, &ds.meta.channel_names).map_err(err_string)?;
        let heatmap = Heatmap {
            keys: export.keys,
            rows: export.head_rows,
            static_mean: export.static_mean,
            temporal_mean: export.temporal_mean,
        };
        serde_json::to_string(&heatmap).map_err(|e| e.to_string())
    }
}

/// The sinusoidal positional encoding table as JSON rows, for visualization.
#[wasm_bindgen]
pub fn positional_encoding_table(steps: usize, width: usize) -> Result<String, String> {
    let table = smta_core::blocks::positional_encoding(steps, width).map_err(err_string)?;
    let rows: Vec<Vec<f64>> = table
        .data()
        .chunks_exact(width)
        .map(|r| r.to_vec())
        .collect();
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// Rank AUC of arbitrary score/label arrays (used by the page to annotate
/// the ROC plot).
#[wasm_bindgen]
pub fn rank_auc(scores: Vec<f64>, labels: Vec<u8>) -> Option<f64> {
    train::mann_whitney_auc(&scores, &labels)
}
