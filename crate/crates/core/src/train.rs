//! Training loop (BCE + Adam + early stopping), classification metrics,
//! the cross-validation driver, and attention-weight export.

use crate::error::{Result, SmtaError};
use crate::model::{ModelConfig, SmtaFormer};
use crate::pipeline::{PatientRecord, ProcessedDataset};
use crate::tensor::{BoundParams, Graph, ParamSet, TensorId};
use serde::{Deserialize, Serialize};

/// Optimizer and loop hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional L2 strength; 0 disables it.
    pub l2: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 150,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 0.0,
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(SmtaError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SmtaError::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(SmtaError::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of plain score slices, clamped like the graph op.
pub fn bce_scalar(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SmtaError::Dimension {
            op: "bce_scalar",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut acc = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        let y = y as f64;
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(acc / scores.len() as f64)
}

// ── Metrics ──────────────────────────────────────────────────────────

/// One evaluation pass: thresholded confusion counts plus rank AUC.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// None when the labels are single-class.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub threshold: f64,
    /// Precision was reported as 0 because nothing crossed the threshold.
    pub no_predicted_positives: bool,
}

/// Mann-Whitney rank AUC; ties contribute 1/2. None if either class is empty.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Accuracy / precision / recall at `threshold` plus rank AUC.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return Err(SmtaError::Dimension {
            op: "compute_metrics",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.is_empty() {
        return Err(SmtaError::EmptySequence("compute_metrics"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let no_predicted_positives = tp + fp == 0;
    let precision = if no_predicted_positives { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok(Metrics {
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        precision,
        recall,
        auc: mann_whitney_auc(scores, labels),
        tp,
        fp,
        tn,
        fn_,
        threshold,
        no_predicted_positives,
    })
}

// ── Adam ─────────────────────────────────────────────────────────────

/// First/second moment buffers, aligned with the parameter set's order.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update over every named gradient. When l2 > 0 the
/// penalty gradient l2 * theta is added before the moment updates.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[(&str, &[f64])],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let m_corr = 1.0 - config.beta1.powi(t);
    let v_corr = 1.0 - config.beta2.powi(t);
    for (slot, (name, tensor)) in params.iter_mut().enumerate() {
        let (gname, grad) = grads[slot];
        debug_assert_eq!(gname, name);
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(SmtaError::Numeric(format!(
                "non-finite gradient for parameter {name}; training aborted"
            )));
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let mut g = grad[i];
            if config.l2 > 0.0 {
                g += config.l2 * data[i];
            }
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / m_corr;
            let v_hat = v[i] / v_corr;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

// ── Training loop ────────────────────────────────────────────────────

/// Anything trainable with this harness: bind parameters, score a batch.
pub trait BatchScorer {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Probabilities for the batch as a [batch x 1] node.
    fn score_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<TensorId>;

    fn predict_records(&self, records: &[&PatientRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let mut g = Graph::new();
            let bp = self.params().bind(&mut g);
            let p = self.score_batch(&mut g, &bp, chunk)?;
            out.extend_from_slice(g.value(p));
        }
        Ok(out)
    }
}

impl BatchScorer for SmtaFormer {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn score_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<TensorId> {
        Ok(self.forward_batch(g, bp, batch)?.predictions)
    }
}

impl BatchScorer for crate::model::LogisticReference {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn score_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<TensorId> {
        self.forward_batch(g, bp, batch)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// 1-based epoch at which training stopped.
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc\n");
        for e in &self.epochs {
            let auc = e.val_auc.map(|a| format!("{a}")).unwrap_or_else(|| "NA".into());
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, auc));
        }
        out
    }
}

/// Mini-batch training with seeded shuffling, per-epoch validation, and
/// early stopping on validation loss. The model is left holding the
/// parameters of the best validation epoch.
pub fn train<M: BatchScorer>(
    model: &mut M,
    train_records: &[&PatientRecord],
    val_records: &[&PatientRecord],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(SmtaError::Config("training set is empty".into()));
    }
    if val_records.is_empty() {
        return Err(SmtaError::Config("validation set is empty".into()));
    }
    use rand::seq::SliceRandom;

    let mut adam = AdamState::new(model.params());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stopped_epoch = 0;
    let val_labels: Vec<u8> = val_records.iter().map(|r| r.label).collect();

    for epoch in 1..=config.max_epochs {
        stopped_epoch = epoch;
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        let mut rng = crate::rng::derive_rng(config.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&PatientRecord> =
                batch_idx.iter().map(|&i| train_records[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|r| r.label as f64).collect();

            let mut g = Graph::new();
            let bp = model.params().bind(&mut g);
            let scores = model.score_batch(&mut g, &bp, &batch)?;
            let loss = g.bce_loss(scores, &labels)?;
            loss_sum += g.value(loss)[0] * batch.len() as f64;
            g.backward(loss)?;
            let grads = bp.grads(&g);
            adam_step(model.params_mut(), &grads, &mut adam, config)?;
        }
        let train_loss = loss_sum / train_records.len() as f64;

        let val_scores = model.predict_records(val_records)?;
        let val_loss = bce_scalar(&val_scores, &val_labels)?;
        let val_auc = mann_whitney_auc(&val_scores, &val_labels);
        history.push(EpochStats { epoch, train_loss, val_loss, val_auc });

        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.params().clone()));
        } else {
            let best_epoch = best.as_ref().unwrap().1;
            if epoch - best_epoch >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    *model.params_mut() = best_params;
    Ok(TrainHistory { epochs: history, best_epoch, stopped_epoch })
}

// ── Cross-validation ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

pub struct CvOutcome {
    pub report: CvReport,
    pub fold_models: Vec<SmtaFormer>,
    pub fold_histories: Vec<TrainHistory>,
}

fn summarize(folds: &[FoldResult]) -> (MetricSummary, MetricSummary) {
    let n = folds.len() as f64;
    let take = |f: &dyn Fn(&FoldResult) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = folds.iter().map(f).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (acc_m, acc_s) = take(&|r| r.metrics.accuracy);
    let (p_m, p_s) = take(&|r| r.metrics.precision);
    let (r_m, r_s) = take(&|r| r.metrics.recall);
    let (a_m, a_s) = take(&|r| r.metrics.auc.unwrap_or(f64::NAN));
    (
        MetricSummary { accuracy: acc_m, precision: p_m, recall: r_m, auc: a_m },
        MetricSummary { accuracy: acc_s, precision: p_s, recall: r_s, auc: a_s },
    )
}

/// Train one model per fold (that fold held out as the early-stop monitor,
/// the other folds as training data), evaluate each on the fixed test split,
/// and aggregate. Folds run `jobs` at a time; results are independent of the
/// level of parallelism.
pub fn cross_validate(
    dataset: &ProcessedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    jobs: usize,
) -> Result<CvOutcome> {
    let k = dataset.manifest.fold_ids.len();
    if k < 2 {
        return Err(SmtaError::Config("cross-validation needs at least 2 folds".into()));
    }
    let test: Vec<&PatientRecord> = dataset.test_records();
    if test.is_empty() {
        return Err(SmtaError::Config("test split is empty".into()));
    }
    let test_labels: Vec<u8> = test.iter().map(|r| r.label).collect();
    let jobs = jobs.max(1);

    let run_fold = |fold: usize| -> Result<(FoldResult, SmtaFormer, TrainHistory)> {
        let val_ids = &dataset.manifest.fold_ids[fold];
        let val: Vec<&PatientRecord> = dataset.records_by_ids(val_ids);
        let train_ids: Vec<String> = dataset
            .manifest
            .fold_ids
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, ids)| ids.clone())
            .collect();
        let train_recs: Vec<&PatientRecord> = dataset.records_by_ids(&train_ids);

        let fold_seed = train_config.seed.wrapping_add(0x9e3779b9 * (fold as u64 + 1));
        let mut model = SmtaFormer::init(model_config.clone(), fold_seed)?;
        let fold_tc = TrainConfig { seed: fold_seed, ..train_config.clone() };
        let history = train(&mut model, &train_recs, &val, &fold_tc)?;

        let scores = model.predict(&test)?;
        let metrics = compute_metrics(&scores, &test_labels, 0.5)?;
        Ok((
            FoldResult {
                fold,
                metrics,
                best_epoch: history.best_epoch,
                stopped_epoch: history.stopped_epoch,
            },
            model,
            history,
        ))
    };

    let mut slots: Vec<Option<Result<(FoldResult, SmtaFormer, TrainHistory)>>> =
        (0..k).map(|_| None).collect();
    for group in (0..k).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &fold in group {
                handles.push((fold, scope.spawn(move || run_fold(fold))));
            }
            for (fold, handle) in handles {
                slots[fold] = Some(handle.join().expect("fold thread panicked"));
            }
        });
    }

    let mut folds = Vec::with_capacity(k);
    let mut fold_models = Vec::with_capacity(k);
    let mut fold_histories = Vec::with_capacity(k);
    for slot in slots {
        let (result, model, history) = slot.expect("fold not run")?;
        folds.push(result);
        fold_models.push(model);
        fold_histories.push(history);
    }
    let (mean, std) = summarize(&folds);
    Ok(CvOutcome { report: CvReport { folds, mean, std }, fold_models, fold_histories })
}

/// Aligned-column table in the ACC / Precision / Recall / AUC layout.
pub fn report_table(rows: &[(String, MetricSummary)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>7} {:>10} {:>7} {:>7}\n",
        "Method", "ACC", "Precision", "Recall", "AUC"
    ));
    for (label, m) in rows {
        out.push_str(&format!(
            "{:<28} {:>7.3} {:>10.3} {:>7.3} {:>7.3}\n",
            label, m.accuracy, m.precision, m.recall, m.auc
        ));
    }
    out
}

/// Per-fold + mean/std rows for one cross-validation run.
pub fn cv_report_rows(label: &str, report: &CvReport) -> Vec<(String, MetricSummary)> {
    let mut rows = Vec::new();
    for f in &report.folds {
        rows.push((
            format!("{label} fold {}", f.fold + 1),
            MetricSummary {
                accuracy: f.metrics.accuracy,
                precision: f.metrics.precision,
                recall: f.metrics.recall,
                auc: f.metrics.auc.unwrap_or(f64::NAN),
            },
        ));
    }
    rows.push((format!("{label} mean"), report.mean.clone()));
    rows.push((format!("{label} std"), report.std.clone()));
    rows
}

// ── Attention export ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionExport {
    /// Head-major weight table; row h has n+1 entries, static key first.
    pub head_rows: Vec<Vec<f64>>,
    /// Key labels: "static" followed by the channel display names.
    pub keys: Vec<String>,
    pub records_used: usize,
    pub static_mean: f64,
    /// (1 - static_mean) / n, the algebraic complement of the static share.
    pub temporal_mean: f64,
    pub per_feature_means: Vec<(String, f64)>,
}

/// Average each head's fusion-attention weight row over the given records
/// (callers pass the positive-labeled ones).
pub fn export_attention(
    model: &SmtaFormer,
    records: &[&PatientRecord],
    channel_names: &[String],
) -> Result<AttentionExport> {
    if records.is_empty() {
        return Err(SmtaError::EmptySequence("export_attention: no positive records"));
    }
    let n = model.config.channels();
    if channel_names.len() != n {
        return Err(SmtaError::Config(format!(
            "expected {n} channel names, got {}",
            channel_names.len()
        )));
    }
    let heads = model.config.heads;
    let mut head_rows = vec![vec![0.0; n + 1]; heads];
    for record in records {
        let trace = model.forward(record)?;
        if trace.inter_weights.is_empty() {
            return Err(SmtaError::Config(
                "concat fusion exposes no attention weights to export".into(),
            ));
        }
        for (h, row) in trace.inter_weights.iter().enumerate() {
            for (acc, w) in head_rows[h].iter_mut().zip(row) {
                *acc += w;
            }
        }
    }
    for row in &mut head_rows {
        for w in row.iter_mut() {
            *w /= records.len() as f64;
        }
    }
    let mut keys = vec!["static".to_string()];
    keys.extend_from_slice(channel_names);

    let static_mean = head_rows.iter().map(|r| r[0]).sum::<f64>() / heads as f64;
    let temporal_mean = (1.0 - static_mean) / n as f64;
    let per_feature_means = (0..n)
        .map(|i| {
            let mean = head_rows.iter().map(|r| r[i + 1]).sum::<f64>() / heads as f64;
            (channel_names[i].clone(), mean)
        })
        .collect();
    Ok(AttentionExport {
        head_rows,
        keys,
        records_used: records.len(),
        static_mean,
        temporal_mean,
        per_feature_means,
    })
}

impl AttentionExport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("head,key,weight\n");
        for (h, row) in self.head_rows.iter().enumerate() {
            for (key, w) in self.keys.iter().zip(row) {
                out.push_str(&format!("{h},{key},{w}\n"));
            }
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let per_feature: serde_json::Map<String, serde_json::Value> = self
            .per_feature_means
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "records_used": self.records_used,
            "static_mean": self.static_mean,
            "temporal_mean": self.temporal_mean,
            "per_feature_means": per_feature,
        }))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionStrategy;
    use crate::rng::derive_rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            steps: 2,
            channel_widths: vec![1, 2],
            static_width: 2,
            width: 4,
            heads: 1,
            encoder_layers: 1,
            ff_width: 8,
            head_hidden: 4,
            fusion: FusionStrategy::DoubleAttention,
            share_channel_encoders: true,
            use_positional_encoding: true,
        }
    }

    fn toy_record(id: &str, label: u8, rng: &mut impl Rng, cfg: &ModelConfig) -> PatientRecord {
        // plant an easy signal so toy sets are learnable: positives shifted
        let shift = if label == 1 { 1.0 } else { -1.0 };
        PatientRecord {
            id: id.into(),
            label,
            static_features: (0..cfg.static_width)
                .map(|_| rng.random_range(-0.5..0.5) + shift * 0.5)
                .collect(),
            channels: cfg
                .channel_widths
                .iter()
                .map(|&w| {
                    (0..cfg.steps * w)
                        .map(|_| rng.random_range(-0.5..0.5) + shift * 0.5)
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_scalar(&[0.5], &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bce_scalar(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        // perfect predictions cost at most the clamp floor
        let loss = bce_scalar(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(loss <= -((1.0f64 - 1e-7).ln()) + 1e-15);
    }

    #[test]
    fn bce_constant_predictor_minimized_at_positive_rate() {
        let mut r = derive_rng(3, "train-tests", 0);
        for _ in 0..20 {
            let labels: Vec<u8> = (0..40).map(|_| r.random_range(0..2) as u8).collect();
            let rate = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
            let at = |p: f64| bce_scalar(&vec![p; labels.len()], &labels).unwrap();
            let best = at(rate.clamp(1e-7, 1.0 - 1e-7));
            for step in 1..20 {
                let p = step as f64 / 20.0;
                assert!(at(p) + 1e-12 >= best, "constant {p} beat the positive rate");
            }
        }
    }

    #[test]
    fn adam_first_step_matches_hand_expansion() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        let config = TrainConfig::default();
        let g = [1.0];
        adam_step(&mut params, &[("w", &g)], &mut state, &config).unwrap();
        let expect = 1.0 - 0.001 / (1.0 + 1e-8);
        let got = params.get("w").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::row(vec![0.3, -0.8, 2.0]).unwrap())
            .unwrap();
        let before = params.get("w").unwrap().data().to_vec();
        let mut state = AdamState::new(&params);
        let config = TrainConfig::default();
        let g = [0.0, 0.0, 0.0];
        for _ in 0..5 {
            adam_step(&mut params, &[("w", &g)], &mut state, &config).unwrap();
        }
        assert_eq!(params.get("w").unwrap().data(), before.as_slice());
    }

    #[test]
    fn adam_first_step_opposes_gradient_sign() {
        for &gval in &[3.7, -0.02, 1e-6, -250.0] {
            let mut params = ParamSet::new();
            params.insert("w", Tensor::scalar(0.0).unwrap()).unwrap();
            let mut state = AdamState::new(&params);
            let g = [gval];
            adam_step(&mut params, &[("w", &g)], &mut state, &TrainConfig::default()).unwrap();
            let moved = params.get("w").unwrap().data()[0];
            assert!(moved.signum() == -gval.signum(), "g {gval} moved {moved}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_parameter() {
        let mut params = ParamSet::new();
        params.insert("head.fc1", Tensor::scalar(0.0).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        let g = [f64::NAN];
        let err =
            adam_step(&mut params, &[("head.fc1", &g)], &mut state, &TrainConfig::default())
                .unwrap_err();
        assert!(err.to_string().contains("head.fc1"), "{err}");
    }

    #[test]
    fn metrics_perfect_and_tied_rankings() {
        let m = compute_metrics(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.accuracy, 1.0);

        let m = compute_metrics(&[0.5, 0.5], &[1, 0], 0.5).unwrap();
        assert_eq!(m.auc, Some(0.5));
    }

    #[test]
    fn metrics_three_sample_hand_case() {
        let m = compute_metrics(&[0.8, 0.6, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!(m.auc, Some(0.5));
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.tp, 1);
        assert_eq!(m.fp, 1);
        assert_eq!(m.fn_, 1);
        assert_eq!(m.tn, 0);
    }

    #[test]
    fn metrics_single_class_auc_undefined() {
        let m = compute_metrics(&[0.2, 0.9], &[1, 1], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn precision_zero_predictions_flagged() {
        let m = compute_metrics(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert!(m.no_predicted_positives);
        assert_eq!(m.precision, 0.0);
    }

    /// Trapezoidal ROC integration, kept as an independent oracle.
    pub(super) fn trapezoid_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let neg = labels.len() as f64 - pos;
        if pos == 0.0 || neg == 0.0 {
            return None;
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut auc = 0.0;
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        let (mut prev_tp, mut prev_fp) = (0.0f64, 0.0f64);
        let mut i = 0;
        while i < order.len() {
            let threshold = scores[order[i]];
            while i < order.len() && scores[order[i]] == threshold {
                if labels[order[i]] == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                i += 1;
            }
            auc += (fp - prev_fp) / neg * (tp + prev_tp) / (2.0 * pos);
            prev_tp = tp;
            prev_fp = fp;
        }
        Some(auc)
    }

    #[test]
    fn rank_auc_equals_trapezoid_auc_with_ties() {
        let mut r = derive_rng(5, "train-tests", 1);
        for _ in 0..200 {
            let n = r.random_range(2..40);
            let scores: Vec<f64> =
                (0..n).map(|_| (r.random_range(0..7) as f64) / 6.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2) as u8).collect();
            match (mann_whitney_auc(&scores, &labels), trapezoid_auc(&scores, &labels)) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-12, "rank {a} vs trapezoid {b}")
                }
                (None, None) => {}
                (a, b) => panic!("definedness disagrees: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = toy_config();
        let mut r = derive_rng(7, "train-tests", 2);
        let records: Vec<PatientRecord> = (0..12)
            .map(|i| toy_record(&format!("r{i}"), (i % 3 == 0) as u8, &mut r, &cfg))
            .collect();
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let tc = TrainConfig { max_epochs: 4, patience: 4, batch_size: 4, ..Default::default() };

        let mut m1 = SmtaFormer::init(cfg.clone(), 99).unwrap();
        let h1 = train(&mut m1, &refs, &refs, &tc).unwrap();
        let mut m2 = SmtaFormer::init(cfg, 99).unwrap();
        let h2 = train(&mut m2, &refs, &refs, &tc).unwrap();
        assert_eq!(
            serde_json::to_string(&h1).unwrap(),
            serde_json::to_string(&h2).unwrap()
        );
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn early_stop_restores_best_epoch_params() {
        // patience 1: as soon as validation worsens, training stops and the
        // previous (best) parameters come back
        let cfg = toy_config();
        let mut r = derive_rng(7, "train-tests", 3);
        let records: Vec<PatientRecord> = (0..8)
            .map(|i| toy_record(&format!("r{i}"), (i % 2) as u8, &mut r, &cfg))
            .collect();
        let refs: Vec<&PatientRecord> = records.iter().collect();
        // validation set designed to diverge: labels flipped
        let flipped: Vec<PatientRecord> = records
            .iter()
            .map(|rec| PatientRecord { label: 1 - rec.label, ..rec.clone() })
            .collect();
        let val_refs: Vec<&PatientRecord> = flipped.iter().collect();

        let tc = TrainConfig {
            max_epochs: 50,
            patience: 1,
            batch_size: 4,
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut model = SmtaFormer::init(cfg, 101).unwrap();
        let history = train(&mut model, &refs, &val_refs, &tc).unwrap();
        assert!(history.best_epoch <= history.stopped_epoch);
        assert_eq!(history.stopped_epoch, history.best_epoch + 1);
        // best epoch is never after stopping, and the val loss at best is
        // the minimum of the recorded losses
        let best = history.epochs[history.best_epoch - 1].val_loss;
        for e in &history.epochs {
            assert!(best <= e.val_loss + 1e-15);
        }
    }

    #[test]
    fn logistic_reference_fits_separable_points() {
        let cfg = toy_config();
        let mut r = derive_rng(7, "train-tests", 4);
        let a = toy_record("a", 1, &mut r, &cfg);
        let b = toy_record("b", 0, &mut r, &cfg);
        let mut lr = crate::model::LogisticReference::init(
            cfg.steps,
            cfg.channel_widths.clone(),
            cfg.static_width,
            7,
        )
        .unwrap();
        let refs = vec![&a, &b];
        let tc = TrainConfig {
            max_epochs: 400,
            patience: 400,
            batch_size: 2,
            learning_rate: 0.05,
            ..Default::default()
        };
        let history = train(&mut lr, &refs, &refs, &tc).unwrap();
        assert!(
            history.epochs.last().unwrap().train_loss < 0.01,
            "loss {}",
            history.epochs.last().unwrap().train_loss
        );
    }

    #[test]
    fn export_attention_rows_and_identity() {
        let cfg = toy_config();
        let model = SmtaFormer::init(cfg.clone(), 44).unwrap();
        let mut r = derive_rng(7, "train-tests", 5);
        let records: Vec<PatientRecord> =
            (0..6).map(|i| toy_record(&format!("r{i}"), 1, &mut r, &cfg)).collect();
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let names = vec!["HR".to_string(), "Eye".to_string()];
        let export = export_attention(&model, &refs, &names).unwrap();

        for row in &export.head_rows {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        // exact algebraic identity by construction
        let n = cfg.channel_widths.len() as f64;
        assert_eq!(export.temporal_mean, (1.0 - export.static_mean) / n);
        // and the direct temporal mean agrees to float tolerance
        let direct: f64 = export
            .per_feature_means
            .iter()
            .map(|(_, v)| v)
            .sum::<f64>()
            / n;
        assert!((direct - export.temporal_mean).abs() < 1e-9);

        let csv = export.to_csv();
        assert!(csv.starts_with("head,key,weight\n"));
        assert!(csv.contains("0,static,"));
        assert!(csv.contains("0,HR,"));
    }

    #[test]
    fn export_attention_requires_positive_records() {
        let cfg = toy_config();
        let model = SmtaFormer::init(cfg, 44).unwrap();
        let err = export_attention(&model, &[], &["HR".into(), "Eye".into()]).unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");
    }
}
