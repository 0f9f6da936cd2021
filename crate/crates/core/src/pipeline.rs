//! Cohort preprocessing: raw event-stream stays in, model-ready records out.
//!
//! The flow is filter -> label -> hourly aggregation -> split -> fit
//! normalizer on the training split -> apply everywhere. Missing hours are
//! forward- then backward-filled; continuous variables are z-scored and
//! discrete variables one-hot encoded against vocabularies fit on training
//! data only.

use crate::error::{Result, SmtaError};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// One timestamped observation of a temporal variable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalEvent {
    pub variable: String,
    pub time: DateTime<Utc>,
    pub value: f64,
}

/// One ICU stay as it arrives from extraction, before any preprocessing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawStay {
    pub stay_id: String,
    pub age_years: f64,
    pub sex: String,
    pub insurance: String,
    pub ethnicity: String,
    #[serde(default)]
    pub icd9_codes: Vec<String>,
    #[serde(default)]
    pub pregnancy_admission: bool,
    pub stay_start: DateTime<Utc>,
    pub stay_end: DateTime<Utc>,
    #[serde(default)]
    pub next_icu_admission: Option<DateTime<Utc>>,
    #[serde(default)]
    pub death_time: Option<DateTime<Utc>>,
    pub events: Vec<TemporalEvent>,
}

impl RawStay {
    pub fn stay_hours(&self) -> f64 {
        (self.stay_end - self.stay_start).num_seconds() as f64 / 3600.0
    }

    /// Died during the stay itself (these stays are filtered out).
    pub fn died_in_icu(&self) -> bool {
        matches!(self.death_time, Some(d) if d <= self.stay_end)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Discrete,
}

/// Descriptor for one temporal channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariableSpec {
    pub id: String,
    pub display: String,
    pub kind: VariableKind,
}

/// The four static + twelve temporal variables of the cohort.
pub fn default_roster() -> Vec<VariableSpec> {
    let spec = |id: &str, display: &str, kind: VariableKind| VariableSpec {
        id: id.to_string(),
        display: display.to_string(),
        kind,
    };
    use VariableKind::*;
    vec![
        spec("dbp", "DBP", Continuous),
        spec("glucose", "Glucose", Continuous),
        spec("heart_rate", "HR", Continuous),
        spec("mbp", "MBP", Continuous),
        spec("spo2", "OS", Continuous),
        spec("resp_rate", "RR", Continuous),
        spec("sbp", "SBP", Continuous),
        spec("temperature", "Temp", Continuous),
        spec("gcs_eye", "Eye", Discrete),
        spec("gcs_motor", "Motor", Discrete),
        spec("gcs_verbal", "Verbal", Discrete),
        spec("gcs_total", "Total", Discrete),
    ]
}

/// Cohort inclusion rules.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterRules {
    pub icd_allowlist: Vec<String>,
    pub min_age_years: f64,
    pub min_stay_hours: f64,
    pub max_stay_hours: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            icd_allowlist: vec!["4010".into(), "4011".into(), "4019".into()],
            min_age_years: 18.0,
            min_stay_hours: 24.0,
            max_stay_hours: 72.0,
        }
    }
}

/// Per-rule exclusion counts; each excluded stay is attributed to the first
/// rule it fails, so the counts sum to input - retained.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ExclusionReport {
    pub input: usize,
    pub no_qualifying_icd: usize,
    pub under_age: usize,
    pub pregnancy_admission: usize,
    pub died_in_icu: usize,
    pub stay_too_short: usize,
    pub stay_too_long: usize,
    pub retained: usize,
}

impl ExclusionReport {
    pub fn excluded_total(&self) -> usize {
        self.no_qualifying_icd
            + self.under_age
            + self.pregnancy_admission
            + self.died_in_icu
            + self.stay_too_short
            + self.stay_too_long
    }
}

/// Keep only stays passing every rule; report per-rule exclusion counts.
pub fn filter_cohort(stays: Vec<RawStay>, rules: &FilterRules) -> (Vec<RawStay>, ExclusionReport) {
    let mut report = ExclusionReport { input: stays.len(), ..Default::default() };
    let mut kept = Vec::new();
    for stay in stays {
        if !rules.icd_allowlist.is_empty()
            && !stay.icd9_codes.iter().any(|c| rules.icd_allowlist.contains(c))
        {
            report.no_qualifying_icd += 1;
        } else if stay.age_years < rules.min_age_years {
            report.under_age += 1;
        } else if stay.pregnancy_admission {
            report.pregnancy_admission += 1;
        } else if stay.died_in_icu() {
            report.died_in_icu += 1;
        } else if stay.stay_hours() <= rules.min_stay_hours {
            report.stay_too_short += 1;
        } else if stay.stay_hours() >= rules.max_stay_hours {
            report.stay_too_long += 1;
        } else {
            kept.push(stay);
        }
    }
    report.retained = kept.len();
    (kept, report)
}

/// 1 iff the patient re-enters the ICU or dies within `horizon_days` of the
/// stay end.
pub fn label_stay(stay: &RawStay, horizon_days: i64) -> Result<u8> {
    let horizon = Duration::days(horizon_days);
    if let Some(next) = stay.next_icu_admission {
        if next < stay.stay_end {
            return Err(SmtaError::Data(format!(
                "stay {}: next ICU admission precedes stay end",
                stay.stay_id
            )));
        }
        if next - stay.stay_end <= horizon {
            return Ok(1);
        }
    }
    if let Some(death) = stay.death_time {
        if death - stay.stay_end <= horizon {
            return Ok(1);
        }
    }
    Ok(0)
}

/// Bucket events into `hours` hourly slots ending at `window_end`.
/// Continuous variables take the within-hour mean; discrete variables take
/// the mode, ties resolved toward the most recently observed tied value.
/// Hours with no observations are `None`.
pub fn aggregate_hourly(
    events: &[(DateTime<Utc>, f64)],
    kind: VariableKind,
    window_end: DateTime<Utc>,
    hours: usize,
) -> Vec<Option<f64>> {
    let window_start = window_end - Duration::hours(hours as i64);
    let mut buckets: Vec<Vec<(DateTime<Utc>, f64)>> = vec![Vec::new(); hours];
    for &(time, value) in events {
        if time < window_start || time > window_end {
            continue;
        }
        let offset = (time - window_start).num_seconds();
        let idx = ((offset / 3600) as usize).min(hours - 1);
        buckets[idx].push((time, value));
    }
    buckets
        .into_iter()
        .map(|obs| {
            if obs.is_empty() {
                return None;
            }
            match kind {
                VariableKind::Continuous => {
                    Some(obs.iter().map(|(_, v)| v).sum::<f64>() / obs.len() as f64)
                }
                VariableKind::Discrete => Some(mode_most_recent(&obs)),
            }
        })
        .collect()
}

fn mode_most_recent(obs: &[(DateTime<Utc>, f64)]) -> f64 {
    // count occurrences per exact value; remember each value's latest time
    let mut tally: Vec<(f64, usize, DateTime<Utc>)> = Vec::new();
    for &(time, value) in obs {
        match tally.iter_mut().find(|(v, _, _)| *v == value) {
            Some(entry) => {
                entry.1 += 1;
                if time > entry.2 {
                    entry.2 = time;
                }
            }
            None => tally.push((value, 1, time)),
        }
    }
    let max_count = tally.iter().map(|(_, c, _)| *c).max().unwrap();
    tally
        .iter()
        .filter(|(_, c, _)| *c == max_count)
        .max_by_key(|(_, _, t)| *t)
        .unwrap()
        .0
}

/// Forward-fill, then backward-fill leading gaps; a fully missing series
/// takes the training-set fallback everywhere.
pub fn fill_missing(series: &[Option<f64>], fallback: Option<f64>) -> Result<Vec<f64>> {
    if series.iter().all(Option::is_none) {
        let fb = fallback.ok_or_else(|| {
            SmtaError::PipelineOrder(
                "fully missing series needs a training fallback; fit the normalizer first".into(),
            )
        })?;
        return Ok(vec![fb; series.len()]);
    }
    let mut out = Vec::with_capacity(series.len());
    let mut last = None;
    for v in series {
        if v.is_some() {
            last = *v;
        }
        out.push(last);
    }
    // leading gap: backfill from the first observed value
    let first = out.iter().flatten().copied().next().unwrap();
    Ok(out.into_iter().map(|v| v.unwrap_or(first)).collect())
}

/// A stay after labeling and hourly aggregation, before normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregatedStay {
    pub id: String,
    pub label: u8,
    pub age_years: f64,
    pub sex: String,
    pub insurance: String,
    pub ethnicity: String,
    /// One series per roster variable, indexed in roster order.
    pub series: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Everything fit on the training split that the transform needs: per-variable
/// statistics, vocabularies, and fallback values for fully missing channels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizerState {
    pub continuous: BTreeMap<String, MeanStd>,
    /// Discrete vocabularies, sorted ascending; one-hot width = len.
    pub vocab: BTreeMap<String, Vec<f64>>,
    /// Per-variable fill value for fully missing series (mean or mode).
    pub fallback: BTreeMap<String, f64>,
    /// Continuous variables dropped for zero training variance.
    pub dropped: Vec<String>,
    pub age: MeanStd,
    pub sex_vocab: Vec<String>,
    pub insurance_vocab: Vec<String>,
    pub ethnicity_vocab: Vec<String>,
}

/// Counters incremented while applying the normalizer.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct ApplyStats {
    pub unseen_categories: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

fn mode_of(values: &[f64]) -> f64 {
    let mut tally: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        match tally.iter_mut().find(|(x, _)| *x == v) {
            Some(e) => e.1 += 1,
            None => tally.push((v, 1)),
        }
    }
    tally.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    tally.iter().max_by_key(|(_, c)| *c).unwrap().0
}

/// Fit statistics, vocabularies, and fallbacks on the training split only.
pub fn fit_normalizer(train: &[&AggregatedStay], roster: &[VariableSpec]) -> Result<NormalizerState> {
    if train.is_empty() {
        return Err(SmtaError::Config("cannot fit a normalizer on zero records".into()));
    }
    let mut continuous = BTreeMap::new();
    let mut vocab = BTreeMap::new();
    let mut fallback = BTreeMap::new();
    let mut dropped = Vec::new();

    for (vi, var) in roster.iter().enumerate() {
        let observed: Vec<f64> = train
            .iter()
            .flat_map(|s| s.series[vi].iter().flatten().copied())
            .collect();
        if observed.is_empty() {
            return Err(SmtaError::Data(format!(
                "variable {} has no training observations",
                var.id
            )));
        }
        match var.kind {
            VariableKind::Continuous => {
                let stat = mean_std(&observed);
                if stat.std == 0.0 {
                    dropped.push(var.id.clone());
                } else {
                    fallback.insert(var.id.clone(), stat.mean);
                    continuous.insert(var.id.clone(), stat);
                }
            }
            VariableKind::Discrete => {
                let mut values: Vec<f64> = observed.clone();
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                values.dedup();
                fallback.insert(var.id.clone(), mode_of(&observed));
                vocab.insert(var.id.clone(), values);
            }
        }
    }

    let ages: Vec<f64> = train.iter().map(|s| s.age_years).collect();
    let age = mean_std(&ages);
    if age.std == 0.0 {
        return Err(SmtaError::Data("age has zero variance in the training split".into()));
    }

    let string_vocab = |pick: fn(&AggregatedStay) -> &String| -> Vec<String> {
        let mut v: Vec<String> = train.iter().map(|s| pick(s).clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    Ok(NormalizerState {
        continuous,
        vocab,
        fallback,
        dropped,
        age,
        sex_vocab: string_vocab(|s| &s.sex),
        insurance_vocab: string_vocab(|s| &s.insurance),
        ethnicity_vocab: string_vocab(|s| &s.ethnicity),
    })
}

fn one_hot_string(vocab: &[String], value: &str, out: &mut Vec<f64>, stats: &mut ApplyStats) {
    let start = out.len();
    out.resize(start + vocab.len(), 0.0);
    match vocab.iter().position(|v| v == value) {
        Some(i) => out[start + i] = 1.0,
        None => stats.unseen_categories += 1,
    }
}

/// A fully imputed, encoded, model-ready record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub label: u8,
    /// z-scored age followed by one-hot sex, insurance, ethnicity.
    pub static_features: Vec<f64>,
    /// Channel i is a [steps x width_i] matrix in row-major order.
    pub channels: Vec<Vec<f64>>,
}

/// Shape metadata for a processed dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub steps: usize,
    pub channel_ids: Vec<String>,
    pub channel_names: Vec<String>,
    pub channel_widths: Vec<usize>,
    pub static_width: usize,
    pub records: usize,
    pub positives: usize,
}

/// Transform one aggregated stay with fitted state: fill, z-score, one-hot.
pub fn apply_normalizer(
    state: &NormalizerState,
    roster: &[VariableSpec],
    stay: &AggregatedStay,
    stats: &mut ApplyStats,
) -> Result<PatientRecord> {
    let mut channels = Vec::new();
    for (vi, var) in roster.iter().enumerate() {
        if state.dropped.contains(&var.id) {
            continue;
        }
        let filled = fill_missing(&stay.series[vi], state.fallback.get(&var.id).copied())?;
        match var.kind {
            VariableKind::Continuous => {
                let stat = state.continuous[&var.id];
                channels.push(filled.iter().map(|v| (v - stat.mean) / stat.std).collect());
            }
            VariableKind::Discrete => {
                let vocab = &state.vocab[&var.id];
                let mut mat = Vec::with_capacity(filled.len() * vocab.len());
                for v in &filled {
                    let start = mat.len();
                    mat.resize(start + vocab.len(), 0.0);
                    match vocab.iter().position(|x| x == v) {
                        Some(i) => mat[start + i] = 1.0,
                        None => stats.unseen_categories += 1,
                    }
                }
                channels.push(mat);
            }
        }
    }
    let mut static_features = vec![(stay.age_years - state.age.mean) / state.age.std];
    one_hot_string(&state.sex_vocab, &stay.sex, &mut static_features, stats);
    one_hot_string(&state.insurance_vocab, &stay.insurance, &mut static_features, stats);
    one_hot_string(&state.ethnicity_vocab, &stay.ethnicity, &mut static_features, stats);
    Ok(PatientRecord {
        id: stay.id.clone(),
        label: stay.label,
        static_features,
        channels,
    })
}

/// Ids per split and fold, plus the seed that produced them.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub test_fraction: f64,
    pub folds: usize,
    pub test_ids: Vec<String>,
    pub fold_ids: Vec<Vec<String>>,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitCounts {
    pub total: usize,
    pub train: usize,
    pub test: usize,
    pub train_positives: usize,
    pub test_positives: usize,
}

/// Shuffled, label-stratified train/test split. Test size is
/// round(test_fraction * N) and its positive count is within one record of
/// proportional.
pub fn split_dataset(
    items: &[(String, u8)],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if items.is_empty() {
        return Err(SmtaError::Config("cannot split an empty dataset".into()));
    }
    let n = items.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let positives: Vec<&String> = shuffled_ids(items, 1, seed, "split-pos");
    let negatives: Vec<&String> = shuffled_ids(items, 0, seed, "split-neg");
    let p = positives.len();
    let test_pos = ((n_test as f64) * (p as f64) / (n as f64))
        .round()
        .clamp(n_test.saturating_sub(negatives.len()) as f64, p.min(n_test) as f64)
        as usize;
    let test_neg = n_test - test_pos;

    let mut test: Vec<String> = Vec::with_capacity(n_test);
    test.extend(positives[..test_pos].iter().map(|s| s.to_string()));
    test.extend(negatives[..test_neg].iter().map(|s| s.to_string()));
    let mut train: Vec<String> = Vec::with_capacity(n - n_test);
    train.extend(positives[test_pos..].iter().map(|s| s.to_string()));
    train.extend(negatives[test_neg..].iter().map(|s| s.to_string()));
    Ok((train, test))
}

fn shuffled_ids<'a>(items: &'a [(String, u8)], label: u8, seed: u64, purpose: &str) -> Vec<&'a String> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<&String> =
        items.iter().filter(|(_, l)| *l == label).map(|(id, _)| id).collect();
    let mut rng = crate::rng::derive_rng(seed, purpose, 0);
    ids.shuffle(&mut rng);
    ids
}

/// Label-stratified k-fold partition; fold sizes differ by at most one and
/// each fold's positive count is within one of proportional.
pub fn stratified_kfold(items: &[(String, u8)], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 || items.len() < k {
        return Err(SmtaError::Config(format!(
            "cannot make {k} folds from {} records",
            items.len()
        )));
    }
    let positives = shuffled_ids(items, 1, seed, "fold-pos");
    let negatives = shuffled_ids(items, 0, seed, "fold-neg");
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in positives.iter().enumerate() {
        folds[i % k].push(id.to_string());
    }
    // offset the negatives so the two remainder runs land on different folds
    let offset = positives.len() % k;
    for (i, id) in negatives.iter().enumerate() {
        folds[(i + offset) % k].push(id.to_string());
    }
    Ok(folds)
}

/// Read newline-delimited RawStay JSON; errors carry the 1-based line number.
pub fn read_raw_stays(reader: impl BufRead) -> Result<Vec<RawStay>> {
    let mut stays = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let stay: RawStay = serde_json::from_str(&line).map_err(|e| {
            SmtaError::Data(format!("line {}: {e}", lineno + 1))
        })?;
        stays.push(stay);
    }
    Ok(stays)
}

pub fn write_raw_stays(mut writer: impl Write, stays: &[RawStay]) -> Result<()> {
    for stay in stays {
        serde_json::to_writer(&mut writer, stay)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Configuration for the full preprocessing pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub rules: FilterRules,
    pub window_hours: usize,
    pub horizon_days: i64,
    pub test_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            rules: FilterRules::default(),
            window_hours: 24,
            horizon_days: 30,
            test_fraction: 0.1,
            folds: 5,
            seed: 0,
        }
    }
}

/// A fully preprocessed dataset, ready to write or to feed a model.
#[derive(Clone, Debug)]
pub struct ProcessedDataset {
    pub meta: DatasetMeta,
    pub records: Vec<PatientRecord>,
    pub normalizer: NormalizerState,
    pub manifest: SplitManifest,
    pub exclusions: ExclusionReport,
    pub apply_stats: ApplyStats,
}

impl ProcessedDataset {
    pub fn record(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records_by_ids(&self, ids: &[String]) -> Vec<&PatientRecord> {
        ids.iter().filter_map(|id| self.record(id)).collect()
    }

    /// All training records (every fold), in manifest order.
    pub fn train_records(&self) -> Vec<&PatientRecord> {
        let ids: Vec<String> =
            self.manifest.fold_ids.iter().flatten().cloned().collect();
        self.records_by_ids(&ids)
    }

    pub fn test_records(&self) -> Vec<&PatientRecord> {
        self.records_by_ids(&self.manifest.test_ids)
    }
}

/// Run the whole preprocessing flow over raw stays.
pub fn preprocess(
    stays: Vec<RawStay>,
    roster: &[VariableSpec],
    config: &PreprocessConfig,
) -> Result<ProcessedDataset> {
    let (kept, exclusions) = filter_cohort(stays, &config.rules);

    let mut aggregated = Vec::with_capacity(kept.len());
    for stay in &kept {
        let label = label_stay(stay, config.horizon_days)?;
        let mut series = Vec::with_capacity(roster.len());
        for var in roster {
            let events: Vec<(DateTime<Utc>, f64)> = stay
                .events
                .iter()
                .filter(|e| e.variable == var.id)
                .map(|e| (e.time, e.value))
                .collect();
            series.push(aggregate_hourly(&events, var.kind, stay.stay_end, config.window_hours));
        }
        aggregated.push(AggregatedStay {
            id: stay.stay_id.clone(),
            label,
            age_years: stay.age_years,
            sex: stay.sex.clone(),
            insurance: stay.insurance.clone(),
            ethnicity: stay.ethnicity.clone(),
            series,
        });
    }

    let items: Vec<(String, u8)> =
        aggregated.iter().map(|s| (s.id.clone(), s.label)).collect();
    let (train_ids, test_ids) = split_dataset(&items, config.test_fraction, config.seed)?;
    let train_items: Vec<(String, u8)> = items
        .iter()
        .filter(|(id, _)| train_ids.contains(id))
        .cloned()
        .collect();
    let fold_ids = stratified_kfold(&train_items, config.folds, config.seed)?;

    let train_stays: Vec<&AggregatedStay> = aggregated
        .iter()
        .filter(|s| train_ids.contains(&s.id))
        .collect();
    let normalizer = fit_normalizer(&train_stays, roster)?;

    let mut stats = ApplyStats::default();
    let mut records = Vec::with_capacity(aggregated.len());
    for stay in &aggregated {
        records.push(apply_normalizer(&normalizer, roster, stay, &mut stats)?);
    }

    let retained: Vec<&VariableSpec> = roster
        .iter()
        .filter(|v| !normalizer.dropped.contains(&v.id))
        .collect();
    let channel_widths: Vec<usize> = retained
        .iter()
        .map(|v| match v.kind {
            VariableKind::Continuous => 1,
            VariableKind::Discrete => normalizer.vocab[&v.id].len(),
        })
        .collect();
    let static_width = 1
        + normalizer.sex_vocab.len()
        + normalizer.insurance_vocab.len()
        + normalizer.ethnicity_vocab.len();
    let positives = records.iter().filter(|r| r.label == 1).count();
    let meta = DatasetMeta {
        steps: config.window_hours,
        channel_ids: retained.iter().map(|v| v.id.clone()).collect(),
        channel_names: retained.iter().map(|v| v.display.clone()).collect(),
        channel_widths,
        static_width,
        records: records.len(),
        positives,
    };
    let counts = SplitCounts {
        total: items.len(),
        train: train_ids.len(),
        test: test_ids.len(),
        train_positives: train_items.iter().filter(|(_, l)| *l == 1).count(),
        test_positives: records
            .iter()
            .filter(|r| r.label == 1 && test_ids.contains(&r.id))
            .count(),
    };
    Ok(ProcessedDataset {
        meta,
        records,
        normalizer,
        manifest: SplitManifest {
            seed: config.seed,
            test_fraction: config.test_fraction,
            folds: config.folds,
            test_ids,
            fold_ids,
            counts,
        },
        exclusions,
        apply_stats: stats,
    })
}

/// Write a processed dataset as a directory: records.ndjson, meta.json,
/// normalizer.json, manifest.json, exclusions.json.
pub fn write_dataset(dir: &Path, ds: &ProcessedDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("records.ndjson"))?);
    for r in &ds.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&ds.meta)?)?;
    std::fs::write(
        dir.join("normalizer.json"),
        serde_json::to_string_pretty(&ds.normalizer)?,
    )?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&ds.manifest)?,
    )?;
    let report = serde_json::json!({
        "exclusions": ds.exclusions,
        "apply": ds.apply_stats,
    });
    std::fs::write(dir.join("exclusions.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<ProcessedDataset> {
    let meta: DatasetMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let normalizer: NormalizerState =
        serde_json::from_str(&std::fs::read_to_string(dir.join("normalizer.json"))?)?;
    let manifest: SplitManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("exclusions.json"))?)?;
    let exclusions: ExclusionReport = serde_json::from_value(report["exclusions"].clone())?;
    let apply_stats: ApplyStats = serde_json::from_value(report["apply"].clone())?;
    let file = std::fs::File::open(dir.join("records.ndjson"))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(ProcessedDataset { meta, records, normalizer, manifest, exclusions, apply_stats })
}
