//! Synthetic cohort generator with a planted, tunable risk signal.
//!
//! Produces raw event streams in the same shape the pipeline consumes: four
//! static attributes and the twelve temporal channels, stay lengths inside
//! the cohort window, events dropped at a configurable missingness rate. The
//! latent risk is a linear combination of age, the heart-rate level, and the
//! blood-pressure trend, scaled by a signal strength s; labels are assigned
//! by thresholding risk-plus-noise at the exact target positive count, so the
//! positive count is exact rather than merely expected. The recorded risk
//! scores give a computable performance ceiling for any model.

use crate::error::{Result, SmtaError};
use crate::pipeline::{RawStay, TemporalEvent, VariableKind};
use crate::train::mann_whitney_auc;
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub records: usize,
    /// Target positive rate; the positive count is round(rate * records).
    pub positive_rate: f64,
    pub seed: u64,
    /// Signal strength in [0, 1]; 0 means labels carry no feature signal.
    pub signal_strength: f64,
    /// Probability that any single event is dropped.
    pub missingness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 2000,
            positive_rate: 0.111,
            seed: 0,
            signal_strength: 0.8,
            missingness: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.positive_rate) || self.positive_rate <= 0.0 {
            return Err(SmtaError::Config(format!(
                "positive rate must be in (0, 1), got {}",
                self.positive_rate
            )));
        }
        if (self.positive_rate * self.records as f64).round() < 1.0 {
            return Err(SmtaError::Config(format!(
                "infeasible cohort: rate {} over {} records rounds to zero positives",
                self.positive_rate, self.records
            )));
        }
        if !(0.0..1.0).contains(&self.missingness) {
            return Err(SmtaError::Config("missingness must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(SmtaError::Config("signal strength must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn target_positives(&self) -> usize {
        (self.positive_rate * self.records as f64).round() as usize
    }
}

/// The generative coefficients and per-record latents behind a cohort.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Weights on (z-scored age, heart-rate level, blood-pressure trend).
    pub coefficients: [f64; 3],
    pub signal_strength: f64,
    /// Per-record planted risk score, s * (w . latents).
    pub risks: Vec<f64>,
    /// The noise added before thresholding, (1 - s) * eps.
    pub noise: Vec<f64>,
    pub labels: Vec<u8>,
    /// Threshold on risk + noise that produced the exact positive count.
    pub threshold: f64,
}

/// AUC of the planted risk score itself against the labels: the ceiling any
/// model trained on these features is compared to.
pub fn oracle_auc(truth: &GroundTruth) -> Option<f64> {
    mann_whitney_auc(&truth.risks, &truth.labels)
}

// Fixture constants, not clinical claims: plausible means/scales per vital.
const VITALS: &[(&str, f64, f64)] = &[
    ("dbp", 70.0, 10.0),
    ("glucose", 140.0, 35.0),
    ("heart_rate", 85.0, 12.0),
    ("mbp", 88.0, 11.0),
    ("spo2", 96.5, 1.8),
    ("resp_rate", 18.0, 3.5),
    ("sbp", 125.0, 15.0),
    ("temperature", 37.0, 0.5),
];

const GCS_CHANNELS: &[(&str, i64, i64)] =
    &[("gcs_eye", 1, 4), ("gcs_motor", 1, 6), ("gcs_verbal", 1, 5), ("gcs_total", 3, 15)];

const RISK_COEFFICIENTS: [f64; 3] = [0.45, 0.35, 0.20];

fn cohort_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()
}

struct RecordDraw {
    stay: RawStay,
    latents: [f64; 3],
    noise: f64,
}

fn generate_record(config: &SynthConfig, index: usize) -> RecordDraw {
    let mut rng = crate::rng::derive_rng(config.seed, "synth-record", index as u64);
    let unit = Normal::new(0.0, 1.0).unwrap();

    let stay_hours: f64 = rng.random_range(24.5..71.5);
    let start = cohort_epoch() + Duration::hours(index as i64 * 3);
    let end = start + Duration::minutes((stay_hours * 60.0) as i64);

    let age: f64 = 65.0 + 15.0 * unit.sample(&mut rng);
    let age = age.clamp(18.0, 95.0);
    let z_age = (age - 65.0) / 15.0;
    let hr_level: f64 = unit.sample(&mut rng);
    let bp_trend: f64 = unit.sample(&mut rng);

    let sex = if rng.random_bool(0.5) { "F" } else { "M" };
    let insurance = ["Medicare", "Medicaid", "Private", "Government", "SelfPay"]
        [rng.random_range(0..5)];
    let ethnicity = ["WHITE", "BLACK", "HISPANIC", "ASIAN", "OTHER"][rng.random_range(0..5)];
    let icd = ["4010", "4011", "4019"][rng.random_range(0..3)];

    let total_hours = stay_hours.floor() as i64;
    let mut events = Vec::new();
    for (name, mean, scale) in VITALS {
        // AR(1) walk around the vital's mean; the heart-rate level and the
        // blood-pressure slope carry the planted signal
        let phi: f64 = 0.85;
        let mut state: f64 = unit.sample(&mut rng);
        for h in 0..total_hours {
            state = phi * state + (1.0 - phi * phi).sqrt() * unit.sample(&mut rng);
            let minute = rng.random_range(0..60);
            let time = start + Duration::minutes(h * 60 + minute);
            let mut value = mean + scale * 0.45 * state;
            if *name == "heart_rate" {
                value += scale * 1.5 * hr_level;
            }
            if matches!(*name, "sbp" | "dbp" | "mbp") {
                // trend over the stay, strongest near discharge
                let progress = h as f64 / total_hours.max(1) as f64;
                value += scale * 1.2 * bp_trend * progress;
            }
            if !rng.random_bool(config.missingness) {
                events.push(TemporalEvent {
                    variable: name.to_string(),
                    time,
                    value: (value * 10.0).round() / 10.0,
                });
            }
        }
    }
    for (name, lo, hi) in GCS_CHANNELS {
        // sticky Markov chain over the category range
        let mut value = rng.random_range(*lo..=*hi);
        for h in 0..total_hours {
            if rng.random_bool(0.25) {
                value = (value + if rng.random_bool(0.5) { 1 } else { -1 }).clamp(*lo, *hi);
            }
            let minute = rng.random_range(0..60);
            if !rng.random_bool(config.missingness) {
                events.push(TemporalEvent {
                    variable: name.to_string(),
                    time: start + Duration::minutes(h * 60 + minute),
                    value: value as f64,
                });
            }
        }
    }

    let stay = RawStay {
        stay_id: format!("synth-{index:06}"),
        age_years: (age * 10.0).round() / 10.0,
        sex: sex.to_string(),
        insurance: insurance.to_string(),
        ethnicity: ethnicity.to_string(),
        icd9_codes: vec![icd.to_string()],
        pregnancy_admission: false,
        stay_start: start,
        stay_end: end,
        next_icu_admission: None,
        death_time: None,
        events,
    };
    RecordDraw { stay, latents: [z_age, hr_level, bp_trend], noise: unit.sample(&mut rng) }
}

/// Generate the cohort. Deterministic in the seed; per-record streams use
/// derived seeds so generation order (or parallelism) cannot change output.
pub fn generate(config: &SynthConfig) -> Result<(Vec<RawStay>, GroundTruth)> {
    config.validate()?;
    let s = config.signal_strength;
    let mut stays = Vec::with_capacity(config.records);
    let mut risks = Vec::with_capacity(config.records);
    let mut noise = Vec::with_capacity(config.records);
    for index in 0..config.records {
        let draw = generate_record(config, index);
        let combo: f64 = RISK_COEFFICIENTS
            .iter()
            .zip(&draw.latents)
            .map(|(c, l)| c * l)
            .sum();
        risks.push(s * combo);
        noise.push((1.0 - s) * draw.noise);
        stays.push(draw.stay);
    }

    // threshold risk + noise at exactly the target count
    let k = config.target_positives();
    let mut scored: Vec<(f64, usize)> = risks
        .iter()
        .zip(&noise)
        .map(|(r, n)| r + n)
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let threshold = scored[k - 1].0;
    let mut labels = vec![0u8; config.records];
    for &(_, i) in scored.iter().take(k) {
        labels[i] = 1;
    }

    // positives get a qualifying readmission or death; negatives either
    // nothing or an event outside the horizon
    for (i, stay) in stays.iter_mut().enumerate() {
        let mut rng = crate::rng::derive_rng(config.seed, "synth-outcome", i as u64);
        if labels[i] == 1 {
            let gap_hours = rng.random_range(24..(29 * 24));
            if rng.random_bool(0.8) {
                stay.next_icu_admission = Some(stay.stay_end + Duration::hours(gap_hours));
            } else {
                stay.death_time = Some(stay.stay_end + Duration::hours(gap_hours));
            }
        } else if rng.random_bool(0.25) {
            let gap_days = rng.random_range(31..300);
            stay.next_icu_admission = Some(stay.stay_end + Duration::days(gap_days));
        }
    }

    Ok((
        stays,
        GroundTruth {
            coefficients: RISK_COEFFICIENTS,
            signal_strength: s,
            risks,
            noise,
            labels,
            threshold,
        },
    ))
}

/// Kinds for the synthetic channels, matching the default roster.
pub fn synthetic_kind(variable: &str) -> VariableKind {
    if variable.starts_with("gcs_") {
        VariableKind::Discrete
    } else {
        VariableKind::Continuous
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{filter_cohort, FilterRules};

    #[test]
    fn exact_positive_count() {
        let config = SynthConfig { records: 1000, positive_rate: 0.11, ..Default::default() };
        let (_, truth) = generate(&config).unwrap();
        assert_eq!(truth.labels.iter().filter(|&&l| l == 1).count(), 110);

        let config = SynthConfig { records: 10008, positive_rate: 0.111, missingness: 0.99, ..Default::default() };
        // missingness near 1 keeps this cheap; labels don't depend on events
        let (_, truth) = generate(&config).unwrap();
        assert_eq!(truth.labels.iter().filter(|&&l| l == 1).count(), 1111);
    }

    #[test]
    fn deterministic_given_seed() {
        let config = SynthConfig { records: 20, seed: 5, ..Default::default() };
        let (a, ta) = generate(&config).unwrap();
        let (b, tb) = generate(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&ta).unwrap(),
            serde_json::to_string(&tb).unwrap()
        );
        let other = SynthConfig { records: 20, seed: 6, ..Default::default() };
        let (c, _) = generate(&other).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn generated_stays_pass_cohort_filtering() {
        let config = SynthConfig { records: 100, ..Default::default() };
        let (stays, _) = generate(&config).unwrap();
        let (kept, report) = filter_cohort(stays, &FilterRules::default());
        assert_eq!(kept.len(), 100, "{report:?}");
    }

    #[test]
    fn zero_signal_risk_is_uninformative() {
        let config = SynthConfig {
            records: 500,
            signal_strength: 0.0,
            missingness: 0.9,
            ..Default::default()
        };
        let (_, truth) = generate(&config).unwrap();
        // risk is identically zero, so with the 1/2 tie convention the AUC
        // is exactly one half
        assert_eq!(oracle_auc(&truth), Some(0.5));
    }

    #[test]
    fn full_signal_no_noise_gives_perfect_oracle() {
        let config = SynthConfig {
            records: 500,
            signal_strength: 1.0,
            missingness: 0.9,
            ..Default::default()
        };
        let (_, truth) = generate(&config).unwrap();
        assert_eq!(oracle_auc(&truth), Some(1.0));
    }

    #[test]
    fn oracle_auc_monotone_in_signal_strength() {
        let mut last = -1.0;
        for s in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let config = SynthConfig {
                records: 800,
                signal_strength: s,
                missingness: 0.9,
                seed: 11,
                ..Default::default()
            };
            let (_, truth) = generate(&config).unwrap();
            let auc = oracle_auc(&truth).unwrap();
            assert!(auc >= last, "AUC fell from {last} to {auc} at s={s}");
            last = auc;
        }
    }

    #[test]
    fn infeasible_rate_is_config_error() {
        let config = SynthConfig { records: 5, positive_rate: 0.01, ..Default::default() };
        assert!(generate(&config).is_err());
    }
}
