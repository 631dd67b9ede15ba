//! Sleep apnea backend program.
//!
//! Oxygen desaturation dips are tracked with a two-state machine on SpO2: a
//! dip opens at the first sample strictly below the threshold and stays open
//! until a sample strictly above it. Each dip is checked for a heart-rate
//! rise around its start. Dips per hour give the AHI, which maps onto the
//! four severity classes.

mod shard;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{canonical_bytes, parse_input_file, AnalysisResult, ModelError, OximeterSample, Severity};

pub use shard::{analyze_segment, analyze_sharded, merge_segments, split_shards, SegmentSummary, Shard};

#[derive(Debug, Error)]
pub enum AnalyticError {
    #[error("input: {0}")]
    Input(#[from] ModelError),
    #[error("recording duration must be positive, got {0} s")]
    ZeroDuration(f64),
    #[error("heart statistics need at least one sample")]
    EmptyTrace,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConfig {
    pub spo2_threshold: u8,
    pub hr_window_samples: usize,
    pub hr_rise_bpm: f64,
    pub verify_dips: bool,
    /// Used as the recording length of a single-sample trace.
    pub sample_period_ms: u64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self {
            spo2_threshold: 88,
            hr_window_samples: 20,
            hr_rise_bpm: 5.0,
            verify_dips: true,
            sample_period_ms: 500,
        }
    }
}

impl AnalyticConfig {
    pub fn validate(&self) -> Result<(), AnalyticError> {
        if self.spo2_threshold == 0 || self.spo2_threshold > 100 {
            return Err(AnalyticError::Config(format!(
                "spo2_threshold {} outside (0,100]",
                self.spo2_threshold
            )));
        }
        if self.hr_window_samples == 0 {
            return Err(AnalyticError::Config("hr_window_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DipEvent {
    pub start_index: usize,
    pub end_index: usize,
    pub min_spo2_in_dip: u8,
    pub hr_verified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DipCount {
    pub raw: u32,
    pub verified: u32,
    pub events: Vec<DipEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeartStats {
    pub hr_min: f64,
    pub hr_max: f64,
    pub hr_avg: f64,
    pub hr_avg_delta: f64,
    pub min_spo2: u8,
}

/// Whether the dip starting at `start` is followed by a heart-rate rise: the
/// peak over the `window` samples from the dip start must exceed the mean
/// over the `window` samples before it by at least `rise`.
pub(crate) fn hr_rise_at(trace: &[OximeterSample], start: usize, config: &AnalyticConfig) -> bool {
    let w = config.hr_window_samples;
    let pre = &trace[start.saturating_sub(w)..start];
    if pre.is_empty() {
        return true;
    }
    let pre_mean = pre.iter().map(|s| s.heart_rate_bpm as u64).sum::<u64>() as f64 / pre.len() as f64;
    let post_end = (start + w).min(trace.len());
    let post_max = trace[start..post_end]
        .iter()
        .map(|s| s.heart_rate_bpm)
        .max()
        .unwrap_or(0) as f64;
    post_max - pre_mean >= config.hr_rise_bpm
}

/// Runs the dip state machine over `trace[range]` from a closed state.
/// Returns the events (global indices, verification pending) and whether the
/// last one is still open at the end of the range.
pub(crate) fn scan_dips(
    trace: &[OximeterSample],
    range: std::ops::Range<usize>,
    threshold: u8,
) -> (Vec<DipEvent>, bool) {
    let mut events = Vec::new();
    let mut open: Option<DipEvent> = None;
    for i in range.clone() {
        let spo2 = trace[i].spo2_pct;
        match open.as_mut() {
            None if spo2 < threshold => {
                open = Some(DipEvent {
                    start_index: i,
                    end_index: i,
                    min_spo2_in_dip: spo2,
                    hr_verified: false,
                })
            }
            None => {}
            Some(_) if spo2 > threshold => events.push(open.take().unwrap()),
            Some(ev) => {
                ev.end_index = i;
                ev.min_spo2_in_dip = ev.min_spo2_in_dip.min(spo2);
            }
        }
    }
    let still_open = open.is_some();
    events.extend(open);
    (events, still_open)
}

pub fn count_dips(trace: &[OximeterSample], config: &AnalyticConfig) -> DipCount {
    let (mut events, _) = scan_dips(trace, 0..trace.len(), config.spo2_threshold);
    for ev in &mut events {
        ev.hr_verified = hr_rise_at(trace, ev.start_index, config);
    }
    let raw = events.len() as u32;
    let verified = events.iter().filter(|e| e.hr_verified).count() as u32;
    DipCount { raw, verified, events }
}

pub fn compute_ahi(dip_count: u32, recorded_seconds: f64) -> Result<f64, AnalyticError> {
    if !(recorded_seconds > 0.0) {
        return Err(AnalyticError::ZeroDuration(recorded_seconds));
    }
    Ok(dip_count as f64 * 3600.0 / recorded_seconds)
}

/// Severity bands are lower-bound inclusive: [0,5), [5,15), [15,30), [30,inf).
pub fn classify(ahi_per_hour: f64) -> Severity {
    if ahi_per_hour >= 30.0 {
        Severity::Severe
    } else if ahi_per_hour >= 15.0 {
        Severity::Moderate
    } else if ahi_per_hour >= 5.0 {
        Severity::Mild
    } else {
        Severity::NoMinimal
    }
}

pub fn heart_stats(trace: &[OximeterSample]) -> Result<HeartStats, AnalyticError> {
    let first = trace.first().ok_or(AnalyticError::EmptyTrace)?;
    let mut sum = 0u64;
    let mut min = first.heart_rate_bpm;
    let mut max = first.heart_rate_bpm;
    let mut min_spo2 = first.spo2_pct;
    for s in trace {
        sum += s.heart_rate_bpm as u64;
        min = min.min(s.heart_rate_bpm);
        max = max.max(s.heart_rate_bpm);
        min_spo2 = min_spo2.min(s.spo2_pct);
    }
    let delta_sum: u64 = trace
        .windows(2)
        .map(|p| p[1].heart_rate_bpm.abs_diff(p[0].heart_rate_bpm) as u64)
        .sum();
    Ok(HeartStats {
        hr_min: min as f64,
        hr_max: max as f64,
        hr_avg: sum as f64 / trace.len() as f64,
        hr_avg_delta: if trace.len() > 1 {
            delta_sum as f64 / (trace.len() - 1) as f64
        } else {
            0.0
        },
        min_spo2,
    })
}

/// Each dip widened by the heart-rate window on both sides, clipped to the
/// trace. The heart-rate series over that span stands in for an ECG strip.
pub fn extract_dip_patterns(
    trace: &[OximeterSample],
    events: &[DipEvent],
    config: &AnalyticConfig,
) -> Vec<Vec<OximeterSample>> {
    let w = config.hr_window_samples;
    events
        .iter()
        .map(|ev| {
            let lo = ev.start_index.saturating_sub(w);
            let hi = (ev.end_index + w).min(trace.len().saturating_sub(1));
            trace[lo..=hi].to_vec()
        })
        .collect()
}

/// Recording length implied by the timestamps: the span plus one mean sample
/// gap, so 360 samples at 2 Hz cover exactly 180 s.
pub fn recorded_seconds(trace: &[OximeterSample], config: &AnalyticConfig) -> f64 {
    match trace {
        [] => 0.0,
        [_] => config.sample_period_ms as f64 / 1000.0,
        [first, .., last] => {
            let span = (last.timestamp_ms - first.timestamp_ms) as f64;
            span * trace.len() as f64 / (trace.len() - 1) as f64 / 1000.0
        }
    }
}

pub(crate) fn empty_result() -> AnalysisResult {
    AnalysisResult {
        task_id: String::new(),
        dip_count_raw: 0,
        dip_count_verified: 0,
        ahi_per_hour: 0.0,
        severity: Severity::NoMinimal,
        min_spo2: 0,
        hr_min: 0.0,
        hr_max: 0.0,
        hr_avg: 0.0,
        hr_avg_delta: 0.0,
        dip_patterns: Vec::new(),
        latency_ms: 0,
        error: Some("empty trace: heart statistics unavailable".into()),
    }
}

pub(crate) fn assemble(
    trace: &[OximeterSample],
    events: Vec<DipEvent>,
    stats: HeartStats,
    config: &AnalyticConfig,
) -> Result<AnalysisResult, AnalyticError> {
    let raw = events.len() as u32;
    let verified = events.iter().filter(|e| e.hr_verified).count() as u32;
    let counted = if config.verify_dips { verified } else { raw };
    let ahi = compute_ahi(counted, recorded_seconds(trace, config))?;
    Ok(AnalysisResult {
        task_id: String::new(),
        dip_count_raw: raw,
        dip_count_verified: if config.verify_dips { verified } else { raw },
        ahi_per_hour: ahi,
        severity: classify(ahi),
        min_spo2: stats.min_spo2,
        hr_min: stats.hr_min,
        hr_max: stats.hr_max,
        hr_avg: stats.hr_avg,
        hr_avg_delta: stats.hr_avg_delta,
        dip_patterns: extract_dip_patterns(trace, &events, config),
        latency_ms: 0,
        error: None,
    })
}

pub fn analyze_trace(trace: &[OximeterSample], config: &AnalyticConfig) -> Result<AnalysisResult, AnalyticError> {
    config.validate()?;
    if trace.is_empty() {
        return Ok(empty_result());
    }
    let dips = count_dips(trace, config);
    let stats = heart_stats(trace)?;
    assemble(trace, dips.events, stats, config)
}

/// Reads an input file and writes the output file: canonical JSON of the
/// result with `task_id` empty and `latency_ms` zero, filled in by the
/// broker.
pub fn analyze(input_file: &[u8], config: &AnalyticConfig) -> Result<Vec<u8>, AnalyticError> {
    let trace = parse_input_file(input_file)?;
    let result = analyze_trace(&trace, config)?;
    Ok(canonical_bytes(&result)?)
}
