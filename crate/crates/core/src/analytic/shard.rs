//! Thread-model analysis: the trace is cut into contiguous shards, each shard
//! is analysed on its own (with `hr_window_samples` of context on both
//! sides), and the summaries are merged so the result is identical to a
//! whole-trace run.

use serde::{Deserialize, Serialize};

use super::{assemble, empty_result, hr_rise_at, scan_dips, AnalyticConfig, AnalyticError, DipEvent, HeartStats};
use crate::model::{AnalysisResult, OximeterSample};

/// A core range of the trace plus its halo. `offset` is the global index of
/// `samples[0]`; `core_start..core_end` are global indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub offset: usize,
    pub core_start: usize,
    pub core_end: usize,
    pub samples: Vec<OximeterSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub core_start: usize,
    pub core_end: usize,
    /// Dips found by a scan that starts closed at `core_start`.
    pub events: Vec<DipEvent>,
    pub open_at_end: bool,
    /// Length of the run at the start of the core with SpO2 at or below the
    /// threshold, and its minimum. A dip carried in from the left neighbour
    /// continues through this run.
    pub leading_run: usize,
    pub leading_min: u8,
    pub hr_sum: u64,
    pub hr_min: u32,
    pub hr_max: u32,
    pub min_spo2: u8,
    /// Sum of |dHR| over pairs whose left sample is in the core.
    pub delta_sum: u64,
}

/// Cuts `trace` into at most `k` contiguous, near-equal shards.
pub fn split_shards(trace: &[OximeterSample], k: usize, config: &AnalyticConfig) -> Vec<Shard> {
    let n = trace.len();
    let k = k.clamp(1, n.max(1));
    let w = config.hr_window_samples;
    (0..k)
        .map(|i| {
            let core_start = i * n / k;
            let core_end = (i + 1) * n / k;
            let lo = core_start.saturating_sub(w);
            let hi = (core_end + w).min(n);
            Shard {
                offset: lo,
                core_start,
                core_end,
                samples: trace[lo..hi].to_vec(),
            }
        })
        .filter(|s| s.core_end > s.core_start)
        .collect()
}

pub fn analyze_segment(shard: &Shard, config: &AnalyticConfig) -> SegmentSummary {
    let local = |g: usize| g - shard.offset;
    let (cs, ce) = (local(shard.core_start), local(shard.core_end));
    let s = &shard.samples;
    let thr = config.spo2_threshold;

    let (mut events, open_at_end) = scan_dips(s, cs..ce, thr);
    for ev in &mut events {
        // the halo reaches a full window either side of any start in the
        // core, or the shard touches the trace edge
        ev.hr_verified = hr_rise_at(s, ev.start_index, config);
        ev.start_index += shard.offset;
        ev.end_index += shard.offset;
    }

    let core = &s[cs..ce];
    let leading_run = core.iter().take_while(|x| x.spo2_pct <= thr).count();
    let leading_min = core[..leading_run].iter().map(|x| x.spo2_pct).min().unwrap_or(u8::MAX);
    let delta_end = (ce + 1).min(s.len());
    SegmentSummary {
        core_start: shard.core_start,
        core_end: shard.core_end,
        events,
        open_at_end,
        leading_run,
        leading_min,
        hr_sum: core.iter().map(|x| x.heart_rate_bpm as u64).sum(),
        hr_min: core.iter().map(|x| x.heart_rate_bpm).min().unwrap_or(u32::MAX),
        hr_max: core.iter().map(|x| x.heart_rate_bpm).max().unwrap_or(0),
        min_spo2: core.iter().map(|x| x.spo2_pct).min().unwrap_or(u8::MAX),
        delta_sum: s[cs..delta_end]
            .windows(2)
            .map(|p| p[1].heart_rate_bpm.abs_diff(p[0].heart_rate_bpm) as u64)
            .sum(),
    }
}

/// Merges shard summaries (any order) into the whole-trace result.
pub fn merge_segments(
    trace: &[OximeterSample],
    mut parts: Vec<SegmentSummary>,
    config: &AnalyticConfig,
) -> Result<AnalysisResult, AnalyticError> {
    config.validate()?;
    if trace.is_empty() {
        return Ok(empty_result());
    }
    parts.sort_by_key(|p| p.core_start);
    let mut events: Vec<DipEvent> = Vec::new();
    let mut carried = false;
    for part in &parts {
        let len = part.core_end - part.core_start;
        let mut own = part.events.as_slice();
        if carried {
            let last = events.last_mut().expect("carried dip exists");
            if part.leading_run > 0 {
                last.end_index = part.core_start + part.leading_run - 1;
                last.min_spo2_in_dip = last.min_spo2_in_dip.min(part.leading_min);
            }
            if part.leading_run == len {
                // the whole core continues the carried dip
                continue;
            }
            // a fresh dip inside the leading run belongs to the carried one
            let boundary = part.core_start + part.leading_run;
            own = match own.first() {
                Some(ev) if ev.start_index < boundary => &own[1..],
                _ => own,
            };
        }
        carried = part.open_at_end && !own.is_empty();
        events.extend_from_slice(own);
    }

    let n = trace.len() as u64;
    let stats = HeartStats {
        hr_min: parts.iter().map(|p| p.hr_min).min().unwrap_or(0) as f64,
        hr_max: parts.iter().map(|p| p.hr_max).max().unwrap_or(0) as f64,
        hr_avg: parts.iter().map(|p| p.hr_sum).sum::<u64>() as f64 / n as f64,
        hr_avg_delta: if n > 1 {
            parts.iter().map(|p| p.delta_sum).sum::<u64>() as f64 / (n - 1) as f64
        } else {
            0.0
        },
        min_spo2: parts.iter().map(|p| p.min_spo2).min().unwrap_or(0),
    };
    assemble(trace, events, stats, config)
}

/// Split, analyse and merge in one go.
pub fn analyze_sharded(
    trace: &[OximeterSample],
    k: usize,
    config: &AnalyticConfig,
) -> Result<AnalysisResult, AnalyticError> {
    let parts = split_shards(trace, k, config)
        .iter()
        .map(|s| analyze_segment(s, config))
        .collect();
    merge_segments(trace, parts, config)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{flat_hr, trace_from, two_dip_three_minutes};
    use super::super::analyze_trace;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shards_cover_trace_once() {
        let t = flat_hr(&[95; 37]);
        let config = AnalyticConfig::default();
        for k in 1..=8 {
            let shards = split_shards(&t, k, &config);
            assert_eq!(shards.len(), k);
            assert_eq!(shards[0].core_start, 0);
            assert_eq!(shards.last().unwrap().core_end, 37);
            for p in shards.windows(2) {
                assert_eq!(p[0].core_end, p[1].core_start);
            }
        }
    }

    #[test]
    fn dip_spanning_boundary_counts_once() {
        let mut spo2 = vec![95u8; 40];
        for s in &mut spo2[15..25] {
            *s = 85;
        }
        spo2[20] = 88;
        let t = flat_hr(&spo2);
        let config = AnalyticConfig::default();
        for k in 1..=8 {
            let r = analyze_sharded(&t, k, &config).unwrap();
            assert_eq!(r, analyze_trace(&t, &config).unwrap(), "k={k}");
            assert_eq!(r.dip_count_raw, 1);
        }
    }

    #[test]
    fn dip_running_through_whole_middle_shard() {
        let mut spo2 = vec![95u8; 30];
        for s in &mut spo2[5..27] {
            *s = 87;
        }
        spo2[12] = 88;
        spo2[13] = 84;
        let t = flat_hr(&spo2);
        let config = AnalyticConfig::default();
        let whole = analyze_trace(&t, &config).unwrap();
        assert_eq!(whole.dip_count_raw, 1);
        for k in 1..=10 {
            assert_eq!(analyze_sharded(&t, k, &config).unwrap(), whole, "k={k}");
        }
    }

    #[test]
    fn three_minute_fixture_all_shard_counts() {
        let t = two_dip_three_minutes();
        let config = AnalyticConfig::default();
        let whole = analyze_trace(&t, &config).unwrap();
        for k in 1..=16 {
            assert_eq!(analyze_sharded(&t, k, &config).unwrap(), whole);
        }
    }

    #[test]
    fn threshold_run_after_carried_dip_then_new_dip() {
        // shard boundary at 4: [95 87 86 87 | 88 88 80 95]
        let t = trace_from(&[95, 87, 86, 87, 88, 88, 80, 95], &[70, 71, 90, 72, 60, 95, 66, 70]);
        let config = AnalyticConfig {
            hr_window_samples: 2,
            ..Default::default()
        };
        let whole = analyze_trace(&t, &config).unwrap();
        assert_eq!(whole.dip_count_raw, 1);
        for k in 1..=8 {
            assert_eq!(analyze_sharded(&t, k, &config).unwrap(), whole, "k={k}");
        }
    }

    proptest! {
        #[test]
        fn sharded_equals_whole(
            v in prop::collection::vec((84u8..=92, 55u32..110), 1..160),
            k in 1usize..12,
            w in 1usize..25,
        ) {
            let t: Vec<_> = v.into_iter().enumerate()
                .map(|(i, (s, h))| OximeterSample::new(i as u64 * 500, h, s)).collect();
            let config = AnalyticConfig { hr_window_samples: w, ..Default::default() };
            prop_assert_eq!(analyze_sharded(&t, k, &config).unwrap(), analyze_trace(&t, &config).unwrap());
        }
    }
}
