//! Synthetic multivariate series with injected, labelled anomalies.
//!
//! Entity `i` belongs to frequency family `i % groups` and carries a sinusoid
//! of that family's period with its own phase, a coupled share of the other
//! entities' sinusoids, and AR(1) noise. Anomalies are placed in stratified
//! slots so they do not overlap; explicit injections that do overlap are
//! merged.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesTable;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// alternating-sign bursts of twice the magnitude
    Spike,
    /// constant offset
    LevelShift,
    /// the periodic component switches to a foreign period
    PatternBreak,
}

/// A labelled interval `[start, end)` on one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub start: usize,
    pub end: usize,
    pub kind: AnomalyKind,
    pub entities: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub kind: AnomalyKind,
    pub start: usize,
    pub duration: usize,
    pub entity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub length: usize,
    /// period (in samples) of each frequency family
    pub group_periods: Vec<f64>,
    /// `K × K`; entity `i` adds `coupling[i][j]` times entity `j`'s sinusoid.
    /// Empty means each entity takes 0.4 of its successor's.
    pub coupling: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub ar_coef: f64,
    pub kinds: Vec<AnomalyKind>,
    pub duration: usize,
    pub magnitude: f64,
    /// fraction of the training region covered by anomalies
    pub contamination: f64,
    pub train_fraction: f64,
    /// anomalies placed after the training region
    pub test_anomalies: usize,
    pub injections: Vec<Injection>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_entities: 5,
            length: 5000,
            group_periods: vec![40.0, 90.0],
            coupling: Vec::new(),
            noise_std: 0.1,
            ar_coef: 0.5,
            kinds: vec![AnomalyKind::Spike, AnomalyKind::LevelShift, AnomalyKind::PatternBreak],
            duration: 20,
            magnitude: 3.0,
            contamination: 0.1,
            train_fraction: 0.6,
            test_anomalies: 10,
            injections: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_entities;
        if k == 0 || self.length == 0 {
            return Err(Error::config("num_entities and length must be positive"));
        }
        if self.group_periods.is_empty() || self.group_periods.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::config("group_periods must be non-empty and positive"));
        }
        if !self.coupling.is_empty()
            && (self.coupling.len() != k || self.coupling.iter().any(|r| r.len() != k))
        {
            return Err(Error::config(format!("coupling must be {k}×{k}")));
        }
        if !(0.0..=0.3).contains(&self.contamination) {
            return Err(Error::config(format!(
                "contamination {} outside [0, 0.3]",
                self.contamination
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction must be in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) || !(self.ar_coef.abs() < 1.0) {
            return Err(Error::config("noise_std must be ≥ 0 and |ar_coef| < 1"));
        }
        let placed = self.contamination > 0.0 || self.test_anomalies > 0;
        if placed && (self.kinds.is_empty() || self.duration == 0) {
            return Err(Error::config("anomalies need at least one kind and a positive duration"));
        }
        for inj in &self.injections {
            if inj.entity >= k || inj.duration == 0 || inj.start + inj.duration > self.length {
                return Err(Error::config(format!("injection {inj:?} outside the series")));
            }
        }
        Ok(())
    }

    fn coupling_matrix(&self) -> Vec<Vec<f64>> {
        if !self.coupling.is_empty() {
            return self.coupling.clone();
        }
        let k = self.num_entities;
        (0..k)
            .map(|i| (0..k).map(|j| if k > 1 && j == (i + 1) % k { 0.4 } else { 0.0 }).collect())
            .collect()
    }

    pub fn train_end(&self) -> usize {
        (self.train_fraction * self.length as f64).round() as usize
    }
}

/// `count` non-overlapping intervals of `duration` in `[lo, hi)`, one per
/// equal-width slot.
fn stratified(lo: usize, hi: usize, count: usize, duration: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let slot = (hi - lo) / count;
    if slot < duration {
        return Err(Error::config(format!(
            "{count} anomalies of duration {duration} do not fit in [{lo}, {hi})"
        )));
    }
    Ok((0..count)
        .map(|i| lo + i * slot + rng.random_range(0..=slot - duration))
        .collect())
}

/// Merge overlapping intervals, keeping the first kind and the union of entities.
fn merge(mut intervals: Vec<AnomalyInterval>) -> Vec<AnomalyInterval> {
    intervals.sort_by_key(|iv| (iv.start, iv.end));
    let mut out: Vec<AnomalyInterval> = Vec::with_capacity(intervals.len());
    for iv in intervals {
        match out.last_mut() {
            Some(last) if iv.start < last.end => {
                log::warn!(
                    "anomaly [{}, {}) overlaps [{}, {}); merged",
                    iv.start,
                    iv.end,
                    last.start,
                    last.end
                );
                last.end = last.end.max(iv.end);
                for e in iv.entities {
                    if !last.entities.contains(&e) {
                        last.entities.push(e);
                    }
                }
                last.entities.sort_unstable();
            }
            _ => out.push(iv),
        }
    }
    out
}

/// Generate the table and its ground-truth anomaly intervals.
pub fn generate(config: &SynthConfig) -> Result<(TimeSeriesTable, Vec<AnomalyInterval>)> {
    config.validate()?;
    let (k, l) = (config.num_entities, config.length);
    let mut rng = rng::stream(config.seed, rng::STREAM_SYNTH);
    let groups = config.group_periods.len();
    let tau = std::f64::consts::TAU;

    let phases: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..tau)).collect();
    let period = |e: usize| config.group_periods[e % groups];
    let mut base = Array2::from_shape_fn((k, l), |(e, t)| (tau * t as f64 / period(e) + phases[e]).sin());

    // placement before noise so the noise stream does not depend on it
    let train_end = config.train_end();
    let n_train = (config.contamination * train_end as f64 / config.duration.max(1) as f64).round() as usize;
    let mut planned: Vec<Injection> = Vec::new();
    for (lo, hi, count) in [(0, train_end, n_train), (train_end, l, config.test_anomalies)] {
        for start in stratified(lo, hi, count, config.duration, &mut rng)? {
            planned.push(Injection {
                kind: config.kinds[rng.random_range(0..config.kinds.len())],
                start,
                duration: config.duration,
                entity: rng.random_range(0..k),
            });
        }
    }
    planned.extend(config.injections.iter().cloned());

    for inj in &planned {
        if inj.kind == AnomalyKind::PatternBreak {
            let p = period(inj.entity) / 3.7;
            for t in inj.start..inj.start + inj.duration {
                base[[inj.entity, t]] = (tau * t as f64 / p + phases[inj.entity]).sin();
            }
        }
    }

    let coupling = config.coupling_matrix();
    let mut values = base.clone();
    for i in 0..k {
        for (j, &c) in coupling[i].iter().enumerate() {
            if c != 0.0 {
                let src = base.row(j).to_owned();
                values.row_mut(i).scaled_add(c, &src);
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    for i in 0..k {
        let mut ar = 0.0;
        for t in 0..l {
            ar = config.ar_coef * ar + noise.sample(&mut rng);
            values[[i, t]] += if config.noise_std > 0.0 { ar } else { 0.0 };
        }
    }

    let mut labels = vec![0u8; l];
    let mut intervals = Vec::with_capacity(planned.len());
    for inj in &planned {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let span = inj.start..inj.start + inj.duration;
        for (n, t) in span.clone().enumerate() {
            let delta = match inj.kind {
                AnomalyKind::Spike => 2.0 * config.magnitude * if n % 2 == 0 { sign } else { -sign },
                AnomalyKind::LevelShift => config.magnitude * sign,
                AnomalyKind::PatternBreak => 0.0,
            };
            values[[inj.entity, t]] += delta;
            labels[t] = 1;
        }
        intervals.push(AnomalyInterval {
            start: span.start,
            end: span.end,
            kind: inj.kind,
            entities: vec![inj.entity],
        });
    }

    let names = (0..k).map(|i| format!("e{i}")).collect();
    let table = TimeSeriesTable::new(values, labels, names)?;
    Ok((table, merge(intervals)))
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    config: &'a SynthConfig,
    intervals: &'a [AnomalyInterval],
}

/// Ground-truth JSON: the generating config and the merged intervals.
pub fn write_ground_truth(config: &SynthConfig, intervals: &[AnomalyInterval], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&GroundTruth { config, intervals })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
