//! End-to-end fitting and scoring on a raw table.

use crate::cluster::{kshape, ClusterAssignment};
use crate::dataset::{make_windows, split, zscore_normalize, NormStats, TimeSeriesTable, WindowBatch};
use crate::detect::{anomaly_scores, ScoreSeries, ThresholdSet};
use crate::error::{Error, Result};
use crate::flow::{init_targets, TargetBank, TargetMode};
use crate::training::{train, MtgFlow, TrainConfig, TrainReport};

/// Which chronological partition to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Valid,
    Test,
    All,
}

/// Chronological split normalized with training statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: TimeSeriesTable,
    pub valid: TimeSeriesTable,
    pub test: TimeSeriesTable,
    pub norm: NormStats,
    /// first timestep of (train, valid, test) in the source table
    pub offsets: [usize; 3],
}

pub fn prepare(table: &TimeSeriesTable, config: &TrainConfig) -> Result<Prepared> {
    let (train, valid, test) = split(table, &config.split)?;
    if train.len() < 2 {
        return Err(Error::config("training split needs at least two timesteps"));
    }
    let (train, norm) = zscore_normalize(&train)?;
    let valid = norm.apply(&valid)?;
    let test = norm.apply(&test)?;
    let (a, b) = config.split.boundaries(table.len());
    Ok(Prepared {
        train,
        valid,
        test,
        norm,
        offsets: [0, a, b],
    })
}

/// Windows of `part` from a table normalized with `norm`, with the offset of
/// the part in the source table (window starts are relative to it).
pub fn windows_of(
    table: &TimeSeriesTable,
    norm: &NormStats,
    config: &TrainConfig,
    part: Part,
) -> Result<(WindowBatch, usize)> {
    let (a, b) = config.split.boundaries(table.len());
    let (lo, hi) = match part {
        Part::Train => (0, a),
        Part::Valid => (a, b),
        Part::Test => (b, table.len()),
        Part::All => (0, table.len()),
    };
    let slice = norm.apply(&table.slice_time(lo, hi))?;
    Ok((make_windows(&slice, config.window_size, config.stride)?, lo))
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: MtgFlow,
    pub report: TrainReport,
    pub norm: NormStats,
    pub clusters: Option<ClusterAssignment>,
}

/// Target bank for `config`, clustering the normalized training split when
/// cluster mode is selected.
pub fn targets_for(train: &TimeSeriesTable, config: &TrainConfig) -> Result<(TargetBank, Option<ClusterAssignment>)> {
    let k = train.num_entities();
    if config.disable_entity_aware {
        return Ok((TargetBank::shared_zero(k, config.window_size), None));
    }
    match config.mode {
        TargetMode::Entity => Ok((init_targets(TargetMode::Entity, None, k, config.window_size, config.seed)?, None)),
        TargetMode::Cluster => {
            let m = if config.clusters > k {
                log::warn!("{} clusters requested for {k} entities; using {k}", config.clusters);
                k
            } else {
                config.clusters
            };
            let assignment = kshape(train, m, config.seed, config.kshape_max_iter)?;
            let bank = init_targets(
                TargetMode::Cluster,
                Some(&assignment.labels),
                k,
                config.window_size,
                config.seed,
            )?;
            Ok((bank, Some(assignment)))
        }
    }
}

/// Split, normalize, build targets and train.
pub fn fit(table: &TimeSeriesTable, config: &TrainConfig) -> Result<Fitted> {
    config.validate()?;
    let prepared = prepare(table, config)?;
    let (targets, clusters) = targets_for(&prepared.train, config)?;
    let train_w = make_windows(&prepared.train, config.window_size, config.stride)?;
    let valid_w = make_windows(&prepared.valid, config.window_size, config.stride)?;
    let valid = (!valid_w.is_empty()).then_some(&valid_w);
    let (model, report) = train(&train_w, valid, config, targets)?;
    Ok(Fitted {
        model,
        report,
        norm: prepared.norm,
        clusters,
    })
}

/// Scores of `part` plus thresholds fitted on the training-split scores.
/// Window starts in the result are positions in `table`.
pub fn score(
    model: &MtgFlow,
    norm: &NormStats,
    table: &TimeSeriesTable,
    config: &TrainConfig,
    part: Part,
) -> Result<(ScoreSeries, ThresholdSet)> {
    let (train_w, _) = windows_of(table, norm, config, Part::Train)?;
    let train_scores = anomaly_scores(model, &train_w)?;
    let thresholds = ThresholdSet::fit(&train_scores, config.lambda)?;
    let series = if part == Part::Train {
        train_scores
    } else {
        let (w, offset) = windows_of(table, norm, config, part)?;
        let mut s = anomaly_scores(model, &w)?;
        s.window_starts.iter_mut().for_each(|st| *st += offset);
        s
    };
    Ok((series, thresholds))
}
