//! Anomaly scores, IQR thresholds, window verdicts and AUROC.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowBatch;
use crate::error::{Error, Result};
use crate::training::MtgFlow;

pub const DEFAULT_LAMBDA: f64 = 0.8;
const IQR_FACTOR: f64 = 1.5;

/// Per-window scores. `scores[c]` is the mean over entities of
/// `entity_scores[[c, k]] = −log P(x_k^c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub window_starts: Vec<usize>,
    pub window_size: usize,
    pub scores: Vec<f64>,
    pub entity_scores: Array2<f64>,
    pub labels: Option<Vec<u8>>,
}

impl ScoreSeries {
    /// Scores from an `N × K` log-density matrix.
    pub fn from_log_probs(
        log_probs: &Array2<f64>,
        window_starts: Vec<usize>,
        window_size: usize,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let (n, k) = log_probs.dim();
        if window_starts.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Shape {
                op: "score series",
                lhs: (n, k),
                rhs: (window_starts.len(), labels.as_ref().map_or(n, Vec::len)),
            });
        }
        if let Some(idx) = log_probs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "score of window {}, entity {}",
                idx / k,
                idx % k
            )));
        }
        let entity_scores = -log_probs;
        let scores = entity_scores
            .rows()
            .into_iter()
            .map(|r| r.sum() / k as f64)
            .collect();
        Ok(Self {
            window_starts,
            window_size,
            scores,
            entity_scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_scores.ncols()
    }
}

/// Eval-mode scores of every window in `windows`.
pub fn anomaly_scores(model: &MtgFlow, windows: &WindowBatch) -> Result<ScoreSeries> {
    let views: Vec<_> = windows.windows().collect();
    let lp = if views.is_empty() {
        Array2::zeros((0, model.config.num_entities))
    } else {
        model.log_probs(&views)?
    };
    ScoreSeries::from_log_probs(
        &lp,
        windows.window_starts.clone(),
        windows.window_size,
        Some(windows.window_labels.clone()),
    )
}

/// Percentile of sorted data with linear interpolation at position `p·(n−1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `Q3 + 1.5·(Q3 − Q1)`.
pub fn iqr_threshold(scores: &[f64]) -> Result<f64> {
    if scores.len() < 4 {
        return Err(Error::config(format!(
            "IQR threshold needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("threshold input".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = percentile(&sorted, 0.25);
    let q3 = percentile(&sorted, 0.75);
    Ok(q3 + IQR_FACTOR * (q3 - q1))
}

/// `λ_k ×` the IQR threshold of each entity's training scores.
pub fn entity_thresholds(series: &ScoreSeries, lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != series.num_entities() {
        return Err(Error::config(format!(
            "{} lambdas for {} entities",
            lambda.len(),
            series.num_entities()
        )));
    }
    series
        .entity_scores
        .columns()
        .into_iter()
        .zip(lambda)
        .map(|(col, &l)| Ok(l * iqr_threshold(&col.to_vec())?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub global: f64,
    pub entity: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ThresholdSet {
    /// Thresholds from training-split scores with one λ for every entity.
    pub fn fit(training: &ScoreSeries, lambda: f64) -> Result<Self> {
        let lambda = vec![lambda; training.num_entities()];
        Ok(Self {
            global: iqr_threshold(&training.scores)?,
            entity: entity_thresholds(training, &lambda)?,
            lambda,
        })
    }

    /// `{global, entity: {name: threshold}, lambda: {name: λ}}`.
    pub fn to_json(&self, entity_names: &[String]) -> serde_json::Value {
        let named = |values: &[f64]| -> BTreeMap<&str, f64> {
            entity_names.iter().map(String::as_str).zip(values.iter().copied()).collect()
        };
        serde_json::json!({
            "global": self.global,
            "entity": named(&self.entity),
            "lambda": named(&self.lambda),
        })
    }

    pub fn write_json(&self, entity_names: &[String], path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json(entity_names))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mann–Whitney AUROC: `(#(pos > neg) + ½·#ties) / (P·N)`.
pub fn auroc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape {
            op: "auroc",
            lhs: (1, labels.len()),
            rhs: (1, scores.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("auroc scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&t| labels[t] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub anomalous: bool,
    /// entities whose score exceeds their own threshold
    pub culprits: Vec<usize>,
}

/// Window anomalous iff `S_c > global`; entity implicated iff `S_ck > threshold_k`.
pub fn classify(series: &ScoreSeries, thresholds: &ThresholdSet) -> Vec<Verdict> {
    series
        .scores
        .iter()
        .zip(series.entity_scores.rows())
        .map(|(&s, row)| {
            let anomalous = s > thresholds.global;
            let culprits = if anomalous {
                row.iter()
                    .zip(&thresholds.entity)
                    .enumerate()
                    .filter(|(_, (v, t))| v > t)
                    .map(|(k, _)| k)
                    .collect()
            } else {
                Vec::new()
            };
            Verdict { anomalous, culprits }
        })
        .collect()
}

/// `window_start,window_end,score,label,verdict,score_<entity>...`; the label
/// cell is empty when no labels are known.
pub fn write_scores_csv(
    series: &ScoreSeries,
    verdicts: &[Verdict],
    entity_names: &[String],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::config(format!("{}: {other:?}", path.display())),
    })?;
    let mut header: Vec<String> = ["window_start", "window_end", "score", "label", "verdict"]
        .map(String::from)
        .to_vec();
    header.extend(entity_names.iter().map(|n| format!("score_{n}")));
    w.write_record(&header)?;
    for c in 0..series.len() {
        let start = series.window_starts[c];
        let mut rec = vec![
            start.to_string(),
            (start + series.window_size).to_string(),
            series.scores[c].to_string(),
            series.labels.as_ref().map_or(String::new(), |l| l[c].to_string()),
            u8::from(verdicts.get(c).is_some_and(|v| v.anomalous)).to_string(),
        ];
        rec.extend(series.entity_scores.row(c).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Window scores and (if present) labels from a scores CSV.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Option<Vec<u8>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::config(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let score_col = find("score").ok_or_else(|| Error::Parse {
        row: 1,
        column: "score".into(),
        message: "missing column".into(),
    })?;
    let label_col = find("label");
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut labelled = label_col.is_some();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let cell = &rec[score_col];
        scores.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
            row,
            column: "score".into(),
            message: e.to_string(),
        })?);
        if let Some(c) = label_col {
            match rec[c].trim() {
                "" => labelled = false,
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => {
                    return Err(Error::Parse {
                        row,
                        column: "label".into(),
                        message: format!("label must be 0 or 1, got `{other}`"),
                    })
                }
            }
        }
    }
    Ok((scores, labelled.then_some(labels)))
}
