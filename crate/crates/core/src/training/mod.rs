//! Joint maximum-likelihood training of every module with Adam.

mod checkpoint;
mod model;

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{SplitSpec, WindowBatch};
use crate::error::{Error, Result};
use crate::flow::TargetMode;
use crate::gradengine::{AdamConfig, Graph, Var};
use crate::rng;

pub use checkpoint::{ModelCheckpoint, MODEL_FORMAT_VERSION};
pub use model::{stack_windows, ModelConfig, MtgFlow};

/// Rows (window × entity) per tape during training; larger batches are
/// accumulated over several tapes.
const MICRO_ROWS: usize = 1024;

/// Abort when the epoch NLL exceeds this multiple of the first epoch's.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window_size: usize,
    pub stride: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// windows per optimizer step
    pub batch_size: usize,
    pub flow_blocks: usize,
    pub hidden_size: usize,
    pub condition_size: usize,
    pub flow_hidden: usize,
    pub dropout: f64,
    pub mode: TargetMode,
    pub clusters: usize,
    pub kshape_max_iter: usize,
    pub seed: u64,
    pub disable_graph: bool,
    pub disable_entity_aware: bool,
    /// entity threshold scale
    pub lambda: f64,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window_size: 60,
            stride: 10,
            learning_rate: 0.002,
            epochs: 40,
            batch_size: 512,
            flow_blocks: 1,
            hidden_size: 32,
            condition_size: 32,
            flow_hidden: 64,
            dropout: 0.2,
            mode: TargetMode::Entity,
            clusters: 20,
            kshape_max_iter: 100,
            seed: 0,
            disable_graph: false,
            disable_entity_aware: false,
            lambda: 0.8,
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for univariate series: window 10, stride 10, batch 256.
    pub fn univariate() -> Self {
        Self {
            window_size: 10,
            stride: 10,
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn model_config(&self, num_entities: usize) -> ModelConfig {
        ModelConfig {
            num_entities,
            window_size: self.window_size,
            hidden_size: self.hidden_size,
            condition_size: self.condition_size,
            flow_hidden: self.flow_hidden,
            flow_blocks: self.flow_blocks,
            dropout: self.dropout,
            disable_graph: self.disable_graph,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("window_size", self.window_size),
            ("stride", self.stride),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("flow_blocks", self.flow_blocks),
            ("hidden_size", self.hidden_size),
            ("condition_size", self.condition_size),
            ("flow_hidden", self.flow_hidden),
            ("clusters", self.clusters),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be positive"));
        }
        self.split.validate()
    }
}

/// `−mean log P` over every (window, entity) pair of `windows`, as a `1×1`
/// tape node. `dropout` switches the attention to training mode.
pub fn mle_loss(
    g: &mut Graph,
    model: &MtgFlow,
    windows: &[ArrayView2<'_, f64>],
    dropout: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let lp = model.log_probs_graph(g, windows, dropout)?;
    let k = model.config.num_entities;
    if let Some(r) = g.value(lp).iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            batch: r / k,
            entity: Some(r % k),
        });
    }
    let mean = g.mean(lp)?;
    g.scale(mean, -1.0)
}

/// Eval-mode mean NLL over a window set.
pub fn mean_nll(model: &MtgFlow, windows: &WindowBatch) -> Result<f64> {
    let views: Vec<_> = windows.windows().collect();
    let lp = model.log_probs(&views)?;
    Ok(-lp.mean().unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// mean training NLL of each epoch, accumulated during the epoch
    pub epoch_nll: Vec<f64>,
    /// eval-mode validation NLL after each epoch, when a validation set is given
    pub valid_nll: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    /// Training log as `epoch,mean_nll` (plus `valid_nll` when recorded).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let with_valid = !self.valid_nll.is_empty();
        out.push_str(if with_valid { "epoch,mean_nll,valid_nll\n" } else { "epoch,mean_nll\n" });
        for (e, nll) in self.epoch_nll.iter().enumerate() {
            out.push_str(&format!("{},{nll}", e + 1));
            if let Some(v) = self.valid_nll.get(e) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Train `model` in place on `data`. Window order is reshuffled every epoch
/// from the run seed; dropout masks come from a per-step stream.
pub fn train_model(
    model: &mut MtgFlow,
    data: &WindowBatch,
    valid: Option<&WindowBatch>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config("training needs at least one window"));
    }
    let k = model.config.num_entities;
    let adam = config.adam();
    let micro = (MICRO_ROWS / k).max(1);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_index = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::substream(config.seed, rng::STREAM_SHUFFLE, epoch as u64));
        let mut nll_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grads();
            let mut dropout = rng::substream(config.seed, rng::STREAM_DROPOUT, batch_index as u64);
            for part in batch.chunks(micro) {
                let views: Vec<_> = part.iter().map(|&i| data.window(i)).collect();
                let mut g = Graph::new();
                let loss = mle_loss(&mut g, model, &views, Some(&mut dropout)).map_err(|e| match e {
                    Error::NonFiniteLoss { entity, .. } => Error::NonFiniteLoss {
                        batch: batch_index,
                        entity,
                    },
                    other => other,
                })?;
                nll_sum += g.scalar(loss) * part.len() as f64;
                g.backward(loss)?;
                model
                    .params
                    .accumulate_grads(&g, part.len() as f64 / batch.len() as f64)?;
            }
            model.params.adam_step(&adam)?;
            batch_index += 1;
        }
        let nll = nll_sum / data.len() as f64;
        log::info!("epoch {}: mean NLL {nll:.6}", epoch + 1);
        report.epoch_nll.push(nll);
        report.steps = batch_index;
        let initial = report.epoch_nll[0];
        if !nll.is_finite() || nll > DIVERGENCE_FACTOR * initial.abs().max(1.0) {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                nll,
                initial,
            });
        }
        if let Some(v) = valid.filter(|v| !v.is_empty()) {
            let vn = mean_nll(model, v)?;
            log::info!("epoch {}: validation NLL {vn:.6}", epoch + 1);
            report.valid_nll.push(vn);
        }
    }
    Ok(report)
}

/// Build a model with fresh parameters and train it.
pub fn train(
    data: &WindowBatch,
    valid: Option<&WindowBatch>,
    config: &TrainConfig,
    targets: crate::flow::TargetBank,
) -> Result<(MtgFlow, TrainReport)> {
    config.validate()?;
    let mut model = MtgFlow::new(config.model_config(data.num_entities()), targets, config.seed)?;
    let report = train_model(&mut model, data, valid, config)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests;
