//! The assembled network: attention graph, LSTM, condition fusion and flow.

use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::condition;
use crate::error::{Error, Result};
use crate::flow::{self, FlowStack, TargetBank};
use crate::gradengine::{Graph, ParamStore, Var};
use crate::graphlearn::{self, AdjacencyMatrix};
use crate::rng;
use crate::temporal;

/// Window rows per tape during evaluation.
const EVAL_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_entities: usize,
    pub window_size: usize,
    pub hidden_size: usize,
    pub condition_size: usize,
    pub flow_hidden: usize,
    pub flow_blocks: usize,
    pub dropout: f64,
    pub disable_graph: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_entities", self.num_entities),
            ("window_size", self.window_size),
            ("hidden_size", self.hidden_size),
            ("condition_size", self.condition_size),
            ("flow_hidden", self.flow_hidden),
            ("flow_blocks", self.flow_blocks),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtgFlow {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub targets: TargetBank,
}

/// Stack windows entity-major: row `b·K + k` is entity `k` of window `b`.
pub fn stack_windows(windows: &[ArrayView2<'_, f64>]) -> Array2<f64> {
    let (k, m) = windows.first().map_or((0, 0), |w| w.dim());
    let mut out = Array2::zeros((windows.len() * k, m));
    for (b, w) in windows.iter().enumerate() {
        out.slice_mut(ndarray::s![b * k..(b + 1) * k, ..]).assign(w);
    }
    out
}

impl MtgFlow {
    /// Fresh parameters from the init stream of `seed`. The parameter layout
    /// does not depend on ablations or target mode.
    pub fn new(config: ModelConfig, targets: TargetBank, seed: u64) -> Result<Self> {
        config.validate()?;
        if targets.num_entities() != config.num_entities || targets.dim != config.window_size {
            return Err(Error::config(format!(
                "target bank is {}×{}, model expects {} entities of window {}",
                targets.num_entities(),
                targets.dim,
                config.num_entities,
                config.window_size
            )));
        }
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let mut params = ParamStore::new();
        graphlearn::register(&mut params, config.window_size, &mut rng);
        temporal::register(&mut params, config.hidden_size, &mut rng);
        condition::register(&mut params, config.hidden_size, config.condition_size, &mut rng);
        flow::register(
            &mut params,
            config.window_size,
            config.condition_size,
            config.flow_hidden,
            config.flow_blocks,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            targets,
        })
    }

    fn check_windows(&self, windows: &[ArrayView2<'_, f64>]) -> Result<()> {
        let want = (self.config.num_entities, self.config.window_size);
        match windows.iter().find(|w| w.dim() != want) {
            Some(w) => Err(Error::Shape {
                op: "model input window",
                lhs: w.dim(),
                rhs: want,
            }),
            None if windows.is_empty() => Err(Error::EmptyInput("no windows".into())),
            None => Ok(()),
        }
    }

    /// Attention adjacency on the tape, `R × K`. With `dropout` set, weights
    /// are dropped as in training.
    fn adjacency_var(&self, g: &mut Graph, x: Var, dropout: Option<&mut dyn RngCore>) -> Result<Var> {
        let wq = g.param(&self.params, graphlearn::W_QUERY)?;
        let wk = g.param(&self.params, graphlearn::W_KEY)?;
        let scores = graphlearn::scores_graph(g, x, wq, wk, self.config.num_entities)?;
        graphlearn::adjacency_graph(g, scores, dropout.map(|r| (self.config.dropout, r)))
    }

    /// `log P(x_k^c)` for every window and entity, `R × 1` on the tape.
    pub fn log_probs_graph(
        &self,
        g: &mut Graph,
        windows: &[ArrayView2<'_, f64>],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_windows(windows)?;
        let k = self.config.num_entities;
        let x = g.constant(stack_windows(windows));
        let adjacency = if self.config.disable_graph {
            None
        } else {
            Some(self.adjacency_var(g, x, dropout)?)
        };
        let w_ih = g.param(&self.params, temporal::W_IH)?;
        let w_hh = g.param(&self.params, temporal::W_HH)?;
        let bias = g.param(&self.params, temporal::BIAS)?;
        let states = temporal::encode_graph(g, x, w_ih, w_hh, bias)?;
        let w1 = g.param(&self.params, condition::W1)?;
        let w2 = g.param(&self.params, condition::W2)?;
        let w3 = g.param(&self.params, condition::W3)?;
        let cond = condition::condition_graph(g, adjacency, &states, k, w1, w2, w3)?;
        let (z, logdet) = flow::flow_graph(g, &self.params, x, cond, self.config.flow_blocks)?;
        let rows = windows.len() * k;
        let means = Array2::from_shape_fn((rows, self.config.window_size), |(r, _)| {
            self.targets.mean_value(r % k)
        });
        flow::log_prob_graph(g, z, logdet, means)
    }

    /// Eval-mode log-densities, `N × K`.
    pub fn log_probs(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
        self.check_windows(windows)?;
        let k = self.config.num_entities;
        let chunk = (EVAL_ROWS / k).max(1);
        let mut out = Array2::zeros((windows.len(), k));
        for (c, part) in windows.chunks(chunk).enumerate() {
            let mut g = Graph::new();
            let lp = self.log_probs_graph(&mut g, part, None)?;
            for (r, &v) in g.value(lp).iter().enumerate() {
                out[[c * chunk + r / k, r % k]] = v;
            }
        }
        Ok(out)
    }

    /// Eval-mode adjacency of one window.
    pub fn adjacency(&self, window: ArrayView2<'_, f64>, window_index: usize) -> Result<AdjacencyMatrix> {
        self.check_windows(&[window])?;
        let mut g = Graph::new();
        let x = g.constant(window.to_owned());
        let a = self.adjacency_var(&mut g, x, None)?;
        Ok(AdjacencyMatrix {
            a: g.value(a).clone(),
            window_index,
        })
    }

    /// The flow with the current parameters, for sequential evaluation.
    pub fn flow_stack(&self) -> Result<FlowStack> {
        FlowStack::from_store(&self.params, self.config.flow_blocks)
    }
}
