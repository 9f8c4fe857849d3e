//! Dynamic entity graph from scaled dot-product self-attention.
//!
//! Each entity's window row `x_i ∈ R^M` is projected to a query and a key;
//! `e_ij = (x_i W_q)·(x_j W_k) / √M` and the adjacency row `i` is the softmax
//! of `e_i·`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::{Graph, ParamStore, Var};

pub const W_QUERY: &str = "attn.w_query";
pub const W_KEY: &str = "attn.w_key";

/// Dropout rate on attention weights during training.
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Edges below this weight are dropped from exported graphs.
pub const EXPORT_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_query: Array2<f64>,
    pub w_key: Array2<f64>,
    pub dropout_rate: f64,
}

impl AttentionParams {
    pub fn from_store(store: &ParamStore, dropout_rate: f64) -> Result<Self> {
        Ok(Self {
            w_query: store.value(W_QUERY)?.clone(),
            w_key: store.value(W_KEY)?.clone(),
            dropout_rate,
        })
    }

    pub fn window_size(&self) -> usize {
        self.w_query.nrows()
    }
}

/// Register `M × M` query/key weights with `U(±1/√M)` initialisation.
pub fn register(store: &mut ParamStore, m: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (m as f64).sqrt();
    store.insert_uniform(W_QUERY, (m, m), bound, rng);
    store.insert_uniform(W_KEY, (m, m), bound, rng);
}

/// Row-stochastic adjacency of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    pub a: Array2<f64>,
    pub window_index: usize,
}

/// Batched scores: `x` stacks `G` windows of `k` rows each (`G·k × M`);
/// the result is `G·k × k`.
pub fn scores_graph(g: &mut Graph, x: Var, w_query: Var, w_key: Var, k: usize) -> Result<Var> {
    let m = g.shape(x).1;
    let q = g.matmul(x, w_query)?;
    let key = g.matmul(x, w_key)?;
    let e = g.group_scores(q, key, k)?;
    g.scale(e, 1.0 / (m as f64).sqrt())
}

/// Inverted-dropout mask: entries are `0` with probability `rate`, otherwise
/// `1 / (1 − rate)`.
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut (impl Rng + ?Sized)) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// Softmax over each score row, then dropout on the weights in training mode.
/// Rows are not renormalized after dropout.
pub fn adjacency_graph(
    g: &mut Graph,
    scores: Var,
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> Result<Var> {
    let a = g.softmax(scores)?;
    match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let mask = dropout_mask(g.shape(a), rate, rng);
            g.mul_const(a, mask)
        }
        _ => Ok(a),
    }
}

/// `e_ij = (x_i W_q)·(x_j W_k) / √M` for a single `K × M` window.
pub fn pairwise_scores(x: ArrayView2<'_, f64>, params: &AttentionParams) -> Result<Array2<f64>> {
    let m = params.window_size();
    if x.ncols() != m || params.w_key.dim() != (m, m) || params.w_query.ncols() != m {
        return Err(Error::Shape {
            op: "pairwise_scores",
            lhs: x.dim(),
            rhs: params.w_query.dim(),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(x.to_owned());
    let wq = g.constant(params.w_query.clone());
    let wk = g.constant(params.w_key.clone());
    let e = scores_graph(&mut g, xv, wq, wk, x.nrows())?;
    Ok(g.value(e).clone())
}

/// Adjacency from a `K × K` score matrix. Deterministic unless `training`.
pub fn attention_adjacency(
    scores: &Array2<f64>,
    training: bool,
    dropout_rate: f64,
    rng: &mut dyn rand::RngCore,
    window_index: usize,
) -> Result<AdjacencyMatrix> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let dropout = training.then_some((dropout_rate, rng));
    let a = adjacency_graph(&mut g, s, dropout)?;
    Ok(AdjacencyMatrix {
        a: g.value(a).clone(),
        window_index,
    })
}

/// Zero every weight below `threshold`.
pub fn threshold_adjacency(a: &Array2<f64>, threshold: f64) -> Array2<f64> {
    a.mapv(|v| if v < threshold { 0.0 } else { v })
}
