//! Spatio-temporal conditions `C^t = ReLU(A H^t W1 + H^{t-1} W2) W3`.

use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gradengine::{Graph, ParamStore, Var};

pub const W1: &str = "cond.w1";
pub const W2: &str = "cond.w2";
pub const W3: &str = "cond.w3";

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionParams {
    /// graph-convolution weights, `d_h × d_c`
    pub w1: Array2<f64>,
    /// history weights, `d_h × d_c`
    pub w2: Array2<f64>,
    /// output projection, `d_c × d_c`
    pub w3: Array2<f64>,
}

impl ConditionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w1: store.value(W1)?.clone(),
            w2: store.value(W2)?.clone(),
            w3: store.value(W3)?.clone(),
        })
    }
}

pub fn register(store: &mut ParamStore, hidden: usize, cond: usize, rng: &mut impl Rng) {
    let bound_h = 1.0 / (hidden as f64).sqrt();
    let bound_c = 1.0 / (cond as f64).sqrt();
    store.insert_uniform(W1, (hidden, cond), bound_h, rng);
    store.insert_uniform(W2, (hidden, cond), bound_h, rng);
    store.insert_uniform(W3, (cond, cond), bound_c, rng);
}

/// Batched conditions. `states` are the `M` hidden states (`R × d_h` each,
/// rows grouped into windows of `k` entities) and `adjacency` the `R × k`
/// stacked adjacency matrices; `None` drops the graph term entirely.
/// Returns `R·M × d_c` with row `r·M + t` holding `C[r][t]`.
pub fn condition_graph(
    g: &mut Graph,
    adjacency: Option<Var>,
    states: &[Var],
    k: usize,
    w1: Var,
    w2: Var,
    w3: Var,
) -> Result<Var> {
    let Some(&first) = states.first() else {
        return Err(Error::config("condition needs at least one timestep"));
    };
    let (rows, hidden) = g.shape(first);
    let m = states.len();
    let zero = g.constant(Array2::zeros((rows, hidden)));
    let mut shifted = Vec::with_capacity(m);
    shifted.push(zero);
    shifted.extend_from_slice(&states[..m - 1]);
    let prev = g.concat_cols(&shifted)?;
    let prev = g.reshape(prev, rows * m, hidden)?;
    let mut pre = g.matmul(prev, w2)?;
    if let Some(a) = adjacency {
        let h = g.concat_cols(states)?;
        let mixed = g.group_mix(a, h, k)?;
        let mixed = g.reshape(mixed, rows * m, hidden)?;
        let conv = g.matmul(mixed, w1)?;
        pre = g.add(conv, pre)?;
    }
    let act = g.relu(pre)?;
    g.matmul(act, w3)
}

/// Conditions for one window: `a` is `K × K`, `h` is `K × M × d_h`; returns
/// `K × M × d_c`. With `use_graph = false` the `A H W1` term is removed.
pub fn spatio_temporal_condition(
    a: &Array2<f64>,
    h: &Array3<f64>,
    params: &ConditionParams,
    use_graph: bool,
) -> Result<Array3<f64>> {
    let (k, m, hidden) = h.dim();
    if a.dim() != (k, k) {
        return Err(Error::Shape {
            op: "spatio_temporal_condition",
            lhs: a.dim(),
            rhs: (k, m),
        });
    }
    if params.w1.nrows() != hidden || params.w2.nrows() != hidden {
        return Err(Error::Shape {
            op: "spatio_temporal_condition",
            lhs: (m, hidden),
            rhs: params.w1.dim(),
        });
    }
    let d_c = params.w3.ncols();
    let mut g = Graph::new();
    let states: Vec<Var> = (0..m)
        .map(|t| g.constant(h.slice(s![.., t, ..]).to_owned()))
        .collect();
    let av = g.constant(a.clone());
    let w1 = g.constant(params.w1.clone());
    let w2 = g.constant(params.w2.clone());
    let w3 = g.constant(params.w3.clone());
    let c = condition_graph(&mut g, use_graph.then_some(av), &states, k, w1, w2, w3)?;
    let flat: Vec<f64> = g.value(c).iter().copied().collect();
    Ok(Array3::from_shape_vec((k, m, d_c), flat).expect("R·M × d_c rows are (entity, time)"))
}
