//! Single-layer LSTM run independently over each entity's window.
//!
//! Gate layout along the `4·d_h` axis is `[input, forget, cell, output]`.

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;

use crate::error::Result;
use crate::gradengine::{Graph, ParamStore, Var};

pub const W_IH: &str = "lstm.w_ih";
pub const W_HH: &str = "lstm.w_hh";
pub const BIAS: &str = "lstm.bias";

/// Weights of a scalar-input LSTM cell with hidden size `d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    /// `1 × 4d_h`
    pub w_ih: Array2<f64>,
    /// `d_h × 4d_h`
    pub w_hh: Array2<f64>,
    /// `1 × 4d_h`
    pub bias: Array2<f64>,
}

impl RecurrentParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_ih: store.value(W_IH)?.clone(),
            w_hh: store.value(W_HH)?.clone(),
            bias: store.value(BIAS)?.clone(),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.nrows()
    }
}

pub fn register(store: &mut ParamStore, hidden: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.insert_uniform(W_IH, (1, 4 * hidden), bound, rng);
    store.insert_uniform(W_HH, (hidden, 4 * hidden), bound, rng);
    store.insert_uniform(BIAS, (1, 4 * hidden), bound, rng);
}

/// Run the cell over the columns of `x` (`R × M`, one sequence per row) from
/// a zero state. Returns the `M` hidden states, each `R × d_h`.
pub fn encode_graph(g: &mut Graph, x: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Vec<Var>> {
    let (rows, m) = g.shape(x);
    let hidden = g.shape(w_hh).0;
    let mut h = g.constant(Array2::zeros((rows, hidden)));
    let mut c = g.constant(Array2::zeros((rows, hidden)));
    let mut states = Vec::with_capacity(m);
    for t in 0..m {
        let xt = g.slice_cols(x, t, t + 1)?;
        let gx = g.matmul(xt, w_ih)?;
        let gh = g.matmul(h, w_hh)?;
        let gates = g.add(gx, gh)?;
        let gates = g.add(gates, bias)?;
        let i = g.slice_cols(gates, 0, hidden)?;
        let f = g.slice_cols(gates, hidden, 2 * hidden)?;
        let cand = g.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let o = g.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c)?;
        h = g.mul(o, squashed)?;
        states.push(h);
    }
    Ok(states)
}

/// Hidden states of every entity of one `K × M` window: `H[k][t]` is the
/// state after reading `x_k` at timesteps `0..=t`.
pub fn encode(x: ArrayView2<'_, f64>, params: &RecurrentParams) -> Result<Array3<f64>> {
    let (k, m) = x.dim();
    let mut g = Graph::new();
    let xv = g.constant(x.to_owned());
    let w_ih = g.constant(params.w_ih.clone());
    let w_hh = g.constant(params.w_hh.clone());
    let bias = g.constant(params.bias.clone());
    let states = encode_graph(&mut g, xv, w_ih, w_hh, bias)?;
    let d = params.hidden_size();
    let mut out = Array3::zeros((k, m, d));
    for (t, h) in states.into_iter().enumerate() {
        out.slice_mut(s![.., t, ..]).assign(g.value(h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradengine::sigmoid;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(hidden: usize, seed: u64) -> RecurrentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register(&mut store, hidden, &mut rng);
        RecurrentParams::from_store(&store).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_stays_at_origin() {
        let mut p = params(4, 1);
        p.bias.fill(0.0);
        let h = encode(Array2::zeros((3, 7)).view(), &p).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_share_weights() {
        let p = params(5, 2);
        let x = array![[0.3, -1.0, 2.0, 0.5], [0.3, -1.0, 2.0, 0.5]];
        let h = encode(x.view(), &p).unwrap();
        assert_eq!(h.slice(s![0, .., ..]), h.slice(s![1, .., ..]));
    }

    #[test]
    fn single_step_matches_hand_evaluated_cell() {
        let p = params(3, 3);
        let x = 0.7;
        let h = encode(array![[x]].view(), &p).unwrap();
        let d = 3;
        for j in 0..d {
            // h_prev = c_prev = 0, so only the input weights and bias enter
            let pre = |gate: usize| x * p.w_ih[[0, gate * d + j]] + p.bias[[0, gate * d + j]];
            let i = sigmoid(pre(0));
            let cand = pre(2).tanh();
            let o = sigmoid(pre(3));
            let c = i * cand;
            let expected = o * c.tanh();
            assert!((h[[0, 0, j]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_states_are_bounded_and_causal() {
        let p = params(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((2, 12), || rng.random_range(-5.0..5.0));
        let h = encode(x.view(), &p).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1.0));
        let mut perturbed = x.clone();
        perturbed[[1, 7]] += 3.0;
        let h2 = encode(perturbed.view(), &p).unwrap();
        assert_eq!(h.slice(s![.., ..7, ..]), h2.slice(s![.., ..7, ..]));
        assert_eq!(h.slice(s![0, .., ..]), h2.slice(s![0, .., ..]));
        assert_ne!(h.slice(s![1, 7.., ..]), h2.slice(s![1, 7.., ..]));
    }
}
