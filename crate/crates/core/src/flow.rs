//! Conditional masked autoregressive flow with frozen Gaussian targets.
//!
//! Each block maps `x → z` with `z_i = (x_i − μ_i)·exp(−α_i)`, where
//! `(μ_i, α_i)` come from a one-hidden-layer masked conditioner seeing only the
//! coordinates before `i` plus the condition row `c_i`:
//!
//! ```text
//! h_i = ReLU(Σ_{j<i} x_j U_j + c_i V + b)
//! (μ_i, α_i) = h_i W_out + (b_μ,i, b_α,i)
//! ```
//!
//! Odd-numbered blocks use the reversed coordinate order.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradengine::{Graph, ParamStore, Var};
use crate::rng;

/// Log-scales are clamped to `[−ALPHA_CLAMP, ALPHA_CLAMP]`.
pub const ALPHA_CLAMP: f64 = 7.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn name(block: usize, part: &str) -> String {
    format!("flow.{block}.{part}")
}

/// Register the weights of `blocks` conditioners. Output layers start at zero
/// so a fresh stack is the identity map.
pub fn register(
    store: &mut ParamStore,
    m: usize,
    cond: usize,
    hidden: usize,
    blocks: usize,
    rng: &mut impl Rng,
) {
    let bound_in = 1.0 / ((m + cond) as f64).sqrt();
    let bound_out = 1.0 / (hidden as f64).sqrt();
    for b in 0..blocks {
        store.insert_uniform(name(b, "w_x"), (m, hidden), bound_in, rng);
        store.insert_uniform(name(b, "w_c"), (cond, hidden), bound_in, rng);
        store.insert_uniform(name(b, "b_h"), (1, hidden), bound_in, rng);
        // small but non-zero so gradients reach the hidden layer from step one
        store.insert_uniform(name(b, "w_out"), (hidden, 2), 1e-2 * bound_out, rng);
        store.insert(name(b, "b_mu"), Array2::zeros((1, m)));
        store.insert(name(b, "b_alpha"), Array2::zeros((1, m)));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MafBlock {
    /// `M × d_f` masked input weights
    pub w_x: Array2<f64>,
    /// `d_c × d_f` condition weights
    pub w_c: Array2<f64>,
    pub b_h: Array2<f64>,
    /// `d_f × 2`, columns are (μ, α)
    pub w_out: Array2<f64>,
    pub b_mu: Array2<f64>,
    pub b_alpha: Array2<f64>,
    pub reverse: bool,
}

impl MafBlock {
    /// A block with zero output layer: `μ ≡ 0`, `α ≡ 0`.
    pub fn identity(m: usize, cond: usize, hidden: usize, reverse: bool) -> Self {
        Self {
            w_x: Array2::zeros((m, hidden)),
            w_c: Array2::zeros((cond, hidden)),
            b_h: Array2::zeros((1, hidden)),
            w_out: Array2::zeros((hidden, 2)),
            b_mu: Array2::zeros((1, m)),
            b_alpha: Array2::zeros((1, m)),
            reverse,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_x.nrows()
    }

    /// Coordinates in autoregressive order.
    pub fn order(&self) -> Vec<usize> {
        let m = self.dim();
        if self.reverse {
            (0..m).rev().collect()
        } else {
            (0..m).collect()
        }
    }

    /// `(μ_i, α_i)` given the input-feature accumulator `Σ_{j<i} x_j U_j`.
    fn head(&self, acc: &[f64], cond_row: ndarray::ArrayView1<'_, f64>, i: usize) -> (f64, f64) {
        let hidden = self.w_c.ncols();
        let (mut mu, mut alpha) = (self.b_mu[[0, i]], self.b_alpha[[0, i]]);
        for d in 0..hidden {
            let mut pre = acc[d] + self.b_h[[0, d]];
            for (c, &cv) in cond_row.iter().enumerate() {
                pre += cv * self.w_c[[c, d]];
            }
            if pre > 0.0 {
                mu += pre * self.w_out[[d, 0]];
                alpha += pre * self.w_out[[d, 1]];
            }
        }
        (mu, alpha.clamp(-ALPHA_CLAMP, ALPHA_CLAMP))
    }

    /// Shift and clamped log-scale for every coordinate, computed from `x`.
    pub fn conditioner(&self, x: &[f64], cond: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
        let m = self.dim();
        let mut acc = vec![0.0; self.w_x.ncols()];
        let mut mu = vec![0.0; m];
        let mut alpha = vec![0.0; m];
        for i in self.order() {
            (mu[i], alpha[i]) = self.head(&acc, cond.row(i), i);
            for (a, &w) in acc.iter_mut().zip(self.w_x.row(i)) {
                *a += x[i] * w;
            }
        }
        (mu, alpha)
    }

    pub fn forward(&self, x: &[f64], cond: ArrayView2<'_, f64>) -> (Vec<f64>, f64) {
        let (mu, alpha) = self.conditioner(x, cond);
        let z = x
            .iter()
            .zip(mu.iter().zip(&alpha))
            .map(|(&xi, (&m, &a))| (xi - m) * (-a).exp())
            .collect();
        (z, -alpha.iter().sum::<f64>())
    }

    /// Sequential inversion in autoregressive order.
    pub fn inverse(&self, z: &[f64], cond: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let mut acc = vec![0.0; self.w_x.ncols()];
        for i in self.order() {
            let (mu, alpha) = self.head(&acc, cond.row(i), i);
            x[i] = z[i] * alpha.exp() + mu;
            for (a, &w) in acc.iter_mut().zip(self.w_x.row(i)) {
                *a += x[i] * w;
            }
        }
        x
    }
}

/// Blocks shared by every entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub blocks: Vec<MafBlock>,
}

impl FlowStack {
    pub fn identity(m: usize, cond: usize, hidden: usize, blocks: usize) -> Self {
        Self {
            blocks: (0..blocks)
                .map(|b| MafBlock::identity(m, cond, hidden, b % 2 == 1))
                .collect(),
        }
    }

    pub fn from_store(store: &ParamStore, blocks: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::config("flow needs at least one block"));
        }
        (0..blocks)
            .map(|b| {
                Ok(MafBlock {
                    w_x: store.value(&name(b, "w_x"))?.clone(),
                    w_c: store.value(&name(b, "w_c"))?.clone(),
                    b_h: store.value(&name(b, "b_h"))?.clone(),
                    w_out: store.value(&name(b, "w_out"))?.clone(),
                    b_mu: store.value(&name(b, "b_mu"))?.clone(),
                    b_alpha: store.value(&name(b, "b_alpha"))?.clone(),
                    reverse: b % 2 == 1,
                })
            })
            .collect::<Result<_>>()
            .map(|blocks| Self { blocks })
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    fn check(&self, len: usize, cond: ArrayView2<'_, f64>) -> Result<()> {
        let m = self.dim();
        let d_c = self.blocks[0].w_c.nrows();
        if len != m || cond.dim() != (m, d_c) {
            return Err(Error::Shape {
                op: "flow",
                lhs: (len, m),
                rhs: cond.dim(),
            });
        }
        Ok(())
    }
}

fn ensure_finite(values: &[f64], block: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("flow block {block}")))
    }
}

/// Data to latent: `(z, log|det ∂z/∂x|)`.
pub fn forward_transform(
    x: &[f64],
    cond: ArrayView2<'_, f64>,
    stack: &FlowStack,
) -> Result<(Vec<f64>, f64)> {
    stack.check(x.len(), cond)?;
    ensure_finite(x, 0)?;
    let mut z = x.to_vec();
    let mut logdet = 0.0;
    for (b, block) in stack.blocks.iter().enumerate() {
        let (next, ld) = block.forward(&z, cond);
        ensure_finite(&next, b)?;
        z = next;
        logdet += ld;
    }
    Ok((z, logdet))
}

/// Latent to data, blocks undone in reverse.
pub fn inverse_transform(z: &[f64], cond: ArrayView2<'_, f64>, stack: &FlowStack) -> Result<Vec<f64>> {
    stack.check(z.len(), cond)?;
    let mut x = z.to_vec();
    for (b, block) in stack.blocks.iter().enumerate().rev() {
        x = block.inverse(&x, cond);
        ensure_finite(&x, b)?;
    }
    Ok(x)
}

/// `log P = −½‖z − μ_k‖² − (M/2)·log 2π + logdet`.
pub fn log_prob(
    x: &[f64],
    cond: ArrayView2<'_, f64>,
    stack: &FlowStack,
    target_mean: &[f64],
) -> Result<f64> {
    let (z, logdet) = forward_transform(x, cond, stack)?;
    if target_mean.len() != z.len() {
        return Err(Error::Shape {
            op: "log_prob",
            lhs: (1, z.len()),
            rhs: (1, target_mean.len()),
        });
    }
    let sq: f64 = z.iter().zip(target_mean).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(-0.5 * sq - 0.5 * z.len() as f64 * LN_2PI + logdet)
}

/// Batched forward pass on the tape. `x` is `R × M`, `cond` is `R·M × d_c`
/// with row `r·M + i` the condition of coordinate `i` of row `r`.
/// Returns `z` (`R × M`) and the log-determinant per row (`R × 1`).
pub fn flow_graph(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    cond: Var,
    blocks: usize,
) -> Result<(Var, Var)> {
    let (rows, m) = g.shape(x);
    let mut z = x;
    let mut logdet: Option<Var> = None;
    for b in 0..blocks {
        let w_x = g.param(store, &name(b, "w_x"))?;
        let w_c = g.param(store, &name(b, "w_c"))?;
        let b_h = g.param(store, &name(b, "b_h"))?;
        let w_out = g.param(store, &name(b, "w_out"))?;
        let b_mu = g.param(store, &name(b, "b_mu"))?;
        let b_alpha = g.param(store, &name(b, "b_alpha"))?;

        let from_x = g.masked_prefix(z, w_x, b % 2 == 1)?;
        let from_c = g.matmul(cond, w_c)?;
        let pre = g.add(from_x, from_c)?;
        let pre = g.add(pre, b_h)?;
        let h = g.relu(pre)?;
        let out = g.matmul(h, w_out)?;
        let mu = g.slice_cols(out, 0, 1)?;
        let mu = g.reshape(mu, rows, m)?;
        let mu = g.add(mu, b_mu)?;
        let alpha = g.slice_cols(out, 1, 2)?;
        let alpha = g.reshape(alpha, rows, m)?;
        let alpha = g.add(alpha, b_alpha)?;
        let alpha = g.clamp(alpha, -ALPHA_CLAMP, ALPHA_CLAMP)?;

        let neg_alpha = g.scale(alpha, -1.0)?;
        let inv_scale = g.exp(neg_alpha)?;
        let centered = g.sub(z, mu)?;
        z = g.mul(centered, inv_scale)?;
        let ld = g.row_sum(neg_alpha)?;
        logdet = Some(match logdet {
            Some(acc) => g.add(acc, ld)?,
            None => ld,
        });
        if !g.value(z).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("flow block {b}")));
        }
    }
    let logdet = logdet.ok_or_else(|| Error::config("flow needs at least one block"))?;
    Ok((z, logdet))
}

/// Gaussian log-density of each row of `z` around its target row `means`
/// (`R × M` each) plus `logdet`; returns `R × 1`.
pub fn log_prob_graph(g: &mut Graph, z: Var, logdet: Var, means: Array2<f64>) -> Result<Var> {
    let (rows, m) = g.shape(z);
    let target = g.constant(means);
    let diff = g.sub(z, target)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.row_sum(sq)?;
    let sq = g.scale(sq, -0.5)?;
    let base = g.add(sq, logdet)?;
    let norm = g.constant(Array2::from_elem((rows, 1), -0.5 * m as f64 * LN_2PI));
    g.add(base, norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    #[default]
    Entity,
    Cluster,
}

/// Frozen target means, one constant `M`-vector per entity or cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBank {
    pub mode: TargetMode,
    pub dim: usize,
    /// the constant value of each mean vector
    pub means: Vec<f64>,
    /// entity → index into `means`
    pub assignment: Vec<usize>,
}

impl TargetBank {
    /// All entities share the zero mean (entity-agnostic ablation).
    pub fn shared_zero(k: usize, m: usize) -> Self {
        Self {
            mode: TargetMode::Entity,
            dim: m,
            means: vec![0.0],
            assignment: vec![0; k],
        }
    }

    pub fn num_entities(&self) -> usize {
        self.assignment.len()
    }

    pub fn mean_value(&self, entity: usize) -> f64 {
        self.means[self.assignment[entity]]
    }

    pub fn mean_vector(&self, entity: usize) -> Vec<f64> {
        vec![self.mean_value(entity); self.dim]
    }
}

/// Draw one standard-normal scalar per entity (per cluster) from the
/// targets stream of `seed`. Clusters are drawn in label order, so singleton
/// clusters labelled by entity index reproduce the per-entity bank.
pub fn init_targets(
    mode: TargetMode,
    assignments: Option<&[usize]>,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<TargetBank> {
    let assignment = match mode {
        TargetMode::Entity => (0..k).collect::<Vec<_>>(),
        TargetMode::Cluster => {
            let a = assignments
                .ok_or_else(|| Error::config("cluster targets need an entity→cluster assignment"))?;
            if a.len() != k {
                return Err(Error::config(format!(
                    "cluster assignment covers {} of {k} entities",
                    a.len()
                )));
            }
            a.to_vec()
        }
    };
    let groups = assignment.iter().max().map_or(0, |&g| g + 1);
    let mut rng = rng::stream(seed, rng::STREAM_TARGETS);
    let means = (0..groups).map(|_| rng.sample(StandardNormal)).collect();
    Ok(TargetBank {
        mode,
        dim: m,
        means,
        assignment,
    })
}

#[cfg(test)]
mod tests;
