//! KShape clustering of whole entity series under the shape-based distance.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{TimeSeriesTable, MIN_STD};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_MAX_ITER: usize = 100;
const EIGEN_TOL: f64 = 1e-8;
const EIGEN_MAX_ITER: usize = 10_000;

/// `(x − mean) / std` with population std; `None` for (near) constant input.
pub fn znorm(x: ArrayView1<'_, f64>) -> Option<Array1<f64>> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (std >= MIN_STD).then(|| x.mapv(|v| (v - mean) / std))
}

/// Circular roll: `roll(y, s)[t] = y[(t − s) mod L]`.
pub fn roll(y: ArrayView1<'_, f64>, shift: isize) -> Array1<f64> {
    let l = y.len() as isize;
    Array1::from_shape_fn(y.len(), |t| y[(t as isize - shift).rem_euclid(l) as usize])
}

/// Shape-based distance for series of one fixed length, with cached FFT plans.
pub struct Sbd {
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Sbd {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }

    fn spectrum(&self, x: ArrayView1<'_, f64>) -> Vec<Complex<f64>> {
        let mut buf: Vec<_> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    /// Distance and shift between series that are already z-normalized.
    /// `roll(y, shift)` is the alignment of `y` onto `x`.
    pub fn normalized(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> (f64, isize) {
        let nx = x.dot(&x).sqrt();
        let ny = y.dot(&y).sqrt();
        if nx == 0.0 || ny == 0.0 {
            return (1.0, 0);
        }
        let fx = self.spectrum(x);
        let fy = self.spectrum(y);
        let mut cc: Vec<_> = fx.iter().zip(&fy).map(|(a, b)| a * b.conj()).collect();
        self.inv.process(&mut cc);
        let scale = 1.0 / (self.len as f64 * nx * ny);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (s, c) in cc.iter().enumerate() {
            if c.re * scale > best.0 {
                best = (c.re * scale, s);
            }
        }
        let l = self.len as isize;
        let mut shift = best.1 as isize;
        if shift > l / 2 {
            shift -= l;
        }
        ((1.0 - best.0).clamp(0.0, 2.0), shift)
    }

    /// Distance in `[0, 2]` and best circular shift; inputs are z-normalized
    /// here. A constant series has distance 1 to everything.
    pub fn distance(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<(f64, isize)> {
        if x.len() != self.len || y.len() != self.len {
            return Err(Error::Shape {
                op: "sbd",
                lhs: (1, x.len()),
                rhs: (1, y.len()),
            });
        }
        match (znorm(x), znorm(y)) {
            (Some(a), Some(b)) => Ok(self.normalized(a.view(), b.view())),
            _ => {
                log::warn!("sbd: constant series, distance defined as 1");
                Ok((1.0, 0))
            }
        }
    }
}

/// One-off shape-based distance.
pub fn sbd(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<(f64, isize)> {
    if x.is_empty() {
        return Err(Error::EmptyInput("sbd of empty series".into()));
    }
    Sbd::new(x.len()).distance(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// entity → cluster
    pub labels: Vec<usize>,
    pub m: usize,
    /// `m × L`
    pub centroids: Array2<f64>,
    /// sum of member-to-centroid SBD after each assignment step
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&k| self.labels[k] == cluster).collect()
    }

    pub fn to_name_map(&self, entity_names: &[String]) -> BTreeMap<String, usize> {
        entity_names.iter().cloned().zip(self.labels.iter().copied()).collect()
    }

    pub fn write_json(&self, entity_names: &[String], path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_name_map(entity_names))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Read an `entity_name → cluster` JSON map back into label order.
pub fn read_assignment_json(path: &Path, entity_names: &[String]) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, usize> = serde_json::from_str(&text)?;
    entity_names
        .iter()
        .map(|n| {
            map.get(n)
                .copied()
                .ok_or_else(|| Error::config(format!("no cluster assigned to entity `{n}`")))
        })
        .collect()
}

/// Top eigenvector of `Q S Q` with `S = Σ a aᵀ` over the aligned members and
/// `Q = I − 11ᵀ/L`, by power iteration without forming `L × L` matrices.
fn shape_extraction(aligned: &[Array1<f64>], len: usize) -> Array1<f64> {
    let center = |v: &mut Array1<f64>| {
        let mean = v.sum() / len as f64;
        v.mapv_inplace(|e| e - mean);
    };
    let apply = |v: &Array1<f64>| {
        let mut u = v.clone();
        center(&mut u);
        let mut out = Array1::zeros(len);
        for a in aligned {
            out.scaled_add(a.dot(&u), a);
        }
        center(&mut out);
        out
    };
    let mut v = aligned.iter().fold(Array1::zeros(len), |acc, a| acc + a);
    center(&mut v);
    if v.dot(&v).sqrt() < 1e-12 {
        // members cancel out; start from a fixed ramp instead
        v = Array1::from_shape_fn(len, |t| t as f64 + 1.0);
        center(&mut v);
    }
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return Array1::zeros(len);
    }
    v /= norm;
    for _ in 0..EIGEN_MAX_ITER {
        let mut next = apply(&v);
        let n = next.dot(&next).sqrt();
        if n < 1e-300 {
            break;
        }
        next /= n;
        let delta = (&next - &v).iter().fold(0.0f64, |m, e| m.max(e.abs()));
        v = next;
        if delta < EIGEN_TOL {
            break;
        }
    }
    // pick the sign closer to the members
    let dist = |c: &Array1<f64>| -> f64 {
        aligned.iter().map(|a| (a - c).mapv(|e| e * e).sum()).sum()
    };
    let neg = -&v;
    if dist(&neg) < dist(&v) {
        v = neg;
    }
    znorm(v.view()).unwrap_or_else(|| Array1::zeros(len))
}

/// First-appearance relabelling: the first entity's cluster becomes 0, and so on.
fn canonicalize(labels: &[usize], centroids: &Array2<f64>) -> (Vec<usize>, Array2<f64>) {
    let mut map = vec![usize::MAX; centroids.nrows()];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for slot in map.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next;
        next += 1;
    }
    let mut out = Array2::zeros(centroids.dim());
    for (old, &new) in map.iter().enumerate() {
        out.row_mut(new).assign(&centroids.row(old));
    }
    (labels.iter().map(|&l| map[l]).collect(), out)
}

/// KShape over the rows of `table` (one series per entity).
pub fn kshape(table: &TimeSeriesTable, m: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    let k = table.num_entities();
    let len = table.len();
    if m == 0 || m > k {
        return Err(Error::config(format!("cluster count {m} must be in 1..={k}")));
    }
    if len == 0 {
        return Err(Error::EmptyInput("kshape on empty series".into()));
    }
    let series: Vec<Array1<f64>> = table
        .values
        .rows()
        .into_iter()
        .map(|r| znorm(r).unwrap_or_else(|| Array1::zeros(len)))
        .collect();
    let sbd = Sbd::new(len);

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng::stream(seed, rng::STREAM_CLUSTER));
    let mut labels = vec![0; k];
    for (i, &e) in order.iter().enumerate() {
        labels[e] = i % m;
    }

    let mut centroids = Array2::<f64>::zeros((m, len));
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for c in 0..m {
            let prev = centroids.row(c).to_owned();
            let has_prev = prev.iter().any(|&v| v != 0.0);
            let aligned: Vec<Array1<f64>> = (0..k)
                .filter(|&e| labels[e] == c)
                .map(|e| {
                    if has_prev {
                        let (_, shift) = sbd.normalized(prev.view(), series[e].view());
                        roll(series[e].view(), shift)
                    } else {
                        series[e].clone()
                    }
                })
                .collect();
            if aligned.is_empty() {
                continue;
            }
            let candidate = shape_extraction(&aligned, len);
            if has_prev {
                // keep the old centroid if extraction would raise the members' SBD
                let cost = |centroid: ArrayView1<'_, f64>| -> f64 {
                    (0..k)
                        .filter(|&e| labels[e] == c)
                        .map(|e| sbd.normalized(centroid, series[e].view()).0)
                        .sum()
                };
                if cost(candidate.view()) > cost(prev.view()) {
                    continue;
                }
            }
            centroids.row_mut(c).assign(&candidate);
        }

        let mut next = vec![0; k];
        let mut dist = vec![0.0; k];
        for e in 0..k {
            let mut best = (f64::INFINITY, 0);
            for c in 0..m {
                let (d, _) = sbd.normalized(centroids.row(c), series[e].view());
                if d < best.0 {
                    best = (d, c);
                }
            }
            (dist[e], next[e]) = best;
        }
        // reseed empty clusters with the entity farthest from its centroid
        for c in 0..m {
            if next.contains(&c) {
                continue;
            }
            let mut counts = vec![0usize; m];
            next.iter().for_each(|&l| counts[l] += 1);
            let far = (0..k)
                .filter(|&e| counts[next[e]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]));
            if let Some(e) = far {
                log::debug!("kshape: reseeding empty cluster {c} with entity {e}");
                next[e] = c;
                dist[e] = 0.0;
                centroids.row_mut(c).assign(&series[e]);
            }
        }
        history.push(dist.iter().sum());
        let stable = next == labels;
        labels = next;
        if stable {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("kshape: no convergence after {max_iter} iterations");
    }
    let (labels, centroids) = canonicalize(&labels, &centroids);
    Ok(ClusterAssignment {
        labels,
        m,
        centroids,
        objective_history: history,
        iterations,
        converged,
    })
}
