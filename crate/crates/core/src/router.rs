//! Token routing.
//!
//! Routing happens in two steps. Tokens are first split by their sample's
//! conditioning: tokens of null-conditioned samples go to the unconditional
//! experts, the rest continue to prototypical routing, where each token is
//! scored against one learnable prototype per standard expert by scaled
//! cosine similarity and sent to its top-K experts.
//!
//! The comparison routers (linear token choice, online k-means and a
//! sample-level superclass classifier) live here too.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mask_indices, Tape, Var};
use crate::error::{Error, Result};
use crate::param_tree;
use crate::rng::normal_tensor;
use crate::tensor::{Real, Tensor};

/// Learnable prototypes, one row per standard expert, plus the cosine
/// scale `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes<P> {
    pub p: P,
    pub alpha: f64,
}

param_tree!(Prototypes { leaf p, copy alpha });

impl<T: Real> Prototypes<Tensor<T>> {
    /// Rows drawn from a standard normal and scaled to unit length.
    pub fn init<R: Rng>(rng: &mut R, n_experts: usize, dim: usize, alpha: f64) -> Self {
        let mut p: Tensor<T> = normal_tensor(rng, &[n_experts, dim], 1.0);
        for i in 0..n_experts {
            let row = p.row_mut(i);
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v = T::cast(v.as_f64() / norm.max(1e-12));
            }
        }
        Self { p, alpha }
    }

    pub fn n_experts(&self) -> usize {
        self.p.shape()[0]
    }
}

/// Conditional/unconditional split of a flattened `[B·L]` token batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenPartition {
    pub mask_uncond: Vec<bool>,
    pub mask_cond: Vec<bool>,
    pub tokens_per_sample: usize,
}

/// Where a partition came from; recorded in routing logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSource {
    /// Training: null labels mark unconditional samples.
    Labels,
    /// Guided sampling: a batch-level mask marks which samples are conditioned.
    BatchMask,
    /// Unguided sampling: every token is conditional.
    AllConditional,
}

impl TokenPartition {
    /// Expands a per-sample "is conditioned" mask over `tokens_per_sample`.
    pub fn from_sample_mask(conditioned: &[bool], tokens_per_sample: usize) -> Self {
        let mask_cond: Vec<bool> = conditioned
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, tokens_per_sample))
            .collect();
        let mask_uncond = mask_cond.iter().map(|c| !c).collect();
        Self {
            mask_uncond,
            mask_cond,
            tokens_per_sample,
        }
    }

    pub fn all_conditional(batch: usize, tokens_per_sample: usize) -> Self {
        Self::from_sample_mask(&vec![true; batch], tokens_per_sample)
    }

    pub fn n_tokens(&self) -> usize {
        self.mask_cond.len()
    }

    pub fn n_cond(&self) -> usize {
        self.mask_cond.iter().filter(|&&c| c).count()
    }

    pub fn n_uncond(&self) -> usize {
        self.n_tokens() - self.n_cond()
    }

    pub fn cond_indices(&self) -> Vec<usize> {
        mask_indices(&self.mask_cond)
    }

    pub fn uncond_indices(&self) -> Vec<usize> {
        mask_indices(&self.mask_uncond)
    }
}

/// Hard split by conditioning: samples whose label equals `null_label`
/// contribute all their tokens to the unconditional set.
pub fn partition_by_condition(labels: &[usize], null_label: usize, tokens_per_sample: usize) -> TokenPartition {
    let conditioned: Vec<bool> = labels.iter().map(|&l| l != null_label).collect();
    TokenPartition::from_sample_mask(&conditioned, tokens_per_sample)
}

/// `Z[i, j] = α · cos(x_i, p_j)` for `x_c: [n_c, D]`.
pub fn prototype_scores<T: Real>(tape: &mut Tape<T>, x_c: Var, proto: &Prototypes<Var>) -> Result<Var> {
    let (xs, ps) = (tape.shape(x_c), tape.shape(proto.p));
    if xs.len() != 2 || ps.len() != 2 || xs[1] != ps[1] {
        return Err(Error::shape("prototype_scores", xs, ps));
    }
    let xn = tape.l2_normalize(x_c, 1)?;
    let pn = tape.l2_normalize(proto.p, 1)?;
    let pt = tape.transpose(pn)?;
    let z = tape.matmul(xn, pt)?;
    Ok(if proto.alpha == 1.0 {
        z
    } else {
        tape.scale(z, T::cast(proto.alpha))
    })
}

/// Maps pre-activation scores to affinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreActivation {
    #[default]
    Identity,
    Sigmoid,
    Softmax,
}

impl std::str::FromStr for ScoreActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "sigmoid" => Ok(Self::Sigmoid),
            "softmax" => Ok(Self::Softmax),
            _ => Err(Error::Unknown {
                kind: "activation",
                name: s.to_string(),
            }),
        }
    }
}

/// Applies `kind` to `[n, N_E]` scores; softmax runs over the expert axis.
pub fn activate<T: Real>(tape: &mut Tape<T>, z: Var, kind: ScoreActivation) -> Result<Var> {
    match kind {
        ScoreActivation::Identity => Ok(z),
        ScoreActivation::Sigmoid => Ok(tape.sigmoid(z)),
        ScoreActivation::Softmax => {
            let axis = tape.shape(z).len().saturating_sub(1);
            tape.softmax(z, axis)
        }
    }
}

/// Snapshot of one top-K gating decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingResult {
    /// `[n, K]` selected affinities.
    pub gates: Tensor<f64>,
    /// `[n, K]` row-major expert ids, best first.
    pub indices: Vec<usize>,
    pub top_k: usize,
    /// `[n, N_E]` affinities before selection.
    pub scores: Tensor<f64>,
}

impl GatingResult {
    pub fn n_tokens(&self) -> usize {
        self.scores.shape().first().copied().unwrap_or(0)
    }

    pub fn n_experts(&self) -> usize {
        self.scores.shape().get(1).copied().unwrap_or(0)
    }

    /// Experts chosen for token `i`.
    pub fn experts_of(&self, i: usize) -> &[usize] {
        &self.indices[i * self.top_k..(i + 1) * self.top_k]
    }

    /// `[n, N_E]` gating tensor that is zero off the selected entries.
    pub fn dense_gates(&self) -> Tensor<f64> {
        let (n, e) = (self.n_tokens(), self.n_experts());
        let mut out = Tensor::zeros([n, e]);
        for i in 0..n {
            for (j, &x) in self.experts_of(i).iter().enumerate() {
                out.data_mut()[i * e + x] = self.gates.data()[i * self.top_k + j];
            }
        }
        out
    }

    /// Selection mask matching [`GatingResult::dense_gates`], counting
    /// selected-but-zero gates as selected.
    pub fn selection_mask(&self) -> Vec<bool> {
        let (n, e) = (self.n_tokens(), self.n_experts());
        let mut out = vec![false; n * e];
        for i in 0..n {
            for &x in self.experts_of(i) {
                out[i * e + x] = true;
            }
        }
        out
    }

    pub fn empty(n_experts: usize, top_k: usize) -> Self {
        Self {
            gates: Tensor::zeros([0, top_k]),
            indices: Vec::new(),
            top_k,
            scores: Tensor::zeros([0, n_experts]),
        }
    }
}

/// Per row, the `k` largest entries, best first; ties go to the lower index.
pub fn topk_indices<T: Real>(scores: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    if scores.rank() != 2 {
        return Err(Error::shape("topk", scores.shape(), &[k]));
    }
    let (n, e) = (scores.shape()[0], scores.shape()[1]);
    if k == 0 || k > e {
        return Err(Error::Config(format!("top-k {k} out of range for {e} experts")));
    }
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(e);
    for i in 0..n {
        let row = scores.row(i);
        order.clear();
        order.extend(0..e);
        // Stable sort keeps lower indices first among equal scores.
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or_else(|| row[a].is_nan().cmp(&row[b].is_nan()))
        });
        out.extend_from_slice(&order[..k]);
    }
    Ok(out)
}

/// Selects the top-`k` experts of `s: [n, N_E]`. The returned gate var is
/// `[n, k]` and differentiable with respect to the selected scores only.
pub fn topk_gate<T: Real>(tape: &mut Tape<T>, s: Var, k: usize) -> Result<(Var, GatingResult)> {
    let indices = topk_indices(tape.value(s), k)?;
    let gates = tape.gather_cols(s, &indices, k)?;
    let result = GatingResult {
        gates: tape.value(gates).cast(),
        indices,
        top_k: k,
        scores: tape.value(s).cast(),
    };
    Ok((gates, result))
}

/// Token-choice scores `x_c · w_r`, `w_r: [D, N_E]`.
pub fn linear_router_scores<T: Real>(tape: &mut Tape<T>, x_c: Var, w_r: Var) -> Result<Var> {
    tape.matmul(x_c, w_r)
}

/// Online k-means router state.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansState<T> {
    /// `[N_E, D]`
    pub centroids: Tensor<T>,
    /// Tokens assigned to each centroid in the last update.
    pub counts: Vec<usize>,
}

impl<T: Real> KMeansState<T> {
    /// Centroids are `n` distinct rows of `tokens`, drawn with `rng`.
    pub fn init<R: Rng>(rng: &mut R, tokens: &Tensor<T>, n: usize) -> Result<Self> {
        let (rows, _) = tokens.rows_cols();
        if n == 0 || n > rows {
            return Err(Error::Config(format!(
                "cannot sample {n} distinct centroids from {rows} tokens"
            )));
        }
        let picks = sample(rng, rows, n).into_vec();
        Ok(Self {
            centroids: tokens.select_rows(&picks),
            counts: vec![0; n],
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.shape()[0]
    }
}

/// Nearest-centroid assignment and the `[n, N_E]` squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansAssignment<T> {
    pub indices: Vec<usize>,
    pub sq_distances: Tensor<T>,
}

impl<T: Real> KMeansAssignment<T> {
    /// Distance-based affinity (negated squared distance).
    pub fn affinities(&self) -> Tensor<T> {
        self.sq_distances.map(|d| -d)
    }
}

pub fn kmeans_assign<T: Real>(x: &Tensor<T>, state: &KMeansState<T>) -> Result<KMeansAssignment<T>> {
    let (n, d) = x.rows_cols();
    let (e, cd) = state.centroids.rows_cols();
    if n > 0 && d != cd {
        return Err(Error::shape("kmeans_assign", x.shape(), state.centroids.shape()));
    }
    let mut sq = Tensor::zeros([n, e]);
    let mut indices = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.row(i);
        let mut best = (T::infinity(), 0);
        for j in 0..e {
            let dist = xi
                .iter()
                .zip(state.centroids.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>();
            sq.data_mut()[i * e + j] = dist;
            if dist < best.0 {
                best = (dist, j);
            }
        }
        indices.push(best.1);
    }
    Ok(KMeansAssignment {
        indices,
        sq_distances: sq,
    })
}

/// Replaces each centroid that received tokens with their mean.
pub fn kmeans_update<T: Real>(x: &Tensor<T>, indices: &[usize], state: &KMeansState<T>) -> Result<KMeansState<T>> {
    let (n, d) = x.rows_cols();
    let e = state.n_clusters();
    if indices.len() != n || indices.iter().any(|&j| j >= e) {
        return Err(Error::shape("kmeans_update", x.shape(), &[indices.len()]));
    }
    let mut sums = vec![0.0f64; e * d];
    let mut counts = vec![0usize; e];
    for (i, &j) in indices.iter().enumerate() {
        counts[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(x.row(i)) {
            *s += v.as_f64();
        }
    }
    let mut centroids = state.centroids.clone();
    for j in 0..e {
        if counts[j] == 0 {
            continue;
        }
        let c = counts[j] as f64;
        for (dst, &s) in centroids.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
            *dst = T::cast(s / c);
        }
    }
    Ok(KMeansState { centroids, counts })
}

/// Total squared distance of tokens to their assigned centroids.
pub fn kmeans_objective<T: Real>(x: &Tensor<T>, indices: &[usize], centroids: &Tensor<T>) -> f64 {
    indices
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            x.row(i)
                .iter()
                .zip(centroids.row(j))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Sample-level router: average-pools `x: [B, L, D]` over tokens and scores
/// the pooled vector with `w_c: [D, N_c]`. Every token of a sample goes to
/// the sample's argmax expert.
pub fn classifier_route<T: Real>(tape: &mut Tape<T>, x: Var, w_c: Var) -> Result<(Var, Vec<usize>)> {
    let xs = tape.shape(x);
    if xs.len() != 3 {
        return Err(Error::shape("classifier_route", xs, tape.shape(w_c)));
    }
    let pooled = tape.mean_axis(x, 1)?;
    let scores = tape.matmul(pooled, w_c)?;
    let indices = topk_indices(tape.value(scores), 1)?;
    Ok((scores, indices))
}
