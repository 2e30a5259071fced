//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use promoe::experts::ExpertFfn;
use promoe::router::ScoreActivation;
use promoe::Tensor;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `gelu(x·w1 + b1)·w2 + b2` for one token, by explicit loops.
pub fn ffn(e: &ExpertFfn<Tensor<f64>>, x: &[f64]) -> Vec<f64> {
    let (d, h) = (e.w1.shape()[0], e.w1.shape()[1]);
    let hidden: Vec<f64> = (0..h)
        .map(|j| gelu((0..d).map(|i| x[i] * e.w1.at2(i, j)).sum::<f64>() + e.b1.data()[j]))
        .collect();
    (0..d)
        .map(|o| (0..h).map(|j| hidden[j] * e.w2.at2(j, o)).sum::<f64>() + e.b2.data()[o])
        .collect()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine with the library's `x / (‖x‖ + 1e-8)` guard on both sides.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / ((norm(a) + 1e-8) * (norm(b) + 1e-8))
}

pub fn activate(z: &[f64], kind: ScoreActivation) -> Vec<f64> {
    match kind {
        ScoreActivation::Identity => z.to_vec(),
        ScoreActivation::Sigmoid => z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        ScoreActivation::Softmax => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }
}

/// Top-`k` by full sort, descending, ties to the lower index.
pub fn topk(s: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn add_into(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += w * b;
    }
}

/// Mean of `tokens` rows selected by `rows`.
pub fn mean_rows(tokens: &[Vec<f64>], rows: &[usize]) -> Vec<f64> {
    let d = tokens[0].len();
    let mut m = vec![0.0; d];
    for &r in rows {
        add_into(&mut m, &tokens[r], 1.0 / rows.len() as f64);
    }
    m
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, _) = t.rows_cols();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// Routing contrastive loss by double loop over active experts.
pub fn rcl(tokens: &[Vec<f64>], indices: &[usize], k: usize, protos: &[Vec<f64>], tau: f64) -> f64 {
    let mut active: Vec<usize> = indices.to_vec();
    active.sort_unstable();
    active.dedup();
    if active.len() <= 1 {
        return 0.0;
    }
    let centroid = |e: usize| {
        let members: Vec<usize> = (0..tokens.len()).filter(|&t| indices[t * k..(t + 1) * k].contains(&e)).collect();
        mean_rows(tokens, &members)
    };
    let cents: Vec<Vec<f64>> = active.iter().map(|&e| centroid(e)).collect();
    let mut total = 0.0;
    for (a, &i) in active.iter().enumerate() {
        let logits: Vec<f64> = cents.iter().map(|m| cosine(&protos[i], m) / tau).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        total += lse - logits[a];
    }
    total / active.len() as f64
}
