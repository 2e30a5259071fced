//! Specialization diagnostics: expert subspace overlap, token cluster
//! separation, expert usage, and routing exports.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experts::ExpertFfn;
use crate::moe::RoutingLog;
use crate::tensor::{Real, Tensor};

/// Default number of singular directions compared per expert.
pub const DEFAULT_SUBSPACE_K: usize = 8;
/// Floor on the intra-class distance in [`cluster_ratio`].
pub const CLUSTER_EPS: f64 = 1e-12;

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U·diag(s)·Vᵀ` with singular values in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `[m, r]`, `r = min(m, n)`
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    /// `[n, r]`
    pub v: Tensor<f64>,
}

/// One-sided Jacobi on the columns of `cols` (each of length `p`); returns
/// the orthogonalized columns and the accumulated rotation (as columns).
fn hestenes(mut cols: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let q = cols.len();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|i| (0..q).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let (a, b, g) = (dot(&cols[i], &cols[i]), dot(&cols[j], &cols[j]), dot(&cols[i], &cols[j]));
                if g == 0.0 || g.abs() <= JACOBI_TOL * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut cols, &mut v] {
                    let (lo, hi) = m.split_at_mut(j);
                    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                        let (xi, yj) = (*x, *y);
                        *x = c * xi - s * yj;
                        *y = s * xi + c * yj;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, v)
}

fn columns(a: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (m, n) = a.rows_cols();
    (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect()
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Tensor<f64> {
    let n = cols.len();
    let mut data = vec![0.0; rows * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * n + j] = x;
        }
    }
    Tensor::new([rows, n], data).expect("column shape")
}

/// Thin SVD by one-sided Jacobi rotations.
pub fn jacobi_svd(a: &Tensor<f64>) -> Result<Svd> {
    if a.rank() != 2 {
        return Err(Error::shape("jacobi_svd", a.shape(), &[]));
    }
    let (m, n) = a.rows_cols();
    let wide = n > m;
    // Orthogonalize the shorter side: columns of A, or columns of Aᵀ.
    let input = if wide { columns(&a.transpose2()) } else { columns(a) };
    let p = if wide { n } else { m };
    let (b, rot) = hestenes(input);
    let sig: Vec<f64> = b.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..sig.len()).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]).then(i.cmp(&j)));
    let s: Vec<f64> = order.iter().map(|&i| sig[i]).collect();
    let normalized: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let sc = if sig[i] > 0.0 { 1.0 / sig[i] } else { 0.0 };
            b[i].iter().map(|x| x * sc).collect()
        })
        .collect();
    let rotation: Vec<Vec<f64>> = order.iter().map(|&i| rot[i].clone()).collect();
    let r = rotation.len();
    let (u, v) = if wide {
        (from_columns(&rotation, r), from_columns(&normalized, p))
    } else {
        (from_columns(&normalized, p), from_columns(&rotation, r))
    };
    Ok(Svd { u, s, v })
}

/// Top-`k` left singular vectors as columns of a `[m, k]` tensor.
pub fn top_left_singular<T: Real>(w: &Tensor<T>, k: usize) -> Result<Tensor<f64>> {
    let (m, n) = w.rows_cols();
    if w.rank() != 2 || k == 0 || k > m.min(n) {
        return Err(Error::Config(format!(
            "k = {k} must lie in 1..={} for a {m}×{n} matrix",
            m.min(n)
        )));
    }
    let svd = jacobi_svd(&w.cast())?;
    let cols: Vec<usize> = (0..k).collect();
    let u = svd.u;
    let data = (0..m).flat_map(|i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| u.at2(i, j)).collect();
    Tensor::new([m, k], data)
}

/// `‖U_iᵀ U_j‖_F² / k` over the top-`k` left singular subspaces.
pub fn subspace_similarity<T: Real>(w_i: &Tensor<T>, w_j: &Tensor<T>, k: usize) -> Result<f64> {
    if w_i.shape() != w_j.shape() {
        return Err(Error::shape("subspace_similarity", w_i.shape(), w_j.shape()));
    }
    let ui = top_left_singular(w_i, k)?;
    let uj = top_left_singular(w_j, k)?;
    let p = ui.transpose2().matmul(&uj)?;
    Ok(p.data().iter().map(|x| x * x).sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Mean similarity over unordered expert pairs.
    pub mean: f64,
    pub k: usize,
    /// Symmetric pair matrix with ones on the diagonal.
    pub pairs: Vec<Vec<f64>>,
}

/// Mean pairwise subspace similarity of the experts' `w1`.
pub fn expert_diversity<T: Real>(experts: &[ExpertFfn<Tensor<T>>], k: usize) -> Result<DiversityReport> {
    let n = experts.len();
    if n < 2 {
        return Err(Error::Contract(format!("diversity needs at least 2 experts, got {n}")));
    }
    let bases: Vec<Tensor<f64>> = experts
        .iter()
        .map(|e| top_left_singular(&e.w1, k))
        .collect::<Result<_>>()?;
    let mut pairs = vec![vec![1.0; n]; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let p = bases[i].transpose2().matmul(&bases[j])?;
            let s = p.data().iter().map(|x| x * x).sum::<f64>() / k as f64;
            pairs[i][j] = s;
            pairs[j][i] = s;
            total += s;
        }
    }
    Ok(DiversityReport {
        mean: total / (n * (n - 1) / 2) as f64,
        k,
        pairs,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean inter-centroid distance over mean token-to-own-centroid distance.
pub fn cluster_ratio<T: Real>(tokens: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, d) = tokens.rows_cols();
    if tokens.rank() != 2 || labels.len() != n {
        return Err(Error::shape("cluster_ratio", tokens.shape(), &[labels.len()]));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Contract("cluster_ratio needs at least two classes".into()));
    }
    let x = tokens.to_f64_vec();
    let slot = |l: usize| classes.binary_search(&l).expect("label collected above");
    let mut cent = vec![vec![0.0; d]; classes.len()];
    let mut count = vec![0usize; classes.len()];
    for (i, &l) in labels.iter().enumerate() {
        let c = slot(l);
        count[c] += 1;
        for (acc, &v) in cent[c].iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *acc += v;
        }
    }
    for (c, m) in cent.iter_mut().zip(&count) {
        c.iter_mut().for_each(|v| *v /= *m as f64);
    }
    let intra = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| dist(&x[i * d..(i + 1) * d], &cent[slot(l)]))
        .sum::<f64>()
        / n as f64;
    let k = classes.len();
    let mut inter = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            inter += dist(&cent[a], &cent[b]);
        }
    }
    inter /= (k * (k - 1) / 2) as f64;
    Ok(inter / intra.max(CLUSTER_EPS))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UsageStats {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    /// Entropy of `fractions` divided by `ln N_E`, in `[0, 1]`.
    pub entropy: f64,
}

pub fn usage_from_indices(indices: &[usize], n_experts: usize) -> UsageStats {
    let mut counts = vec![0usize; n_experts];
    for &e in indices {
        if e < n_experts {
            counts[e] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let fractions: Vec<f64> = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    let h: f64 = fractions.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let entropy = if n_experts > 1 { h / (n_experts as f64).ln() } else { 0.0 };
    UsageStats {
        counts,
        fractions,
        entropy,
    }
}

pub fn usage_stats(log: &RoutingLog) -> UsageStats {
    usage_from_indices(&log.gating.indices, log.gating.n_experts())
}

pub const ASSIGNMENT_HEADER: &str = "step,layer,token_id,expert_id,gate";

/// Appends one CSV row per (routed token, selected expert).
pub fn write_assignments<W: Write>(out: &mut W, step: usize, layer: usize, log: &RoutingLog) -> std::io::Result<()> {
    let k = log.gating.top_k;
    for (i, &e) in log.gating.indices.iter().enumerate() {
        let row = i / k;
        let token = log.routed_tokens.get(row).copied().unwrap_or(row);
        let gate = log.gating.gates.data().get(i).copied().unwrap_or(f64::NAN);
        writeln!(out, "{step},{layer},{token},{e},{gate}")?;
    }
    Ok(())
}

/// Writes `assignments.csv` for `(step, layer, log)` records.
pub fn export_assignments(path: &Path, records: &[(usize, usize, &RoutingLog)]) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{ASSIGNMENT_HEADER}")?;
        for &(step, layer, log) in records {
            write_assignments(&mut f, step, layer, log)?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream, Purpose};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        normal_tensor(&mut stream(seed, Purpose::Test, 0), shape, 1.0)
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        for shape in [[8, 6], [6, 8], [5, 5]] {
            let a = rand(&shape, 1);
            let svd = jacobi_svd(&a).unwrap();
            let r = svd.s.len();
            let mut us = svd.u.clone();
            for i in 0..shape[0] {
                for j in 0..r {
                    us.data_mut()[i * r + j] *= svd.s[j];
                }
            }
            let back = us.matmul(&svd.v.transpose2()).unwrap();
            assert!(back.max_abs_diff(&a) < 1e-10, "{shape:?}");
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            let utu = svd.u.transpose2().matmul(&svd.u).unwrap();
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((utu.at2(i, j) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn similarity_anchors() {
        let a = rand(&[8, 6], 2);
        assert!((subspace_similarity(&a, &a, 3).unwrap() - 1.0).abs() < 1e-10);
        // Ranges in disjoint coordinate blocks.
        let mut p = Tensor::<f64>::zeros([6, 2]);
        let mut q = Tensor::<f64>::zeros([6, 2]);
        p.data_mut()[0] = 1.0;
        p.data_mut()[3] = 2.0;
        q.data_mut()[8] = 1.0;
        q.data_mut()[11] = 3.0;
        assert!(subspace_similarity(&p, &q, 2).unwrap().abs() < 1e-12);
        assert!(subspace_similarity(&a, &a, 7).is_err());
        assert!(subspace_similarity(&a, &a, 0).is_err());
    }

    #[test]
    fn usage_anchors() {
        let one = usage_from_indices(&[2, 2, 2], 4);
        assert_eq!(one.entropy, 0.0);
        assert_eq!(one.counts, vec![0, 0, 3, 0]);
        let uni = usage_from_indices(&[0, 1, 2, 3], 4);
        assert!((uni.entropy - 1.0).abs() < 1e-15);
        assert!((uni.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cluster_ratio_degenerate_and_errors() {
        let t = Tensor::from_f64([4, 1], &[0.0, 0.0, 2.0, 2.0]).unwrap();
        assert!(cluster_ratio::<f64>(&t, &[0, 0, 1, 1]).unwrap() > 1e10);
        assert!(cluster_ratio::<f64>(&t, &[0, 0, 0, 0]).is_err());
    }
}
