//! Training objectives: the diffusion regression loss, the routing
//! contrastive loss over prototypes, the token-choice load-balancing loss
//! and the superclass routing classification loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::router::Prototypes;
use crate::tensor::{Real, Tensor};

/// What the denoiser regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Noise prediction.
    Ddpm,
    /// Velocity `ε − x0` along the straight data–noise path.
    #[default]
    Rf,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "rf" | "flow" => Ok(Self::Rf),
            _ => Err(Error::Unknown {
                kind: "objective",
                name: s.to_string(),
            }),
        }
    }
}

/// Routing contrastive loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RclConfig {
    pub tau: f64,
    pub lambda_rcl: f64,
    /// Treat centroids as constants so the loss only moves prototypes.
    pub detach_centroids: bool,
}

impl Default for RclConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_rcl: 1.0,
            detach_centroids: true,
        }
    }
}

impl RclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("RCL temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn make_target<T: Real>(kind: Objective, x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("make_target", x0.shape(), eps.shape()));
    }
    Ok(match kind {
        Objective::Ddpm => eps.clone(),
        Objective::Rf => {
            let data = eps.data().iter().zip(x0.data()).map(|(&e, &x)| e - x).collect();
            Tensor::new(eps.shape().to_vec(), data)?
        }
    })
}

/// Mean squared error over all elements.
pub fn diffusion_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("diffusion_loss", tape.shape(pred), tape.shape(target)));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Experts that received at least one token, ascending, with their token rows.
pub fn active_experts(indices: &[usize], top_k: usize, n_experts: usize) -> Vec<(usize, Vec<usize>)> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (p, &e) in indices.iter().enumerate() {
        let token = p / top_k.max(1);
        if members[e].last() != Some(&token) {
            members[e].push(token);
        }
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .collect()
}

/// Contrastive loss between active prototypes and the centroids of the
/// tokens routed to them.
///
/// For the `N_a` experts that received tokens, with `m_i` the mean of the
/// tokens whose top-K set contains `i`:
/// `−(1/N_a) Σ_i log softmax_j(cos(p_i, m_j) / τ)[i]`, `j` over active experts.
pub fn rcl_loss<T: Real>(
    tape: &mut Tape<T>,
    x_c: Var,
    indices: &[usize],
    top_k: usize,
    proto: &Prototypes<Var>,
    cfg: &RclConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (n, d) = tape.value(x_c).rows_cols();
    let n_experts = tape.shape(proto.p)[0];
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    if indices.len() != n * top_k || indices.iter().any(|&e| e >= n_experts) {
        return Err(Error::shape("rcl_loss", tape.shape(x_c), &[indices.len(), top_k]));
    }
    if tape.shape(proto.p)[1] != d {
        return Err(Error::shape("rcl_loss", tape.shape(x_c), tape.shape(proto.p)));
    }
    let active = active_experts(indices, top_k, n_experts);
    let n_active = active.len();

    // Row i of the averaging matrix holds 1/|X_i| on the tokens of expert i.
    let mut avg = Tensor::zeros([n_active, n]);
    for (row, (_, members)) in active.iter().enumerate() {
        let w = T::one() / T::cast(members.len() as f64);
        for &tok in members {
            avg.data_mut()[row * n + tok] = w;
        }
    }
    let avg = tape.constant(avg);
    let tokens = if cfg.detach_centroids { tape.detach(x_c) } else { x_c };
    let centroids = tape.matmul(avg, tokens)?;

    let ids: Vec<usize> = active.iter().map(|(e, _)| *e).collect();
    let p_active = tape.select_rows(proto.p, &ids)?;
    let pn = tape.l2_normalize(p_active, 1)?;
    let mn = tape.l2_normalize(centroids, 1)?;
    let mt = tape.transpose(mn)?;
    let sim = tape.matmul(pn, mt)?;
    let logits = tape.scale(sim, T::cast(1.0 / cfg.tau));
    let logp = tape.log_softmax(logits, 1)?;
    let diag: Vec<usize> = (0..n_active).collect();
    let picked = tape.gather_cols(logp, &diag, 1)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

/// Importance × load balancing loss, `N_E · Σ_e f_e · P_e`, with `f_e` the
/// fraction of tokens whose top-K contains `e` and `P_e` the mean softmax
/// probability of `e`.
pub fn load_balance_loss<T: Real>(tape: &mut Tape<T>, logits: Var, indices: &[usize], top_k: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || indices.len() != shape[0] * top_k {
        return Err(Error::shape("load_balance_loss", &shape, &[indices.len(), top_k]));
    }
    let (n, e) = (shape[0], shape[1]);
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut frac = vec![T::zero(); e];
    let inc = T::one() / T::cast(n as f64);
    for &j in indices {
        frac[j] = frac[j] + inc;
    }
    let frac = tape.constant(Tensor::new([e], frac)?);
    let probs = tape.softmax(logits, 1)?;
    let importance = tape.mean_axis(probs, 0)?;
    let prod = tape.mul(importance, frac)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, T::cast(e as f64)))
}

/// Mean cross-entropy of `softmax(scores)` against superclass labels.
pub fn routing_cls_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("routing_cls_loss", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Contract(format!(
            "superclass label {bad} out of range for {} routing classes",
            shape[1]
        )));
    }
    let logp = tape.log_softmax(scores, 1)?;
    let picked = tape.gather_cols(logp, labels, 1)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -T::one()))
}

/// `diff + λ · rcl`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, diff: Var, rcl: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(diff);
    }
    let weighted = tape.scale(rcl, T::cast(lambda));
    tape.add(diff, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream, Purpose};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn target_examples() {
        let eps = t(&[3], &[0.5, -1., 2.]);
        let zero = Tensor::zeros([3]);
        assert_eq!(make_target(Objective::Rf, &zero, &eps).unwrap(), eps);
        let other = t(&[3], &[9., 9., 9.]);
        assert_eq!(
            make_target(Objective::Ddpm, &zero, &eps).unwrap(),
            make_target(Objective::Ddpm, &other, &eps).unwrap()
        );
        assert!(make_target(Objective::Rf, &eps, &eps)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(make_target(Objective::Rf, &t(&[2], &[0., 0.]), &eps).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let l = diffusion_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let b = tape.constant(t(&[2, 2], &[0., 1., 2., 3.]));
        let l = diffusion_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let c = tape.constant(t(&[4], &[0., 1., 2., 3.]));
        assert!(diffusion_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn mse_matches_direct_sum() {
        let mut rng = stream(5, Purpose::Test, 0);
        let p: Tensor<f64> = normal_tensor(&mut rng, &[4, 5], 1.0);
        let q: Tensor<f64> = normal_tensor(&mut rng, &[4, 5], 1.0);
        let want: f64 = p.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 20.0;
        let mut tape = Tape::new();
        let (pv, qv) = (tape.constant(p), tape.constant(q));
        let l = diffusion_loss(&mut tape, pv, qv).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-14);
    }

    fn rcl_value(x: Tensor<f64>, idx: &[usize], k: usize, p: Tensor<f64>, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let proto = Prototypes {
            p: tape.constant(p),
            alpha: 1.0,
        };
        let cfg = RclConfig {
            tau,
            ..Default::default()
        };
        let l = rcl_loss(&mut tape, xv, idx, k, &proto, &cfg).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn rcl_single_active_expert_is_zero() {
        let mut rng = stream(6, Purpose::Test, 0);
        let x: Tensor<f64> = normal_tensor(&mut rng, &[5, 3], 1.0);
        let p: Tensor<f64> = normal_tensor(&mut rng, &[4, 3], 1.0);
        assert_eq!(rcl_value(x, &[2; 5], 1, p, 0.07), 0.0);
    }

    #[test]
    fn rcl_orthogonal_closed_form() {
        // p_i sits exactly on m_i and m_1 ⟂ m_2: loss = log(1 + e^{-1/τ}) at τ = 1.
        let x = t(&[4, 2], &[1., 0., 3., 0., 0., 2., 0., 1.]);
        let p = t(&[2, 2], &[1., 0., 0., 1.]);
        let v = rcl_value(x, &[0, 0, 1, 1], 1, p, 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-6, "{v} vs {want}");
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn rcl_empty_batch_is_exact_zero_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([0, 3]));
        let proto = Prototypes {
            p: tape.leaf(Tensor::ones([2, 3])),
            alpha: 1.0,
        };
        let l = rcl_loss(&mut tape, x, &[], 1, &proto, &RclConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(!tape.requires_grad(l));
    }

    #[test]
    fn rcl_rejects_bad_temperature() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([1, 3]));
        let proto = Prototypes {
            p: tape.leaf(Tensor::ones([2, 3])),
            alpha: 1.0,
        };
        let cfg = RclConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(matches!(rcl_loss(&mut tape, x, &[0], 1, &proto, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn detach_blocks_token_gradient() {
        let mut rng = stream(8, Purpose::Test, 0);
        let x: Tensor<f64> = normal_tensor(&mut rng, &[6, 3], 1.0);
        let p: Tensor<f64> = normal_tensor(&mut rng, &[3, 3], 1.0);
        for detach in [true, false] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let proto = Prototypes {
                p: tape.leaf(p.clone()),
                alpha: 1.0,
            };
            let cfg = RclConfig {
                detach_centroids: detach,
                ..Default::default()
            };
            let l = rcl_loss(&mut tape, xv, &[0, 1, 2, 0, 1, 2], 1, &proto, &cfg).unwrap();
            tape.backward(l).unwrap();
            let gx = tape.grad(xv);
            let nonzero = gx.data().iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, !detach);
            assert!(tape.grad(proto.p).data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn load_balance_examples() {
        let mut tape = Tape::<f64>::new();
        // Uniform logits, one token per expert.
        let logits = tape.constant(Tensor::zeros([4, 4]));
        let l = load_balance_loss(&mut tape, logits, &[0, 1, 2, 3], 1).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);

        // All tokens to expert 0 with probability ~1.
        let mut z = Tensor::<f64>::zeros([3, 4]);
        for i in 0..3 {
            z.data_mut()[i * 4] = 60.0;
        }
        let logits = tape.constant(z);
        let l = load_balance_loss(&mut tape, logits, &[0, 0, 0], 1).unwrap();
        assert!((tape.value(l).item() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn load_balance_matches_direct_formula() {
        let mut rng = stream(9, Purpose::Test, 0);
        let z: Tensor<f64> = normal_tensor(&mut rng, &[7, 5], 1.0);
        let idx = crate::router::topk_indices(&z, 2).unwrap();
        let mut want = 0.0;
        for e in 0..5 {
            let f = (0..7).filter(|&i| idx[i * 2..i * 2 + 2].contains(&e)).count() as f64 / 7.0;
            let p: f64 = (0..7)
                .map(|i| {
                    let row = z.row(i);
                    row[e].exp() / row.iter().map(|v| v.exp()).sum::<f64>()
                })
                .sum::<f64>()
                / 7.0;
            want += f * p;
        }
        want *= 5.0;
        let mut tape = Tape::new();
        let lv = tape.constant(z);
        let l = load_balance_loss(&mut tape, lv, &idx, 2).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[2, 3], &[50., 0., 0., 0., 0., 50.]));
        let l = routing_cls_loss(&mut tape, s, &[0, 2]).unwrap();
        assert!(tape.value(l).item() < 1e-15);

        let u = tape.constant(Tensor::zeros([3, 4]));
        let l = routing_cls_loss(&mut tape, u, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 1.3863).abs() < 1e-4);

        assert!(matches!(routing_cls_loss(&mut tape, u, &[0, 1, 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn cls_loss_matches_logsumexp() {
        let mut rng = stream(10, Purpose::Test, 0);
        let s: Tensor<f64> = normal_tensor(&mut rng, &[5, 4], 2.0);
        let labels = [3, 0, 1, 1, 2];
        let want: f64 = (0..5)
            .map(|i| {
                let row = s.row(i);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .sum::<f64>()
            / 5.0;
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let l = routing_cls_loss(&mut tape, sv, &labels).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::scalar(0.7));
        let r = tape.constant(Tensor::scalar(0.2));
        let z = tape.constant(Tensor::scalar(0.0));
        let l0 = total_loss(&mut tape, d, r, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 0.7);
        let l1 = total_loss(&mut tape, d, z, 1.0).unwrap();
        assert_eq!(tape.value(l1).item(), 0.7);
        let l10 = total_loss(&mut tape, d, r, 10.0).unwrap();
        assert!((tape.value(l10).item() - 2.7).abs() < 1e-15);
    }
}
