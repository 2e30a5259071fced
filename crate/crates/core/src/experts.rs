//! Expert feed-forward networks and fine-grained segmentation.
//!
//! A dense transformer FFN has inner width `4·D`. When each token activates
//! `n_act` experts (routed plus shared), every expert gets inner width
//! `4·D / n_act`, so the weights touched per token match the dense layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param_tree;
use crate::rng::uniform_tensor;
use crate::tensor::{Real, Tensor};

/// Inner width of the dense baseline FFN relative to the model width.
pub const DENSE_EXPANSION: usize = 4;

/// Expert nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertActivation {
    #[default]
    Gelu,
    /// Linear expert; only used to build exact test fixtures.
    Identity,
}

/// Two-layer FFN: `act(x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub activation: ExpertActivation,
}

param_tree!(ExpertFfn { leaf w1, leaf b1, leaf w2, leaf b2, copy activation });

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPool<P> {
    pub standard: Vec<ExpertFfn<P>>,
    pub shared: Vec<ExpertFfn<P>>,
    pub unconditional: Vec<ExpertFfn<P>>,
}

param_tree!(ExpertPool { node standard, node shared, node unconditional });

impl<T: Real> ExpertFfn<Tensor<T>> {
    /// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng>(rng: &mut R, dim: usize, inner: usize) -> Self {
        let a1 = 1.0 / (dim as f64).sqrt();
        let a2 = 1.0 / (inner as f64).sqrt();
        Self {
            w1: uniform_tensor(rng, &[dim, inner], -a1, a1),
            b1: uniform_tensor(rng, &[inner], -a1, a1),
            w2: uniform_tensor(rng, &[inner, dim], -a2, a2),
            b2: uniform_tensor(rng, &[dim], -a2, a2),
            activation: ExpertActivation::Gelu,
        }
    }

    pub fn zeros(dim: usize, inner: usize) -> Self {
        Self {
            w1: Tensor::zeros([dim, inner]),
            b1: Tensor::zeros([inner]),
            w2: Tensor::zeros([inner, dim]),
            b2: Tensor::zeros([dim]),
            activation: ExpertActivation::Gelu,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn inner(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount::ffn(self.dim(), self.inner())
    }
}

impl<T: Real> ExpertPool<Tensor<T>> {
    pub fn dim(&self) -> usize {
        self.all().next().map_or(0, |e| e.dim())
    }

    pub fn inner(&self) -> usize {
        self.all().next().map_or(0, |e| e.inner())
    }

    pub fn all(&self) -> impl Iterator<Item = &ExpertFfn<Tensor<T>>> {
        self.standard
            .iter()
            .chain(&self.shared)
            .chain(&self.unconditional)
    }
}

/// Applies one expert row-wise to `x: [n, D]`.
pub fn expert_forward<T: Real>(tape: &mut Tape<T>, e: &ExpertFfn<Var>, x: Var) -> Result<Var> {
    let d = tape.shape(e.w1)[0];
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != d {
        return Err(Error::shape("expert_forward", xs, tape.shape(e.w1)));
    }
    let h = tape.matmul(x, e.w1)?;
    let h = tape.add(h, e.b1)?;
    let h = match e.activation {
        ExpertActivation::Gelu => tape.gelu(h),
        ExpertActivation::Identity => h,
    };
    let y = tape.matmul(h, e.w2)?;
    tape.add(y, e.b2)
}

/// Inner width for `n_act` activated experts per token.
pub fn segmented_inner(dim: usize, n_act: usize) -> Result<usize> {
    let total = DENSE_EXPANSION * dim;
    if n_act == 0 || !total.is_multiple_of(n_act) {
        return Err(Error::Config(format!(
            "cannot split FFN width {total} across {n_act} activated experts"
        )));
    }
    Ok(total / n_act)
}

/// Builds a pool whose experts all have inner width `4·D / n_act`.
pub fn make_segmented_pool<T: Real, R: Rng>(
    rng: &mut R,
    dim: usize,
    n_standard: usize,
    n_shared: usize,
    n_uncond: usize,
    n_act: usize,
) -> Result<ExpertPool<Tensor<T>>> {
    let inner = segmented_inner(dim, n_act)?;
    let mut make = |n: usize| (0..n).map(|_| ExpertFfn::init(rng, dim, inner)).collect();
    Ok(ExpertPool {
        standard: make(n_standard),
        shared: make(n_shared),
        unconditional: make(n_uncond),
    })
}

/// Weight and bias element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
}

impl ParamCount {
    pub fn ffn(dim: usize, inner: usize) -> Self {
        Self {
            weights: 2 * dim * inner,
            biases: inner + dim,
        }
    }

    pub fn total(&self) -> usize {
        self.weights + self.biases
    }

    fn times(self, n: usize) -> Self {
        Self {
            weights: self.weights * n,
            biases: self.biases * n,
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            weights: self.weights + o.weights,
            biases: self.biases + o.biases,
        }
    }
}

/// Parameters of the dense baseline FFN.
pub fn dense_params(dim: usize) -> ParamCount {
    ParamCount::ffn(dim, DENSE_EXPANSION * dim)
}

/// Parameters touched per token, on each branch of the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActivatedParams {
    /// Shared experts plus `top_k` standard experts.
    pub conditional: ParamCount,
    /// Shared experts plus every unconditional expert.
    pub unconditional: ParamCount,
}

/// Counts activated parameters from pool sizes alone.
pub fn activated_params(
    dim: usize,
    inner: usize,
    top_k: usize,
    n_shared: usize,
    n_uncond: usize,
) -> ActivatedParams {
    let one = ParamCount::ffn(dim, inner);
    let shared = one.times(n_shared);
    ActivatedParams {
        conditional: shared.plus(one.times(top_k)),
        unconditional: shared.plus(one.times(n_uncond)),
    }
}

pub fn pool_activated_params<T: Real>(pool: &ExpertPool<Tensor<T>>, top_k: usize) -> ActivatedParams {
    activated_params(
        pool.dim(),
        pool.inner(),
        top_k,
        pool.shared.len(),
        pool.unconditional.len(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::rng::{stream, Purpose};

    #[test]
    fn factor_two_rule() {
        assert_eq!(segmented_inner(64, 2).unwrap(), 128);
        assert_eq!(segmented_inner(64, 4).unwrap(), 64);
        assert!(matches!(segmented_inner(64, 3), Err(Error::Config(_))));
        assert!(segmented_inner(64, 0).is_err());
    }

    #[test]
    fn tab1_parity_d768() {
        // E14A1S1U1: one shared plus one routed expert per token.
        let inner = segmented_inner(768, 2).unwrap();
        assert_eq!(inner, 1536);
        let act = activated_params(768, inner, 1, 1, 1);
        assert_eq!(act.conditional.weights, 2 * (2 * 768 * 1536));
        assert_eq!(act.conditional.weights, dense_params(768).weights);
        assert_eq!(dense_params(768).weights, 2 * 768 * 3072);
        assert_eq!(act.unconditional.weights, act.conditional.weights);
    }

    #[test]
    fn three_routed_plus_shared() {
        let inner = segmented_inner(64, 4).unwrap();
        assert_eq!(inner, 64);
        let act = activated_params(64, inner, 3, 1, 1);
        assert_eq!(act.conditional.weights, dense_params(64).weights);
    }

    #[test]
    fn parity_grid() {
        for &dim in &[32, 64, 128] {
            for &(k, s) in &[(1, 0), (1, 1), (3, 1)] {
                let n_act = k + s;
                let inner = segmented_inner(dim, n_act).unwrap();
                let act = activated_params(dim, inner, k, s, 0);
                assert_eq!(act.conditional.weights, dense_params(dim).weights, "D={dim} n_act={n_act}");
            }
        }
    }

    #[test]
    fn zero_expert_outputs_zero() {
        let e = ExpertFfn::<Tensor<f64>>::zeros(4, 8);
        let mut tape = Tape::new();
        let eb = bind(&e, &mut tape);
        let x = tape.constant(crate::rng::normal_tensor(&mut stream(1, Purpose::Test, 0), &[3, 4], 1.0));
        let y = expert_forward(&mut tape, &eb, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_construction_reproduces_input() {
        // w1 = [2I | 0], w2 = [0.5I ; 0], linear activation.
        let (d, inner) = (3, 6);
        let mut w1 = Tensor::<f64>::zeros([d, inner]);
        let mut w2 = Tensor::<f64>::zeros([inner, d]);
        for i in 0..d {
            w1.data_mut()[i * inner + i] = 2.0;
            w2.data_mut()[i * d + i] = 0.5;
        }
        let e = ExpertFfn {
            w1,
            b1: Tensor::zeros([inner]),
            w2,
            b2: Tensor::zeros([d]),
            activation: ExpertActivation::Identity,
        };
        let mut tape = Tape::new();
        let eb = bind(&e, &mut tape);
        let xv = crate::rng::normal_tensor::<f64, _>(&mut stream(2, Purpose::Test, 0), &[5, d], 1.0);
        let x = tape.constant(xv.clone());
        let y = expert_forward(&mut tape, &eb, x).unwrap();
        assert!(tape.value(y).max_abs_diff(&xv) < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let e = ExpertFfn::<Tensor<f64>>::zeros(4, 8);
        let mut tape = Tape::new();
        let eb = bind(&e, &mut tape);
        let x = tape.constant(Tensor::zeros([2, 5]));
        assert!(matches!(expert_forward(&mut tape, &eb, x), Err(Error::Shape { .. })));
    }
}
