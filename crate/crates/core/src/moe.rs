//! Routed expert layers.
//!
//! [`promoe_forward`] runs the two-step router on a flattened `[B·L, D]`
//! token batch: unconditional tokens go through the sum of unconditional
//! experts, conditional tokens are dispatched to their top-K standard
//! experts by prototype affinity, and every token additionally passes
//! through the shared experts. The token-choice, k-means and classifier
//! layers reuse the same dispatch with a different router.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::experts::{expert_forward, make_segmented_pool, ExpertFfn, ExpertPool};
use crate::losses::{load_balance_loss, rcl_loss, routing_cls_loss, RclConfig};
use crate::param_tree;
use crate::router::{
    activate, classifier_route, kmeans_assign, linear_router_scores, prototype_scores, topk_gate, GatingResult,
    KMeansState, PartitionSource, Prototypes, ScoreActivation, TokenPartition,
};
use crate::rng::uniform_tensor;
use crate::tensor::{Real, Tensor};

/// Expert counts and routing hyperparameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProMoeLayerConfig {
    /// Standard (routed) experts, one prototype each.
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub n_uncond: usize,
    pub activation: ScoreActivation,
    pub alpha: f64,
    pub rcl: RclConfig,
    /// Weight of an extra load-balancing term (ablation; 0 disables).
    pub load_balance_weight: f64,
}

impl Default for ProMoeLayerConfig {
    /// `E14A1S1U1`: 12 standard experts, top-1, one shared, one unconditional.
    fn default() -> Self {
        Self {
            n_experts: 12,
            top_k: 1,
            n_shared: 1,
            n_uncond: 1,
            activation: ScoreActivation::Identity,
            alpha: 1.0,
            rcl: RclConfig::default(),
            load_balance_weight: 0.0,
        }
    }
}

impl ProMoeLayerConfig {
    /// Experts each conditional token activates.
    pub fn n_act(&self) -> usize {
        self.top_k + self.n_shared
    }

    pub fn total_experts(&self) -> usize {
        self.n_experts + self.n_shared + self.n_uncond
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top-k {} needs 1 ≤ k ≤ {} standard experts",
                self.top_k, self.n_experts
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.rcl.validate()
    }
}

impl fmt::Display for ProMoeLayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "E{}A{}S{}U{}",
            self.total_experts(),
            self.top_k,
            self.n_shared,
            self.n_uncond
        )
    }
}

impl FromStr for ProMoeLayerConfig {
    type Err = Error;

    /// Parses `E{total}A{k}S{shared}U{uncond}`; other fields take defaults.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed expert configuration `{s}`"));
        let mut nums = [0usize; 4];
        let mut rest = s;
        for (slot, tag) in nums.iter_mut().zip(['E', 'A', 'S', 'U']) {
            rest = rest.strip_prefix(tag).ok_or_else(bad)?;
            let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
            *slot = rest[..end].parse().map_err(|_| bad())?;
            rest = &rest[end..];
        }
        if !rest.is_empty() {
            return Err(bad());
        }
        let [total, k, shared, uncond] = nums;
        let n_experts = total.checked_sub(shared + uncond).ok_or_else(bad)?;
        let cfg = Self {
            n_experts,
            top_k: k,
            n_shared: shared,
            n_uncond: uncond,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameters of one prototypical MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProMoeParams<P> {
    pub pool: ExpertPool<P>,
    pub prototypes: Prototypes<P>,
}

param_tree!(ProMoeParams { node pool, node prototypes });

impl<T: Real> ProMoeParams<Tensor<T>> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, cfg: &ProMoeLayerConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = make_segmented_pool(rng, dim, cfg.n_experts, cfg.n_shared, cfg.n_uncond, cfg.n_act())?;
        let prototypes = Prototypes::init(rng, cfg.n_experts, dim, cfg.alpha);
        Ok(Self { pool, prototypes })
    }
}

/// Everything a layer records about its routing decisions.
#[derive(Debug, Clone)]
pub struct RoutingLog {
    pub partition: TokenPartition,
    pub source: PartitionSource,
    /// Gating over routed tokens; `routed_tokens[i]` is the flattened token
    /// index of gating row `i`.
    pub gating: GatingResult,
    pub routed_tokens: Vec<usize>,
    pub rcl: f64,
    pub load_balance: f64,
    pub cls: f64,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: Var,
    /// Weighted auxiliary loss (scalar); a constant zero when unused.
    pub aux_loss: Var,
    pub routing: RoutingLog,
}

fn zero_scalar<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn sum_experts<T: Real>(tape: &mut Tape<T>, experts: &[ExpertFfn<Var>], x: Var) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for e in experts {
        let y = expert_forward(tape, e, x)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(acc)
}

/// Sends each routed row to its selected experts and adds the gate-weighted
/// outputs into `out`. `rows[i]` is the row of `out` that routed token `i`
/// belongs to; `gates` is `[n, K]` (or `None` for unit gates).
fn dispatch<T: Real>(
    tape: &mut Tape<T>,
    mut out: Var,
    x_routed: Var,
    rows: &[usize],
    experts: &[ExpertFfn<Var>],
    indices: &[usize],
    top_k: usize,
    gates: Option<Var>,
) -> Result<Var> {
    let n = rows.len();
    let flat_gates = match gates {
        Some(g) => Some(tape.reshape(g, &[n * top_k])?),
        None => None,
    };
    for (e, expert) in experts.iter().enumerate() {
        let mut members = Vec::new();
        let mut slots = Vec::new();
        for (p, &sel) in indices.iter().enumerate() {
            if sel == e {
                members.push(p / top_k);
                slots.push(p);
            }
        }
        if members.is_empty() {
            continue;
        }
        let xe = tape.select_rows(x_routed, &members)?;
        let mut ye = expert_forward(tape, expert, xe)?;
        if let Some(fg) = flat_gates {
            let ge = tape.select_rows(fg, &slots)?;
            ye = tape.row_scale(ye, ge)?;
        }
        let targets: Vec<usize> = members.iter().map(|&m| rows[m]).collect();
        out = tape.index_add_rows(out, &targets, ye)?;
    }
    Ok(out)
}

fn check_tokens<T: Real>(tape: &Tape<T>, x: Var, dim: usize, n: usize) -> Result<()> {
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != dim || xs[0] != n {
        return Err(Error::shape("moe layer input", xs, &[n, dim]));
    }
    Ok(())
}

/// Prototypical MoE layer on `x: [B·L, D]`.
///
/// With `train` set and at least one conditional token, `aux_loss` is
/// `λ_RCL · RCL` (plus the optional load-balancing term); otherwise zero.
pub fn promoe_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    partition: &TokenPartition,
    source: PartitionSource,
    params: &ProMoeParams<Var>,
    cfg: &ProMoeLayerConfig,
    train: bool,
) -> Result<LayerOutput> {
    cfg.validate()?;
    let dim = tape.shape(params.prototypes.p)[1];
    let n_proto = tape.shape(params.prototypes.p)[0];
    if n_proto != cfg.n_experts
        || params.pool.standard.len() != cfg.n_experts
        || params.pool.shared.len() != cfg.n_shared
        || params.pool.unconditional.len() != cfg.n_uncond
    {
        return Err(Error::Config(format!(
            "expert pool ({} standard, {} shared, {} unconditional, {} prototypes) does not match {cfg}",
            params.pool.standard.len(),
            params.pool.shared.len(),
            params.pool.unconditional.len(),
            n_proto
        )));
    }
    let n = partition.n_tokens();
    check_tokens(tape, x, dim, n)?;

    let mut out = tape.constant(Tensor::zeros([n, dim]));

    // Unconditional branch.
    let uncond_rows = partition.uncond_indices();
    if !uncond_rows.is_empty() {
        let xu = tape.select_rows(x, &uncond_rows)?;
        if let Some(yu) = sum_experts(tape, &params.pool.unconditional, xu)? {
            out = tape.index_add_rows(out, &uncond_rows, yu)?;
        }
    }

    // Conditional branch.
    let cond_rows = partition.cond_indices();
    let mut aux = zero_scalar(tape);
    let mut log = RoutingLog {
        partition: partition.clone(),
        source,
        gating: GatingResult::empty(cfg.n_experts, cfg.top_k),
        routed_tokens: cond_rows.clone(),
        rcl: 0.0,
        load_balance: 0.0,
        cls: 0.0,
    };
    if !cond_rows.is_empty() {
        let xc = tape.select_rows(x, &cond_rows)?;
        let z = prototype_scores(tape, xc, &params.prototypes)?;
        let s = activate(tape, z, cfg.activation)?;
        let (gates, gating) = topk_gate(tape, s, cfg.top_k)?;
        out = dispatch(
            tape,
            out,
            xc,
            &cond_rows,
            &params.pool.standard,
            &gating.indices,
            cfg.top_k,
            Some(gates),
        )?;
        if train {
            let rcl = rcl_loss(tape, xc, &gating.indices, cfg.top_k, &params.prototypes, &cfg.rcl)?;
            log.rcl = tape.value(rcl).item().as_f64();
            if cfg.rcl.lambda_rcl != 0.0 {
                aux = tape.scale(rcl, T::cast(cfg.rcl.lambda_rcl));
            }
            if cfg.load_balance_weight != 0.0 {
                let lb = load_balance_loss(tape, z, &gating.indices, cfg.top_k)?;
                log.load_balance = tape.value(lb).item().as_f64();
                let w = tape.scale(lb, T::cast(cfg.load_balance_weight));
                aux = tape.add(aux, w)?;
            }
        }
        log.gating = gating;
    }

    // Shared experts see every token.
    if let Some(ys) = sum_experts(tape, &params.pool.shared, x)? {
        out = tape.add(out, ys)?;
    }

    Ok(LayerOutput {
        output: out,
        aux_loss: aux,
        routing: log,
    })
}

/// Token-choice baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcMoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub load_balance_weight: f64,
}

impl Default for TcMoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 12,
            top_k: 1,
            n_shared: 1,
            load_balance_weight: 0.01,
        }
    }
}

impl TcMoeConfig {
    pub fn n_act(&self) -> usize {
        self.top_k + self.n_shared
    }
}

/// Parameters of the linear-router token-choice layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TcMoeParams<P> {
    pub pool: ExpertPool<P>,
    /// `[D, N_E]`
    pub router: P,
}

param_tree!(TcMoeParams { node pool, leaf router });

impl<T: Real> TcMoeParams<Tensor<T>> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, cfg: &TcMoeConfig) -> Result<Self> {
        let pool = make_segmented_pool(rng, dim, cfg.n_experts, cfg.n_shared, 0, cfg.n_act())?;
        let a = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            pool,
            router: uniform_tensor(rng, &[dim, cfg.n_experts], -a, a),
        })
    }
}

/// Linear router → softmax → top-K → gate-weighted expert sum, plus shared
/// experts. The load-balancing loss is the auxiliary term when training.
pub fn tc_moe_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    params: &TcMoeParams<Var>,
    cfg: &TcMoeConfig,
    train: bool,
) -> Result<LayerOutput> {
    let dim = tape.shape(params.router)[0];
    let n = tape.shape(x).first().copied().unwrap_or(0);
    check_tokens(tape, x, dim, n)?;
    if params.pool.standard.len() != cfg.n_experts || tape.shape(params.router)[1] != cfg.n_experts {
        return Err(Error::Config("token-choice pool does not match its configuration".into()));
    }
    let rows: Vec<usize> = (0..n).collect();
    let logits = linear_router_scores(tape, x, params.router)?;
    let probs = tape.softmax(logits, 1)?;
    let (gates, gating) = topk_gate(tape, probs, cfg.top_k)?;
    let mut out = tape.constant(Tensor::zeros([n, dim]));
    out = dispatch(tape, out, x, &rows, &params.pool.standard, &gating.indices, cfg.top_k, Some(gates))?;
    if let Some(ys) = sum_experts(tape, &params.pool.shared, x)? {
        out = tape.add(out, ys)?;
    }
    let mut aux = zero_scalar(tape);
    let mut lb_value = 0.0;
    if train && cfg.load_balance_weight != 0.0 && n > 0 {
        let lb = load_balance_loss(tape, logits, &gating.indices, cfg.top_k)?;
        lb_value = tape.value(lb).item().as_f64();
        aux = tape.scale(lb, T::cast(cfg.load_balance_weight));
    }
    Ok(LayerOutput {
        output: out,
        aux_loss: aux,
        routing: RoutingLog {
            partition: TokenPartition::all_conditional(n, 1),
            source: PartitionSource::AllConditional,
            gating,
            routed_tokens: rows,
            rcl: 0.0,
            load_balance: lb_value,
            cls: 0.0,
        },
    })
}

/// Pool routed by nearest k-means centroid (top-1, unit gate).
pub fn kmeans_moe_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    pool: &ExpertPool<Var>,
    state: &KMeansState<T>,
) -> Result<LayerOutput> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    let dim = state.centroids.shape()[1];
    check_tokens(tape, x, dim, n)?;
    if pool.standard.len() != state.n_clusters() {
        return Err(Error::Config(format!(
            "{} experts for {} centroids",
            pool.standard.len(),
            state.n_clusters()
        )));
    }
    let assignment = kmeans_assign(tape.value(x), state)?;
    let rows: Vec<usize> = (0..n).collect();
    let mut out = tape.constant(Tensor::zeros([n, dim]));
    out = dispatch(tape, out, x, &rows, &pool.standard, &assignment.indices, 1, None)?;
    if let Some(ys) = sum_experts(tape, &pool.shared, x)? {
        out = tape.add(out, ys)?;
    }
    let scores = assignment.affinities().cast();
    let gating = GatingResult {
        gates: Tensor::ones([n, 1]),
        indices: assignment.indices,
        top_k: 1,
        scores,
    };
    let aux = zero_scalar(tape);
    Ok(LayerOutput {
        output: out,
        aux_loss: aux,
        routing: RoutingLog {
            partition: TokenPartition::all_conditional(n, 1),
            source: PartitionSource::AllConditional,
            gating,
            routed_tokens: rows,
            rcl: 0.0,
            load_balance: 0.0,
            cls: 0.0,
        },
    })
}

/// Parameters of the superclass-classifier layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsMoeParams<P> {
    pub pool: ExpertPool<P>,
    /// `[D, N_c]`
    pub classifier: P,
}

param_tree!(ClsMoeParams { node pool, leaf classifier });

impl<T: Real> ClsMoeParams<Tensor<T>> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, n_classes: usize, n_shared: usize) -> Result<Self> {
        let pool = make_segmented_pool(rng, dim, n_classes, n_shared, 0, 1 + n_shared)?;
        let a = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            pool,
            classifier: uniform_tensor(rng, &[dim, n_classes], -a, a),
        })
    }
}

/// Sample-level routing by a pooled classifier; every token of sample `b`
/// goes to the sample's argmax expert with unit gate. When training with
/// superclass labels the auxiliary term is the routing cross-entropy.
pub fn cls_moe_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    tokens_per_sample: usize,
    params: &ClsMoeParams<Var>,
    superclass: Option<&[usize]>,
    train: bool,
) -> Result<LayerOutput> {
    let dim = tape.shape(params.classifier)[0];
    let n = tape.shape(x).first().copied().unwrap_or(0);
    check_tokens(tape, x, dim, n)?;
    if tokens_per_sample == 0 || n % tokens_per_sample != 0 {
        return Err(Error::shape("cls_moe_forward", tape.shape(x), &[tokens_per_sample]));
    }
    let batch = n / tokens_per_sample;
    let x3 = tape.reshape(x, &[batch, tokens_per_sample, dim])?;
    let (scores, sample_idx) = classifier_route(tape, x3, params.classifier)?;
    let token_idx: Vec<usize> = sample_idx
        .iter()
        .flat_map(|&e| std::iter::repeat_n(e, tokens_per_sample))
        .collect();
    let rows: Vec<usize> = (0..n).collect();
    let mut out = tape.constant(Tensor::zeros([n, dim]));
    out = dispatch(tape, out, x, &rows, &params.pool.standard, &token_idx, 1, None)?;
    if let Some(ys) = sum_experts(tape, &params.pool.shared, x)? {
        out = tape.add(out, ys)?;
    }
    let mut aux = zero_scalar(tape);
    let mut cls_value = 0.0;
    if let (true, Some(labels)) = (train, superclass) {
        let ce = routing_cls_loss(tape, scores, labels)?;
        cls_value = tape.value(ce).item().as_f64();
        aux = ce;
    }
    let token_scores = tape.value(scores).select_rows(
        &(0..n).map(|i| i / tokens_per_sample).collect::<Vec<_>>(),
    );
    Ok(LayerOutput {
        output: out,
        aux_loss: aux,
        routing: RoutingLog {
            partition: TokenPartition::all_conditional(batch, tokens_per_sample),
            source: PartitionSource::AllConditional,
            gating: GatingResult {
                gates: Tensor::ones([n, 1]),
                indices: token_idx,
                top_k: 1,
                scores: token_scores.cast(),
            },
            routed_tokens: rows,
            rcl: 0.0,
            load_balance: 0.0,
            cls: cls_value,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::rng::{normal_tensor, stream, Purpose};

    #[test]
    fn config_string_roundtrip() {
        let cfg = ProMoeLayerConfig::default();
        assert_eq!(cfg.to_string(), "E14A1S1U1");
        let parsed: ProMoeLayerConfig = "E14A1S1U1".parse().unwrap();
        assert_eq!(parsed.n_experts, 12);
        let tab8: ProMoeLayerConfig = "E16A3S1U0".parse().unwrap();
        assert_eq!((tab8.n_experts, tab8.top_k, tab8.n_act()), (15, 3, 4));
        assert!("E2A3S0U0".parse::<ProMoeLayerConfig>().is_err());
        assert!("E14A1S1".parse::<ProMoeLayerConfig>().is_err());
        assert!("E1A1S1U1".parse::<ProMoeLayerConfig>().is_err());
    }

    #[test]
    fn all_unconditional_uses_uncond_plus_shared() {
        let cfg = ProMoeLayerConfig {
            n_experts: 3,
            ..Default::default()
        };
        let mut rng = stream(1, Purpose::Test, 0);
        let params = ProMoeParams::<Tensor<f64>>::init(&mut rng, 8, &cfg).unwrap();
        let xv: Tensor<f64> = normal_tensor(&mut rng, &[4, 8], 1.0);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x = tape.constant(xv.clone());
        let part = TokenPartition::from_sample_mask(&[false, false], 2);
        let out = promoe_forward(&mut tape, x, &part, PartitionSource::Labels, &b, &cfg, true).unwrap();

        let mut t2 = Tape::new();
        let b2 = bind(&params, &mut t2);
        let x2 = t2.constant(xv);
        let u = expert_forward(&mut t2, &b2.pool.unconditional[0], x2).unwrap();
        let s = expert_forward(&mut t2, &b2.pool.shared[0], x2).unwrap();
        let want = t2.add(u, s).unwrap();
        assert!(tape.value(out.output).max_abs_diff(t2.value(want)) < 1e-12);

        let loss = tape.sum(out.output);
        let total = tape.add(loss, out.aux_loss).unwrap();
        tape.backward(total).unwrap();
        assert!(tape.grad(b.prototypes.p).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(out.aux_loss).item(), 0.0);
    }

    #[test]
    fn single_expert_reduction() {
        let cfg = ProMoeLayerConfig {
            n_experts: 1,
            top_k: 1,
            n_shared: 0,
            n_uncond: 0,
            ..Default::default()
        };
        let mut rng = stream(2, Purpose::Test, 0);
        let params = ProMoeParams::<Tensor<f64>>::init(&mut rng, 6, &cfg).unwrap();
        let xv: Tensor<f64> = normal_tensor(&mut rng, &[5, 6], 1.0);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x = tape.constant(xv.clone());
        let part = TokenPartition::all_conditional(5, 1);
        let out = promoe_forward(&mut tape, x, &part, PartitionSource::AllConditional, &b, &cfg, false).unwrap();
        let e0 = expert_forward(&mut tape, &b.pool.standard[0], x).unwrap();
        let p = params.prototypes.p.row(0);
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..5 {
            let xi = xv.row(i);
            let xn = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot = xi.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
            let cos = dot / ((xn + crate::autodiff::NORM_EPS) * (pn + crate::autodiff::NORM_EPS));
            for d in 0..6 {
                let want = cos * tape.value(e0).row(i)[d];
                assert!((tape.value(out.output).row(i)[d] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_mismatch_is_config_error() {
        let cfg = ProMoeLayerConfig {
            n_experts: 3,
            ..Default::default()
        };
        let mut rng = stream(3, Purpose::Test, 0);
        let params = ProMoeParams::<Tensor<f64>>::init(&mut rng, 8, &cfg).unwrap();
        let wrong = ProMoeLayerConfig {
            n_experts: 4,
            ..cfg
        };
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x = tape.constant(Tensor::zeros([2, 8]));
        let part = TokenPartition::all_conditional(2, 1);
        let r = promoe_forward(&mut tape, x, &part, PartitionSource::Labels, &b, &wrong, true);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn tc_single_expert_and_zero_router() {
        let cfg = TcMoeConfig {
            n_experts: 1,
            top_k: 1,
            n_shared: 0,
            load_balance_weight: 0.0,
        };
        let mut rng = stream(4, Purpose::Test, 0);
        let params = TcMoeParams::<Tensor<f64>>::init(&mut rng, 4, &cfg).unwrap();
        let xv: Tensor<f64> = normal_tensor(&mut rng, &[3, 4], 1.0);
        let mut tape = Tape::new();
        let b = bind(&params, &mut tape);
        let x = tape.constant(xv);
        let out = tc_moe_forward(&mut tape, x, &b, &cfg, false).unwrap();
        let e0 = expert_forward(&mut tape, &b.pool.standard[0], x).unwrap();
        assert!(tape.value(out.output).max_abs_diff(tape.value(e0)) < 1e-15);
        assert!(out.routing.gating.gates.data().iter().all(|&g| g == 1.0));

        let cfg3 = TcMoeConfig {
            n_experts: 3,
            ..cfg
        };
        let mut p3 = TcMoeParams::<Tensor<f64>>::init(&mut rng, 4, &cfg3).unwrap();
        p3.router = Tensor::zeros([4, 3]);
        let b3 = bind(&p3, &mut tape);
        let out = tc_moe_forward(&mut tape, x, &b3, &cfg3, false).unwrap();
        assert_eq!(out.routing.gating.indices, vec![0, 0, 0]);
        for &g in out.routing.gating.gates.data() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
