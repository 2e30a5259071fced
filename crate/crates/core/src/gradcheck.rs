//! Central finite-difference gradient checks in double precision.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::experts::{expert_forward, ExpertFfn};
use crate::losses::{diffusion_loss, load_balance_loss, rcl_loss, routing_cls_loss, RclConfig};
use crate::moe::{promoe_forward, ProMoeLayerConfig, ProMoeParams};
use crate::params::ParamTree;
use crate::router::{activate, prototype_scores, PartitionSource, Prototypes, ScoreActivation, TokenPartition};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)` over all inputs.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub evaluations: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error < tol
    }
}

/// Compares tape gradients of `f` at `inputs` against central differences.
///
/// `f` rebuilds the scalar loss from leaf vars on a fresh tape; it is called
/// `2·numel + 1` times.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    let mut max_mag: f64 = 0.0;
    let mut evaluations = 1;
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[which].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[which].data_mut()[i] = orig;
            evaluations += 2;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[which].data()[i];
            max_err = max_err.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
        }
    }
    let rel_error = if max_mag > 0.0 { max_err / max_mag } else { max_err };
    Ok(GradCheck {
        name: name.to_string(),
        rel_error,
        max_abs_error: max_err,
        evaluations,
    })
}

/// Tolerance for single operations and layer losses.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the composed layer + MSE check.
pub const COMPOSED_TOL: f64 = 1e-3;

/// What [`suite`] covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Every tape operation.
    Ops,
    /// Expert, router scores and the auxiliary losses.
    Layer,
    /// Both of the above plus the composed layer + MSE loss.
    Full,
}

impl std::str::FromStr for Scope {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "layer" => Ok(Scope::Layer),
            "full" => Ok(Scope::Full),
            _ => Err(crate::error::Error::Unknown {
                kind: "gradcheck scope",
                name: s.to_string(),
            }),
        }
    }
}

/// A check together with the tolerance it must meet.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    #[serde(flatten)]
    pub check: GradCheck,
    pub tolerance: f64,
    pub passed: bool,
}

fn entry(check: GradCheck, tolerance: f64) -> SuiteEntry {
    SuiteEntry {
        passed: check.passes(tolerance),
        check,
        tolerance,
    }
}

fn rand(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    crate::rng::normal_tensor(rng, shape, 1.0)
}

/// Reduces `y` to a scalar as `Σ y ⊙ w` with a fixed random `w`.
fn project(tape: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = rand(&mut crate::rng::stream(salt, crate::rng::Purpose::Test, 99), &shape);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 4], vec![]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], 0.7))),
        ("matmul", vec![vec![3, 5], vec![5, 4]], |t, v| t.matmul(v[0], v[1])),
        ("bmm", vec![vec![2, 3, 5], vec![2, 5, 4]], |t, v| t.bmm(v[0], v[1])),
        ("permute", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![2, 3, 4]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("sum", vec![vec![3, 4]], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
        ("mean", vec![vec![3, 4]], |t, v| {
            let s = t.mean(v[0]);
            t.mul(s, s)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], |t, v| t.sum_axis(v[0], 1)),
        ("mean_axis", vec![vec![2, 3, 4]], |t, v| t.mean_axis(v[0], 2)),
        ("exp", vec![vec![3, 4]], |t, v| Ok(t.exp(v[0]))),
        ("log", vec![vec![3, 4]], |t, v| {
            let e = t.exp(v[0]);
            Ok(t.log(e))
        }),
        ("sigmoid", vec![vec![3, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        ("gelu", vec![vec![3, 4]], |t, v| Ok(t.gelu(v[0]))),
        ("softmax", vec![vec![3, 4]], |t, v| t.softmax(v[0], 1)),
        ("softmax_axis0", vec![vec![3, 4]], |t, v| t.softmax(v[0], 0)),
        ("log_softmax", vec![vec![3, 4]], |t, v| t.log_softmax(v[0], 1)),
        ("layer_norm", vec![vec![3, 6]], |t, v| t.layer_norm(v[0], 1)),
        ("l2_normalize", vec![vec![3, 4]], |t, v| t.l2_normalize(v[0], 1)),
        ("select_rows", vec![vec![4, 3]], |t, v| t.select_rows(v[0], &[2, 0, 2, 3])),
        ("gather_rows", vec![vec![4, 3]], |t, v| t.gather_rows(v[0], &[true, false, true, true])),
        ("scatter_rows", vec![vec![4, 3], vec![2, 3]], |t, v| {
            t.scatter_rows(v[0], &[false, true, false, true], v[1])
        }),
        ("index_add_rows", vec![vec![4, 3], vec![3, 3]], |t, v| t.index_add_rows(v[0], &[1, 1, 3], v[1])),
        ("row_scale", vec![vec![4, 3], vec![4]], |t, v| t.row_scale(v[0], v[1])),
        ("gather_cols", vec![vec![3, 4]], |t, v| t.gather_cols(v[0], &[0, 3, 1, 1, 2, 0], 2)),
    ]
}

fn op_checks(out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut rng = crate::rng::stream(i as u64, crate::rng::Purpose::Test, 0);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand(&mut rng, s)).collect();
        let salt = i as u64;
        let c = check(name, &inputs, |t, v| {
            let y = f(t, v)?;
            project(t, y, salt)
        })?;
        out.push(entry(c, OP_TOL));
    }
    Ok(())
}

fn flatten<M: ParamTree<Tensor<f64>>>(tree: &M) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    tree.visit("", &mut |_, t| v.push(t.clone()));
    v
}

fn rebind<M: ParamTree<Tensor<f64>>>(tree: &M, vars: &[Var]) -> M::Mapped<Var> {
    let mut it = vars.iter().copied();
    tree.map(&mut |_| it.next().expect("one var per leaf"))
}

fn layer_checks(out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut rng = crate::rng::stream(1, crate::rng::Purpose::Test, 1);
    let dim = 4;

    let e = ExpertFfn::<Tensor<f64>>::init(&mut rng, dim, 6);
    let mut inputs = vec![rand(&mut rng, &[3, dim])];
    inputs.extend(flatten(&e));
    let c = check("expert_forward", &inputs, |t, v| {
        let ev = rebind(&e, &v[1..]);
        let y = expert_forward(t, &ev, v[0])?;
        project(t, y, 100)
    })?;
    out.push(entry(c, OP_TOL));

    let proto = Prototypes::<Tensor<f64>>::init(&mut rng, 3, dim, 1.5);
    let x = rand(&mut rng, &[5, dim]);
    let c = check("prototype_scores", &[x.clone(), proto.p.clone()], |t, v| {
        let s = prototype_scores(t, v[0], &Prototypes { p: v[1], alpha: 1.5 })?;
        project(t, s, 101)
    })?;
    out.push(entry(c, OP_TOL));

    for (name, kind) in [("activate_sigmoid", ScoreActivation::Sigmoid), ("activate_softmax", ScoreActivation::Softmax)] {
        let c = check(name, &[rand(&mut rng, &[4, 3])], |t, v| {
            let s = activate(t, v[0], kind)?;
            project(t, s, 102)
        })?;
        out.push(entry(c, OP_TOL));
    }

    let indices = [0, 1, 1, 2, 0];
    // Detached centroids are a stop-gradient, so only the prototypes are
    // perturbed in that case.
    let c = check("rcl_loss", std::slice::from_ref(&proto.p), |t, v| {
        let xc = t.constant(x.clone());
        let rcfg = RclConfig {
            tau: 0.5,
            ..Default::default()
        };
        rcl_loss(t, xc, &indices, 1, &Prototypes { p: v[0], alpha: 1.0 }, &rcfg)
    })?;
    out.push(entry(c, OP_TOL));
    let c = check("rcl_loss_through_centroids", &[x.clone(), proto.p.clone()], |t, v| {
        let rcfg = RclConfig {
            tau: 0.5,
            detach_centroids: false,
            ..Default::default()
        };
        rcl_loss(t, v[0], &indices, 1, &Prototypes { p: v[1], alpha: 1.0 }, &rcfg)
    })?;
    out.push(entry(c, OP_TOL));

    let c = check("load_balance_loss", &[rand(&mut rng, &[5, 3])], |t, v| {
        load_balance_loss(t, v[0], &[0, 2, 1, 2, 0, 1, 2, 2, 1, 0], 2)
    })?;
    out.push(entry(c, OP_TOL));

    let c = check("routing_cls_loss", &[rand(&mut rng, &[4, 3])], |t, v| routing_cls_loss(t, v[0], &[2, 0, 1, 2]))?;
    out.push(entry(c, OP_TOL));

    let target = rand(&mut rng, &[3, 4]);
    let c = check("diffusion_loss", &[rand(&mut rng, &[3, 4])], |t, v| {
        let y = t.constant(target.clone());
        diffusion_loss(t, v[0], y)
    })?;
    out.push(entry(c, OP_TOL));
    Ok(())
}

/// Layer + MSE over a mixed batch. Routing is computed once at the base
/// point; an evaluation whose top-K choice differs is an error.
fn composed_check(top_k: usize, salt: u64) -> Result<SuiteEntry> {
    let mut rng = crate::rng::stream(salt, crate::rng::Purpose::Test, 2);
    let dim = 6;
    let cfg = ProMoeLayerConfig {
        n_experts: 4,
        top_k,
        alpha: 2.0,
        load_balance_weight: 0.1,
        rcl: RclConfig {
            detach_centroids: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let params = ProMoeParams::<Tensor<f64>>::init(&mut rng, dim, &cfg)?;
    let partition = TokenPartition::from_sample_mask(&[true, false, true], 2);
    let x = rand(&mut rng, &[6, dim]);
    let target = rand(&mut rng, &[6, dim]);
    let mut inputs = vec![x];
    inputs.extend(flatten(&params));

    let forward = |t: &mut Tape<f64>, v: &[Var]| -> Result<(Var, Vec<usize>)> {
        let p = rebind(&params, &v[1..]);
        let out = promoe_forward(t, v[0], &partition, PartitionSource::Labels, &p, &cfg, true)?;
        let y = t.constant(target.clone());
        let mse = diffusion_loss(t, out.output, y)?;
        Ok((t.add(mse, out.aux_loss)?, out.routing.gating.indices))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let base = forward(&mut tape, &vars)?.1;
    let c = check(&format!("promoe_forward_mse_k{top_k}"), &inputs, |t, v| {
        let (loss, idx) = forward(t, v)?;
        if idx != base {
            return Err(crate::error::Error::Contract("routing changed under perturbation".into()));
        }
        Ok(loss)
    })?;
    Ok(entry(c, COMPOSED_TOL))
}

/// Runs the checks in `scope`, all at double precision.
pub fn suite(scope: Scope) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Ops | Scope::Full) {
        op_checks(&mut out)?;
    }
    if matches!(scope, Scope::Layer | Scope::Full) {
        layer_checks(&mut out)?;
    }
    if scope == Scope::Full {
        out.push(composed_check(1, 0)?);
        out.push(composed_check(2, 1)?);
    }
    Ok(out)
}
