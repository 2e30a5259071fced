//! MiniDiT: a small DiT-style denoiser with a pluggable FFN slot.
//!
//! Images are split into non-overlapping patches, linearly embedded, and
//! summed with a fixed 2-D sin-cos position code and a per-sample
//! conditioning vector (timestep MLP plus class embedding). Each block is
//! pre-LN attention followed by a pre-LN FFN slot, both residual. Labels
//! equal to `num_classes` are the null label.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::experts::{expert_forward, make_segmented_pool, ExpertFfn, ExpertPool, DENSE_EXPANSION};
use crate::moe::{
    cls_moe_forward, kmeans_moe_forward, promoe_forward, tc_moe_forward, ClsMoeParams, LayerOutput, ProMoeLayerConfig,
    ProMoeParams, RoutingLog, TcMoeConfig, TcMoeParams,
};
use crate::param_tree;
use crate::params::ParamTree;
use crate::rng::{stream, uniform_tensor, Purpose};
use crate::router::{partition_by_condition, KMeansState, PartitionSource, TokenPartition};
use crate::tensor::{Real, Tensor};

/// What occupies the FFN slot of every block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Promoe(ProMoeLayerConfig),
    TcMoe(TcMoeConfig),
    KmeansRouter { n_experts: usize, n_shared: usize },
    ClsRouter { n_shared: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Promoe(_) => "promoe",
            LayerKind::TcMoe(_) => "tc_moe",
            LayerKind::KmeansRouter { .. } => "kmeans_router",
            LayerKind::ClsRouter { .. } => "cls_router",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniDiTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layer: LayerKind,
    pub num_classes: usize,
    /// Superclass count; the classifier router has one expert per superclass.
    pub num_superclasses: usize,
    pub label_dropout_prob: f64,
}

impl Default for MiniDiTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            depth: 4,
            hidden: 64,
            heads: 1,
            layer: LayerKind::Promoe(ProMoeLayerConfig::default()),
            num_classes: 8,
            num_superclasses: 4,
            label_dropout_prob: 0.1,
        }
    }
}

impl MiniDiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(4) {
            return bad(format!("hidden {} must be a multiple of 4 for the 2-D position code", self.hidden));
        }
        if self.num_classes == 0 || self.channels == 0 || self.depth == 0 {
            return bad("classes, channels and depth must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout_prob) {
            return bad(format!("label dropout {} outside [0, 1]", self.label_dropout_prob));
        }
        if let LayerKind::Promoe(c) = &self.layer {
            c.validate()?;
        }
        Ok(())
    }

    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub bo: P,
}

param_tree!(Attention { leaf wq, leaf wk, leaf wv, leaf wo, leaf bo });

/// Parameters of the FFN slot.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams<P> {
    Dense(ExpertFfn<P>),
    Promoe(ProMoeParams<P>),
    TcMoe(TcMoeParams<P>),
    Kmeans(ExpertPool<P>),
    Cls(ClsMoeParams<P>),
}

impl<P> ParamTree<P> for FfnParams<P> {
    type Mapped<Q> = FfnParams<Q>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        match self {
            FfnParams::Dense(p) => p.visit(prefix, f),
            FfnParams::Promoe(p) => p.visit(prefix, f),
            FfnParams::TcMoe(p) => p.visit(prefix, f),
            FfnParams::Kmeans(p) => p.visit(prefix, f),
            FfnParams::Cls(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        match self {
            FfnParams::Dense(p) => p.visit_mut(prefix, f),
            FfnParams::Promoe(p) => p.visit_mut(prefix, f),
            FfnParams::TcMoe(p) => p.visit_mut(prefix, f),
            FfnParams::Kmeans(p) => p.visit_mut(prefix, f),
            FfnParams::Cls(p) => p.visit_mut(prefix, f),
        }
    }

    fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> FfnParams<Q> {
        match self {
            FfnParams::Dense(p) => FfnParams::Dense(p.map(f)),
            FfnParams::Promoe(p) => FfnParams::Promoe(p.map(f)),
            FfnParams::TcMoe(p) => FfnParams::TcMoe(p.map(f)),
            FfnParams::Kmeans(p) => FfnParams::Kmeans(p.map(f)),
            FfnParams::Cls(p) => FfnParams::Cls(p.map(f)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<P> {
    pub attn: Attention<P>,
    pub ffn: FfnParams<P>,
}

param_tree!(Block { node attn, node ffn });

#[derive(Debug, Clone, PartialEq)]
pub struct MiniDiT<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub time_w1: P,
    pub time_b1: P,
    pub time_w2: P,
    pub time_b2: P,
    /// `[num_classes + 1, D]`; the last row is the null label.
    pub class_embed: P,
    pub blocks: Vec<Block<P>>,
    pub head_w: P,
    pub head_b: P,
}

param_tree!(MiniDiT {
    leaf patch_w,
    leaf patch_b,
    leaf time_w1,
    leaf time_b1,
    leaf time_w2,
    leaf time_b2,
    leaf class_embed,
    node blocks,
    leaf head_w,
    leaf head_b,
});

fn linear_init<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor<T>, Tensor<T>) {
    let a = 1.0 / (fan_in as f64).sqrt();
    (
        uniform_tensor(rng, &[fan_in, fan_out], -a, a),
        uniform_tensor(rng, &[fan_out], -a, a),
    )
}

/// Random streams used by [`MiniDiT::init`]; experts of block `l` always
/// come from `ffn_stream(l)` so different variants share expert init.
fn embed_stream(seed: u64) -> rand_chacha::ChaCha8Rng {
    stream(seed, Purpose::Init, 0)
}

fn attn_stream(seed: u64, block: usize) -> rand_chacha::ChaCha8Rng {
    stream(seed, Purpose::Init, 1000 + block as u64)
}

fn ffn_stream(seed: u64, block: usize) -> rand_chacha::ChaCha8Rng {
    stream(seed, Purpose::Init, 2000 + block as u64)
}

impl<T: Real> MiniDiT<Tensor<T>> {
    pub fn init(cfg: &MiniDiTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let mut rng = embed_stream(seed);
        let (patch_w, patch_b) = linear_init(&mut rng, cfg.patch_dim(), d);
        let (time_w1, time_b1) = linear_init(&mut rng, d, d);
        let (time_w2, time_b2) = linear_init(&mut rng, d, d);
        let class_embed = crate::rng::normal_tensor(&mut rng, &[cfg.num_classes + 1, d], 0.02);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let mut ar = attn_stream(seed, l);
            let a = 1.0 / (d as f64).sqrt();
            let attn = Attention {
                wq: uniform_tensor(&mut ar, &[d, d], -a, a),
                wk: uniform_tensor(&mut ar, &[d, d], -a, a),
                wv: uniform_tensor(&mut ar, &[d, d], -a, a),
                wo: uniform_tensor(&mut ar, &[d, d], -a, a),
                bo: Tensor::zeros([d]),
            };
            let mut fr = ffn_stream(seed, l);
            let ffn = match &cfg.layer {
                LayerKind::Dense => FfnParams::Dense(ExpertFfn::init(&mut fr, d, DENSE_EXPANSION * d)),
                LayerKind::Promoe(c) => FfnParams::Promoe(ProMoeParams::init(&mut fr, d, c)?),
                LayerKind::TcMoe(c) => FfnParams::TcMoe(TcMoeParams::init(&mut fr, d, c)?),
                LayerKind::KmeansRouter { n_experts, n_shared } => {
                    FfnParams::Kmeans(make_segmented_pool(&mut fr, d, *n_experts, *n_shared, 0, 1 + n_shared)?)
                }
                LayerKind::ClsRouter { n_shared } => {
                    FfnParams::Cls(ClsMoeParams::init(&mut fr, d, cfg.num_superclasses, *n_shared)?)
                }
            };
            blocks.push(Block { attn, ffn });
        }
        Ok(Self {
            patch_w,
            patch_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            class_embed,
            blocks,
            head_w: Tensor::zeros([d, cfg.patch_dim()]),
            head_b: Tensor::zeros([cfg.patch_dim()]),
        })
    }
}

/// `[B, C, H, W]` → `[B·L, p·p·C]`, patches in row-major grid order and
/// each patch flattened as `(dy, dx, c)`.
pub fn patchify<T: Real>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != s[3] || patch == 0 || !s[2].is_multiple_of(patch) {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let (b, c, h) = (s[0], s[1], s[2]);
    let g = h / patch;
    let pd = patch * patch * c;
    let src = x.data();
    let mut out = Vec::with_capacity(b * g * g * pd);
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ci in 0..c {
                            let (y, xx) = (gy * patch + dy, gx * patch + dx);
                            out.push(src[((bi * c + ci) * h + y) * h + xx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new([b * g * g, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(p: &Tensor<T>, batch: usize, channels: usize, image: usize, patch: usize) -> Result<Tensor<T>> {
    let g = image / patch;
    let pd = patch * patch * channels;
    if p.shape() != [batch * g * g, pd] {
        return Err(Error::shape("unpatchify", p.shape(), &[batch * g * g, pd]));
    }
    let src = p.data();
    let mut out = vec![T::zero(); batch * channels * image * image];
    let mut i = 0;
    for bi in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ci in 0..channels {
                            let (y, xx) = (gy * patch + dy, gx * patch + dx);
                            out[((bi * channels + ci) * image + y) * image + xx] = src[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([batch, channels, image, image], out)
}

/// Fixed 2-D sin-cos position code, `[g·g, D]`.
pub fn position_embedding<T: Real>(grid: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for pos in [gy, gx] {
                for i in 0..quarter {
                    let w = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push(T::cast((pos as f64 * w).sin()));
                }
                for i in 0..quarter {
                    let w = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push(T::cast((pos as f64 * w).cos()));
                }
            }
        }
    }
    Tensor::new([grid * grid, dim], out).expect("position embedding shape")
}

/// Sinusoidal timestep features, `[B, dim]` as `[cos | sin]`.
pub fn timestep_features<T: Real>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.extend((0..half).map(|i| T::cast((ti * freq(i)).cos())));
        out.extend((0..half).map(|i| T::cast((ti * freq(i)).sin())));
        out.extend((2 * half..dim).map(|_| T::zero()));
    }
    Tensor::new([t.len(), dim], out).expect("timestep feature shape")
}

/// Independently replaces each label by `null` with probability `prob`.
pub fn apply_label_dropout<R: Rng>(labels: &[usize], prob: f64, null: usize, rng: &mut R) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| if rng.random::<f64>() < prob { null } else { l })
        .collect()
}

/// How null labels map onto the routing partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Training: null labels take the unconditional branch and aux losses are on.
    Training,
    /// Guided sampling over a duplicated batch; null labels form the batch mask.
    Guided,
    /// Unguided sampling; every token is conditional.
    Unguided,
}

/// Per-layer k-means centroids for the k-means router variant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterState<T> {
    pub kmeans: Vec<Option<KMeansState<T>>>,
}

impl<T: Real> RouterState<T> {
    pub fn new(depth: usize) -> Self {
        Self {
            kmeans: vec![None; depth],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Prediction in patch layout, `[B·L, p·p·C]`.
    pub pred: Var,
    /// Sum of the per-layer auxiliary losses.
    pub aux: Var,
    /// One entry per block with a routed FFN slot.
    pub routing: Vec<RoutingLog>,
    /// Normalized FFN inputs per block, when requested.
    pub ffn_inputs: Vec<Tensor<f64>>,
}

/// Extra inputs for a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub conditioning: Conditioning,
    /// Superclass labels (classifier router training).
    pub superclass: Option<&'a [usize]>,
    pub record_ffn_inputs: bool,
    /// Seed for lazily initialized k-means centroids.
    pub seed: u64,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            conditioning: Conditioning::Unguided,
            superclass: None,
            record_ffn_inputs: false,
            seed: 0,
        }
    }
}

fn attention<T: Real>(tape: &mut Tape<T>, a: &Attention<Var>, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, w: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[batch, len, heads, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[batch * heads, len, dh])
    };
    let q = split(tape, a.wq)?;
    let k = split(tape, a.wk)?;
    let v = split(tape, a.wv)?;
    let kt = tape.transpose(k)?;
    let s = tape.bmm(q, kt)?;
    let s = tape.scale(s, T::cast(1.0 / (dh as f64).sqrt()));
    let p = tape.softmax(s, 2)?;
    let o = tape.bmm(p, v)?;
    let o = tape.reshape(o, &[batch, heads, len, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[batch * len, d])?;
    let o = tape.matmul(o, a.wo)?;
    tape.add(o, a.bo)
}

/// Runs the denoiser. `x_t` is `[B, C, H, W]`, `t` the (already scaled)
/// timestep per sample, `labels` class ids with `num_classes` as null.
#[allow(clippy::too_many_arguments)]
pub fn denoise<T: Real>(
    tape: &mut Tape<T>,
    model: &MiniDiT<Var>,
    cfg: &MiniDiTConfig,
    state: &mut RouterState<T>,
    x_t: &Tensor<T>,
    t: &[f64],
    labels: &[usize],
    opts: ForwardOptions<'_>,
) -> Result<ModelOutput> {
    let batch = x_t.shape().first().copied().unwrap_or(0);
    let want = [batch, cfg.channels, cfg.image_size, cfg.image_size];
    if x_t.shape() != want || t.len() != batch || labels.len() != batch {
        return Err(Error::shape("denoise", x_t.shape(), &want));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > cfg.null_label()) {
        return Err(Error::Contract(format!("label {bad} exceeds null label {}", cfg.null_label())));
    }
    if state.kmeans.len() != cfg.depth {
        *state = RouterState::new(cfg.depth);
    }
    let (len, d) = (cfg.tokens(), cfg.hidden);
    let n = batch * len;

    let patches = tape.constant(patchify(x_t, cfg.patch_size)?);
    let h = tape.matmul(patches, model.patch_w)?;
    let h = tape.add(h, model.patch_b)?;
    let h = tape.reshape(h, &[batch, len, d])?;
    let pos = tape.constant(position_embedding(cfg.grid(), d));
    let h = tape.add(h, pos)?;

    let tf = tape.constant(timestep_features(t, d));
    let te = tape.matmul(tf, model.time_w1)?;
    let te = tape.add(te, model.time_b1)?;
    let te = tape.gelu(te);
    let te = tape.matmul(te, model.time_w2)?;
    let te = tape.add(te, model.time_b2)?;
    let ce = tape.select_rows(model.class_embed, labels)?;
    let cond = tape.add(te, ce)?;
    let per_token: Vec<usize> = (0..n).map(|i| i / len).collect();
    let cond_tok = tape.select_rows(cond, &per_token)?;
    let h = tape.reshape(h, &[n, d])?;
    let mut h = tape.add(h, cond_tok)?;

    let train = opts.conditioning == Conditioning::Training;
    let (partition, source) = match opts.conditioning {
        Conditioning::Training => (partition_by_condition(labels, cfg.null_label(), len), PartitionSource::Labels),
        Conditioning::Guided => (partition_by_condition(labels, cfg.null_label(), len), PartitionSource::BatchMask),
        Conditioning::Unguided => (TokenPartition::all_conditional(batch, len), PartitionSource::AllConditional),
    };

    let mut aux = tape.constant(Tensor::scalar(T::zero()));
    let mut routing = Vec::new();
    let mut ffn_inputs = Vec::new();
    for (l, block) in model.blocks.iter().enumerate() {
        let a_in = tape.layer_norm(h, 1)?;
        let a = attention(tape, &block.attn, a_in, batch, len, cfg.heads)?;
        h = tape.add(h, a)?;
        let f_in = tape.layer_norm(h, 1)?;
        if opts.record_ffn_inputs {
            ffn_inputs.push(tape.value(f_in).cast());
        }
        let layer: Option<LayerOutput> = match (&block.ffn, &cfg.layer) {
            (FfnParams::Dense(e), LayerKind::Dense) => {
                let y = expert_forward(tape, e, f_in)?;
                h = tape.add(h, y)?;
                None
            }
            (FfnParams::Promoe(p), LayerKind::Promoe(c)) => {
                Some(promoe_forward(tape, f_in, &partition, source, p, c, train)?)
            }
            (FfnParams::TcMoe(p), LayerKind::TcMoe(c)) => Some(tc_moe_forward(tape, f_in, p, c, train)?),
            (FfnParams::Kmeans(pool), LayerKind::KmeansRouter { .. }) => {
                if state.kmeans[l].is_none() {
                    let mut rng = stream(opts.seed, Purpose::KMeansInit, l as u64);
                    state.kmeans[l] = Some(KMeansState::init(&mut rng, tape.value(f_in), pool.standard.len())?);
                }
                let km = state.kmeans[l].as_ref().expect("initialized above");
                Some(kmeans_moe_forward(tape, f_in, pool, km)?)
            }
            (FfnParams::Cls(p), LayerKind::ClsRouter { .. }) => {
                Some(cls_moe_forward(tape, f_in, len, p, opts.superclass, train)?)
            }
            _ => {
                return Err(Error::Config(format!(
                    "block {l} parameters do not match layer kind `{}`",
                    cfg.layer.name()
                )))
            }
        };
        if let Some(out) = layer {
            h = tape.add(h, out.output)?;
            aux = tape.add(aux, out.aux_loss)?;
            routing.push(out.routing);
        }
    }

    let h = tape.layer_norm(h, 1)?;
    let y = tape.matmul(h, model.head_w)?;
    let pred = tape.add(y, model.head_b)?;
    Ok(ModelOutput {
        pred,
        aux,
        routing,
        ffn_inputs,
    })
}

/// Inference convenience: frozen weights, output in image layout.
pub fn predict<T: Real>(
    model: &MiniDiT<Tensor<T>>,
    cfg: &MiniDiTConfig,
    state: &mut RouterState<T>,
    x_t: &Tensor<T>,
    t: &[f64],
    labels: &[usize],
    conditioning: Conditioning,
) -> Result<(Tensor<T>, Vec<RoutingLog>)> {
    let mut tape = Tape::new();
    let bound = crate::params::bind_frozen(model, &mut tape);
    let opts = ForwardOptions {
        conditioning,
        ..Default::default()
    };
    let out = denoise(&mut tape, &bound, cfg, state, x_t, t, labels, opts)?;
    let batch = labels.len();
    let img = unpatchify(tape.value(out.pred), batch, cfg.channels, cfg.image_size, cfg.patch_size)?;
    Ok((img, out.routing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::rng::normal_tensor;

    fn small(layer: LayerKind) -> MiniDiTConfig {
        MiniDiTConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            hidden: 16,
            layer,
            num_classes: 4,
            num_superclasses: 2,
            ..Default::default()
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let x: Tensor<f64> = normal_tensor(&mut stream(1, Purpose::Test, 0), &[2, 3, 8, 8], 1.0);
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.shape(), &[8, 48]);
        assert_eq!(unpatchify(&p, 2, 3, 8, 4).unwrap(), x);
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let cfg = small(LayerKind::Promoe(ProMoeLayerConfig {
            n_experts: 3,
            ..Default::default()
        }));
        let model = MiniDiT::<Tensor<f64>>::init(&cfg, 3).unwrap();
        let x = normal_tensor(&mut stream(3, Purpose::Test, 0), &[2, 1, 8, 8], 1.0);
        let (y, routing) = predict(&model, &cfg, &mut RouterState::new(1), &x, &[10.0, 500.0], &[0, 4], Conditioning::Guided).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), x.shape());
        assert_eq!(routing[0].source, PartitionSource::BatchMask);
        assert_eq!(routing[0].partition.n_uncond(), 4);
    }

    #[test]
    fn batch_equivariance() {
        for layer in [
            LayerKind::Dense,
            LayerKind::Promoe(ProMoeLayerConfig {
                n_experts: 3,
                ..Default::default()
            }),
            LayerKind::TcMoe(TcMoeConfig {
                n_experts: 3,
                ..Default::default()
            }),
        ] {
            let cfg = small(layer);
            let mut model = MiniDiT::<Tensor<f64>>::init(&cfg, 5).unwrap();
            let mut rng = stream(5, Purpose::Test, 1);
            model.head_w = normal_tensor(&mut rng, model.head_w.shape(), 0.1);
            let x = normal_tensor(&mut rng, &[3, 1, 8, 8], 1.0);
            let t = [1.0, 20.0, 300.0];
            let labels = [0, 2, 3];
            let (y, _) = predict(&model, &cfg, &mut RouterState::new(1), &x, &t, &labels, Conditioning::Unguided).unwrap();
            let perm = [2, 0, 1];
            let xp = Tensor::new(
                [3, 1, 8, 8],
                perm.iter().flat_map(|&i| x.data()[i * 64..(i + 1) * 64].to_vec()).collect(),
            )
            .unwrap();
            let (yp, _) = predict(
                &model,
                &cfg,
                &mut RouterState::new(1),
                &xp,
                &perm.map(|i| t[i]),
                &perm.map(|i| labels[i]),
                Conditioning::Unguided,
            )
            .unwrap();
            for (k, &i) in perm.iter().enumerate() {
                for j in 0..64 {
                    assert!((yp.data()[k * 64 + j] - y.data()[i * 64 + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn label_dropout_extremes_and_rate() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 8).collect();
        let mut rng = stream(7, Purpose::LabelDropout, 0);
        assert_eq!(apply_label_dropout(&labels, 0.0, 8, &mut rng), labels);
        assert!(apply_label_dropout(&labels, 1.0, 8, &mut rng).iter().all(|&l| l == 8));
        let d = apply_label_dropout(&labels, 0.1, 8, &mut rng);
        let frac = d.iter().filter(|&&l| l == 8).count() as f64 / 1e4;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn variants_share_expert_init() {
        let pro = small(LayerKind::Promoe(ProMoeLayerConfig {
            n_experts: 3,
            n_uncond: 0,
            ..Default::default()
        }));
        let tc = small(LayerKind::TcMoe(TcMoeConfig {
            n_experts: 3,
            ..Default::default()
        }));
        let a = MiniDiT::<Tensor<f32>>::init(&pro, 11).unwrap();
        let b = MiniDiT::<Tensor<f32>>::init(&tc, 11).unwrap();
        match (&a.blocks[0].ffn, &b.blocks[0].ffn) {
            (FfnParams::Promoe(p), FfnParams::TcMoe(q)) => assert_eq!(p.pool.standard, q.pool.standard),
            _ => unreachable!(),
        }
    }

    #[test]
    fn gradients_reach_embeddings() {
        let cfg = small(LayerKind::Promoe(ProMoeLayerConfig {
            n_experts: 3,
            ..Default::default()
        }));
        let mut model = MiniDiT::<Tensor<f64>>::init(&cfg, 9).unwrap();
        model.head_w = normal_tensor(&mut stream(9, Purpose::Test, 0), model.head_w.shape(), 0.1);
        let mut tape = Tape::new();
        let b = bind(&model, &mut tape);
        let x = normal_tensor(&mut stream(9, Purpose::Test, 1), &[2, 1, 8, 8], 1.0);
        let opts = ForwardOptions {
            conditioning: Conditioning::Training,
            ..Default::default()
        };
        let out = denoise(&mut tape, &b, &cfg, &mut RouterState::new(1), &x, &[5.0, 50.0], &[1, 4], opts).unwrap();
        let l = tape.mean(out.pred);
        let l = tape.add(l, out.aux).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(b.class_embed);
        assert!(g.row(1).iter().any(|&v| v != 0.0));
        assert!(g.row(4).iter().any(|&v| v != 0.0));
        assert!(g.row(0).iter().all(|&v| v == 0.0));
    }
}
