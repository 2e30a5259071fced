//! Noise schedules, forward noising, timestep sampling, guidance and the
//! two samplers (rectified-flow Euler and respaced DDPM).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{predict, Conditioning, MiniDiT, MiniDiTConfig, RouterState};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::rng::{normal_tensor, standard_normal};
use crate::router::PartitionSource;
use crate::tensor::{Real, Tensor};

pub const DDPM_STEPS: usize = 1000;
pub const DDPM_BETA_START: f64 = 1e-4;
pub const DDPM_BETA_END: f64 = 2e-2;
/// RF times in `[0, 1]` are multiplied by this before the timestep embedding.
pub const RF_TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Discrete variance-preserving schedule; `alpha_bar[t]` for `t < T`.
    Ddpm { betas: Vec<f64>, alpha_bar: Vec<f64> },
    /// Straight path: `α_t = 1 − t`, `σ_t = t`.
    Rf,
}

impl Schedule {
    pub fn ddpm_linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Schedule::Ddpm { betas, alpha_bar }
    }

    pub fn for_objective(kind: Objective) -> Self {
        match kind {
            Objective::Ddpm => Self::ddpm_linear(DDPM_STEPS, DDPM_BETA_START, DDPM_BETA_END),
            Objective::Rf => Schedule::Rf,
        }
    }

    /// `(α_t, σ_t)`; DDPM `t` is an integer index.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        match self {
            Schedule::Rf => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Contract(format!("RF time {t} outside [0, 1]")));
                }
                Ok((1.0 - t, t))
            }
            Schedule::Ddpm { alpha_bar, .. } => {
                let i = t as usize;
                if t < 0.0 || t.fract() != 0.0 || i >= alpha_bar.len() {
                    return Err(Error::Contract(format!(
                        "DDPM step {t} is not an index below {}",
                        alpha_bar.len()
                    )));
                }
                Ok((alpha_bar[i].sqrt(), (1.0 - alpha_bar[i]).sqrt()))
            }
        }
    }

    /// Value fed to the timestep embedding.
    pub fn model_time(&self, t: f64) -> f64 {
        match self {
            Schedule::Rf => t * RF_TIME_SCALE,
            Schedule::Ddpm { .. } => t,
        }
    }
}

/// `α_t·x0 + σ_t·ε` with one `t` per leading-axis sample.
pub fn add_noise<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[f64], schedule: &Schedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("add_noise", x0.shape(), eps.shape()));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(Error::shape("add_noise", x0.shape(), &[t.len()]));
    }
    let per = x0.numel().checked_div(b).unwrap_or(0);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let (a, s) = schedule.alpha_sigma(ti)?;
        let (a, s) = (T::cast(a), T::cast(s));
        let r = i * per..(i + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| a * x + s * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    Uniform,
    /// `sigmoid(n)`, `n ~ N(0, 1)`.
    #[default]
    LogitNormal,
}

pub fn sample_timesteps<R: Rng>(kind: TimestepSampling, batch: usize, rng: &mut R) -> Vec<f64> {
    (0..batch)
        .map(|_| match kind {
            TimestepSampling::Uniform => rng.random::<f64>(),
            TimestepSampling::LogitNormal => 1.0 / (1.0 + (-standard_normal(rng)).exp()),
        })
        .collect()
}

/// Training times for `schedule`: continuous for RF, uniform indices for DDPM.
pub fn sample_training_times<R: Rng>(
    schedule: &Schedule,
    kind: TimestepSampling,
    batch: usize,
    rng: &mut R,
) -> Vec<f64> {
    match schedule {
        Schedule::Rf => sample_timesteps(kind, batch, rng),
        Schedule::Ddpm { alpha_bar, .. } => (0..batch)
            .map(|_| rng.random_range(0..alpha_bar.len()) as f64)
            .collect(),
    }
}

/// `uncond + w·(cond − uncond)`.
pub fn cfg_combine<T: Real>(cond: &Tensor<T>, uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape("cfg_combine", cond.shape(), uncond.shape()));
    }
    let w = T::cast(w);
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| u + w * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Ancestral noise scale for DDPM (1 = ancestral, 0 = deterministic).
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 1.5,
            eta: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.cfg_scale >= 0.0) || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "sampler needs steps ≥ 1, w ≥ 0 and η ∈ [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A network queried by the samplers; output has the input's shape.
pub trait Denoiser<T: Real> {
    fn predict(&mut self, x: &Tensor<T>, t_model: &[f64], labels: &[usize], cond: Conditioning) -> Result<Tensor<T>>;

    fn null_label(&self) -> usize;
}

/// Prediction with classifier-free guidance. For `w ≠ 1` the batch is
/// duplicated with null labels and evaluated in one guided forward.
pub fn guided_predict<T: Real, D: Denoiser<T>>(
    model: &mut D,
    x: &Tensor<T>,
    t_model: f64,
    labels: &[usize],
    w: f64,
) -> Result<Tensor<T>> {
    let b = labels.len();
    if w == 1.0 {
        return model.predict(x, &vec![t_model; b], labels, Conditioning::Unguided);
    }
    let both = Tensor::concat_rows(&[x, x])?;
    let mut lab = labels.to_vec();
    lab.extend(std::iter::repeat_n(model.null_label(), b));
    let out = model.predict(&both, &vec![t_model; 2 * b], &lab, Conditioning::Guided)?;
    let per = x.numel() / b.max(1);
    let cond = Tensor::new(x.shape().to_vec(), out.data()[..b * per].to_vec())?;
    let uncond = Tensor::new(x.shape().to_vec(), out.data()[b * per..].to_vec())?;
    cfg_combine(&cond, &uncond, w)
}

/// Euler integration of the learned velocity from `t = 1` to `t = 0`.
pub fn rf_euler_sample<T: Real, D: Denoiser<T>>(
    model: &mut D,
    x1: Tensor<T>,
    labels: &[usize],
    steps: usize,
    w: f64,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let mut x = x1;
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = guided_predict(model, &x, t * RF_TIME_SCALE, labels, w)?;
        let step = T::cast(dt);
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = *xi - step * vi;
        }
    }
    Ok(x)
}

/// Evenly respaced indices from `T − 1` down to 0.
pub fn respaced_steps(total: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![total - 1];
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| ((total - 1) as f64 * (1.0 - i as f64 / (steps - 1) as f64)).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Respaced DDPM sampling with ε-prediction. `eta = 1` gives ancestral
/// sampling with the posterior variance; `eta = 0` is deterministic.
pub fn ddpm_sample<T: Real, D: Denoiser<T>, R: Rng>(
    model: &mut D,
    schedule: &Schedule,
    x_t: Tensor<T>,
    labels: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let Schedule::Ddpm { alpha_bar, .. } = schedule else {
        return Err(Error::Config("ddpm_sample needs a DDPM schedule".into()));
    };
    let ts = respaced_steps(alpha_bar.len(), cfg.steps.min(alpha_bar.len()));
    let mut x = x_t;
    for (i, &t) in ts.iter().enumerate() {
        let ab = alpha_bar[t];
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| alpha_bar[p]);
        let eps = guided_predict(model, &x, t as f64, labels, cfg.cfg_scale)?;
        let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
        let sigma = cfg.eta * var.max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (xi, &e) in x.data_mut().iter_mut().zip(eps.data()) {
            let (xv, ev) = (xi.as_f64(), e.as_f64());
            let x0 = (xv - s1a * ev) / sa;
            let noise = if sigma > 0.0 { sigma * standard_normal(rng) } else { 0.0 };
            *xi = T::cast(ab_prev.sqrt() * x0 + dir * ev + noise);
        }
    }
    Ok(x)
}

/// [`Denoiser`] over a stored MiniDiT, recording every partition source.
pub struct ModelDenoiser<'a, T: Real> {
    pub model: &'a MiniDiT<Tensor<T>>,
    pub cfg: &'a MiniDiTConfig,
    pub state: RouterState<T>,
    pub sources: Vec<PartitionSource>,
    /// Unconditional-token counts seen per routed forward.
    pub uncond_tokens: Vec<usize>,
}

impl<'a, T: Real> ModelDenoiser<'a, T> {
    pub fn new(model: &'a MiniDiT<Tensor<T>>, cfg: &'a MiniDiTConfig, state: RouterState<T>) -> Self {
        Self {
            model,
            cfg,
            state,
            sources: Vec::new(),
            uncond_tokens: Vec::new(),
        }
    }
}

impl<T: Real> Denoiser<T> for ModelDenoiser<'_, T> {
    fn predict(&mut self, x: &Tensor<T>, t_model: &[f64], labels: &[usize], cond: Conditioning) -> Result<Tensor<T>> {
        let (y, routing) = predict(self.model, self.cfg, &mut self.state, x, t_model, labels, cond)?;
        for r in routing.iter().take(1) {
            self.sources.push(r.source);
            self.uncond_tokens.push(r.partition.n_uncond());
        }
        Ok(y)
    }

    fn null_label(&self) -> usize {
        self.cfg.null_label()
    }
}

/// Standard-normal starting noise for `n` samples of `shape`.
pub fn initial_noise<T: Real, R: Rng>(rng: &mut R, n: usize, sample_shape: &[usize]) -> Tensor<T> {
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    normal_tensor(rng, &shape, 1.0)
}
