//! Forward noising, noise-prediction losses, classifier-free guidance with
//! a power-cosine scale, and a deterministic DDIM sampler.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Result, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("{steps} sampling steps exceed the {max} schedule steps")]
    Steps { steps: usize, max: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid guidance parameters: {0}")]
    Guidance(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-step variances and their cumulative products. `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `betas[t-1]` is β_t.
    pub betas: Vec<f64>,
    /// `alpha_bar[t]` for `t ∈ 0..=T`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> std::result::Result<Self, DiffusionError> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!("need T ≥ 1 and 0 < {beta_start} ≤ {beta_end} < 1")));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().expect("seeded with 1");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { steps, betas, alpha_bar })
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    fn check(&self, t: usize) -> std::result::Result<(), DiffusionError> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::Timestep { t, max: self.steps });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }
}

/// `y_t = √ᾱ_t·y₀ + √(1−ᾱ_t)·ε`.
pub fn forward_noise<E: Element>(
    y0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> std::result::Result<Tensor<E>, DiffusionError> {
    sched.check(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (E::lit(ab.sqrt()), E::lit((1.0 - ab).sqrt()));
    Ok(y0.zip_map(eps, |y, e| a * y + b * e)?)
}

/// Mean squared error between a prediction and the sampled noise.
pub fn noise_mse<'g, E: Element>(pred: Var<'g, E>, eps: &Tensor<E>) -> Result<Var<'g, E>> {
    if pred.shape() != eps.shape() {
        return Err(TensorError::Shape { op: "noise_mse", lhs: pred.shape(), rhs: eps.shape().to_vec() });
    }
    let d = pred.sub(pred.graph().constant(eps.clone()))?;
    Ok(d.mul(d)?.mean())
}

/// Same as [`noise_mse`] restricted to the given token rows.
pub fn noise_mse_rows<'g, E: Element>(pred: Var<'g, E>, eps: &Tensor<E>, rows: &[usize]) -> Result<Var<'g, E>> {
    if rows.is_empty() {
        return noise_mse(pred, eps);
    }
    let g = pred.graph();
    let target = g.constant(eps.clone()).gather_rows(rows)?;
    let d = pred.gather_rows(rows)?.sub(target)?;
    Ok(d.mul(d)?.mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Unconditional and full-condition predictions: 2 forwards per step.
    Standard,
    /// Adds a pose-only prediction: 3 forwards per step.
    Disentangled,
}

impl FromStr for GuidanceMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "cfg" => Ok(Self::Standard),
            "disentangled" | "d-cfg" => Ok(Self::Disentangled),
            _ => Err(format!("unknown guidance mode {s:?} (expected standard or disentangled)")),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Disentangled => "disentangled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceParams {
    /// Base scale γ.
    pub gamma: f64,
    /// Power-cosine exponent α.
    pub alpha: f64,
    /// Training-time probability of replacing the condition with zeros.
    pub eta: f64,
    pub mode: GuidanceMode,
    /// Scale of the pose-over-unconditional term in disentangled mode.
    pub pose_gamma: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 1.0, eta: 0.1, mode: GuidanceMode::Standard, pose_gamma: 2.0 }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> std::result::Result<(), DiffusionError> {
        if !(self.gamma >= 0.0 && self.pose_gamma >= 0.0 && self.alpha > 0.0 && (0.0..=1.0).contains(&self.eta)) {
            return Err(DiffusionError::Guidance(format!(
                "need γ ≥ 0, α > 0 and 0 ≤ η ≤ 1 (got γ={}, α={}, η={})",
                self.gamma, self.alpha, self.eta
            )));
        }
        Ok(())
    }

    /// Named α presets: `cosine` (α = 1) and `flat` (α = 0.01).
    pub fn alpha_preset(name: &str) -> Option<f64> {
        match name {
            "cosine" => Some(1.0),
            "flat" => Some(0.01),
            _ => None,
        }
    }
}

/// `γ_t = (1 − cos(π·(t/T)^α)) / 2 · γ`.
pub fn guidance_scale(t: usize, total: usize, gamma: f64, alpha: f64) -> f64 {
    let x = (t as f64 / total as f64).powf(alpha);
    (1.0 - (std::f64::consts::PI * x).cos()) / 2.0 * gamma
}

/// Which condition a noise prediction is made under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Unconditional,
    PoseOnly,
    Full,
}

/// Anything that predicts noise for a latent at a timestep.
pub trait NoisePredictor<E: Element> {
    fn predict(&self, y: &Tensor<E>, t: usize, branch: Branch) -> Result<Tensor<E>>;
}

/// Wraps a predictor and counts its evaluations.
pub struct Counted<'a, P: ?Sized> {
    inner: &'a P,
    calls: Cell<usize>,
}

impl<'a, P: ?Sized> Counted<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<E: Element, P: NoisePredictor<E> + ?Sized> NoisePredictor<E> for Counted<'_, P> {
    fn predict(&self, y: &Tensor<E>, t: usize, branch: Branch) -> Result<Tensor<E>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(y, t, branch)
    }
}

/// Combines two noise predictions as `γ·cond + (1 − γ)·uncond`.
pub fn combine<E: Element>(cond: &Tensor<E>, uncond: &Tensor<E>, gamma: f64) -> Result<Tensor<E>> {
    if gamma == 1.0 {
        return Ok(cond.clone());
    }
    if gamma == 0.0 {
        return Ok(uncond.clone());
    }
    let (g, og) = (E::lit(gamma), E::lit(1.0 - gamma));
    cond.zip_map(uncond, |c, u| g * c + og * u)
}

/// Guided noise estimate at timestep `t`. Standard mode evaluates the
/// model twice; disentangled mode three times and returns
/// `ε_u + γᵖ_t(ε_pose − ε_u) + γ_t(ε_full − ε_pose)`.
pub fn cfg_noise<E: Element, P: NoisePredictor<E> + ?Sized>(
    model: &P,
    y: &Tensor<E>,
    t: usize,
    total: usize,
    gp: &GuidanceParams,
) -> Result<Tensor<E>> {
    let g_full = guidance_scale(t, total, gp.gamma, gp.alpha);
    let uncond = model.predict(y, t, Branch::Unconditional)?;
    let full = model.predict(y, t, Branch::Full)?;
    match gp.mode {
        GuidanceMode::Standard => combine(&full, &uncond, g_full),
        GuidanceMode::Disentangled => {
            let pose = model.predict(y, t, Branch::PoseOnly)?;
            let g_pose = E::lit(guidance_scale(t, total, gp.pose_gamma, gp.alpha));
            let g_full = E::lit(g_full);
            let mut out = uncond.clone();
            for (((o, &u), &p), &f) in out.data_mut().iter_mut().zip(uncond.data()).zip(pose.data()).zip(full.data()) {
                *o = u + g_pose * (p - u) + g_full * (f - p);
            }
            Ok(out)
        }
    }
}

/// Result of a sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport<E> {
    pub sample: Tensor<E>,
    pub forwards: usize,
    pub steps: usize,
    pub mode: GuidanceMode,
}

impl<E> SampleReport<E> {
    /// `key=value` lines for the bench and sample commands.
    pub fn summary(&self) -> String {
        format!("steps={}\nmode={}\nforwards={}\n", self.steps, self.mode, self.forwards)
    }
}

/// Evenly spaced timesteps `T/steps, 2T/steps, …, T`, highest first.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| (i * total) / steps).collect()
}

/// Deterministic DDIM from `y_T ~ N(0, I)` drawn with `seed`.
pub fn ddim_sample<E: Element, P: NoisePredictor<E> + ?Sized>(
    model: &P,
    shape: &[usize],
    steps: usize,
    sched: &NoiseSchedule,
    gp: &GuidanceParams,
    seed: u64,
) -> std::result::Result<SampleReport<E>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::randn(shape.to_vec(), &mut rng);
    ddim_from(model, start, steps, sched, gp)
}

/// DDIM starting from a given `y_T`.
pub fn ddim_from<E: Element, P: NoisePredictor<E> + ?Sized>(
    model: &P,
    start: Tensor<E>,
    steps: usize,
    sched: &NoiseSchedule,
    gp: &GuidanceParams,
) -> std::result::Result<SampleReport<E>, DiffusionError> {
    if steps == 0 || steps > sched.steps {
        return Err(DiffusionError::Steps { steps, max: sched.steps });
    }
    gp.validate()?;
    let counted = Counted::new(model);
    let ts = ddim_timesteps(sched.steps, steps);
    let mut y = start;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = cfg_noise(&counted, &y, t, sched.steps, gp)?;
        let (a, ap) = (sched.alpha_bar[t], sched.alpha_bar[prev]);
        let (sa, s1a) = (E::lit(a.sqrt()), E::lit((1.0 - a).sqrt()));
        let (sap, s1ap) = (E::lit(ap.sqrt()), E::lit((1.0 - ap).sqrt()));
        y = y.zip_map(&eps, |yv, e| {
            let x0 = (yv - s1a * e) / sa;
            sap * x0 + s1ap * e
        })?;
    }
    Ok(SampleReport { sample: y, forwards: counted.calls(), steps, mode: gp.mode })
}

/// The exact noise predictor for data distributed as `N(mean, std²)` in
/// every coordinate: `E[ε | y_t] = √(1−ᾱ)(y − √ᾱ·μ) / (ᾱσ² + 1 − ᾱ)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianOracle {
    /// Slope and offset of the prediction, `ε = k·y + m`.
    pub fn affine(&self, t: usize) -> (f64, f64) {
        let a = self.schedule.alpha_bar[t];
        let denom = a * self.std * self.std + 1.0 - a;
        let k = (1.0 - a).sqrt() / denom;
        (k, -k * a.sqrt() * self.mean)
    }

    /// Mean and standard deviation of DDIM output started from `N(0, 1)`,
    /// obtained by pushing the affine update through exactly.
    pub fn ddim_output_moments(&self, steps: usize) -> (f64, f64) {
        let ts = ddim_timesteps(self.schedule.steps, steps);
        let (mut m, mut v) = (0.0, 1.0);
        for (i, &t) in ts.iter().enumerate() {
            let prev = ts.get(i + 1).copied().unwrap_or(0);
            let (k, off) = self.affine(t);
            let (a, ap) = (self.schedule.alpha_bar[t], self.schedule.alpha_bar[prev]);
            // y' = c_y·y + c_e·ε with ε = k·y + off
            let c_y = (ap / a).sqrt();
            let c_e = (1.0 - ap).sqrt() - (ap * (1.0 - a) / a).sqrt();
            let slope = c_y + c_e * k;
            m = slope * m + c_e * off;
            v *= slope * slope;
        }
        (m, v.sqrt())
    }
}

impl<E: Element> NoisePredictor<E> for GaussianOracle {
    fn predict(&self, y: &Tensor<E>, t: usize, _branch: Branch) -> Result<Tensor<E>> {
        let (k, m) = self.affine(t);
        let (k, m) = (E::lit(k), E::lit(m));
        Ok(y.map(|v| k * v + m))
    }
}
