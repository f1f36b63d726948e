//! Forward process, noise-prediction losses, classifier-free guidance and the
//! deterministic DDIM sampler.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};

/// Linear β schedule with a uniform DDIM timestep subsequence. Timesteps run
/// `1..=T`; `ᾱ_0` is 1 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub sampling_steps: usize,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sampling_steps: 20,
        }
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn new(c: &ScheduleConfig) -> Result<Self> {
        let bad = |key: &str, reason: String| Error::Config {
            key: format!("schedule.{key}"),
            reason,
        };
        if c.timesteps < 2 {
            return Err(bad("timesteps", format!("{} < 2", c.timesteps)));
        }
        if !(0.0 < c.beta_start && c.beta_start < c.beta_end && c.beta_end < 1.0) {
            return Err(bad("beta_end", format!("need 0 < {} < {} < 1", c.beta_start, c.beta_end)));
        }
        if c.sampling_steps == 0 || c.sampling_steps > c.timesteps {
            return Err(bad("sampling_steps", format!("{} not in 1..={}", c.sampling_steps, c.timesteps)));
        }
        let t = c.timesteps;
        let betas: Vec<f64> = (0..t)
            .map(|i| c.beta_start + (c.beta_end - c.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(t + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            timesteps: t,
            sampling_steps: c.sampling_steps,
            betas,
            alphas_cumprod,
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::arg("t", format!("{t} outside 1..={}", self.timesteps)));
        }
        Ok(())
    }

    /// DDIM timesteps from `T` downward, `S` of them, evenly spaced.
    pub fn ddim_timesteps(&self) -> Vec<usize> {
        let s = self.sampling_steps;
        (1..=s).rev().map(|k| k * self.timesteps / s).collect()
    }

    /// `(t, t_prev)` pairs walked by the sampler; the last `t_prev` is 0.
    pub fn ddim_pairs(&self) -> Vec<(usize, usize)> {
        let ts = self.ddim_timesteps();
        ts.iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if z0.dims() != eps.dims() {
            return Err(Error::shape("noise", format!("{:?}", z0.dims()), format!("{:?}", eps.dims())));
        }
        let ab = self.alpha_bar(t);
        Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// One step of the Markov chain: `√(1−β_t)·z_{t−1} + √β_t·ε`.
    pub fn forward_step(&self, z_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let b = self.beta(t);
        Ok(((z_prev * (1.0 - b).sqrt())? + (eps * b.sqrt())?)?)
    }
}

/// Anything that predicts noise for a [`DenoiserInput`].
pub trait NoisePredictor {
    fn predict(&self, inp: &DenoiserInput) -> Result<Tensor>;

    /// Frame-by-frame prediction; the default splits the call into
    /// single-frame videos without first-frame conditioning.
    fn predict_independent(&self, inp: &DenoiserInput) -> Result<Tensor> {
        let n = inp.x.dim(0)?;
        let f = inp.frames;
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let b = i / f;
            let single = DenoiserInput {
                x: inp.x.narrow(0, i, 1)?,
                frames: 1,
                timesteps: vec![inp.timesteps[b]],
                context: inp.context.narrow(0, b, 1)?,
                control: inp.control.as_ref().map(|c| c.narrow(0, i, 1)).transpose()?,
                cond_flags: vec![false],
                temporal: inp.temporal,
            };
            outs.push(self.predict(&single)?);
        }
        Ok(Tensor::cat(&outs, 0)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, inp: &DenoiserInput) -> Result<Tensor> {
        self.predict_noise(inp)
    }

    fn predict_independent(&self, inp: &DenoiserInput) -> Result<Tensor> {
        self.predict_noise_independent(inp)
    }
}

/// Clean latents with their conditioning for one loss evaluation.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// `[B·F, C_z, h, w]`.
    pub latents: Tensor,
    pub frames: usize,
    /// `[B, L_txt, C_txt]`.
    pub context: Tensor,
    pub control: Option<Tensor>,
}

impl LatentBatch {
    pub fn videos(&self) -> usize {
        self.latents.dim(0).unwrap_or(0) / self.frames.max(1)
    }
}

/// The random part of a loss sample: one `t` per video and the target noise.
#[derive(Debug, Clone)]
pub struct LossNoise {
    pub timesteps: Vec<usize>,
    /// `[B·F, C_z, h, w]`.
    pub eps: Tensor,
}

fn per_row(values: &[f64], dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), dev)?.to_dtype(dtype)?)
}

fn check_loss_inputs(batch: &LatentBatch, noise: &LossNoise, sched: &DiffusionSchedule) -> Result<()> {
    if noise.eps.dims() != batch.latents.dims() {
        return Err(Error::shape(
            "loss noise",
            format!("{:?}", batch.latents.dims()),
            format!("{:?}", noise.eps.dims()),
        ));
    }
    if noise.timesteps.len() != batch.videos() {
        return Err(Error::shape("loss timesteps", batch.videos(), noise.timesteps.len()));
    }
    for &t in &noise.timesteps {
        sched.check_t(t)?;
    }
    Ok(())
}

/// Video loss: frame 0 of each video stays clean and flagged, frames `1..F`
/// are noised with the shared `t`; squared error over frames `1..F` only.
pub fn loss_video(
    model: &dyn NoisePredictor,
    batch: &LatentBatch,
    noise: &LossNoise,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let f = batch.frames;
    if f < 2 {
        return Err(Error::arg("frames", format!("video loss needs F >= 2, got {f}; use loss_image")));
    }
    check_loss_inputs(batch, noise, sched)?;
    let z0 = &batch.latents;
    let n = z0.dim(0)?;
    let mut a = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let ab = sched.alpha_bar(noise.timesteps[i / f]);
        if i % f == 0 {
            a.push(1.0);
            s.push(0.0);
        } else {
            a.push(ab.sqrt());
            s.push((1.0 - ab).sqrt());
        }
    }
    let dev = z0.device();
    let x = (z0.broadcast_mul(&per_row(&a, z0.dtype(), dev)?)? + noise.eps.broadcast_mul(&per_row(&s, z0.dtype(), dev)?)?)?;
    let inp = DenoiserInput {
        x,
        frames: f,
        timesteps: noise.timesteps.clone(),
        context: batch.context.clone(),
        control: batch.control.clone(),
        cond_flags: (0..n).map(|i| i % f == 0).collect(),
        temporal: true,
    };
    let pred = model.predict(&inp)?;
    let keep: Vec<u32> = (0..n as u32).filter(|i| i % f as u32 != 0).collect();
    let keep = Tensor::new(keep.as_slice(), dev)?;
    let diff = (pred.index_select(&keep, 0)? - noise.eps.index_select(&keep, 0)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// Single-frame loss without first-frame conditioning.
pub fn loss_image(
    model: &dyn NoisePredictor,
    batch: &LatentBatch,
    noise: &LossNoise,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    if batch.frames != 1 {
        return Err(Error::arg("frames", format!("image loss needs F = 1, got {}", batch.frames)));
    }
    check_loss_inputs(batch, noise, sched)?;
    let z0 = &batch.latents;
    let dev = z0.device();
    let ab: Vec<f64> = noise.timesteps.iter().map(|&t| sched.alpha_bar(t)).collect();
    let a: Vec<f64> = ab.iter().map(|v| v.sqrt()).collect();
    let s: Vec<f64> = ab.iter().map(|v| (1.0 - v).sqrt()).collect();
    let x = (z0.broadcast_mul(&per_row(&a, z0.dtype(), dev)?)? + noise.eps.broadcast_mul(&per_row(&s, z0.dtype(), dev)?)?)?;
    let n = z0.dim(0)?;
    let inp = DenoiserInput {
        x,
        frames: 1,
        timesteps: noise.timesteps.clone(),
        context: batch.context.clone(),
        control: batch.control.clone(),
        cond_flags: vec![false; n],
        temporal: true,
    };
    let pred = model.predict(&inp)?;
    Ok((pred - &noise.eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    TextOnly,
    #[default]
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// ω_t.
    pub text_scale: f64,
    /// ω_v.
    pub video_scale: f64,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            text_scale: 10.0,
            video_scale: 1.5,
            mode: GuidanceMode::Dual,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("text_scale", self.text_scale), ("video_scale", self.video_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("guidance.{key}"),
                    reason: format!("{v} is not a finite non-negative scale"),
                });
            }
        }
        Ok(())
    }
}

/// `ε_null + ω_t (ε_cond − ε_null)`, evaluated as `(1 − ω_t) ε_null + ω_t ε_cond`
/// so ω_t = 0 and ω_t = 1 return an input exactly.
pub fn guidance_text(eps_cond: &Tensor, eps_null: &Tensor, w_t: f64) -> Result<Tensor> {
    Ok(((eps_null * (1.0 - w_t))? + (eps_cond * w_t)?)?)
}

/// `ε_I + ω_v (ε_null − ε_I) + ω_t (ε_cond − ε_null)`, evaluated with one
/// coefficient per prediction; at ω_v = 1 this equals [`guidance_text`] exactly.
pub fn guidance_dual(eps_i: &Tensor, eps_null: &Tensor, eps_cond: &Tensor, w_v: f64, w_t: f64) -> Result<Tensor> {
    let i = (eps_i * (1.0 - w_v))?;
    let null = (eps_null * (w_v - w_t))?;
    let cond = (eps_cond * w_t)?;
    Ok(((i + null)? + cond)?)
}

/// η = 0 DDIM update given `ᾱ_t` and `ᾱ_{t_prev}` directly.
pub fn ddim_update(z_t: &Tensor, eps: &Tensor, ab_t: f64, ab_prev: f64) -> Result<Tensor> {
    let z0 = ((z_t - (eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
    Ok(((z0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

pub fn ddim_step(z_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::arg("t_prev", format!("{t_prev} is not below t = {t}")));
    }
    sched.check_t(t)?;
    if t_prev == 0 {
        // ᾱ_0 = 1: return the predicted clean latent itself.
        let ab = sched.alpha_bar(t);
        return Ok(((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?);
    }
    ddim_update(z_t, eps, sched.alpha_bar(t), sched.alpha_bar(t_prev))
}

/// [`ddim_step`] with the predicted clean latent clamped to `[-bound, bound]`
/// and the noise estimate re-derived from the clamped value.
pub fn ddim_step_clipped(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
    bound: f64,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::arg("t_prev", format!("{t_prev} is not below t = {t}")));
    }
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let z0 = ((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-bound, bound)?;
    if t_prev == 0 {
        return Ok(z0);
    }
    let eps = ((z_t - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
    let ab_prev = sched.alpha_bar(t_prev);
    Ok(((z0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

/// Conditioning for one sampled video.
#[derive(Debug, Clone)]
pub struct SamplerInputs {
    /// `[1, L_txt, C_txt]`.
    pub context: Tensor,
    pub null_context: Tensor,
    /// `[F, C_ctl, H, W]`.
    pub control: Option<Tensor>,
    /// Clean latent `[1, C_z, h, w]` held fixed at frame 0.
    pub first_frame: Option<Tensor>,
    /// Clamp each step's predicted clean latent to `[-b, b]` when set.
    pub x0_bound: Option<f64>,
}

fn replace_first(x: &Tensor, first: &Tensor) -> Result<Tensor> {
    let f = x.dim(0)?;
    if f == 1 {
        return Ok(first.clone());
    }
    Ok(Tensor::cat(&[first, &x.narrow(0, 1, f - 1)?], 0)?)
}

/// Guided noise estimate at one step.
pub fn guided_noise(
    model: &dyn NoisePredictor,
    x: &Tensor,
    t: usize,
    inputs: &SamplerInputs,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    let f = x.dim(0)?;
    let conditioned = inputs.first_frame.is_some();
    let make = |context: &Tensor| DenoiserInput {
        x: x.clone(),
        frames: f,
        timesteps: vec![t],
        context: context.clone(),
        control: inputs.control.clone(),
        cond_flags: (0..f).map(|i| conditioned && i == 0).collect(),
        temporal: true,
    };
    let cond_in = make(&inputs.context);
    let null_in = make(&inputs.null_context);
    let eps_cond = model.predict(&cond_in)?;
    let eps_null = model.predict(&null_in)?;
    match guidance.mode {
        GuidanceMode::TextOnly => guidance_text(&eps_cond, &eps_null, guidance.text_scale),
        GuidanceMode::Dual => {
            let eps_i = model.predict_independent(&null_in)?;
            guidance_dual(&eps_i, &eps_null, &eps_cond, guidance.video_scale, guidance.text_scale)
        }
    }
}

/// Runs the S-step DDIM chain from `noise` (`[F, C_z, h, w]`). With a first
/// frame, frame 0 is held at the clean latent throughout and returned as is.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    noise: &Tensor,
    inputs: &SamplerInputs,
    guidance: &GuidanceConfig,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    guidance.validate()?;
    let f = noise.dim(0)?;
    if let Some(ctl) = &inputs.control {
        if ctl.dim(0)? != f {
            return Err(Error::shape("control frames", f, ctl.dim(0)?));
        }
    }
    let mut x = noise.clone();
    if let Some(first) = &inputs.first_frame {
        x = replace_first(&x, &first.to_dtype(x.dtype())?)?;
    }
    for (step, (t, t_prev)) in sched.ddim_pairs().into_iter().enumerate() {
        let eps = guided_noise(model, &x, t, inputs, guidance)?;
        x = match inputs.x0_bound {
            Some(b) => ddim_step_clipped(&x, &eps, t, t_prev, sched, b)?,
            None => ddim_step(&x, &eps, t, t_prev, sched)?,
        };
        if let Some(first) = &inputs.first_frame {
            x = replace_first(&x, &first.to_dtype(x.dtype())?)?;
        }
        if !crate::nn::all_finite(&x)? {
            return Err(Error::NonFinite(format!("sampler state after step {step} (t = {t})")));
        }
    }
    Ok(x)
}

/// Denoisers with known behaviour, for exercising the engine without a trained model.
pub mod stubs {
    use super::*;

    /// Returns the exact noise that maps the planted `z0` to the current `x_t`.
    pub struct PlantedEpsilon {
        pub z0: Tensor,
        pub schedule: DiffusionSchedule,
    }

    impl NoisePredictor for PlantedEpsilon {
        fn predict(&self, inp: &DenoiserInput) -> Result<Tensor> {
            let f = inp.frames;
            let n = inp.x.dim(0)?;
            let mut a = Vec::with_capacity(n);
            let mut s = Vec::with_capacity(n);
            for i in 0..n {
                let ab = self.schedule.alpha_bar(inp.timesteps[i / f]);
                a.push(ab.sqrt());
                s.push(1.0 / (1.0 - ab).sqrt());
            }
            let dev = inp.x.device();
            let dt = inp.x.dtype();
            let z0 = self.z0.to_dtype(dt)?;
            let diff = (&inp.x - z0.broadcast_mul(&per_row(&a, dt, dev)?)?)?;
            Ok(diff.broadcast_mul(&per_row(&s, dt, dev)?)?)
        }

        // Elementwise in the frames, so the joint answer is already per-frame.
        fn predict_independent(&self, inp: &DenoiserInput) -> Result<Tensor> {
            self.predict(inp)
        }
    }

    /// Always returns the same tensor.
    pub struct Constant(pub Tensor);

    impl NoisePredictor for Constant {
        fn predict(&self, _inp: &DenoiserInput) -> Result<Tensor> {
            Ok(self.0.clone())
        }

        fn predict_independent(&self, _inp: &DenoiserInput) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }
}
