#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vidctl_core::denoiser::{
    Denoiser, DenoiserConfig, DenoiserInput, StSelfAttention, TemporalAttention, TemporalConv,
};
use vidctl_core::diffusion::{loss_video, DiffusionSchedule, LatentBatch, LossNoise};
use vidctl_core::nn::{gradient_check, GradCheck, ParamStore};
use vidctl_core::Result;

pub fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

/// Moves every parameter off its init so zero-initialized paths carry gradient.
pub fn perturb(store: &ParamStore, scale: f64, seed: u64) {
    for (i, (_, var)) in store.select(|_| true).into_iter().enumerate() {
        let noise = randn(var.dims(), seed.wrapping_add(i as u64 * 7919), var.dtype());
        let moved = (var.as_tensor() + (noise * scale).unwrap()).unwrap();
        var.set(&moved).unwrap();
    }
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output entry matters.
pub fn probe(out: &Tensor, seed: u64) -> Result<Tensor> {
    let r = randn(out.dims(), seed, out.dtype());
    Ok((out * r)?.sum_all()?)
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        base_width: 4,
        channel_mult: vec![1, 2],
        attention: vec![false, true],
        heads: 2,
        groups: 2,
        text_dim: 4,
        ..DenoiserConfig::default()
    }
}

pub fn denoiser_input(b: usize, f: usize, hw: usize, dtype: DType, seed: u64) -> DenoiserInput {
    DenoiserInput {
        x: randn(&[b * f, 3, hw, hw], seed, dtype),
        frames: f,
        timesteps: (0..b).map(|i| 137 + 401 * i).collect(),
        context: randn(&[b, 3, 4], seed + 1, dtype),
        control: Some(randn(&[b * f, 1, hw, hw], seed + 2, dtype)),
        cond_flags: (0..b * f).map(|i| i % f == 0).collect(),
        temporal: true,
    }
}

const STEP: f64 = 1e-5;

/// Central-difference checks at f64 for each layer type; `(layer, per-parameter results)`.
pub fn layer_gradient_checks() -> Result<Vec<(&'static str, Vec<GradCheck>)>> {
    let dt = DType::F64;
    let mut out = Vec::new();
    let (frames, ch) = (3, 4);
    let h = randn(&[2 * frames, ch, 3, 3], 1, dt);

    let store = ParamStore::new(dt, 1);
    let layer = TemporalConv::new(&store.root().pp("tconv"), ch)?;
    perturb(&store, 0.3, 2);
    let vars = store.select(|_| true);
    out.push(("temporal conv", gradient_check(&vars, || probe(&layer.forward(&h, frames)?, 3), 24, STEP, 4)?));

    let store = ParamStore::new(dt, 5);
    let layer = TemporalAttention::new(&store.root().pp("tattn"), ch, 2)?;
    perturb(&store, 0.3, 6);
    let vars = store.select(|_| true);
    out.push(("temporal attention", gradient_check(&vars, || probe(&layer.forward(&h, frames)?, 7), 24, STEP, 8)?));

    let store = ParamStore::new(dt, 9);
    let layer = StSelfAttention::new(&store.root().pp("st"), ch, 2, 2)?;
    perturb(&store, 0.3, 10);
    let vars = store.select(|_| true);
    out.push(("ST self-attention", gradient_check(&vars, || probe(&layer.forward(&h, frames)?, 11), 24, STEP, 12)?));

    let store = ParamStore::new(dt, 13);
    let model = Denoiser::new(&store, &tiny_denoiser())?;
    perturb(&store, 0.2, 14);
    let inp = denoiser_input(1, 2, 4, dt, 15);
    let vars = store.select(|n| n.starts_with("control."));
    out.push(("control branch", gradient_check(&vars, || probe(&model.predict_noise(&inp)?, 16), 3, STEP, 17)?));

    let sched = DiffusionSchedule::default();
    let batch = LatentBatch {
        latents: randn(&[2, 3, 4, 4], 18, dt),
        frames: 2,
        context: randn(&[1, 3, 4], 19, dt),
        control: Some(randn(&[2, 1, 4, 4], 20, dt)),
    };
    let noise = LossNoise {
        timesteps: vec![321],
        eps: randn(&[2, 3, 4, 4], 21, dt),
    };
    let vars = store.select(|n| n.contains(".tconv.") || n.starts_with("unet.conv_out") || n == "unet.frame_flag");
    out.push(("video loss", gradient_check(&vars, || loss_video(&model, &batch, &noise, &sched), 4, STEP, 22)?));
    Ok(out)
}
