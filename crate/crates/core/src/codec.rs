//! Per-frame latent encoder/decoder: an exact pixel-space bypass and a small
//! learned convolutional autoencoder.

use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{array4_to_tensor, silu, tensor_to_array4, Conv2d, ParamStore};

pub const PIXEL_CODEC_ID: &str = "pixel";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    #[default]
    Pixel,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    /// Spatial downsampling factor in learned mode (power of two).
    pub downsample: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the penalty pulling latents toward zero mean and unit variance.
    pub latent_regularizer: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecMode::Pixel,
            downsample: 4,
            latent_channels: 4,
            hidden: 32,
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            latent_regularizer: 1e-2,
        }
    }
}

impl CodecConfig {
    pub fn learned() -> Self {
        Self {
            mode: CodecMode::Learned,
            ..Self::default()
        }
    }
}

/// Latents `[F, C_z, H/d, W/d]` (f64, so the pixel map inverts exactly) tagged
/// with the codec that produced them.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub z: Tensor,
    pub codec_id: String,
}

#[derive(Clone)]
pub struct LearnedCodec {
    store: ParamStore,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    config: CodecConfig,
    id: String,
}

impl std::fmt::Debug for LearnedCodec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearnedCodec")
            .field("config", &self.config)
            .field("id", &self.id)
            .finish()
    }
}

impl LearnedCodec {
    pub fn new(config: &CodecConfig, seed: u64) -> Result<Self> {
        let d = config.downsample;
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::Config {
                key: "codec.downsample".into(),
                reason: format!("{d} is not a power of two"),
            });
        }
        let store = ParamStore::new(DType::F32, seed);
        let root = store.root().pp("codec");
        let hd = config.hidden;
        let levels = d.trailing_zeros() as usize;
        let mut encoder = vec![Conv2d::new(&root.pp("enc.0"), 3, hd, 3, 1)?];
        for i in 0..levels {
            encoder.push(Conv2d::new(&root.pp(format!("enc.{}", i + 1)), hd, hd, 3, 2)?);
        }
        encoder.push(Conv2d::new(&root.pp(format!("enc.{}", levels + 1)), hd, config.latent_channels, 1, 1)?);
        let mut decoder = vec![Conv2d::new(&root.pp("dec.0"), config.latent_channels, hd, 1, 1)?];
        for i in 0..levels {
            decoder.push(Conv2d::new(&root.pp(format!("dec.{}", i + 1)), hd, hd, 3, 1)?);
        }
        decoder.push(Conv2d::new(&root.pp(format!("dec.{}", levels + 1)), hd, 3, 3, 1)?);
        let mut codec = Self {
            store,
            encoder,
            decoder,
            config: config.clone(),
            id: String::new(),
        };
        codec.refresh_id()?;
        Ok(codec)
    }

    fn refresh_id(&mut self) -> Result<()> {
        self.id = format!("learned-{}", &self.store.content_hash()?[..16]);
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn encode_raw(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let n = self.encoder.len();
        let mut h = x.affine(2.0, -1.0)?;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < n {
                h = silu(&h)?;
            }
        }
        Ok(h)
    }

    fn decode_raw(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let n = self.decoder.len();
        let mut h = z.clone();
        for (i, conv) in self.decoder.iter().enumerate() {
            if i > 0 && i + 1 < n {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            }
            h = conv.forward(&h)?;
            if i + 1 < n {
                h = silu(&h)?;
            }
        }
        // Decoder output lives in [-1, 1] like the pixel map.
        h.affine(0.5, 0.5)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join("codec.safetensors"))?;
        let manifest = CodecManifest::of(&Codec::Learned(self.clone()))?;
        let path = dir.join("codec.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecManifest {
    pub mode: CodecMode,
    pub downsample: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub content_hash: String,
}

impl CodecManifest {
    pub fn of(codec: &Codec) -> Result<Self> {
        Ok(match codec {
            Codec::Pixel => Self {
                mode: CodecMode::Pixel,
                downsample: 1,
                latent_channels: 3,
                hidden: 0,
                content_hash: PIXEL_CODEC_ID.into(),
            },
            Codec::Learned(c) => Self {
                mode: CodecMode::Learned,
                downsample: c.config.downsample,
                latent_channels: c.config.latent_channels,
                hidden: c.config.hidden,
                content_hash: c.store.content_hash()?,
            },
        })
    }
}

/// The latent codec in use. Everything above this type sees only
/// `encode`/`decode`, so diffusion code is identical under both modes.
#[derive(Debug, Clone)]
pub enum Codec {
    Pixel,
    Learned(LearnedCodec),
}

impl Codec {
    pub fn id(&self) -> String {
        match self {
            Codec::Pixel => PIXEL_CODEC_ID.into(),
            Codec::Learned(c) => c.id.clone(),
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::Pixel => 1,
            Codec::Learned(c) => c.config.downsample,
        }
    }

    /// Known range `[-b, b]` of clean latents; pixel latents are `2x - 1`.
    pub fn latent_bound(&self) -> Option<f64> {
        match self {
            Codec::Pixel => Some(1.0),
            Codec::Learned(_) => None,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Pixel => 3,
            Codec::Learned(c) => c.config.latent_channels,
        }
    }

    fn check_frames(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 {
            return Err(Error::shape("frames rank", 4, dims.len()));
        }
        if dims[1] != 3 {
            return Err(Error::shape("frames channel dimension", 3, dims[1]));
        }
        let d = self.factor();
        if dims[2] % d != 0 {
            return Err(Error::shape("frames height", format!("multiple of {d}"), dims[2]));
        }
        if dims[3] % d != 0 {
            return Err(Error::shape("frames width", format!("multiple of {d}"), dims[3]));
        }
        Ok(())
    }

    /// `[N, 3, H, W]` in `[0, 1]` → `[N, C_z, H/d, W/d]`, frame by frame.
    pub fn encode_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_frames(frames.dims())?;
        Ok(match self {
            Codec::Pixel => frames.affine(2.0, -1.0)?,
            Codec::Learned(c) => {
                let dt = frames.dtype();
                c.encode_raw(&frames.to_dtype(DType::F32)?)?.to_dtype(dt)?
            }
        })
    }

    /// Inverse of [`encode_tensor`]; output clamped to `[0, 1]`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let dims = z.dims();
        if dims.len() != 4 || dims[1] != self.latent_channels() {
            return Err(Error::shape(
                "latent channels",
                self.latent_channels(),
                format!("{dims:?}"),
            ));
        }
        Ok(match self {
            Codec::Pixel => z.affine(0.5, 0.5)?.clamp(0.0, 1.0)?,
            Codec::Learned(c) => {
                let dt = z.dtype();
                c.decode_raw(&z.to_dtype(DType::F32)?)?.clamp(0.0, 1.0)?.to_dtype(dt)?
            }
        })
    }

    pub fn encode(&self, frames: &Array4<f32>) -> Result<LatentSequence> {
        let dims = frames.shape().to_vec();
        self.check_frames(&dims)?;
        let t = array4_to_tensor(frames, DType::F64, &candle_core::Device::Cpu)?;
        Ok(LatentSequence {
            z: self.encode_tensor(&t)?,
            codec_id: self.id(),
        })
    }

    pub fn decode(&self, latents: &LatentSequence) -> Result<Array4<f32>> {
        if latents.codec_id != self.id() {
            return Err(Error::CodecMismatch {
                produced_by: latents.codec_id.clone(),
                decoder: self.id(),
            });
        }
        tensor_to_array4(&self.decode_tensor(&latents.z)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Codec::Pixel => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("codec.json");
                let manifest = CodecManifest::of(self)?;
                std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
                    .map_err(|e| Error::io(&path, e))
            }
            Codec::Learned(c) => c.save(dir),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("codec.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CodecManifest = serde_json::from_str(&text)?;
        match manifest.mode {
            CodecMode::Pixel => Ok(Codec::Pixel),
            CodecMode::Learned => {
                let config = CodecConfig {
                    mode: CodecMode::Learned,
                    downsample: manifest.downsample,
                    latent_channels: manifest.latent_channels,
                    hidden: manifest.hidden,
                    ..CodecConfig::default()
                };
                let mut codec = LearnedCodec::new(&config, 0)?;
                codec.store.load(&dir.join("codec.safetensors"))?;
                let hash = codec.store.content_hash()?;
                if hash != manifest.content_hash {
                    return Err(Error::Checkpoint(format!(
                        "codec content hash {hash} does not match manifest {}",
                        manifest.content_hash
                    )));
                }
                codec.refresh_id()?;
                Ok(Codec::Learned(codec))
            }
        }
    }
}

/// Result of [`train_codec`]: the codec and per-step losses.
#[derive(Debug, Clone)]
pub struct TrainedCodec {
    pub codec: Codec,
    pub losses: Vec<f64>,
    /// Mean loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a learned codec by mean squared reconstruction error plus the latent
/// moment penalty. `frames` is `[N, 3, H, W]`. When the loss goes non-finite,
/// the last good parameters are restored (and written to `checkpoint_dir` when
/// given) and training aborts.
pub fn train_codec(
    frames: &Array4<f32>,
    config: &CodecConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedCodec> {
    if config.mode != CodecMode::Learned {
        return Err(Error::Config {
            key: "codec.mode".into(),
            reason: "only learned codecs are trained".into(),
        });
    }
    let n = frames.shape()[0];
    if n == 0 {
        return Err(Error::arg("dataset", "empty"));
    }
    let mut codec = LearnedCodec::new(config, seed)?;
    let data = array4_to_tensor(frames, DType::F32, &candle_core::Device::Cpu)?;
    Codec::Learned(codec.clone()).check_frames(data.dims())?;
    let vars: Vec<_> = codec.store.select(|_| true).into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0dec);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut last_good = codec.store.tensors();
    let bs = config.batch_size.max(1);
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(bs) {
            let idx = Tensor::new(chunk, data.device())?;
            let x = data.index_select(&idx, 0)?;
            let z = codec.encode_raw(&x)?;
            let recon = codec.decode_raw(&z)?;
            let mse = (recon - &x)?.sqr()?.mean_all()?;
            let mean = z.mean_all()?;
            let var = z.broadcast_sub(&mean)?.sqr()?.mean_all()?;
            let reg = ((var - 1.0)?.sqr()? + mean.sqr()?)?;
            let loss = (mse + (reg * config.latent_regularizer)?)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                codec.store.assign(&last_good)?;
                codec.refresh_id()?;
                if let Some(dir) = checkpoint_dir {
                    codec.save(dir)?;
                }
                return Err(Error::Diverged {
                    step,
                    reason: format!("codec loss {value}"),
                });
            }
            opt.backward_step(&loss)?;
            losses.push(value);
            sum += value;
            count += 1;
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
        last_good = codec.store.tensors();
    }
    codec.refresh_id()?;
    if let Some(dir) = checkpoint_dir {
        codec.save(dir)?;
    }
    Ok(TrainedCodec {
        codec: Codec::Learned(codec),
        losses,
        epoch_losses,
    })
}

/// Mean absolute reconstruction error of `decode(encode(frames))`.
pub fn reconstruction_mae(codec: &Codec, frames: &Array4<f32>) -> Result<f64> {
    let recon = codec.decode(&codec.encode(frames)?)?;
    let n = frames.len() as f64;
    Ok(recon
        .iter()
        .zip(frames.iter())
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum::<f64>()
        / n)
}
