//! Model assembly, checkpoints, two-phase joint image/video training, and
//! first-frame, video and auto-regressive long-video sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{concatenate, s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{train_codec, Codec, CodecConfig, CodecManifest, CodecMode};
use crate::conditioning::{TextEncoder, Vocabulary, DEFAULT_MAX_LEN};
use crate::data::{io::scene_dirs, io::read_sample, ControlKind, VideoSample};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{
    ddim_sample, loss_image, loss_video, DiffusionSchedule, GuidanceConfig, GuidanceMode, LatentBatch, LossNoise,
    NoisePredictor, SamplerInputs, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::nn::{array4_to_tensor, sha256_hex, tensor_to_array4, Adam, AdamConfig, ParamStore};
use crate::noise_init::{fresh_noise, init_noise, InitialNoise};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `latent_channels` and `control_downsample` are overwritten from the codec.
    pub denoiser: DenoiserConfig,
    pub max_caption_len: usize,
    pub control: ControlKind,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            max_caption_len: DEFAULT_MAX_LEN,
            control: ControlKind::Depth,
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Parameters and components of one trained or fresh model.
pub struct VideoModel {
    config: ModelConfig,
    store: ParamStore,
    denoiser: Denoiser,
    text: TextEncoder,
    codec: Codec,
    schedule: DiffusionSchedule,
}

impl VideoModel {
    pub fn new(config: &ModelConfig, codec: Codec, seed: u64) -> Result<Self> {
        Self::with_vocab(config, codec, Vocabulary::caption_grammar(config.max_caption_len), seed)
    }

    pub fn with_vocab(config: &ModelConfig, codec: Codec, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.denoiser.latent_channels = codec.latent_channels();
        config.denoiser.control_downsample = codec.factor();
        config.max_caption_len = vocab.max_len;
        let schedule = DiffusionSchedule::new(&config.schedule)?;
        let store = ParamStore::new(DType::F32, seed);
        let text = TextEncoder::new(&store.root().pp("text"), vocab, config.denoiser.text_dim)?;
        let denoiser = Denoiser::new(&store, &config.denoiser)?;
        Ok(Self {
            config,
            store,
            denoiser,
            text,
            codec,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn text(&self) -> &TextEncoder {
        &self.text
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn sampler(&self) -> Sampler<'_> {
        Sampler {
            predictor: &self.denoiser,
            codec: &self.codec,
            text: &self.text,
            schedule: self.schedule.clone(),
        }
    }

    /// Writes `params.safetensors`, `vocab.json`, `codec/` and `model.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<CheckpointManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params = self.store.save(&dir.join("params.safetensors"))?;
        let vocab_path = dir.join("vocab.json");
        std::fs::write(&vocab_path, self.text.vocab().to_json()?).map_err(|e| Error::io(&vocab_path, e))?;
        self.codec.save(&dir.join("codec"))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            vocab_hash: self.text.vocab().hash()?,
            codec: CodecManifest::of(&self.codec)?,
            codec_id: self.codec.id(),
            params_sha256: sha256_hex(&params),
        };
        write_json(&dir.join("model.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join("model.json"))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
        let vocab_hash = vocab.hash()?;
        if vocab_hash != manifest.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash {vocab_hash} does not match manifest {}",
                manifest.vocab_hash
            )));
        }
        let codec = Codec::load(&dir.join("codec"))?;
        if codec.id() != manifest.codec_id {
            return Err(Error::Checkpoint(format!(
                "codec {} does not match manifest {}",
                codec.id(),
                manifest.codec_id
            )));
        }
        let path = dir.join("params.safetensors");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let hash = sha256_hex(&bytes);
        if hash != manifest.params_sha256 {
            return Err(Error::Checkpoint(format!(
                "parameter archive hash {hash} does not match manifest {}",
                manifest.params_sha256
            )));
        }
        let model = Self::with_vocab(&manifest.config, codec, vocab, 0)?;
        model.store.load_bytes(&bytes)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub codec: CodecManifest,
    pub codec_id: String,
    pub params_sha256: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Which parameters the video phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Temporal layers, control injections and the first-frame embedding.
    #[default]
    Temporal,
    All,
}

fn is_temporal(name: &str) -> bool {
    name.contains(".tconv.") || name.contains(".tattn.") || name == "unet.frame_flag"
}

impl TrainableSet {
    pub fn contains(self, name: &str) -> bool {
        match self {
            TrainableSet::All => true,
            TrainableSet::Temporal => is_temporal(name) || name.starts_with("control.inject."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub codec: CodecConfig,
    /// Video vs image batch odds during the video phase.
    pub video_ratio: u32,
    pub image_ratio: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Image-only steps training every non-temporal parameter.
    pub pretrain_steps: usize,
    /// Joint image/video steps on the trainable set.
    pub steps: usize,
    pub frames: usize,
    pub seed: u64,
    pub trainable: TrainableSet,
    /// Residual-initialized training noise; plain i.i.d. noise when false.
    pub residual_noise: bool,
    pub noise_threshold: f32,
    /// Probability of replacing a caption by the null prompt.
    pub caption_dropout: f64,
    pub checkpoint_every: usize,
    pub loss_ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            codec: CodecConfig::default(),
            video_ratio: 8,
            image_ratio: 2,
            batch_size: 16,
            learning_rate: 1e-5,
            pretrain_steps: 10_000,
            steps: 10_000,
            frames: 8,
            seed: 0,
            trainable: TrainableSet::Temporal,
            residual_noise: true,
            noise_threshold: crate::noise_init::DEFAULT_THRESHOLD,
            caption_dropout: 0.1,
            checkpoint_every: 1000,
            loss_ema: 0.98,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config {
            key: key.to_string(),
            reason,
        };
        if self.video_ratio == 0 && self.image_ratio == 0 {
            return Err(bad("video_ratio", "video and image ratios are both zero".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", format!("{} is not a positive rate", self.learning_rate)));
        }
        if self.frames < 2 {
            return Err(bad("frames", format!("{} < 2", self.frames)));
        }
        if !(0.0..=1.0).contains(&self.noise_threshold) {
            return Err(bad("noise_threshold", format!("{} outside [0, 1]", self.noise_threshold)));
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(bad("caption_dropout", format!("{} outside [0, 1]", self.caption_dropout)));
        }
        if !(0.0..1.0).contains(&self.loss_ema) {
            return Err(bad("loss_ema", format!("{} outside [0, 1)", self.loss_ema)));
        }
        self.model.denoiser.validate()?;
        DiffusionSchedule::new(&self.model.schedule)?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.steps
    }
}

/// Training clips held in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let videos = scene_dirs(root)?
            .iter()
            .map(|d| read_sample(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { videos })
    }

    pub fn frame_hw(&self) -> Option<(usize, usize)> {
        self.videos.first().map(|v| (v.frames.shape()[2], v.frames.shape()[3]))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th independent stream derived from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Image,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub kind: BatchKind,
    pub loss: f64,
    pub ema: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    step: usize,
    ema: Option<f64>,
    log: Vec<StepLog>,
}

/// Stepwise trainer; every step's randomness derives from `(seed, step)`, so a
/// resumed run repeats the uninterrupted one.
pub struct Trainer {
    model: VideoModel,
    config: TrainConfig,
    dataset: Dataset,
    opt: Adam,
    step: usize,
    ema: Option<f64>,
    log: Vec<StepLog>,
    last_good: BTreeMap<String, Tensor>,
}

impl Trainer {
    pub fn new(model: VideoModel, config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let usable = dataset.videos.iter().filter(|v| v.num_frames() >= config.frames).count();
        if dataset.videos.is_empty() {
            return Err(Error::arg("dataset", "no clips for the image split"));
        }
        if config.video_ratio > 0 && config.steps > 0 && usable == 0 {
            return Err(Error::arg("dataset", format!("no clips with at least {} frames for the video split", config.frames)));
        }
        let mut model = model;
        model.denoiser.set_check_finite(false);
        let opt = Self::optimizer(&model, &config, 0)?;
        let last_good = model.store.tensors();
        Ok(Self {
            model,
            config,
            dataset,
            opt,
            step: 0,
            ema: None,
            log: Vec::new(),
            last_good,
        })
    }

    fn optimizer(model: &VideoModel, config: &TrainConfig, step: usize) -> Result<Adam> {
        let vars = if step < config.pretrain_steps {
            model.store.select(|n| !is_temporal(n))
        } else {
            let set = config.trainable;
            model.store.select(|n| set.contains(n))
        };
        Adam::new(
            vars,
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
        )
    }

    pub fn model(&self) -> &VideoModel {
        &self.model
    }

    pub fn into_model(self) -> VideoModel {
        let mut m = self.model;
        m.denoiser.set_check_finite(true);
        m
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.opt.names().map(String::from).collect()
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    fn caption_tokens(&self, caption: &str, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let vocab = self.model.text.vocab();
        if rng.random::<f64>() < self.config.caption_dropout {
            vocab.null_tokens()
        } else {
            vocab.tokenize(caption)
        }
    }

    fn context(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let ctx = tokens
            .iter()
            .map(|t| Ok(self.model.text.embed(t)?.tensor))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ctx, 0)?)
    }

    fn draw_batch(&self, kind: BatchKind, rng: &mut ChaCha8Rng) -> Result<(LatentBatch, LossNoise)> {
        let f = match kind {
            BatchKind::Video => self.config.frames,
            BatchKind::Image => 1,
        };
        let pool: Vec<&VideoSample> = self.dataset.videos.iter().filter(|v| v.num_frames() >= f).collect();
        let codec = &self.model.codec;
        let (cz, factor) = (codec.latent_channels(), codec.factor());
        let kind_ctl = self.model.config.control;
        let mut frames = Vec::new();
        let mut controls = Vec::new();
        let mut tokens = Vec::new();
        let mut eps = Vec::new();
        let mut ts = Vec::new();
        for _ in 0..self.config.batch_size {
            let clip = pool[rng.random_range(0..pool.len())];
            let start = rng.random_range(0..=clip.num_frames() - f);
            let window = clip.frames.slice(s![start..start + f, .., .., ..]);
            frames.push(window.to_owned());
            controls.push(kind_ctl.select(clip).slice(s![start..start + f, .., .., ..]).to_owned());
            tokens.push(self.caption_tokens(&clip.caption, rng));
            ts.push(rng.random_range(1..=self.model.schedule.timesteps));
            let seed = rng.random::<u64>();
            let (_, _, h, w) = window.dim();
            let noise = if kind == BatchKind::Video && self.config.residual_noise {
                init_noise(window, self.config.noise_threshold, seed, cz, factor)?.noise
            } else {
                fresh_noise(f, cz, h / factor, w / factor, seed)
            };
            eps.push(noise);
        }
        let stack = |xs: &[Array4<f32>]| -> Result<Tensor> {
            let views: Vec<_> = xs.iter().map(|a| a.view()).collect();
            array4_to_tensor(&concatenate(Axis(0), &views).expect("equal shapes"), DType::F32, &Device::Cpu)
        };
        let latents = codec.encode_tensor(&stack(&frames)?)?.detach();
        Ok((
            LatentBatch {
                latents,
                frames: f,
                context: self.context(&tokens)?,
                control: Some(stack(&controls)?),
            },
            LossNoise {
                timesteps: ts,
                eps: stack(&eps)?,
            },
        ))
    }

    fn batch_kind(&self, rng: &mut ChaCha8Rng) -> BatchKind {
        if self.step < self.config.pretrain_steps {
            return BatchKind::Image;
        }
        let (v, i) = (self.config.video_ratio, self.config.image_ratio);
        if rng.random_range(0..v + i) < v {
            BatchKind::Video
        } else {
            BatchKind::Image
        }
    }

    /// Runs one optimization step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        if self.step == self.config.pretrain_steps && self.step > 0 {
            self.opt = Self::optimizer(&self.model, &self.config, self.step)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.step as u64));
        let kind = self.batch_kind(&mut rng);
        let (batch, noise) = self.draw_batch(kind, &mut rng)?;
        let model: &dyn NoisePredictor = &self.model.denoiser;
        let loss = match kind {
            BatchKind::Video => loss_video(model, &batch, &noise, &self.model.schedule)?,
            BatchKind::Image => loss_image(model, &batch, &noise, &self.model.schedule)?,
        };
        let value = f64::from(loss.to_scalar::<f32>()?);
        if !value.is_finite() {
            self.model.store.assign(&self.last_good)?;
            return Err(Error::Diverged {
                step: self.step,
                reason: format!("loss {value}; parameters restored to the last checkpoint"),
            });
        }
        self.opt.backward_step(&loss)?;
        let a = self.config.loss_ema;
        let ema = match self.ema {
            None => value,
            Some(e) => a * e + (1.0 - a) * value,
        };
        self.ema = Some(ema);
        let entry = StepLog {
            step: self.step,
            kind,
            loss: value,
            ema,
        };
        self.log.push(entry);
        self.step += 1;
        Ok(entry)
    }

    /// Trains to the end (or `until` steps total), checkpointing under `dir`.
    pub fn run(&mut self, until: Option<usize>, dir: Option<&Path>) -> Result<()> {
        let end = until.unwrap_or(self.config.total_steps()).min(self.config.total_steps());
        while self.step < end {
            let entry = match self.train_step() {
                Ok(e) => e,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(d) = dir {
                        self.save(d)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if entry.step % 50 == 0 {
                log::info!("step {} {:?} loss {:.5} ema {:.5}", entry.step, entry.kind, entry.loss, entry.ema);
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                self.last_good = self.model.store.tensors();
                if let Some(d) = dir {
                    self.save(d)?;
                }
            }
        }
        self.last_good = self.model.store.tensors();
        if let Some(d) = dir {
            self.save(d)?;
        }
        Ok(())
    }

    /// Model checkpoint plus optimizer moments and trainer state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save_checkpoint(dir)?;
        let path = dir.join("optimizer.safetensors");
        std::fs::write(&path, self.opt.state_bytes()?).map_err(|e| Error::io(&path, e))?;
        write_json(
            &dir.join("trainer.json"),
            &TrainerState {
                config: self.config.clone(),
                step: self.step,
                ema: self.ema,
                log: self.log.clone(),
            },
        )
    }

    pub fn resume(dir: &Path, dataset: Dataset) -> Result<Self> {
        let state: TrainerState = read_json(&dir.join("trainer.json"))?;
        let model = VideoModel::load_checkpoint(dir)?;
        let mut t = Self::new(model, state.config, dataset)?;
        t.opt = Self::optimizer(&t.model, &t.config, state.step)?;
        let path = dir.join("optimizer.safetensors");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let opt_step = if state.step > t.config.pretrain_steps {
            state.step - t.config.pretrain_steps
        } else if state.step == t.config.pretrain_steps && state.step > 0 {
            // Phase boundary: the video-phase optimizer has not stepped yet.
            0
        } else {
            state.step
        };
        if opt_step > 0 {
            t.opt.load_state(&bytes, opt_step)?;
        }
        t.step = state.step;
        t.ema = state.ema;
        t.log = state.log;
        Ok(t)
    }
}

/// Trains a codec (learned mode) and then the model, from scratch.
pub fn train(config: &TrainConfig, dataset: Dataset, dir: Option<&Path>) -> Result<Trainer> {
    config.validate()?;
    if dataset.videos.is_empty() {
        return Err(Error::arg("dataset", "empty"));
    }
    let codec = match config.codec.mode {
        CodecMode::Pixel => Codec::Pixel,
        CodecMode::Learned => {
            let views: Vec<_> = dataset.videos.iter().map(|v| v.frames.view()).collect();
            let all = concatenate(Axis(0), &views).map_err(|e| Error::arg("dataset", e.to_string()))?;
            let codec_dir: Option<PathBuf> = dir.map(|d| d.join("codec"));
            train_codec(&all, &config.codec, derive_seed(config.seed, u64::MAX), codec_dir.as_deref())?.codec
        }
    };
    let model = VideoModel::new(&config.model, codec, config.seed)?;
    let mut trainer = Trainer::new(model, config.clone(), dataset)?;
    trainer.run(None, dir)?;
    Ok(trainer)
}

/// Where the residual masks of a video sample come from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    /// Control maps replicated to three channels.
    Controls,
    /// A source RGB clip `[F, 3, H, W]` aligned with the controls.
    Video(Array4<f32>),
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub caption: String,
    /// `[N, C_ctl, H, W]`; `N = K·(F−1) + 1` for `K` iterations.
    pub controls: Array4<f32>,
    pub threshold: f32,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub iterations: usize,
    pub frames_per_iteration: usize,
    /// User-supplied first frame `[3, H, W]`, bypassing first-frame sampling.
    pub first_frame: Option<Array3<f32>>,
    pub mask_source: MaskSource,
}

impl SampleRequest {
    pub fn new(caption: &str, controls: Array4<f32>, seed: u64) -> Self {
        let n = controls.shape()[0];
        Self {
            caption: caption.to_string(),
            controls,
            threshold: crate::noise_init::DEFAULT_THRESHOLD,
            guidance: GuidanceConfig::default(),
            seed,
            iterations: 1,
            frames_per_iteration: n,
            first_frame: None,
            mask_source: MaskSource::Controls,
        }
    }

    pub fn required_controls(&self) -> usize {
        self.iterations * (self.frames_per_iteration - 1) + 1
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::arg("iterations", "must be at least 1"));
        }
        if self.frames_per_iteration < 2 {
            return Err(Error::arg("frames_per_iteration", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::arg("threshold", format!("{} outside [0, 1]", self.threshold)));
        }
        let n = self.controls.shape()[0];
        if n < self.required_controls() {
            return Err(Error::arg(
                "controls",
                format!(
                    "{n} control maps for {} iterations of {} frames; need {}",
                    self.iterations,
                    self.frames_per_iteration,
                    self.required_controls()
                ),
            ));
        }
        if let MaskSource::Video(v) = &self.mask_source {
            if v.shape()[0] < self.required_controls() {
                return Err(Error::arg("source video", format!("{} frames, need {}", v.shape()[0], self.required_controls())));
            }
        }
        self.guidance.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FirstFrame {
    pub pixels: Array3<f32>,
    pub latent: Tensor,
}

#[derive(Debug, Clone)]
pub struct SampledVideo {
    /// `[F, 3, H, W]`; frame 0 is the conditioning frame, unchanged.
    pub frames: Array4<f32>,
    pub noise: InitialNoise,
}

#[derive(Debug, Clone)]
pub struct LongVideo {
    pub frames: Array4<f32>,
    pub first_frame: Array3<f32>,
    pub iterations: Vec<SampledVideo>,
}

/// Everything sampling needs; the predictor may be a stub.
pub struct Sampler<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub codec: &'a Codec,
    pub text: &'a TextEncoder,
    pub schedule: DiffusionSchedule,
}

fn controls_as_rgb(controls: ArrayView4<f32>) -> Array4<f32> {
    let c = controls.shape()[1];
    if c == 3 {
        return controls.to_owned();
    }
    let first = controls.slice(s![.., 0..1, .., ..]);
    concatenate(Axis(1), &[first, first, first]).expect("equal shapes")
}

impl Sampler<'_> {
    fn contexts(&self, caption: &str) -> Result<(Tensor, Tensor)> {
        Ok((
            self.text.embed_caption(caption)?.tensor.unsqueeze(0)?,
            self.text.null_context()?.tensor.unsqueeze(0)?,
        ))
    }

    fn latent_grid(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let d = self.codec.factor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape("control map size", format!("multiple of {d}"), format!("{h}x{w}")));
        }
        Ok((self.codec.latent_channels(), h / d, w / d))
    }

    /// Samples frame 0 from single-frame noise with text-only guidance.
    pub fn first_frame(&self, caption: &str, control: ArrayView3<f32>, text_scale: f64, seed: u64) -> Result<FirstFrame> {
        let (_, h, w) = control.dim();
        let (cz, lh, lw) = self.latent_grid(h, w)?;
        let noise = array4_to_tensor(&fresh_noise(1, cz, lh, lw, seed), DType::F32, &Device::Cpu)?;
        let (context, null_context) = self.contexts(caption)?;
        let ctl = control.insert_axis(Axis(0)).to_owned();
        let inputs = SamplerInputs {
            context,
            null_context,
            control: Some(array4_to_tensor(&ctl, DType::F32, &Device::Cpu)?),
            first_frame: None,
            x0_bound: self.codec.latent_bound(),
        };
        let guidance = GuidanceConfig {
            text_scale,
            mode: GuidanceMode::TextOnly,
            ..GuidanceConfig::default()
        };
        let z = ddim_sample(self.predictor, &noise, &inputs, &guidance, &self.schedule)?;
        let pixels = tensor_to_array4(&self.codec.decode_tensor(&z)?)?;
        Ok(FirstFrame {
            pixels: pixels.index_axis(Axis(0), 0).to_owned(),
            latent: z,
        })
    }

    /// Samples frames `1..F` conditioned on `first_frame` (`[3, H, W]`).
    pub fn video(
        &self,
        caption: &str,
        controls: ArrayView4<f32>,
        first_frame: ArrayView3<f32>,
        mask_video: ArrayView4<f32>,
        threshold: f32,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<SampledVideo> {
        let (f, _, h, w) = controls.dim();
        if mask_video.shape()[0] != f {
            return Err(Error::shape("mask source frames", f, mask_video.shape()[0]));
        }
        if first_frame.dim() != (3, h, w) {
            return Err(Error::shape("first frame", format!("(3, {h}, {w})"), format!("{:?}", first_frame.dim())));
        }
        let (cz, _, _) = self.latent_grid(h, w)?;
        let noise = init_noise(mask_video, threshold, seed, cz, self.codec.factor())?;
        let x = array4_to_tensor(&noise.noise, DType::F32, &Device::Cpu)?;
        let first = array4_to_tensor(&first_frame.insert_axis(Axis(0)).to_owned(), DType::F32, &Device::Cpu)?;
        let z_first = self.codec.encode_tensor(&first)?;
        let (context, null_context) = self.contexts(caption)?;
        let inputs = SamplerInputs {
            context,
            null_context,
            control: Some(array4_to_tensor(&controls.to_owned(), DType::F32, &Device::Cpu)?),
            first_frame: Some(z_first),
            x0_bound: self.codec.latent_bound(),
        };
        let z = ddim_sample(self.predictor, &x, &inputs, guidance, &self.schedule)?;
        let rest = tensor_to_array4(&self.codec.decode_tensor(&z.narrow(0, 1, f - 1)?)?)?;
        let frames = concatenate(Axis(0), &[first_frame.insert_axis(Axis(0)), rest.view()]).expect("equal shapes");
        Ok(SampledVideo { frames, noise })
    }

    /// Chains `iterations` videos; each starts from the previous one's last frame.
    pub fn long(&self, req: &SampleRequest) -> Result<LongVideo> {
        req.validate()?;
        let f = req.frames_per_iteration;
        let rgb_controls = controls_as_rgb(req.controls.view());
        let first_frame = match &req.first_frame {
            Some(img) => img.clone(),
            None => {
                self.first_frame(
                    &req.caption,
                    req.controls.index_axis(Axis(0), 0),
                    req.guidance.text_scale,
                    iteration_seed(req.seed, 0),
                )?
                .pixels
            }
        };
        let mut iterations: Vec<SampledVideo> = Vec::with_capacity(req.iterations);
        let mut current = first_frame.clone();
        for k in 0..req.iterations {
            let start = k * (f - 1);
            let ctl = req.controls.slice(s![start..start + f, .., .., ..]);
            let mask_video = match &req.mask_source {
                MaskSource::Controls => rgb_controls.slice(s![start..start + f, .., .., ..]),
                MaskSource::Video(v) => v.slice(s![start..start + f, .., .., ..]),
            };
            let v = self.video(
                &req.caption,
                ctl,
                current.view(),
                mask_video,
                req.threshold,
                &req.guidance,
                iteration_seed(req.seed, k),
            )?;
            current = v.frames.index_axis(Axis(0), f - 1).to_owned();
            iterations.push(v);
        }
        let mut parts = vec![iterations[0].frames.view()];
        for it in &iterations[1..] {
            parts.push(it.frames.slice(s![1.., .., .., ..]));
        }
        let frames = concatenate(Axis(0), &parts).expect("equal shapes");
        Ok(LongVideo {
            frames,
            first_frame,
            iterations,
        })
    }
}

/// Noise seed of iteration `k`; iteration 0 uses the request seed itself.
pub fn iteration_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        derive_seed(seed, k as u64)
    }
}

/// Flicker of one threshold setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f32,
    pub flicker: f64,
    /// Every frame's initial noise equals frame 0's.
    pub noise_identical: bool,
    /// Mean over frames `1..` of cells copied from the previous frame.
    pub copied_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ThresholdAblation {
    pub results: Vec<ThresholdResult>,
    /// `[F, 3, H, W]` per threshold, same order as `results`.
    pub videos: Vec<Array4<f32>>,
}

/// Samples `scene` once per threshold with the same seed and first frame.
/// Masks come from the scene's own frames; flicker is measured on the
/// scene's static region.
pub fn ablate_threshold(
    sampler: &Sampler<'_>,
    scene: &VideoSample,
    control: ControlKind,
    thresholds: &[f32],
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<ThresholdAblation> {
    if thresholds.is_empty() {
        return Err(Error::arg("thresholds", "empty"));
    }
    let static_mask = crate::metrics::scene_static_mask(scene)?;
    let controls = control.select(scene);
    let first = sampler.first_frame(&scene.caption, controls.index_axis(Axis(0), 0), guidance.text_scale, seed)?;
    let mut results = Vec::with_capacity(thresholds.len());
    let mut videos = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let v = sampler.video(
            &scene.caption,
            controls.view(),
            first.pixels.view(),
            scene.frames.view(),
            threshold,
            guidance,
            seed,
        )?;
        let n = &v.noise.noise;
        let noise_identical = (1..n.shape()[0]).all(|i| n.index_axis(Axis(0), i) == n.index_axis(Axis(0), 0));
        results.push(ThresholdResult {
            threshold,
            flicker: crate::metrics::flicker(v.frames.view(), &static_mask)?,
            noise_identical,
            copied_fraction: {
                let c = v.noise.stats().copied_fraction;
                c[1..].iter().sum::<f64>() / (c.len() - 1) as f64
            },
        });
        videos.push(v.frames);
    }
    Ok(ThresholdAblation { results, videos })
}

/// Tiles videos into one image: one row per video, one column per frame.
pub fn frame_grid(videos: &[Array4<f32>]) -> Result<Array3<f32>> {
    let first = videos.first().ok_or_else(|| Error::arg("videos", "empty"))?;
    let (f, c, h, w) = first.dim();
    let mut grid = Array3::<f32>::ones((c, videos.len() * h, f * w));
    for (r, v) in videos.iter().enumerate() {
        if v.dim() != (f, c, h, w) {
            return Err(Error::shape("grid video", format!("{:?}", (f, c, h, w)), format!("{:?}", v.dim())));
        }
        for i in 0..f {
            grid.slice_mut(s![.., r * h..(r + 1) * h, i * w..(i + 1) * w])
                .assign(&v.index_axis(Axis(0), i));
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSampler, SceneSpec};
    use crate::denoiser::DenoiserInput;
    use crate::diffusion::stubs::PlantedEpsilon;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            denoiser: DenoiserConfig {
                base_width: 8,
                channel_mult: vec![1, 2],
                attention: vec![false, true],
                heads: 2,
                groups: 4,
                text_dim: 8,
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig {
                sampling_steps: 4,
                ..ScheduleConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: tiny_model_config(),
            batch_size: 2,
            learning_rate: 1e-3,
            pretrain_steps: 3,
            steps: 5,
            frames: 4,
            checkpoint_every: 4,
            ..TrainConfig::default()
        }
    }

    fn dataset(n: usize) -> Dataset {
        let sampler = SceneSampler::new(4, 8, 8);
        Dataset {
            videos: (0..n)
                .map(|i| generate_scene(&SceneSpec::sample(&sampler, i as u64)).unwrap())
                .collect(),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let model = VideoModel::new(&tiny_model_config(), Codec::Pixel, 3).unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        model.save_checkpoint(&a).unwrap();
        let loaded = VideoModel::load_checkpoint(&a).unwrap();
        loaded.save_checkpoint(&b).unwrap();
        for f in ["params.safetensors", "model.json", "vocab.json", "codec/codec.json"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn wrong_vocabulary_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let model = VideoModel::new(&tiny_model_config(), Codec::Pixel, 3).unwrap();
        model.save_checkpoint(tmp.path()).unwrap();
        let mut vocab = model.text().vocab().clone();
        vocab.tokens.push("zebra".into());
        std::fs::write(tmp.path().join("vocab.json"), vocab.to_json().unwrap()).unwrap();
        let err = VideoModel::load_checkpoint(tmp.path()).err().unwrap().to_string();
        assert!(err.contains("vocabulary"), "{err}");
    }

    #[test]
    fn image_only_ratio_never_draws_video() {
        let config = TrainConfig {
            video_ratio: 0,
            image_ratio: 1,
            ..tiny_train_config()
        };
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let mut t = Trainer::new(model, config, dataset(3)).unwrap();
        t.run(None, None).unwrap();
        assert!(t.log().iter().all(|l| l.kind == BatchKind::Image));
        let config = TrainConfig {
            video_ratio: 10,
            image_ratio: 0,
            ..tiny_train_config()
        };
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let mut t = Trainer::new(model, config, dataset(3)).unwrap();
        t.run(None, None).unwrap();
        let video = t.log().iter().filter(|l| l.kind == BatchKind::Video).count();
        assert_eq!(video, 5);
    }

    #[test]
    fn phases_select_disjoint_parameter_sets() {
        let config = tiny_train_config();
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let mut t = Trainer::new(model, config, dataset(3)).unwrap();
        let phase_a = t.trainable_names();
        assert!(phase_a.iter().all(|n| !is_temporal(n)));
        assert!(phase_a.iter().any(|n| n.starts_with("text.")));
        t.run(Some(4), None).unwrap();
        let phase_b = t.trainable_names();
        assert!(phase_b.iter().all(|n| is_temporal(n) || n.starts_with("control.inject.")));
        assert!(phase_b.iter().any(|n| n.ends_with("tap_prev")));
    }

    #[test]
    fn resume_repeats_the_loss_sequence() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_train_config();
        let data = dataset(3);
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let mut full = Trainer::new(model, config.clone(), data.clone()).unwrap();
        full.run(None, None).unwrap();
        for stop in [2usize, 3, 5] {
            let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
            let mut first = Trainer::new(model, config.clone(), data.clone()).unwrap();
            first.run(Some(stop), None).unwrap();
            let dir = tmp.path().join(format!("stop{stop}"));
            first.save(&dir).unwrap();
            let mut resumed = Trainer::resume(&dir, data.clone()).unwrap();
            resumed.run(None, None).unwrap();
            assert_eq!(resumed.log(), full.log(), "resume at {stop}");
        }
    }

    #[test]
    fn empty_video_split_is_an_error() {
        let config = TrainConfig {
            frames: 6,
            ..tiny_train_config()
        };
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let err = Trainer::new(model, config, dataset(2)).err().unwrap().to_string();
        assert!(err.contains("video split"), "{err}");
    }

    fn planted_sampler<'a>(stub: &'a PlantedEpsilon, text: &'a TextEncoder, sched: DiffusionSchedule) -> Sampler<'a> {
        Sampler {
            predictor: stub,
            codec: &Codec::Pixel,
            text,
            schedule: sched,
        }
    }

    #[test]
    fn first_frame_with_planted_noise_returns_decoded_latent() {
        let store = ParamStore::new(DType::F32, 0);
        let text = TextEncoder::new(&store.root(), Vocabulary::caption_grammar(8), 4).unwrap();
        let sched = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        let z0 = Tensor::from_vec((0..48).map(|i| (i as f32 / 24.0) - 1.0).collect::<Vec<_>>(), (1, 3, 4, 4), &Device::Cpu).unwrap();
        let stub = PlantedEpsilon {
            z0: z0.clone(),
            schedule: sched.clone(),
        };
        let sampler = planted_sampler(&stub, &text, sched);
        let ctl = Array3::<f32>::zeros((1, 4, 4));
        let a = sampler.first_frame("a red square", ctl.view(), 10.0, 5).unwrap();
        let expected = tensor_to_array4(&Codec::Pixel.decode_tensor(&z0).unwrap()).unwrap();
        let diff = a.pixels.iter().zip(expected.iter()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(diff < 1e-4, "{diff}");
        let b = sampler.first_frame("a red square", ctl.view(), 10.0, 5).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn long_video_chains_with_exact_junctions() {
        let model = VideoModel::new(&tiny_model_config(), Codec::Pixel, 1).unwrap();
        let sampler = model.sampler();
        let controls = Array4::from_shape_fn((10, 1, 8, 8), |(i, _, y, x)| ((i + y + x) % 3) as f32 / 2.0);
        let mut req = SampleRequest::new("a red square moving right", controls, 9);
        req.iterations = 3;
        req.frames_per_iteration = 4;
        let out = sampler.long(&req).unwrap();
        assert_eq!(out.frames.shape()[0], 10);
        assert_eq!(out.frames.index_axis(Axis(0), 0), out.first_frame);
        for k in 1..3 {
            let prev_last = out.iterations[k - 1].frames.index_axis(Axis(0), 3);
            let next_first = out.iterations[k].frames.index_axis(Axis(0), 0);
            assert_eq!(prev_last, next_first);
            assert_eq!(out.frames.index_axis(Axis(0), 3 * k), prev_last);
        }
        let eq8 = sampler
            .first_frame(&req.caption, req.controls.index_axis(Axis(0), 0), req.guidance.text_scale, 9)
            .unwrap();
        assert_eq!(eq8.pixels, out.first_frame);
        req.controls = req.controls.slice(s![..9, .., .., ..]).to_owned();
        assert!(sampler.long(&req).unwrap_err().to_string().contains("need 10"));
    }

    #[test]
    fn full_threshold_gives_identical_frame_noise() {
        let model = VideoModel::new(&tiny_model_config(), Codec::Pixel, 1).unwrap();
        let sampler = model.sampler();
        let controls = Array4::from_shape_fn((4, 1, 8, 8), |(i, _, y, _)| ((i * 3 + y) % 5) as f32 / 4.0);
        let mut req = SampleRequest::new("a blue circle", controls, 2);
        req.threshold = 1.0;
        let out = sampler.long(&req).unwrap();
        let n = &out.iterations[0].noise.noise;
        for i in 1..4 {
            assert_eq!(n.index_axis(Axis(0), i), n.index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn smoke_run_lowers_the_loss_ema() {
        let config = TrainConfig {
            pretrain_steps: 60,
            steps: 40,
            ..tiny_train_config()
        };
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let mut t = Trainer::new(model, config, dataset(6)).unwrap();
        t.run(None, None).unwrap();
        let log = t.log();
        assert_eq!(log.len(), 100);
        assert!(log.iter().all(|l| l.loss.is_finite()));
        assert!(log[99].ema < log[0].loss, "ema {} vs first loss {}", log[99].ema, log[0].loss);
    }

    #[test]
    fn reloaded_model_predicts_identical_noise() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny_train_config();
        let model = VideoModel::new(&config.model, Codec::Pixel, 0).unwrap();
        let mut t = Trainer::new(model, config, dataset(3)).unwrap();
        t.run(None, None).unwrap();
        let model = t.into_model();
        model.save_checkpoint(tmp.path()).unwrap();
        let loaded = VideoModel::load_checkpoint(tmp.path()).unwrap();

        let dev = Device::Cpu;
        let (f, hw) = (4, 8);
        let x = Tensor::randn(0f32, 1.0, (f, 3, hw, hw), &dev).unwrap();
        let control = Tensor::rand(0f32, 1.0, (f, 1, hw, hw), &dev).unwrap();
        let run = |m: &VideoModel| {
            let inp = DenoiserInput {
                x: x.clone(),
                frames: f,
                timesteps: vec![321],
                context: m.text().embed_caption("a red circle").unwrap().tensor.unsqueeze(0).unwrap(),
                control: Some(control.clone()),
                cond_flags: vec![true, false, false, false],
                temporal: true,
            };
            m.denoiser().predict_noise(&inp).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let (a, b) = (run(&model), run(&loaded));
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
