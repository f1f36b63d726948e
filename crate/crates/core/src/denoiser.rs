//! Spatial-temporal UNet noise predictor with a control branch.
//!
//! Feature tensors are `[B·F, C, H, W]`: `B` videos of `F` frames, frame-major
//! inside each video. Every stage runs a 2D residual block, a temporal
//! convolution, and at attention resolutions spatial-temporal self-attention,
//! cross-attention on the caption and temporal attention.

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{all_finite, silu, Conv2d, GroupNorm, Init, LayerNorm, Linear, ParamStore, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution, highest resolution first.
    pub channel_mult: Vec<usize>,
    /// Which resolutions carry the attention layers.
    pub attention: Vec<bool>,
    pub heads: usize,
    pub groups: usize,
    pub text_dim: usize,
    pub control_channels: usize,
    /// Pixel-to-latent downsampling applied to control maps by the stem.
    pub control_downsample: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_width: 64,
            channel_mult: vec![1, 2, 2],
            attention: vec![false, true, true],
            heads: 4,
            groups: 8,
            text_dim: 64,
            control_channels: 1,
            control_downsample: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Error::Config {
            key: format!("denoiser.{key}"),
            reason,
        };
        if self.channel_mult.is_empty() {
            return Err(bad("channel_mult", "needs at least one resolution".into()));
        }
        if self.attention.len() != self.channel_mult.len() {
            return Err(bad(
                "attention",
                format!("{} entries for {} resolutions", self.attention.len(), self.channel_mult.len()),
            ));
        }
        if self.base_width % 2 != 0 {
            return Err(bad("base_width", "must be even".into()));
        }
        for (i, m) in self.channel_mult.iter().enumerate() {
            let c = m * self.base_width;
            if self.attention[i] && (self.heads == 0 || c % self.heads != 0) {
                return Err(bad("heads", format!("{c} channels not divisible by {} heads", self.heads)));
            }
        }
        if self.control_downsample == 0 || !self.control_downsample.is_power_of_two() {
            return Err(bad("control_downsample", "must be a power of two".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.channel_mult[level] * self.base_width
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Latent height and width must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Kernel-3 convolution across frames with full channel mixing per tap and
/// zero padding. Starts as the identity.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    /// Taps for frames `f-1`, `f`, `f+1`, each `[C_in, C_out]`.
    taps: [Tensor; 3],
    bias: Tensor,
}

impl TemporalConv {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            taps: [
                s.get("tap_prev", &[channels, channels], Init::Zeros)?,
                s.get("tap_center", &[channels, channels], Init::Identity)?,
                s.get("tap_next", &[channels, channels], Init::Zeros)?,
            ],
            bias: s.get("bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, h: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = h.dims4()?;
        let b = n / frames;
        // [B, F, P, C]
        let x = h.reshape((b, frames, c, hh * ww))?.transpose(2, 3)?.contiguous()?;
        let pad = Tensor::zeros((b, 1, hh * ww, c), h.dtype(), h.device())?;
        let padded = Tensor::cat(&[&pad, &x, &pad], 1)?;
        let mut out = padded.narrow(1, 1, frames)?.contiguous()?.broadcast_matmul(&self.taps[1])?;
        if frames > 1 {
            out = (out + padded.narrow(1, 0, frames)?.contiguous()?.broadcast_matmul(&self.taps[0])?)?;
            out = (out + padded.narrow(1, 2, frames)?.contiguous()?.broadcast_matmul(&self.taps[2])?)?;
        }
        let out = out.broadcast_add(&self.bias)?;
        Ok(out.transpose(2, 3)?.reshape((n, c, hh, ww))?)
    }
}

/// `[N, L, C]` → `[N·heads, L, C/heads]`.
fn split_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    x.reshape((n, l, heads, c / heads))?
        .transpose(1, 2)?
        .reshape((n * heads, l, c / heads))
}

fn merge_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (nh, l, dh) = x.dims3()?;
    x.reshape((nh / heads, heads, l, dh))?
        .transpose(1, 2)?
        .reshape((nh / heads, l, heads * dh))
}

/// Multi-head `softmax(q kᵀ/√d) v` on `[N, L, C]` projections.
pub fn multihead_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let out = crate::nn::scaled_dot_attention(
        &split_heads(q, heads)?,
        &split_heads(k, heads)?,
        &split_heads(v, heads)?,
    )?;
    merge_heads(&out, heads)
}

/// Attention weights of every frame's queries over the concatenated keys of
/// all frames: `[B·heads, F·L, F·L]`.
pub fn st_attention_weights(tokens: &Tensor, wq: &Linear, wk: &Linear, heads: usize) -> Result<Tensor> {
    let (b, f, l, c) = tokens.dims4()?;
    let flat = tokens.reshape((b, f * l, c))?;
    let q = split_heads(&wq.forward(&flat)?, heads)?;
    let k = split_heads(&wk.forward(&flat)?, heads)?;
    let d = (c / heads) as f64;
    let scores = (q.matmul(&k.t()?)? / d.sqrt())?;
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

/// Core of spatial-temporal self-attention on tokens `[B, F, L, C]`: queries from
/// each frame, keys and values from the concatenation of all `F` frames.
pub fn spatial_temporal_attention(
    tokens: &Tensor,
    wq: &Linear,
    wk: &Linear,
    wv: &Linear,
    heads: usize,
) -> Result<Tensor> {
    let (b, f, l, c) = tokens.dims4()?;
    // Concatenating all frames' keys for every frame's queries is the same as
    // attention over the flattened F·L sequence.
    let flat = tokens.reshape((b, f * l, c))?;
    let q = wq.forward(&flat)?;
    let k = wk.forward(&flat)?;
    let v = wv.forward(&flat)?;
    Ok(multihead_attention(&q, &k, &v, heads)?.reshape((b, f, l, c))?)
}

/// Spatial-temporal self-attention block: `h + proj(STAttn(norm(h)))`.
#[derive(Debug, Clone)]
pub struct StSelfAttention {
    norm: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    proj: Linear,
    heads: usize,
}

impl StSelfAttention {
    pub fn new(s: &Scope, channels: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), channels, groups)?,
            wq: Linear::new(&s.pp("q"), channels, channels, false)?,
            wk: Linear::new(&s.pp("k"), channels, channels, false)?,
            wv: Linear::new(&s.pp("v"), channels, channels, false)?,
            proj: Linear::zeros(&s.pp("proj"), channels, channels)?,
            heads,
        })
    }

    /// `frames == 1` grouping gives plain per-frame spatial self-attention.
    pub fn forward(&self, h: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = h.dims4()?;
        let tokens = self
            .norm
            .forward(h)?
            .reshape((n, c, hh * ww))?
            .transpose(1, 2)?
            .reshape((n / frames, frames, hh * ww, c))?;
        let a = spatial_temporal_attention(&tokens, &self.wq, &self.wk, &self.wv, self.heads)?;
        let out = self.proj.forward(&a.reshape((n, hh * ww, c))?)?;
        Ok((h + out.transpose(1, 2)?.reshape((n, c, hh, ww))?)?)
    }
}

/// Cross-attention from image tokens to the caption context.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    proj: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(s: &Scope, channels: usize, text_dim: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), channels, groups)?,
            wq: Linear::new(&s.pp("q"), channels, channels, false)?,
            wk: Linear::new(&s.pp("k"), text_dim, channels, false)?,
            wv: Linear::new(&s.pp("v"), text_dim, channels, false)?,
            proj: Linear::new(&s.pp("proj"), channels, channels, true)?,
            heads,
        })
    }

    /// `context` is `[B·F, L_txt, C_txt]`, already repeated per frame.
    pub fn forward(&self, h: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (n, c, hh, ww) = h.dims4()?;
        let x = self.norm.forward(h)?.reshape((n, c, hh * ww))?.transpose(1, 2)?;
        let q = self.wq.forward(&x)?;
        let k = self.wk.forward(context)?;
        let v = self.wv.forward(context)?;
        let a = multihead_attention(&q, &k, &v, self.heads)?;
        let out = self.proj.forward(&a)?;
        Ok((h + out.transpose(1, 2)?.reshape((n, c, hh, ww))?)?)
    }
}

/// Attention across the `F` frame positions at each spatial location,
/// residual with a zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    norm: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    proj: Linear,
    heads: usize,
}

impl TemporalAttention {
    pub fn new(s: &Scope, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), channels)?,
            wq: Linear::new(&s.pp("q"), channels, channels, false)?,
            wk: Linear::new(&s.pp("k"), channels, channels, false)?,
            wv: Linear::new(&s.pp("v"), channels, channels, false)?,
            proj: Linear::zeros(&s.pp("proj"), channels, channels)?,
            heads,
        })
    }

    pub fn forward(&self, h: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, hh, ww) = h.dims4()?;
        let b = n / frames;
        let p = hh * ww;
        // [B·P, F, C]
        let x = h
            .reshape((b, frames, c, p))?
            .permute((0, 3, 1, 2))?
            .reshape((b * p, frames, c))?;
        let y = self.norm.forward(&x)?;
        let a = multihead_attention(&self.wq.forward(&y)?, &self.wk.forward(&y)?, &self.wv.forward(&y)?, self.heads)?;
        let out = (x + self.proj.forward(&a)?)?;
        Ok(out
            .reshape((b, p, frames, c))?
            .permute((0, 2, 3, 1))?
            .reshape((n, c, hh, ww))?)
    }
}

/// GroupNorm → SiLU → conv → +time → GroupNorm → SiLU → conv, plus skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&s.pp("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&s.pp("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(&s.pp("time"), time_dim, c_out, true)?,
            norm2: GroupNorm::new(&s.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&s.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&s.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `emb` is the activated per-frame embedding `[B·F, time_dim]`.
    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.time.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct AttentionLayers {
    st: StSelfAttention,
    cross: CrossAttention,
    tattn: TemporalAttention,
}

/// One UNet stage: 2D block, temporal conv, then the attention layers.
#[derive(Debug, Clone)]
pub struct Stage {
    name: String,
    res: ResBlock,
    tconv: TemporalConv,
    attn: Option<AttentionLayers>,
}

/// Per-call state shared by every stage.
pub struct StageContext<'a> {
    pub emb: &'a Tensor,
    pub context: &'a Tensor,
    pub frames: usize,
    pub temporal: bool,
    pub check_finite: bool,
}

impl Stage {
    fn new(s: &Scope, c_in: usize, c_out: usize, attention: bool, cfg: &DenoiserConfig) -> Result<Self> {
        let attn = if attention {
            Some(AttentionLayers {
                st: StSelfAttention::new(&s.pp("st_attn"), c_out, cfg.heads, cfg.groups)?,
                cross: CrossAttention::new(&s.pp("cross_attn"), c_out, cfg.text_dim, cfg.heads, cfg.groups)?,
                tattn: TemporalAttention::new(&s.pp("tattn"), c_out, cfg.heads)?,
            })
        } else {
            None
        };
        Ok(Self {
            name: s.prefix().to_string(),
            res: ResBlock::new(&s.pp("res"), c_in, c_out, cfg.time_dim(), cfg.groups)?,
            tconv: TemporalConv::new(&s.pp("tconv"), c_out)?,
            attn,
        })
    }

    pub fn forward(&self, x: &Tensor, cx: &StageContext) -> Result<Tensor> {
        let mut h = self.res.forward(x, cx.emb)?;
        if cx.temporal {
            h = self.tconv.forward(&h, cx.frames)?;
        }
        if let Some(a) = &self.attn {
            let group = if cx.temporal { cx.frames } else { 1 };
            h = a.st.forward(&h, group)?;
            h = a.cross.forward(&h, cx.context)?;
            if cx.temporal {
                h = a.tattn.forward(&h, cx.frames)?;
            }
        }
        if cx.check_finite && !all_finite(&h)? {
            return Err(Error::NonFinite(format!("activations after {}", self.name)));
        }
        Ok(h)
    }
}

/// Input conv, one stage per resolution with downsampling between, mid stage.
#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    stages: Vec<Stage>,
    downs: Vec<Conv2d>,
    mid: Stage,
}

impl Encoder {
    fn new(s: &Scope, mid_scope: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        let levels = cfg.channel_mult.len();
        let conv_in = Conv2d::new(&s.pp("conv_in"), cfg.latent_channels, cfg.base_width, 3, 1)?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        let mut ch = cfg.base_width;
        for l in 0..levels {
            let out = cfg.width(l);
            stages.push(Stage::new(&s.pp(format!("level{l}")), ch, out, cfg.attention[l], cfg)?);
            ch = out;
            if l + 1 < levels {
                downs.push(Conv2d::new(&s.pp(format!("down{l}")), ch, ch, 3, 2)?);
            }
        }
        let mid = Stage::new(mid_scope, ch, ch, true, cfg)?;
        Ok(Self {
            conv_in,
            stages,
            downs,
            mid,
        })
    }

    /// Returns the skip features per level and the mid output.
    fn forward(&self, h: Tensor, cx: &StageContext) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = h;
        let mut skips = Vec::with_capacity(self.stages.len());
        for (l, stage) in self.stages.iter().enumerate() {
            h = stage.forward(&h, cx)?;
            skips.push(h.clone());
            if let Some(down) = self.downs.get(l) {
                h = down.forward(&h)?;
            }
        }
        let mid = self.mid.forward(&h, cx)?;
        Ok((skips, mid))
    }
}

/// Trainable encoder copy fed with `x_t + stem(c_f)`, injecting into the
/// main decoder through zero-initialized 1×1 convolutions.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    stem: [Conv2d; 2],
    encoder: Encoder,
    inject: Vec<Conv2d>,
    inject_mid: Conv2d,
    downsample: usize,
}

/// Residual features for the decoder skips and the mid block.
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
}

impl ControlBranch {
    fn new(s: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        let levels = cfg.channel_mult.len();
        let hidden = cfg.base_width.div_ceil(2);
        let stem = [
            Conv2d::new(&s.pp("stem.0"), cfg.control_channels, hidden, 3, 1)?,
            Conv2d::new(&s.pp("stem.1"), hidden, cfg.base_width, 3, 1)?,
        ];
        let encoder = Encoder::new(&s.pp("enc"), &s.pp("mid"), cfg)?;
        let inject = (0..levels)
            .map(|l| Conv2d::zeros(&s.pp(format!("inject.{l}")), cfg.width(l), cfg.width(l), 1))
            .collect::<Result<Vec<_>>>()?;
        let last = cfg.width(levels - 1);
        let inject_mid = Conv2d::zeros(&s.pp("inject.mid"), last, last, 1)?;
        Ok(Self {
            stem,
            encoder,
            inject,
            inject_mid,
            downsample: cfg.control_downsample,
        })
    }

    pub fn forward(&self, x_t: &Tensor, control: &Tensor, cx: &StageContext) -> Result<ControlResiduals> {
        let mut c = control.clone();
        if self.downsample > 1 {
            c = c.avg_pool2d(self.downsample)?;
        }
        let (_, _, ch, cw) = c.dims4()?;
        let (_, _, xh, xw) = x_t.dims4()?;
        if (ch, cw) != (xh, xw) {
            return Err(Error::shape("control map size after stem", format!("{xh}x{xw}"), format!("{ch}x{cw}")));
        }
        let stem = self.stem[1].forward(&silu(&self.stem[0].forward(&c)?)?)?;
        let h = (self.encoder.conv_in.forward(x_t)? + stem)?;
        let (skips, mid) = self.encoder.forward(h, cx)?;
        Ok(ControlResiduals {
            skips: skips
                .iter()
                .zip(&self.inject)
                .map(|(s, conv)| conv.forward(s))
                .collect::<candle_core::Result<Vec<_>>>()?,
            mid: self.inject_mid.forward(&mid)?,
        })
    }
}

/// One denoiser call over `B` videos of `F` frames each.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    /// Noisy latents `[B·F, C_z, h, w]`; conditioning frames carry the clean latent.
    pub x: Tensor,
    pub frames: usize,
    /// One timestep per video, shared by its frames.
    pub timesteps: Vec<usize>,
    /// Caption contexts `[B, L_txt, C_txt]`.
    pub context: Tensor,
    /// Control maps `[B·F, C_ctl, H, W]` at pixel resolution.
    pub control: Option<Tensor>,
    /// Per-frame first-frame conditioning flags, length `B·F`.
    pub cond_flags: Vec<bool>,
    pub temporal: bool,
}

impl DenoiserInput {
    pub fn videos(&self) -> usize {
        self.timesteps.len()
    }
}

/// Sinusoidal timestep features `[N, dim]`.
pub fn timestep_features(timesteps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let row: Vec<f64> = freqs.clone().map(f64::cos).chain(freqs.map(f64::sin)).collect();
        v.extend(row);
    }
    Ok(Tensor::from_vec(v, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

/// The full noise predictor ε_θ.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    frame_flag: Tensor,
    encoder: Encoder,
    up_stages: Vec<Stage>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    control: ControlBranch,
    check_finite: bool,
}

impl Denoiser {
    /// Builds parameters under `unet.*` and `control.*`. The control encoder
    /// starts as a copy of the main encoder.
    pub fn new(store: &ParamStore, config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let u = root.pp("unet");
        let base = config.base_width;
        let td = config.time_dim();
        let time1 = Linear::new(&u.pp("time.0"), base, td, true)?;
        let time2 = Linear::new(&u.pp("time.1"), td, td, true)?;
        let frame_flag = u.get("frame_flag", &[td], Init::Zeros)?;
        let encoder = Encoder::new(&u.pp("enc"), &u.pp("mid"), config)?;
        let levels = config.channel_mult.len();
        let mut up_stages = Vec::new();
        let mut ups = Vec::new();
        let mut ch = config.width(levels - 1);
        for l in (0..levels).rev() {
            let out = config.width(l);
            up_stages.push(Stage::new(&u.pp(format!("dec.level{l}")), ch + out, out, config.attention[l], config)?);
            ch = out;
            if l > 0 {
                ups.push(Conv2d::new(&u.pp(format!("dec.up{l}")), ch, ch, 3, 1)?);
            }
        }
        let norm_out = GroupNorm::new(&u.pp("norm_out"), base, config.groups)?;
        let conv_out = Conv2d::new(&u.pp("conv_out"), base, config.latent_channels, 3, 1)?;
        let control = ControlBranch::new(&root.pp("control"), config)?;
        store.copy_prefix("unet.enc.", "control.enc.")?;
        store.copy_prefix("unet.mid.", "control.mid.")?;
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            frame_flag,
            encoder,
            up_stages,
            ups,
            norm_out,
            conv_out,
            control,
            check_finite: true,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Disables the per-stage finite check, e.g. inside training where the loss is checked instead.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    fn check_input(&self, inp: &DenoiserInput) -> Result<()> {
        let (n, c, h, w) = inp.x.dims4()?;
        let b = inp.videos();
        if inp.frames == 0 || b == 0 || n != b * inp.frames {
            return Err(Error::shape("latent batch", format!("{b} videos x {} frames", inp.frames), n));
        }
        if c != self.config.latent_channels {
            return Err(Error::shape("latent channels", self.config.latent_channels, c));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape("latent size", format!("multiple of {m}"), format!("{h}x{w}")));
        }
        if inp.cond_flags.len() != n {
            return Err(Error::shape("conditioning flags", n, inp.cond_flags.len()));
        }
        let (cb, _, ct) = inp.context.dims3()?;
        if cb != b {
            return Err(Error::shape("context batch", b, cb));
        }
        if ct != self.config.text_dim {
            return Err(Error::shape("context width", self.config.text_dim, ct));
        }
        if let Some(ctl) = &inp.control {
            let (cn, cc, _, _) = ctl.dims4()?;
            if cn != n {
                return Err(Error::shape("control frames", n, cn));
            }
            if cc != self.config.control_channels {
                return Err(Error::shape("control channels", self.config.control_channels, cc));
            }
        }
        Ok(())
    }

    /// ε_θ(x_t, t, c_p, c_f, E(v¹)).
    pub fn predict_noise(&self, inp: &DenoiserInput) -> Result<Tensor> {
        self.check_input(inp)?;
        let dtype = inp.x.dtype();
        let dev = inp.x.device();
        let f = inp.frames;
        let n = inp.x.dim(0)?;

        let per_frame_t: Vec<usize> = inp.timesteps.iter().flat_map(|&t| std::iter::repeat_n(t, f)).collect();
        let tf = timestep_features(&per_frame_t, self.config.base_width, dtype, dev)?;
        let mut emb = self.time2.forward(&silu(&self.time1.forward(&tf)?)?)?;
        if inp.cond_flags.iter().any(|&c| c) {
            let flags: Vec<f64> = inp.cond_flags.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
            let flags = Tensor::from_vec(flags, (n, 1), dev)?.to_dtype(dtype)?;
            emb = (emb + flags.broadcast_mul(&self.frame_flag.unsqueeze(0)?)?)?;
        }
        let emb = silu(&emb)?;

        let idx: Vec<u32> = (0..n as u32).map(|i| i / f as u32).collect();
        let context = inp.context.index_select(&Tensor::new(idx.as_slice(), dev)?, 0)?;
        let cx = StageContext {
            emb: &emb,
            context: &context,
            frames: f,
            temporal: inp.temporal,
            check_finite: self.check_finite,
        };

        let h = self.encoder.conv_in.forward(&inp.x)?;
        let (mut skips, mut h) = self.encoder.forward(h, &cx)?;
        if let Some(ctl) = &inp.control {
            let res = self.control.forward(&inp.x, ctl, &cx)?;
            for (s, r) in skips.iter_mut().zip(&res.skips) {
                *s = (&*s + r)?;
            }
            h = (h + res.mid)?;
        }
        let levels = self.config.channel_mult.len();
        for (i, stage) in self.up_stages.iter().enumerate() {
            let l = levels - 1 - i;
            h = stage.forward(&Tensor::cat(&[&h, &skips[l]], 1)?, &cx)?;
            if l > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                h = self.ups[i].forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?;
        if self.check_finite && !all_finite(&out)? {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(out)
    }

    /// ε_θI: every frame as its own single-frame video, without first-frame
    /// conditioning; outputs concatenated back in frame order.
    pub fn predict_noise_independent(&self, inp: &DenoiserInput) -> Result<Tensor> {
        self.check_input(inp)?;
        let n = inp.x.dim(0)?;
        let f = inp.frames;
        let idx: Vec<u32> = (0..n as u32).map(|i| i / f as u32).collect();
        let idx = Tensor::new(idx.as_slice(), inp.x.device())?;
        let single = DenoiserInput {
            x: inp.x.clone(),
            frames: 1,
            timesteps: inp.timesteps.iter().flat_map(|&t| std::iter::repeat_n(t, f)).collect(),
            context: inp.context.index_select(&idx, 0)?,
            control: inp.control.clone(),
            cond_flags: vec![false; n],
            temporal: inp.temporal,
        };
        self.predict_noise(&single)
    }
}
