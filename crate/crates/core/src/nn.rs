//! Named parameter storage and the handful of 2D building blocks the models use.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
    /// Square identity on the last two dims.
    Identity,
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Every learnable tensor of a model, keyed by dotted path. Iteration order is
/// sorted by name, which fixes optimizer and checkpoint ordering.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: &Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if inner.vars.contains_key(&name) {
            return Err(Error::arg("parameter", format!("duplicate name {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-*b..=*b)).collect(),
            Init::Normal(std) => {
                let dist = rand_distr::Normal::new(0.0, *std).unwrap();
                (0..n).map(|_| rand_distr::Distribution::sample(&dist, &mut inner.rng)).collect()
            }
            Init::Identity => {
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut v = vec![0.0; n];
                for (i, x) in v.iter_mut().enumerate() {
                    let (row, col) = ((i / c) % r, i % c);
                    if row == col {
                        *x = 1.0;
                    }
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().vars.keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    /// Variables whose name satisfies `pred`, in name order.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .vars
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Overwrites every parameter under `to_prefix` with its counterpart under `from_prefix`.
    pub fn copy_prefix(&self, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let inner = self.inner.lock().unwrap();
        let mut copied = 0;
        for (name, var) in inner.vars.iter() {
            if let Some(rest) = name.strip_prefix(to_prefix) {
                let src = format!("{from_prefix}{rest}");
                let Some(src_var) = inner.vars.get(&src) else {
                    continue;
                };
                if src_var.dims() == var.dims() {
                    var.set(src_var.as_tensor())?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }

    /// Snapshot of all parameters as plain tensors (detached copies).
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().unwrap().detach()))
            .collect()
    }

    /// Loads values for every parameter. Names and shapes must match exactly.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        if tensors.len() != inner.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, archive holds {}",
                inner.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in inner.vars.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} != {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Safetensors bytes of all parameters.
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let views: Vec<(String, Tensor)> = tensors.into_iter().collect();
        let bytes = safetensors_bytes(&views)?;
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.to_safetensors()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }

    pub fn load_bytes(&self, bytes: &[u8]) -> Result<()> {
        let loaded = candle_core::safetensors::load_buffer(bytes, &self.device)?;
        self.assign(&loaded.into_iter().collect())
    }

    /// Hash over names, shapes and values.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_safetensors()?))
    }
}

fn safetensors_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), None)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A dotted name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        Scope {
            store: self.store.clone(),
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{name}", self.prefix)
            },
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.pp(name).prefix, shape, &init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self::with_init(s, c_in, c_out, kernel, stride, Init::Uniform(bound), Init::Uniform(bound))
    }

    /// Convolution whose output is identically zero until trained.
    pub fn zeros(s: &Scope, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::with_init(s, c_in, c_out, kernel, 1, Init::Zeros, Init::Zeros)
    }

    fn with_init(
        s: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        w: Init,
        b: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, kernel, kernel], w)?,
            bias: s.get("bias", &[c_out], b)?,
            stride,
            padding: kernel / 2,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]` so that `x @ weight` needs no transpose.
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(s, d_in, d_out, Init::Uniform(bound), bias.then_some(Init::Uniform(bound)))
    }

    pub fn zeros(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, d_in, d_out, Init::Zeros, Some(Init::Zeros))
    }

    pub fn with_init(s: &Scope, d_in: usize, d_out: usize, w: Init, b: Option<Init>) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[d_in, d_out], w)?,
            bias: b.map(|b| s.get("bias", &[d_out], b)).transpose()?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Group normalization over `[N, C, ...]`, statistics per sample and group.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &Scope, channels: usize, groups: usize) -> Result<Self> {
        let groups = gcd(groups, channels);
        Ok(Self {
            gamma: s.get("gamma", &[channels], Init::Ones)?,
            beta: s.get("beta", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let (n, c) = (dims[0], dims[1]);
        let xg = x.reshape((n, self.groups, ()))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let mut shape = vec![1, c];
        shape.extend(std::iter::repeat_n(1, dims.len() - 2));
        normed
            .reshape(dims)?
            .broadcast_mul(&self.gamma.reshape(shape.clone())?)?
            .broadcast_add(&self.beta.reshape(shape)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.silu()
}

/// `softmax(q kᵀ / √d) v` for `[B, Lq, d]`, `[B, Lk, d]`, `[B, Lk, dv]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let scores = (q.matmul(&k.t()?)? / d.sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    weights.matmul(&v.contiguous()?)
}

pub fn array4_to_tensor(a: &Array4<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let data: Vec<f32> = a.iter().cloned().collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f32>> {
    let dims = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array4::from_shape_vec(dims, data).expect("shape matches element count"))
}

/// True when every element is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Adam hyperparameters; `weight_decay` is decoupled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over a named subset of a [`ParamStore`]. Moments are exposed so a
/// resumed run continues exactly.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            config,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    pub fn apply(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their op graph; moments built on them would keep
            // every step's activations alive.
            let g = &g.detach();
            let m = ((&self.m[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = &var.as_tensor().detach();
            let decayed = if c.weight_decay > 0.0 {
                (theta * (1.0 - c.lr * c.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moments keyed `m.<name>` and `v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].copy().unwrap());
            out.insert(format!("v.{name}"), self.v[i].copy().unwrap());
        }
        out
    }

    pub fn state_bytes(&self) -> Result<Vec<u8>> {
        let views: Vec<(String, Tensor)> = self.state().into_iter().collect();
        safetensors_bytes(&views)
    }

    pub fn load_state(&mut self, bytes: &[u8], step: usize) -> Result<()> {
        let loaded = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (key, slot) in [(format!("m.{name}"), &mut self.m[i]), (format!("v.{name}"), &mut self.v[i])] {
                let t = loaded
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has shape {:?}", t.dims())));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        if loaded.len() != 2 * self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} tensors, expected {}",
                loaded.len(),
                2 * self.vars.len()
            )));
        }
        self.step = step;
        Ok(())
    }
}

/// Worst analytic vs central-difference disagreement over sampled entries of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// Compares backprop gradients of the scalar `loss` with central finite
/// differences on up to `per_var` random entries of each var. Relative error
/// is `|a − n| / max(|a|, |n|, 1e-6)`. Vars are restored afterwards.
pub fn gradient_check(
    vars: &[(String, Var)],
    loss: impl Fn() -> Result<Tensor>,
    per_var: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        let n = var.elem_count();
        let (shape, dtype, dev) = (var.shape().clone(), var.dtype(), var.device().clone());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let idx: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_var).into_vec()
        };
        let set = |v: &[f64]| -> Result<()> {
            let t = Tensor::from_vec(v.to_vec(), &shape, &dev)?.to_dtype(dtype)?;
            Ok(var.set(&t)?)
        };
        let mut worst = 0f64;
        let mut biggest = 0f64;
        let mut v = base.clone();
        for &i in &idx {
            v[i] = base[i] + step;
            set(&v)?;
            let up = scalar(loss()?)?;
            v[i] = base[i] - step;
            set(&v)?;
            let down = scalar(loss()?)?;
            v[i] = base[i];
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            biggest = biggest.max(a.abs());
        }
        set(&base)?;
        out.push(GradCheck {
            name: name.clone(),
            checked: idx.len(),
            max_rel_error: worst,
            max_abs_grad: biggest,
        });
    }
    Ok(out)
}
