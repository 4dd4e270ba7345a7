//! The time-conditioned transformer realizing the velocity field, the
//! progression-time head, and the decoding heads.
//!
//! Token latents are RMS-normalized rows of a tied embedding table, so every
//! token sits on the sphere of radius `sqrt(d)` and projection decoding agrees
//! with nearest-neighbour decoding.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, LatentSequence, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error("non-finite values in {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

const LN_EPS: f64 = 1e-5;
const RMS_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub k_max: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub time_base_freq: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            vocab_size: crate::data::BYTE_VOCAB_SIZE,
            k_max: 20,
            max_seq_len: 256,
            dropout: 0.1,
            time_base_freq: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.d % 2 != 0 {
            return bad(format!("d = {} must be even for sin/cos time features", self.d));
        }
        if self.layers == 0 || self.ffn_mult == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("layers, ffn_mult, vocab_size and max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.time_base_freq > 0.0) {
            return bad(format!("time base frequency {} not positive", self.time_base_freq));
        }
        Ok(())
    }

    pub fn time_spec(&self) -> TimeEmbeddingSpec {
        TimeEmbeddingSpec { dim: self.d, base_freq: self.time_base_freq }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbeddingSpec {
    pub dim: usize,
    pub base_freq: f64,
}

impl TimeEmbeddingSpec {
    /// Pair `j` oscillates at `base * 1000^(j / (pairs - 1))`.
    pub fn frequencies(&self) -> Vec<f64> {
        let pairs = self.dim / 2;
        (0..pairs)
            .map(|j| {
                let frac = if pairs > 1 { j as f64 / (pairs - 1) as f64 } else { 0.0 };
                self.base_freq * 1000f64.powf(frac)
            })
            .collect()
    }
}

/// Interleaved `[sin(w_0 t), cos(w_0 t), sin(w_1 t), ...]`.
pub fn time_embed(t: f64, spec: &TimeEmbeddingSpec) -> Result<Vec<f64>> {
    if spec.dim % 2 != 0 || spec.dim == 0 {
        return Err(ModelError::Config(format!("time embedding dim {} must be even", spec.dim)));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(spec.frequencies().iter().flat_map(|w| [(w * t).sin(), (w * t).cos()]).collect())
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        self.var(name).as_tensor()
    }

    pub fn var(&self, name: &str) -> &Var {
        &self.entries.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no parameter {name}")).1
    }

    pub fn try_var(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    entries: Vec<(String, Var)>,
}

impl Init<'_> {
    fn push(&mut self, name: String, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.entries.push((name, Var::from_tensor(&t)?));
        Ok(())
    }

    // normal truncated at two standard deviations
    fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let x: f64 = StandardNormal.sample(self.rng);
                if x.abs() <= 2.0 {
                    break x * std;
                }
            })
            .collect();
        self.push(name.into(), shape, data)
    }

    fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.push(name.into(), shape, vec![value; n])
    }
}

/// Per-call forward options.
pub struct Forward<'a> {
    pub causal: bool,
    /// Valid length of each row; keys beyond it are masked.
    pub lengths: Option<&'a [usize]>,
    /// Dropout stream; `None` disables dropout.
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl Forward<'_> {
    pub fn eval() -> Self {
        Forward { causal: false, lengths: None, dropout: None }
    }
}

#[derive(Debug, Clone)]
pub struct FlowFieldNet {
    config: ModelConfig,
    params: Params,
    dtype: DType,
}

impl FlowFieldNet {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, dtype, entries: Vec::new() };
        let (d, v, f) = (config.d, config.vocab_size, config.d * config.ffn_mult);
        init.normal("tok_emb", &[v, d], 1.0)?;
        init.normal("pos_emb", &[config.max_seq_len, d], 0.3)?;
        init.normal("time_proj.weight", &[d, d], 0.3 / (d as f64 / 2.0).sqrt())?;
        init.constant("time_proj.bias", &[d], 0.0)?;
        init.normal("step_vec", &[d], 0.3)?;
        for l in 0..config.layers {
            let p = format!("blocks.{l}");
            init.constant(format!("{p}.ln1.gain"), &[d], 1.0)?;
            init.constant(format!("{p}.ln1.bias"), &[d], 0.0)?;
            init.normal(format!("{p}.attn.qkv.weight"), &[d, 3 * d], 0.02)?;
            init.constant(format!("{p}.attn.qkv.bias"), &[3 * d], 0.0)?;
            init.normal(format!("{p}.attn.out.weight"), &[d, d], 0.02)?;
            init.constant(format!("{p}.attn.out.bias"), &[d], 0.0)?;
            init.constant(format!("{p}.ln2.gain"), &[d], 1.0)?;
            init.constant(format!("{p}.ln2.bias"), &[d], 0.0)?;
            init.normal(format!("{p}.mlp.fc.weight"), &[d, f], 0.02)?;
            init.constant(format!("{p}.mlp.fc.bias"), &[f], 0.0)?;
            init.normal(format!("{p}.mlp.proj.weight"), &[f, d], 0.02)?;
            init.constant(format!("{p}.mlp.proj.bias"), &[d], 0.0)?;
        }
        init.constant("ln_f.gain", &[d], 1.0)?;
        init.constant("ln_f.bias", &[d], 0.0)?;
        init.normal("vel.weight", &[d, d], 0.02)?;
        init.constant("vel.bias", &[d], 0.0)?;
        init.normal("thead.fc1.weight", &[d, d], 0.02)?;
        init.constant("thead.fc1.bias", &[d], 0.0)?;
        init.constant("thead.fc2.weight", &[d, 1], 0.0)?;
        init.constant("thead.fc2.bias", &[1], 0.0)?;
        let params = Params { entries: init.entries };
        Ok(Self { config, params, dtype })
    }

    /// Builds a model from named tensors, checking names and shapes against
    /// a freshly initialized reference.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>, dtype: DType) -> Result<Self> {
        let reference = Self::new(config.clone(), 0, dtype)?;
        if tensors.len() != reference.params.entries.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, got {}",
                reference.params.entries.len(),
                tensors.len()
            )));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for ((rn, rv), (name, t)) in reference.params.entries.iter().zip(tensors) {
            if rn != &name || rv.dims() != t.dims() {
                return Err(ModelError::Shape(format!("tensor {name} {:?} where {rn} {:?} expected", t.dims(), rv.dims())));
            }
            entries.push((name, Var::from_tensor(&t.to_dtype(dtype)?)?));
        }
        Ok(Self { config, params: Params { entries }, dtype })
    }

    /// Deep copy at another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .params
            .entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().to_dtype(dtype)?.copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(self.config.clone(), tensors, dtype)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name)
    }

    pub fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn matrix_tensor(&self, m: &Matrix) -> Result<Tensor> {
        Ok(Tensor::from_slice(m.data(), m.shape(), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// RMS-normalized embedding table `[V, d]`.
    pub fn embedding_table(&self) -> Result<Tensor> {
        let e = self.p("tok_emb");
        let rms = e.sqr()?.mean_keepdim(D::Minus1)?.affine(1.0, RMS_EPS)?.sqrt()?;
        Ok(e.broadcast_div(&rms)?)
    }

    /// Clean latents of `ids` (`[B, N]`) as `[B, N, d]`.
    pub fn embed(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let (b, n) = (ids.len(), ids.first().map_or(0, Vec::len));
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        if let Some(bad) = flat.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::Domain(format!("token id {bad} outside vocabulary")));
        }
        let idx = Tensor::from_vec(flat, b * n, &Device::Cpu)?;
        Ok(self.embedding_table()?.index_select(&idx, 0)?.reshape((b, n, self.config.d))?)
    }

    /// Sinusoidal time features of `[B, N]` times as `[B, N, d]`.
    pub fn time_features(&self, times: &Tensor) -> Result<Tensor> {
        let freqs = self.config.time_spec().frequencies();
        let pairs = freqs.len();
        let w = self.tensor(freqs, &[pairs])?;
        let arg = times.unsqueeze(D::Minus1)?.broadcast_mul(&w)?;
        let (b, n) = times.dims2()?;
        Ok(Tensor::stack(&[arg.sin()?, arg.cos()?], 3)?.reshape((b, n, 2 * pairs))?)
    }

    fn additive_mask(&self, b: usize, n: usize, fwd: &Forward) -> Result<Option<Tensor>> {
        if !fwd.causal && fwd.lengths.is_none() {
            return Ok(None);
        }
        let mut data = vec![0.0f64; b * n * n];
        for bi in 0..b {
            let len = fwd.lengths.map_or(n, |l| l[bi]);
            for q in 0..n {
                for k in 0..n {
                    if (fwd.causal && k > q) || k >= len.max(1) {
                        data[(bi * n + q) * n + k] = MASKED;
                    }
                }
            }
        }
        Ok(Some(self.tensor(data, &[b, 1, n, n])?))
    }

    fn dropout(&self, x: Tensor, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        Ok(x.mul(&self.tensor(mask, x.dims())?)?)
    }

    /// Final-normed hidden states `[B, N, d]` for inputs `z` (`[B, N, d]`),
    /// times `[B, N]` and step fractions `k / K` (`[B, N]`).
    pub fn hidden(&self, z: &Tensor, times: &Tensor, step_frac: &Tensor, mut fwd: Forward) -> Result<Tensor> {
        let (b, n, d) = z.dims3()?;
        if n > self.config.max_seq_len {
            return Err(ModelError::Capacity { len: n, max: self.config.max_seq_len });
        }
        let c = &self.config;
        let pos = self.p("pos_emb").narrow(0, 0, n)?;
        let temb = linear(&self.time_features(times)?, self.p("time_proj.weight"), self.p("time_proj.bias"))?;
        let step = step_frac.unsqueeze(D::Minus1)?.broadcast_mul(self.p("step_vec"))?;
        let mut x = z.broadcast_add(&pos)?.add(&temb)?.add(&step)?;
        let mask = self.additive_mask(b, n, &fwd)?;
        let (h, dh) = (c.heads, d / c.heads);
        for l in 0..c.layers {
            let p = |s: &str| self.p(&format!("blocks.{l}.{s}"));
            let a = layer_norm(&x, p("ln1.gain"), p("ln1.bias"))?;
            let qkv = linear(&a, p("attn.qkv.weight"), p("attn.qkv.bias"))?.reshape((b, n, 3, h, dh))?;
            let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
            let (q, k, v) = (part(0)?, part(1)?, part(2)?);
            let mut att = q.matmul(&k.t()?)?.affine(1.0 / (dh as f64).sqrt(), 0.0)?;
            if let Some(m) = &mask {
                att = att.broadcast_add(m)?;
            }
            let y = softmax_last(&att)?.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
            let y = linear(&y, p("attn.out.weight"), p("attn.out.bias"))?;
            x = x.add(&self.dropout(y, &mut fwd.dropout)?)?;
            let a = layer_norm(&x, p("ln2.gain"), p("ln2.bias"))?;
            let y = linear(&a, p("mlp.fc.weight"), p("mlp.fc.bias"))?.gelu_erf()?;
            let y = linear(&y, p("mlp.proj.weight"), p("mlp.proj.bias"))?;
            x = x.add(&self.dropout(y, &mut fwd.dropout)?)?;
        }
        layer_norm(&x, self.p("ln_f.gain"), self.p("ln_f.bias"))
    }

    /// Velocity `F(z, t, k)` as `[B, N, d]`.
    pub fn velocity(&self, z: &Tensor, times: &Tensor, step_frac: &Tensor, fwd: Forward) -> Result<Tensor> {
        let h = self.hidden(z, times, step_frac, fwd)?;
        linear(&h, self.p("vel.weight"), self.p("vel.bias"))
    }

    /// Tied projection `z E^T / sqrt(d)` over the last axis.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let table = self.embedding_table()?;
        let scale = 1.0 / (self.config.d as f64).sqrt();
        let dims = z.dims().to_vec();
        let d = *dims.last().expect("at least one axis");
        let flat = z.reshape((z.elem_count() / d, d))?.matmul(&table.t()?)?.affine(scale, 0.0)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.config.vocab_size;
        Ok(flat.reshape(out)?)
    }

    /// Next-token logits `[B, N, V]` from a causal pass over clean latents at
    /// `t = 0`, step 0; position `i` scores token `i + 1`.
    pub fn ar_logits(&self, ids: &[Vec<u32>], lengths: Option<&[usize]>, dropout: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let z = self.embed(ids)?;
        let (b, n, _) = z.dims3()?;
        let zeros = Tensor::zeros((b, n), self.dtype, &Device::Cpu)?;
        let h = self.hidden(&z, &zeros, &zeros, Forward { causal: true, lengths, dropout })?;
        self.project(&h)
    }

    /// Progression times in `(0, 1)` of latents `[.., d]`.
    pub fn predict_times_tensor(&self, latents: &Tensor) -> Result<Tensor> {
        let h = linear(latents, self.p("thead.fc1.weight"), self.p("thead.fc1.bias"))?.gelu_erf()?;
        let o = linear(&h, self.p("thead.fc2.weight"), self.p("thead.fc2.bias"))?.squeeze(D::Minus1)?;
        sigmoid(&o)
    }

    /// One eval-mode pass of the field over a single sequence at step `step`.
    pub fn field_eval(&self, seq: &LatentSequence, step: usize) -> Result<Matrix> {
        let frac = if self.config.k_max == 0 { 0.0 } else { step as f64 / self.config.k_max as f64 };
        self.field_eval_at(seq.latents(), seq.times(), frac)
    }

    /// Like [`Self::field_eval`] with the step given as a fraction `k / K`.
    pub fn field_eval_at(&self, latents: &Matrix, times: &[f64], step_frac: f64) -> Result<Matrix> {
        let (n, d) = latents.shape();
        if times.len() != n {
            return Err(ModelError::Shape(format!("{} times for {n} latents", times.len())));
        }
        if d != self.config.d {
            return Err(ModelError::Shape(format!("latent width {d}, model width {}", self.config.d)));
        }
        if n > self.config.max_seq_len {
            return Err(ModelError::Capacity { len: n, max: self.config.max_seq_len });
        }
        if latents.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric("field input latents".into()));
        }
        let z = self.matrix_tensor(latents)?.unsqueeze(0)?;
        let t = self.tensor(times.to_vec(), &[1, n])?;
        let k = self.tensor(vec![step_frac; n], &[1, n])?;
        let v = self.velocity(&z, &t, &k, Forward::eval())?.squeeze(0)?;
        to_matrix(&v)
    }

    pub fn predict_times(&self, latents: &Matrix) -> Result<Vec<f64>> {
        let t = self.predict_times_tensor(&self.matrix_tensor(latents)?)?;
        Ok(t.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// `N x V` unnormalized scores of final latents.
    pub fn decode_logits(&self, latents: &Matrix) -> Result<Matrix> {
        to_matrix(&self.project(&self.matrix_tensor(latents)?)?)
    }

    pub fn embedding_matrix(&self) -> Result<Matrix> {
        to_matrix(&self.embedding_table()?)
    }

    /// Logits `[V]` for the token following `ids` under the causal pass.
    pub fn next_token_logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(ModelError::Domain("next-token scoring needs at least one context token".into()));
        }
        let context = &ids[ids.len().saturating_sub(self.config.max_seq_len)..];
        let logits = self.ar_logits(&[context.to_vec()], None, None)?;
        let n = context.len();
        Ok(logits.squeeze(0)?.get(n - 1)?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

pub fn to_matrix(t: &Tensor) -> Result<Matrix> {
    let (r, c) = t.dims2()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Matrix::new(r, c, data)?)
}

/// `x W + b` over the last axis.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (din, dout) = w.dims2()?;
    let flat = x.reshape((x.elem_count() / din, din))?.matmul(w)?.broadcast_add(b)?;
    let mut out = dims;
    *out.last_mut().expect("at least one axis") = dout;
    Ok(flat.reshape(out)?)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&var.affine(1.0, LN_EPS)?.sqrt()?)?;
    Ok(xn.broadcast_mul(gain)?.broadcast_add(bias)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?;
    Ok(s.broadcast_sub(&s.exp()?.sum_keepdim(D::Minus1)?.log()?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Nearest row of `table` for each latent; ties go to the smaller id.
pub fn nn_decode(latents: &Matrix, table: &Matrix) -> Result<Vec<u32>> {
    if table.rows() == 0 {
        return Err(ModelError::Domain("empty embedding table".into()));
    }
    if table.cols() != latents.cols() {
        return Err(ModelError::Shape(format!("latent width {} vs table width {}", latents.cols(), table.cols())));
    }
    if table.data().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric("embedding table".into()));
    }
    Ok((0..latents.rows())
        .map(|i| {
            let z = latents.row(i);
            let mut best = (f64::INFINITY, 0u32);
            for v in 0..table.rows() {
                let dist: f64 = z.iter().zip(table.row(v)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, v as u32);
                }
            }
            best.1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { d: 16, layers: 2, heads: 2, vocab_size: 20, max_seq_len: 16, ..ModelConfig::default() }
    }

    fn random_seq(n: usize, d: usize, seed: u64) -> LatentSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let times = (0..n).map(|_| rng.random::<f64>()).collect();
        LatentSequence::new(Matrix::new(n, d, data).unwrap(), times, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn time_embedding_properties() {
        let spec = TimeEmbeddingSpec { dim: 16, base_freq: 1.0 };
        let e0 = time_embed(0.0, &spec).unwrap();
        for pair in e0.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        for t in [0.1, 0.5, 0.93] {
            let n: f64 = time_embed(t, &spec).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 8f64.sqrt()).abs() < 1e-12);
        }
        // the base pair is 2 pi periodic in w_0 t; probe inside the unit domain
        let slow = TimeEmbeddingSpec { dim: 16, base_freq: 4.0 * std::f64::consts::PI };
        let a = time_embed(0.2, &slow).unwrap();
        let b = time_embed(0.7, &slow).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        assert!(time_embed(1.5, &spec).is_err());
        assert!(time_embed(0.5, &TimeEmbeddingSpec { dim: 5, base_freq: 1.0 }).is_err());
    }

    #[test]
    fn field_shapes_and_capacity() {
        let m = FlowFieldNet::new(ModelConfig { max_seq_len: 256, ..small() }, 1, DType::F32).unwrap();
        for n in [1, 7, 256] {
            assert_eq!(m.field_eval(&random_seq(n, 16, 2), 3).unwrap().shape(), (n, 16));
        }
        assert!(matches!(m.field_eval(&random_seq(257, 16, 2), 0), Err(ModelError::Capacity { .. })));
        let mut seq = random_seq(3, 16, 2);
        let mut data = seq.latents().data().to_vec();
        data[0] = f32::NAN;
        seq = LatentSequence::new(Matrix::new(3, 16, data).unwrap(), seq.times().to_vec(), 0).unwrap();
        assert!(matches!(m.field_eval(&seq, 0), Err(ModelError::Numeric(_))));
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let m = FlowFieldNet::new(small(), 3, DType::F64).unwrap();
        let pos = m.params().var("pos_emb");
        pos.set(&pos.zeros_like().unwrap()).unwrap();
        let seq = random_seq(6, 16, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f32>> = perm.iter().map(|&i| seq.latents().row(i).to_vec()).collect();
        let times: Vec<f64> = perm.iter().map(|&i| seq.times()[i]).collect();
        let permuted = LatentSequence::new(Matrix::from_rows(&rows).unwrap(), times, 0).unwrap();
        let a = m.field_eval(&seq, 2).unwrap();
        let b = m.field_eval(&permuted, 2).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn time_sensitivity_and_determinism() {
        let m = FlowFieldNet::new(small(), 5, DType::F32).unwrap();
        let seq = random_seq(5, 16, 6);
        let at = |t: f64| {
            let s = LatentSequence::new(seq.latents().clone(), vec![t; 5], 0).unwrap();
            m.field_eval(&s, 0).unwrap()
        };
        let (a, b) = (at(0.0), at(1.0));
        let delta: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.data().len() as f32;
        assert!(delta > 0.0);
        assert_eq!(at(0.0), a);
    }

    #[test]
    fn time_head_starts_at_half_and_stays_in_range() {
        let m = FlowFieldNet::new(small(), 7, DType::F32).unwrap();
        let seq = random_seq(50, 16, 8);
        assert!(m.predict_times(seq.latents()).unwrap().iter().all(|&t| t == 0.5));
        let w = m.params().var("thead.fc2.weight");
        w.set(&Tensor::ones((16, 1), DType::F32, &Device::Cpu).unwrap().affine(3.0, 0.0).unwrap()).unwrap();
        let t = m.predict_times(seq.latents()).unwrap();
        assert!(t.iter().all(|&t| t > 0.0 && t < 1.0));
    }

    #[test]
    fn zero_table_decodes_uniform() {
        let cfg = ModelConfig { vocab_size: 256, ..small() };
        let m = FlowFieldNet::new(cfg, 9, DType::F32).unwrap();
        let e = m.params().var("tok_emb");
        e.set(&e.zeros_like().unwrap()).unwrap();
        let logits = m.decode_logits(random_seq(3, 16, 1).latents()).unwrap();
        assert_eq!(logits.shape(), (3, 256));
        let t = Tensor::from_slice(logits.data(), (3, 256), &Device::Cpu).unwrap();
        let nll = log_softmax_last(&t).unwrap().to_vec2::<f32>().unwrap()[0][0];
        assert!((-nll - 256f32.ln()).abs() < 1e-5);
        assert!((256f32.ln() - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_normalized() {
        let m = FlowFieldNet::new(small(), 10, DType::F32).unwrap();
        let logits = m.decode_logits(random_seq(8, 16, 2).latents()).unwrap();
        let t = Tensor::from_slice(logits.data(), logits.shape(), &Device::Cpu).unwrap();
        for row in softmax_last(&t).unwrap().to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_matches_nearest_neighbour_on_table_rows() {
        let m = FlowFieldNet::new(small(), 11, DType::F32).unwrap();
        let table = m.embedding_matrix().unwrap();
        let logits = m.decode_logits(&table).unwrap();
        for v in 0..table.rows() {
            let row = logits.row(v);
            let arg = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(arg, v);
        }
        assert_eq!(nn_decode(&table, &table).unwrap(), (0..20).collect::<Vec<u32>>());
    }

    #[test]
    fn nn_decode_ties_and_errors() {
        let mut rows = vec![vec![10.0f32, 10.0]; 8];
        rows[3] = vec![1.0, 0.0];
        rows[7] = vec![-1.0, 0.0];
        let table = Matrix::from_rows(&rows).unwrap();
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(nn_decode(&z, &table).unwrap(), vec![3]);
        assert!(nn_decode(&z, &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn mask_blocks_future_tokens() {
        let m = FlowFieldNet::new(small(), 12, DType::F64).unwrap();
        let a = m.ar_logits(&[vec![1, 2, 3, 4]], None, None).unwrap().to_vec3::<f64>().unwrap();
        let b = m.ar_logits(&[vec![1, 2, 9, 9]], None, None).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a[0][..2], b[0][..2]);
        assert_ne!(a[0][2], b[0][2]);
        let np = m.next_token_logits(&[1, 2]).unwrap();
        for (x, y) in np.iter().zip(&a[0][1]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
