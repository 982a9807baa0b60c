//! A small decoder-only transformer trained from scratch.
//!
//! Pre-norm blocks (layer norm, causal multi-head attention, layer norm, GELU
//! feed-forward), learned positional embeddings and an untied output
//! projection. Parameters live in one flat `f64` buffer in canonical order;
//! gradients are computed by a hand-written backward pass.

pub mod checkpoint;
pub mod gradcheck;
mod linalg;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::seeds;
use crate::vocab::TokenId;
use linalg::{add_col_sums, gemm, View, ViewMut};

pub use checkpoint::{Checkpoint, TrainingMeta};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 25, context_len: 64, d_model: 64, n_heads: 4, n_layers: 2, init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.context_len == 0 {
            return bad("context_len must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_ff1: usize,
    b_ff1: usize,
    w_ff2: usize,
    b_ff2: usize,
}

/// Canonical parameter order and offsets into the flat buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut tensors: Vec<TensorSpec> = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let spec = TensorSpec { name, shape, kind, offset: total };
            total += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff());
        let tok_emb = alloc("tok_emb".into(), vec![v, d], TensorKind::Weight);
        let pos_emb = alloc("pos_emb".into(), vec![c.context_len, d], TensorKind::Weight);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerLayout {
                ln1_g: alloc(p("ln1.gain"), vec![d], TensorKind::Gain),
                ln1_b: alloc(p("ln1.bias"), vec![d], TensorKind::Bias),
                w_qkv: alloc(p("attn.w_qkv"), vec![d, 3 * d], TensorKind::Weight),
                b_qkv: alloc(p("attn.b_qkv"), vec![3 * d], TensorKind::Bias),
                w_o: alloc(p("attn.w_o"), vec![d, d], TensorKind::Weight),
                b_o: alloc(p("attn.b_o"), vec![d], TensorKind::Bias),
                ln2_g: alloc(p("ln2.gain"), vec![d], TensorKind::Gain),
                ln2_b: alloc(p("ln2.bias"), vec![d], TensorKind::Bias),
                w_ff1: alloc(p("ff.w1"), vec![d, f], TensorKind::Weight),
                b_ff1: alloc(p("ff.b1"), vec![f], TensorKind::Bias),
                w_ff2: alloc(p("ff.w2"), vec![f, d], TensorKind::Weight),
                b_ff2: alloc(p("ff.b2"), vec![d], TensorKind::Bias),
            });
        }
        let lnf_g = alloc("ln_f.gain".into(), vec![d], TensorKind::Gain);
        let lnf_b = alloc("ln_f.bias".into(), vec![d], TensorKind::Bias);
        let w_out = alloc("out.w".into(), vec![d, v], TensorKind::Weight);
        let b_out = alloc("out.b".into(), vec![v], TensorKind::Bias);
        Self { tensors, tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out, total }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    data: Vec<f64>,
}

pub fn init_params(config: &ModelConfig) -> Result<Parameters, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut data = vec![0.0; layout.total()];
    let mut rng = seeds::rng(config.init_seed, "init");
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    for t in layout.tensors() {
        let slot = &mut data[t.offset..t.offset + t.len()];
        match t.kind {
            TensorKind::Weight => slot.iter_mut().for_each(|w| *w = normal.sample(&mut rng)),
            TensorKind::Bias => {}
            TensorKind::Gain => slot.fill(1.0),
        }
    }
    Ok(Parameters { config: config.clone(), data })
}

/// Per-position log-probabilities, row-major `[len, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogProbs {
    pub fn len(&self) -> usize {
        self.data.len() / self.vocab.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodePolicy {
    Greedy,
    Temperature(f64),
}

/// Activations kept for the backward pass.
struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    f1: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
    logp: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    let mut y = vec![0.0; t * d];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = xh * g[c] + b[c];
        }
    }
    (xhat, rstd, y)
}

/// Backward through layer norm. Accumulates into `dg`, `db`, and adds the
/// input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
    t: usize,
    d: usize,
) {
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            dx[r * d + c] += rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn log_softmax_rows(logits: &mut [f64], v: usize) {
    for row in logits.chunks_mut(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
}

impl Parameters {
    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Layout::new(&config).total();
        if data.len() != expected {
            return Err(ModelError::InvalidConfig(format!(
                "expected {expected} parameters, got {}",
                data.len()
            )));
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rounds every parameter through single precision, as stored in
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        self.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.len() > self.config.context_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                context_len: self.config.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::InvalidToken { id, size: self.config.vocab_size });
        }
        Ok(())
    }

    fn run(&self, ids: &[TokenId]) -> Cache {
        let c = &self.config;
        let (t, d, v, f) = (ids.len(), c.d_model, c.vocab_size, c.d_ff());
        let (nh, hd) = (c.n_heads, c.head_dim());
        let lay = Layout::new(c);
        let p = &self.data;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; t * d];
        for (r, &id) in ids.iter().enumerate() {
            let te = &p[lay.tok_emb + id as usize * d..][..d];
            let pe = &p[lay.pos_emb + r * d..][..d];
            for k in 0..d {
                x[r * d + k] = te[k] + pe[k];
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for ll in &lay.layers {
            let (xhat1, rstd1, h1) =
                layer_norm(&x, &p[ll.ln1_g..][..d], &p[ll.ln1_b..][..d], t, d);

            let mut qkv = vec![0.0; t * 3 * d];
            for r in 0..t {
                qkv[r * 3 * d..(r + 1) * 3 * d].copy_from_slice(&p[ll.b_qkv..][..3 * d]);
            }
            gemm(
                1.0,
                View::rm(&h1, t, d),
                View::rm(&p[ll.w_qkv..ll.w_qkv + d * 3 * d], d, 3 * d),
                1.0,
                ViewMut::rm(&mut qkv, t, 3 * d),
            );

            let mut att = vec![0.0; nh * t * t];
            let mut ctx = vec![0.0; t * d];
            for h in 0..nh {
                let a = &mut att[h * t * t..(h + 1) * t * t];
                let q = View { data: &qkv, off: h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 };
                let k = View { data: &qkv, off: d + h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 };
                gemm(scale, q, k.t(), 0.0, ViewMut::rm(a, t, t));
                for i in 0..t {
                    let row = &mut a[i * t..(i + 1) * t];
                    let m = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for e in row[..=i].iter_mut() {
                        *e = (*e - m).exp();
                        s += *e;
                    }
                    row[..=i].iter_mut().for_each(|e| *e /= s);
                    row[i + 1..].fill(0.0);
                }
                let vv = View { data: &qkv, off: 2 * d + h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 };
                gemm(
                    1.0,
                    View::rm(a, t, t),
                    vv,
                    0.0,
                    ViewMut { data: &mut ctx, off: h * hd, rows: t, cols: hd, rs: d, cs: 1 },
                );
            }

            for r in 0..t {
                for k in 0..d {
                    x[r * d + k] += p[ll.b_o + k];
                }
            }
            gemm(1.0, View::rm(&ctx, t, d), View::rm(&p[ll.w_o..ll.w_o + d * d], d, d), 1.0, ViewMut::rm(&mut x, t, d));

            let (xhat2, rstd2, h2) = layer_norm(&x, &p[ll.ln2_g..][..d], &p[ll.ln2_b..][..d], t, d);
            let mut f1 = vec![0.0; t * f];
            for r in 0..t {
                f1[r * f..(r + 1) * f].copy_from_slice(&p[ll.b_ff1..][..f]);
            }
            gemm(1.0, View::rm(&h2, t, d), View::rm(&p[ll.w_ff1..ll.w_ff1 + d * f], d, f), 1.0, ViewMut::rm(&mut f1, t, f));
            let act: Vec<f64> = f1.iter().map(|&z| gelu(z)).collect();
            for r in 0..t {
                for k in 0..d {
                    x[r * d + k] += p[ll.b_ff2 + k];
                }
            }
            gemm(1.0, View::rm(&act, t, f), View::rm(&p[ll.w_ff2..ll.w_ff2 + f * d], f, d), 1.0, ViewMut::rm(&mut x, t, d));

            layers.push(LayerCache { xhat1, rstd1, h1, qkv, att, ctx, xhat2, rstd2, h2, f1, act });
        }

        let (xhatf, rstdf, hf) = layer_norm(&x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], t, d);
        let mut logp = vec![0.0; t * v];
        for r in 0..t {
            logp[r * v..(r + 1) * v].copy_from_slice(&p[lay.b_out..][..v]);
        }
        gemm(1.0, View::rm(&hf, t, d), View::rm(&p[lay.w_out..lay.w_out + d * v], d, v), 1.0, ViewMut::rm(&mut logp, t, v));
        log_softmax_rows(&mut logp, v);
        Cache { layers, xhatf, rstdf, hf, logp }
    }

    /// Row `t` is the log-distribution of the token following `ids[t]`.
    pub fn forward(&self, ids: &[TokenId]) -> Result<LogProbs, ModelError> {
        self.check_ids(ids)?;
        let cache = self.run(ids);
        Ok(LogProbs { vocab: self.config.vocab_size, data: cache.logp })
    }

    /// Σ_t log p(continuation_t | context, continuation_<t).
    pub fn sequence_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<f64, ModelError> {
        if continuation.is_empty() {
            let full: Vec<TokenId> = context.to_vec();
            self.check_ids(&full)?;
            return Ok(0.0);
        }
        let full: Vec<TokenId> = context.iter().chain(continuation).copied().collect();
        self.check_ids(&full)?;
        if context.is_empty() {
            return Err(ModelError::InvalidConfig(
                "a continuation needs at least one context token".into(),
            ));
        }
        // The last token is never a conditioning position.
        let lp = self.forward(&full[..full.len() - 1])?;
        let v = self.config.vocab_size;
        Ok((0..continuation.len())
            .map(|k| {
                let pos = context.len() + k;
                lp.data[(pos - 1) * v + full[pos] as usize]
            })
            .sum())
    }

    /// Σ_t w_t · (−log p(ids_t | ids_<t)). Weight at position 0 must be zero.
    pub fn weighted_nll(&self, ids: &[TokenId], weights: &[f64]) -> Result<f64, ModelError> {
        check_weights(ids, weights)?;
        self.check_ids(ids)?;
        let Some(last) = last_weighted(weights) else {
            return Ok(0.0);
        };
        let lp = self.forward(&ids[..last])?;
        let v = self.config.vocab_size;
        Ok((1..=last)
            .filter(|&t| weights[t] != 0.0)
            .map(|t| -weights[t] * lp.data[(t - 1) * v + ids[t] as usize])
            .sum())
    }

    /// Weighted NLL of one sequence; adds `scale` times its gradient into
    /// `grad`. Returns the unscaled weighted NLL.
    pub fn accumulate_gradient(
        &self,
        ids: &[TokenId],
        weights: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        check_weights(ids, weights)?;
        self.check_ids(ids)?;
        assert_eq!(grad.len(), self.data.len(), "gradient buffer has wrong size");
        let Some(last) = last_weighted(weights) else {
            return Ok(0.0);
        };
        let inputs = &ids[..last];
        let cache = self.run(inputs);
        let c = &self.config;
        let (t, d, v, f) = (inputs.len(), c.d_model, c.vocab_size, c.d_ff());
        let (nh, hd) = (c.n_heads, c.head_dim());
        let lay = Layout::new(c);
        let p = &self.data;
        let attn_scale = 1.0 / (hd as f64).sqrt();

        let mut nll = 0.0;
        let mut dlogits = vec![0.0; t * v];
        for r in 0..t {
            let w = weights[r + 1];
            if w == 0.0 {
                continue;
            }
            let target = ids[r + 1] as usize;
            let lp = &cache.logp[r * v..(r + 1) * v];
            nll -= w * lp[target];
            for k in 0..v {
                dlogits[r * v + k] = scale * w * lp[k].exp();
            }
            dlogits[r * v + target] -= scale * w;
        }

        // Output projection and final norm.
        gemm(1.0, View::rm(&cache.hf, t, d).t(), View::rm(&dlogits, t, v), 1.0, ViewMut::rm(&mut grad[lay.w_out..lay.w_out + d * v], d, v));
        add_col_sums(&dlogits, t, v, &mut grad[lay.b_out..lay.b_out + v]);
        let mut dhf = vec![0.0; t * d];
        gemm(1.0, View::rm(&dlogits, t, v), View::rm(&p[lay.w_out..lay.w_out + d * v], d, v).t(), 0.0, ViewMut::rm(&mut dhf, t, d));
        let mut dx = vec![0.0; t * d];
        {
            let (gpart, rest) = grad.split_at_mut(lay.lnf_b);
            layer_norm_back(&dhf, &cache.xhatf, &cache.rstdf, &p[lay.lnf_g..][..d], &mut gpart[lay.lnf_g..lay.lnf_g + d], &mut rest[..d], &mut dx, t, d);
        }

        for (ll, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward sublayer; `dx` is the gradient at its output.
            gemm(1.0, View::rm(&lc.act, t, f).t(), View::rm(&dx, t, d), 1.0, ViewMut::rm(&mut grad[ll.w_ff2..ll.w_ff2 + f * d], f, d));
            add_col_sums(&dx, t, d, &mut grad[ll.b_ff2..ll.b_ff2 + d]);
            let mut dact = vec![0.0; t * f];
            gemm(1.0, View::rm(&dx, t, d), View::rm(&p[ll.w_ff2..ll.w_ff2 + f * d], f, d).t(), 0.0, ViewMut::rm(&mut dact, t, f));
            for (g, &z) in dact.iter_mut().zip(&lc.f1) {
                *g *= gelu_grad(z);
            }
            gemm(1.0, View::rm(&lc.h2, t, d).t(), View::rm(&dact, t, f), 1.0, ViewMut::rm(&mut grad[ll.w_ff1..ll.w_ff1 + d * f], d, f));
            add_col_sums(&dact, t, f, &mut grad[ll.b_ff1..ll.b_ff1 + f]);
            let mut dh2 = vec![0.0; t * d];
            gemm(1.0, View::rm(&dact, t, f), View::rm(&p[ll.w_ff1..ll.w_ff1 + d * f], d, f).t(), 0.0, ViewMut::rm(&mut dh2, t, d));
            {
                let (gpart, rest) = grad.split_at_mut(ll.ln2_b);
                layer_norm_back(&dh2, &lc.xhat2, &lc.rstd2, &p[ll.ln2_g..][..d], &mut gpart[ll.ln2_g..ll.ln2_g + d], &mut rest[..d], &mut dx, t, d);
            }

            // Attention sublayer.
            gemm(1.0, View::rm(&lc.ctx, t, d).t(), View::rm(&dx, t, d), 1.0, ViewMut::rm(&mut grad[ll.w_o..ll.w_o + d * d], d, d));
            add_col_sums(&dx, t, d, &mut grad[ll.b_o..ll.b_o + d]);
            let mut dctx = vec![0.0; t * d];
            gemm(1.0, View::rm(&dx, t, d), View::rm(&p[ll.w_o..ll.w_o + d * d], d, d).t(), 0.0, ViewMut::rm(&mut dctx, t, d));

            let mut dqkv = vec![0.0; t * 3 * d];
            let mut da = vec![0.0; t * t];
            for h in 0..nh {
                let a = &lc.att[h * t * t..(h + 1) * t * t];
                let dctx_h = View { data: &dctx, off: h * hd, rows: t, cols: hd, rs: d, cs: 1 };
                let q = View { data: &lc.qkv, off: h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 };
                let k = View { data: &lc.qkv, off: d + h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 };
                let vv = View { data: &lc.qkv, off: 2 * d + h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 };
                gemm(1.0, dctx_h, vv.t(), 0.0, ViewMut::rm(&mut da, t, t));
                gemm(
                    1.0,
                    View::rm(a, t, t).t(),
                    dctx_h,
                    1.0,
                    ViewMut { data: &mut dqkv, off: 2 * d + h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 },
                );
                // Softmax backward, in place: dS = A ∘ (dA − Σ_j A dA).
                for i in 0..t {
                    let ar = &a[i * t..(i + 1) * t];
                    let dr = &mut da[i * t..(i + 1) * t];
                    let dot: f64 = ar[..=i].iter().zip(&dr[..=i]).map(|(x, y)| x * y).sum();
                    for j in 0..=i {
                        dr[j] = ar[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                gemm(
                    attn_scale,
                    View::rm(&da, t, t),
                    k,
                    1.0,
                    ViewMut { data: &mut dqkv, off: h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 },
                );
                gemm(
                    attn_scale,
                    View::rm(&da, t, t).t(),
                    q,
                    1.0,
                    ViewMut { data: &mut dqkv, off: d + h * hd, rows: t, cols: hd, rs: 3 * d, cs: 1 },
                );
            }
            gemm(1.0, View::rm(&lc.h1, t, d).t(), View::rm(&dqkv, t, 3 * d), 1.0, ViewMut::rm(&mut grad[ll.w_qkv..ll.w_qkv + d * 3 * d], d, 3 * d));
            add_col_sums(&dqkv, t, 3 * d, &mut grad[ll.b_qkv..ll.b_qkv + 3 * d]);
            let mut dh1 = vec![0.0; t * d];
            gemm(1.0, View::rm(&dqkv, t, 3 * d), View::rm(&p[ll.w_qkv..ll.w_qkv + d * 3 * d], d, 3 * d).t(), 0.0, ViewMut::rm(&mut dh1, t, d));
            {
                let (gpart, rest) = grad.split_at_mut(ll.ln1_b);
                layer_norm_back(&dh1, &lc.xhat1, &lc.rstd1, &p[ll.ln1_g..][..d], &mut gpart[ll.ln1_g..ll.ln1_g + d], &mut rest[..d], &mut dx, t, d);
            }
        }

        for (r, &id) in inputs.iter().enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            let te = lay.tok_emb + id as usize * d;
            let pe = lay.pos_emb + r * d;
            for k in 0..d {
                grad[te + k] += row[k];
                grad[pe + k] += row[k];
            }
        }
        Ok(nll)
    }

    /// Autoregressive continuation of `prompt`. Stops after emitting any of
    /// `stop`, after `max_len` new tokens, or when the context is full.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        policy: DecodePolicy,
        rng: &mut R,
        max_len: usize,
        stop: &[TokenId],
    ) -> Result<Vec<TokenId>, ModelError> {
        self.check_ids(prompt)?;
        if prompt.is_empty() {
            return Err(ModelError::InvalidConfig("generation needs a nonempty prompt".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() < self.config.context_len {
            let lp = self.forward(&seq)?;
            let row = lp.row(seq.len() - 1);
            let next = match policy {
                DecodePolicy::Greedy => argmax(row),
                DecodePolicy::Temperature(tau) => sample_tempered(row, tau, rng),
            } as TokenId;
            seq.push(next);
            out.push(next);
            if stop.contains(&next) {
                break;
            }
        }
        Ok(out)
    }
}

fn check_weights(ids: &[TokenId], weights: &[f64]) -> Result<(), ModelError> {
    if ids.len() != weights.len() {
        return Err(ModelError::InvalidConfig(format!(
            "{} tokens but {} mask weights",
            ids.len(),
            weights.len()
        )));
    }
    if weights.first().is_some_and(|w| *w != 0.0) {
        return Err(ModelError::InvalidConfig("the first token has no context to be predicted from".into()));
    }
    Ok(())
}

fn last_weighted(weights: &[f64]) -> Option<usize> {
    weights.iter().rposition(|w| *w != 0.0)
}

/// Lowest index among maximal entries.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn sample_tempered<R: Rng + ?Sized>(logp: &[f64], tau: f64, rng: &mut R) -> usize {
    if tau <= 0.0 {
        return argmax(logp);
    }
    let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| ((l - m) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    argmax(logp)
}

/// Exact gradient of the mean weighted NLL over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Σ weighted NLL / Σ weights, zero when every weight is zero.
    pub loss: f64,
    pub total_weight: f64,
    pub grad: Vec<f64>,
}

pub fn gradients(params: &Parameters, batch: &[(Vec<TokenId>, Vec<f64>)]) -> Result<Gradients, ModelError> {
    let total_weight: f64 = batch.iter().flat_map(|(_, w)| w.iter()).sum();
    let mut grad = vec![0.0; params.count()];
    if total_weight == 0.0 {
        for (ids, w) in batch {
            check_weights(ids, w)?;
            params.check_ids(ids)?;
        }
        return Ok(Gradients { loss: 0.0, total_weight, grad });
    }
    let scale = 1.0 / total_weight;
    let mut nll = 0.0;
    for (ids, w) in batch {
        nll += params.accumulate_gradient(ids, w, scale, &mut grad)?;
    }
    Ok(Gradients { loss: nll / total_weight, total_weight, grad })
}

#[cfg(test)]
mod tests;
