//! Pre-norm decoder-only transformer over a flat `f64` parameter vector.
//!
//! Each block is `x + Attn(LN1(x))` followed by `x + FF(LN2(x))`. Blocks are
//! pure functions of their input stream, so a forward pass is described by a
//! *schedule* of block indices: the plain pass runs `0, 1, .., L-1`, while
//! representation recycling at layer `l*` runs block `l*` twice in a row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ToyConfig;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// A named tensor inside the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub wout: usize,
    pub bout: usize,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ToyConfig) -> Self {
        let (v, d, c, f) = (cfg.vocab_size, cfg.model_dim, cfg.context, cfg.ff_dim);
        let mut tensors = Vec::new();
        let mut next = 0usize;
        let mut alloc = |name: String, shape: Vec<usize>| {
            let offset = next;
            next += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let tok = alloc("token_embedding".into(), vec![v, d]);
        let pos = alloc("position_embedding".into(), vec![c, d]);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut t = |suffix: &str, shape: Vec<usize>| alloc(format!("blocks.{l}.{suffix}"), shape);
                BlockOffsets {
                    ln1_g: t("ln1.gain", vec![d]),
                    ln1_b: t("ln1.bias", vec![d]),
                    wq: t("attn.query.weight", vec![d, d]),
                    bq: t("attn.query.bias", vec![d]),
                    wk: t("attn.key.weight", vec![d, d]),
                    bk: t("attn.key.bias", vec![d]),
                    wv: t("attn.value.weight", vec![d, d]),
                    bv: t("attn.value.bias", vec![d]),
                    wo: t("attn.out.weight", vec![d, d]),
                    bo: t("attn.out.bias", vec![d]),
                    ln2_g: t("ln2.gain", vec![d]),
                    ln2_b: t("ln2.bias", vec![d]),
                    w1: t("ff.in.weight", vec![d, f]),
                    b1: t("ff.in.bias", vec![f]),
                    w2: t("ff.out.weight", vec![f, d]),
                    b2: t("ff.out.bias", vec![d]),
                }
            })
            .collect();
        let lnf_g = alloc("final_norm.gain".into(), vec![d]);
        let lnf_b = alloc("final_norm.bias".into(), vec![d]);
        let wout = alloc("output.weight".into(), vec![v, d]);
        let bout = alloc("output.bias".into(), vec![v]);
        Self {
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            wout,
            bout,
            tensors,
            total: next,
        }
    }
}

/// Weights and configuration of the toy model. Immutable during inference
/// and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    config: ToyConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Everything a forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub positions: usize,
    pub vocab_size: usize,
    pub model_dim: usize,
    /// `positions x vocab_size`.
    pub logits: Vec<f64>,
    /// Residual stream after the embedding (index 0) and after every block application.
    pub hidden: Vec<Vec<f64>>,
    /// Last-layer representation after the final norm: the input of the output head.
    pub final_hidden: Vec<f64>,
}

impl ForwardOutput {
    pub fn logits_at(&self, p: usize) -> &[f64] {
        &self.logits[p * self.vocab_size..(p + 1) * self.vocab_size]
    }

    pub fn final_hidden_at(&self, p: usize) -> &[f64] {
        &self.final_hidden[p * self.model_dim..(p + 1) * self.model_dim]
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits_at(self.positions - 1)
    }

    pub fn last_hidden(&self) -> &[f64] {
        self.final_hidden_at(self.positions - 1)
    }
}

/// Saved activations of one layer norm.
#[derive(Debug, Clone, Default)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Saved activations of one block application.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub block: usize,
    pub ln1: NormCache,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `heads x n x n`, zero above the diagonal.
    pub probs: Vec<f64>,
    pub att: Vec<f64>,
    pub ln2: NormCache,
    pub b: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardCache {
    pub tokens: Vec<u32>,
    pub blocks: Vec<BlockCache>,
    pub lnf: NormCache,
}

/// `out[n x m] = x[n x k] . w[k x m] + bias`.
pub(crate) fn linear(x: &[f64], w: &[f64], bias: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        out.extend_from_slice(bias);
        let row = &mut out[i * m..(i + 1) * m];
        for (kk, &a) in x[i * k..(i + 1) * k].iter().enumerate() {
            if a != 0.0 {
                for (o, &wv) in row.iter_mut().zip(&w[kk * m..(kk + 1) * m]) {
                    *o += a * wv;
                }
            }
        }
    }
    out
}

pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> (Vec<f64>, NormCache) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut cache = NormCache {
        xhat: vec![0.0; x.len()],
        rstd: vec![0.0; n],
    };
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        cache.rstd[i] = rstd;
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            cache.xhat[i * d + j] = xh;
            out[i * d + j] = gain[j] * xh + bias[j];
        }
    }
    (out, cache)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl ToyTransformer {
    /// Random initialization from `config.seed`.
    pub fn new(config: ToyConfig) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let cfg = model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.model_dim as f64;
        let f = cfg.ff_dim as f64;
        let resid = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let infos = model.layout.tensors.clone();
        for info in infos {
            let name = info.name.as_str();
            let std = if name.ends_with("gain") {
                None
            } else if name.ends_with("bias") {
                Some(0.0)
            } else if name.contains("embedding") {
                Some(0.5)
            } else if name.ends_with("attn.out.weight") {
                Some(resid / d.sqrt())
            } else if name.ends_with("ff.out.weight") {
                Some(resid / f.sqrt())
            } else {
                Some(1.0 / d.sqrt())
            };
            let slot = &mut model.params[info.offset..info.offset + info.len()];
            match std {
                None => slot.fill(1.0),
                Some(0.0) => slot.fill(0.0),
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("positive std");
                    slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
                }
            }
        }
        Ok(model)
    }

    /// Every parameter zero (layer-norm gains included).
    pub fn zeros(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ToyConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.layout.tensors.iter().find(|t| t.name == name)
    }

    /// Named tensor view, e.g. `"blocks.0.attn.query.weight"`.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let info = self.info(name)?;
        Some(&self.params[info.offset..info.offset + info.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let info = self.info(name)?.clone();
        Some(&mut self.params[info.offset..info.offset + info.len()])
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds the context of {}",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 0..{}",
                self.config.layers
            )));
        }
        Ok(())
    }

    /// Plain forward pass.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        Ok(self.run(tokens, &self.plain_schedule(), None))
    }

    /// Forward pass that applies block `layer` a second time to its own output
    /// before continuing with the blocks above it.
    pub fn recycle_forward(&self, tokens: &[u32], layer: usize) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        self.check_layer(layer)?;
        Ok(self.run(tokens, &self.recycle_schedule(layer), None))
    }

    pub(crate) fn plain_schedule(&self) -> Vec<usize> {
        (0..self.config.layers).collect()
    }

    pub(crate) fn recycle_schedule(&self, layer: usize) -> Vec<usize> {
        let mut s: Vec<usize> = (0..=layer).collect();
        s.extend(layer..self.config.layers);
        s
    }

    /// Output-head logits `W_out h + b` for one final-norm representation.
    pub fn head_logits(&self, h: &[f64]) -> Vec<f64> {
        let (v, d) = (self.config.vocab_size, self.config.model_dim);
        let w = self.slice(self.layout.wout, v * d);
        let b = self.slice(self.layout.bout, v);
        (0..v)
            .map(|t| b[t] + w[t * d..(t + 1) * d].iter().zip(h).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        schedule: &[usize],
        mut cache: Option<&mut ForwardCache>,
    ) -> ForwardOutput {
        let cfg = &self.config;
        let (n, d, v) = (tokens.len(), cfg.model_dim, cfg.vocab_size);
        let tok = self.slice(self.layout.tok, v * d);
        let pos = self.slice(self.layout.pos, cfg.context * d);
        let mut x = Vec::with_capacity(n * d);
        for (p, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            x.extend(
                tok[t * d..(t + 1) * d]
                    .iter()
                    .zip(&pos[p * d..(p + 1) * d])
                    .map(|(a, b)| a + b),
            );
        }
        if let Some(c) = cache.as_deref_mut() {
            c.tokens = tokens.to_vec();
            c.blocks.clear();
        }
        let mut hidden = vec![x.clone()];
        for &l in schedule {
            let (next, bc) = self.block_forward(l, &x, n, cache.is_some());
            if let (Some(c), Some(bc)) = (cache.as_deref_mut(), bc) {
                c.blocks.push(bc);
            }
            x = next;
            hidden.push(x.clone());
        }
        let (z, lnf) = layer_norm(
            &x,
            self.slice(self.layout.lnf_g, d),
            self.slice(self.layout.lnf_b, d),
            d,
        );
        let w = self.slice(self.layout.wout, v * d);
        let b = self.slice(self.layout.bout, v);
        let mut logits = Vec::with_capacity(n * v);
        for i in 0..n {
            let zi = &z[i * d..(i + 1) * d];
            for t in 0..v {
                logits.push(b[t] + w[t * d..(t + 1) * d].iter().zip(zi).map(|(a, x)| a * x).sum::<f64>());
            }
        }
        if let Some(c) = cache {
            c.lnf = lnf;
        }
        ForwardOutput {
            positions: n,
            vocab_size: v,
            model_dim: d,
            logits,
            hidden,
            final_hidden: z,
        }
    }

    fn block_forward(&self, l: usize, x: &[f64], n: usize, keep: bool) -> (Vec<f64>, Option<BlockCache>) {
        let cfg = &self.config;
        let (d, f, heads) = (cfg.model_dim, cfg.ff_dim, cfg.heads);
        let hd = cfg.head_dim();
        let o = self.layout.blocks[l];
        let p = |off: usize, len: usize| self.slice(off, len);

        let (a, ln1) = layer_norm(x, p(o.ln1_g, d), p(o.ln1_b, d), d);
        let q = linear(&a, p(o.wq, d * d), p(o.bq, d), n, d, d);
        let k = linear(&a, p(o.wk, d * d), p(o.bk, d), n, d, d);
        let vv = linear(&a, p(o.wv, d * d), p(o.bv, d), n, d, d);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut att = vec![0.0; n * d];
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..n {
                let qi = &q[i * d + c0..i * d + c0 + hd];
                let row = &mut probs[(h * n + i) * n..(h * n + i) * n + n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d + c0..j * d + c0 + hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut().take(i + 1) {
                    *r /= sum;
                }
                let out = &mut att[i * d + c0..i * d + c0 + hd];
                for j in 0..=i {
                    let pj = row[j];
                    for (o, &vj) in out.iter_mut().zip(&vv[j * d + c0..j * d + c0 + hd]) {
                        *o += pj * vj;
                    }
                }
            }
        }
        let proj = linear(&att, p(o.wo, d * d), p(o.bo, d), n, d, d);
        let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let (b, ln2) = layer_norm(&x1, p(o.ln2_g, d), p(o.ln2_b, d), d);
        let pre = linear(&b, p(o.w1, d * f), p(o.b1, f), n, d, f);
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let ff = linear(&act, p(o.w2, f * d), p(o.b2, d), n, f, d);
        let out: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();

        let cache = keep.then_some(BlockCache {
            block: l,
            ln1,
            a,
            q,
            k,
            v: vv,
            probs,
            att,
            ln2,
            b,
            pre,
            act,
        });
        (out, cache)
    }
}
