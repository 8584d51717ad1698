//! Reverse-mode gradients of the next-token cross-entropy, taken through the
//! same `run` used at inference.

use super::model::{gelu_grad, ForwardCache, NormCache, ToyTransformer};
use crate::error::{Error, Result};

/// One training sequence. Positions `loss_from..len-1` predict their successor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_from: usize,
}

impl TrainExample {
    fn targets(&self) -> usize {
        self.tokens.len().saturating_sub(1).saturating_sub(self.loss_from)
    }
}

/// Mean cross-entropy (nats) over every target token in `batch`, and its
/// gradient with respect to the flat parameter vector.
pub fn loss_and_grad(model: &ToyTransformer, batch: &[TrainExample]) -> Result<(f64, Vec<f64>)> {
    let count: usize = batch.iter().map(TrainExample::targets).sum();
    if count == 0 {
        return Err(Error::InvalidInput("batch has no target tokens".into()));
    }
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    let mut cache = ForwardCache::default();
    let schedule = model.plain_schedule();
    let norm = 1.0 / count as f64;
    for ex in batch {
        model.check_tokens(&ex.tokens)?;
        let out = model.run(&ex.tokens, &schedule, Some(&mut cache));
        let (n, v) = (ex.tokens.len(), out.vocab_size);
        let mut dlogits = vec![0.0; n * v];
        for p in ex.loss_from..n.saturating_sub(1) {
            let row = out.logits_at(p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
            let target = ex.tokens[p + 1] as usize;
            loss -= (row[target] - max - sum.ln()) * norm;
            let d = &mut dlogits[p * v..(p + 1) * v];
            for (t, g) in d.iter_mut().enumerate() {
                *g = (row[t] - max).exp() / sum * norm;
            }
            d[target] -= norm;
        }
        backward(model, &cache, &out.final_hidden, &dlogits, &mut grad);
    }
    Ok((loss, grad))
}

/// Mean cross-entropy only.
pub fn loss(model: &ToyTransformer, batch: &[TrainExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let out = model.forward(&ex.tokens)?;
        for p in ex.loss_from..ex.tokens.len().saturating_sub(1) {
            let row = out.logits_at(p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
            total -= row[ex.tokens[p + 1] as usize] - max - sum.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("batch has no target tokens".into()));
    }
    Ok(total / count as f64)
}

/// `y = x . w + b`: accumulates `dw`, `db`, returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * k];
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for (b, &g) in db.iter_mut().zip(dyi) {
            *b += g;
        }
        for kk in 0..k {
            let xi = x[i * k + kk];
            let wrow = &w[kk * m..(kk + 1) * m];
            let dwrow = &mut dw[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                dwrow[j] += xi * dyi[j];
                acc += dyi[j] * wrow[j];
            }
            dx[i * k + kk] = acc;
        }
    }
    dx
}

fn norm_back(cache: &NormCache, gain: &[f64], dy: &[f64], d: usize, dg: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = cache.rstd.len();
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            dbias[j] += dyi[j];
            let g = dyi[j] * gain[j];
            m1 += g;
            m2 += g * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[i * d + j] = cache.rstd[i] * (dyi[j] * gain[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Split-borrow helper: one mutable tensor out of the gradient vector.
fn seg(grad: &mut [f64], off: usize, len: usize) -> &mut [f64] {
    &mut grad[off..off + len]
}

fn backward(model: &ToyTransformer, cache: &ForwardCache, z: &[f64], dlogits: &[f64], grad: &mut [f64]) {
    let cfg = model.config();
    let lay = model.layout();
    let p = model.params();
    let (n, d, v, f) = (cache.tokens.len(), cfg.model_dim, cfg.vocab_size, cfg.ff_dim);
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    // output head: logits[i,t] = b[t] + W[t,:] . z[i,:]
    let mut dz = vec![0.0; n * d];
    for i in 0..n {
        for t in 0..v {
            let g = dlogits[i * v + t];
            if g == 0.0 {
                continue;
            }
            grad[lay.bout + t] += g;
            for j in 0..d {
                grad[lay.wout + t * d + j] += g * z[i * d + j];
                dz[i * d + j] += g * p[lay.wout + t * d + j];
            }
        }
    }
    let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
    let mut dx = norm_back(&cache.lnf, &p[lay.lnf_g..lay.lnf_g + d], &dz, d, &mut dg, &mut db);
    add(seg(grad, lay.lnf_g, d), &dg);
    add(seg(grad, lay.lnf_b, d), &db);

    for bc in cache.blocks.iter().rev() {
        let o = lay.blocks[bc.block];
        // out = x1 + W2 gelu(W1 LN2(x1))
        let mut dx1 = dx.clone();
        let dact = vec_pair(grad, o.w2, f * d, o.b2, d).back(&bc.act, &p[o.w2..o.w2 + f * d], &dx, n, f, d);
        let dpre: Vec<f64> = dact.iter().zip(&bc.pre).map(|(g, &u)| g * gelu_grad(u)).collect();
        let dbn = vec_pair(grad, o.w1, d * f, o.b1, f).back(&bc.b, &p[o.w1..o.w1 + d * f], &dpre, n, d, f);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        add(
            &mut dx1,
            &norm_back(&bc.ln2, &p[o.ln2_g..o.ln2_g + d], &dbn, d, &mut dg, &mut db),
        );
        add(seg(grad, o.ln2_g, d), &dg);
        add(seg(grad, o.ln2_b, d), &db);

        // x1 = x + Wo attn(LN1(x))
        let mut dxin = dx1.clone();
        let datt = vec_pair(grad, o.wo, d * d, o.bo, d).back(&bc.att, &p[o.wo..o.wo + d * d], &dx1, n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..n {
                let probs = &bc.probs[(h * n + i) * n..(h * n + i) * n + n];
                let dai = &datt[i * d + c0..i * d + c0 + hd];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &bc.v[j * d + c0..j * d + c0 + hd];
                    dp[j] = dai.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += probs[j] * dp[j];
                    for c in 0..hd {
                        dv[j * d + c0 + c] += probs[j] * dai[c];
                    }
                }
                for j in 0..=i {
                    let ds = probs[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dq[i * d + c0 + c] += ds * bc.k[j * d + c0 + c];
                        dk[j * d + c0 + c] += ds * bc.q[i * d + c0 + c];
                    }
                }
            }
        }
        let mut da = vec_pair(grad, o.wq, d * d, o.bq, d).back(&bc.a, &p[o.wq..o.wq + d * d], &dq, n, d, d);
        add(
            &mut da,
            &vec_pair(grad, o.wk, d * d, o.bk, d).back(&bc.a, &p[o.wk..o.wk + d * d], &dk, n, d, d),
        );
        add(
            &mut da,
            &vec_pair(grad, o.wv, d * d, o.bv, d).back(&bc.a, &p[o.wv..o.wv + d * d], &dv, n, d, d),
        );
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        add(
            &mut dxin,
            &norm_back(&bc.ln1, &p[o.ln1_g..o.ln1_g + d], &da, d, &mut dg, &mut db),
        );
        add(seg(grad, o.ln1_g, d), &dg);
        add(seg(grad, o.ln1_b, d), &db);
        dx = dxin;
    }

    for (i, &t) in cache.tokens.iter().enumerate() {
        let t = t as usize;
        let row = &dx[i * d..(i + 1) * d];
        add(seg(grad, lay.tok + t * d, d), row);
        add(seg(grad, lay.pos + i * d, d), row);
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Weight and bias gradient slices of one linear layer.
struct GradPair<'a> {
    w: &'a mut [f64],
    b: &'a mut [f64],
}

/// Weight tensors are always immediately followed by their bias in the layout.
fn vec_pair(grad: &mut [f64], w_off: usize, w_len: usize, b_off: usize, b_len: usize) -> GradPair<'_> {
    debug_assert_eq!(w_off + w_len, b_off);
    let (w, rest) = grad[w_off..b_off + b_len].split_at_mut(w_len);
    GradPair { w, b: rest }
}

impl GradPair<'_> {
    fn back(self, x: &[f64], w: &[f64], dy: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        linear_back(x, w, dy, n, k, m, self.w, self.b)
    }
}
