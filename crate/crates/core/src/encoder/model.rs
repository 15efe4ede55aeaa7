use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, dot, gelu, gelu_with_grad, layer_norm, layer_norm_backward, linear, linear_backward};
use super::{EncoderConfig, EncoderParams, LayerSlots, Slot};
use crate::corpus::InputSequence;
use crate::error::{Error, Result};
use crate::losses::Logits;
use crate::{argmax, NUM_CLASSES};

/// Dropout is only drawn in `Train` mode, and only when the configured rate
/// is positive.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

struct LayerCache {
    /// rows entering the block
    rows: usize,
    /// rows whose outputs are computed; only `[CLS]` in the last block
    q_rows: usize,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    /// GELU derivative at each pre-activation.
    f_deriv: Vec<f64>,
    f_act: Vec<f64>,
    drop_ffn: Option<Vec<f64>>,
}

struct SeqCache {
    ids: Vec<usize>,
    valid: usize,
    layers: Vec<LayerCache>,
    xhat_f: Vec<f64>,
    rstd_f: f64,
    pooled: Vec<f64>,
}

/// Activations of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    config: EncoderConfig,
    seqs: Vec<SeqCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }
}

fn check_sequence(cfg: &EncoderConfig, seq: &InputSequence) -> Result<()> {
    if seq.length == 0 || seq.length > seq.ids.len() {
        return Err(Error::Shape(format!("sequence length {} vs {} ids", seq.length, seq.ids.len())));
    }
    if seq.ids.len() > cfg.max_len {
        return Err(Error::Shape(format!("sequence of {} ids exceeds max_len {}", seq.ids.len(), cfg.max_len)));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Invalid(format!("token id {bad} out of range for vocab size {}", cfg.vocab_size)));
    }
    Ok(())
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

fn forward_seq(p: &EncoderParams, seq: &InputSequence, mode: &mut Mode<'_>, keep: bool) -> (Logits, Option<SeqCache>) {
    let cfg = p.config();
    let lay = p.layout();
    let d = cfg.dim;
    let f = cfg.ffn_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_all = seq.ids.len();
    let valid = seq.length;

    let tok = p.get(lay.tok_emb);
    let pos = p.get(lay.pos_emb);
    let mut x = vec![0.0; t_all * d];
    for (t, &id) in seq.ids.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        row.copy_from_slice(&tok[id * d..(id + 1) * d]);
        ops::axpy(1.0, &pos[t * d..(t + 1) * d], row);
    }

    let mut caches = Vec::with_capacity(if keep { cfg.layers } else { 0 });
    let mut rows = t_all;
    for (l, ls) in lay.layers.iter().enumerate() {
        let q_rows = if l + 1 == cfg.layers { 1 } else { rows };
        let mut h1 = vec![0.0; rows * d];
        let (xhat1, rstd1) = layer_norm(&x, rows, d, p.get(ls.ln1_gain), p.get(ls.ln1_bias), &mut h1);
        let mut q = vec![0.0; q_rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        linear(&h1, q_rows, p.get(ls.wq), p.get(ls.bq), d, d, &mut q);
        linear(&h1, rows, p.get(ls.wk), p.get(ls.bk), d, d, &mut k);
        linear(&h1, rows, p.get(ls.wv), p.get(ls.bv), d, d, &mut v);

        let mut probs = vec![0.0; heads * q_rows * rows];
        let mut ctx = vec![0.0; q_rows * d];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..q_rows {
                let pr = &mut probs[(h * q_rows + i) * rows..(h * q_rows + i + 1) * rows];
                let qi = &q[i * d + hs.start..i * d + hs.end];
                for (j, s) in pr.iter_mut().enumerate() {
                    *s = if j < valid { scale * dot(qi, &k[j * d + hs.start..j * d + hs.end]) } else { f64::NEG_INFINITY };
                }
                let m = pr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in pr.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                let ci = &mut ctx[i * d + hs.start..i * d + hs.end];
                for (j, s) in pr.iter_mut().enumerate() {
                    *s /= sum;
                    ops::axpy(*s, &v[j * d + hs.start..j * d + hs.end], ci);
                }
            }
        }

        let mut attn = vec![0.0; q_rows * d];
        linear(&ctx, q_rows, p.get(ls.wo), p.get(ls.bo), d, d, &mut attn);
        let drop_attn = match mode {
            Mode::Train(rng) if cfg.dropout_rate > 0.0 => {
                let m = dropout_mask(rng, q_rows * d, cfg.dropout_rate);
                attn.iter_mut().zip(&m).for_each(|(a, s)| *a *= s);
                Some(m)
            }
            _ => None,
        };
        let mut x1 = x[..q_rows * d].to_vec();
        ops::axpy(1.0, &attn, &mut x1);

        let mut h2 = vec![0.0; q_rows * d];
        let (xhat2, rstd2) = layer_norm(&x1, q_rows, d, p.get(ls.ln2_gain), p.get(ls.ln2_bias), &mut h2);
        let mut f_pre = vec![0.0; q_rows * f];
        linear(&h2, q_rows, p.get(ls.w1), p.get(ls.b1), d, f, &mut f_pre);
        let (f_act, f_deriv): (Vec<f64>, Vec<f64>) = if keep {
            f_pre.iter().map(|&z| gelu_with_grad(z)).unzip()
        } else {
            (f_pre.iter().map(|&z| gelu(z)).collect(), Vec::new())
        };
        let mut out = vec![0.0; q_rows * d];
        linear(&f_act, q_rows, p.get(ls.w2), p.get(ls.b2), f, d, &mut out);
        let drop_ffn = match mode {
            Mode::Train(rng) if cfg.dropout_rate > 0.0 => {
                let m = dropout_mask(rng, q_rows * d, cfg.dropout_rate);
                out.iter_mut().zip(&m).for_each(|(a, s)| *a *= s);
                Some(m)
            }
            _ => None,
        };
        ops::axpy(1.0, &out, &mut x1);
        x = x1;

        if keep {
            caches.push(LayerCache {
                rows,
                q_rows,
                xhat1,
                rstd1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                drop_attn,
                xhat2,
                rstd2,
                h2,
                f_deriv,
                f_act,
                drop_ffn,
            });
        }
        rows = q_rows;
    }

    let mut pooled = vec![0.0; d];
    let (xhat_f, rstd_f) = layer_norm(&x[..d], 1, d, p.get(lay.lnf_gain), p.get(lay.lnf_bias), &mut pooled);
    let mut out = [0.0; NUM_CLASSES];
    linear(&pooled, 1, p.get(lay.head_w), p.get(lay.head_b), d, NUM_CLASSES, &mut out);

    let cache = keep.then(|| SeqCache { ids: seq.ids.clone(), valid, layers: caches, xhat_f, rstd_f: rstd_f[0], pooled });
    (out, cache)
}

/// Logits for every sequence plus the cache needed by [`backward`].
pub fn forward(params: &EncoderParams, batch: &[InputSequence], mut mode: Mode<'_>) -> Result<(Vec<Logits>, ForwardCache)> {
    let cfg = params.config();
    for seq in batch {
        check_sequence(cfg, seq)?;
    }
    let mut out = Vec::with_capacity(batch.len());
    let mut seqs = Vec::with_capacity(batch.len());
    for seq in batch {
        let (l, c) = forward_seq(params, seq, &mut mode, true);
        out.push(l);
        seqs.push(c.expect("cache kept"));
    }
    Ok((out, ForwardCache { config: cfg.clone(), seqs }))
}

/// Inference-only forward pass; keeps no activations.
pub fn logits(params: &EncoderParams, batch: &[InputSequence]) -> Result<Vec<Logits>> {
    let cfg = params.config();
    for seq in batch {
        check_sequence(cfg, seq)?;
    }
    Ok(batch.iter().map(|s| forward_seq(params, s, &mut Mode::Eval, false).0).collect())
}

pub fn predict(params: &EncoderParams, batch: &[InputSequence]) -> Result<Vec<usize>> {
    Ok(logits(params, batch)?.iter().map(|l| argmax(l)).collect())
}

/// Two disjoint blocks, `a` declared before `b`.
fn pair_mut(data: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = data.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

/// Copy of the parameter buffer with every weight matrix transposed in place
/// of the original; other arrays are left zero.
fn transposed_weights(p: &EncoderParams) -> Vec<f64> {
    let lay = p.layout();
    let mut out = vec![0.0; p.len()];
    let mats = lay.layers.iter().flat_map(|l| [l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]).chain([lay.head_w]);
    for s in mats {
        ops::transpose_into(p.get(s), s.rows, s.cols, &mut out[s.range()]);
    }
    out
}

fn backward_layer(p: &EncoderParams, wt: &[f64], g: &mut [f64], ls: &LayerSlots, c: &LayerCache, valid: usize, dx: Vec<f64>) -> Vec<f64> {
    let cfg = p.config();
    let d = cfg.dim;
    let f = cfg.ffn_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (rows, q_rows) = (c.rows, c.q_rows);

    // feed-forward sublayer
    let mut dx1 = dx.clone();
    let mut dout = dx;
    if let Some(m) = &c.drop_ffn {
        dout.iter_mut().zip(m).for_each(|(a, s)| *a *= s);
    }
    let mut df = vec![0.0; q_rows * f];
    {
        let (dw, db) = pair_mut(g, ls.w2, ls.b2);
        linear_backward(&c.f_act, q_rows, &wt[ls.w2.range()], f, d, &dout, dw, db, Some(&mut df));
    }
    for (dz, &g) in df.iter_mut().zip(&c.f_deriv) {
        *dz *= g;
    }
    let mut dh2 = vec![0.0; q_rows * d];
    {
        let (dw, db) = pair_mut(g, ls.w1, ls.b1);
        linear_backward(&c.h2, q_rows, &wt[ls.w1.range()], d, f, &df, dw, db, Some(&mut dh2));
    }
    {
        let (dg, db) = pair_mut(g, ls.ln2_gain, ls.ln2_bias);
        layer_norm_backward(&c.xhat2, &c.rstd2, q_rows, d, p.get(ls.ln2_gain), &dh2, &mut dx1, dg, db);
    }

    // attention sublayer
    let mut dattn = dx1.clone();
    if let Some(m) = &c.drop_attn {
        dattn.iter_mut().zip(m).for_each(|(a, s)| *a *= s);
    }
    let mut dctx = vec![0.0; q_rows * d];
    {
        let (dw, db) = pair_mut(g, ls.wo, ls.bo);
        linear_backward(&c.ctx, q_rows, &wt[ls.wo.range()], d, d, &dattn, dw, db, Some(&mut dctx));
    }
    let mut dq = vec![0.0; q_rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; valid];
    for h in 0..cfg.heads {
        let (s0, s1) = (h * dh, (h + 1) * dh);
        for i in 0..q_rows {
            let pr = &c.probs[(h * q_rows + i) * rows..(h * q_rows + i) * rows + valid];
            let dci = &dctx[i * d + s0..i * d + s1];
            let mut acc = 0.0;
            for j in 0..valid {
                dp[j] = dot(dci, &c.v[j * d + s0..j * d + s1]);
                acc += pr[j] * dp[j];
            }
            for j in 0..valid {
                ops::axpy(pr[j], dci, &mut dv[j * d + s0..j * d + s1]);
                let ds = pr[j] * (dp[j] - acc) * scale;
                ops::axpy(ds, &c.k[j * d + s0..j * d + s1], &mut dq[i * d + s0..i * d + s1]);
                ops::axpy(ds, &c.q[i * d + s0..i * d + s1], &mut dk[j * d + s0..j * d + s1]);
            }
        }
    }
    let mut dh1 = vec![0.0; rows * d];
    {
        let (dw, db) = pair_mut(g, ls.wq, ls.bq);
        linear_backward(&c.h1, q_rows, &wt[ls.wq.range()], d, d, &dq, dw, db, Some(&mut dh1[..q_rows * d]));
    }
    {
        let (dw, db) = pair_mut(g, ls.wk, ls.bk);
        linear_backward(&c.h1, rows, &wt[ls.wk.range()], d, d, &dk, dw, db, Some(&mut dh1));
    }
    {
        let (dw, db) = pair_mut(g, ls.wv, ls.bv);
        linear_backward(&c.h1, rows, &wt[ls.wv.range()], d, d, &dv, dw, db, Some(&mut dh1));
    }
    let mut dx_in = vec![0.0; rows * d];
    dx_in[..q_rows * d].copy_from_slice(&dx1);
    {
        let (dg, db) = pair_mut(g, ls.ln1_gain, ls.ln1_bias);
        layer_norm_backward(&c.xhat1, &c.rstd1, rows, d, p.get(ls.ln1_gain), &dh1, &mut dx_in, dg, db);
    }
    dx_in
}

/// Gradients of `sum_b <logits_b, grad_logits_b>` with respect to every
/// parameter, shaped like `params`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, grad_logits: &[Logits]) -> Result<EncoderParams> {
    if cache.config != *params.config() {
        return Err(Error::Shape("forward cache was produced with a different encoder config".into()));
    }
    if grad_logits.len() != cache.seqs.len() {
        return Err(Error::Shape(format!(
            "{} gradient rows for a batch of {}",
            grad_logits.len(),
            cache.seqs.len()
        )));
    }
    let cfg = params.config();
    let lay = params.layout().clone();
    let d = cfg.dim;
    let wt = transposed_weights(params);
    let mut grads = params.zeros_like();
    let g = grads.as_mut_slice();
    for (sc, dl) in cache.seqs.iter().zip(grad_logits) {
        let mut dz = vec![0.0; d];
        {
            let (dw, db) = pair_mut(g, lay.head_w, lay.head_b);
            linear_backward(&sc.pooled, 1, &wt[lay.head_w.range()], d, NUM_CLASSES, dl, dw, db, Some(&mut dz));
        }
        let out_rows = sc.layers.last().map_or(sc.ids.len(), |c| c.q_rows);
        let mut dx = vec![0.0; out_rows * d];
        {
            let (dg, db) = pair_mut(g, lay.lnf_gain, lay.lnf_bias);
            layer_norm_backward(&sc.xhat_f, &[sc.rstd_f], 1, d, params.get(lay.lnf_gain), &dz, &mut dx[..d], dg, db);
        }
        for (ls, lc) in lay.layers.iter().zip(&sc.layers).rev() {
            dx = backward_layer(params, &wt, g, ls, lc, sc.valid, dx);
        }
        for (t, &id) in sc.ids.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            ops::axpy(1.0, row, &mut g[lay.tok_emb.offset + id * d..lay.tok_emb.offset + (id + 1) * d]);
            ops::axpy(1.0, row, &mut g[lay.pos_emb.offset + t * d..lay.pos_emb.offset + (t + 1) * d]);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_input, PAD};
    use crate::encoder::init_params;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig { vocab_size: 30, dim: 16, layers, heads: 2, ffn_dim: 24, max_len: 32, dropout_rate: 0.0 }
    }

    fn seq(s1: &[usize], s2: &[usize]) -> InputSequence {
        assemble_input(s1, s2, 32).unwrap()
    }

    #[test]
    fn identical_rows_identical_logits() {
        let p = init_params(&cfg(2), 1).unwrap();
        let s = seq(&[5, 6, 7], &[8, 9]);
        let l = logits(&p, &[s.clone(), s]).unwrap();
        assert_eq!(l[0], l[1]);
    }

    #[test]
    fn padding_does_not_change_logits() {
        let p = init_params(&cfg(2), 2).unwrap();
        let s = seq(&[5, 6, 7], &[8, 9, 10]);
        assert_eq!(s.length, 9);
        let padded = s.padded(32);
        assert_eq!(padded.ids[31], PAD);
        let a = logits(&p, &[s]).unwrap();
        let b = logits(&p, &[padded]).unwrap();
        for k in 0..3 {
            assert!((a[0][k] - b[0][k]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_layers_is_head_on_cls_embedding() {
        let p = init_params(&cfg(0), 3).unwrap();
        let s = seq(&[5, 6], &[7]);
        let got = logits(&p, &[s]).unwrap()[0];
        let lay = p.layout();
        let d = 16;
        let cls = crate::corpus::CLS;
        let x: Vec<f64> = (0..d).map(|i| p.get(lay.tok_emb)[cls * d + i] + p.get(lay.pos_emb)[i]).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let z: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        for c in 0..3 {
            let mut e = p.get(lay.head_b)[c];
            for i in 0..d {
                e += z[i] * p.get(lay.head_w)[i * 3 + c];
            }
            assert!((e - got[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_logits_give_zero_grads() {
        let p = init_params(&cfg(2), 4).unwrap();
        let (_, cache) = forward(&p, &[seq(&[5, 6], &[7, 8])], Mode::Eval).unwrap();
        let g = backward(&p, &cache, &[[0.0; 3]]).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unused_position_rows_get_no_gradient() {
        let p = init_params(&cfg(2), 5).unwrap();
        let batch = [seq(&[5, 6], &[7, 8]), seq(&[9], &[10, 11, 12])];
        let (_, cache) = forward(&p, &batch, Mode::Eval).unwrap();
        let g = backward(&p, &cache, &[[0.3, -0.1, -0.2], [0.1, 0.2, -0.3]]).unwrap();
        let max_len = batch.iter().map(|s| s.ids.len()).max().unwrap();
        let pos = g.get(p.layout().pos_emb);
        assert!(pos[max_len * 16..].iter().all(|&x| x == 0.0));
        assert!(pos[..16].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn rejects_bad_ids() {
        let p = init_params(&cfg(1), 6).unwrap();
        assert!(logits(&p, &[seq(&[5, 99], &[7])]).is_err());
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let p = init_params(&cfg(1), 6).unwrap();
        let (_, cache) = forward(&p, &[seq(&[5], &[7])], Mode::Eval).unwrap();
        assert!(backward(&p, &cache, &[[0.0; 3], [0.0; 3]]).is_err());
    }

    #[test]
    fn zero_sublayer_outputs_make_blocks_identity() {
        let c = cfg(2);
        let mut p = init_params(&c, 7).unwrap();
        let lay = p.layout().clone();
        for ls in &lay.layers {
            for s in [ls.wo, ls.bo, ls.w2, ls.b2] {
                p.get_mut(s).fill(0.0);
            }
        }
        let s = seq(&[5, 6, 7], &[8]);
        let got = logits(&p, &[s.clone()]).unwrap()[0];
        let mut z = init_params(&EncoderConfig { layers: 0, ..c }, 7).unwrap();
        for (name, slot) in z.layout().clone().named() {
            let src = lay.named().find(|(n, _)| *n == name).unwrap().1;
            z.get_mut(slot).copy_from_slice(p.get(src));
        }
        let want = logits(&z, &[s]).unwrap()[0];
        assert_eq!(got, want);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let c = EncoderConfig { dropout_rate: 0.5, ..cfg(2) };
        let p = init_params(&c, 8).unwrap();
        let s = seq(&[5, 6, 7], &[8, 9]);
        let eval = logits(&p, &[s.clone()]).unwrap();
        let mut rng = crate::seed::rng_from(1);
        let (train, _) = forward(&p, &[s], Mode::Train(&mut rng)).unwrap();
        assert_eq!(forward(&p, &[seq(&[5, 6, 7], &[8, 9])], Mode::Eval).unwrap().0, eval);
        assert_ne!(train, eval);
    }

    #[test]
    fn forward_backward_bit_reproducible() {
        let p = init_params(&cfg(2), 9).unwrap();
        let batch = [seq(&[5, 6, 7], &[8, 9]), seq(&[10], &[11])];
        let run = || {
            let (l, c) = forward(&p, &batch, Mode::Eval).unwrap();
            let g = backward(&p, &c, &[[0.2, -0.1, -0.1], [-0.3, 0.1, 0.2]]).unwrap();
            (l, g)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1.as_slice(), g2.as_slice());
    }
}
