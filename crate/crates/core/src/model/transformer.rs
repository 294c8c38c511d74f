//! Batched forward and backward passes.
//!
//! A batch is packed without padding: the source tokens of all examples are
//! stacked into one matrix and the decoder inputs into another, and
//! attention runs per example over its own rows. The projection layers see
//! the whole packed matrix at once.

use rand::Rng as _;

use super::tensor::{axpy, dot, gemm, log_softmax_in_place, Mat, Scalar};
use super::{AttnIdx, FfnIdx, Layout, LinIdx, LnIdx, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::TokenId;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;

const LN_EPS: f64 = 1e-5;

/// One training example. `tgt` is the full target sequence starting with
/// `<s>` and normally ending with `</s>`; the decoder reads `tgt[..n-1]` and
/// predicts `tgt[1..]`. Positions whose gold token is `<pad>` carry no loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

/// Row ranges of the examples inside a packed matrix.
#[derive(Debug, Clone)]
pub(crate) struct Segs {
    pub start: Vec<usize>,
    pub len: Vec<usize>,
}

impl Segs {
    pub fn from_lens(lens: impl IntoIterator<Item = usize>) -> Segs {
        let mut start = Vec::new();
        let mut len = Vec::new();
        let mut at = 0;
        for l in lens {
            start.push(at);
            len.push(l);
            at += l;
        }
        Segs { start, len }
    }
}

/// Fixed sinusoidal position encoding of `pos` added onto `row`.
pub(crate) fn add_position<F: Scalar>(row: &mut [F], pos: usize) {
    let d = row.len();
    for i in (0..d).step_by(2) {
        let freq = (10000f64).powf(-(i as f64) / d as f64);
        let angle = pos as f64 * freq;
        row[i] = row[i] + F::of(angle.sin());
        if i + 1 < d {
            row[i + 1] = row[i + 1] + F::of(angle.cos());
        }
    }
}

/// Dropout and layer-drop decisions for one forward pass.
pub(crate) struct Noise {
    train: bool,
    seed: u64,
    dropout: f64,
    layer_drop: f64,
    site: u64,
}

impl Noise {
    pub fn new(config: &ModelConfig, train: bool, seed: u64) -> Self {
        Noise {
            train,
            seed,
            dropout: config.dropout_rate as f64,
            layer_drop: config.layer_drop_rate as f64,
            site: 0,
        }
    }

    /// Inverted-dropout mask for `n` values, or `None` when inactive.
    pub fn mask<F: Scalar>(&mut self, n: usize) -> Option<Vec<F>> {
        self.site += 1;
        if !self.train || self.dropout == 0.0 {
            return None;
        }
        let mut r = rng::stream(rng::mix(self.seed, rng::label("dropout")), self.site);
        let keep = F::of(1.0 / (1.0 - self.dropout));
        Some(
            (0..n)
                .map(|_| if r.random::<f64>() < self.dropout { F::zero() } else { keep })
                .collect(),
        )
    }

    /// Whether a layer runs, and the scale applied to its residual branches.
    /// Training skips layers with probability `layer_drop`; evaluation runs
    /// every layer with branches scaled by `1 - layer_drop`.
    pub fn layer<F: Scalar>(&self, stack: u64, layer: usize) -> Option<F> {
        if !self.train {
            return Some(F::of(1.0 - self.layer_drop));
        }
        if self.layer_drop == 0.0 {
            return Some(F::one());
        }
        let mut r = rng::stream(rng::mix(self.seed, rng::label("layerdrop")), stack * 4096 + layer as u64);
        if r.random::<f64>() < self.layer_drop {
            None
        } else {
            Some(F::one())
        }
    }
}

fn apply_mask<F: Scalar>(x: &mut Mat<F>, mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.data.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

pub(crate) fn linear_fwd<F: Scalar>(p: &ModelParams<F>, idx: LinIdx, x: &Mat<F>) -> Mat<F> {
    let w = &p.tensors[idx.w];
    let b = &p.tensors[idx.b].data;
    let (inp, out) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.cols, inp);
    let mut y = Mat::zeros(x.rows, out);
    gemm(x.rows, inp, out, &x.data, false, &w.data, false, &mut y.data, false);
    for r in 0..x.rows {
        axpy(F::one(), b, y.row_mut(r));
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn linear_bwd<F: Scalar>(
    p: &ModelParams<F>,
    g: &mut ModelParams<F>,
    idx: LinIdx,
    x: &Mat<F>,
    dy: &Mat<F>,
) -> Mat<F> {
    let w = &p.tensors[idx.w];
    let (inp, out) = (w.shape[0], w.shape[1]);
    gemm(inp, x.rows, out, &x.data, true, &dy.data, false, &mut g.tensors[idx.w].data, true);
    let db = &mut g.tensors[idx.b].data;
    for r in 0..dy.rows {
        axpy(F::one(), dy.row(r), db);
    }
    let mut dx = Mat::zeros(x.rows, inp);
    gemm(x.rows, out, inp, &dy.data, false, &w.data, true, &mut dx.data, false);
    dx
}

pub(crate) struct LnCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

pub(crate) fn ln_fwd<F: Scalar>(p: &ModelParams<F>, idx: LnIdx, x: &Mat<F>) -> (Mat<F>, LnCache<F>) {
    let g = &p.tensors[idx.g].data;
    let b = &p.tensors[idx.b].data;
    let d = x.cols;
    let n = F::of(d as f64);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut y = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().cloned().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
        }
        let yr = y.row_mut(r);
        let xh = xhat.row(r);
        for j in 0..d {
            yr[j] = g[j] * xh[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub(crate) fn ln_bwd<F: Scalar>(
    p: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    idx: LnIdx,
    cache: &LnCache<F>,
    dy: &Mat<F>,
) -> Mat<F> {
    let d = dy.cols;
    let n = F::of(d as f64);
    let gain = &p.tensors[idx.g].data;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        {
            let dg = &mut grads.tensors[idx.g].data;
            for j in 0..d {
                dg[j] = dg[j] + dyr[j] * xh[j];
            }
        }
        {
            let db = &mut grads.tensors[idx.b].data;
            axpy(F::one(), dyr, db);
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().cloned().sum::<F>() / n;
        let mean_dx = dot(&dxhat, xh) / n;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

pub(crate) struct FfnCache<F> {
    input: Mat<F>,
    pre: Mat<F>,
    act: Mat<F>,
}

pub(crate) fn ffn_fwd<F: Scalar>(p: &ModelParams<F>, idx: FfnIdx, x: &Mat<F>) -> (Mat<F>, FfnCache<F>) {
    let pre = linear_fwd(p, idx.fc1, x);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
    let out = linear_fwd(p, idx.fc2, &act);
    (
        out,
        FfnCache {
            input: x.clone(),
            pre,
            act,
        },
    )
}

fn ffn_bwd<F: Scalar>(
    p: &ModelParams<F>,
    g: &mut ModelParams<F>,
    idx: FfnIdx,
    c: &FfnCache<F>,
    dy: &Mat<F>,
) -> Mat<F> {
    let mut dact = linear_bwd(p, g, idx.fc2, &c.act, dy);
    for (d, &u) in dact.data.iter_mut().zip(&c.pre.data) {
        if u <= F::zero() {
            *d = F::zero();
        }
    }
    linear_bwd(p, g, idx.fc1, &c.input, &dact)
}

pub(crate) struct AttnCache<F> {
    xq: Mat<F>,
    xkv: Option<Mat<F>>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    probs: Vec<F>,
    ctx: Mat<F>,
}

/// Multi-head attention of `xq` over `xkv` (self-attention when `None`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_fwd<F: Scalar>(
    p: &ModelParams<F>,
    idx: AttnIdx,
    heads: usize,
    xq: &Mat<F>,
    xkv: Option<&Mat<F>>,
    qsegs: &Segs,
    ksegs: &Segs,
    causal: bool,
) -> (Mat<F>, AttnCache<F>) {
    let kv_in = xkv.unwrap_or(xq);
    let q = linear_fwd(p, idx.q, xq);
    let k = linear_fwd(p, idx.k, kv_in);
    let v = linear_fwd(p, idx.v, kv_in);
    let d = q.cols;
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Mat::zeros(q.rows, d);
    let mut probs = Vec::new();
    let mut row = Vec::new();
    for s in 0..qsegs.start.len() {
        let (qs, lq) = (qsegs.start[s], qsegs.len[s]);
        let (ks, lk) = (ksegs.start[s], ksegs.len[s]);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = &q.row(qs + i)[off..off + dh];
                let jmax = if causal { (i + 1).min(lk) } else { lk };
                row.clear();
                row.resize(lk, F::zero());
                let mut max = F::neg_infinity();
                for j in 0..jmax {
                    let sc = dot(qrow, &k.row(ks + j)[off..off + dh]) * scale;
                    row[j] = sc;
                    max = max.max(sc);
                }
                let mut z = F::zero();
                for r in row.iter_mut().take(jmax) {
                    *r = (*r - max).exp();
                    z = z + *r;
                }
                for r in row.iter_mut().take(jmax) {
                    *r = *r / z;
                }
                let crow = &mut ctx.data[(qs + i) * d + off..(qs + i) * d + off + dh];
                for j in 0..jmax {
                    axpy(row[j], &v.row(ks + j)[off..off + dh], crow);
                }
                probs.extend_from_slice(&row);
            }
        }
    }
    let out = linear_fwd(p, idx.o, &ctx);
    (
        out,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.cloned(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns `(d xq, d xkv)`; for self-attention both terms are summed into the
/// first and the second is `None`.
#[allow(clippy::too_many_arguments)]
fn attn_bwd<F: Scalar>(
    p: &ModelParams<F>,
    g: &mut ModelParams<F>,
    idx: AttnIdx,
    heads: usize,
    c: &AttnCache<F>,
    dout: &Mat<F>,
    qsegs: &Segs,
    ksegs: &Segs,
    causal: bool,
) -> (Mat<F>, Option<Mat<F>>) {
    let dctx = linear_bwd(p, g, idx.o, &c.ctx, dout);
    let d = c.q.cols;
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = Mat::zeros(c.q.rows, d);
    let mut dk = Mat::zeros(c.k.rows, d);
    let mut dv = Mat::zeros(c.v.rows, d);
    let mut dp = Vec::new();
    let mut at = 0;
    for s in 0..qsegs.start.len() {
        let (qs, lq) = (qsegs.start[s], qsegs.len[s]);
        let (ks, lk) = (ksegs.start[s], ksegs.len[s]);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let jmax = if causal { (i + 1).min(lk) } else { lk };
                let prow = &c.probs[at..at + lk];
                at += lk;
                let dcrow = &dctx.row(qs + i)[off..off + dh];
                dp.clear();
                let mut rowdot = F::zero();
                for j in 0..jmax {
                    let v = dot(dcrow, &c.v.row(ks + j)[off..off + dh]);
                    dp.push(v);
                    rowdot = rowdot + v * prow[j];
                    axpy(prow[j], dcrow, &mut dv.data[(ks + j) * d + off..(ks + j) * d + off + dh]);
                }
                let qrow = &c.q.row(qs + i)[off..off + dh];
                for j in 0..jmax {
                    let ds = prow[j] * (dp[j] - rowdot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    axpy(ds, &c.k.row(ks + j)[off..off + dh], &mut dq.data[(qs + i) * d + off..(qs + i) * d + off + dh]);
                    axpy(ds, qrow, &mut dk.data[(ks + j) * d + off..(ks + j) * d + off + dh]);
                }
            }
        }
    }
    let mut dxq = linear_bwd(p, g, idx.q, &c.xq, &dq);
    let kv_in = c.xkv.as_ref().unwrap_or(&c.xq);
    let mut dxkv = linear_bwd(p, g, idx.k, kv_in, &dk);
    dxkv.add_assign(&linear_bwd(p, g, idx.v, kv_in, &dv));
    if c.xkv.is_none() {
        dxq.add_assign(&dxkv);
        (dxq, None)
    } else {
        (dxq, Some(dxkv))
    }
}

struct EncLayerCache<F> {
    scale: F,
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    m1: Option<Vec<F>>,
    ln2: LnCache<F>,
    ffn: FfnCache<F>,
    m2: Option<Vec<F>>,
}

struct DecLayerCache<F> {
    scale: F,
    ln1: LnCache<F>,
    self_attn: AttnCache<F>,
    m1: Option<Vec<F>>,
    ln2: LnCache<F>,
    cross: AttnCache<F>,
    m2: Option<Vec<F>>,
    ln3: LnCache<F>,
    ffn: FfnCache<F>,
    m3: Option<Vec<F>>,
}

/// The encoder output for a packed source batch, plus what backward needs.
pub(crate) struct EncoderPass<F> {
    pub out: Mat<F>,
    pub segs: Segs,
    ids: Vec<TokenId>,
    emb_mask: Option<Vec<F>>,
    layers: Vec<Option<EncLayerCache<F>>>,
    final_ln: LnCache<F>,
}

fn embed<F: Scalar>(p: &ModelParams<F>, lay: &Layout, ids: &[TokenId], segs: &Segs, d: usize) -> Mat<F> {
    let e = &p.tensors[lay.embed].data;
    let scale = F::of((d as f64).sqrt());
    let mut x = Mat::zeros(ids.len(), d);
    for s in 0..segs.start.len() {
        for pos in 0..segs.len[s] {
            let r = segs.start[s] + pos;
            let id = ids[r] as usize;
            let row = x.row_mut(r);
            for j in 0..d {
                row[j] = e[id * d + j] * scale;
            }
            add_position(row, pos);
        }
    }
    x
}

fn scatter_embed<F: Scalar>(g: &mut ModelParams<F>, lay: &Layout, ids: &[TokenId], dx: &Mat<F>) {
    let d = dx.cols;
    let scale = F::of((d as f64).sqrt());
    let de = &mut g.tensors[lay.embed].data;
    for (r, &id) in ids.iter().enumerate() {
        axpy(scale, dx.row(r), &mut de[id as usize * d..(id as usize + 1) * d]);
    }
}

pub(crate) fn encode<F: Scalar>(
    p: &ModelParams<F>,
    c: &ModelConfig,
    lay: &Layout,
    srcs: &[&[TokenId]],
    noise: &mut Noise,
) -> EncoderPass<F> {
    let segs = Segs::from_lens(srcs.iter().map(|s| s.len()));
    let ids: Vec<TokenId> = srcs.iter().flat_map(|s| s.iter().copied()).collect();
    let mut x = embed(p, lay, &ids, &segs, c.d_model);
    let emb_mask = noise.mask(x.data.len());
    apply_mask(&mut x, &emb_mask);
    let mut layers = Vec::with_capacity(lay.enc.len());
    for (li, l) in lay.enc.iter().enumerate() {
        let Some(scale) = noise.layer::<F>(0, li) else {
            layers.push(None);
            continue;
        };
        let (h1, ln1) = ln_fwd(p, l.attn_ln, &x);
        let (mut a, attn) = attn_fwd(p, l.attn, c.n_heads, &h1, None, &segs, &segs, false);
        let m1 = noise.mask(a.data.len());
        apply_mask(&mut a, &m1);
        x.add_scaled(&a, scale);
        let (h2, ln2) = ln_fwd(p, l.ffn_ln, &x);
        let (mut f, ffn) = ffn_fwd(p, l.ffn, &h2);
        let m2 = noise.mask(f.data.len());
        apply_mask(&mut f, &m2);
        x.add_scaled(&f, scale);
        layers.push(Some(EncLayerCache {
            scale,
            ln1,
            attn,
            m1,
            ln2,
            ffn,
            m2,
        }));
    }
    let (out, final_ln) = ln_fwd(p, lay.enc_ln, &x);
    EncoderPass {
        out,
        segs,
        ids,
        emb_mask,
        layers,
        final_ln,
    }
}

/// Full teacher-forced pass over a batch.
pub(crate) struct BatchPass<F> {
    pub enc: EncoderPass<F>,
    pub tsegs: Segs,
    tgt_ids: Vec<TokenId>,
    emb_mask: Option<Vec<F>>,
    layers: Vec<Option<DecLayerCache<F>>>,
    final_ln: LnCache<F>,
    hidden: Mat<F>,
    /// Log-probabilities, one row per decoder input position.
    pub logprobs: Mat<F>,
}

fn check_ids(ids: &[TokenId], vocab: usize, what: &str) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("{what}: token id {bad} is outside vocab of {vocab}")));
    }
    Ok(())
}

pub(crate) fn run_batch<F: Scalar>(
    p: &ModelParams<F>,
    c: &ModelConfig,
    srcs: &[&[TokenId]],
    tgt_in: &[&[TokenId]],
    train: bool,
    seed: u64,
) -> Result<BatchPass<F>> {
    c.validate()?;
    p.check_config(c)?;
    for (s, t) in srcs.iter().zip(tgt_in) {
        if s.is_empty() {
            return Err(Error::invalid("source sequence is empty"));
        }
        if t.is_empty() || t[0] != BOS_ID {
            return Err(Error::invalid("target prefix must begin with <s>"));
        }
        if s.len() > c.max_positions || t.len() > c.max_positions {
            return Err(Error::invalid(format!(
                "sequence of length {} exceeds max_positions {}",
                s.len().max(t.len()),
                c.max_positions
            )));
        }
        check_ids(s, c.vocab_size, "source")?;
        check_ids(t, c.vocab_size, "target")?;
    }
    let lay = Layout::new(c);
    let mut noise = Noise::new(c, train, seed);
    let enc = encode(p, c, &lay, srcs, &mut noise);

    let tsegs = Segs::from_lens(tgt_in.iter().map(|t| t.len()));
    let tgt_ids: Vec<TokenId> = tgt_in.iter().flat_map(|t| t.iter().copied()).collect();
    let mut x = embed(p, &lay, &tgt_ids, &tsegs, c.d_model);
    let emb_mask = noise.mask(x.data.len());
    apply_mask(&mut x, &emb_mask);
    let mut layers = Vec::with_capacity(lay.dec.len());
    for (li, l) in lay.dec.iter().enumerate() {
        let Some(scale) = noise.layer::<F>(1, li) else {
            layers.push(None);
            continue;
        };
        let (h1, ln1) = ln_fwd(p, l.self_ln, &x);
        let (mut a, self_attn) = attn_fwd(p, l.self_attn, c.n_heads, &h1, None, &tsegs, &tsegs, true);
        let m1 = noise.mask(a.data.len());
        apply_mask(&mut a, &m1);
        x.add_scaled(&a, scale);
        let (h2, ln2) = ln_fwd(p, l.cross_ln, &x);
        let (mut ca, cross) = attn_fwd(p, l.cross_attn, c.n_heads, &h2, Some(&enc.out), &tsegs, &enc.segs, false);
        let m2 = noise.mask(ca.data.len());
        apply_mask(&mut ca, &m2);
        x.add_scaled(&ca, scale);
        let (h3, ln3) = ln_fwd(p, l.ffn_ln, &x);
        let (mut f, ffn) = ffn_fwd(p, l.ffn, &h3);
        let m3 = noise.mask(f.data.len());
        apply_mask(&mut f, &m3);
        x.add_scaled(&f, scale);
        layers.push(Some(DecLayerCache {
            scale,
            ln1,
            self_attn,
            m1,
            ln2,
            cross,
            m2,
            ln3,
            ffn,
            m3,
        }));
    }
    let (hidden, final_ln) = ln_fwd(p, lay.dec_ln, &x);
    let e = &p.tensors[lay.embed].data;
    let mut logprobs = Mat::zeros(hidden.rows, c.vocab_size);
    gemm(hidden.rows, c.d_model, c.vocab_size, &hidden.data, false, e, true, &mut logprobs.data, false);
    for r in 0..logprobs.rows {
        log_softmax_in_place(logprobs.row_mut(r));
    }
    Ok(BatchPass {
        enc,
        tsegs,
        tgt_ids,
        emb_mask,
        layers,
        final_ln,
        hidden,
        logprobs,
    })
}

impl<F: Scalar> BatchPass<F> {
    /// Backpropagates `dlogits` (gradient with respect to the logits).
    pub fn backward(&self, p: &ModelParams<F>, c: &ModelConfig, dlogits: &Mat<F>) -> ModelParams<F> {
        let lay = Layout::new(c);
        let mut g = ModelParams::zeros_like(p);
        let (n, d, v) = (self.hidden.rows, c.d_model, c.vocab_size);
        gemm(v, n, d, &dlogits.data, true, &self.hidden.data, false, &mut g.tensors[lay.embed].data, true);
        let mut dh = Mat::zeros(n, d);
        gemm(n, v, d, &dlogits.data, false, &p.tensors[lay.embed].data, false, &mut dh.data, false);
        let mut dx = ln_bwd(p, &mut g, lay.dec_ln, &self.final_ln, &dh);
        let mut denc = Mat::zeros(self.enc.out.rows, d);
        for (l, cache) in lay.dec.iter().zip(&self.layers).rev() {
            let Some(k) = cache else { continue };
            let mut br = dx.clone();
            br.scale(k.scale);
            apply_mask(&mut br, &k.m3);
            let dh3 = ffn_bwd(p, &mut g, l.ffn, &k.ffn, &br);
            dx.add_assign(&ln_bwd(p, &mut g, l.ffn_ln, &k.ln3, &dh3));

            let mut br = dx.clone();
            br.scale(k.scale);
            apply_mask(&mut br, &k.m2);
            let (dh2, dkv) = attn_bwd(p, &mut g, l.cross_attn, c.n_heads, &k.cross, &br, &self.tsegs, &self.enc.segs, false);
            dx.add_assign(&ln_bwd(p, &mut g, l.cross_ln, &k.ln2, &dh2));
            denc.add_assign(&dkv.expect("cross attention has separate keys"));

            let mut br = dx.clone();
            br.scale(k.scale);
            apply_mask(&mut br, &k.m1);
            let (dh1, _) = attn_bwd(p, &mut g, l.self_attn, c.n_heads, &k.self_attn, &br, &self.tsegs, &self.tsegs, true);
            dx.add_assign(&ln_bwd(p, &mut g, l.self_ln, &k.ln1, &dh1));
        }
        apply_mask(&mut dx, &self.emb_mask);
        scatter_embed(&mut g, &lay, &self.tgt_ids, &dx);

        let enc = &self.enc;
        let mut dx = ln_bwd(p, &mut g, lay.enc_ln, &enc.final_ln, &denc);
        for (l, cache) in lay.enc.iter().zip(&enc.layers).rev() {
            let Some(k) = cache else { continue };
            let mut br = dx.clone();
            br.scale(k.scale);
            apply_mask(&mut br, &k.m2);
            let dh2 = ffn_bwd(p, &mut g, l.ffn, &k.ffn, &br);
            dx.add_assign(&ln_bwd(p, &mut g, l.ffn_ln, &k.ln2, &dh2));

            let mut br = dx.clone();
            br.scale(k.scale);
            apply_mask(&mut br, &k.m1);
            let (dh1, _) = attn_bwd(p, &mut g, l.attn, c.n_heads, &k.attn, &br, &enc.segs, &enc.segs, false);
            dx.add_assign(&ln_bwd(p, &mut g, l.attn_ln, &k.ln1, &dh1));
        }
        apply_mask(&mut dx, &enc.emb_mask);
        scatter_embed(&mut g, &lay, &enc.ids, &dx);
        g
    }
}

/// Next-token log-probabilities for every position of `tgt_prefix`.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    src_ids: &[TokenId],
    tgt_prefix_ids: &[TokenId],
    train_mode: bool,
    seed: u64,
) -> Result<Vec<Vec<F>>> {
    let pass = run_batch(params, config, &[src_ids], &[tgt_prefix_ids], train_mode, seed)?;
    Ok((0..pass.logprobs.rows).map(|r| pass.logprobs.row(r).to_vec()).collect())
}

/// Label-smoothed cross-entropy over the batch and its exact gradient.
///
/// Each non-pad target position contributes
/// `(1 - eps) * NLL(gold) + eps * mean_{j != pad} NLL(j)`; the loss is the
/// mean over those positions. Dropout and layer drop are active, driven by
/// `seed`.
pub fn loss_and_grad<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &[Example],
    label_smoothing: f64,
    seed: u64,
) -> Result<(F, ModelParams<F>)> {
    let (loss, grads, _) = loss_and_grad_counted(params, config, batch, label_smoothing, seed)?;
    Ok((loss, grads))
}

/// As [`loss_and_grad`], also returning the number of scored positions.
pub fn loss_and_grad_counted<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &[Example],
    label_smoothing: f64,
    seed: u64,
) -> Result<(F, ModelParams<F>, usize)> {
    if batch.is_empty() {
        return Err(Error::invalid("loss_and_grad: empty batch"));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::invalid(format!(
            "loss_and_grad: label smoothing {label_smoothing} must lie in [0, 1)"
        )));
    }
    if let Some(e) = batch.iter().find(|e| e.tgt.len() < 2) {
        return Err(Error::invalid(format!(
            "loss_and_grad: target {:?} needs <s> and at least one token",
            e.tgt
        )));
    }
    let golds: Vec<TokenId> = batch.iter().flat_map(|e| e.tgt[1..].iter().copied()).collect();
    let scored = golds.iter().filter(|&&g| g != PAD_ID).count();
    if scored == 0 {
        return Err(Error::invalid("loss_and_grad: every target position is padding"));
    }
    let srcs: Vec<&[TokenId]> = batch.iter().map(|e| e.src.as_slice()).collect();
    let tins: Vec<&[TokenId]> = batch.iter().map(|e| &e.tgt[..e.tgt.len() - 1]).collect();
    let pass = run_batch(params, config, &srcs, &tins, true, seed)?;

    let v = config.vocab_size;
    let eps = label_smoothing;
    let smooth = eps / (v - 1) as f64;
    let inv_n = 1.0 / scored as f64;
    let mut loss = 0.0f64;
    let mut dlogits = Mat::zeros(pass.logprobs.rows, v);
    for (r, &gold) in golds.iter().enumerate() {
        if gold == PAD_ID {
            continue;
        }
        let lp = pass.logprobs.row(r);
        let mut mean_nll = 0.0;
        for (j, &x) in lp.iter().enumerate() {
            if j as TokenId != PAD_ID {
                mean_nll -= x.f64();
            }
        }
        mean_nll /= (v - 1) as f64;
        loss += (1.0 - eps) * -lp[gold as usize].f64() + eps * mean_nll;
        let out = dlogits.row_mut(r);
        for j in 0..v {
            let mut w = if j as TokenId == PAD_ID { 0.0 } else { smooth };
            if j == gold as usize {
                w += 1.0 - eps;
            }
            out[j] = F::of((lp[j].f64().exp() - w) * inv_n);
        }
    }
    let grads = pass.backward(params, config, &dlogits);
    Ok((F::of(loss * inv_n), grads, scored))
}

/// Projected keys and values of an encoder memory for cross-attention.
pub(crate) fn attn_fwd_kv<F: Scalar>(p: &ModelParams<F>, idx: AttnIdx, mem: &Mat<F>) -> (Mat<F>, Mat<F>) {
    (linear_fwd(p, idx.k, mem), linear_fwd(p, idx.v, mem))
}
