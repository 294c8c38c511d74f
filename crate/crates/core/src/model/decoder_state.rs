//! Incremental decoding with cached keys and values.

use std::rc::Rc;

use super::tensor::{axpy, dot, gemm, log_softmax_in_place, Mat, Scalar};
use super::transformer::{add_position, attn_fwd_kv, encode, ffn_fwd, linear_fwd, ln_fwd, Noise};
use super::{Layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Decoder state for one hypothesis: the encoder memory (shared between
/// clones) and the self-attention keys and values of the tokens fed so far.
/// Always runs in evaluation mode.
#[derive(Clone)]
pub struct DecoderState<'a, F: Scalar = f32> {
    params: &'a ModelParams<F>,
    config: &'a ModelConfig,
    layout: Rc<Layout>,
    cross: Rc<Vec<(Mat<F>, Mat<F>)>>,
    self_kv: Vec<(Vec<F>, Vec<F>)>,
    pos: usize,
    scale: F,
}

impl<'a, F: Scalar> DecoderState<'a, F> {
    /// Encodes `src` and prepares an empty target prefix.
    pub fn new(params: &'a ModelParams<F>, config: &'a ModelConfig, src: &[TokenId]) -> Result<Self> {
        config.validate()?;
        params.check_config(config)?;
        if src.is_empty() {
            return Err(Error::invalid("source sequence is empty"));
        }
        if src.len() > config.max_positions {
            return Err(Error::invalid(format!(
                "source of length {} exceeds max_positions {}",
                src.len(),
                config.max_positions
            )));
        }
        if let Some(&bad) = src.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::invalid(format!("source token id {bad} is outside the vocab")));
        }
        let layout = Layout::new(config);
        let mut noise = Noise::new(config, false, 0);
        let enc = encode(params, config, &layout, &[src], &mut noise);
        let cross = layout
            .dec
            .iter()
            .map(|l| attn_fwd_kv(params, l.cross_attn, &enc.out))
            .collect();
        let scale = noise.layer::<F>(1, 0).expect("evaluation never skips layers");
        Ok(DecoderState {
            params,
            config,
            self_kv: vec![(Vec::new(), Vec::new()); layout.dec.len()],
            layout: Rc::new(layout),
            cross: Rc::new(cross),
            pos: 0,
            scale,
        })
    }

    /// Number of target tokens fed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Feeds `token` at the next position and returns the log-probabilities
    /// of the token that follows it.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<F>> {
        let c = self.config;
        let p = self.params;
        if token as usize >= c.vocab_size {
            return Err(Error::invalid(format!("target token id {token} is outside the vocab")));
        }
        if self.pos >= c.max_positions {
            return Err(Error::invalid(format!(
                "target length exceeds max_positions {}",
                c.max_positions
            )));
        }
        let d = c.d_model;
        let heads = c.n_heads;
        let dh = d / heads;
        let att_scale = F::of(1.0 / (dh as f64).sqrt());
        let lay = &*self.layout;
        let e = &p.tensors[lay.embed].data;
        let emb = F::of((d as f64).sqrt());
        let mut x = Mat::zeros(1, d);
        for j in 0..d {
            x.data[j] = e[token as usize * d + j] * emb;
        }
        add_position(&mut x.data, self.pos);

        for (li, l) in lay.dec.iter().enumerate() {
            let (h1, _) = ln_fwd(p, l.self_ln, &x);
            let q = linear_fwd(p, l.self_attn.q, &h1);
            let k = linear_fwd(p, l.self_attn.k, &h1);
            let v = linear_fwd(p, l.self_attn.v, &h1);
            let (ks, vs) = &mut self.self_kv[li];
            ks.extend_from_slice(&k.data);
            vs.extend_from_slice(&v.data);
            let n = self.pos + 1;
            let ctx = attend(&q.data, ks, vs, n, heads, dh, att_scale);
            let a = linear_fwd(p, l.self_attn.o, &ctx);
            x.add_scaled(&a, self.scale);

            let (h2, _) = ln_fwd(p, l.cross_ln, &x);
            let q = linear_fwd(p, l.cross_attn.q, &h2);
            let (ck, cv) = &self.cross[li];
            let ctx = attend(&q.data, &ck.data, &cv.data, ck.rows, heads, dh, att_scale);
            let a = linear_fwd(p, l.cross_attn.o, &ctx);
            x.add_scaled(&a, self.scale);

            let (h3, _) = ln_fwd(p, l.ffn_ln, &x);
            let (f, _) = ffn_fwd(p, l.ffn, &h3);
            x.add_scaled(&f, self.scale);
        }
        let (h, _) = ln_fwd(p, lay.dec_ln, &x);
        let mut out = vec![F::zero(); c.vocab_size];
        gemm(1, d, c.vocab_size, &h.data, false, e, true, &mut out, false);
        log_softmax_in_place(&mut out);
        self.pos += 1;
        Ok(out)
    }
}

fn attend<F: Scalar>(q: &[F], ks: &[F], vs: &[F], n: usize, heads: usize, dh: usize, scale: F) -> Mat<F> {
    let d = heads * dh;
    let mut ctx = Mat::zeros(1, d);
    let mut w = vec![F::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        let mut max = F::neg_infinity();
        for j in 0..n {
            w[j] = dot(qh, &ks[j * d + off..j * d + off + dh]) * scale;
            max = max.max(w[j]);
        }
        let mut z = F::zero();
        for x in w.iter_mut() {
            *x = (*x - max).exp();
            z = z + *x;
        }
        let out = &mut ctx.data[off..off + dh];
        for j in 0..n {
            axpy(w[j] / z, &vs[j * d + off..j * d + off + dh], out);
        }
    }
    ctx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;

    #[test]
    fn incremental_matches_full_forward() {
        let mut config = ModelConfig::preset("tiny", 23).unwrap();
        config.layer_drop_rate = 0.2;
        let params = ModelParams::<f64>::init(&config, 7).unwrap();
        let src = [5, 9, 11, 4, 4, 20];
        let tgt = [1, 7, 12, 3, 22, 8];
        let full = forward(&params, &config, &src, &tgt, false, 0).unwrap();
        let mut state = DecoderState::new(&params, &config, &src).unwrap();
        for (i, &t) in tgt.iter().enumerate() {
            let step = state.step(t).unwrap();
            for (a, b) in step.iter().zip(&full[i]) {
                assert!((a - b).abs() < 1e-10, "position {i}: {a} vs {b}");
            }
        }
        assert_eq!(state.len(), tgt.len());
    }

    #[test]
    fn clones_diverge_independently() {
        let config = ModelConfig::preset("tiny", 16).unwrap();
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        let mut a = DecoderState::new(&params, &config, &[4, 5, 6]).unwrap();
        a.step(1).unwrap();
        let mut b = a.clone();
        let pa = a.step(7).unwrap();
        let pb = b.step(8).unwrap();
        let pa2 = {
            let mut c = DecoderState::new(&params, &config, &[4, 5, 6]).unwrap();
            c.step(1).unwrap();
            c.step(7).unwrap()
        };
        assert_eq!(pa, pa2);
        assert_ne!(pa, pb);
    }

    #[test]
    fn rejects_out_of_vocab() {
        let config = ModelConfig::preset("tiny", 16).unwrap();
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        assert!(DecoderState::new(&params, &config, &[16]).is_err());
        assert!(DecoderState::new(&params, &config, &[]).is_err());
        let mut s = DecoderState::new(&params, &config, &[3]).unwrap();
        assert!(s.step(99).is_err());
    }
}
