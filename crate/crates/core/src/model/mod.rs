//! A pre-norm Transformer encoder-decoder with exact, hand-written
//! gradients.
//!
//! Token embeddings are shared between the encoder input, the decoder input
//! and the output projection. Positions use fixed sinusoidal encodings.
//! Every sub-layer is `x + drop(f(LayerNorm(x)))`, and both stacks end with a
//! final LayerNorm.

pub mod checkpoint;
pub mod decoder_state;
pub mod tensor;
pub mod transformer;

use std::fmt;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kv::Section;
use crate::rng;

pub use checkpoint::Checkpoint;
pub use decoder_state::DecoderState;
pub use tensor::{Mat, Scalar};
pub use transformer::{forward, loss_and_grad, Example};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub dropout_rate: f32,
    pub layer_drop_rate: f32,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Named presets. `small` and `base` keep the feed-forward width at four
    /// times the model width; `tiny` is for tests and quick experiments.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (d, ff, layers, heads) = match name {
            "tiny" => (32, 128, 2, 4),
            "small" => (64, 256, 2, 4),
            "base" => (128, 512, 4, 8),
            other => return Err(Error::config(format!("unknown model preset `{other}`"))),
        };
        Ok(ModelConfig {
            vocab_size,
            d_model: d,
            d_ff: ff,
            n_layers_enc: layers,
            n_layers_dec: layers,
            n_heads: heads,
            dropout_rate: 0.1,
            layer_drop_rate: 0.05,
            max_positions: 256,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("n_heads", self.n_heads),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("model config: vocab_size must be at least 2"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model config: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, r) in [("dropout_rate", self.dropout_rate), ("layer_drop_rate", self.layer_drop_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("model config: {name} {r} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Reads a `[model]`-style section: `preset` plus optional overrides.
    pub fn from_section(section: &Section, vocab_size: usize) -> Result<Self> {
        section.check_keys(&[
            "preset",
            "d_model",
            "d_ff",
            "n_layers_enc",
            "n_layers_dec",
            "n_heads",
            "dropout",
            "layer_drop",
            "max_positions",
        ])?;
        let mut c = ModelConfig::preset(section.get("preset").unwrap_or("small"), vocab_size)
            .map_err(|e| section.key_error("preset", e))?;
        c.d_model = section.parse_or("d_model", c.d_model)?;
        c.d_ff = section.parse_or("d_ff", c.d_ff)?;
        c.n_layers_enc = section.parse_or("n_layers_enc", c.n_layers_enc)?;
        c.n_layers_dec = section.parse_or("n_layers_dec", c.n_layers_dec)?;
        c.n_heads = section.parse_or("n_heads", c.n_heads)?;
        c.dropout_rate = section.parse_or("dropout", c.dropout_rate)?;
        c.layer_drop_rate = section.parse_or("layer_drop", c.layer_drop_rate)?;
        c.max_positions = section.parse_or("max_positions", c.max_positions)?;
        c.validate().map_err(|e| section.error(e))?;
        Ok(c)
    }
}

/// A named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![F::zero(); n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub q: LinIdx,
    pub k: LinIdx,
    pub v: LinIdx,
    pub o: LinIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub fc1: LinIdx,
    pub fc2: LinIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub attn_ln: LnIdx,
    pub attn: AttnIdx,
    pub ffn_ln: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub self_ln: LnIdx,
    pub self_attn: AttnIdx,
    pub cross_ln: LnIdx,
    pub cross_attn: AttnIdx,
    pub ffn_ln: LnIdx,
    pub ffn: FfnIdx,
}

/// Positions of every tensor in [`ModelParams`], in canonical order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub specs: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Embedding,
    Xavier,
    Zero,
    One,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Layout {
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let d = c.d_model;
        let embed = add("embed.weight".into(), vec![c.vocab_size, d], Init::Embedding);
        let ln = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str| LnIdx {
            g: add(format!("{p}.gain"), vec![d], Init::One),
            b: add(format!("{p}.bias"), vec![d], Init::Zero),
        };
        let lin = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str, i: usize, o: usize| LinIdx {
            w: add(format!("{p}.weight"), vec![i, o], Init::Xavier),
            b: add(format!("{p}.bias"), vec![o], Init::Zero),
        };
        let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str| AttnIdx {
            q: lin(add, &format!("{p}.q"), d, d),
            k: lin(add, &format!("{p}.k"), d, d),
            v: lin(add, &format!("{p}.v"), d, d),
            o: lin(add, &format!("{p}.o"), d, d),
        };
        let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize, p: &str| FfnIdx {
            fc1: lin(add, &format!("{p}.fc1"), d, c.d_ff),
            fc2: lin(add, &format!("{p}.fc2"), c.d_ff, d),
        };
        let mut enc = Vec::new();
        for i in 0..c.n_layers_enc {
            let p = format!("enc.{i}");
            enc.push(EncLayerIdx {
                attn_ln: ln(&mut add, &format!("{p}.self_attn_ln")),
                attn: attn(&mut add, &format!("{p}.self_attn")),
                ffn_ln: ln(&mut add, &format!("{p}.ffn_ln")),
                ffn: ffn(&mut add, &format!("{p}.ffn")),
            });
        }
        let enc_ln = ln(&mut add, "enc.final_ln");
        let mut dec = Vec::new();
        for i in 0..c.n_layers_dec {
            let p = format!("dec.{i}");
            dec.push(DecLayerIdx {
                self_ln: ln(&mut add, &format!("{p}.self_attn_ln")),
                self_attn: attn(&mut add, &format!("{p}.self_attn")),
                cross_ln: ln(&mut add, &format!("{p}.cross_attn_ln")),
                cross_attn: attn(&mut add, &format!("{p}.cross_attn")),
                ffn_ln: ln(&mut add, &format!("{p}.ffn_ln")),
                ffn: ffn(&mut add, &format!("{p}.ffn")),
            });
        }
        let dec_ln = ln(&mut add, "dec.final_ln");
        Layout {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            specs,
        }
    }
}

/// All learnable tensors, in the canonical order of the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// Random initialisation: Xavier-uniform projections, embeddings with
    /// standard deviation `d_model^-1/2`, zero biases and unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut r = rng::stream(seed, rng::label("model/init"));
        let tensors = layout
            .specs
            .iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let bound = match init {
                    Init::Embedding => 3.0f64.sqrt() / (config.d_model as f64).sqrt(),
                    Init::Xavier => (6.0 / (shape[0] + shape[1]) as f64).sqrt(),
                    _ => 0.0,
                };
                let data = (0..n)
                    .map(|_| match init {
                        Init::Zero => F::zero(),
                        Init::One => F::one(),
                        _ => F::of(r.random_range(-bound..bound)),
                    })
                    .collect();
                Tensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(ModelParams { tensors })
    }

    /// Zero tensors laid out like `config` (used for gradients).
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = Layout::new(config);
        ModelParams {
            tensors: layout
                .specs
                .iter()
                .map(|(name, shape, _)| Tensor::zeros(name.clone(), shape.clone()))
                .collect(),
        }
    }

    pub fn zeros_like<G: Scalar>(other: &ModelParams<G>) -> Self {
        ModelParams {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| G::of(x.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Checks names and shapes against `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let layout = Layout::new(config);
        if layout.specs.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "parameter set has {} tensors, config expects {}",
                self.tensors.len(),
                layout.specs.len()
            )));
        }
        for ((name, shape, _), t) in layout.specs.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::invalid(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::invalid(format!("tensor `{name}` has the wrong element count")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "V={} d={} ff={} enc={} dec={} heads={} dropout={} layerdrop={}",
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.n_layers_enc,
            self.n_layers_dec,
            self.n_heads,
            self.dropout_rate,
            self.layer_drop_rate
        )
    }
}

/// Elementwise mean of the parameters of `checkpoints`.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<ModelParams<f32>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("average_checkpoints: no checkpoints given"))?;
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.config != first.config {
            return Err(Error::invalid(format!(
                "average_checkpoints: checkpoint {i} has model config [{}], expected [{}]",
                c.config, first.config
            )));
        }
        if c.vocab_fingerprint != first.vocab_fingerprint {
            return Err(Error::invalid(format!(
                "average_checkpoints: checkpoint {i} has a different vocab_fingerprint"
            )));
        }
        for (a, b) in first.params.tensors.iter().zip(&c.params.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::invalid(format!(
                    "average_checkpoints: checkpoint {i} tensor `{}` does not match `{}`",
                    b.name, a.name
                )));
            }
        }
        if c.params.tensors.len() != first.params.tensors.len() {
            return Err(Error::invalid(format!(
                "average_checkpoints: checkpoint {i} has a different tensor count"
            )));
        }
    }
    let n = checkpoints.len() as f64;
    let mut out = first.params.clone();
    for (ti, t) in out.tensors.iter_mut().enumerate() {
        for (j, x) in t.data.iter_mut().enumerate() {
            let sum: f64 = checkpoints
                .iter()
                .map(|c| c.params.tensors[ti].data[j] as f64)
                .sum();
            *x = (sum / n) as f32;
        }
    }
    Ok(out)
}

/// The last `k` items (all of them if there are fewer).
pub fn select_last<T>(items: &[T], k: usize) -> &[T] {
    &items[items.len().saturating_sub(k)..]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt(params: ModelParams<f32>, config: &ModelConfig, step: u64) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            vocab_fingerprint: [7; 32],
            step,
            params,
            optimizer: None,
        }
    }

    fn toy() -> ModelConfig {
        let mut c = ModelConfig::preset("tiny", 11).unwrap();
        c.d_model = 8;
        c.d_ff = 16;
        c.n_heads = 2;
        c.n_layers_enc = 1;
        c.n_layers_dec = 1;
        c
    }

    #[test]
    fn config_validation() {
        let mut c = toy();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.d_ff = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::preset("huge", 10).is_err());
        let base = ModelConfig::preset("base", 10).unwrap();
        assert_eq!(base.d_ff, 4 * base.d_model);
    }

    #[test]
    fn init_matches_layout() {
        let c = toy();
        let p = ModelParams::<f32>::init(&c, 1).unwrap();
        p.check_config(&c).unwrap();
        assert!(p.all_finite());
        assert_eq!(p.tensors[0].name, "embed.weight");
        assert_eq!(p, ModelParams::<f32>::init(&c, 1).unwrap());
        assert_ne!(p, ModelParams::<f32>::init(&c, 2).unwrap());
        let mut other = c.clone();
        other.n_layers_dec = 2;
        assert!(p.check_config(&other).is_err());
    }

    #[test]
    fn averaging_identical_and_constructed() {
        let c = toy();
        let p = ModelParams::<f32>::init(&c, 3).unwrap();
        let same: Vec<_> = (0..4).map(|i| ckpt(p.clone(), &c, i)).collect();
        assert_eq!(average_checkpoints(&same).unwrap(), p);

        let mut zeros = ModelParams::<f32>::zeros(&c);
        let mut twos = ModelParams::<f32>::zeros(&c);
        zeros.tensors[0].data.iter_mut().for_each(|x| *x = 0.0);
        twos.tensors[0].data.iter_mut().for_each(|x| *x = 2.0);
        let avg = average_checkpoints(&[ckpt(zeros, &c, 1), ckpt(twos, &c, 2)]).unwrap();
        assert!(avg.tensors[0].data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn averaging_rejects_mismatch() {
        let c = toy();
        let mut other = c.clone();
        other.d_ff = 32;
        let a = ckpt(ModelParams::init(&c, 1).unwrap(), &c, 1);
        let b = ckpt(ModelParams::init(&other, 1).unwrap(), &other, 2);
        let err = average_checkpoints(&[a.clone(), b]).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
        let mut c2 = a.clone();
        c2.vocab_fingerprint = [0; 32];
        let err = average_checkpoints(&[a, c2]).unwrap_err();
        assert!(err.to_string().contains("vocab_fingerprint"));
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn last_fifteen_of_twenty() {
        let ids: Vec<u32> = (1..=20).collect();
        assert_eq!(select_last(&ids, 15), &(6..=20).collect::<Vec<_>>()[..]);
        assert_eq!(select_last(&ids[..3], 15), &[1, 2, 3]);
    }
}
