//! Speech Transformer with optional text or audio context integrated into
//! every decoder layer through a gated combination.

mod checkpoint;
pub mod gradcheck;
mod layers;


use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureMatrix, NUM_MEL};
use crate::error::{usage, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{conv2d_out_dim, Graph, ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{attention, attention_bias, gate_combine, positional_encoding, Fwd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    None,
    Text,
    Audio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub context_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_channels: usize,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub context_mode: ContextMode,
    /// Ignored when `context_mode` is `none`.
    pub integration: Integration,
    pub dropout: f64,
    pub distance_penalty: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 3,
            decoder_layers: 2,
            context_layers: 1,
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            conv_channels: 8,
            n_mels: NUM_MEL,
            vocab_size: 64,
            context_mode: ContextMode::None,
            integration: Integration::Sequential,
            dropout: 0.2,
            distance_penalty: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return usage(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return usage("need at least one encoder and one decoder layer");
        }
        if self.context_mode != ContextMode::None && self.context_layers == 0 {
            return usage("context models need at least one context layer");
        }
        if self.vocab_size < 5 {
            return usage(format!("vocab size {} too small", self.vocab_size));
        }
        if self.conv_channels == 0 || self.ffn_dim == 0 || self.n_mels < 4 {
            return usage("conv_channels, ffn_dim and n_mels must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return usage(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn has_context(&self) -> bool {
        self.context_mode != ContextMode::None
    }

    /// Frequency bins left after the two stride-2 convolutions.
    pub fn conv_freq_bins(&self) -> usize {
        let f1 = conv2d_out_dim(self.n_mels, 3, 2, 1).unwrap_or(0);
        conv2d_out_dim(f1, 3, 2, 1).unwrap_or(0)
    }
}

/// Encoder output length for `frames` input frames.
/// Shortest input the two stride-2 convolutions accept.
pub const MIN_FRAMES: usize = 4;

pub fn encoder_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

/// Context passed alongside a sample.
#[derive(Debug, Clone, Copy)]
pub enum ContextInput<'a> {
    None,
    Text(&'a [usize]),
    Audio(&'a FeatureMatrix),
}

pub struct ForwardOutput {
    /// `T_dec × V`.
    pub logits: Var,
    /// One `T_dec × d_model` gate tensor per decoder layer; empty without context.
    pub lambdas: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
        .expect("shape and data agree")
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Init<'_> {
    fn add(&mut self, name: String, t: Tensor) -> Result<()> {
        self.store.add(name, t)?;
        Ok(())
    }

    fn rng(&self, name: &str) -> Rng {
        rng::stream(self.seed, name)
    }

    fn linear(&mut self, p: &str, i: usize, o: usize, bias: bool) -> Result<()> {
        let w = xavier(&mut self.rng(&format!("{p}.w")), i, o, &[i, o]);
        self.add(format!("{p}.w"), w)?;
        if bias {
            self.add(format!("{p}.b"), Tensor::zeros(&[o]))?;
        }
        Ok(())
    }

    fn norm(&mut self, p: &str, d: usize) -> Result<()> {
        self.add(format!("{p}.g"), Tensor::full(&[d], 1.0))?;
        self.add(format!("{p}.b"), Tensor::zeros(&[d]))
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<()> {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{p}.{part}"), d, d, true)?;
        }
        Ok(())
    }

    fn ffn(&mut self, p: &str, d: usize, f: usize) -> Result<()> {
        self.linear(&format!("{p}.ff1"), d, f, true)?;
        self.linear(&format!("{p}.ff2"), f, d, true)
    }

    fn encoder_layer(&mut self, p: &str, d: usize, f: usize) -> Result<()> {
        self.norm(&format!("{p}.ln1"), d)?;
        self.attn(&format!("{p}.att"), d)?;
        self.norm(&format!("{p}.ln2"), d)?;
        self.ffn(p, d, f)
    }

    fn conv(&mut self, p: &str, ci: usize, co: usize) -> Result<()> {
        let fan_in = ci * 9;
        let a = (6.0 / fan_in as f64).sqrt();
        let mut r = self.rng(&format!("{p}.w"));
        let w = (0..co * ci * 9).map(|_| r.gen_range(-a..a)).collect();
        self.add(format!("{p}.w"), Tensor::new(vec![co, ci, 3, 3], w)?)?;
        self.add(format!("{p}.b"), Tensor::zeros(&[co]))
    }
}

impl Model {
    /// Fresh model. Each parameter is drawn from a stream keyed by its name,
    /// so a parameter's initial value does not depend on which others exist.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed };
        let (d, f, c) = (config.d_model, config.ffn_dim, config.conv_channels);
        init.conv("enc.conv1", 1, c)?;
        init.conv("enc.conv2", c, c)?;
        init.linear("enc.proj", c * config.conv_freq_bins(), d, true)?;
        for i in 0..config.encoder_layers {
            init.encoder_layer(&format!("enc.l{i}"), d, f)?;
        }
        init.norm("enc.ln", d)?;

        let mut r = init.rng("dec.emb");
        let std = (d as f64).powf(-0.5);
        let emb = (0..config.vocab_size * d).map(|_| r.gen_range(-std..std) * 3f64.sqrt()).collect();
        init.add("dec.emb".into(), Tensor::new(vec![config.vocab_size, d], emb)?)?;
        for i in 0..config.decoder_layers {
            let p = format!("dec.l{i}");
            init.norm(&format!("{p}.ln1"), d)?;
            init.attn(&format!("{p}.self"), d)?;
            init.norm(&format!("{p}.ln2"), d)?;
            init.attn(&format!("{p}.cross"), d)?;
            init.norm(&format!("{p}.ln3"), d)?;
            init.ffn(&p, d, f)?;
        }
        init.norm("dec.ln", d)?;
        init.linear("dec.out", d, config.vocab_size, true)?;

        if config.has_context() {
            for j in 0..config.context_layers {
                init.encoder_layer(&format!("ctx.l{j}"), d, f)?;
            }
            init.norm("ctx.ln", d)?;
            for i in 0..config.decoder_layers {
                let p = format!("dec.l{i}");
                init.norm(&format!("{p}.lnc"), d)?;
                init.attn(&format!("{p}.catt"), d)?;
                init.linear(&format!("{p}.gate.h"), d, d, false)?;
                init.linear(&format!("{p}.gate.s"), d, d, false)?;
            }
        }
        Ok(Model { config, params: store })
    }

    /// Copies every parameter of `base` whose name and shape match. Returns
    /// the number copied; the rest keep their fresh initialisation.
    pub fn init_from(&mut self, base: &Model) -> usize {
        let mut n = 0;
        for (_, p) in self.params.iter_mut() {
            if let Some(src) = base.params.by_name(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Excludes the speech encoder from training.
    pub fn freeze_encoder(&mut self) {
        self.params.set_trainable("enc.", false);
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    fn check_context(&self, ctx: &ContextInput) -> Result<()> {
        let ok = matches!(
            (self.config.context_mode, ctx),
            (_, ContextInput::None)
                | (ContextMode::Text, ContextInput::Text(_))
                | (ContextMode::Audio, ContextInput::Audio(_))
        );
        if ok {
            Ok(())
        } else {
            usage(format!(
                "{:?} context given to a model with context mode {:?}",
                ctx, self.config.context_mode
            ))
        }
    }

    /// Builds the full forward pass on `fwd`'s graph. `dec_in` starts with BOS.
    pub fn forward(
        &self,
        fwd: &mut Fwd,
        features: &FeatureMatrix,
        context: ContextInput,
        dec_in: &[usize],
    ) -> Result<ForwardOutput> {
        self.check_context(&context)?;
        let enc = fwd.speech_encoder(&self.config, features)?;
        let ctx = self.context_var(fwd, context)?;
        fwd.decoder(&self.config, dec_in, enc, ctx)
    }

    fn context_var(&self, fwd: &mut Fwd, context: ContextInput) -> Result<Option<Var>> {
        match context {
            ContextInput::None => Ok(None),
            ContextInput::Text(ids) => fwd.context_text(&self.config, ids),
            ContextInput::Audio(f) => fwd.context_audio(&self.config, f),
        }
    }

    /// Encoder states for inference.
    pub fn encode(&self, features: &FeatureMatrix) -> Result<Tensor> {
        let mut fwd = Fwd::eval(&self.params);
        let v = fwd.speech_encoder(&self.config, features)?;
        Ok(fwd.g.value(v).clone())
    }

    /// Context encoding for inference; `None` when the context is empty.
    pub fn encode_context(&self, context: ContextInput) -> Result<Option<Tensor>> {
        self.check_context(&context)?;
        let mut fwd = Fwd::eval(&self.params);
        Ok(self.context_var(&mut fwd, context)?.map(|v| fwd.g.value(v).clone()))
    }

    /// Log-probabilities of the next token after `prefix`.
    pub fn next_log_probs(&self, enc: &Tensor, ctx: Option<&Tensor>, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut fwd = Fwd::eval(&self.params);
        let e = fwd.g.constant(enc.clone())?;
        let c = match ctx {
            Some(t) => Some(fwd.g.constant(t.clone())?),
            None => None,
        };
        let out = fwd.decoder(&self.config, prefix, e, c)?;
        let logits = fwd.g.value(out.logits);
        let row = logits.row(prefix.len() - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|z| z - lse).collect())
    }

    /// `H` of every decoder layer on the context-free path, in eval mode.
    pub fn cross_states(&self, features: &FeatureMatrix, dec_in: &[usize]) -> Result<Vec<Tensor>> {
        if dec_in.is_empty() {
            return usage("decoder input is empty");
        }
        let mut fwd = Fwd::eval(&self.params);
        let enc = fwd.speech_encoder(&self.config, features)?;
        let causal = attention_bias(dec_in.len(), dec_in.len(), true, false).expect("causal bias");
        let mut y = fwd.embed(&self.config, dec_in)?;
        let mut out = Vec::with_capacity(self.config.decoder_layers);
        for i in 0..self.config.decoder_layers {
            let (_, h) = fwd.cross_block(&self.config, i, y, enc, &causal)?;
            out.push(fwd.g.value(h).clone());
            y = fwd.decoder_layer(&self.config, i, y, enc, None, &causal)?.0;
        }
        Ok(out)
    }

    /// Eval-mode logits for a batch of `(features, context, dec_in)` samples.
    pub fn forward_batch(
        &self,
        batch: &[(&FeatureMatrix, ContextInput, &[usize])],
    ) -> Result<Vec<Tensor>> {
        batch
            .iter()
            .map(|(f, c, ids)| {
                let mut fwd = Fwd::eval(&self.params);
                let out = self.forward(&mut fwd, f, *c, ids)?;
                Ok(fwd.g.value(out.logits).clone())
            })
            .collect()
    }
}

/// Mean of `1 - λ` over positions and dimensions, summed over layers.
pub fn gate_penalty(g: &Graph, lambdas: &[Var]) -> f64 {
    lambdas
        .iter()
        .map(|&l| {
            let t = g.value(l);
            t.data().iter().map(|x| 1.0 - x).sum::<f64>() / t.len() as f64
        })
        .sum()
}

pub(crate) fn too_short(frames: usize) -> Error {
    Error::InputTooShort(format!("speech encoder needs at least {MIN_FRAMES} frames, got {frames}"))
}
