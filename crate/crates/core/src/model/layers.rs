use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng as _;

use super::{too_short, ForwardOutput, Integration, ModelConfig};
use crate::audio::FeatureMatrix;
use crate::error::{usage, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Added to masked attention logits; the softmax weight underflows to exactly 0.
const MASKED: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

/// Sinusoidal position table `t × d`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape and data agree")
}

/// Additive attention bias for `tq` queries over `tk` keys: a causal mask
/// and/or the `-ln(1 + |i - j|)` distance penalty.
pub fn attention_bias(tq: usize, tk: usize, causal: bool, distance_penalty: bool) -> Option<Tensor> {
    if !causal && !distance_penalty {
        return None;
    }
    let mut data = vec![0.0; tq * tk];
    for i in 0..tq {
        for j in 0..tk {
            let v = &mut data[i * tk + j];
            if causal && j > i {
                *v = MASKED;
            } else if distance_penalty {
                *v = -((1 + i.abs_diff(j)) as f64).ln();
            }
        }
    }
    Some(Tensor::new(vec![tq, tk], data).expect("shape and data agree"))
}

/// Multi-head scaled dot-product attention over projected `q`, `k`, `v`.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<Var> {
    let (tq, d) = shape2(g, q)?;
    let (tk, dk) = shape2(g, k)?;
    if dk != d || g.shape(v) != [tk, d] || heads == 0 || d % heads != 0 {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        }
        .into());
    }
    if let Some(b) = bias {
        if b.shape() != [tq, tk] {
            return Err(TensorError::Shape {
                op: "attention mask",
                lhs: vec![tq, tk],
                rhs: b.shape().to_vec(),
            }
            .into());
        }
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.matmul_bt(qh, kh)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        if let Some(b) = bias {
            s = g.add_const(s, b)?;
        }
        let p = g.softmax(s)?;
        outs.push(g.matmul(p, vh)?);
    }
    Ok(if heads == 1 { outs[0] } else { g.concat_cols(&outs)? })
}

/// `λ = σ(H·W_h + S·W_s)`, combined `= λ⊙H + (1-λ)⊙S`.
pub fn gate_combine(g: &mut Graph, h: Var, s: Var, w_h: Var, w_s: Var) -> Result<(Var, Var)> {
    if g.shape(h) != g.shape(s) {
        return Err(TensorError::Shape {
            op: "gate_combine",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(s).to_vec(),
        }
        .into());
    }
    let zh = g.matmul(h, w_h)?;
    let zs = g.matmul(s, w_s)?;
    let z = g.add(zh, zs)?;
    let lambda = g.sigmoid(z)?;
    let diff = g.sub(h, s)?;
    let gated = g.mul(lambda, diff)?;
    let out = g.add(s, gated)?;
    Ok((lambda, out))
}

fn shape2(g: &Graph, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Shape {
            op: "attention",
            lhs: s.to_vec(),
            rhs: vec![],
        }
        .into()),
    }
}

/// One forward pass: a graph, the parameters it reads and the dropout source.
/// Without an rng the pass runs in evaluation mode.
pub struct Fwd<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    cache: HashMap<String, Var>,
    dropout: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> Fwd<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Fwd {
            g: Graph::new(),
            store,
            cache: HashMap::new(),
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, rng: &'a mut Rng) -> Self {
        Fwd {
            g: Graph::new(),
            store,
            cache: HashMap::new(),
            dropout,
            rng: Some(rng),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.g = std::mem::take(&mut self.g).with_finite_checks(on);
        self
    }

    /// The graph node of a named parameter; repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))?;
        let v = self.g.param(self.store, id)?;
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.g.mul_const(x, Rc::new(mask))?)
    }

    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.b"))?)
        } else {
            None
        };
        Ok(self.g.linear(x, w, b)?)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gm = self.param(&format!("{prefix}.g"))?;
        let bt = self.param(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, gm, bt, LN_EPS)?)
    }

    /// Projected multi-head attention with output projection.
    pub fn mha(&mut self, xq: Var, xkv: Var, prefix: &str, heads: usize, bias: Option<&Tensor>) -> Result<Var> {
        let q = self.linear(xq, &format!("{prefix}.q"), true)?;
        let k = self.linear(xkv, &format!("{prefix}.k"), true)?;
        let v = self.linear(xkv, &format!("{prefix}.v"), true)?;
        let a = attention(&mut self.g, q, k, v, heads, bias)?;
        self.linear(a, &format!("{prefix}.o"), true)
    }

    pub fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ff1"), true)?;
        let h = self.g.relu(h)?;
        self.linear(h, &format!("{prefix}.ff2"), true)
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        Ok(self.g.add(x, y)?)
    }

    /// Pre-norm self-attention + feed-forward block.
    fn encoder_layer(&mut self, x: Var, prefix: &str, heads: usize, bias: Option<&Tensor>) -> Result<Var> {
        let n = self.norm(x, &format!("{prefix}.ln1"))?;
        let a = self.mha(n, n, &format!("{prefix}.att"), heads, bias)?;
        let x = self.residual(x, a)?;
        let n = self.norm(x, &format!("{prefix}.ln2"))?;
        let f = self.ffn(n, prefix)?;
        self.residual(x, f)
    }

    /// Convolutional front end and self-attention stack over `T × n_mels` features.
    pub fn speech_encoder(&mut self, cfg: &ModelConfig, features: &FeatureMatrix) -> Result<Var> {
        let t = features.frames;
        if t < super::MIN_FRAMES {
            return Err(too_short(t));
        }
        if features.data.len() != t * cfg.n_mels {
            return usage(format!(
                "features have {} values, expected {t}×{}",
                features.data.len(),
                cfg.n_mels
            ));
        }
        let x = self
            .g
            .constant(Tensor::new(vec![1, t, cfg.n_mels], features.data.clone())?)?;
        let mut x = x;
        for conv in ["enc.conv1", "enc.conv2"] {
            let k = self.param(&format!("{conv}.w"))?;
            let b = self.param(&format!("{conv}.b"))?;
            let y = self.g.conv2d(x, k, Some(b), 2, 1)?;
            x = self.g.relu(y)?;
        }
        let (c, tt, f) = match self.g.shape(x) {
            [c, tt, f] => (*c, *tt, *f),
            _ => unreachable!("conv2d output is 3-D"),
        };
        let x = self.g.permute3(x, [1, 0, 2])?;
        let x = self.g.reshape(x, &[tt, c * f])?;
        let x = self.linear(x, "enc.proj", true)?;
        let x = self.g.add_const(x, &positional_encoding(tt, cfg.d_model))?;
        let mut x = self.dropout(x)?;
        let bias = attention_bias(tt, tt, false, cfg.distance_penalty);
        for i in 0..cfg.encoder_layers {
            x = self.encoder_layer(x, &format!("enc.l{i}"), cfg.heads, bias.as_ref())?;
        }
        self.norm(x, "enc.ln")
    }

    pub fn embed(&mut self, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return usage(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }
        let table = self.param("dec.emb")?;
        let e = self.g.embedding(table, ids)?;
        let e = self.g.scale(e, (cfg.d_model as f64).sqrt())?;
        let e = self.g.add_const(e, &positional_encoding(ids.len(), cfg.d_model))?;
        self.dropout(e)
    }

    fn context_layers(&mut self, cfg: &ModelConfig, mut x: Var) -> Result<Var> {
        for j in 0..cfg.context_layers {
            x = self.encoder_layer(x, &format!("ctx.l{j}"), cfg.heads, None)?;
        }
        self.norm(x, "ctx.ln")
    }

    /// Previous translation through the shared decoder embedding and the
    /// context layers. Empty input gives no encoding.
    pub fn context_text(&mut self, cfg: &ModelConfig, ids: &[usize]) -> Result<Option<Var>> {
        if ids.is_empty() {
            return Ok(None);
        }
        let e = self.embed(cfg, ids)?;
        self.context_layers(cfg, e).map(Some)
    }

    /// Previous segment's audio through the speech encoder and the context layers.
    pub fn context_audio(&mut self, cfg: &ModelConfig, features: &FeatureMatrix) -> Result<Option<Var>> {
        if features.is_empty() {
            return Ok(None);
        }
        let e = self.speech_encoder(cfg, features)?;
        self.context_layers(cfg, e).map(Some)
    }

    /// Self-attention and encoder cross-attention of decoder layer `i`;
    /// returns the self-attention output and `H`.
    pub fn cross_block(&mut self, cfg: &ModelConfig, i: usize, y: Var, enc: Var, causal: &Tensor) -> Result<(Var, Var)> {
        let p = format!("dec.l{i}");
        let n = self.norm(y, &format!("{p}.ln1"))?;
        let a = self.mha(n, n, &format!("{p}.self"), cfg.heads, Some(causal))?;
        let a = self.residual(y, a)?;
        let n = self.norm(a, &format!("{p}.ln2"))?;
        let c = self.mha(n, enc, &format!("{p}.cross"), cfg.heads, None)?;
        let h = self.residual(a, c)?;
        Ok((a, h))
    }

    /// One decoder layer. Returns its output and, with context, its gate values.
    pub fn decoder_layer(
        &mut self,
        cfg: &ModelConfig,
        i: usize,
        y: Var,
        enc: Var,
        ctx: Option<Var>,
        causal: &Tensor,
    ) -> Result<(Var, Option<Var>)> {
        let p = format!("dec.l{i}");
        let (a, h) = self.cross_block(cfg, i, y, enc, causal)?;
        let (combined, lambda) = match ctx {
            None => (h, None),
            Some(ctx) => {
                // sequential queries the context with H, parallel with the
                // self-attention output; both residuals keep their query stream
                let q = match cfg.integration {
                    Integration::Sequential => h,
                    Integration::Parallel => a,
                };
                let n = self.norm(q, &format!("{p}.lnc"))?;
                let sc = self.mha(n, ctx, &format!("{p}.catt"), cfg.heads, None)?;
                let s = self.residual(q, sc)?;
                let wh = self.param(&format!("{p}.gate.h.w"))?;
                let ws = self.param(&format!("{p}.gate.s.w"))?;
                let (lambda, out) = gate_combine(&mut self.g, h, s, wh, ws)?;
                (out, Some(lambda))
            }
        };
        let n = self.norm(combined, &format!("{p}.ln3"))?;
        let f = self.ffn(n, &p)?;
        Ok((self.residual(combined, f)?, lambda))
    }

    pub fn decoder(&mut self, cfg: &ModelConfig, dec_in: &[usize], enc: Var, ctx: Option<Var>) -> Result<ForwardOutput> {
        if dec_in.is_empty() {
            return usage("decoder input is empty");
        }
        let causal = attention_bias(dec_in.len(), dec_in.len(), true, false).expect("causal bias");
        let mut y = self.embed(cfg, dec_in)?;
        let mut lambdas = Vec::new();
        for i in 0..cfg.decoder_layers {
            let (out, lambda) = self.decoder_layer(cfg, i, y, enc, ctx, &causal)?;
            y = out;
            lambdas.extend(lambda);
        }
        let y = self.norm(y, "dec.ln")?;
        let logits = self.linear(y, "dec.out", true)?;
        Ok(ForwardOutput { logits, lambdas })
    }
}
