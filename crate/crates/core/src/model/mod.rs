//! Toy Transformer with monotonic decoder-encoder attention.
//!
//! Pre-norm residual blocks, fixed sinusoidal positions, a causal
//! (unidirectional) encoder, and one embedding table shared by source and
//! target. Token ids `0..3` are reserved for padding, start and end.

mod attention;
mod config;
mod decode;

pub use attention::{merge_heads, multihead_attention_on, split_heads};
pub use config::{AlignmentForm, ModelConfig, Variant};
pub use decode::{decode_simultaneous, Action, DecodeOutput, MonotonicState};

use decode::HardScan;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::align::{expected_alignment_parallel_on, expected_alignment_scan_on, milk_attention_on, selection_probs_on};
use crate::error::{contract, shape_err, Error, Result};
use crate::latency::{expected_delays_on, ExpectedDelayGrid};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_CONTENT_TOKEN: usize = 3;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Copy, Debug)]
struct Cross {
    /// For monotonic variants `wq`/`wk` produce the selection energies.
    attn: Attn,
    soft_q: Option<usize>,
    soft_k: Option<usize>,
    offset: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attn,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attn,
    norm_cross: Norm,
    cross: Cross,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<Norm>,
    out_w: usize,
    out_b: usize,
}

enum Init {
    Xavier,
    Embedding,
    Zeros,
    Ones,
    Fill(f64),
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let mut m = |n: &str| self.add(format!("{prefix}.{n}"), vec![d, d], Init::Xavier);
        Attn { wq: m("wq"), wk: m("wk"), wv: m("wv"), wo: m("wo") }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            w1: self.add(format!("{prefix}.w1"), vec![d, f], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), vec![f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![f, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
    let mut b = Builder { specs: Vec::new() };
    let embed = b.add("embed".into(), vec![v, d], Init::Embedding);
    let encoder = (0..cfg.encoder_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncoderLayer {
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, f),
            }
        })
        .collect();
    let encoder_norm = (cfg.encoder_layers > 0).then(|| b.norm("enc.norm", d));
    let decoder = (0..cfg.decoder_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            let norm_self = b.norm(&format!("{p}.norm_self"), d);
            let self_attn = b.attn(&format!("{p}.self_attn"), d);
            let norm_cross = b.norm(&format!("{p}.norm_cross"), d);
            let attn = b.attn(&format!("{p}.cross"), d);
            let (soft_q, soft_k) = if cfg.variant.has_lookback() {
                (
                    Some(b.add(format!("{p}.cross.soft_q"), vec![d, d], Init::Xavier)),
                    Some(b.add(format!("{p}.cross.soft_k"), vec![d, d], Init::Xavier)),
                )
            } else {
                (None, None)
            };
            let offset = cfg.variant.is_monotonic().then(|| {
                b.add(format!("{p}.cross.offset"), vec![cfg.cross_heads()], Init::Fill(cfg.energy_offset))
            });
            DecoderLayer {
                norm_self,
                self_attn,
                norm_cross,
                cross: Cross { attn, soft_q, soft_k, offset },
                norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, f),
            }
        })
        .collect();
    let decoder_norm = (cfg.decoder_layers > 0).then(|| b.norm("dec.norm", d));
    let out_w = b.add("out.w".into(), vec![d, v], Init::Xavier);
    let out_b = b.add("out.b".into(), vec![v], Init::Zeros);
    (Layout { embed, encoder, encoder_norm, decoder, decoder_norm, out_w, out_b }, b)
}

/// Trainable scalar counts by block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding: usize,
    pub encoder: usize,
    pub decoder: usize,
    /// Projection matrices of all decoder-encoder attentions (excludes offsets).
    pub cross_projections: usize,
    pub output: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embedding + self.encoder + self.decoder + self.output
    }
}

/// Exact number of trainable scalars for `cfg`, by block.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
    let norm = 2 * d;
    let attn = 4 * d * d;
    let ffn = d * f + f + f * d + d;
    let encoder = cfg.encoder_layers * (2 * norm + attn + ffn) + if cfg.encoder_layers > 0 { norm } else { 0 };
    let cross_proj = match cfg.variant {
        Variant::Offline | Variant::MmaH => 4 * d * d,
        Variant::Milk | Variant::MmaIl => 6 * d * d,
    };
    let offsets = if cfg.variant.is_monotonic() { cfg.cross_heads() } else { 0 };
    let decoder = cfg.decoder_layers * (3 * norm + attn + cross_proj + offsets + ffn)
        + if cfg.decoder_layers > 0 { norm } else { 0 };
    ParamCount {
        embedding: v * d,
        encoder,
        decoder,
        cross_projections: cfg.decoder_layers * cross_proj,
        output: d * v + v,
    }
}

/// Model parameters bound to one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Forward by-products on the graph.
pub struct ForwardVars {
    /// `[U, vocab]`.
    pub logits: Var,
    /// Per decoder layer `α[H, U, T]` (empty for the offline variant).
    pub alphas: Vec<Var>,
    /// Per decoder layer `β[H, U, T]` for lookback variants.
    pub betas: Vec<Var>,
    /// Expected delays of every head, `[L·H, U]`.
    pub delays: Option<Var>,
}

/// Values produced by [`Model::decoder_forward_train`].
#[derive(Clone, Debug)]
pub struct TrainOutput<S> {
    pub logits: Tensor<S>,
    pub alpha: Vec<Tensor<S>>,
    pub beta: Vec<Tensor<S>>,
    pub delays: Option<ExpectedDelayGrid<S>>,
}

/// Positions chosen by each monotonic head of one layer, `[row][head]`, 1-based.
pub(crate) type HardPositions = Vec<Vec<usize>>;

#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    params: Vec<Param<S>>,
    layout: Layout,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with fan-based uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<S> = match init {
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        let dist = Uniform::new_inclusive(-bound, bound);
                        (0..n).map(|_| S::from_acc(dist.sample(&mut rng))).collect()
                    }
                    Init::Embedding => {
                        let dist = Normal::new(0.0, (config.d_model as f64).powf(-0.5)).expect("valid std");
                        (0..n).map(|_| S::from_acc(dist.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                    Init::Fill(v) => vec![S::from_acc(v); n],
                };
                Param { name, value: Tensor::new(shape, data).expect("init shape") }
            })
            .collect();
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from named parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param<S>>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        if builder.specs.len() != params.len() {
            return Err(Error::Version(format!(
                "config expects {} parameter arrays, found {}",
                builder.specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in builder.specs.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Version(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroes the monotonic query projections and sets every energy offset
    /// to `energy`, so every selection energy equals `energy` exactly.
    pub fn set_constant_monotonic_energy(&mut self, energy: f64) {
        for layer in self.layout.decoder.clone() {
            self.params[layer.cross.attn.wq].value.data_mut().iter_mut().for_each(|v| *v = S::zero());
            if let Some(o) = layer.cross.offset {
                self.params[o].value.data_mut().iter_mut().for_each(|v| *v = S::from_acc(energy));
            }
        }
    }

    /// Multiplies every selection energy by `factor` (query projection and offset).
    pub fn scale_monotonic_energy(&mut self, factor: f64) {
        let f = S::from_acc(factor);
        for layer in self.layout.decoder.clone() {
            self.params[layer.cross.attn.wq].value.data_mut().iter_mut().for_each(|v| *v *= f);
            if let Some(o) = layer.cross.offset {
                self.params[o].value.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    /// Loads all parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect() }
    }

    fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(contract(format!("{what} token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        if tokens.len() > self.config.max_len {
            return Err(contract(format!(
                "{what} of length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    fn norm_on(&self, g: &mut Graph<S>, b: &Bound, n: Norm, x: Var) -> Result<Var> {
        let h = g.layer_norm(x, LN_EPS);
        let h = g.mul(h, b.at(n.gain))?;
        g.add(h, b.at(n.bias))
    }

    fn ffn_on(&self, g: &mut Graph<S>, b: &Bound, f: Ffn, x: Var) -> Result<Var> {
        let h = g.matmul(x, b.at(f.w1))?;
        let h = g.add(h, b.at(f.b1))?;
        let h = g.relu(h);
        let h = g.matmul(h, b.at(f.w2))?;
        g.add(h, b.at(f.b2))
    }

    fn embed_on<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        tokens: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let e = g.embedding(b.at(self.layout.embed), tokens)?;
        let e = g.scale(e, S::from_acc((d as f64).sqrt()));
        let pe = g.constant(sinusoidal_positions(tokens.len(), d));
        let x = g.add(e, pe)?;
        g.dropout(x, self.config.dropout, training, rng)
    }

    /// Causal encoder over `tokens` (which should already end with the end token).
    pub fn encode_on<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        tokens: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(contract("cannot encode an empty source"));
        }
        self.check_tokens(tokens, "source")?;
        let (h, p) = (self.config.n_heads, self.config.dropout);
        let mask = g.constant(causal_mask(tokens.len()));
        let mut x = self.embed_on(g, b, tokens, training, rng)?;
        for layer in &self.layout.encoder {
            let n = self.norm_on(g, b, layer.norm_attn, x)?;
            let a = layer.attn;
            let att = multihead_attention_on(g, n, n, b.at(a.wq), b.at(a.wk), b.at(a.wv), b.at(a.wo), h, Some(mask))?;
            let att = g.dropout(att, p, training, rng)?;
            x = g.add(x, att)?;
            let n = self.norm_on(g, b, layer.norm_ffn, x)?;
            let f = self.ffn_on(g, b, layer.ffn, n)?;
            let f = g.dropout(f, p, training, rng)?;
            x = g.add(x, f)?;
        }
        match self.layout.encoder_norm {
            Some(n) => self.norm_on(g, b, n, x),
            None => Ok(x),
        }
    }

    /// Encoder states `m[T, d_model]` as plain values (eval mode).
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = self.encode_on(&mut g, &b, tokens, false, &mut rng)?;
        Ok(g.value(m).clone())
    }

    /// Selection energies `e[H, U, T]` of one decoder layer's monotonic heads.
    fn monotonic_energy_on(&self, g: &mut Graph<S>, b: &Bound, c: Cross, query: Var, mem: Var) -> Result<Var> {
        let hc = self.config.cross_heads();
        let dk = self.config.d_model / hc;
        let q = g.matmul(query, b.at(c.attn.wq))?;
        let q = split_heads(g, q, hc)?;
        let k = g.matmul(mem, b.at(c.attn.wk))?;
        let k = split_heads(g, k, hc)?;
        let kt = g.transpose_last2(k)?;
        let e = g.matmul(q, kt)?;
        let e = g.scale(e, S::from_acc(1.0 / (dk as f64).sqrt()));
        let off = c.offset.ok_or_else(|| contract("offline attention has no selection energy"))?;
        let (u, t) = (g.shape(e)[1], g.shape(e)[2]);
        let off = g.expand(b.at(off), 1, u)?;
        let off = g.expand(off, 2, t)?;
        g.add(e, off)
    }

    /// Soft energies `u[H, U, T]` for lookback heads.
    fn soft_energy_on(&self, g: &mut Graph<S>, b: &Bound, c: Cross, query: Var, mem: Var) -> Result<Var> {
        let hc = self.config.cross_heads();
        let dk = self.config.d_model / hc;
        let (sq, sk) = match (c.soft_q, c.soft_k) {
            (Some(q), Some(k)) => (q, k),
            _ => return Err(contract("variant has no soft energy")),
        };
        let q = g.matmul(query, b.at(sq))?;
        let q = split_heads(g, q, hc)?;
        let k = g.matmul(mem, b.at(sk))?;
        let k = split_heads(g, k, hc)?;
        let kt = g.transpose_last2(k)?;
        let e = g.matmul(q, kt)?;
        Ok(g.scale(e, S::from_acc(1.0 / (dk as f64).sqrt())))
    }

    /// `weights[H, U, T] @ V` merged and projected.
    fn weighted_context_on(&self, g: &mut Graph<S>, b: &Bound, c: Cross, weights: Var, mem: Var) -> Result<Var> {
        let v = g.matmul(mem, b.at(c.attn.wv))?;
        let v = split_heads(g, v, self.config.cross_heads())?;
        let ctx = g.matmul(weights, v)?;
        let ctx = merge_heads(g, ctx)?;
        g.matmul(ctx, b.at(c.attn.wo))
    }

    /// Hard-position attention weights `[H, rows, T]`: one-hot for hard
    /// heads, softmax over the prefix `1..=t` for lookback heads.
    fn hard_weights_on(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        c: Cross,
        query: Var,
        mem: Var,
        positions: &HardPositions,
    ) -> Result<Var> {
        let hc = self.config.cross_heads();
        let rows = positions.len();
        let t = g.shape(mem)[0];
        if self.config.variant.has_lookback() {
            let u = self.soft_energy_on(g, b, c, query, mem)?;
            let mut mask = vec![S::zero(); hc * rows * t];
            for (r, heads) in positions.iter().enumerate() {
                for (h, &pos) in heads.iter().enumerate() {
                    for j in pos..t {
                        mask[(h * rows + r) * t + j] = S::neg_infinity();
                    }
                }
            }
            let mask = g.constant(Tensor::new(vec![hc, rows, t], mask)?);
            let masked = g.add(u, mask)?;
            g.softmax_lastdim(masked)
        } else {
            let mut w = vec![S::zero(); hc * rows * t];
            for (r, heads) in positions.iter().enumerate() {
                for (h, &pos) in heads.iter().enumerate() {
                    w[(h * rows + r) * t + pos - 1] = S::one();
                }
            }
            Ok(g.constant(Tensor::new(vec![hc, rows, t], w)?))
        }
    }

    /// Teacher-forced forward pass on `g`. `source` and `target` are content
    /// tokens; the end token is appended to both, and the decoder input is
    /// the target shifted right behind the start token.
    pub fn forward_on<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        source: &[usize],
        target: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let src = with_eos(source);
        let tgt_in: Vec<usize> = std::iter::once(BOS).chain(target.iter().copied()).collect();
        self.check_tokens(&tgt_in, "target")?;
        let mem = self.encode_on(g, b, &src, training, rng)?;
        let fv = self.decode_layers_on(g, b, mem, &tgt_in, None, training, rng)?;
        Ok(fv.expect("expected attention never requests reads"))
    }

    /// Runs the decoder stack. Without `hard` the expected (training-time)
    /// attention is used. With `hard`, the last row's head positions are
    /// found by threshold scanning; `None` is returned when some head needs
    /// a source token that has not been revealed yet.
    #[allow(clippy::too_many_arguments)]
    fn decode_layers_on<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        mem: Var,
        tgt_in: &[usize],
        mut hard: Option<&mut HardScan>,
        training: bool,
        rng: &mut R,
    ) -> Result<Option<ForwardVars>> {
        let cfg = &self.config;
        let (h, p) = (cfg.n_heads, cfg.dropout);
        let u = tgt_in.len();
        let mask = g.constant(causal_mask(u));
        let mut x = self.embed_on(g, b, tgt_in, training, rng)?;
        let (mut alphas, mut betas, mut delays) = (Vec::new(), Vec::new(), Vec::new());
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let n = self.norm_on(g, b, layer.norm_self, x)?;
            let a = layer.self_attn;
            let att = multihead_attention_on(g, n, n, b.at(a.wq), b.at(a.wk), b.at(a.wv), b.at(a.wo), h, Some(mask))?;
            let att = g.dropout(att, p, training, rng)?;
            x = g.add(x, att)?;

            let query = self.norm_on(g, b, layer.norm_cross, x)?;
            let c = layer.cross;
            let ctx = if !cfg.variant.is_monotonic() {
                let a = c.attn;
                multihead_attention_on(g, query, mem, b.at(a.wq), b.at(a.wk), b.at(a.wv), b.at(a.wo), h, None)?
            } else if let Some(scan) = hard.as_deref_mut() {
                let e = self.monotonic_energy_on(g, b, c, query, mem)?;
                if !scan.scan_layer(l, g.value(e)) {
                    return Ok(None);
                }
                let w = self.hard_weights_on(g, b, c, query, mem, &scan.layer_positions(l))?;
                self.weighted_context_on(g, b, c, w, mem)?
            } else {
                let e = self.monotonic_energy_on(g, b, c, query, mem)?;
                let probs = selection_probs_on(g, e, training, cfg.noise_var, cfg.epsilon_p, rng)?;
                let alpha = match cfg.alignment {
                    AlignmentForm::Recurrent => expected_alignment_scan_on(g, probs, cfg.end_of_source)?,
                    AlignmentForm::Parallel => {
                        expected_alignment_parallel_on(g, probs, cfg.epsilon_denom, cfg.end_of_source)?
                    }
                };
                alphas.push(alpha);
                delays.push(expected_delays_on(g, alpha)?);
                let w = if cfg.variant.has_lookback() {
                    let soft = self.soft_energy_on(g, b, c, query, mem)?;
                    let beta = milk_attention_on(g, alpha, soft)?;
                    betas.push(beta);
                    beta
                } else {
                    alpha
                };
                self.weighted_context_on(g, b, c, w, mem)?
            };
            let ctx = g.dropout(ctx, p, training, rng)?;
            x = g.add(x, ctx)?;

            let n = self.norm_on(g, b, layer.norm_ffn, x)?;
            let f = self.ffn_on(g, b, layer.ffn, n)?;
            let f = g.dropout(f, p, training, rng)?;
            x = g.add(x, f)?;
        }
        if let Some(n) = self.layout.decoder_norm {
            x = self.norm_on(g, b, n, x)?;
        }
        let logits = g.matmul(x, b.at(self.layout.out_w))?;
        let logits = g.add(logits, b.at(self.layout.out_b))?;
        let delays = if delays.is_empty() {
            None
        } else {
            let s = g.stack(&delays, 0)?;
            let n = cfg.decoder_layers * cfg.cross_heads();
            Some(g.reshape(s, &[n, u])?)
        };
        Ok(Some(ForwardVars { logits, alphas, betas, delays }))
    }

    /// Teacher-forced forward pass returning logits and every alignment by-product.
    pub fn decoder_forward_train<R: Rng + ?Sized>(
        &self,
        source: &[usize],
        target: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<TrainOutput<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let fv = self.forward_on(&mut g, &b, source, target, training, rng)?;
        let cfg = &self.config;
        let delays = match fv.delays {
            Some(d) => {
                let t = g.value(d).clone();
                let u = t.shape()[1];
                Some(ExpectedDelayGrid { delays: t.reshape(&[cfg.decoder_layers, cfg.cross_heads(), u])? })
            }
            None => None,
        };
        Ok(TrainOutput {
            logits: g.value(fv.logits).clone(),
            alpha: fv.alphas.iter().map(|&a| g.value(a).clone()).collect(),
            beta: fv.betas.iter().map(|&a| g.value(a).clone()).collect(),
            delays,
        })
    }
}

pub fn with_eos(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// `[n, n]` additive mask hiding future positions.
pub fn causal_mask<S: Scalar>(n: usize) -> Tensor<S> {
    let mut m = vec![S::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = S::neg_infinity();
        }
    }
    Tensor::new(vec![n, n], m).expect("square mask")
}

pub fn sinusoidal_positions<S: Scalar>(n: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(S::from_acc(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![n, d], data).expect("position table")
}

/// Index of the largest entry (first on ties).
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn ensure_2d<S: Scalar>(g: &Graph<S>, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [a, b] => Ok((*a, *b)),
        other => Err(shape_err(format!("{what} must be 2-D, got {other:?}"))),
    }
}
