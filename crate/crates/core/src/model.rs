//! GPT-2 style decoder: configuration, named parameter set, forward pass.
//!
//! Blocks are pre-LayerNorm with learned positional embeddings and causal
//! multi-head attention. The same forward serves the base model, the
//! hard-pruned model and the projected model (whose weights are bound as
//! materialized tape values).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub layer_norm_eps: f64,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Exact parameter count of [`TransformerWeights`] for this config.
    pub fn count_params(&self) -> usize {
        let (v, d, f, s, l) = (
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.seq_len,
            self.n_layers,
        );
        // attention 4·(d² + d), two norms 4·d, ffn 2·d·f + f + d
        let per_layer = 4 * d * d + 9 * d + 2 * d * f + f;
        let head = if self.tied_embeddings { 0 } else { d * v };
        v * d + s * d + head + l * per_layer + 2 * d
    }
}

/// Per-layer parameter slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerParam {
    AttnNormGain,
    AttnNormBias,
    Query,
    QueryBias,
    Key,
    KeyBias,
    Value,
    ValueBias,
    AttnOut,
    AttnOutBias,
    MlpNormGain,
    MlpNormBias,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
}

impl LayerParam {
    pub const ALL: [LayerParam; 16] = [
        LayerParam::AttnNormGain,
        LayerParam::AttnNormBias,
        LayerParam::Query,
        LayerParam::QueryBias,
        LayerParam::Key,
        LayerParam::KeyBias,
        LayerParam::Value,
        LayerParam::ValueBias,
        LayerParam::AttnOut,
        LayerParam::AttnOutBias,
        LayerParam::MlpNormGain,
        LayerParam::MlpNormBias,
        LayerParam::FfnIn,
        LayerParam::FfnInBias,
        LayerParam::FfnOut,
        LayerParam::FfnOutBias,
    ];

    fn tag(self) -> &'static str {
        match self {
            LayerParam::AttnNormGain => "ln1.gain",
            LayerParam::AttnNormBias => "ln1.bias",
            LayerParam::Query => "attn.wq",
            LayerParam::QueryBias => "attn.bq",
            LayerParam::Key => "attn.wk",
            LayerParam::KeyBias => "attn.bk",
            LayerParam::Value => "attn.wv",
            LayerParam::ValueBias => "attn.bv",
            LayerParam::AttnOut => "attn.wo",
            LayerParam::AttnOutBias => "attn.bo",
            LayerParam::MlpNormGain => "ln2.gain",
            LayerParam::MlpNormBias => "ln2.bias",
            LayerParam::FfnIn => "mlp.w1",
            LayerParam::FfnInBias => "mlp.b1",
            LayerParam::FfnOut => "mlp.w2",
            LayerParam::FfnOutBias => "mlp.b2",
        }
    }
}

/// Structured identifier of one model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamName {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize, LayerParam),
    FinalNormGain,
    FinalNormBias,
    /// Output projection, present only with untied embeddings.
    LmHead,
}

/// Which axis of a matrix (or vector) a dimension belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Vocab,
    Positions,
    Width,
    Ffn(usize),
}

impl ParamName {
    /// Canonical parameter order for a config.
    pub fn all(config: &ModelConfig) -> Vec<ParamName> {
        let mut names = vec![ParamName::TokenEmbedding, ParamName::PositionEmbedding];
        for l in 0..config.n_layers {
            names.extend(LayerParam::ALL.iter().map(|&p| ParamName::Layer(l, p)));
        }
        names.push(ParamName::FinalNormGain);
        names.push(ParamName::FinalNormBias);
        if !config.tied_embeddings {
            names.push(ParamName::LmHead);
        }
        names
    }

    /// Semantic axes of the parameter: `[rows, cols]` for matrices, `[len]`
    /// for vectors.
    pub fn dims(self) -> Vec<Dim> {
        use LayerParam::*;
        match self {
            ParamName::TokenEmbedding => vec![Dim::Vocab, Dim::Width],
            ParamName::PositionEmbedding => vec![Dim::Positions, Dim::Width],
            ParamName::LmHead => vec![Dim::Width, Dim::Vocab],
            ParamName::FinalNormGain | ParamName::FinalNormBias => vec![Dim::Width],
            ParamName::Layer(l, p) => match p {
                Query | Key | Value | AttnOut => vec![Dim::Width, Dim::Width],
                FfnIn => vec![Dim::Width, Dim::Ffn(l)],
                FfnOut => vec![Dim::Ffn(l), Dim::Width],
                FfnInBias => vec![Dim::Ffn(l)],
                _ => vec![Dim::Width],
            },
        }
    }

    pub fn shape(self, config: &ModelConfig) -> Vec<usize> {
        self.dims()
            .into_iter()
            .map(|d| match d {
                Dim::Vocab => config.vocab_size,
                Dim::Positions => config.seq_len,
                Dim::Width => config.d_model,
                Dim::Ffn(_) => config.d_ff,
            })
            .collect()
    }

    pub fn is_matrix(self) -> bool {
        self.dims().len() == 2
    }

    /// Initial value kind: gains start at one, biases at zero.
    fn init_kind(self) -> InitKind {
        use LayerParam::*;
        match self {
            ParamName::FinalNormGain
            | ParamName::Layer(_, AttnNormGain)
            | ParamName::Layer(_, MlpNormGain) => InitKind::Ones,
            name if name.is_matrix() => InitKind::Normal,
            _ => InitKind::Zeros,
        }
    }
}

enum InitKind {
    Normal,
    Zeros,
    Ones,
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamName::TokenEmbedding => f.write_str("tok_emb"),
            ParamName::PositionEmbedding => f.write_str("pos_emb"),
            ParamName::LmHead => f.write_str("lm_head"),
            ParamName::FinalNormGain => f.write_str("ln_f.gain"),
            ParamName::FinalNormBias => f.write_str("ln_f.bias"),
            ParamName::Layer(l, p) => write!(f, "h{l}.{}", p.tag()),
        }
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown parameter name {s:?}"));
        match s {
            "tok_emb" => return Ok(ParamName::TokenEmbedding),
            "pos_emb" => return Ok(ParamName::PositionEmbedding),
            "lm_head" => return Ok(ParamName::LmHead),
            "ln_f.gain" => return Ok(ParamName::FinalNormGain),
            "ln_f.bias" => return Ok(ParamName::FinalNormBias),
            _ => {}
        }
        let rest = s.strip_prefix('h').ok_or_else(bad)?;
        let (layer, tag) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        let param = LayerParam::ALL
            .iter()
            .copied()
            .find(|p| p.tag() == tag)
            .ok_or_else(bad)?;
        Ok(ParamName::Layer(layer, param))
    }
}

impl Serialize for ParamName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub mlp_norm_gain: T,
    pub mlp_norm_bias: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

impl<T> LayerWeights<T> {
    fn slot(&self, p: LayerParam) -> &T {
        use LayerParam::*;
        match p {
            AttnNormGain => &self.attn_norm_gain,
            AttnNormBias => &self.attn_norm_bias,
            Query => &self.wq,
            QueryBias => &self.bq,
            Key => &self.wk,
            KeyBias => &self.bk,
            Value => &self.wv,
            ValueBias => &self.bv,
            AttnOut => &self.wo,
            AttnOutBias => &self.bo,
            MlpNormGain => &self.mlp_norm_gain,
            MlpNormBias => &self.mlp_norm_bias,
            FfnIn => &self.w_ff1,
            FfnInBias => &self.b_ff1,
            FfnOut => &self.w_ff2,
            FfnOutBias => &self.b_ff2,
        }
    }

    fn slot_mut(&mut self, p: LayerParam) -> &mut T {
        use LayerParam::*;
        match p {
            AttnNormGain => &mut self.attn_norm_gain,
            AttnNormBias => &mut self.attn_norm_bias,
            Query => &mut self.wq,
            QueryBias => &mut self.bq,
            Key => &mut self.wk,
            KeyBias => &mut self.bk,
            Value => &mut self.wv,
            ValueBias => &mut self.bv,
            AttnOut => &mut self.wo,
            AttnOutBias => &mut self.bo,
            MlpNormGain => &mut self.mlp_norm_gain,
            MlpNormBias => &mut self.mlp_norm_bias,
            FfnIn => &mut self.w_ff1,
            FfnInBias => &mut self.b_ff1,
            FfnOut => &mut self.w_ff2,
            FfnOutBias => &mut self.b_ff2,
        }
    }

    fn iter_mut(&mut self) -> [(LayerParam, &mut T); 16] {
        use LayerParam::*;
        let LayerWeights {
            attn_norm_gain,
            attn_norm_bias,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            mlp_norm_gain,
            mlp_norm_bias,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
        } = self;
        [
            (AttnNormGain, attn_norm_gain),
            (AttnNormBias, attn_norm_bias),
            (Query, wq),
            (QueryBias, bq),
            (Key, wk),
            (KeyBias, bk),
            (Value, wv),
            (ValueBias, bv),
            (AttnOut, wo),
            (AttnOutBias, bo),
            (MlpNormGain, mlp_norm_gain),
            (MlpNormBias, mlp_norm_bias),
            (FfnIn, w_ff1),
            (FfnInBias, b_ff1),
            (FfnOut, w_ff2),
            (FfnOutBias, b_ff2),
        ]
    }

    fn from_fn(mut f: impl FnMut(LayerParam) -> Result<T>) -> Result<Self> {
        use LayerParam::*;
        Ok(Self {
            attn_norm_gain: f(AttnNormGain)?,
            attn_norm_bias: f(AttnNormBias)?,
            wq: f(Query)?,
            bq: f(QueryBias)?,
            wk: f(Key)?,
            bk: f(KeyBias)?,
            wv: f(Value)?,
            bv: f(ValueBias)?,
            wo: f(AttnOut)?,
            bo: f(AttnOutBias)?,
            mlp_norm_gain: f(MlpNormGain)?,
            mlp_norm_bias: f(MlpNormBias)?,
            w_ff1: f(FfnIn)?,
            b_ff1: f(FfnInBias)?,
            w_ff2: f(FfnOut)?,
            b_ff2: f(FfnOutBias)?,
        })
    }
}

/// The full named parameter set, generic over storage so the same layout
/// holds tensors ([`TransformerWeights`]) and tape handles (`Weights<Var>`).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: T,
    pub final_norm_bias: T,
    pub lm_head: Option<T>,
}

pub type TransformerWeights = Weights<Tensor>;

impl<T> Weights<T> {
    /// Builds every slot in canonical order.
    pub fn from_fn(
        n_layers: usize,
        tied_embeddings: bool,
        mut f: impl FnMut(ParamName) -> Result<T>,
    ) -> Result<Self> {
        let token_embedding = f(ParamName::TokenEmbedding)?;
        let position_embedding = f(ParamName::PositionEmbedding)?;
        let layers = (0..n_layers)
            .map(|l| LayerWeights::from_fn(|p| f(ParamName::Layer(l, p))))
            .collect::<Result<Vec<_>>>()?;
        let final_norm_gain = f(ParamName::FinalNormGain)?;
        let final_norm_bias = f(ParamName::FinalNormBias)?;
        let lm_head = if tied_embeddings {
            None
        } else {
            Some(f(ParamName::LmHead)?)
        };
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain,
            final_norm_bias,
            lm_head,
        })
    }

    pub fn names(&self) -> Vec<ParamName> {
        let mut names = vec![ParamName::TokenEmbedding, ParamName::PositionEmbedding];
        for l in 0..self.layers.len() {
            names.extend(LayerParam::ALL.iter().map(|&p| ParamName::Layer(l, p)));
        }
        names.push(ParamName::FinalNormGain);
        names.push(ParamName::FinalNormBias);
        if self.lm_head.is_some() {
            names.push(ParamName::LmHead);
        }
        names
    }

    pub fn get(&self, name: ParamName) -> Option<&T> {
        match name {
            ParamName::TokenEmbedding => Some(&self.token_embedding),
            ParamName::PositionEmbedding => Some(&self.position_embedding),
            ParamName::FinalNormGain => Some(&self.final_norm_gain),
            ParamName::FinalNormBias => Some(&self.final_norm_bias),
            ParamName::LmHead => self.lm_head.as_ref(),
            ParamName::Layer(l, p) => self.layers.get(l).map(|w| w.slot(p)),
        }
    }

    pub fn get_mut(&mut self, name: ParamName) -> Option<&mut T> {
        match name {
            ParamName::TokenEmbedding => Some(&mut self.token_embedding),
            ParamName::PositionEmbedding => Some(&mut self.position_embedding),
            ParamName::FinalNormGain => Some(&mut self.final_norm_gain),
            ParamName::FinalNormBias => Some(&mut self.final_norm_bias),
            ParamName::LmHead => self.lm_head.as_mut(),
            ParamName::Layer(l, p) => self.layers.get_mut(l).map(|w| w.slot_mut(p)),
        }
    }

    /// `(name, value)` pairs in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamName, &T)> {
        self.names()
            .into_iter()
            .map(move |n| (n, self.get(n).expect("name from names()")))
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(ParamName, &T) -> Result<U>) -> Result<Weights<U>> {
        Weights::from_fn(self.layers.len(), self.lm_head.is_none(), |n| {
            f(n, self.get(n).expect("slot exists"))
        })
    }

    /// Mutable `(name, value)` pairs in canonical order.
    pub fn iter_mut(&mut self) -> Vec<(ParamName, &mut T)> {
        let mut out = vec![
            (ParamName::TokenEmbedding, &mut self.token_embedding),
            (ParamName::PositionEmbedding, &mut self.position_embedding),
        ];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.extend(
                lw.iter_mut()
                    .into_iter()
                    .map(|(p, t)| (ParamName::Layer(l, p), t)),
            );
        }
        out.push((ParamName::FinalNormGain, &mut self.final_norm_gain));
        out.push((ParamName::FinalNormBias, &mut self.final_norm_bias));
        if let Some(h) = &mut self.lm_head {
            out.push((ParamName::LmHead, h));
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(ParamName, &mut T)) {
        for (n, t) in self.iter_mut() {
            f(n, t);
        }
    }
}

impl TransformerWeights {
    /// GPT-2 initialization: N(0, 0.02) matrices, zero biases, unit gains.
    /// All parameters are trainable.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Weights::from_fn(config.n_layers, config.tied_embeddings, |name| {
            let shape = name.shape(config);
            let t = match name.init_kind() {
                InitKind::Normal => Tensor::randn(&shape, INIT_STD, &mut rng),
                InitKind::Zeros => Tensor::zeros(&shape),
                InitKind::Ones => Tensor::full(&shape, 1.0),
            };
            Ok(t.with_requires_grad(true))
        })
    }

    /// Checks every tensor's shape against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.n_layers || self.lm_head.is_some() == config.tied_embeddings
        {
            return Err(Error::Config(
                "weights layout does not match config (layers or tying)".into(),
            ));
        }
        for (name, t) in self.iter() {
            let want = name.shape(config);
            if t.shape() != want.as_slice() {
                return Err(Error::shape("weights", t.shape(), &want));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Weights<Var> {
        self.try_map(|_, t| Ok(tape.leaf(t)))
            .expect("binding is infallible")
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.for_each_mut(|_, t| t.set_requires_grad(requires_grad));
    }

    /// Logits `[batch, seq, vocab]` without keeping gradients.
    pub fn logits(&self, config: &ModelConfig, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = forward(&mut tape, &vars, config, tokens, batch)?;
        Ok(tape.tensor(out))
    }
}

/// Tape handles produced by [`Trainable::bind`].
#[derive(Debug)]
pub struct Bound {
    /// Values the forward pass reads.
    pub weights: Weights<Var>,
    /// One entry per [`Trainable::params`] item, in the same order; `None`
    /// for tensors that were not placed on the tape.
    pub leaves: Vec<Option<Var>>,
}

/// A model the trainer can optimize.
pub trait Trainable {
    /// Architecture of the forward pass.
    fn forward_config(&self) -> &ModelConfig;

    fn bind(&self, tape: &mut Tape) -> Result<Bound>;

    /// Every stored tensor (trainable or frozen) with a stable name.
    fn params(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`params`](Self::params).
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = forward(
            &mut tape,
            &bound.weights,
            self.forward_config(),
            tokens,
            batch,
        )?;
        Ok(tape.tensor(out))
    }

    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn frozen_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// A plain decoder: config plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GptModel {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

impl GptModel {
    pub fn new(config: ModelConfig, weights: TransformerWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = TransformerWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }
}

impl Trainable for GptModel {
    fn forward_config(&self) -> &ModelConfig {
        &self.config
    }

    fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let weights = self.weights.bind(tape);
        let leaves = weights.iter().map(|(_, &v)| Some(v)).collect();
        Ok(Bound { weights, leaves })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        self.weights
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.weights
            .iter_mut()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect()
    }
}

/// Records the decoder forward pass; returns logits shaped
/// `[batch, seq, vocab]`. `tokens` is row-major `[batch, seq]`.
pub fn forward(
    tape: &mut Tape,
    w: &Weights<Var>,
    config: &ModelConfig,
    tokens: &[usize],
    batch: usize,
) -> Result<Var> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::shape("forward", &[tokens.len()], &[batch]));
    }
    let seq = tokens.len() / batch;
    if seq > config.seq_len {
        return Err(Error::Config(format!(
            "sequence length {seq} exceeds model context {}",
            config.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad,
            limit: config.vocab_size,
        });
    }
    let heads = config.n_heads;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.embedding(w.token_embedding, tokens)?;
    let pos = tape.embedding(w.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let eps = config.layer_norm_eps;

    for lw in &w.layers {
        let h = tape.layer_norm(x, lw.attn_norm_gain, lw.attn_norm_bias, eps)?;
        let q = linear(tape, h, lw.wq, lw.bq)?;
        let k = linear(tape, h, lw.wk, lw.bk)?;
        let v = linear(tape, h, lw.wv, lw.bv)?;
        let q = tape.split_heads(q, batch, seq, heads)?;
        let k = tape.split_heads(k, batch, seq, heads)?;
        let v = tape.split_heads(v, batch, seq, heads)?;
        let head_dim = tape.shape(q)[2];
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let scores = tape.causal_mask(scores)?;
        let probs = tape.softmax(scores)?;
        let ctx = tape.bmm(probs, v)?;
        let ctx = tape.merge_heads(ctx, batch, seq, heads)?;
        let attn = linear(tape, ctx, lw.wo, lw.bo)?;
        x = tape.add(x, attn)?;

        let h = tape.layer_norm(x, lw.mlp_norm_gain, lw.mlp_norm_bias, eps)?;
        let h = linear(tape, h, lw.w_ff1, lw.b_ff1)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, lw.w_ff2, lw.b_ff2)?;
        x = tape.add(x, h)?;
    }

    let x = tape.layer_norm(x, w.final_norm_gain, w.final_norm_bias, eps)?;
    let logits = match w.lm_head {
        Some(head) => tape.matmul(x, head)?,
        None => tape.matmul_nt(x, w.token_embedding)?,
    };
    let vocab = tape.shape(logits)[1];
    tape.reshape(logits, vec![batch, seq, vocab])
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(tied: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            seq_len: 6,
            layer_norm_eps: 1e-5,
            tied_embeddings: tied,
        }
    }

    #[test]
    fn param_names_round_trip_and_are_unique() {
        for tied in [true, false] {
            let cfg = tiny(tied);
            let names = ParamName::all(&cfg);
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), names.len());
            for n in names {
                assert_eq!(n.to_string().parse::<ParamName>().unwrap(), n);
            }
        }
        assert!("h0.attn.nope".parse::<ParamName>().is_err());
        assert!("x".parse::<ParamName>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = tiny(false);
        let a = TransformerWeights::init(&cfg, 3).unwrap();
        let b = TransformerWeights::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        a.validate(&cfg).unwrap();
        assert_eq!(a.num_params(), cfg.count_params());
        assert!(a.final_norm_gain.data().iter().all(|&v| v == 1.0));
        assert!(a.layers[0].bq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(true);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 2;
        cfg.d_ff = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = tiny(true);
        let w = TransformerWeights::init(&cfg, 1).unwrap();
        assert!(matches!(w.logits(&cfg, &[0; 7], 1), Err(Error::Config(_))));
        assert!(matches!(
            w.logits(&cfg, &[0, 11], 1),
            Err(Error::Index { index: 11, .. })
        ));
    }
}
